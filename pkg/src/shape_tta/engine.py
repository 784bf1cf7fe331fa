"""Optimization loops: source pretraining and single-subject test-time adaptation."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from . import data, losses, moments, priors, segnet
from . import tensor as T

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


def lr_at(epoch, base=5e-4, decay=0.9, every=20):
    """Step decay: ``base * decay ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return base * decay ** (epoch // every)


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class SchedulePhase:
    phase: str
    epochs: int
    lr: float = 5e-4
    decay: float = 0.9
    decay_every: int = 20

    def __post_init__(self):
        if self.phase not in ("pretrain", "tta_init", "tta_shape"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 150
    lr: float = 5e-4
    decay: float = 0.9
    decay_every: int = 20
    weight_decay: float = 1e-4
    batch_size: int = 16
    augment: bool = True
    seed: int = 0
    precision: str = "float64"


@dataclass(frozen=True)
class AdaptConfig:
    epochs_init: int = 150
    epochs_shape: int = 200
    lr: float = 5e-4
    decay: float = 0.9
    decay_every: int = 20
    weight_decay: float = 1e-4
    max_batch: int = 22
    seed: int = 0
    precision: str = "float64"
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)


# -- pretraining ---------------------------------------------------------------
def cross_entropy_logits(onehot, logits):
    """Cross-entropy from logits via log-softmax; per-slice pixel means summed over slices."""
    logp = T.log_softmax(logits, axis=1)
    return (-(T.Tensor(onehot.astype(logp.dtype)) * logp).sum(axis=1)).mean(axis=(1, 2)).sum()


def pretrain(subjects, config=PretrainConfig(), net_config=segnet.NetworkConfig()):
    """Train every parameter on labelled source subjects with cross-entropy.

    Returns ``(store, trace)`` where ``trace`` lists the mean per-slice loss of
    every epoch.  Batchnorm running statistics are accumulated along the way.
    """
    subjects = [s for s in subjects if s.num_slices]
    if not subjects:
        raise ValueError("pretraining needs at least one labelled source subject")
    if any(s.labels is None for s in subjects):
        raise ValueError("pretraining subjects must carry labels")
    dtype = DTYPES[config.precision]
    store = segnet.build(net_config).copy(dtype)
    store.set_trainable(store.names())
    opt = Adam(store.params.values(), lr=config.lr, weight_decay=config.weight_decay)
    K = net_config.num_classes
    normalized = [
        data.SubjectVolume(data.normalize(s.intensities).astype(np.float32), s.labels, s.subject_id) for s in subjects
    ]
    trace = []
    for epoch in range(config.epochs):
        imgs, labs = [], []
        for i, s in enumerate(normalized):
            if config.augment:
                s = data.augment_affine(s, [config.seed, epoch, i])
            imgs.append(s.intensities)
            labs.append(s.labels)
        imgs = np.concatenate(imgs)[:, None].astype(dtype)
        labs = np.concatenate(labs)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(imgs))
        lr = lr_at(epoch, config.lr, config.decay, config.decay_every)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # batch statistics of a single slice are degenerate
            opt.zero_grad()
            logits, _ = segnet.forward(store, imgs[idx], mode="train", update_stats=True)
            loss = cross_entropy_logits(moments.one_hot(labs[idx], K), logits)
            loss.backward()
            opt.step(lr)
            total += loss.item()
            count += len(idx)
        trace.append(total / max(count, 1))
        log.info("pretrain epoch %d loss %.4f lr %.2e", epoch, trace[-1], lr)
    return store.copy(np.float32), trace


# -- test-time adaptation --------------------------------------------------------
@dataclass
class AdaptResult:
    store: segnet.ParameterStore
    prediction: np.ndarray  # N x H x W uint8
    probabilities: np.ndarray  # N x K x H x W
    trace: list
    prior: priors.DescriptorPrior


class Adaptation:
    """Stateful single-subject adaptation run.

    Only batchnorm scale/bias tensors are optimized.  Every batch is normalized
    with its own statistics.  ``fork`` deep-copies the whole state (parameters,
    optimizer moments, RNG, priors, trace) so a shared initial phase can branch
    into several shape-constrained continuations.
    """

    def __init__(self, store, volume, ratio_prior, config=AdaptConfig(), tags=None):
        dtype = DTYPES[config.precision]
        self.config = config
        self.images = data.normalize(volume.intensities)[:, None].astype(dtype)
        self.num_slices = len(self.images)
        self.store = store.copy(dtype)
        self.store.set_trainable(self.store.names(segnet.BN_AFFINE))
        self.opt = Adam(segnet.adaptable_parameters(self.store), lr=config.lr, weight_decay=config.weight_decay)
        self.prior = priors.load_ratio_prior(ratio_prior, tags=tags)
        self.rng = np.random.default_rng(config.seed)
        batch = min(self.num_slices, config.max_batch)
        self.windows = [(s, min(s + batch, self.num_slices)) for s in range(0, self.num_slices, batch)]
        self.epoch = 0
        self.trace = []
        self.masks = None

    @property
    def num_classes(self):
        return self.store.config.num_classes

    def fork(self):
        twin = copy.copy(self)
        twin.store = self.store.copy()
        twin.store.set_trainable(twin.store.names(segnet.BN_AFFINE))
        twin.opt = copy.deepcopy(self.opt)
        twin.opt.params = segnet.adaptable_parameters(twin.store)
        twin.rng = copy.deepcopy(self.rng)
        twin.trace = list(self.trace)
        twin.masks = None if self.masks is None else self.masks.copy()
        return twin

    def _run_epoch(self, mode, phase):
        lr = lr_at(self.epoch, self.config.lr, self.config.decay, self.config.decay_every)
        sums = dict.fromkeys(("entropy_term", "kl_term", "penalty_term", "total"), 0.0)
        masks = np.zeros((self.num_slices,) + self.images.shape[2:], dtype=np.uint8)
        for w in self.rng.permutation(len(self.windows)):
            s, e = self.windows[w]
            self.opt.zero_grad()
            _, probs = segnet.forward(self.store, self.images[s:e], mode="train")
            parts = losses.ttas_objective(probs, self.prior, self.config.weights, mode, np.arange(s, e))
            parts.total.backward()
            self.opt.step(lr)
            for k, v in parts.values().items():
                sums[k] += v
            masks[s:e] = probs.data.argmax(axis=1)
        self.masks = masks
        self.trace.append({"epoch": self.epoch, "phase": phase, **sums, "lr": lr})
        self.epoch += 1

    def _current_masks(self):
        if self.masks is None:
            self.masks = self.predict()[0]
        return self.masks

    def _estimate(self, descriptor):
        est = priors.estimate_moment_prior(self._current_masks(), descriptor, self.prior.eps, self.num_classes)
        if np.isnan(est[1:]).all():
            log.warning("no foreground class qualifies for a %s prior; shape penalty is inert", descriptor)
        self.prior = self.prior.with_moment(descriptor, est)

    def run_init(self, epochs=None, mode="R_only"):
        """Entropy + class-ratio KL phase (``mode="tent"`` drops the KL)."""
        if mode not in ("R_only", "tent"):
            raise ValueError(f"initial phase runs R_only or tent, got {mode!r}")
        for _ in range(self.config.epochs_init if epochs is None else epochs):
            self._run_epoch(mode, "tta_init")
        return self

    def run_shape(self, mode, epochs=None):
        """Add the centroid (RC) or distance-to-centroid (RD) band penalty.

        The moment prior is estimated from the latest prediction masks before
        the first epoch and re-estimated after every epoch.
        """
        if mode not in losses.SHAPE_DESCRIPTOR:
            raise ValueError(f"shape phase needs mode RC or RD, got {mode!r}")
        descriptor = losses.SHAPE_DESCRIPTOR[mode]
        self._estimate(descriptor)
        for _ in range(self.config.epochs_shape if epochs is None else epochs):
            self._run_epoch(mode, "tta_shape")
            self._estimate(descriptor)
        return self

    def predict(self):
        """Argmax labels with the current parameters and whole-subject batch statistics."""
        with T.no_grad():
            _, probs = segnet.forward(self.store, self.images, mode="train")
        return probs.data.argmax(axis=1).astype(np.uint8), probs.data

    def result(self):
        pred, probs = self.predict()
        return AdaptResult(self.store.copy(np.float32), pred, probs, list(self.trace), self.prior)


def adapt_subject(store, volume, mode, ratio_prior, config=AdaptConfig(), tags=None):
    """Adapt batchnorm affine parameters on one unlabelled subject.

    ``mode`` is ``tent``, ``R_only``, ``RC`` or ``RD``.  The initial phase runs
    ``config.epochs_init`` epochs; RC/RD then add ``config.epochs_shape`` epochs
    with the shape penalty.  The subject's labels, if any, are never read.
    """
    if mode not in losses.MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {losses.MODES}")
    run = Adaptation(store, volume.without_labels(), ratio_prior, config, tags)
    run.run_init(mode="tent" if mode == "tent" else "R_only")
    if mode in losses.SHAPE_DESCRIPTOR:
        run.run_shape(mode)
    return run.result()


def predict_noadap(store, volume):
    """Source model as-is: eval-mode batchnorm with the stored running statistics."""
    images = data.normalize(volume.intensities)[:, None]
    return segnet.predict(store, images, mode="eval")
