"""Small UNet with an explicit split between batchnorm-affine and frozen parameters.

Layout for ``depth`` d and ``base_width`` w (every block is two 3x3 conv +
batchnorm + ReLU layers, convs without bias):

    enc_l     l = 0..d-1    channels w * 2**l, followed by 2x2 max-pool
    bottleneck              channels w * 2**d
    dec_l     l = d-1..0    nearest 2x upsample, concat skip enc_l, channels w * 2**l
    head                    1x1 conv with bias to K classes

See ``docs/architecture.md`` for the parameter table.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_AFFINE = "bn_affine"
FROZEN = "frozen"

CHECKPOINT_MAGIC = b"SHTTACKP"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_width: int = 8
    depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width < 1:
            raise ValueError(f"base_width must be >= 1, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")


@dataclass
class ParameterStore:
    """Named parameters plus batchnorm running statistics.

    ``tags`` maps every parameter name to ``"bn_affine"`` or ``"frozen"``.
    ``buffers`` holds running mean/variance arrays keyed ``<layer>.running_mean``
    and ``<layer>.running_var``; they are not parameters.
    """

    config: NetworkConfig
    params: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.params[name]

    def names(self, tag=None):
        return [n for n in self.params if tag is None or self.tags[n] == tag]

    def copy(self, dtype=None):
        out = ParameterStore(self.config)
        for name, p in self.params.items():
            out.params[name] = Tensor(p.data.astype(dtype or p.dtype, copy=True))
        out.tags = dict(self.tags)
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def snapshot(self):
        return {name: p.data.copy() for name, p in self.params.items()}

    def num_parameters(self, tag=None):
        return sum(self.params[n].data.size for n in self.names(tag))

    def set_trainable(self, names):
        names = set(names)
        for name, p in self.params.items():
            p.requires_grad = name in names
            p.grad = np.zeros_like(p.data) if p.requires_grad else None


def _stage_channels(config):
    w, d = config.base_width, config.depth
    enc = [w * 2**level for level in range(d)]
    return enc, w * 2**d


def layer_plan(config):
    """Ordered (block_name, in_channels, out_channels) for every conv block."""
    enc, bott = _stage_channels(config)
    plan = []
    c_in = config.in_channels
    for level, c in enumerate(enc):
        plan.append((f"enc{level}", c_in, c))
        c_in = c
    plan.append(("bottleneck", c_in, bott))
    c_below = bott
    for level in reversed(range(config.depth)):
        plan.append((f"dec{level}", c_below + enc[level], enc[level]))
        c_below = enc[level]
    return plan


def build(config):
    """Deterministically initialize a network: He fan-in conv weights, gamma=1, beta=0."""
    rng = np.random.default_rng(config.seed)
    store = ParameterStore(config)

    def add(name, array, tag):
        store.params[name] = Tensor(array.astype(np.float32))
        store.tags[name] = tag

    for block, c_in, c_out in layer_plan(config):
        for i, cin in enumerate((c_in, c_out)):
            layer = f"{block}.conv{i}"
            fan_in = cin * 9
            add(f"{layer}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), (c_out, cin, 3, 3)), FROZEN)
            bn = f"{block}.bn{i}"
            add(f"{bn}.gamma", np.ones(c_out), BN_AFFINE)
            add(f"{bn}.beta", np.zeros(c_out), BN_AFFINE)
            store.buffers[f"{bn}.running_mean"] = np.zeros(c_out, dtype=np.float32)
            store.buffers[f"{bn}.running_var"] = np.ones(c_out, dtype=np.float32)
    w = config.base_width
    add("head.weight", rng.normal(0.0, np.sqrt(2.0 / w), (config.num_classes, w, 1, 1)), FROZEN)
    add("head.bias", np.zeros(config.num_classes), FROZEN)
    return store


def adaptable_parameters(store):
    """The batchnorm scale/bias tensors, in layer order."""
    return [store.params[n] for n in store.names(BN_AFFINE)]


def _block(store, x, block, training, update_stats):
    for i in range(2):
        x = T.conv2d(x, store.params[f"{block}.conv{i}.weight"], padding=1)
        bn = f"{block}.bn{i}"
        stats = (store.buffers[f"{bn}.running_mean"], store.buffers[f"{bn}.running_var"])
        if training and not update_stats:
            stats = (None, None)
        x = T.batch_norm(x, store.params[f"{bn}.gamma"], store.params[f"{bn}.beta"], *stats, training=training)
        x = T.relu(x)
    return x


def forward(store, batch, mode="train", update_stats=False):
    """Run the network on a B x C x H x W batch.

    ``mode="train"`` normalizes with the statistics of ``batch`` itself;
    ``mode="eval"`` uses the stored running statistics.  ``update_stats``
    (train mode only) folds the batch statistics into the running buffers.

    Returns ``(logits, softmax)``, both B x K x H x W tensors.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    config = store.config
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4 or x.shape[1] != config.in_channels:
        raise T.ShapeError("forward", x.shape, detail=f"expected B x {config.in_channels} x H x W")
    div = 2**config.depth
    if x.shape[2] % div or x.shape[3] % div:
        raise T.ShapeError("forward", x.shape, detail=f"H and W must be divisible by 2**depth = {div}")
    dtype = store.params["head.weight"].dtype
    if x.dtype != dtype:
        x = Tensor(x.data.astype(dtype))
    training = mode == "train"

    skips = []
    for level in range(config.depth):
        x = _block(store, x, f"enc{level}", training, update_stats)
        skips.append(x)
        x = T.max_pool2d(x)
    x = _block(store, x, "bottleneck", training, update_stats)
    for level in reversed(range(config.depth)):
        x = T.upsample_nearest(x)
        x = T.concat([x, skips[level]], axis=1)
        x = _block(store, x, f"dec{level}", training, update_stats)
    logits = T.conv2d(x, store.params["head.weight"], store.params["head.bias"])
    return logits, T.softmax(logits, axis=1)


def predict(store, images, mode="eval"):
    """Argmax labels for an N x H x W (or N x C x H x W) stack without recording a graph."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    with T.no_grad():
        _, probs = forward(store, images, mode=mode)
    return probs.data.argmax(axis=1).astype(np.uint8), probs.data


# -- checkpoint file ---------------------------------------------------------
def save_checkpoint(store, path, extra=None):
    """Write JSON manifest followed by little-endian f32 payloads in manifest order.

    Layout: 8-byte magic ``SHTTACKP``, u64 LE manifest length, UTF-8 JSON
    manifest, then each tensor's f32 values in C order.
    """
    entries = []
    payloads = []
    for name, p in store.params.items():
        entries.append({"name": name, "shape": list(p.shape), "kind": store.tags[name]})
        payloads.append(p.data)
    for name, buf in store.buffers.items():
        entries.append({"name": name, "shape": list(buf.shape), "kind": "buffer"})
        payloads.append(buf)
    manifest = {"config": asdict(store.config), "seed": store.config.seed, "tensors": entries}
    if extra:
        manifest["extra"] = extra
    head = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in payloads:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + n:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(raw[16 : 16 + n])
    store = ParameterStore(NetworkConfig(**manifest["config"]))
    offset = 16 + n
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: payload truncated at tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(entry["shape"])
        arr = arr.astype(np.float32)
        if entry["kind"] == "buffer":
            store.buffers[entry["name"]] = arr
        else:
            store.params[entry["name"]] = Tensor(arr)
            store.tags[entry["name"]] = entry["kind"]
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return store


def parameter_digest(store, tag=None):
    """SHA-256 over the raw bytes of the selected parameters, in store order."""
    h = hashlib.sha256()
    for name in store.names(tag):
        h.update(name.encode())
        h.update(np.ascontiguousarray(store.params[name].data).tobytes())
    return h.hexdigest()
