"""Adaptation objectives: weighted entropy, class-ratio KL and the shape band penalty.

Batch inputs are B x K x H x W softmax tensors.  Per-slice terms are averaged
over the pixels of a slice and then summed over the slices of the batch, so a
batch of one slice gives the per-pixel means directly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import moments
from . import tensor as T

log = logging.getLogger(__name__)

EPS_LOG = 1e-12
MODES = ("RC", "RD", "R_only", "tent")
SHAPE_DESCRIPTOR = {"RC": "C", "RD": "D"}


@dataclass(frozen=True)
class LossWeights:
    """Weights of the adaptation objective.

    ``nu`` may be None, in which case per-slice class weights are derived from
    the ratio prior (see :func:`shape_tta.priors.compute_class_weights`).
    ``printed_penalty`` switches :func:`band_penalty` to the literal
    ``[m - 0.9 m_ref]_+^2 + [1.1 m_ref - m]_+^2`` form, for comparison only.
    """

    nu: tuple | None = None
    lam: float = 1e-4
    kl_weight: float = 1.0
    band: float = 0.1
    printed_penalty: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0.0 < self.band < 1.0:
            raise ValueError(f"band must lie in (0, 1), got {self.band}")
        if self.nu is not None:
            nu = np.asarray(self.nu, dtype=float)
            if np.any(nu < 0) or abs(nu.sum() - 1.0) > 1e-9:
                raise ValueError(f"nu must be a probability vector, got {self.nu}")


@dataclass
class LossBreakdown:
    entropy_term: T.Tensor
    kl_term: T.Tensor
    penalty_term: T.Tensor
    total: T.Tensor

    def values(self):
        return {k: float(getattr(self, k).data) for k in ("entropy_term", "kl_term", "penalty_term", "total")}


def _clamped_log(x):
    return T.log(T.maximum(x, EPS_LOG))


def _per_slice(x):
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape)
    return x


def cross_entropy(y, S):
    """Mean over pixels of -sum_k y_k log s_k, summed over slices."""
    S = _per_slice(T.as_tensor(S))
    y = np.asarray(y.data if isinstance(y, T.Tensor) else y)
    if y.ndim == 3:
        y = y[None]
    if y.shape != S.shape:
        raise T.ShapeError("cross_entropy", y.shape, S.shape)
    pix = -(T.Tensor(y.astype(S.dtype)) * _clamped_log(S)).sum(axis=1)
    return pix.mean(axis=(1, 2)).sum()


def weighted_entropy(S, nu):
    """Mean over pixels of -sum_k nu_k s_k log s_k, summed over slices.

    ``nu`` is a K-vector or a B x K array of per-slice weights.
    """
    S = _per_slice(T.as_tensor(S))
    nu = np.asarray(nu, dtype=S.dtype)
    if nu.ndim == 1:
        nu = np.broadcast_to(nu, (S.shape[0], nu.shape[0]))
    if nu.shape != S.shape[:2]:
        raise T.ShapeError("weighted_entropy", S.shape, nu.shape)
    pix = -(S * _clamped_log(S) * nu[:, :, None, None]).sum(axis=1)
    return pix.mean(axis=(1, 2)).sum()


def ratio_kl(R, R_prior):
    """KL(R || R_prior) = sum_k R_k log(R_k / R_prior_k), summed over leading axes.

    Zero prior entries are clamped at ``EPS_LOG`` inside the log, which pushes a
    tagged-absent class towards zero mass.
    """
    R = T.as_tensor(R)
    R_prior = np.broadcast_to(np.asarray(R_prior, dtype=R.dtype), R.shape)
    return (R * (_clamped_log(R) - np.log(np.maximum(R_prior, EPS_LOG)))).sum()


def band_penalty(m, m_ref, band=0.1, printed=False):
    """Quadratic hinge, zero while (1 - band) m_ref <= m <= (1 + band) m_ref.

    Element-wise; sum the result for a scalar.
    """
    m = T.as_tensor(m)
    m_ref = np.asarray(m_ref, dtype=m.dtype)
    if printed:
        upper = m - 0.9 * m_ref
        lower = 1.1 * m_ref - m
    else:
        upper = m - (1.0 + band) * m_ref
        lower = (1.0 - band) * m_ref - m
    return T.maximum(upper, 0.0) ** 2 + T.maximum(lower, 0.0) ** 2


def penalty_mask(R_values, prior, slice_index):
    """Boolean B x K mask of (slice, class) pairs the shape penalty applies to.

    Background (class 0) is never constrained; a class is skipped when its
    predicted ratio falls below its presence threshold, when the slice is
    tagged as not containing it, or when its shape prior is absent.
    """
    R_values = np.asarray(R_values)
    mask = R_values >= prior.eps[None, :]
    mask[:, 0] = False
    if prior.tags is not None:
        mask &= prior.tags[slice_index]
    if prior.moment is not None:
        mask &= ~np.isnan(prior.moment).any(axis=1)[None, :]
    return mask


def ttas_objective(S, prior, weights, mode, slice_index=None):
    """Assemble entropy + KL + shape penalty for a B x K x H x W softmax batch.

    ``slice_index`` gives the subject slice number of every batch row; it
    selects tag-adjusted ratio priors and class weights.  ``mode`` is one of
    ``RC``, ``RD``, ``R_only`` or ``tent``.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    S = _per_slice(T.as_tensor(S))
    B, K = S.shape[:2]
    if slice_index is None:
        slice_index = np.arange(B)
    slice_index = np.asarray(slice_index)
    if len(prior.ratio) != K:
        raise ValueError(f"ratio prior has {len(prior.ratio)} classes, softmax has {K}")

    if weights.nu is not None:
        nu = np.broadcast_to(np.asarray(weights.nu, dtype=float), (B, K))
    else:
        nu = prior.slice_weights(slice_index)
    entropy = weighted_entropy(S, nu)
    zero = T.Tensor(np.zeros((), dtype=S.dtype))
    if mode == "tent":
        return LossBreakdown(entropy, zero, zero, entropy)

    R = moments.class_ratio(S)
    kl = ratio_kl(R, prior.slice_ratio(slice_index))
    total = entropy + weights.kl_weight * kl

    penalty = zero
    if mode in SHAPE_DESCRIPTOR:
        name = SHAPE_DESCRIPTOR[mode]
        if prior.moment is None or prior.descriptor != name:
            raise ValueError(f"mode {mode} needs a {name} moment prior; got {prior.descriptor!r}")
        mask = penalty_mask(R.data, prior, slice_index)
        if mask.any():
            M = moments.descriptor(name, S)  # B x K x 2
            ref = np.nan_to_num(prior.moment)[None, :, :]
            f = band_penalty(M, ref, weights.band, printed=weights.printed_penalty)
            penalty = (f * mask[:, :, None].astype(S.dtype)).sum()
        total = total + weights.lam * penalty
    return LossBreakdown(entropy, kl, penalty, total)
