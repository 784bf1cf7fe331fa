"""Differentiable 2D shape moments and the R / C / D descriptors.

Coordinates are 0-based pixel indices with ``u`` the row and ``v`` the column.
All functions take maps whose last two axes are H x W and reduce over them, so
a B x K x H x W softmax batch yields B x K results (B x K x 2 for C and D).
Inputs may be numpy arrays (hard masks) or :class:`~shape_tta.tensor.Tensor`.

Divisions by the zeroth moment use ``max(mu00, eps_mass)`` with
``eps_mass = 1e-6 * H * W``.  Above that mass the descriptors are exact; below
it they stay finite, and callers treat the class as absent.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_MASS_FRACTION = 1e-6
SUPPORTED_ORDERS = {(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)}


def coordinate_grids(h, w, dtype=np.float64):
    """Return (U, V): U[i, j] = i (row index), V[i, j] = j (column index)."""
    u, v = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return u, v


def eps_mass(h, w):
    return EPS_MASS_FRACTION * h * w


def _as_map(s):
    s = T.as_tensor(s)
    if s.ndim < 2:
        raise T.ShapeError("moments", s.shape, detail="expected (..., H, W)")
    return s


def _check_order(p, q):
    if (p, q) not in SUPPORTED_ORDERS:
        raise ValueError(f"unsupported moment order (p={p}, q={q}); need p + q <= 2")


def raw_moment(s, p, q):
    """sum_i s(i) u_i**p v_i**q over the trailing H x W axes."""
    _check_order(p, q)
    s = _as_map(s)
    u, v = coordinate_grids(*s.shape[-2:], dtype=s.dtype)
    weight = u**p * v**q
    return (s * weight).sum(axis=(-2, -1))


def _safe_mass(m00, h, w):
    return T.maximum(m00, eps_mass(h, w))


def centroid(s):
    """(mu10 / mu00, mu01 / mu00): mass centre in (row, column) pixel units."""
    s = _as_map(s)
    h, w = s.shape[-2:]
    grid = np.stack(coordinate_grids(h, w, dtype=s.dtype))  # (2, H, W)
    m00 = s.sum(axis=(-2, -1))
    first = (T.reshape(s, s.shape[:-2] + (1, h, w)) * grid).sum(axis=(-2, -1))
    mass = _safe_mass(m00, h, w)
    return first / T.reshape(mass, mass.shape + (1,))


def central_moment(s, p, q):
    """sum_i s(i) (u_i - u_c)**p (v_i - v_c)**q about the centroid (u_c, v_c)."""
    _check_order(p, q)
    s = _as_map(s)
    h, w = s.shape[-2:]
    c = centroid(s)
    u, v = coordinate_grids(h, w, dtype=s.dtype)
    lead = s.shape[:-2]
    du = T.Tensor(u) - T.reshape(c[..., 0], lead + (1, 1))
    dv = T.Tensor(v) - T.reshape(c[..., 1], lead + (1, 1))
    term = s
    if p:
        term = term * du**p
    if q:
        term = term * dv**q
    return term.sum(axis=(-2, -1))


def class_ratio(S):
    """Fraction of the slice area per class: mu00 / (H * W), shape (..., K)."""
    S = _as_map(S)
    h, w = S.shape[-2:]
    return S.sum(axis=(-2, -1)) / float(h * w)


def dist_to_centroid(s):
    """(sqrt(mu20c / mu00), sqrt(mu02c / mu00)): per-axis RMS spread about the centroid."""
    s = _as_map(s)
    h, w = s.shape[-2:]
    lead = s.shape[:-2]
    grid = np.stack(coordinate_grids(h, w, dtype=s.dtype))
    c = centroid(s)
    diff = T.Tensor(grid) - T.reshape(c, lead + (2, 1, 1))
    second = (T.reshape(s, lead + (1, h, w)) * diff * diff).sum(axis=(-2, -1))
    mass = _safe_mass(s.sum(axis=(-2, -1)), h, w)
    return T.sqrt(second / T.reshape(mass, mass.shape + (1,)))


DESCRIPTORS = {"C": centroid, "D": dist_to_centroid}


def descriptor(name, s):
    try:
        return DESCRIPTORS[name](s)
    except KeyError:
        raise ValueError(f"unknown shape descriptor {name!r}; expected one of {sorted(DESCRIPTORS)}") from None


def one_hot(labels, num_classes):
    """N x H x W integer labels -> N x K x H x W float one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=np.float64)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1.0, axis=1)
    return out
