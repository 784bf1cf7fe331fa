"""Descriptor priors: coarse class-ratio prior, weak tags, class weights, moment priors."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import moments

EPS_LOG = 1e-12


@dataclass(frozen=True)
class DescriptorPrior:
    """Immutable snapshot of everything the adaptation objective compares against.

    ratio       K-simplex, coarse per-slice class-ratio prior
    eps         per-class presence thresholds (fraction of slice area)
    tags        optional N x K bool, True where a slice is known to contain a class
    moment      optional K x 2 moment prior, NaN rows for classes without one
    descriptor  "C" or "D" when ``moment`` is set
    """

    ratio: np.ndarray
    eps: np.ndarray
    tags: np.ndarray | None = None
    moment: np.ndarray | None = None
    descriptor: str | None = None

    def slice_ratio(self, slice_index):
        """Tag-adjusted ratio prior per slice (B x K): absent classes zeroed, rest renormalized."""
        slice_index = np.atleast_1d(slice_index)
        r = np.broadcast_to(self.ratio, (len(slice_index), len(self.ratio))).copy()
        if self.tags is not None:
            r = r * self.tags[slice_index]
            total = r.sum(axis=1, keepdims=True)
            r = np.divide(r, total, out=np.zeros_like(r), where=total > 0)
        return r

    def slice_weights(self, slice_index):
        return np.stack([compute_class_weights(r) for r in self.slice_ratio(slice_index)])

    def with_moment(self, descriptor, moment):
        return dataclasses.replace(self, descriptor=descriptor, moment=moment)


def load_ratio_prior(ratios, eps=None, tags=None):
    """Normalize coarse per-class ratios into a prior.

    ``eps`` defaults to ``max(1e-3, 0.1 * ratio_k)`` per class.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError(f"ratio prior must be a vector over >= 2 classes, got shape {r.shape}")
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise ValueError(f"ratio prior entries must be finite and non-negative, got {list(r)}")
    if r.sum() <= 0:
        raise ValueError("ratio prior sums to zero")
    r = r / r.sum()
    if eps is None:
        eps = np.maximum(1e-3, 0.1 * r)
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), r.shape).copy()
    if tags is not None:
        tags = np.asarray(tags, dtype=bool)
        if tags.ndim != 2 or tags.shape[1] != r.size:
            raise ValueError(f"tags must be N x {r.size}, got {tags.shape}")
    return DescriptorPrior(ratio=r, eps=eps, tags=tags)


def compute_class_weights(ratio):
    """nu_k = (1 / R_k) / sum_j (1 / R_j) over classes with nonzero prior; zero elsewhere."""
    r = np.asarray(ratio, dtype=np.float64)
    total = r.sum()
    if total <= 0:
        raise ValueError("class weights need a ratio prior with positive mass")
    r = r / total
    present = r > 0
    inv = np.zeros_like(r)
    inv[present] = 1.0 / np.maximum(r[present], EPS_LOG)
    return inv / inv.sum()


def estimate_moment_prior(masks, descriptor, eps, num_classes):
    """Average the descriptor of hard masks over slices where each class is present.

    ``masks`` is an N x H x W label stack (argmax predictions).  A slice counts
    for class k when its class ratio exceeds ``eps[k]``.  Classes with no
    qualifying slice get a NaN row.  Returns a K x 2 array.
    """
    masks = np.asarray(masks)
    onehot = moments.one_hot(masks, num_classes)
    ratios = moments.class_ratio(onehot).data  # N x K
    values = moments.descriptor(descriptor, onehot).data  # N x K x 2
    eps = np.broadcast_to(np.asarray(eps, dtype=np.float64), (num_classes,))
    out = np.full((num_classes, 2), np.nan)
    for k in range(num_classes):
        keep = ratios[:, k] > eps[k]
        if keep.any():
            out[k] = values[keep, k].mean(axis=0)
    return out


# -- tag file ----------------------------------------------------------------
def tags_from_labels(labels, num_classes):
    """N x K presence table from a label volume (used when writing tag files)."""
    labels = np.asarray(labels)
    return np.stack([np.isin(np.arange(num_classes), np.unique(sl)) for sl in labels])


def write_tag_file(path, tags_by_subject):
    """JSON: subject id -> slice index -> sorted list of present classes."""
    doc = {
        sid: {str(n): [int(k) for k in np.flatnonzero(row)] for n, row in enumerate(np.asarray(t))}
        for sid, t in sorted(tags_by_subject.items())
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def read_tag_file(path, subject_id, num_slices, num_classes):
    with open(path) as fh:
        doc = json.load(fh)
    if subject_id not in doc:
        return None
    # slices without an entry carry no weak label: every class may be present
    tags = np.ones((num_slices, num_classes), dtype=bool)
    for n, present in doc[subject_id].items():
        n = int(n)
        if not 0 <= n < num_slices:
            raise ValueError(f"tag file slice index {n} out of range for {subject_id} ({num_slices} slices)")
        tags[n] = False
        for k in present:
            if not 0 <= k < num_classes:
                raise ValueError(f"tag file class {k} out of range (K={num_classes})")
            tags[n, k] = True
    return tags
