"""3D Dice and average symmetric surface distance, plus result tables."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    method: str
    subject: str
    dsc: dict = field(default_factory=dict)  # class -> percent
    asd: dict = field(default_factory=dict)  # class -> voxels, or None when undefined

    @property
    def mean_dsc(self):
        return float(np.mean(list(self.dsc.values())))

    @property
    def mean_asd(self):
        vals = [v for v in self.asd.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def dice3d(pred, gt, k):
    """2 |P & G| / (|P| + |G|) in percent; 100 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"dice3d: shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred == k, gt == k
    denom = p.sum() + g.sum()
    if denom == 0:
        return 100.0
    return 200.0 * np.logical_and(p, g).sum() / denom


def surface_voxels(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it (outside the volume counts)."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = mask.copy()
    for axis in range(mask.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[tuple(slice(1, -1) for _ in range(mask.ndim))]
    return mask & ~interior


def _nearest_distances(a, b, chunk=2048):
    """For every point in ``a`` the Euclidean distance to the closest point in ``b``."""
    out = np.empty(len(a))
    bb = (b * b).sum(axis=1)
    for s in range(0, len(a), chunk):
        pa = a[s : s + chunk]
        d2 = (pa * pa).sum(axis=1)[:, None] + bb[None, :] - 2.0 * pa @ b.T
        out[s : s + chunk] = np.sqrt(np.maximum(d2.min(axis=1), 0.0))
    return out


def asd3d(pred, gt, k):
    """Mean distance over both surfaces to the other surface, in voxels.

    Returns None when either structure is empty.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"asd3d: shape mismatch {pred.shape} vs {gt.shape}")
    sp = np.argwhere(surface_voxels(pred == k)).astype(np.float64)
    sg = np.argwhere(surface_voxels(gt == k)).astype(np.float64)
    if len(sp) == 0 or len(sg) == 0:
        return None
    d = np.concatenate([_nearest_distances(sp, sg), _nearest_distances(sg, sp)])
    return float(d.mean())


def evaluate(pred, gt, classes, method="", subject=""):
    report = MetricReport(method, subject)
    for k in classes:
        report.dsc[k] = float(dice3d(pred, gt, k))
        report.asd[k] = asd3d(pred, gt, k)
    return report


# -- tables -----------------------------------------------------------------------
def write_csv(reports, fh, class_names=None):
    """Long format: method, subject, class, dsc, asd (empty asd when undefined)."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["method", "subject", "class", "dsc", "asd"])
    for r in reports:
        for k in r.dsc:
            name = class_names[k] if class_names else str(k)
            asd = r.asd.get(k)
            w.writerow([r.method, r.subject, name, f"{r.dsc[k]:.4f}", "" if asd is None else f"{asd:.4f}"])


def read_csv(fh):
    rows = list(csv.DictReader(fh))
    out = {}
    for row in rows:
        key = (row["method"], row["subject"])
        rep = out.setdefault(key, MetricReport(row["method"], row["subject"]))
        rep.dsc[row["class"]] = float(row["dsc"])
        rep.asd[row["class"]] = float(row["asd"]) if row["asd"] else None
    return list(out.values())


def summarize(reports, methods=None):
    """Per method: per-class DSC/ASD averaged over subjects, plus Mean columns.

    Undefined ASD values are skipped and counted in ``missing``.
    """
    methods = methods or list(dict.fromkeys(r.method for r in reports))
    rows = []
    for m in methods:
        mine = [r for r in reports if r.method == m]
        if not mine:
            continue
        classes = list(mine[0].dsc)
        dsc = {k: float(np.mean([r.dsc[k] for r in mine])) for k in classes}
        asd, missing = {}, 0
        for k in classes:
            vals = [r.asd[k] for r in mine if r.asd.get(k) is not None]
            missing += sum(1 for r in mine if r.asd.get(k) is None)
            asd[k] = float(np.mean(vals)) if vals else None
        defined = [v for v in asd.values() if v is not None]
        rows.append(
            {
                "method": m,
                "dsc": dsc,
                "dsc_mean": float(np.mean(list(dsc.values()))),
                "asd": asd,
                "asd_mean": float(np.mean(defined)) if defined else None,
                "missing": missing,
            }
        )
    return rows


def _fmt(v, digits):
    return "n/a" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def tabulate(reports, class_names=None, methods=None):
    """Return ``(csv_text, aligned_text)`` with per-class and Mean DSC / ASD columns."""
    rows = summarize(reports, methods)
    if not rows:
        return "", ""
    classes = list(rows[0]["dsc"])
    names = [class_names[k] if class_names and not isinstance(k, str) else str(k) for k in classes]
    header = ["Method"] + [f"DSC {n}" for n in names] + ["DSC Mean"] + [f"ASD {n}" for n in names] + ["ASD Mean"]
    body = []
    for r in rows:
        body.append(
            [r["method"]]
            + [_fmt(r["dsc"][k], 1) for k in classes]
            + [_fmt(r["dsc_mean"], 1)]
            + [_fmt(r["asd"][k], 2) for k in classes]
            + [_fmt(r["asd_mean"], 2)]
        )
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(body)
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(widths[i]) if i == 0 else c.rjust(widths[i]) for i, c in enumerate(row)) for row in [header] + body]
    lines.insert(1, "-" * len(lines[0]))
    notes = [f"{r['method']}: {r['missing']} undefined ASD value(s) excluded" for r in rows if r["missing"]]
    if notes:
        lines.append("")
        lines.extend(f"* {n}" for n in notes)
    return buf.getvalue(), "\n".join(lines) + "\n"
