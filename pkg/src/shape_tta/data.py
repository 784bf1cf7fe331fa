"""Synthetic phantom subjects with a controllable source -> target shift, plus volume I/O.

Two phantom families are available:

``cardiac``   K=4: background, "LV" disk, "MYO" annulus around it and an
              off-centre "AA" disk that only appears in the upper slices.
``prostate``  K=2: a single elliptical blob.

Geometry is drawn from the subject seed alone, so the source and target
renderings of a seed share identical label volumes.  The target rendering
applies a gamma 0.5 curve, inverts the contrast of one structure and adds
Gaussian noise (sigma 0.05).
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

VOLUME_MAGIC = b"SHTTAVOL"
FORMAT_VERSION = 1


class VolumeFormatError(ValueError):
    pass


@dataclass
class SubjectVolume:
    intensities: np.ndarray  # N x H x W float32
    labels: np.ndarray | None = None  # N x H x W uint8
    subject_id: str = "subject"
    domain: str = "source"
    seed: int = 0
    spacing: tuple = (1.0, 1.0, 1.0)

    @property
    def num_slices(self):
        return self.intensities.shape[0]

    def without_labels(self):
        return SubjectVolume(self.intensities, None, self.subject_id, self.domain, self.seed, self.spacing)


@dataclass(frozen=True)
class PhantomSpec:
    family: str = "cardiac"
    size: int = 64
    num_slices: int = 16
    # cardiac geometry, pixels
    lv_radius: tuple = (7.0, 10.0)
    myo_thickness: tuple = (3.0, 4.0)
    ellipticity: tuple = (0.9, 1.1)
    center_jitter: float = 4.0
    aa_radius: tuple = (4.0, 6.0)
    aa_gap: tuple = (2.0, 4.0)
    aa_first_slice: tuple = (5, 8)
    # prostate geometry, pixels
    blob_radius: tuple = (9.0, 13.0)
    # intensities (source palette, one value per class) and shift
    palette: tuple = (0.1, 0.9, 0.3, 0.6)
    source_noise: float = 0.02
    target_gamma: float = 0.5
    target_noise: float = 0.25
    target_blur: float = 0.0  # gaussian sigma in pixels, in-plane
    inverted_class: int = 2
    class_names: tuple = field(default=None)

    def __post_init__(self):
        if self.family not in ("cardiac", "prostate"):
            raise ValueError(f"unknown phantom family {self.family!r}")
        if len(self.palette) != self.num_classes:
            raise ValueError(f"palette needs {self.num_classes} entries, got {len(self.palette)}")
        if self.family == "cardiac":
            outer = self.lv_radius[1] * self.ellipticity[1] + self.myo_thickness[1]
            # AA centre sits outer + r_aa + gap from the LV centre; with any
            # gap <= 0 the two structures can touch after rasterization
            if self.aa_gap[0] <= 0:
                raise ValueError(
                    f"overlapping structures: aa_gap lower bound {self.aa_gap[0]} must be > 0 "
                    f"(MYO outer radius up to {outer:.1f} px)"
                )
            # AA is placed towards the upper-left at 200..250 degrees, |sin|, |cos| <= sin(70 deg)
            far = outer + self.aa_radius[1] + self.aa_gap[1]
            lowest = self.size / 2 + 2.0 - self.center_jitter - far * np.sin(np.deg2rad(70.0)) - self.aa_radius[1]
            if lowest < 0:
                raise ValueError(f"cardiac phantom does not fit inside a {self.size} px slice")

    @property
    def num_classes(self):
        return 4 if self.family == "cardiac" else 2

    @property
    def names(self):
        if self.class_names:
            return tuple(self.class_names)
        return ("BG", "LV", "MYO", "AA") if self.family == "cardiac" else ("BG", "PROSTATE")

    def area_bands(self):
        """Per-class (min, max) pixel area of a slice where the class is present."""
        if self.family == "prostate":
            lo, hi = self.blob_radius
            return {1: (np.pi * (0.5 * lo) ** 2 * 0.8 - 4 * lo, np.pi * hi**2 * 1.2 + 4 * hi)}
        r0, r1 = self.lv_radius
        e0, e1 = self.ellipticity
        t0, t1 = self.myo_thickness
        a0, a1 = self.aa_radius
        f_min = _PROFILE_FLOOR
        lv = (np.pi * (r0 * f_min) ** 2 * e0, np.pi * r1**2 * e1)
        myo = (np.pi * ((r0 * f_min + t0) ** 2 - (r0 * f_min) ** 2) * e0, np.pi * ((r1 + t1) ** 2 - r1**2) * e1)
        aa = (np.pi * a0**2, np.pi * a1**2)
        slack = lambda band, r: (band[0] - 2 * np.pi * r - 2, band[1] + 2 * np.pi * r + 2)  # noqa: E731
        return {1: slack(lv, r1), 2: slack(myo, r1 + t1), 3: slack(aa, a1)}

    def nominal_ratios(self):
        """Mid-range per-slice class ratios (background takes the remainder)."""
        area = self.size * self.size
        if self.family == "prostate":
            r = np.mean(self.blob_radius) * 0.85
            fg = [np.pi * r * r / area]
        else:
            r = np.mean(self.lv_radius) * 0.9
            t = np.mean(self.myo_thickness)
            fg = [np.pi * r * r / area, np.pi * ((r + t) ** 2 - r * r) / area, np.pi * np.mean(self.aa_radius) ** 2 / area]
        return np.array([1.0 - sum(fg)] + fg)


_PROFILE_FLOOR = 0.55


def coarse_ratio_prior(spec, seed, spread=0.2):
    """Nominal ratios with each foreground entry scaled by U(1 - spread, 1 + spread)."""
    rng = np.random.default_rng([seed, 7919])
    r = spec.nominal_ratios()
    r[1:] *= rng.uniform(1.0 - spread, 1.0 + spread, size=len(r) - 1)
    r[0] = 1.0 - r[1:].sum()
    return r


# -- geometry ------------------------------------------------------------------
def _ellipse(u, v, cu, cv, ru, rv):
    return ((u - cu) / ru) ** 2 + ((v - cv) / rv) ** 2 <= 1.0


def _cardiac_labels(spec, rng):
    n, size = spec.num_slices, spec.size
    u, v = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c0 = size / 2 + 2.0 + rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
    drift = rng.uniform(-0.2, 0.2, 2)
    r_lv = rng.uniform(*spec.lv_radius)
    ell = rng.uniform(*spec.ellipticity)
    thick = rng.uniform(*spec.myo_thickness)
    r_aa = rng.uniform(*spec.aa_radius)
    gap = rng.uniform(*spec.aa_gap)
    theta = np.deg2rad(rng.uniform(200.0, 250.0))
    first_aa = int(rng.integers(spec.aa_first_slice[0], spec.aa_first_slice[1] + 1))
    zc = (n - 1) / 2 + rng.uniform(-1.0, 1.0)
    zr = n / 2 + 2.0

    labels = np.zeros((n, size, size), dtype=np.uint8)
    for z in range(n):
        f = max(_PROFILE_FLOOR, np.sqrt(max(0.0, 1.0 - ((z - zc) / zr) ** 2)))
        cu, cv = c0 + drift * (z - zc)
        ru, rv = r_lv * f * ell, r_lv * f
        sl = labels[z]
        if z >= first_aa:
            d = r_lv * max(ell, 1.0) + thick + r_aa + gap
            sl[_ellipse(u, v, cu + d * np.sin(theta), cv + d * np.cos(theta), r_aa, r_aa)] = 3
        sl[_ellipse(u, v, cu, cv, ru + thick, rv + thick)] = 2
        sl[_ellipse(u, v, cu, cv, ru, rv)] = 1
    return labels


def _prostate_labels(spec, rng):
    n, size = spec.num_slices, spec.size
    u, v = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c0 = size / 2 + rng.uniform(-spec.center_jitter, spec.center_jitter, 2)
    r = rng.uniform(*spec.blob_radius)
    aspect = rng.uniform(0.8, 1.2)
    zc = (n - 1) / 2 + rng.uniform(-1.0, 1.0)
    zr = n / 2 + 1.0
    labels = np.zeros((n, size, size), dtype=np.uint8)
    for z in range(n):
        f = np.sqrt(max(0.0, 1.0 - ((z - zc) / zr) ** 2))
        if f * r < 2.0:
            continue
        labels[z][_ellipse(u, v, c0[0], c0[1], r * f * aspect, r * f)] = 1
    return labels


def _render(spec, labels, domain, rng):
    palette = np.asarray(spec.palette, dtype=np.float64)
    size = spec.size
    u, v = np.meshgrid(np.linspace(-1, 1, size), np.linspace(-1, 1, size), indexing="ij")
    bias = 0.05 * (rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v)
    clean = np.clip(palette[labels] + bias[None], 0.0, 1.0)
    if domain == "source":
        img = clean + rng.normal(0.0, spec.source_noise, clean.shape)
    else:
        img = clean**spec.target_gamma
        inv = labels == spec.inverted_class
        img[inv] = 1.0 - img[inv]
        if spec.target_blur > 0:
            img = ndimage.gaussian_filter(img, (0, spec.target_blur, spec.target_blur))
        img = img + rng.normal(0.0, spec.target_noise, clean.shape)
    return img.astype(np.float32)


def generate(spec, n_subjects, domain, seed):
    """Render ``n_subjects`` phantoms; subject i uses geometry seed ``(seed, i)``."""
    if domain not in ("source", "target"):
        raise ValueError(f"domain must be 'source' or 'target', got {domain!r}")
    out = []
    for i in range(n_subjects):
        geo = np.random.default_rng([seed, i])
        labels = _cardiac_labels(spec, geo) if spec.family == "cardiac" else _prostate_labels(spec, geo)
        tex = np.random.default_rng([seed, i, 0 if domain == "source" else 1])
        img = _render(spec, labels, domain, tex)
        out.append(SubjectVolume(img, labels, f"{domain}_{seed}_{i:03d}", domain, int(seed)))
    return out


def normalize(intensities):
    """Zero mean, unit variance over the whole subject (float64)."""
    x = np.asarray(intensities, dtype=np.float64)
    std = x.std()
    return (x - x.mean()) / (std if std > 0 else 1.0)


# -- augmentation ----------------------------------------------------------------
def affine_params(seed, max_rotation=10.0, scale_range=(0.9, 1.1), max_shift=4.0):
    rng = np.random.default_rng(seed)
    return {
        "rotation": rng.uniform(-max_rotation, max_rotation),
        "scale": rng.uniform(*scale_range),
        "shift": tuple(rng.uniform(-max_shift, max_shift, 2)),
    }


def affine_matrix(rotation=0.0, scale=1.0, shift=(0.0, 0.0), size=64):
    """Forward 3x3 homogeneous map in (row, col) pixel coordinates about the slice centre."""
    a = np.deg2rad(rotation)
    c = (size - 1) / 2.0
    rot = scale * np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    m = np.eye(3)
    m[:2, :2] = rot
    m[:2, 2] = np.array([c, c]) + np.asarray(shift) - rot @ np.array([c, c])
    return m


def apply_affine(volume, rotation=0.0, scale=1.0, shift=(0.0, 0.0)):
    """Warp every slice with the same affine map; labels use nearest neighbour."""
    if rotation == 0.0 and scale == 1.0 and tuple(shift) == (0.0, 0.0):
        return SubjectVolume(
            volume.intensities.copy(),
            None if volume.labels is None else volume.labels.copy(),
            volume.subject_id,
            volume.domain,
            volume.seed,
            volume.spacing,
        )
    size = volume.intensities.shape[-1]
    inv = np.linalg.inv(affine_matrix(rotation, scale, shift, size))
    img = np.stack(
        [ndimage.affine_transform(sl, inv, order=1, mode="nearest") for sl in volume.intensities.astype(np.float64)]
    ).astype(np.float32)
    labels = None
    if volume.labels is not None:
        labels = np.stack(
            [ndimage.affine_transform(sl, inv, order=0, mode="constant", cval=0) for sl in volume.labels]
        ).astype(np.uint8)
    return SubjectVolume(img, labels, volume.subject_id, volume.domain, volume.seed, volume.spacing)


def augment_affine(volume, seed):
    """Random rotation +-10 deg, scale 0.9-1.1 and shift +-4 px, shared by image and labels."""
    return apply_affine(volume, **affine_params(seed))


# -- volume files ------------------------------------------------------------------
def _header(volume):
    n, h, w = volume.intensities.shape
    return {
        "format_version": FORMAT_VERSION,
        "subject_id": volume.subject_id,
        "shape": [n, h, w],
        "spacing": list(volume.spacing),
        "domain": volume.domain,
        "seed": volume.seed,
        "has_labels": volume.labels is not None,
    }


def write_volume(volume, path):
    """8-byte magic, u64 LE header length, JSON header, f32 LE intensities, then u8 labels."""
    head = json.dumps(_header(volume), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(np.ascontiguousarray(volume.intensities, dtype="<f4").tobytes())
        if volume.labels is not None:
            fh.write(np.ascontiguousarray(volume.labels, dtype=np.uint8).tobytes())


def _read_prefix(fh, path):
    magic = fh.read(8)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    raw = fh.read(8)
    if len(raw) != 8:
        raise VolumeFormatError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", raw)
    head = fh.read(n)
    if len(head) != n:
        raise VolumeFormatError(f"{path}: truncated header ({len(head)} of {n} bytes)")
    try:
        return json.loads(head)
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{path}: header is not valid JSON ({exc})") from None


def read_header(path):
    """Metadata only; the payload is not read."""
    with open(path, "rb") as fh:
        return _read_prefix(fh, path)


def read_volume(path, load_labels=True):
    with open(path, "rb") as fh:
        header = _read_prefix(fh, path)
        payload = fh.read()
    n, h, w = header["shape"]
    count = n * h * w
    expected = 4 * count + (count if header["has_labels"] else 0)
    if len(payload) != expected:
        raise VolumeFormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    img = np.frombuffer(payload, dtype="<f4", count=count).reshape(n, h, w).astype(np.float32)
    labels = None
    if header["has_labels"] and load_labels:
        labels = np.frombuffer(payload, dtype=np.uint8, count=count, offset=4 * count).reshape(n, h, w).copy()
    return SubjectVolume(img, labels, header["subject_id"], header["domain"], header["seed"], tuple(header["spacing"]))


def spec_to_dict(spec):
    return asdict(spec)
