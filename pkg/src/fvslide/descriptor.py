"""Patch descriptors: built-in extractor, linear projection, per-slide instance norm, CSV import/export."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InconsistentDimension, MalformedRow, ShapeMismatch
from .preprocess import hematoxylin_density, rgb_to_gray, rgb_to_saturation

BUILTIN_DIM = 64
NORM_EPS = 1e-5

GRAY_BINS = 16
ORIENTATION_BINS = 18
HEMATOXYLIN_BINS = 8
SATURATION_BINS = 16
HEMATOXYLIN_RANGE = (0.0, 1.2)


def _l1(hist):
    total = hist.sum()
    return hist / total if total > 0 else hist


def orientation_histogram(gray, bins=ORIENTATION_BINS):
    """Magnitude-weighted histogram of unsigned gradient orientation over [0, 180) degrees."""
    gy, gx = np.gradient(gray)
    mag = np.hypot(gx, gy)
    deg = np.degrees(np.mod(np.arctan2(gy, gx), np.pi))
    idx = np.floor(deg / (180.0 / bins)).astype(np.int64) % bins
    return np.bincount(idx.ravel(), weights=mag.ravel(), minlength=bins)


def extract_builtin(patch, stains=None):
    """64-dimensional handcrafted descriptor of an RGB patch.

    Layout: channel means (3) and stds (3) divided by 255, then L1-normalized
    histograms of grayscale (16), gradient orientation (18), hematoxylin
    optical density (8) and HSV saturation (16).
    """
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    rgb = pixels.reshape(-1, 3).astype(np.float64)
    means = rgb.mean(axis=0) / 255.0
    stds = rgb.std(axis=0) / 255.0
    gray = rgb_to_gray(pixels)
    gray_hist = np.bincount(np.clip((gray * GRAY_BINS / 256.0).astype(np.int64), 0, GRAY_BINS - 1).ravel(),
                            minlength=GRAY_BINS).astype(np.float64)
    orient = orientation_histogram(gray)
    hema = hematoxylin_density(pixels, stains)
    lo, hi = HEMATOXYLIN_RANGE
    h_idx = np.clip(np.floor((hema - lo) / (hi - lo) * HEMATOXYLIN_BINS), 0, HEMATOXYLIN_BINS - 1).astype(np.int64)
    h_hist = np.bincount(h_idx.ravel(), minlength=HEMATOXYLIN_BINS).astype(np.float64)
    sat = rgb_to_saturation(pixels)
    s_idx = np.clip(np.floor(sat * SATURATION_BINS), 0, SATURATION_BINS - 1).astype(np.int64)
    s_hist = np.bincount(s_idx.ravel(), minlength=SATURATION_BINS).astype(np.float64)
    out = np.concatenate([means, stds, _l1(gray_hist), _l1(orient), _l1(h_hist), _l1(s_hist)])
    assert out.shape == (BUILTIN_DIM,)
    return out


@dataclass
class ProjectionParams:
    W: np.ndarray
    b: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[1],):
            raise ShapeMismatch(f"projection W {self.W.shape} and b {self.b.shape} are inconsistent")

    @property
    def in_dim(self):
        return self.W.shape[0]

    @property
    def out_dim(self):
        return self.W.shape[1]

    @classmethod
    def init(cls, in_dim, out_dim, rng, trainable=True):
        bound = np.sqrt(1.0 / in_dim)
        return cls(rng.uniform(-bound, bound, size=(in_dim, out_dim)), np.zeros(out_dim), trainable)


def project(raw, params):
    """``raw @ W + b`` for one descriptor (K,) or a stack (n, K)."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != params.in_dim:
        raise ShapeMismatch(f"descriptor has {raw.shape[-1]} values, projection expects {params.in_dim}")
    return raw @ params.W + params.b


def instance_normalize(descriptors, eps=NORM_EPS):
    """Standardize each channel over the slide's descriptors (rows).

    Uses the population variance; a constant channel maps to zeros.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ShapeMismatch("instance_normalize expects an (n, D) array with n >= 1")
    centered = x - x.mean(axis=0)
    scale = np.sqrt((centered ** 2).mean(axis=0) + eps)
    return centered / scale


def instance_normalize_backward(descriptors, grad_out, eps=NORM_EPS):
    x = np.asarray(descriptors, dtype=np.float64)
    centered = x - x.mean(axis=0)
    scale = np.sqrt((centered ** 2).mean(axis=0) + eps)
    xhat = centered / scale
    g = np.asarray(grad_out, dtype=np.float64)
    return (g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)) / scale


def import_descriptors(csv_path, expected_dim=None):
    """Read ``slide_id,patch_index,v0..v{K-1}`` rows into {slide_id: (n, K) array}.

    Rows of each slide are ordered by patch_index. Slides keep first-seen order.
    """
    groups = {}
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:2] != ["slide_id", "patch_index"]:
            raise MalformedRow(1, "header must start with slide_id,patch_index")
        value_cols = header[2:]
        if not value_cols or value_cols != [f"v{i}" for i in range(len(value_cols))]:
            raise InconsistentDimension("value columns must be v0..v{K-1}")
        k = len(value_cols)
        if expected_dim is not None and k != expected_dim:
            raise InconsistentDimension(f"descriptors have K={k}, expected {expected_dim}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 2:
                raise MalformedRow(line, f"expected {k + 2} fields, found {len(row)}")
            try:
                index = int(row[1])
                values = [float(v) for v in row[2:]]
            except ValueError as exc:
                raise MalformedRow(line, str(exc)) from None
            if not all(np.isfinite(values)):
                raise MalformedRow(line, "non-finite value")
            groups.setdefault(row[0], []).append((index, line, values))
    out = {}
    for slide_id, rows in groups.items():
        rows.sort(key=lambda r: r[0])
        for (a, _, _), (b, line, _) in zip(rows, rows[1:]):
            if a == b:
                raise MalformedRow(line, f"duplicate patch_index {b} for slide {slide_id}")
        out[slide_id] = np.array([r[2] for r in rows], dtype=np.float64)
    return out


def export_descriptors(csv_path, descriptor_sets):
    """Write {slide_id: (n, K) array} in the import format; values at 17 significant digits."""
    dims = {np.asarray(v).shape[1] for v in descriptor_sets.values()}
    if len(dims) > 1:
        raise InconsistentDimension(f"mixed descriptor dimensions {sorted(dims)}")
    k = dims.pop() if dims else 0
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["slide_id", "patch_index"] + [f"v{i}" for i in range(k)])
        for slide_id, values in descriptor_sets.items():
            for i, row in enumerate(np.asarray(values, dtype=np.float64)):
                writer.writerow([slide_id, i] + [format(v, ".17g") for v in row])
