"""Tissue detection, patch grid, quality filtering, nucleus counting and patch selection."""

import csv
import dataclasses
import io
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigError, EmptyCandidateSet
from .rng import substream

PATCH_CSV_HEADER = ("x", "y", "size", "tissue_fraction", "blur_score",
                    "mean_brightness", "nucleus_count", "selected")

# Default H&E optical-density vectors (Ruifrok & Johnston).
HEMATOXYLIN_OD = (0.65, 0.70, 0.29)
EOSIN_OD = (0.07, 0.99, 0.11)


@dataclass
class SelectionConfig:
    patch_size: int = 512
    stride: int = 512
    n_patches: int = 8
    min_tissue_fraction: float = 0.5
    blur_threshold: float = 50.0
    brightness_bounds: tuple = (40.0, 235.0)
    mode: str = "cellularity"
    seed: int = 0
    thumbnail_max_dim: int = 256
    # below these floors a histogram split is treated as noise, not signal
    min_saturation: float = 0.05
    min_hematoxylin_od: float = 0.3
    min_nucleus_area: int = 30

    def __post_init__(self):
        self.brightness_bounds = tuple(float(b) for b in self.brightness_bounds)
        if self.n_patches < 1:
            raise ConfigError("n_patches must be >= 1")
        if self.stride < 1 or self.patch_size < 1:
            raise ConfigError("stride and patch_size must be >= 1")
        if not 0.0 <= self.min_tissue_fraction <= 1.0:
            raise ConfigError("min_tissue_fraction must be in [0, 1]")
        if self.blur_threshold < 0:
            raise ConfigError("blur_threshold must be >= 0")
        if len(self.brightness_bounds) != 2 or self.brightness_bounds[0] > self.brightness_bounds[1]:
            raise ConfigError("brightness_bounds must be [low, high] with low <= high")
        if self.mode not in ("cellularity", "random"):
            raise ConfigError(f"unknown selection mode {self.mode!r}")
        if self.thumbnail_max_dim < 16:
            raise ConfigError("thumbnail_max_dim must be >= 16")


@dataclass
class BinaryMask:
    """Tissue mask at thumbnail scale; ``scale`` is level-0 pixels per mask pixel."""

    bits: np.ndarray
    scale: float
    degenerate: bool = False

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]


@dataclass
class PatchRecord:
    x: int
    y: int
    size: int
    tissue_fraction: float
    blur_score: float = None
    mean_brightness: float = None
    nucleus_count: int = None
    selected: bool = False

    def passes(self, cfg):
        if self.tissue_fraction < cfg.min_tissue_fraction:
            return False
        if self.blur_score is None or self.mean_brightness is None:
            return False
        low, high = cfg.brightness_bounds
        return self.blur_score >= cfg.blur_threshold and low <= self.mean_brightness <= high


@dataclass(frozen=True)
class StainMatrix:
    """Rows are unit optical-density vectors: hematoxylin, eosin, residual."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ConfigError("stain matrix must be a finite 3x3 array")
        if not np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-9):
            raise ConfigError("stain vectors must be unit norm")
        if np.linalg.cond(m) >= 1e6:
            raise ConfigError("stain matrix is ill-conditioned")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_vectors(cls, hematoxylin=HEMATOXYLIN_OD, eosin=EOSIN_OD, residual=None):
        h = np.asarray(hematoxylin, dtype=np.float64)
        e = np.asarray(eosin, dtype=np.float64)
        h, e = h / np.linalg.norm(h), e / np.linalg.norm(e)
        r = np.cross(h, e) if residual is None else np.asarray(residual, dtype=np.float64)
        return cls(np.stack([h, e, r / np.linalg.norm(r)]))

    @classmethod
    def default(cls):
        return cls.from_vectors()

    @property
    def inverse(self):
        return np.linalg.inv(self.matrix)


def rgb_to_saturation(pixels):
    rgb = np.asarray(pixels, dtype=np.float64)
    cmax = rgb.max(axis=-1)
    cmin = rgb.min(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(cmax > 0, (cmax - cmin) / cmax, 0.0)
    return sat


def rgb_to_gray(pixels):
    rgb = np.asarray(pixels, dtype=np.float64)
    return rgb @ np.array([0.299, 0.587, 0.114])


def optical_density(pixels):
    return -np.log10((np.asarray(pixels, dtype=np.float64) + 1.0) / 256.0)


def hematoxylin_density(pixels, stains=None):
    stains = StainMatrix.default() if stains is None else stains
    od = optical_density(pixels)
    return od @ stains.inverse[:, 0]


def fill_small_holes(mask, max_area=64):
    """Fill enclosed background regions of at most ``max_area`` pixels."""
    holes, n = ndimage.label(~mask)
    if n == 0:
        return mask.copy()
    sizes = np.bincount(holes.ravel())
    border = np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))
    fill = sizes <= max_area
    fill[0] = False
    fill[border] = False
    return mask | fill[holes]


def tissue_mask(thumb, scale=1.0, cfg=None):
    """Saturation-Otsu tissue mask of a thumbnail.

    When every pixel has the same saturation no Otsu split exists; the mask then
    falls back to the ``min_saturation`` floor and ``degenerate`` is set.
    """
    cfg = SelectionConfig() if cfg is None else cfg
    pixels = thumb.pixels if hasattr(thumb, "pixels") else np.asarray(thumb)
    if pixels.size == 0:
        raise ValueError("empty thumbnail")
    sat = rgb_to_saturation(pixels)
    degenerate = bool(np.ptp(sat) == 0)
    if degenerate:
        warnings.warn("degenerate saturation histogram; using the saturation floor", RuntimeWarning, stacklevel=2)
        threshold = cfg.min_saturation
    else:
        threshold = max(float(threshold_otsu(sat, nbins=256)), cfg.min_saturation)
    bits = sat > threshold
    bits = fill_small_holes(bits, 64)
    return BinaryMask(bits, float(scale), degenerate)


def _overlap(start, length, cells, scale, limit):
    """Length of [start, start+length) covered by each mask cell [i*scale, (i+1)*scale) clipped to limit."""
    lo = np.arange(cells) * scale
    hi = np.minimum(lo + scale, limit)
    return np.clip(np.minimum(hi, start + length) - np.maximum(lo, start), 0.0, None)


def mask_coverage(mask, x, y, size, width, height):
    ox = _overlap(x, size, mask.width, mask.scale, width)
    oy = _overlap(y, size, mask.height, mask.scale, height)
    covered = oy @ mask.bits.astype(np.float64) @ ox
    return float(min(1.0, covered / float(size * size)))


def generate_patch_grid(slide, mask, cfg):
    """Level-0 grid positions whose mask coverage reaches ``cfg.min_tissue_fraction``."""
    size, stride = cfg.patch_size, cfg.stride
    records = []
    for y in range(0, slide.height - size + 1, stride):
        for x in range(0, slide.width - size + 1, stride):
            frac = mask_coverage(mask, x, y, size, slide.width, slide.height)
            if frac >= cfg.min_tissue_fraction:
                records.append(PatchRecord(x, y, size, frac))
    return records


def laplacian_variance(gray):
    kernel = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
    return float(ndimage.convolve(gray, kernel, mode="reflect").var())


def quality_filter(patch, cfg):
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    gray = rgb_to_gray(pixels)
    blur = laplacian_variance(gray)
    brightness = float(gray.mean())
    low, high = cfg.brightness_bounds
    ok = blur >= cfg.blur_threshold and low <= brightness <= high
    return {"pass": bool(ok), "blur_score": blur, "mean_brightness": brightness}


def nucleus_mask(patch, stains=None, cfg=None):
    cfg = SelectionConfig() if cfg is None else cfg
    pixels = patch.pixels if hasattr(patch, "pixels") else np.asarray(patch)
    hema = hematoxylin_density(pixels, stains)
    if np.ptp(hema) == 0:
        return np.zeros(hema.shape, dtype=bool)
    threshold = max(float(threshold_otsu(hema, nbins=256)), cfg.min_hematoxylin_od)
    fg = ndimage.binary_opening(hema > threshold, structure=np.ones((3, 3), dtype=bool), iterations=1)
    return fg


def nucleus_count(patch, stains=None, cfg=None):
    """Connected hematoxylin-dense blobs of at least ``min_nucleus_area`` pixels (8-connected)."""
    cfg = SelectionConfig() if cfg is None else cfg
    fg = nucleus_mask(patch, stains, cfg)
    if not fg.any():
        return 0
    labels, n = ndimage.label(fg, structure=np.ones((3, 3), dtype=bool))
    areas = np.bincount(labels.ravel())[1:]
    return int(np.count_nonzero(areas >= cfg.min_nucleus_area))


def select_patches(records, cfg, rng=None):
    """Pick up to ``cfg.n_patches`` records that pass tissue and quality checks.

    Cellularity mode ranks by nucleus count (descending) with ties broken by
    (y, x); random mode samples uniformly without replacement. Returned records
    are copies with ``selected=True``.
    """
    candidates = sorted((r for r in records if r.passes(cfg)), key=lambda r: (r.y, r.x))
    if not candidates:
        raise EmptyCandidateSet("no patch passed tissue and quality filtering")
    n = min(cfg.n_patches, len(candidates))
    if cfg.mode == "cellularity":
        if any(r.nucleus_count is None for r in candidates):
            raise ValueError("cellularity selection needs nucleus counts")
        chosen = sorted(candidates, key=lambda r: (-r.nucleus_count, r.y, r.x))[:n]
    else:
        rng = substream(cfg.seed, "selection") if rng is None else rng
        idx = np.sort(rng.choice(len(candidates), size=n, replace=False))
        chosen = [candidates[i] for i in idx]
    return [dataclasses.replace(r, selected=True) for r in chosen]


def score_patch(slide, record, cfg, stains):
    patch = slide.read_region(0, record.x, record.y, record.size, record.size)
    q = quality_filter(patch, cfg)
    record = dataclasses.replace(record, blur_score=q["blur_score"], mean_brightness=q["mean_brightness"])
    record.nucleus_count = nucleus_count(patch, stains, cfg) if q["pass"] else 0
    return record


@dataclass
class PreprocessResult:
    records: list
    selected: list
    mask: BinaryMask
    thumbnail: object


def preprocess_slide(slide, cfg, stains=None, threads=1, rng=None):
    """Thumbnail, tissue mask, grid, per-patch scoring and selection for one slide.

    Per-patch scoring runs in a pool of ``threads`` workers; results are gathered
    in grid order so the output never depends on the pool size.
    """
    stains = StainMatrix.default() if stains is None else stains
    thumb = slide.thumbnail(cfg.thumbnail_max_dim)
    scale = max(1, -(-max(slide.width, slide.height) // cfg.thumbnail_max_dim))
    mask = tissue_mask(thumb, scale, cfg)
    grid = generate_patch_grid(slide, mask, cfg)
    if threads > 1 and len(grid) > 1:
        with ThreadPoolExecutor(threads) as pool:
            scored = list(pool.map(lambda r: score_patch(slide, r, cfg, stains), grid))
    else:
        scored = [score_patch(slide, r, cfg, stains) for r in grid]
    if rng is None:
        rng = substream(cfg.seed, "selection", slide.slide_id)
    selected = select_patches(scored, cfg, rng)
    chosen = {(r.x, r.y) for r in selected}
    for r in scored:
        r.selected = (r.x, r.y) in chosen
    return PreprocessResult(scored, selected, mask, thumb)


def _fmt(value):
    return "" if value is None else repr(float(value))


def format_patch_csv(records):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PATCH_CSV_HEADER)
    for r in records:
        writer.writerow([r.x, r.y, r.size, _fmt(r.tissue_fraction), _fmt(r.blur_score),
                         _fmt(r.mean_brightness), "" if r.nucleus_count is None else int(r.nucleus_count),
                         int(bool(r.selected))])
    return buf.getvalue()


def read_patch_csv(path):
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PATCH_CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            records.append(PatchRecord(
                x=int(row["x"]), y=int(row["y"]), size=int(row["size"]),
                tissue_fraction=float(row["tissue_fraction"]),
                blur_score=float(row["blur_score"]) if row["blur_score"] else None,
                mean_brightness=float(row["mean_brightness"]) if row["mean_brightness"] else None,
                nucleus_count=int(row["nucleus_count"]) if row["nucleus_count"] else None,
                selected=row["selected"] == "1",
            ))
    return records
