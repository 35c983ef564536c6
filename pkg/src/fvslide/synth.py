"""Deterministic synthetic H&E-like slides with ground truth.

A slide is a white background with pink textured tissue made of a few
overlapping ellipses, and dark blue-purple elliptical nuclei planted inside
the tissue. Nuclei are planted per patch-grid cell, fully inside their cell
and never touching each other, so the planted count of a cell is exactly what
a perfect counter should report for the patch at that cell.

The class signal lives either in nucleus density (class 1 denser, with dense
foci) or in tissue texture contrast.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .rng import substream
from .slide_io import write_slide

BACKGROUND = (245.0, 245.0, 245.0)
TISSUE = (230.0, 180.0, 200.0)
NUCLEUS = (80.0, 60.0, 140.0)
# per-unit color offsets of the two stain drift fields: overall darkening, and a red/blue hue shift
STAIN_TINTS = ((-12.0, -25.0, -15.0), (10.0, -5.0, -15.0))


@dataclass
class SynthConfig:
    width: int = 3072
    height: int = 3072
    tile_size: int = 512
    seed: int = 0
    class_label: int = 0
    tissue_blob_count: int = 4
    blob_radius_range: tuple = (700.0, 1100.0)
    # mean planted nuclei per 512x512 patch of tissue, indexed by class
    nucleus_density: tuple = (30.0, 80.0)
    # log-normal spread of the per-cell density multiplier, indexed by class
    density_variation: tuple = (0.1, 0.1)
    # dense nuclear foci: number of patch cells per slide, indexed by class, and their density gain
    focus_count: tuple = (0, 3)
    focus_gain: float = 4.0
    nucleus_radius_range: tuple = (5.0, 8.0)
    texture_contrast: tuple = (0.5, 0.5)
    # amplitude of slow, patch-scale stain drift (independent of nuclei)
    stain_variation: float = 0.0
    signal: str = "density"
    center_id: str = None
    color_shift: tuple = (0.0, 0.0, 0.0)
    patch_size: int = 512
    thumbnail_max_dim: int = 256
    n_levels: int = 1

    def class_value(self, values):
        values = tuple(values)
        return float(values[min(self.class_label, len(values) - 1)])

    @property
    def density(self):
        if self.signal == "texture":
            return float(np.mean(self.nucleus_density))
        return self.class_value(self.nucleus_density)

    @property
    def variation(self):
        if self.signal == "texture":
            return float(np.mean(self.density_variation))
        return self.class_value(self.density_variation)

    @property
    def foci(self):
        if self.signal == "texture":
            return 0
        return int(self.class_value(self.focus_count))

    @property
    def contrast(self):
        if self.signal == "density":
            return float(np.mean(self.texture_contrast))
        return self.class_value(self.texture_contrast)


@dataclass
class Scene:
    blobs: np.ndarray          # (k, 5): cx, cy, rx, ry, angle
    nuclei: np.ndarray         # (n, 5): cx, cy, a, b, angle
    nucleus_colors: np.ndarray  # (n, 3)
    planted: dict = field(default_factory=dict)  # (x, y) of grid cell -> count


def _in_blobs(blobs, x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    for cx, cy, rx, ry, ang in blobs:
        c, s = math.cos(ang), math.sin(ang)
        dx, dy = x - cx, y - cy
        u = (c * dx + s * dy) / rx
        v = (-s * dx + c * dy) / ry
        inside |= u * u + v * v <= 1.0
    return inside


def build_scene(cfg):
    rng = substream(cfg.seed, "synth", "scene")
    w, h = cfg.width, cfg.height
    lo, hi = cfg.blob_radius_range
    blobs = []
    for _ in range(cfg.tissue_blob_count):
        rx, ry = rng.uniform(lo, hi, size=2)
        cx = rng.uniform(0.3 * w, 0.7 * w)
        cy = rng.uniform(0.3 * h, 0.7 * h)
        blobs.append((cx, cy, min(rx, 0.45 * w), min(ry, 0.45 * h), rng.uniform(0, math.pi)))
    blobs = np.array(blobs, dtype=np.float64).reshape(-1, 5)

    ps = cfg.patch_size
    cols, rows = w // ps, h // ps
    rmin_n, rmax_n = cfg.nucleus_radius_range
    margin = math.ceil(rmax_n) + 2
    probe = np.linspace(0.5, ps - 0.5, 16)
    frac = np.zeros((rows, cols))
    for row in range(rows):
        for col in range(cols):
            gx, gy = np.meshgrid(col * ps + probe, row * ps + probe)
            frac[row, col] = _in_blobs(blobs, gx, gy).mean()
    mult = np.ones((rows, cols))
    if cfg.variation > 0:
        from scipy.ndimage import gaussian_filter
        field_ = gaussian_filter(rng.standard_normal((rows, cols)), sigma=1.0, mode="reflect")
        field_ = (field_ - field_.mean()) / (field_.std() + 1e-12)
        mult = np.exp(cfg.variation * field_)
    interior = np.flatnonzero(frac.ravel() >= 0.9)
    if cfg.foci and len(interior):
        picks = rng.choice(interior, size=min(cfg.foci, len(interior)), replace=False)
        mult.ravel()[picks] *= cfg.focus_gain
    # unit tissue-weighted mean, so the slide-level density equals the configured one
    if frac.sum() > 0:
        mult /= (mult * frac).sum() / frac.sum()

    nuclei, colors, planted = [], [], {}
    for row in range(rows):
        for col in range(cols):
            x0, y0 = col * ps, row * ps
            f = frac[row, col]
            count = int(rng.poisson(cfg.density * mult[row, col] * f)) if f > 0 else 0
            placed = []
            attempts = 0
            while len(placed) < count and attempts < 200 * max(count, 1):
                attempts += 1
                a = rng.uniform(rmin_n, rmax_n)
                b = rng.uniform(rmin_n, a)
                cx = rng.uniform(x0 + margin, x0 + ps - margin)
                cy = rng.uniform(y0 + margin, y0 + ps - margin)
                ang = rng.uniform(0, math.pi)
                px = cx + np.array([0.0, a, -a, 0.0, 0.0])
                py = cy + np.array([0.0, 0.0, 0.0, a, -a])
                if not _in_blobs(blobs, px, py).all():
                    continue
                if any((cx - q[0]) ** 2 + (cy - q[1]) ** 2 < (a + q[2] + 3.0) ** 2 for q in placed):
                    continue
                placed.append((cx, cy, a, b, ang))
                colors.append(np.array(NUCLEUS) + rng.normal(0.0, 6.0, size=3))
            nuclei.extend(placed)
            planted[(x0, y0)] = len(placed)
    nuclei = np.array(nuclei, dtype=np.float64).reshape(-1, 5)
    colors = np.array(colors, dtype=np.float64).reshape(-1, 3)
    return Scene(blobs, nuclei, colors, planted)


class SceneRenderer:
    """Render arbitrary level-0 windows of a scene; identical windows give identical pixels."""

    def __init__(self, cfg, scene):
        self.cfg = cfg
        self.scene = scene
        rng = substream(cfg.seed, "synth", "texture")
        self.cell = 24
        gw = cfg.width // self.cell + 2
        gh = cfg.height // self.cell + 2
        self.coarse = rng.standard_normal((gh, gw))
        self.stain_cell = 384
        sw = cfg.width // self.stain_cell + 2
        sh = cfg.height // self.stain_cell + 2
        self.stain = rng.standard_normal((2, sh, sw))
        self.noise_seed = int(rng.integers(0, 2 ** 31))

    def _smooth_field(self, x, y, w, h, grid=None, cell=None):
        g = self.coarse if grid is None else grid
        cell = self.cell if cell is None else cell
        xs = (x + np.arange(w) + 0.5) / cell
        ys = (y + np.arange(h) + 0.5) / cell
        x0 = np.floor(xs).astype(int)
        y0 = np.floor(ys).astype(int)
        fx = (xs - x0)[None, :]
        fy = (ys - y0)[:, None]
        top = g[np.ix_(y0, x0)] * (1 - fx) + g[np.ix_(y0, x0 + 1)] * fx
        bot = g[np.ix_(y0 + 1, x0)] * (1 - fx) + g[np.ix_(y0 + 1, x0 + 1)] * fx
        return top * (1 - fy) + bot * fy

    def __call__(self, x, y, w, h):
        cfg, scene = self.cfg, self.scene
        noise = np.random.default_rng([self.noise_seed, x, y, w, h])
        img = np.empty((h, w, 3), dtype=np.float32)
        img[:] = BACKGROUND
        img += noise.standard_normal((h, w, 1), dtype=np.float32)
        b = scene.blobs
        reach = np.maximum(b[:, 2], b[:, 3])
        if np.any((b[:, 0] + reach > x) & (b[:, 0] - reach < x + w) & (b[:, 1] + reach > y) & (b[:, 1] - reach < y + h)):
            gy, gx = np.mgrid[y:y + h, x:x + w].astype(np.float32) + 0.5
            tissue = _in_blobs(b, gx, gy)
            if tissue.any():
                texture = (cfg.contrast * 30.0) * self._smooth_field(x, y, w, h).astype(np.float32)
                base = np.asarray(TISSUE, dtype=np.float32) + texture[..., None] * np.array([0.3, 1.0, 0.6], dtype=np.float32)
                if cfg.stain_variation:
                    for k, tint in enumerate(STAIN_TINTS):
                        drift = (cfg.stain_variation * self._smooth_field(x, y, w, h, self.stain[k], self.stain_cell)).astype(np.float32)
                        base += drift[..., None] * np.asarray(tint, dtype=np.float32)
                base += 4.0 * noise.standard_normal((h, w, 3), dtype=np.float32)
                np.copyto(img, base, where=tissue[..., None])
        nuc = scene.nuclei
        if len(nuc):
            reach = nuc[:, 2] + 1
            hit = np.flatnonzero((nuc[:, 0] + reach > x) & (nuc[:, 0] - reach < x + w)
                                 & (nuc[:, 1] + reach > y) & (nuc[:, 1] - reach < y + h))
            for i in hit:
                cx, cy, a, b, ang = nuc[i]
                bx0, bx1 = max(x, int(cx - a) - 1), min(x + w, int(cx + a) + 2)
                by0, by1 = max(y, int(cy - a) - 1), min(y + h, int(cy + a) + 2)
                if bx0 >= bx1 or by0 >= by1:
                    continue
                yy, xx = np.mgrid[by0:by1, bx0:bx1].astype(np.float64) + 0.5
                c, s = math.cos(ang), math.sin(ang)
                u = (c * (xx - cx) + s * (yy - cy)) / a
                v = (-s * (xx - cx) + c * (yy - cy)) / b
                inside = u * u + v * v <= 1.0
                region = img[by0 - y:by1 - y, bx0 - x:bx1 - x]
                region[inside] = scene.nucleus_colors[i] + noise.normal(0.0, 3.0, size=(int(inside.sum()), 3))
        img += np.asarray(cfg.color_shift, dtype=np.float64)
        return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def ground_truth_mask(cfg, scene):
    """Tissue indicator at thumbnail scale: a thumbnail pixel is tissue when over half of it is."""
    factor = max(1, math.ceil(max(cfg.width, cfg.height) / cfg.thumbnail_max_dim))
    tw, th = math.ceil(cfg.width / factor), math.ceil(cfg.height / factor)
    sub = (np.arange(4) + 0.5) / 4
    xs = (np.arange(tw)[:, None] + sub[None, :]).ravel() * factor
    ys = (np.arange(th)[:, None] + sub[None, :]).ravel() * factor
    gx, gy = np.meshgrid(np.minimum(xs, cfg.width - 0.5), np.minimum(ys, cfg.height - 0.5))
    inside = _in_blobs(scene.blobs, gx, gy).reshape(th, 4, tw, 4).mean(axis=(1, 3))
    return inside > 0.5, factor


def _mask_to_rows(mask):
    return ["".join("1" if b else "0" for b in row) for row in mask]


def mask_from_rows(rows):
    return np.array([[c == "1" for c in row] for row in rows], dtype=bool)


def generate_synthetic_slide(cfg, out_dir):
    """Write one slide under ``out_dir``. Returns (manifest_path, ground_truth dict)."""
    scene = build_scene(cfg)
    renderer = SceneRenderer(cfg, scene)
    manifest_path = write_slide(out_dir, cfg.width, cfg.height, cfg.tile_size, renderer,
                                label=str(cfg.class_label), center_id=cfg.center_id, n_levels=cfg.n_levels)
    mask, factor = ground_truth_mask(cfg, scene)
    truth = {
        "label": str(cfg.class_label),
        "center_id": cfg.center_id,
        "thumbnail_scale": factor,
        "tissue_mask": _mask_to_rows(mask),
        "planted_counts": [{"x": k[0], "y": k[1], "count": v} for k, v in sorted(scene.planted.items(), key=lambda kv: (kv[0][1], kv[0][0]))],
        "total_nuclei": int(len(scene.nuclei)),
        "config": _jsonable(asdict(cfg)),
    }
    with open(os.path.join(out_dir, "ground_truth.json"), "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest_path, truth


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def center_color_shift(seed, center_index):
    rng = substream(seed, "synth", "center", center_index)
    return tuple(float(v) for v in rng.uniform(-5.0, 5.0, size=3))


def generate_dataset(n_per_class, base_cfg, centers, out_dir, n_classes=2, threads=1):
    """Generate ``n_per_class`` slides per class, dealt round-robin over ``centers``.

    Writes ``dataset.json`` (a list of {manifest_path, label, center_id,
    slide_id}; paths relative to ``out_dir``) and returns its path.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if not centers:
        raise ValueError("at least one center is required")
    os.makedirs(out_dir, exist_ok=True)
    jobs = []
    for i in range(n_per_class):
        for label in range(n_classes):
            index = len(jobs)
            center_index = i % len(centers)
            slide_id = f"slide_{index:04d}"
            cfg = SynthConfig(**{**asdict(base_cfg),
                                 "seed": int(substream(base_cfg.seed, "synth", index).integers(0, 2 ** 31)),
                                 "class_label": label,
                                 "center_id": centers[center_index],
                                 "color_shift": center_color_shift(base_cfg.seed, center_index)})
            jobs.append((slide_id, cfg))

    def run(job):
        slide_id, cfg = job
        path, _ = generate_synthetic_slide(cfg, os.path.join(out_dir, slide_id))
        return {"manifest_path": os.path.relpath(path, out_dir), "label": str(cfg.class_label),
                "center_id": cfg.center_id, "slide_id": slide_id}

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            entries = list(pool.map(run, jobs))
    else:
        entries = [run(j) for j in jobs]
    path = os.path.join(out_dir, "dataset.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
