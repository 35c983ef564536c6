"""Tiled slide storage: a JSON manifest plus one PNG file per tile.

A slide is never materialized whole. Regions are stitched from the tiles they
overlap and thumbnails are accumulated tile by tile with mean pooling.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import MalformedManifest, MissingTile, OutOfBounds, SlideIOError

MANIFEST_KEYS = (
    "width", "height", "tile_size", "levels", "tile_path_pattern",
    "pixel_format", "label", "center_id",
)


@dataclass
class RgbTile:
    """A rectangle of 8-bit RGB pixels; ``pixels`` has shape (height, width, 3)."""

    origin_x: int
    origin_y: int
    pixels: np.ndarray

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass
class SlideManifest:
    width: int
    height: int
    tile_size: int
    levels: list
    tile_path_pattern: str
    pixel_format: str = "RGB8"
    label: str = None
    center_id: str = None

    def downsample(self, level):
        for entry in self.levels:
            if entry["level_index"] == level:
                return entry["downsample"]
        raise OutOfBounds(f"level {level} not present")

    def level_dimensions(self, level):
        ds = self.downsample(level)
        return math.ceil(self.width / ds), math.ceil(self.height / ds)

    def grid(self, level):
        w, h = self.level_dimensions(level)
        return math.ceil(w / self.tile_size), math.ceil(h / self.tile_size)

    def to_dict(self):
        return {
            "width": self.width,
            "height": self.height,
            "tile_size": self.tile_size,
            "levels": [dict(level_index=e["level_index"], downsample=e["downsample"]) for e in self.levels],
            "tile_path_pattern": self.tile_path_pattern,
            "pixel_format": self.pixel_format,
            "label": self.label,
            "center_id": self.center_id,
        }

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise MalformedManifest("<root>", "expected a JSON object")
        unknown = sorted(set(doc) - set(MANIFEST_KEYS))
        if unknown:
            raise MalformedManifest(unknown[0], "unknown key")
        for key in ("width", "height", "tile_size"):
            value = doc.get(key)
            if not isinstance(value, int) or isinstance(value, bool):
                raise MalformedManifest(key, "must be an integer")
            if value <= 0:
                raise MalformedManifest(key, "must be > 0")
        pattern = doc.get("tile_path_pattern")
        if not isinstance(pattern, str) or not all(p in pattern for p in ("{level}", "{col}", "{row}")):
            raise MalformedManifest("tile_path_pattern", "must contain {level}, {col} and {row}")
        fmt = doc.get("pixel_format", "RGB8")
        if fmt != "RGB8":
            raise MalformedManifest("pixel_format", f"unsupported format {fmt!r}")
        levels = doc.get("levels")
        if not isinstance(levels, list) or not levels:
            raise MalformedManifest("levels", "must be a non-empty list")
        parsed = []
        for entry in levels:
            if not isinstance(entry, dict) or set(entry) != {"level_index", "downsample"}:
                raise MalformedManifest("levels", "entries need exactly level_index and downsample")
            idx, ds = entry["level_index"], entry["downsample"]
            if not isinstance(idx, int) or not isinstance(ds, int) or idx < 0 or ds < 1:
                raise MalformedManifest("levels", "level_index >= 0 and downsample >= 1 integers required")
            if ds & (ds - 1):
                raise MalformedManifest("levels", f"downsample {ds} is not a power of two")
            parsed.append({"level_index": idx, "downsample": ds})
        parsed.sort(key=lambda e: e["level_index"])
        if parsed[0]["level_index"] != 0 or parsed[0]["downsample"] != 1:
            raise MalformedManifest("levels", "level 0 with downsample 1 is required")
        for a, b in zip(parsed, parsed[1:]):
            if b["level_index"] == a["level_index"]:
                raise MalformedManifest("levels", f"duplicate level {a['level_index']}")
            if b["downsample"] <= a["downsample"]:
                raise MalformedManifest("levels", "downsamples must strictly increase with level_index")
        for key in ("label", "center_id"):
            value = doc.get(key)
            if value is not None and not isinstance(value, str):
                raise MalformedManifest(key, "must be a string or null")
        return cls(
            width=doc["width"], height=doc["height"], tile_size=doc["tile_size"],
            levels=parsed, tile_path_pattern=pattern, pixel_format=fmt,
            label=doc.get("label"), center_id=doc.get("center_id"),
        )


@dataclass
class SlideHandle:
    """An opened slide. Read-only after construction, so safe to share across threads."""

    manifest: SlideManifest
    root: str
    path: str = field(default="")

    @property
    def width(self):
        return self.manifest.width

    @property
    def height(self):
        return self.manifest.height

    @property
    def tile_size(self):
        return self.manifest.tile_size

    @property
    def label(self):
        return self.manifest.label

    @property
    def center_id(self):
        return self.manifest.center_id

    @property
    def levels(self):
        return [e["level_index"] for e in self.manifest.levels]

    @property
    def slide_id(self):
        return os.path.basename(self.root.rstrip(os.sep)) or os.path.splitext(os.path.basename(self.path))[0]

    def tile_grid(self, level=0):
        return self.manifest.grid(level)

    def level_dimensions(self, level=0):
        return self.manifest.level_dimensions(level)

    def tile_path(self, level, col, row):
        rel = self.manifest.tile_path_pattern.format(level=level, col=col, row=row)
        return os.path.join(self.root, rel)

    def _load_tile(self, level, col, row):
        path = self.tile_path(level, col, row)
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except FileNotFoundError:
            raise MissingTile(path, level, col, row) from None
        except OSError as exc:
            raise SlideIOError(f"cannot decode tile {path}: {exc}") from exc
        lw, lh = self.level_dimensions(level)
        ts = self.tile_size
        expected = (min(ts, lh - row * ts), min(ts, lw - col * ts))
        if arr.shape[:2] != expected:
            raise SlideIOError(f"tile {path} has shape {arr.shape[:2]}, expected {expected}")
        return arr

    def read_region(self, level, x, y, w, h):
        """Return the ``w`` x ``h`` window at (x, y) of ``level``, stitched across tiles."""
        lw, lh = self.level_dimensions(level)
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > lw or y + h > lh:
            raise OutOfBounds(f"region ({x}, {y}, {w}, {h}) outside level {level} bounds {lw}x{lh}")
        ts = self.tile_size
        out = np.empty((h, w, 3), dtype=np.uint8)
        for row in range(y // ts, (y + h - 1) // ts + 1):
            for col in range(x // ts, (x + w - 1) // ts + 1):
                tile = self._load_tile(level, col, row)
                tx0, ty0 = col * ts, row * ts
                sx0, sy0 = max(x, tx0), max(y, ty0)
                sx1, sy1 = min(x + w, tx0 + tile.shape[1]), min(y + h, ty0 + tile.shape[0])
                out[sy0 - y:sy1 - y, sx0 - x:sx1 - x] = tile[sy0 - ty0:sy1 - ty0, sx0 - tx0:sx1 - tx0]
        return RgbTile(x, y, out)

    def iter_tiles(self, level=0):
        cols, rows = self.tile_grid(level)
        ts = self.tile_size
        for row in range(rows):
            for col in range(cols):
                yield col * ts, row * ts, self._load_tile(level, col, row)

    def thumbnail(self, max_dim):
        """Mean-pooled, aspect-preserving thumbnail whose longer side is at most ``max_dim``.

        Each output pixel is the mean of a ``factor`` x ``factor`` block of level 0
        (partial blocks at the right/bottom edge average what exists). A coarser
        pyramid level is used when its downsample divides the factor.
        """
        if max_dim < 16:
            raise ValueError("max_dim must be >= 16")
        factor = max(1, math.ceil(max(self.width, self.height) / max_dim))
        level, ds = 0, 1
        for entry in self.manifest.levels:
            if factor % entry["downsample"] == 0 and entry["downsample"] > ds:
                level, ds = entry["level_index"], entry["downsample"]
        step = factor // ds
        lw, lh = self.level_dimensions(level)
        out_w, out_h = math.ceil(lw / step), math.ceil(lh / step)
        sums = np.zeros((out_h, out_w, 3), dtype=np.float64)
        counts = np.zeros((out_h, out_w), dtype=np.float64)
        for x0, y0, tile in self.iter_tiles(level):
            rows = (y0 + np.arange(tile.shape[0])) // step
            cols = (x0 + np.arange(tile.shape[1])) // step
            r_starts = np.r_[0, np.flatnonzero(np.diff(rows)) + 1]
            c_starts = np.r_[0, np.flatnonzero(np.diff(cols)) + 1]
            block = np.add.reduceat(tile.astype(np.float64), r_starts, axis=0)
            block = np.add.reduceat(block, c_starts, axis=1)
            r_len = np.diff(np.r_[r_starts, tile.shape[0]])
            c_len = np.diff(np.r_[c_starts, tile.shape[1]])
            ri, ci = rows[r_starts], cols[c_starts]
            sums[ri[0]:ri[-1] + 1, ci[0]:ci[-1] + 1] += block
            counts[ri[0]:ri[-1] + 1, ci[0]:ci[-1] + 1] += np.outer(r_len, c_len)
        mean = sums / counts[..., None]
        return RgbTile(0, 0, np.clip(np.rint(mean), 0, 255).astype(np.uint8))


def open_slide(manifest_path):
    """Parse and validate a manifest; check every tile file exists. No pixels are read."""
    manifest_path = os.fspath(manifest_path)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SlideIOError(f"manifest not found: {manifest_path}") from None
    except json.JSONDecodeError as exc:
        raise MalformedManifest("<root>", f"invalid JSON: {exc}") from exc
    manifest = SlideManifest.from_dict(doc)
    handle = SlideHandle(manifest, os.path.dirname(os.path.abspath(manifest_path)), manifest_path)
    for entry in manifest.levels:
        level = entry["level_index"]
        cols, rows = manifest.grid(level)
        for row in range(rows):
            for col in range(cols):
                path = handle.tile_path(level, col, row)
                if not os.path.isfile(path):
                    raise MissingTile(path, level, col, row)
    return handle


def read_region(slide, level, x, y, w, h):
    return slide.read_region(level, x, y, w, h)


def thumbnail(slide, max_dim):
    return slide.thumbnail(max_dim)


def write_slide(directory, width, height, tile_size, render, *, label=None, center_id=None,
                n_levels=1, tile_path_pattern="tiles/{level}/{col}_{row}.png"):
    """Write a slide whose level-0 pixels come from ``render(x, y, w, h) -> uint8 (h, w, 3)``.

    Coarser levels (downsample 2, 4, ...) are mean pooled from level 0 region by
    region. Returns the manifest path.
    """
    os.makedirs(directory, exist_ok=True)
    levels = [{"level_index": i, "downsample": 2 ** i} for i in range(n_levels)]
    manifest = SlideManifest(width, height, tile_size, levels, tile_path_pattern,
                             label=None if label is None else str(label),
                             center_id=center_id)
    for entry in levels:
        level, ds = entry["level_index"], entry["downsample"]
        lw, lh = manifest.level_dimensions(level)
        cols, rows = manifest.grid(level)
        for row in range(rows):
            for col in range(cols):
                x0, y0 = col * tile_size, row * tile_size
                w, h = min(tile_size, lw - x0), min(tile_size, lh - y0)
                if ds == 1:
                    pixels = render(x0, y0, w, h)
                else:
                    src_w = min(w * ds, width - x0 * ds)
                    src_h = min(h * ds, height - y0 * ds)
                    src = render(x0 * ds, y0 * ds, src_w, src_h).astype(np.float64)
                    pixels = _mean_pool(src, ds, h, w)
                rel = tile_path_pattern.format(level=level, col=col, row=row)
                path = os.path.join(directory, rel)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), "RGB").save(path, compress_level=1)
    manifest_path = os.path.join(directory, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def _mean_pool(src, ds, out_h, out_w):
    pad_h, pad_w = out_h * ds - src.shape[0], out_w * ds - src.shape[1]
    padded = np.pad(src, ((0, pad_h), (0, pad_w), (0, 0)))
    weights = np.pad(np.ones(src.shape[:2]), ((0, pad_h), (0, pad_w)))
    s = padded.reshape(out_h, ds, out_w, ds, 3).sum(axis=(1, 3))
    c = weights.reshape(out_h, ds, out_w, ds).sum(axis=(1, 3))
    return np.clip(np.rint(s / c[..., None]), 0, 255).astype(np.uint8)
