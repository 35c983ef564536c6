import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fvslide.errors import MalformedManifest, MissingTile, OutOfBounds
from fvslide.slide_io import SlideManifest, open_slide, read_region, thumbnail, write_slide


def _flat(value):
    def render(x, y, w, h):
        return np.full((h, w, 3), value, dtype=np.uint8)
    return render


def test_grid_arithmetic(tmp_path):
    path = write_slide(str(tmp_path), 2048, 2048, 512, _flat(128))
    slide = open_slide(path)
    assert slide.tile_grid(0) == (4, 4)
    assert (slide.width, slide.height, slide.tile_size) == (2048, 2048, 512)


def test_missing_tile_named(tmp_path):
    path = write_slide(str(tmp_path), 2048, 2048, 512, _flat(128))
    os.remove(tmp_path / "tiles" / "0" / "3_3.png")
    with pytest.raises(MissingTile) as info:
        open_slide(path)
    assert (info.value.level, info.value.col, info.value.row) == (0, 3, 3)
    assert "3_3.png" in str(info.value)


@pytest.mark.parametrize("patch, field", [
    ({"width": 0}, "width"),
    ({"tile_size": "512"}, "tile_size"),
    ({"levels": [{"level_index": 0, "downsample": 2}]}, "levels"),
    ({"levels": [{"level_index": 0, "downsample": 1}, {"level_index": 1, "downsample": 3}]}, "levels"),
    ({"levels": [{"level_index": 0, "downsample": 1}, {"level_index": 1, "downsample": 1}]}, "levels"),
    ({"tile_path_pattern": "tiles/{col}.png"}, "tile_path_pattern"),
    ({"pixel_format": "RGBA8"}, "pixel_format"),
    ({"extra": 1}, "extra"),
    ({"label": 3}, "label"),
])
def test_malformed_manifest_names_field(tmp_path, patch, field):
    path = write_slide(str(tmp_path), 1024, 1024, 512, _flat(10))
    with open(path) as fh:
        doc = json.load(fh)
    doc.update(patch)
    with open(path, "w") as fh:
        json.dump(doc, fh)
    with pytest.raises(MalformedManifest) as info:
        open_slide(path)
    assert info.value.field == field


def test_manifest_round_trip(gradient_slide):
    slide, _ = gradient_slide
    again = SlideManifest.from_dict(slide.manifest.to_dict())
    assert again == slide.manifest
    assert slide.label == "1" and slide.center_id == "C0"
    assert slide.levels == [0, 1, 2]
    assert [slide.manifest.downsample(lv) for lv in slide.levels] == [1, 2, 4]


def test_aligned_read_is_tile_content(gradient_slide):
    slide, full = gradient_slide
    tile = read_region(slide, 0, 0, 0, 512, 512)
    np.testing.assert_array_equal(tile.pixels, full[:512, :512])
    assert (tile.origin_x, tile.origin_y, tile.width, tile.height) == (0, 0, 512, 512)


def test_unaligned_read_matches_flat_oracle(gradient_slide):
    slide, full = gradient_slide
    np.testing.assert_array_equal(slide.read_region(0, 256, 256, 512, 512).pixels, full[256:768, 256:768])


@pytest.mark.parametrize("args", [(0, 1800, 0, 512, 512), (0, -1, 0, 10, 10), (0, 0, 0, 0, 5), (1, 900, 0, 200, 10)])
def test_out_of_bounds(gradient_slide, args):
    slide, _ = gradient_slide
    with pytest.raises(OutOfBounds):
        slide.read_region(*args)


@settings(max_examples=40, deadline=None)
@given(x=st.integers(0, 1900), y=st.integers(0, 1400), w=st.integers(1, 700), split=st.integers(1, 699),
       h=st.integers(1, 130))
def test_adjacent_regions_concatenate(gradient_slide, x, y, w, split, h):
    slide, full = gradient_slide
    w = min(w, 2048 - x)
    h = min(h, 1536 - y)
    split = min(split, w)
    left = slide.read_region(0, x, y, split, h).pixels
    union = slide.read_region(0, x, y, w, h).pixels
    if split < w:
        right = slide.read_region(0, x + split, y, w - split, h).pixels
        left = np.concatenate([left, right], axis=1)
    np.testing.assert_array_equal(left, union)
    np.testing.assert_array_equal(union, full[y:y + h, x:x + w])


def test_pyramid_levels_are_mean_pooled(gradient_slide):
    slide, full = gradient_slide
    level1 = slide.read_region(1, 0, 0, 1024, 768).pixels.astype(float)
    oracle = full.reshape(768, 2, 1024, 2, 3).mean(axis=(1, 3))
    assert np.abs(level1 - oracle).max() <= 0.5


def test_uniform_thumbnail(tmp_path):
    slide = open_slide(write_slide(str(tmp_path), 1000, 700, 256, _flat(128)))
    thumb = thumbnail(slide, 100)
    assert thumb.pixels.shape == (70, 100, 3)
    assert np.all(thumb.pixels == 128)


def test_thumbnail_aspect(tmp_path):
    slide = open_slide(write_slide(str(tmp_path), 2048, 1024, 512, _flat(60)))
    assert thumbnail(slide, 256).pixels.shape == (128, 256, 3)


def _box_oracle(full, factor):
    h, w = full.shape[:2]
    out_h, out_w = -(-h // factor), -(-w // factor)
    out = np.zeros((out_h, out_w, 3))
    for r in range(out_h):
        for c in range(out_w):
            out[r, c] = full[r * factor:(r + 1) * factor, c * factor:(c + 1) * factor].reshape(-1, 3).mean(axis=0)
    return out


@pytest.mark.parametrize("max_dim", [256, 100, 64])
def test_thumbnail_matches_box_filter(gradient_slide, max_dim):
    slide, full = gradient_slide
    factor = -(-2048 // max_dim)
    thumb = slide.thumbnail(max_dim).pixels.astype(float)
    oracle = _box_oracle(full.astype(float), factor)
    assert thumb.shape == oracle.shape
    # coarser levels are themselves rounded, so allow one intensity unit
    assert np.abs(thumb - oracle).max() <= 1.0


def test_synth_thumbnail_within_one_unit(synth_slide):
    slide, _ = synth_slide
    full = slide.read_region(0, 0, 0, slide.width, slide.height).pixels.astype(float)
    thumb = slide.thumbnail(256).pixels.astype(float)
    assert np.abs(thumb - _box_oracle(full, 6)).mean() <= 1.0


def test_read_is_deterministic(gradient_slide):
    slide, _ = gradient_slide
    again = open_slide(slide.path)
    a = slide.read_region(0, 100, 100, 300, 300).pixels.tobytes()
    assert a == again.read_region(0, 100, 100, 300, 300).pixels.tobytes()


def test_thumbnail_rejects_tiny_max_dim(gradient_slide):
    with pytest.raises(ValueError):
        gradient_slide[0].thumbnail(8)
