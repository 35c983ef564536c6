import numpy as np
import pytest

from fvslide.slide_io import open_slide, write_slide
from fvslide.synth import SynthConfig, generate_synthetic_slide


def gradient_render(width, height):
    """Deterministic full-slide raster and a render callback cutting windows from it."""
    yy, xx = np.mgrid[0:height, 0:width]
    full = np.stack([(xx * 7 + yy) % 256, (yy * 5 + xx // 3) % 256, (xx ^ yy) % 256], axis=-1).astype(np.uint8)

    def render(x, y, w, h):
        return full[y:y + h, x:x + w]

    return full, render


@pytest.fixture(scope="session")
def gradient_slide(tmp_path_factory):
    """A 2048 x 1536 slide with 512 tiles and three pyramid levels, plus its flat raster."""
    root = tmp_path_factory.mktemp("gradient")
    full, render = gradient_render(2048, 1536)
    path = write_slide(str(root), 2048, 1536, 512, render, label="1", center_id="C0", n_levels=3)
    return open_slide(path), full


@pytest.fixture(scope="session")
def small_synth_cfg():
    return SynthConfig(width=1536, height=1536, seed=3, class_label=1, tissue_blob_count=3,
                       blob_radius_range=(450.0, 650.0), stain_variation=0.0, center_id="C0")


@pytest.fixture(scope="session")
def synth_slide(tmp_path_factory, small_synth_cfg):
    root = tmp_path_factory.mktemp("synth")
    path, truth = generate_synthetic_slide(small_synth_cfg, str(root))
    return open_slide(path), truth


def pytest_terminal_summary(terminalreporter):
    acceptance = __import__("sys").modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
