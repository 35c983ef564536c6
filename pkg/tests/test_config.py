import json

import pytest

from fvslide.config import PipelineConfig, resolve_threads
from fvslide.errors import ConfigError


def test_defaults():
    cfg = PipelineConfig()
    assert (cfg.codebook.M, cfg.descriptor.D, cfg.descriptor.K) == (5, 10, 64)
    assert cfg.codebook.sigma == 0.1 and cfg.codebook.weights is None
    assert (cfg.train.epochs, cfg.train.batch_size) == (500, 1)
    assert cfg.train.learning_rate == 1e-5 and cfg.train.weight_decay == 1e-5


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"train": {"epoch": 3}},
    {"codebook": {"M": 0}},
    {"codebook": {"weights": [0.5, 0.5]}},
    {"descriptor": {"extractor": "import"}},
    {"seed": "7"},
    {"threads": 0},
    {"train": []},
])
def test_rejects(doc):
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(doc)


def test_seed_propagates():
    cfg = PipelineConfig.from_dict({"seed": 7, "train": {"epochs": 3}})
    assert cfg.selection.seed == 7 and cfg.train.seed == 7
    cfg.reseed(11)
    assert cfg.selection.seed == 11 and cfg.train.seed == 11


def test_round_trip(tmp_path):
    cfg = PipelineConfig.from_dict({"seed": 3, "codebook": {"M": 3, "weights": [0.5, 0.25, 0.25]}})
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert PipelineConfig.load(path).dumps() == cfg.dumps()


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError):
        PipelineConfig.load(path)


def test_threads_precedence(monkeypatch):
    monkeypatch.delenv("FV_SLIDE_THREADS", raising=False)
    assert resolve_threads(None, 2) == 2
    monkeypatch.setenv("FV_SLIDE_THREADS", "3")
    assert resolve_threads(None, 2) == 3
    assert resolve_threads(4, 2) == 4
    monkeypatch.setenv("FV_SLIDE_THREADS", "x")
    with pytest.raises(ConfigError):
        resolve_threads(None, 1)
