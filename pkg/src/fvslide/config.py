"""Pipeline configuration: one JSON document, unknown keys rejected.

The top-level ``seed`` is the only seed; it is copied into the selection and
training sections, and every component draws from its own named substream.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .classifier import FisherSettings, TrainConfig
from .errors import ConfigError
from .preprocess import SelectionConfig

THREADS_ENV = "FV_SLIDE_THREADS"


@dataclass
class DescriptorConfig:
    extractor: str = "builtin"
    descriptors_csv: str = None
    K: int = 64
    D: int = 10

    def __post_init__(self):
        if self.extractor not in ("builtin", "import"):
            raise ConfigError(f"unknown extractor {self.extractor!r}")
        if self.extractor == "import" and not self.descriptors_csv:
            raise ConfigError("extractor 'import' needs descriptors_csv")
        if self.extractor == "builtin" and self.K != 64:
            raise ConfigError("the builtin extractor produces K=64")
        if self.K < 1 or self.D < 1:
            raise ConfigError("K and D must be >= 1")


@dataclass
class CodebookConfig:
    M: int = 5
    sigma: float = 0.1
    weights: list = None
    trainable_means: bool = False
    power_normalize: bool = False
    l2_normalize: bool = False
    kmeans_iterations: int = 50

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if self.weights is not None:
            if len(self.weights) != self.M or any(w <= 0 for w in self.weights):
                raise ConfigError("weights must be M positive numbers")
            if abs(sum(self.weights) - 1.0) > 1e-12:
                raise ConfigError("weights must sum to 1")

    @property
    def fisher_settings(self):
        return FisherSettings(self.power_normalize, self.l2_normalize)


@dataclass
class EvalConfig:
    positive_class: str = None
    mandatory_centers: list = field(default_factory=list)
    report_figures: bool = True


@dataclass
class PipelineConfig:
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        self.reseed(self.seed)

    def reseed(self, seed):
        self.seed = int(seed)
        self.selection.seed = self.seed
        self.train.seed = self.seed

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"selection": SelectionConfig, "descriptor": DescriptorConfig, "codebook": CodebookConfig,
                    "train": TrainConfig, "eval": EvalConfig}
        _reject_unknown(doc, set(sections) | {"seed", "threads"}, "config")
        kwargs = {}
        for name, klass in sections.items():
            body = doc.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"config.{name} must be an object")
            _reject_unknown(body, {f.name for f in dataclasses.fields(klass)}, f"config.{name}")
            try:
                kwargs[name] = klass(**body)
            except TypeError as exc:
                raise ConfigError(f"config.{name}: {exc}") from None
        for key in ("seed", "threads"):
            if key in doc:
                if not isinstance(doc[key], int) or isinstance(doc[key], bool):
                    raise ConfigError(f"config.{key} must be an integer")
                kwargs[key] = doc[key]
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(doc)


def _reject_unknown(doc, allowed, where):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def resolve_threads(cli_value=None, config_value=1):
    """--threads beats FV_SLIDE_THREADS beats the config value."""
    if cli_value is not None:
        return max(1, int(cli_value))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return max(1, int(config_value))
