"""End-to-end orchestration: dataset manifests, per-slide descriptors, training, prediction, CV."""

import copy
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import classifier, evaluation
from .config import PipelineConfig
from .descriptor import extract_builtin, import_descriptors
from .errors import ConfigError, EmptyDescriptorSet, SlideIOError
from .preprocess import StainMatrix, preprocess_slide
from .rng import substream
from .slide_io import open_slide


@dataclass
class DatasetEntry:
    slide_id: str
    manifest_path: str
    label: str
    center_id: str = None


def load_dataset(path):
    """Read a dataset manifest: a JSON list of {manifest_path, label, center_id[, slide_id]}.

    Relative manifest paths are resolved against the dataset file's directory.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise SlideIOError(f"dataset manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, list) or not doc:
        raise ConfigError(f"{path}: expected a non-empty JSON list")
    base = os.path.dirname(os.path.abspath(path))
    entries, seen = [], set()
    for i, item in enumerate(doc):
        if not isinstance(item, dict) or "label" not in item:
            raise ConfigError(f"{path}: entry {i} needs at least a label")
        unknown = set(item) - {"manifest_path", "label", "center_id", "slide_id"}
        if unknown:
            raise ConfigError(f"{path}: entry {i} has unknown key(s) {sorted(unknown)}")
        manifest = item.get("manifest_path")
        if manifest is not None and not os.path.isabs(manifest):
            manifest = os.path.join(base, manifest)
        slide_id = item.get("slide_id") or slide_id_for(manifest)
        if slide_id in seen:
            raise ConfigError(f"{path}: duplicate slide_id {slide_id!r}")
        seen.add(slide_id)
        entries.append(DatasetEntry(slide_id, manifest, str(item["label"]), item.get("center_id")))
    return entries


def slide_id_for(manifest_path):
    if manifest_path is None:
        raise ConfigError("a dataset entry needs manifest_path or slide_id")
    parent = os.path.basename(os.path.dirname(os.path.abspath(manifest_path)))
    return parent or os.path.splitext(os.path.basename(manifest_path))[0]


def class_table(entries):
    return sorted({e.label for e in entries})


def _map(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def preprocess(slide, cfg, threads=1, stains=None):
    """Patch scoring and selection with the slide's own "selection" substream."""
    rng = substream(cfg.seed, "selection", slide.slide_id)
    return preprocess_slide(slide, cfg.selection, stains, threads, rng)


def slide_descriptors(slide, cfg, threads=1, stains=None):
    """Preprocess one opened slide and describe its selected patches.

    Returns (raw descriptors (n, 64), PreprocessResult).
    """
    stains = StainMatrix.default() if stains is None else stains
    result = preprocess(slide, cfg, threads, stains)

    def describe(record):
        patch = slide.read_region(0, record.x, record.y, record.size, record.size)
        return extract_builtin(patch, stains)

    raw = np.array(_map(describe, result.selected, threads), dtype=np.float64)
    return raw, result


class FeatureSource:
    """Raw descriptors per slide, computed once and reused across folds and reruns."""

    def __init__(self, cfg, threads=1):
        self.cfg = cfg
        self.threads = threads
        self._imported = None
        self._cache = {}
        self.preprocess_results = {}

    def _import(self):
        if self._imported is None:
            self._imported = import_descriptors(self.cfg.descriptor.descriptors_csv, self.cfg.descriptor.K)
        return self._imported

    def get(self, entry):
        if entry.slide_id in self._cache:
            return self._cache[entry.slide_id]
        if self.cfg.descriptor.extractor == "import":
            table = self._import()
            if entry.slide_id not in table:
                raise EmptyDescriptorSet(f"no imported descriptors for slide {entry.slide_id!r}")
            raw = table[entry.slide_id]
        else:
            if entry.manifest_path is None:
                raise ConfigError(f"slide {entry.slide_id!r} has no manifest_path")
            raw, result = slide_descriptors(open_slide(entry.manifest_path), self.cfg, self.threads)
            self.preprocess_results[entry.slide_id] = result
        self._cache[entry.slide_id] = raw
        return raw

    def all(self, entries):
        return [self.get(e) for e in entries]


def config_snapshot(cfg):
    doc = cfg.to_dict()
    doc.pop("threads", None)  # wall-time only; must not change checkpoint bytes
    return doc


def fit(raws, label_index, class_names, cfg, log=None, codebook=None):
    """Initialize (projection, k-means codebook, MLP) from the training slides and train.

    A given ``codebook`` replaces the k-means one; it must match M and D.
    """
    slides = list(zip(raws, label_index))
    cb = cfg.codebook
    model = classifier.initialize_model(
        slides, class_names, cfg.train, out_dim=cfg.descriptor.D, n_centers=cb.M, sigma=cb.sigma,
        weights=cb.weights, trainable_means=cb.trainable_means or cfg.train.train_means,
        fisher_settings=cb.fisher_settings, kmeans_iterations=cb.kmeans_iterations)
    if codebook is not None:
        if (codebook.M, codebook.D) != (model.codebook.M, model.codebook.D):
            raise ConfigError(f"codebook is M={codebook.M}, D={codebook.D}; config expects "
                              f"M={model.codebook.M}, D={model.codebook.D}")
        model.codebook = codebook.copy()
    model.config = config_snapshot(cfg)
    return classifier.train(slides, cfg.train, model, log=log)


def predict_raws(model, raws):
    preds, probs = [], []
    for raw in raws:
        out = classifier.predict_descriptors(model, raw)
        preds.append(out["class"])
        probs.append(out["probabilities"])
    return np.array(preds, dtype=np.int64), np.array(probs)


def predict_slide(model, manifest_path, threads=1, cfg=None):
    """Run the full pipeline on one slide, by default with the model's stored configuration."""
    if cfg is None:
        cfg = PipelineConfig.from_dict(model.config) if model.config else PipelineConfig()
    raw, _ = slide_descriptors(open_slide(manifest_path), cfg, threads)
    out = classifier.predict_descriptors(model, raw)
    out["class_name"] = model.class_names[out["class"]]
    return out


def positive_index(class_names, positive_class=None):
    if positive_class is None:
        return 1 if len(class_names) > 1 else 0
    if positive_class not in class_names:
        raise ConfigError(f"positive class {positive_class!r} not among {class_names}")
    return class_names.index(positive_class)


def evaluate_model(model, entries, features):
    class_names = model.class_names
    unknown = {e.label for e in entries} - set(class_names)
    if unknown:
        raise ConfigError(f"labels {sorted(unknown)} are not in the model's class table")
    labels = np.array([class_names.index(e.label) for e in entries])
    preds, probs = predict_raws(model, features.all(entries))
    pos = positive_index(class_names, _eval_positive(model))
    report = evaluation.evaluate_predictions(preds, probs, labels, class_names, pos)
    return report, preds, probs, labels


def _eval_positive(model):
    return (model.config.get("eval") or {}).get("positive_class") if model.config else None


def cross_validate(entries, cfg, features=None, mandatory_centers=None, threads=1):
    """Leave-one-center-out: train on the other centers, test on each eligible center.

    Returns a dict with per-fold reports, their mean, the pooled out-of-fold
    report, and the pooled labels / probabilities in dataset order.
    """
    features = FeatureSource(cfg, threads) if features is None else features
    class_names = class_table(entries)
    labels = np.array([class_names.index(e.label) for e in entries])
    raws = features.all(entries)
    mandatory = cfg.eval.mandatory_centers if mandatory_centers is None else mandatory_centers
    pos = positive_index(class_names, cfg.eval.positive_class)

    probabilities = {}

    def fit_predict(train_idx, test_idx):
        result = fit([raws[i] for i in train_idx], labels[train_idx], class_names, cfg)
        pred, prob = predict_raws(result.model, [raws[i] for i in test_idx])
        probabilities.update(zip(test_idx, prob))
        return pred, prob

    folds, mean, pooled = evaluation.leave_one_center_out(
        [e.center_id for e in entries], labels, fit_predict, mandatory, class_names, pos)
    tested = sorted(probabilities)
    return {"folds": folds, "mean": mean, "pooled": pooled, "labels": labels[tested],
            "probabilities": np.array([probabilities[i] for i in tested]), "positive": pos}


def ablation_selection_mode(entries, cfg, threads=1, mandatory_centers=None):
    """The same cross-validated train/evaluate cycle with cellularity and with random selection."""
    out = {}
    for mode in ("cellularity", "random"):
        run_cfg = copy.deepcopy(cfg)
        run_cfg.selection.mode = mode
        result = cross_validate(entries, run_cfg, FeatureSource(run_cfg, threads), mandatory_centers, threads)
        for key in ("mean", "pooled"):
            result[key].label = f"{mode}:{result[key].label}"
        out[mode] = result
    return out
