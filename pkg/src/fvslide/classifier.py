"""Fully connected classifier over pooled Fisher vectors, trained end to end.

The trainable path for one slide is

    raw descriptors -> projection -> instance norm -> Fisher vectors
    -> mean pooling -> [optional FV normalization] -> MLP -> softmax cross-entropy

and ``slide_gradients`` backpropagates through all of it. Optimization is
AdamW (decoupled weight decay) with batch size 1 by default.
"""

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fisher
from .descriptor import ProjectionParams, instance_normalize, instance_normalize_backward, project
from .errors import (ConfigError, EmptyDescriptorSet, NonFiniteLoss, ShapeMismatch,
                     SingleClassDataset)
from .rng import substream

FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 1
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_projection: bool = True
    train_means: bool = False
    hidden_sizes: tuple = (64, 32)

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid optimizer moments")
        if any(h < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be >= 1")


@dataclass
class MlpParams:
    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[0]} != previous output {self.weights[i - 1].shape[1]}")

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def init(cls, sizes, rng):
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-bound, bound, size=fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes):
        return cls([np.zeros((a, b)) for a, b in zip(sizes, sizes[1:])], [np.zeros(b) for b in sizes[1:]])


def forward(mlp, fv, return_cache=False):
    """Affine layers with ReLU between them and none after the last."""
    x = np.asarray(fv, dtype=np.float64)
    if x.shape != (mlp.sizes[0],):
        raise ShapeMismatch(f"input has shape {x.shape}, classifier expects ({mlp.sizes[0]},)")
    inputs = []
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        inputs.append(x)
        z = x @ w + b
        x = z if i == last else np.maximum(z, 0.0)
    return (x, inputs) if return_cache else x


def forward_backward(mlp, inputs, grad_logits):
    """Backprop through the MLP given the cached layer inputs; returns (dW list, db list, d_input)."""
    g = np.asarray(grad_logits, dtype=np.float64)
    grad_w, grad_b = [None] * len(mlp.weights), [None] * len(mlp.weights)
    for i in range(len(mlp.weights) - 1, -1, -1):
        grad_w[i] = np.outer(inputs[i], g)
        grad_b[i] = g
        g = mlp.weights[i] @ g
        if i > 0:
            g = g * (inputs[i] > 0)
    return grad_w, grad_b, g


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def softmax(logits):
    return np.exp(log_softmax(logits))


def loss(logits, label):
    """Softmax cross-entropy, ``-log softmax(logits)[label]``."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} outside [0, {logits.shape[0]})")
    return float(-log_softmax(logits)[label])


def loss_grad(logits, label):
    p = softmax(logits)
    p[label] -= 1.0
    return p


@dataclass
class FisherSettings:
    """Options of the encoding stage that are not codebook parameters."""

    power_normalize: bool = False
    l2_normalize: bool = False


@dataclass
class TrainedModel:
    projection: ProjectionParams
    codebook: fisher.GmmCodebook
    mlp: MlpParams
    class_names: list
    config: dict = field(default_factory=dict)
    fisher_settings: FisherSettings = field(default_factory=FisherSettings)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if len(self.class_names) != self.mlp.sizes[-1]:
            raise ShapeMismatch(f"{len(self.class_names)} class names for {self.mlp.sizes[-1]} outputs")
        if self.projection.out_dim != self.codebook.D or self.codebook.fv_dim != self.mlp.sizes[0]:
            raise ShapeMismatch("projection, codebook and classifier dimensions disagree")

    def parameters(self, train_projection=True, train_means=None):
        """Name -> array view of every trainable parameter (arrays are updated in place)."""
        params = {}
        if train_projection:
            params["projection.W"] = self.projection.W
            params["projection.b"] = self.projection.b
        if self.codebook.trainable_means if train_means is None else train_means:
            params["codebook.means"] = self.codebook.means
        for i, (w, b) in enumerate(zip(self.mlp.weights, self.mlp.biases)):
            params[f"mlp.W{i}"] = w
            params[f"mlp.b{i}"] = b
        return params

    # -- serialization -------------------------------------------------

    def to_dict(self):
        return {
            "format_version": self.format_version,
            "class_names": list(self.class_names),
            "config": self.config,
            "fisher_settings": asdict(self.fisher_settings),
            "projection": {"W": _enc(self.projection.W), "b": _enc(self.projection.b),
                           "trainable": self.projection.trainable},
            "codebook": {"M": self.codebook.M, "D": self.codebook.D, "means": _enc(self.codebook.means),
                         "sigmas": _enc(self.codebook.sigmas), "weights": _enc(self.codebook.weights),
                         "trainable_means": self.codebook.trainable_means},
            "mlp": {"layers": [{"W": _enc(w), "b": _enc(b)} for w, b in zip(self.mlp.weights, self.mlp.biases)]},
        }

    @classmethod
    def from_dict(cls, doc):
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {version!r}")
        cbd = doc["codebook"]
        codebook = fisher.GmmCodebook(_dec(cbd["means"]), _dec(cbd["sigmas"]), _dec(cbd["weights"]),
                                      bool(cbd.get("trainable_means", False)))
        if codebook.M != cbd["M"] or codebook.D != cbd["D"]:
            raise ShapeMismatch("codebook header disagrees with its arrays")
        proj = ProjectionParams(_dec(doc["projection"]["W"]), _dec(doc["projection"]["b"]),
                                bool(doc["projection"].get("trainable", True)))
        layers = doc["mlp"]["layers"]
        mlp = MlpParams([_dec(l["W"]) for l in layers], [_dec(l["b"]) for l in layers])
        return cls(proj, codebook, mlp, list(doc["class_names"]), doc.get("config", {}),
                   FisherSettings(**doc.get("fisher_settings", {})), version)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def save(self, path):
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _enc(arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        return format(float(arr), ".17g")
    return [_enc(a) for a in arr]


def _dec(values):
    return np.array(values, dtype=np.float64) if not isinstance(values, str) else float(values)


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- slide-level forward / backward ---------------------------------------

def slide_forward(model, raw):
    """Run one slide's raw descriptors (n, K) through the whole model; returns a cache dict."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if raw.shape[0] == 0:
        raise EmptyDescriptorSet("slide has no descriptors")
    projected = project(raw, model.projection)
    normed = instance_normalize(projected)
    pooled = fisher.encode_slide(model.codebook, normed)
    fs = model.fisher_settings
    fv = fisher.normalize_fv(pooled, fs.power_normalize, fs.l2_normalize)
    logits, inputs = forward(model.mlp, fv, return_cache=True)
    return {"raw": raw, "projected": projected, "normed": normed, "pooled": pooled,
            "fv": fv, "inputs": inputs, "logits": logits}


def slide_gradients(model, cache, label, names):
    """Loss and gradients for the named parameters (see ``TrainedModel.parameters``)."""
    logits = cache["logits"]
    value = loss(logits, label)
    grad_w, grad_b, g_fv = forward_backward(model.mlp, cache["inputs"], loss_grad(logits, label))
    grads = {}
    for i in range(len(grad_w)):
        grads[f"mlp.W{i}"] = grad_w[i]
        grads[f"mlp.b{i}"] = grad_b[i]
    need_lower = any(not n.startswith("mlp.") for n in names)
    if need_lower:
        fs = model.fisher_settings
        g_pooled = fisher.normalize_fv_backward(cache["pooled"], g_fv, fs.power_normalize, fs.l2_normalize)
        grad_normed, grad_means = fisher.encode_backward(model.codebook, cache["normed"], g_pooled)
        if "codebook.means" in names:
            if grad_means is None:
                _, grad_means = fisher.encode_backward(
                    fisher.GmmCodebook(model.codebook.means, model.codebook.sigmas, model.codebook.weights, True),
                    cache["normed"], g_pooled)
            grads["codebook.means"] = grad_means
        if "projection.W" in names or "projection.b" in names:
            grad_proj = instance_normalize_backward(cache["projected"], grad_normed)
            grads["projection.W"] = cache["raw"].T @ grad_proj
            grads["projection.b"] = grad_proj.sum(axis=0)
    return value, {n: grads[n] for n in names}


# -- optimizer --------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay applied as ``w *= 1 - lr * wd`` before the moment step."""

    def __init__(self, params, lr=1e-5, weight_decay=1e-5, beta1=0.9, beta2=0.999, eps=1e-8, decay=None):
        self.params = params
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.decay = set(params) if decay is None else set(decay)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if name in self.decay:
                p *= 1.0 - self.lr * self.weight_decay
            self.m[name] *= self.beta1
            self.m[name] += (1.0 - self.beta1) * g
            self.v[name] *= self.beta2
            self.v[name] += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)


def decayed(names):
    # biases and codebook means are not decayed
    return [n for n in names if n == "projection.W" or (n.startswith("mlp.W"))]


# -- training ---------------------------------------------------------------

@dataclass
class TrainingResult:
    model: TrainedModel
    loss_trace: list


def initialize_model(slides, class_names, cfg, *, out_dim=10, n_centers=5, sigma=0.1, weights=None,
                     trainable_means=False, fisher_settings=None, kmeans_iterations=50):
    """Fresh projection (uniform +-sqrt(1/K)), k-means codebook over the normalized
    training descriptors, and a randomly initialized MLP.

    ``slides`` is a list of (raw (n, K) array, label index) pairs.
    """
    if not slides:
        raise EmptyDescriptorSet("no training slides")
    k = np.atleast_2d(slides[0][0]).shape[1]
    rng = substream(cfg.seed, "init")
    projection = ProjectionParams.init(k, out_dim, rng)
    pool = np.concatenate([instance_normalize(project(raw, projection)) for raw, _ in slides])
    codebook = fisher.init_codebook(pool, n_centers, out_dim, sigma=sigma, trainable_means=trainable_means,
                                    rng=substream(cfg.seed, "init", "kmeans"))
    if weights is not None:
        codebook = fisher.GmmCodebook(codebook.means, codebook.sigmas, weights, trainable_means)
    sizes = [codebook.fv_dim, *cfg.hidden_sizes, len(class_names)]
    mlp = MlpParams.init(sizes, substream(cfg.seed, "init", "mlp"))
    return TrainedModel(projection, codebook, mlp, list(class_names),
                        fisher_settings=fisher_settings or FisherSettings())


def train(slides, cfg, model, log=None):
    """Train ``model`` in place on (raw descriptors, label index) pairs.

    Each epoch visits the slides in a seed-shuffled order, ``cfg.batch_size``
    slides per optimizer step (gradients averaged over the batch). Returns a
    TrainingResult whose ``loss_trace`` holds the mean loss of every epoch.
    """
    labels = {int(lbl) for _, lbl in slides}
    if len(labels) < 2:
        raise SingleClassDataset(f"training needs at least 2 classes, found {sorted(labels)}")
    if cfg.train_means:
        model.codebook.trainable_means = True
    params = model.parameters(train_projection=cfg.train_projection, train_means=model.codebook.trainable_means)
    names = list(params)
    opt = AdamW(params, cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps, decayed(names))
    shuffle = substream(cfg.seed, "shuffle")
    trace = []
    for epoch in range(cfg.epochs):
        order = shuffle.permutation(len(slides))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            acc = None
            for idx in batch:
                raw, label = slides[idx]
                value, grads = slide_gradients(model, slide_forward(model, raw), int(label), names)
                if not np.isfinite(value):
                    raise NonFiniteLoss(epoch, int(idx))
                total += value
                if acc is None:
                    acc = grads
                else:
                    for n in names:
                        acc[n] = acc[n] + grads[n]
            if len(batch) > 1:
                acc = {n: g / len(batch) for n, g in acc.items()}
            opt.step(acc)
        mean_loss = total / len(slides)
        if not np.isfinite(mean_loss):
            raise NonFiniteLoss(epoch)
        trace.append(mean_loss)
        if log is not None:
            log(epoch, mean_loss)
    return TrainingResult(model, trace)


def predict_descriptors(model, raw):
    """Class index, probabilities and pooled vector for one slide's raw descriptors."""
    cache = slide_forward(model, raw)
    probs = softmax(cache["logits"])
    return {"class": int(np.argmax(probs)), "probabilities": probs, "fv": cache["fv"]}
