"""Fisher-vector encoding over an isotropic Gaussian mixture codebook.

For a descriptor f and Gaussian m (mean v_m, scale sigma_m, weight pi_m) with
posterior tau_m, the two D-dimensional blocks are

    mu-block     tau_m / sqrt(pi_m)   * (f - v_m) / sigma_m
    sigma-block  tau_m / sqrt(2 pi_m) * ((f - v_m)**2 / sigma_m**2 - 1)

and the per-descriptor vector is [mu_1, sigma_1, ..., mu_M, sigma_M], length
2*M*D. A slide vector is the mean over its descriptors. ``encode_backward``
gives exact gradients of that mean, including the dependence of tau on both
the descriptors and the means.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyDescriptorSet, InsufficientData, ShapeMismatch

DEFAULT_M = 5
DEFAULT_D = 10
DEFAULT_SIGMA = 0.1
LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class GmmCodebook:
    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    trainable_means: bool = False

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = self.means.shape[0]
        if self.sigmas.shape != (m,) or self.weights.shape != (m,):
            raise ShapeMismatch(f"codebook with {m} means needs {m} sigmas and {m} weights")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.sigmas)) and np.all(np.isfinite(self.weights))):
            raise ValueError("codebook parameters must be finite")
        if np.any(self.sigmas <= 0):
            raise ValueError("sigmas must be > 0")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to 1")

    @property
    def M(self):
        return self.means.shape[0]

    @property
    def D(self):
        return self.means.shape[1]

    @property
    def fv_dim(self):
        return 2 * self.M * self.D

    @classmethod
    def uniform(cls, means, sigma=DEFAULT_SIGMA, trainable_means=False):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        m = means.shape[0]
        return cls(means, np.full(m, float(sigma)), np.full(m, 1.0 / m), trainable_means)

    def copy(self):
        return GmmCodebook(self.means.copy(), self.sigmas.copy(), self.weights.copy(), self.trainable_means)

    def to_dict(self):
        return {"M": self.M, "D": self.D, "means": self.means.tolist(),
                "sigmas": self.sigmas.tolist(), "weights": self.weights.tolist(),
                "trainable_means": self.trainable_means}

    @classmethod
    def from_dict(cls, doc):
        cb = cls(doc["means"], doc["sigmas"], doc["weights"], bool(doc.get("trainable_means", False)))
        if cb.M != doc["M"] or cb.D != doc["D"]:
            raise ShapeMismatch(f"codebook declares M={doc['M']}, D={doc['D']} but arrays are {cb.means.shape}")
        return cb

    def save(self, path):
        # json writes floats with repr(), the shortest string that round-trips exactly
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def kmeans(points, k, rng, iterations=50):
    """k-means++ seeding followed by a fixed number of Lloyd iterations.

    An emptied cluster keeps its previous center.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    for _ in range(iterations):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers


def init_codebook(pool, M=DEFAULT_M, D=None, seed=0, sigma=DEFAULT_SIGMA, trainable_means=False, rng=None):
    """Codebook with k-means centers of ``pool``, equal weights 1/M and a constant sigma."""
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    if D is not None and pool.shape[1] != D:
        raise ShapeMismatch(f"pool has dimension {pool.shape[1]}, expected {D}")
    if pool.shape[0] < M:
        raise InsufficientData(f"need at least {M} descriptors to fit {M} centers, got {pool.shape[0]}")
    rng = np.random.default_rng(seed) if rng is None else rng
    return GmmCodebook.uniform(kmeans(pool, M, rng), sigma, trainable_means)


def _check(cb, descriptors):
    f = np.asarray(descriptors, dtype=np.float64)
    if f.shape[-1] != cb.D:
        raise ShapeMismatch(f"descriptor dimension {f.shape[-1]} != codebook dimension {cb.D}")
    return f


def log_joint(cb, descriptors):
    """log(pi_m N(f; v_m, sigma_m^2 I)) for each row of ``descriptors``: shape (n, M)."""
    f = np.atleast_2d(_check(cb, descriptors))
    diff = f[:, None, :] - cb.means[None, :, :]
    sq = (diff ** 2).sum(axis=2)
    var = cb.sigmas ** 2
    return np.log(cb.weights) - 0.5 * cb.D * (LOG_2PI + np.log(var)) - sq / (2.0 * var)


def posterior(cb, descriptors):
    """Soft assignments tau, computed in log space with max subtraction.

    A single descriptor (D,) gives an (M,) vector; a stack (n, D) gives (n, M).
    """
    f = _check(cb, descriptors)
    logp = log_joint(cb, f)
    logp -= logp.max(axis=1, keepdims=True)
    tau = np.exp(logp)
    tau /= tau.sum(axis=1, keepdims=True)
    return tau[0] if f.ndim == 1 else tau


def _blocks(cb, f):
    diff = f[:, None, :] - cb.means[None, :, :]
    tau = posterior(cb, f)
    sig = cb.sigmas[None, :, None]
    mu_block = tau[:, :, None] / np.sqrt(cb.weights)[None, :, None] * (diff / sig)
    sigma_block = tau[:, :, None] / np.sqrt(2.0 * cb.weights)[None, :, None] * (diff ** 2 / sig ** 2 - 1.0)
    return diff, tau, mu_block, sigma_block


def encode_descriptors(cb, descriptors):
    """Per-descriptor Fisher vectors, shape (n, 2*M*D)."""
    f = np.atleast_2d(_check(cb, descriptors))
    _, _, mu_block, sigma_block = _blocks(cb, f)
    return np.stack([mu_block, sigma_block], axis=2).reshape(f.shape[0], cb.fv_dim)


def encode_descriptor(cb, descriptor):
    f = _check(cb, descriptor)
    if f.ndim != 1:
        raise ShapeMismatch("encode_descriptor takes a single (D,) descriptor")
    return encode_descriptors(cb, f[None, :])[0]


def _canonical_order(f):
    # rows sorted lexicographically so the pooled sum never depends on input order
    return np.lexsort(f.T[::-1])


def encode_slide(cb, descriptors):
    """Average-pooled Fisher vector of a slide's descriptors.

    Rows are summed in lexicographic order of the descriptors, which makes the
    result bitwise invariant to the order they are passed in.
    """
    f = np.atleast_2d(_check(cb, descriptors))
    if f.shape[0] == 0:
        raise EmptyDescriptorSet("cannot pool an empty descriptor set")
    fvs = encode_descriptors(cb, f)[_canonical_order(f)]
    total = np.zeros(cb.fv_dim)
    for row in fvs:
        total += row
    return total / f.shape[0]


def encode_backward(cb, descriptors, upstream_grad):
    """Gradients of ``encode_slide`` given dL/d(slide vector).

    Returns ``(grad_f, grad_v)`` with shapes (n, D) and (M, D); ``grad_v`` is
    None unless ``cb.trainable_means``.
    """
    f = np.atleast_2d(_check(cb, descriptors))
    n = f.shape[0]
    if n == 0:
        raise EmptyDescriptorSet("cannot pool an empty descriptor set")
    g = np.asarray(upstream_grad, dtype=np.float64)
    if g.shape != (cb.fv_dim,):
        raise ShapeMismatch(f"upstream gradient has shape {g.shape}, expected ({cb.fv_dim},)")
    g = g.reshape(cb.M, 2, cb.D) / n
    g_mu, g_sigma = g[:, 0, :], g[:, 1, :]
    diff, tau, _, _ = _blocks(cb, f)
    sig = cb.sigmas[None, :, None]
    var = sig ** 2
    c_mu = 1.0 / np.sqrt(cb.weights)[None, :, None]
    c_sigma = 1.0 / np.sqrt(2.0 * cb.weights)[None, :, None]
    # dL/dtau_im with tau held fixed inside each block
    d_tau = (c_mu * (diff / sig) * g_mu[None]).sum(axis=2) + (c_sigma * (diff ** 2 / var - 1.0) * g_sigma[None]).sum(axis=2)
    # softmax over components: dL/dlogp = tau * (dL/dtau - sum_j tau_j dL/dtau_j)
    d_logp = tau * (d_tau - (tau * d_tau).sum(axis=1, keepdims=True))
    tau3 = tau[:, :, None]
    d_diff = (tau3 * c_mu / sig * g_mu[None]
              + tau3 * c_sigma * (2.0 * diff / var) * g_sigma[None]
              - d_logp[:, :, None] * diff / var)
    grad_f = d_diff.sum(axis=1)
    grad_v = -d_diff.sum(axis=0) if cb.trainable_means else None
    return grad_f, grad_v


def normalize_fv(fv, power=False, l2=False):
    """Optional signed-square-root and L2 normalization of a pooled vector."""
    out = np.asarray(fv, dtype=np.float64)
    if power:
        out = np.sign(out) * np.sqrt(np.abs(out))
    if l2:
        norm = np.linalg.norm(out)
        if norm > 0:
            out = out / norm
    return out


def normalize_fv_backward(fv, grad_out, power=False, l2=False, eps=1e-12):
    x = np.asarray(fv, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64)
    p = normalize_fv(x, power=power)
    if l2:
        norm = np.linalg.norm(p)
        if norm > 0:
            y = p / norm
            g = (g - y * (y @ g)) / norm
    if power:
        g = g * 0.5 / np.sqrt(np.abs(x) + eps)
    return g
