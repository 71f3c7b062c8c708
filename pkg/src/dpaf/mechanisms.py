"""DP primitives: SIN, feature aggregation, clipping, top-k compression, DPSGD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .accountant import agg_sensitivity

SIN_EPS = 1e-5

# Stream ids used when deriving per-(component, epoch, batch) generators.
STREAM_IDS = {
    "conv1": 1,
    "conv2": 2,
    "dpagg": 3,
    "dpagg_fake": 4,
    "latent": 5,
    "labels": 6,
    "init": 7,
    "batches": 8,
    "generate": 9,
    "eval": 10,
}


class SensitivityMismatchError(ValueError):
    """Noise was calibrated for a different aggregate shape."""


def stream(seed: int, component: str, epoch: int = 0, batch: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for one (component, epoch, batch) triple.

    Streams are derived by feeding ``[seed, component_id, epoch, batch]`` to
    numpy's SeedSequence, so no two triples share state and nothing depends on
    the order in which streams are requested.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, STREAM_IDS[component], epoch, batch]))
    )


@dataclass(frozen=True)
class ClipSpec:
    threshold: float

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"clip threshold must be > 0, got {self.threshold}")


@dataclass
class NoiseSpec:
    """Gaussian noise with std ``sigma * sensitivity`` drawn from ``rng``.

    ``tag`` names the privatized component the noise belongs to; ``releases``
    counts the noisy outputs produced so far.
    """

    sigma: float
    sensitivity: float
    rng: np.random.Generator
    tag: str = ""
    releases: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be > 0, got {self.sensitivity}")
        if self.sigma > 0 and math.isinf(self.sensitivity):
            raise ValueError("noise with unbounded sensitivity (clipping disabled) needs sigma = 0")

    def draw(self, shape) -> np.ndarray:
        self.releases += 1
        if self.sigma == 0:
            return np.zeros(shape)
        return self.rng.standard_normal(shape) * (self.sigma * self.sensitivity)


def sin_normalize(t: np.ndarray, eps: float = SIN_EPS) -> np.ndarray:
    """Standardize every (sample, map) of a (n, m, H, W) tensor, no affine part."""
    mu = t.mean(axis=(2, 3), keepdims=True)
    var = t.var(axis=(2, 3), keepdims=True)
    return (t - mu) / np.sqrt(var + eps)


def sin_backward(t: np.ndarray, dy: np.ndarray, eps: float = SIN_EPS) -> np.ndarray:
    """Gradient of :func:`sin_normalize` w.r.t. its input."""
    hw = t.shape[2] * t.shape[3]
    mu = t.mean(axis=(2, 3), keepdims=True)
    var = t.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t - mu) * inv
    dmean = dy.mean(axis=(2, 3), keepdims=True)
    dproj = (dy * xhat).sum(axis=(2, 3), keepdims=True) / hw
    return inv * (dy - dmean - xhat * dproj)


def aggregate(t: np.ndarray) -> np.ndarray:
    """Concatenate each sample's maps and sum over the batch."""
    if t.shape[0] == 0:
        raise ValueError("cannot aggregate an empty batch")
    return t.reshape(t.shape[0], -1).sum(axis=0)


def dp_aggregate(t: np.ndarray, noise: NoiseSpec) -> np.ndarray:
    """:func:`aggregate` plus N(0, (sigma * sqrt(m) * p)^2) per coordinate."""
    _, m, h, w = t.shape
    if h != w:
        raise SensitivityMismatchError(f"aggregation needs square maps, got {h}x{w}")
    expected = agg_sensitivity(m, h)
    if not math.isclose(noise.sensitivity, expected, rel_tol=1e-12):
        raise SensitivityMismatchError(
            f"noise sensitivity {noise.sensitivity} != sqrt(m)*p = {expected} "
            f"for m={m}, p={h}"
        )
    v = aggregate(t)
    return v + noise.draw(v.shape)


def clip_gradient(v: np.ndarray, spec: ClipSpec) -> np.ndarray:
    """Scale ``v`` by ``min(1, u / ||v||)``."""
    norm = np.linalg.norm(v)
    if norm <= spec.threshold:
        return v.copy()
    return v * (spec.threshold / norm)


def clip_rows(g: np.ndarray, threshold: float) -> np.ndarray:
    """Row-wise :func:`clip_gradient` on a (n, d) matrix."""
    if math.isinf(threshold):
        return g.copy()
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    scale = np.minimum(1.0, threshold / np.maximum(norms, 1e-300))
    return g * scale


def top_k_compress(v: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the ceil(keep_fraction * len) largest-magnitude entries.

    Ties are resolved in favour of the lower index.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    v = np.asarray(v)
    k = math.ceil(keep_fraction * v.size)
    if k >= v.size:
        return v.copy()
    order = np.argsort(-np.abs(v), kind="stable")
    out = np.zeros_like(v)
    keep = order[:k]
    out[keep] = v[keep]
    return out


def top_k_rows(g: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Row-wise :func:`top_k_compress` on a (n, d) matrix."""
    if not 0 < keep_fraction <= 1:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    n, d = g.shape
    k = math.ceil(keep_fraction * d)
    if k >= d:
        return g.copy()
    order = np.argsort(-np.abs(g), axis=1, kind="stable")
    rows = np.arange(n)[:, None]
    out = np.zeros_like(g)
    out[rows, order[:, :k]] = g[rows, order[:, :k]]
    return out


def noisy_clipped_mean(
    per_sample_grads: np.ndarray,
    clip: float,
    noise: NoiseSpec | None,
    keep_fraction: float = 1.0,
    denominator: int | None = None,
) -> np.ndarray:
    """``(sum(clip(topk(g_i))) + z) / B`` with ``z ~ N(0, (sigma * u)^2 I)``.

    Rows are reduced in ascending index order. ``noise.sensitivity`` must be
    the clipping threshold; pass ``None`` for a noiseless (non-private) mean.
    """
    g = np.asarray(per_sample_grads, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 1:
        raise ValueError("per-sample gradients must be a non-empty (B, d) matrix")
    b = denominator or g.shape[0]
    if keep_fraction < 1:
        g = top_k_rows(g, keep_fraction)
    g = clip_rows(g, clip)
    total = np.add.reduce(g, axis=0)
    if noise is not None:
        if noise.sensitivity != clip:
            raise SensitivityMismatchError(
                f"noise sensitivity {noise.sensitivity} != clipping threshold {clip}"
            )
        total = total + noise.draw(total.shape)
    return total / b


def dpsgd_step(
    per_sample_grads,
    spec: ClipSpec,
    sigma: float,
    batch_size: int,
    lr: float,
    w: np.ndarray,
    rng: np.random.Generator | None,
    keep_fraction: float = 1.0,
) -> np.ndarray:
    """One DPSGD update; returns new parameters, ``w`` untouched.

    ``w - lr * ((1/B) * sum(clip(g_i)) + (sigma * u / B) * xi)``. Top-k
    compression (``keep_fraction < 1``) is applied per sample before clipping.
    """
    g = np.asarray(per_sample_grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape[0] != batch_size or batch_size < 1:
        raise ValueError(f"expected {batch_size} per-sample gradients, got {g.shape[0]}")
    if g.shape[1] != w.size:
        raise ValueError(f"gradient dim {g.shape[1]} != parameter dim {w.size}")
    noise = None
    if sigma > 0:
        if math.isinf(spec.threshold):
            raise ValueError("noise requires a finite clipping threshold")
        noise = NoiseSpec(sigma, spec.threshold, rng)
    step = noisy_clipped_mean(g, spec.threshold, noise, keep_fraction, batch_size)
    return w - lr * step.reshape(w.shape)
