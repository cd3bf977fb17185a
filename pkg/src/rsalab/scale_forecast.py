"""Scale forecasting: which face-size octaves occur in an image.

Face sizes live on a 61-point log grid: bin b = 10*(log2 x - 5) for a size
x measured in a frame whose longer image side is 2048, so x=32 -> bin 0 and
x=2048 -> bin 60, ten bins per octave across the six octaves 2^5..2^11.

Training targets are Gaussian soft labels (sigma = 1/sqrt(2*pi), so the
peak is exactly 1 and direct neighbors get exp(-pi) ~= 0.0432) under a
per-bin binary cross entropy. Inference decomposes the predicted 61-bin
curve into a small Gaussian mixture by weighted EM with BIC model selection
and keeps components whose weight clears a threshold; component means map
to octaves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, TrunkConfig
from .errors import ShapeError
from .modules import Linear, Module
from .tensor import Tensor

NUM_BINS = 61  # indices 0..60
BIN_NORM = 60.0  # the B in the 1/B loss average
CONTEXT_DIM = 2048  # longer-side frame in which face sizes are measured
NEIGHBOR_RADIUS = 2
SOFT_SIGMA = 1.0 / math.sqrt(2.0 * math.pi)
SF_INPUT_DIM = 224
MAX_OCTAVE = 5


def scale_to_bin(x: float) -> int:
    """Face size (pixels, 2048-frame longer side) -> bin index, clamped to [0,60].

    Fractional positions round half-up to the nearest integer bin.
    """
    if x <= 0:
        raise ValueError(f"face size must be positive, got {x}")
    b = 10.0 * (math.log2(x) - 5.0)
    return int(min(60, max(0, math.floor(b + 0.5))))


def bin_to_scale(b: float) -> float:
    return 2.0 ** (b / 10.0 + 5.0)


def soft_labels(occurring_bins) -> np.ndarray:
    """Gaussian soft labels on b*±2 per occurring bin; overlaps take the max."""
    labels = np.zeros(NUM_BINS, dtype=np.float32)
    for b in occurring_bins:
        if not 0 <= b <= 60:
            raise ValueError(f"bin index {b} outside [0, 60]")
        for d in range(-NEIGHBOR_RADIUS, NEIGHBOR_RADIUS + 1):
            i = b + d
            if 0 <= i <= 60:
                val = math.exp(-(d * d) / (2.0 * SOFT_SIGMA**2))
                labels[i] = max(labels[i], val)
    return labels


def sf_loss(pred: Tensor, labels: np.ndarray) -> Tensor:
    """Per-bin binary cross entropy, averaged by 1/60.

    Predictions are clamped to [1e-7, 1-1e-7] before the logs.
    """
    if pred.data.shape[-1] != NUM_BINS or labels.shape[-1] != NUM_BINS:
        raise ShapeError(f"expected {NUM_BINS}-bin vectors, got {pred.shape} and {labels.shape}")
    p = T.clamp(pred, 1e-7, 1.0 - 1e-7)
    lab = labels.astype(pred.data.dtype)
    ll = Tensor(lab) * T.tlog(p) + Tensor(1.0 - lab) * T.tlog(1.0 - p)
    return T.tsum(ll) * (-1.0 / (BIN_NORM * max(1, pred.data.size // NUM_BINS)))


class ScaleForecastNet(Module):
    """Tiny residual net with global pooling and a 61-way sigmoid output.

    Carries its own backbone instance; weights are trained in stage 1 and
    stay frozen during end-to-end detection training.
    """

    def __init__(self, rng: np.random.Generator, cfg: TrunkConfig | None = None):
        super().__init__()
        self.net = Backbone(rng, cfg)
        self.fc = Linear(rng, self.net.cfg.head_channels, NUM_BINS)

    def __call__(self, image: Tensor) -> Tensor:
        """Image with max(H,W) == 224 -> 61 per-bin probabilities."""
        h, w = image.shape[-2:]
        if max(h, w) != SF_INPUT_DIM:
            raise ShapeError(f"scale-forecast input must have max(H,W)={SF_INPUT_DIM}, got {h}x{w}")
        fmap = self.net.trunk_forward(image)
        _, feats = self.net.head_features(fmap)
        pooled = T.global_avg_pool(feats)
        n = pooled.data.shape[0] if pooled.data.ndim == 4 else 1
        flat = T.reshape(pooled, (n, self.net.cfg.head_channels))
        out = T.sigmoid(self.fc(flat))
        return out if pooled.data.ndim == 4 else T.reshape(out, (NUM_BINS,))


# -- mixture decomposition of the bin curve ---------------------------------


@dataclass(frozen=True)
class MixtureComponent:
    weight: float
    mean: float
    var: float


_VAR_FLOOR = 1e-2


def _weighted_em(xs, ws, k, iters):
    """1-D weighted EM. Means seed on the k strongest local maxima of the
    weight curve (quantile fallback), k-means++-spirit: spread and data-led."""
    total = ws.sum()
    peaks = [i for i in range(len(ws)) if ws[i] > 0 and (i == 0 or ws[i] >= ws[i - 1]) and (i == len(ws) - 1 or ws[i] > ws[i + 1])]
    peaks.sort(key=lambda i: -ws[i])
    means = [float(xs[i]) for i in peaks[:k]]
    if len(means) < k:
        cdf = np.cumsum(ws) / total
        for q in np.linspace(0.1, 0.9, k - len(means)):
            means.append(float(xs[np.searchsorted(cdf, q)]))
    mu = np.array(sorted(means), dtype=np.float64)
    var = np.full(k, 1.0)
    phi = np.full(k, 1.0 / k)
    for _ in range(iters):
        # E step: responsibilities of each component for each bin
        d2 = (xs[None, :] - mu[:, None]) ** 2
        logp = -0.5 * d2 / var[:, None] - 0.5 * np.log(2 * np.pi * var[:, None]) + np.log(phi[:, None] + 1e-300)
        logp -= logp.max(axis=0, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=0, keepdims=True) + 1e-300
        rw = r * ws[None, :]
        mass = rw.sum(axis=1)
        dead = mass < 1e-12
        phi = mass / total
        mu = np.where(dead, mu, rw @ xs / np.maximum(mass, 1e-300))
        var = np.where(dead, var, (rw * (xs[None, :] - mu[:, None]) ** 2).sum(axis=1) / np.maximum(mass, 1e-300))
        var = np.maximum(var, _VAR_FLOOR)
    # weighted log-likelihood for BIC
    d2 = (xs[None, :] - mu[:, None]) ** 2
    comp = phi[:, None] * np.exp(-0.5 * d2 / var[:, None]) / np.sqrt(2 * np.pi * var[:, None])
    ll = float((ws * np.log(comp.sum(axis=0) + 1e-300)).sum())
    return [MixtureComponent(float(p), float(m), float(v)) for p, m, v in zip(phi, mu, var)], ll


def fit_scale_mixture(probs: np.ndarray, max_components: int = 6, iters: int = 50):
    """Fit mixtures with K=1..max_components to the bin curve, pick by BIC."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (NUM_BINS,):
        raise ShapeError(f"expected a {NUM_BINS}-bin probability vector, got shape {probs.shape}")
    ws = np.clip(probs, 0.0, None)
    total = ws.sum()
    if total <= 0:
        return []
    xs = np.arange(NUM_BINS, dtype=np.float64)
    n_eff = max(total, 1.0 + 1e-9)
    best, best_bic = [], np.inf
    support = int((ws > 1e-6).sum())
    for k in range(1, max_components + 1):
        if k > max(1, support):
            break
        comps, ll = _weighted_em(xs, ws, k, iters)
        bic = -2.0 * ll + (3 * k - 1) * np.log(n_eff)
        if bic < best_bic - 1e-9:
            best, best_bic = comps, bic
    return best


@dataclass
class ScaleDistribution:
    probs: np.ndarray
    components: list

    def octaves(self, accept_threshold: float) -> list[int]:
        kept = [c for c in self.components if c.weight >= accept_threshold]
        octs = sorted({min(MAX_OCTAVE, max(0, int(np.floor(min(60.0, max(0.0, c.mean)) / 10.0)))) for c in kept})
        return octs


def infer_scales(
    probs: np.ndarray,
    accept_threshold: float = 0.1,
    min_mass: float = 0.3,
    max_components: int = 6,
    iters: int = 50,
) -> list[int]:
    """61-bin curve -> sorted occurring octave levels (possibly empty)."""
    if not 0.0 < accept_threshold < 1.0:
        raise ValueError(f"accept threshold must lie in (0,1), got {accept_threshold}")
    probs = np.asarray(probs, dtype=np.float64)
    if float(np.clip(probs, 0, None).sum()) < min_mass:
        return []
    comps = fit_scale_mixture(probs, max_components=max_components, iters=iters)
    return ScaleDistribution(probs, comps).octaves(accept_threshold)


def scales_to_resize_plan(octaves, image_dims) -> tuple[float, int]:
    """Octave set -> (resize factor, rollout count).

    The factor places the smallest predicted octave's faces into [64, 128]
    so the level-0 map covers them; each further octave is one rollout.
    """
    octaves = sorted(set(octaves))
    if not octaves:
        raise ValueError("empty octave list: nothing to detect at any scale")
    factor = 2.0 ** (1 - octaves[0])
    return factor, octaves[-1] - octaves[0]
