"""Recurrent scale approximation: predict the feature map of a half-size
input directly from the current feature map.

One step is four convolutions with kernel sizes (1,3,3,1), strides
(1,2,1,1) and pads (0,1,1,0) — composite stride 2, channel count preserved
so the unit can be iterated. Rectifiers follow the first three convs; the
last is linear so negative target activations stay reachable. Rolling the
unit out m times from a level-0 map approximates the trunk output of the
1/2^m-downsampled image.

Supervision is the squared L2 gap to the real trunk maps, summed over
levels 1..M and scaled by 1/(2M). Approximation quality is tracked with a
squared element-wise relative error averaged per map and per sample; its
accumulation over successive rollouts is the expected failure mode, so this
module also hosts the per-level error report used by the ablation command.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeaturePyramid
from .errors import ShapeError
from .modules import Conv, Module
from .tensor import Tensor

MIN_STEP_EXTENT = 4


class RsaUnit(Module):
    """The iterable halving unit; channels in == channels out."""

    def __init__(self, rng: np.random.Generator, channels: int):
        super().__init__()
        self.channels = channels
        self.c1 = Conv(rng, channels, channels, 1, stride=1, pad=0)
        self.c2 = Conv(rng, channels, channels, 3, stride=2, pad=1)
        self.c3 = Conv(rng, channels, channels, 3, stride=1, pad=1)
        self.c4 = Conv(rng, channels, channels, 1, stride=1, pad=0)

    def step(self, h: Tensor) -> Tensor:
        """One rollout: (C,H,W) -> (C,ceil(H/2),ceil(W/2))."""
        hh, ww = h.shape[-2:]
        if hh < MIN_STEP_EXTENT or ww < MIN_STEP_EXTENT:
            raise ShapeError(f"map {hh}x{ww} too small to halve (minimum {MIN_STEP_EXTENT})")
        if h.shape[-3] != self.channels:
            raise ShapeError(f"unit is {self.channels}-channel, got map with {h.shape[-3]}")
        x = T.relu(self.c1(h))
        x = T.relu(self.c2(x))
        x = T.relu(self.c3(x))
        return self.c4(x)

    def max_rollouts(self, g0: Tensor) -> int:
        m = 0
        e = min(g0.shape[-2:])
        while e >= MIN_STEP_EXTENT:
            m += 1
            e = (e + 1) // 2
        return m

    def rollout(self, g0: Tensor, M: int) -> FeaturePyramid:
        """Level 0 is g0 itself; level m applies the unit m times."""
        feasible = self.max_rollouts(g0)
        if M > feasible:
            raise ShapeError(f"cannot roll out {M} times from {tuple(g0.shape[-2:])}; max feasible M={feasible}")
        levels = [g0]
        h = g0
        for _ in range(M):
            h = self.step(h)
            levels.append(h)
        return FeaturePyramid(levels, origin="approximated")


def rsa_loss(approx: FeaturePyramid, gt: FeaturePyramid) -> Tensor:
    """(1/2M) * sum_{m=1..M} ||F^m - G^m||^2. Level 0 is the shared input."""
    if len(approx) != len(gt):
        raise ShapeError(f"pyramids have {len(approx)} vs {len(gt)} levels")
    M = len(approx) - 1
    if M < 1:
        raise ShapeError("need at least one rolled-out level to supervise")
    terms = []
    for m in range(1, M + 1):
        f, g = approx.level(m), gt.level(m)
        if f.shape != g.shape:
            raise ShapeError(f"level {m}: approximated {f.shape} vs ground-truth {g.shape}")
        d = f - (g if isinstance(g, Tensor) else Tensor(g))
        terms.append(T.tsum(T.square(d)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / (2.0 * M))


def error_rate(approx: np.ndarray, gt: np.ndarray, epsilon: float = 1e-3) -> float:
    """Mean squared element-wise relative error of one map pair.

    The divisor is sign(G)*max(|G|, epsilon) so near-zero ground-truth cells
    cannot blow the ratio up.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    approx = np.asarray(approx, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if approx.shape != gt.shape:
        raise ShapeError(f"shape mismatch {approx.shape} vs {gt.shape}")
    stab = np.where(gt >= 0, np.maximum(gt, epsilon), np.minimum(gt, -epsilon))
    return float(np.mean(((approx - gt) / stab) ** 2))


@dataclass
class ErrorReport:
    """Per-level error-rate statistics for one branch point."""

    branch_point: str
    levels: list[int]
    er_mean: list[float]
    er_std: list[float]
    n_samples: int

    def rows(self):
        for m, mu, sd in zip(self.levels, self.er_mean, self.er_std):
            yield {
                "branch_point": self.branch_point,
                "level_m": m,
                "er_mean": mu,
                "er_std": sd,
                "n_samples": self.n_samples,
            }


def collect_error_report(branch_point: str, per_sample_ers: list[list[float]]) -> ErrorReport:
    """per_sample_ers[i][m-1] is ER at level m for sample i."""
    arr = np.asarray(per_sample_ers, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need a non-empty (samples x levels) error table")
    return ErrorReport(
        branch_point=branch_point,
        levels=list(range(1, arr.shape[1] + 1)),
        er_mean=[float(v) for v in arr.mean(axis=0)],
        er_std=[float(v) for v in arr.std(axis=0)],
        n_samples=arr.shape[0],
    )
