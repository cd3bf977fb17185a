"""Residual trunk and detection head.

The trunk is a narrow residual net: conv1 (7x7/2) -> maxpool (3x3/2) ->
res2a (/2, projection) -> res2b, for a total stride of exactly 8 from image
to feature map. The head continues with res3a/res3b/res3c at stride 1 and
ends in three 1x1 output convs: per-landmark score maps (sigmoid), a
two-class anchor score (softmax), and ten landmark offsets (linear).

The cross-scale approximation unit branches off at the res2b output, so the
trunk/head split here is also the branch point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .imageops import downsample_half
from .modules import ChannelNorm, Conv, Module, ResBlock
from .tensor import Tensor

MIN_IMAGE_SIDE = 32
TRUNK_STRIDE = 8
NUM_LANDMARKS = 5


@dataclass(frozen=True)
class TrunkConfig:
    """Channel plan: half the widths of the reference 18-layer residual net
    (64/64/128 -> 32/32/64). res2b output feeds the rollout unit."""

    conv1_width: int = 32
    stage2_width: int = 32
    stage3_width: int = 64

    @property
    def cut_channels(self) -> int:
        return self.stage2_width

    @property
    def head_channels(self) -> int:
        return self.stage3_width


@dataclass
class FeaturePyramid:
    """Stride-8 maps indexed by downsample level m; origin records whether
    levels came from the trunk on resized images (ground-truth) or from
    recurrent rollout (approximated)."""

    levels: list
    origin: str  # "ground-truth" | "approximated"

    def __len__(self):
        return len(self.levels)

    def level(self, m: int) -> Tensor:
        return self.levels[m]

    def extents(self):
        return [tuple(t.shape[-2:]) for t in self.levels]


def feature_extent(size: int) -> int:
    """Image extent -> trunk map extent (three ceil-halvings = stride 8)."""
    e = size
    for _ in range(3):
        e = (e + 1) // 2
    return e


class Backbone(Module):
    def __init__(self, rng: np.random.Generator, cfg: TrunkConfig | None = None):
        super().__init__()
        cfg = cfg or TrunkConfig()
        self.cfg = cfg
        self.conv1 = Conv(rng, 3, cfg.conv1_width, 7, stride=2, pad=3)
        self.n1 = ChannelNorm(cfg.conv1_width)
        self.res2a = ResBlock(rng, cfg.conv1_width, cfg.stage2_width, stride=2)
        self.res2b = ResBlock(rng, cfg.stage2_width, cfg.stage2_width)
        self.res3a = ResBlock(rng, cfg.stage2_width, cfg.stage3_width)
        self.res3b = ResBlock(rng, cfg.stage3_width, cfg.stage3_width)
        self.res3c = ResBlock(rng, cfg.stage3_width, cfg.stage3_width)
        self.p_conv = Conv(rng, cfg.stage3_width, NUM_LANDMARKS, 1, bias=True)
        self.cls_conv = Conv(rng, cfg.stage3_width, 2, 1, bias=True)
        self.reg_conv = Conv(rng, cfg.stage3_width, 10, 1, bias=True)
        self.trunk_calls = 0

    # -- trunk ------------------------------------------------------------

    def trunk_forward(self, image: Tensor) -> Tensor:
        """Image (3,H,W) -> feature map (C, ceil(H/8), ceil(W/8))."""
        h, w = image.shape[-2:]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise ShapeError(f"image {h}x{w} below the {MIN_IMAGE_SIDE}px receptive minimum")
        if image.shape[-3] != 3:
            raise ShapeError(f"expected 3 input channels, got {image.shape}")
        self.trunk_calls += 1
        x = T.relu(self.n1(self.conv1(image)))
        x = T.maxpool2d(x, 3, 2, pad=1)
        x = self.res2a(x)
        return self.res2b(x)

    # -- head -------------------------------------------------------------

    def head_features(self, fmap: Tensor):
        """res3 stage: returns (landmark-branch features, score-branch features)."""
        if fmap.shape[-3] != self.cfg.cut_channels:
            raise ShapeError(
                f"head expects {self.cfg.cut_channels} channels from the trunk, got {fmap.shape}"
            )
        a = self.res3a(fmap)
        return a, self.res3c(self.res3b(a))

    def head_forward(self, fmap: Tensor):
        """Feature map (C,H,W) -> (landmark maps 5xHxW sigmoid,
        class scores 2xHxW softmax, offsets 10xHxW linear)."""
        lm_feat, score_feat = self.head_features(fmap)
        ch_axis = 0 if fmap.data.ndim == 3 else 1
        landmarks = T.sigmoid(self.p_conv(lm_feat))
        cls = T.softmax(self.cls_conv(score_feat), axis=ch_axis)
        reg = self.reg_conv(score_feat)
        return landmarks, cls, reg

    # -- pyramids ----------------------------------------------------------

    def build_gt_pyramid(self, image: Tensor, M: int) -> FeaturePyramid:
        """Trunk maps of the iteratively halved image, levels 0..M."""
        if M > 5:
            raise ShapeError(f"level limit is 5, got M={M}")
        levels = []
        img = image.data
        with T.no_grad():
            for m in range(M + 1):
                if min(img.shape[-2:]) < MIN_IMAGE_SIDE:
                    raise ShapeError(
                        f"level {m} image {img.shape[-2:]} below the receptive minimum; "
                        f"pyramid infeasible at this size"
                    )
                levels.append(self.trunk_forward(Tensor(img)))
                if m < M:
                    img = downsample_half(img)
        return FeaturePyramid(levels, origin="ground-truth")
