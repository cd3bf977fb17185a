"""Area-averaging image resampler.

Each output pixel is the exact average of the source interval it covers
(anti-aliased box filter), which is well defined for downscaling and
upscaling alike. Extent rule for halving matches the feature-map chain:
ceil(size/2), so iteratively halved images stay aligned with rolled-out
feature maps at every level.
"""

from functools import lru_cache

import numpy as np


@lru_cache(maxsize=256)
def _axis_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic interval-overlap matrix."""
    w = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for o in range(n_out):
        lo = o * scale
        hi = (o + 1) * scale
        i0 = int(np.floor(lo))
        i1 = min(int(np.ceil(hi)), n_in)
        for i in range(i0, i1):
            w[o, i] = min(hi, i + 1) - max(lo, i)
        w[o] /= w[o].sum()
    return w.astype(np.float32)


def resize_area(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """img (C,H,W) float -> (C,out_h,out_w), exact box-filter average."""
    c, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    wh = _axis_weights(h, out_h)
    ww = _axis_weights(w, out_w)
    tmp = np.einsum("oh,chw->cow", wh, img.astype(np.float32, copy=False))
    return np.einsum("pw,cow->cop", ww, tmp)


def half_extent(size: int) -> int:
    """Extent of a factor-1/2 downsample; matches stride-2 pad-1 conv arithmetic."""
    return (size + 1) // 2


def downsample_half(img: np.ndarray) -> np.ndarray:
    _, h, w = img.shape
    return resize_area(img, half_extent(h), half_extent(w))


def resize_factor(img: np.ndarray, factor: float) -> np.ndarray:
    _, h, w = img.shape
    return resize_area(img, max(1, int(round(h * factor))), max(1, int(round(w * factor))))
