"""Pure-numpy convolution/pooling kernels.

Fallback backend with the exact same semantics as the compiled extension:
correlation (no kernel flip), zero padding, floor output extents. Column
matrices are built with strided slice copies so both backends produce
bit-identical results (the multiply-accumulate happens in the same BLAS
call either way).
"""

import numpy as np

NAME = "numpy"

# Cap on the scratch column matrix, in elements. Large inputs are processed
# in output-row chunks so memory stays bounded.
_COL_BUDGET = 16 * 1024 * 1024


def conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(xp, kh, kw, stride, ho, wo, out=None):
    """(N,C,Hp,Wp) padded input -> (N, C*kh*kw, ho*wo) column matrix."""
    n, c, _, _ = xp.shape
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype) if out is None else out
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols, n, c, kh, kw, stride, hp, wp, ho, wo, dtype):
    gxp = np.zeros((n, c, hp, wp), dtype=dtype)
    g6 = gcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[:, :, i, j]
    return gxp


def _row_chunk(c, kh, kw, wo):
    per_row = c * kh * kw * wo
    return max(1, _COL_BUDGET // max(per_row, 1))


def conv2d_forward(x, w, stride, pad):
    """x (N,C,H,W), w (Co,C,Kh,Kw) -> y (N,Co,Ho,Wo)."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    wm = w.reshape(co, ci * kh * kw)
    y = np.empty((n, co, ho, wo), dtype=x.dtype)
    chunk = _row_chunk(c, kh, kw, wo)
    for r0 in range(0, ho, chunk):
        r1 = min(r0 + chunk, ho)
        cols = _im2col(xp[:, :, r0 * stride :, :], kh, kw, stride, r1 - r0, wo)
        y[:, :, r0:r1, :] = np.matmul(wm, cols).reshape(n, co, r1 - r0, wo)
    return y


def conv2d_backward(x, w, gy, stride, pad):
    """Gradients of the correlation: returns (gx, gw)."""
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    wm = w.reshape(co, ci * kh * kw)
    gw = np.zeros((co, ci * kh * kw), dtype=x.dtype)
    gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    chunk = _row_chunk(c, kh, kw, wo)
    for r0 in range(0, ho, chunk):
        r1 = min(r0 + chunk, ho)
        rows = r1 - r0
        cols = _im2col(xp[:, :, r0 * stride :, :], kh, kw, stride, rows, wo)
        gym = gy[:, :, r0:r1, :].reshape(n, co, rows * wo)
        gw += np.matmul(gym, cols.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.matmul(wm.T, gym)
        g6 = gcols.reshape(n, c, kh, kw, rows, wo)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, r0 * stride + i : r0 * stride + i + stride * rows : stride,
                    j : j + stride * wo : stride] += g6[:, :, i, j]
    gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return gx, gw.reshape(co, ci, kh, kw)


def maxpool_forward(x, window, stride, pad):
    """Max pooling; padding cells count as -inf. Returns (y, flat argmax).

    Argmax indices are flat offsets into the unpadded H*W plane; ties go to
    the first window cell in row-major scan order (both backends agree).
    """
    n, c, h, w = x.shape
    ho = conv_out_extent(h, window, stride, pad)
    wo = conv_out_extent(w, window, stride, pad)
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf, dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
    bidx = np.zeros((n, c, ho, wo), dtype=np.int64)
    rows = (np.arange(ho) * stride)[:, None]
    colns = (np.arange(wo) * stride)[None, :]
    for i in range(window):
        for j in range(window):
            v = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            # source position in the unpadded plane (may be out of range on pad cells,
            # but those are -inf and never win)
            src = (rows + i - pad) * w + (colns + j - pad)
            take = v > best
            best = np.where(take, v, best)
            bidx = np.where(take, src, bidx)
    return best, bidx


def maxpool_backward(x_shape, argmax, gy):
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    flat_g = gy.reshape(n, c, -1)
    flat_i = argmax.reshape(n, c, -1)
    for ni in range(n):
        for ci in range(c):
            np.add.at(gx[ni, ci], flat_i[ni, ci], flat_g[ni, ci])
    return gx.reshape(n, c, h, w)
