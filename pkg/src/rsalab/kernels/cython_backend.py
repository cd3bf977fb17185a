"""Compiled-extension backend: Cython gather/scatter around BLAS matmul."""

import numpy as np

from . import _convkern
from .numpy_backend import _row_chunk, conv_out_extent

NAME = "cython"


def conv2d_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ho = conv_out_extent(h, kh, stride, pad)
    wo = conv_out_extent(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    wm = w.reshape(co, ci * kh * kw)
    y = np.empty((n, co, ho, wo), dtype=x.dtype)
    chunk = _row_chunk(c, kh, kw, wo)
    cols = np.empty((n, c * kh * kw, min(chunk, ho) * wo), dtype=x.dtype)
    for r0 in range(0, ho, chunk):
        rows = min(chunk, ho - r0)
        cbuf = cols if rows * wo == cols.shape[2] else cols[:, :, : rows * wo]
        _convkern.im2col(xp, kh, kw, stride, r0, rows, wo, cbuf)
        y[:, :, r0 : r0 + rows, :] = np.matmul(wm, cbuf).reshape(n, co, rows, wo)
    return y


def conv2d_backward(x, w, gy, stride, pad):
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)
    wm = w.reshape(co, ci * kh * kw)
    gw = np.zeros((co, ci * kh * kw), dtype=x.dtype)
    gxp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    chunk = _row_chunk(c, kh, kw, wo)
    cols = np.empty((n, c * kh * kw, min(chunk, ho) * wo), dtype=x.dtype)
    for r0 in range(0, ho, chunk):
        rows = min(chunk, ho - r0)
        cbuf = cols if rows * wo == cols.shape[2] else cols[:, :, : rows * wo]
        _convkern.im2col(xp, kh, kw, stride, r0, rows, wo, cbuf)
        gym = np.ascontiguousarray(gy[:, :, r0 : r0 + rows, :].reshape(n, co, rows * wo))
        gw += np.matmul(gym, cbuf.transpose(0, 2, 1)).sum(axis=0)
        gcols = np.ascontiguousarray(np.matmul(wm.T, gym))
        _convkern.col2im_add(gcols, kh, kw, stride, r0, rows, wo, gxp)
    gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
    return gx, gw.reshape(co, ci, kh, kw)


def maxpool_forward(x, window, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_extent(h, window, stride, pad)
    wo = conv_out_extent(w, window, stride, pad)
    x = np.ascontiguousarray(x)
    y = np.empty((n, c, ho, wo), dtype=x.dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    _convkern.maxpool_fwd(x, window, stride, pad, y, idx)
    return y, idx


def maxpool_backward(x_shape, argmax, gy):
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h * w), dtype=gy.dtype)
    _convkern.maxpool_bwd(
        np.ascontiguousarray(argmax.reshape(n, c, -1)),
        np.ascontiguousarray(gy.reshape(n, c, -1)),
        gx,
    )
    return gx.reshape(n, c, h, w)
