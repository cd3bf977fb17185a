# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot loops: column gather/scatter for convolution and max pooling.

The multiply-accumulate itself stays in BLAS (numpy matmul); these routines
remove the Python/strided-copy overhead around it and the slow scatter-add
on the backward path.
"""

import numpy as np

cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] xp, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t row0, Py_ssize_t rows, Py_ssize_t wo, real[:, :, ::1] cols):
    """Fill cols (N, C*kh*kw, rows*wo) from padded input xp for output rows [row0, row0+rows)."""
    cdef Py_ssize_t n = xp.shape[0], c = xp.shape[1]
    cdef Py_ssize_t ni, ci, i, j, r, q, base, hoff
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        base = (ci * kh + i) * kw + j
                        for r in range(rows):
                            hoff = (row0 + r) * stride + i
                            for q in range(wo):
                                cols[ni, base, r * wo + q] = xp[ni, ci, hoff, q * stride + j]


def col2im_add(real[:, :, ::1] gcols, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
               Py_ssize_t row0, Py_ssize_t rows, Py_ssize_t wo, real[:, :, :, ::1] gxp):
    """Scatter-add cols (N, C*kh*kw, rows*wo) back into padded gradient gxp."""
    cdef Py_ssize_t n = gxp.shape[0], c = gxp.shape[1]
    cdef Py_ssize_t ni, ci, i, j, r, q, base, hoff
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for i in range(kh):
                    for j in range(kw):
                        base = (ci * kh + i) * kw + j
                        for r in range(rows):
                            hoff = (row0 + r) * stride + i
                            for q in range(wo):
                                gxp[ni, ci, hoff, q * stride + j] += gcols[ni, base, r * wo + q]


def maxpool_fwd(real[:, :, :, ::1] x, Py_ssize_t window, Py_ssize_t stride, Py_ssize_t pad,
                real[:, :, :, ::1] y, cnp.int64_t[:, :, :, ::1] idx):
    """Windowed max with -inf padding semantics; ties resolved to the first
    window cell in row-major order (matches the numpy backend exactly)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = y.shape[2], wo = y.shape[3]
    cdef Py_ssize_t ni, ci, r, q, i, j, hh, ww
    cdef real best, v
    cdef cnp.int64_t bi
    cdef bint found
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for r in range(ho):
                    for q in range(wo):
                        best = 0
                        bi = 0
                        found = False
                        for i in range(window):
                            hh = r * stride + i - pad
                            if hh < 0 or hh >= h:
                                continue
                            for j in range(window):
                                ww = q * stride + j - pad
                                if ww < 0 or ww >= w:
                                    continue
                                v = x[ni, ci, hh, ww]
                                if (not found) or v > best:
                                    best = v
                                    bi = hh * w + ww
                                    found = True
                        y[ni, ci, r, q] = best
                        idx[ni, ci, r, q] = bi


def maxpool_bwd(cnp.int64_t[:, :, ::1] idx, real[:, :, ::1] gy, real[:, :, ::1] gx):
    """Scatter gy (N,C,Ho*Wo) into gx (N,C,H*W) at the recorded argmax cells."""
    cdef Py_ssize_t n = gy.shape[0], c = gy.shape[1], m = gy.shape[2]
    cdef Py_ssize_t ni, ci, k
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for k in range(m):
                    gx[ni, ci, idx[ni, ci, k]] += gy[ni, ci, k]
