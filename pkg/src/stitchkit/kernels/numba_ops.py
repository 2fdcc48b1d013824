"""Numba-jitted versions of the hot kernels.

Same contracts as numpy_ops. Compiled lazily per dtype; first call pays the
JIT cost. No fastmath so results stay reproducible run to run.
"""

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _conv2d_forward(x, w, b, out):
    n, ci, h, wd = x.shape
    co = w.shape[0]
    k = w.shape[2]
    p = k // 2
    for im in prange(n):
        for oc in range(co):
            for oy in range(h):
                for ox in range(wd):
                    acc = b[oc]
                    for ic in range(ci):
                        for ky in range(k):
                            iy = oy + ky - p
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(k):
                                ix = ox + kx - p
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[im, ic, iy, ix] * w[oc, ic, ky, kx]
                    out[im, oc, oy, ox] = acc


def conv2d_forward(x, w, b):
    out = np.empty((x.shape[0], w.shape[0], x.shape[2], x.shape[3]), dtype=x.dtype)
    _conv2d_forward(x, w, b, out)
    return out


@njit(parallel=True, cache=True)
def _conv2d_backward_input(gy, w, gx):
    n, co, h, wd = gy.shape
    ci = w.shape[1]
    k = w.shape[2]
    p = k // 2
    for im in prange(n):
        for ic in range(ci):
            for iy in range(h):
                for ix in range(wd):
                    acc = w[0, 0, 0, 0] * 0
                    for oc in range(co):
                        for ky in range(k):
                            oy = iy - ky + p
                            if oy < 0 or oy >= h:
                                continue
                            for kx in range(k):
                                ox = ix - kx + p
                                if ox < 0 or ox >= wd:
                                    continue
                                acc += gy[im, oc, oy, ox] * w[oc, ic, ky, kx]
                    gx[im, ic, iy, ix] = acc


def conv2d_backward_input(gy, w):
    gx = np.zeros((gy.shape[0], w.shape[1], gy.shape[2], gy.shape[3]), dtype=gy.dtype)
    _conv2d_backward_input(gy, w, gx)
    return gx


@njit(parallel=True, cache=True)
def _conv2d_backward_weight(x, gy, gw):
    n, ci, h, wd = x.shape
    co = gy.shape[1]
    k = gw.shape[2]
    p = k // 2
    for oc in prange(co):
        for ic in range(ci):
            for ky in range(k):
                for kx in range(k):
                    acc = x[0, 0, 0, 0] * 0
                    for im in range(n):
                        for oy in range(h):
                            iy = oy + ky - p
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wd):
                                ix = ox + kx - p
                                if ix < 0 or ix >= wd:
                                    continue
                                acc += x[im, ic, iy, ix] * gy[im, oc, oy, ox]
                    gw[oc, ic, ky, kx] = acc


def conv2d_backward_weight(x, gy, k):
    gw = np.zeros((gy.shape[1], x.shape[1], k, k), dtype=x.dtype)
    _conv2d_backward_weight(x, gy, gw)
    return gw


@njit(parallel=True, cache=True)
def _maxpool2x2_forward(x, out, idx):
    n, c, ho, wo = out.shape
    for im in prange(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = x[im, ch, 2 * oy, 2 * ox]
                    bi = 0
                    j = 0
                    for dy in range(2):
                        for dx in range(2):
                            v = x[im, ch, 2 * oy + dy, 2 * ox + dx]
                            if v > best:
                                best = v
                                bi = j
                            j += 1
                    out[im, ch, oy, ox] = best
                    idx[im, ch, oy, ox] = bi


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int64)
    _maxpool2x2_forward(x, out, idx)
    return out, idx


@njit(parallel=True, cache=True)
def _maxpool2x2_backward(gy, idx, gx):
    n, c, ho, wo = gy.shape
    for im in prange(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    j = idx[im, ch, oy, ox]
                    gx[im, ch, 2 * oy + j // 2, 2 * ox + j % 2] += gy[im, ch, oy, ox]


def maxpool2x2_backward(gy, idx, h, w):
    gx = np.zeros((gy.shape[0], gy.shape[1], h, w), dtype=gy.dtype)
    _maxpool2x2_backward(gy, idx, gx)
    return gx


@njit(parallel=True, cache=True)
def _upsample2x_forward(x, out):
    n, c, h, w = x.shape
    for im in prange(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    v = x[im, ch, y, xx]
                    out[im, ch, 2 * y, 2 * xx] = v
                    out[im, ch, 2 * y, 2 * xx + 1] = v
                    out[im, ch, 2 * y + 1, 2 * xx] = v
                    out[im, ch, 2 * y + 1, 2 * xx + 1] = v


def upsample2x_forward(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    _upsample2x_forward(x, out)
    return out


@njit(parallel=True, cache=True)
def _upsample2x_backward(gy, gx):
    n, c, h, w = gx.shape
    for im in prange(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    gx[im, ch, y, xx] = (
                        gy[im, ch, 2 * y, 2 * xx]
                        + gy[im, ch, 2 * y, 2 * xx + 1]
                        + gy[im, ch, 2 * y + 1, 2 * xx]
                        + gy[im, ch, 2 * y + 1, 2 * xx + 1]
                    )


def upsample2x_backward(gy):
    n, c, h, w = gy.shape
    gx = np.empty((n, c, h // 2, w // 2), dtype=gy.dtype)
    _upsample2x_backward(gy, gx)
    return gx
