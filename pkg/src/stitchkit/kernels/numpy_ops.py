"""Pure-numpy implementations of the hot array kernels.

All convolutions are stride-1 with symmetric zero padding of k//2, so the
spatial shape is preserved. Layout is (batch, channel, height, width)
throughout.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, w, b):
    """Correlate x (N,Ci,H,W) with w (Co,Ci,k,k) and add bias b (Co,)."""
    k = w.shape[2]
    p = k // 2
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x
    # (N, Ci, H, W, k, k)
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    out += b[None, :, None, None]
    return out.astype(x.dtype, copy=False)


def conv2d_backward_input(gy, w):
    """Gradient wrt the input: full correlation of gy with the flipped kernel."""
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    zero_b = np.zeros(wt.shape[0], dtype=gy.dtype)
    return conv2d_forward(gy, wt, zero_b)


def conv2d_backward_weight(x, gy, k):
    """Gradient wrt the kernel for a same-padded stride-1 correlation."""
    p = k // 2
    if p:
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = x
    patches = sliding_window_view(xp, (k, k), axis=(2, 3))
    # sum over batch and spatial positions
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 2, 3]))
    return np.ascontiguousarray(gw).astype(x.dtype, copy=False)


def maxpool2x2_forward(x):
    """2x2 max pooling with stride 2; also returns flat argmax in each window."""
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    xr = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = np.argmax(xr, axis=-1).astype(np.int64)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(gy, idx, h, w):
    n, c, ho, wo = gy.shape
    gxr = np.zeros((n, c, ho, wo, 4), dtype=gy.dtype)
    np.put_along_axis(gxr, idx[..., None], gy[..., None], axis=-1)
    gx = gxr.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return np.ascontiguousarray(gx)


def upsample2x_forward(x):
    return np.ascontiguousarray(x.repeat(2, axis=2).repeat(2, axis=3))


def upsample2x_backward(gy):
    n, c, h, w = gy.shape
    return np.ascontiguousarray(
        gy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))
    )
