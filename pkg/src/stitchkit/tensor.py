"""Minimal deterministic reverse-mode autodiff over numpy arrays.

Tensors wrap float arrays (float32 in normal use; float64 for the
finite-difference replay used by gradient tests). Every op records a
backward closure when any input requires grad; backward() walks the tape
once and then clears it.
"""

import numpy as np

from . import kernels


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def assert_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in {what}")
        return self

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # convenience arithmetic (full set lives in the module functions)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    """Create a tape node; detached when no parent requires grad."""
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = False
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss):
    """Back-propagate from a scalar loss; populates .grad on requires_grad
    tensors reachable from it and clears the tape."""
    if loss.size != 1:
        raise ValueError("backward() requires a scalar loss")
    if loss._backward is None and not loss.requires_grad:
        raise ValueError("loss is detached from the tape")

    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
        if node._backward is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    grads[id(parent)] = pg.astype(parent.dtype, copy=False).copy() \
                        if pg.dtype != parent.dtype else pg.copy()
                else:
                    acc += pg.astype(parent.dtype, copy=False)
    # clear the tape
    for node in topo:
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# elementwise / reduction primitives

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _make(out, (a, b), bwd)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def bwd(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bwd)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _make(out, (a, b), bwd)


def div(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g / bd, a.shape),
            _unbroadcast(-g * ad / (bd * bd), b.shape),
        )

    return _make(out, (a, b), bwd)


def _unbroadcast(g, shape):
    """Sum g down to `shape` (scalar or same-shape operands only)."""
    if g.shape == tuple(shape):
        return g
    return g.sum().reshape(shape) if shape in ((), (1,)) else g.reshape(shape)


def log(a):
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _make(out, (a,), bwd)


def sum_all(a):
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make(out, (a,), bwd)


def mean_all(a):
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def bwd(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype, copy=False),)

    return _make(out, (a,), bwd)


def mse(a, b):
    """Mean squared error over all elements; scalar output."""
    d = a.data - b.data
    out = np.asarray(np.mean(d * d), dtype=a.dtype)
    n = d.size

    def bwd(g):
        gd = (2.0 / n) * d * g
        return (gd.astype(a.dtype, copy=False), (-gd).astype(b.dtype, copy=False))

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# activations

def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, a.dtype.type(0))

    def bwd(g):
        return (g * mask,)

    return _make(out, (a,), bwd)


def leaky_relu(a, negative_slope=0.01):
    slope = a.dtype.type(negative_slope)
    mask = a.data > 0
    out = np.where(mask, a.data, a.data * slope)

    def bwd(g):
        return (np.where(mask, g, g * slope),)

    return _make(out, (a,), bwd)


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.data.astype(a.dtype)))
    out = out.astype(a.dtype, copy=False)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), bwd)


def softmax_channels(a):
    """Softmax over axis 1."""
    m = a.data.max(axis=1, keepdims=True)
    e = np.exp(a.data - m)
    out = (e / e.sum(axis=1, keepdims=True)).astype(a.dtype, copy=False)

    def bwd(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# structured ops

def linear(x, w, b):
    """x (N, Fin) @ w.T (Fin, Fout) + b."""
    out = x.data @ w.data.T + b.data

    def bwd(g):
        return (g @ w.data, g.T @ x.data, g.sum(axis=0))

    return _make(out, (x, w, b), bwd)


def conv2d(x, w, b):
    """Same-padded stride-1 correlation; kernel (Co, Ci, k, k)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 input, got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: {x.shape} vs {w.shape}")
    k = w.shape[2]
    fwd = kernels.get("conv2d_forward")
    out = fwd(x.data, w.data, b.data)

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.get("conv2d_backward_input")(g, w.data)
        gw = kernels.get("conv2d_backward_weight")(x.data, g, k)
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return _make(out, (x, w, b), bwd)


def max_pool2x2(x):
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"max_pool needs even spatial extents, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    out, idx = kernels.get("maxpool2x2_forward")(x.data)

    def bwd(g):
        return (kernels.get("maxpool2x2_backward")(np.ascontiguousarray(g), idx, h, w),)

    return _make(out, (x,), bwd)


def upsample2x(x):
    out = kernels.get("upsample2x_forward")(x.data)

    def bwd(g):
        return (kernels.get("upsample2x_backward")(np.ascontiguousarray(g)),)

    return _make(out, (x,), bwd)


def concat_channels(tensors):
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), bwd)


def elementwise_mean(tensors):
    n = len(tensors)
    if n == 0:
        raise ValueError("elementwise_mean of nothing")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out = out + t.data
    out = (out / n).astype(tensors[0].dtype, copy=False)

    def bwd(g):
        gp = g / n
        return tuple(gp for _ in range(n))

    return _make(out, tuple(tensors), bwd)


def instance_norm(x, gamma, beta, running_mean, running_var, mode, eps=1e-5,
                  momentum=0.1):
    """Instance normalization with affine parameters.

    Train mode normalizes with per-(sample, channel) spatial statistics and
    updates the running buffers in place. Eval mode uses the running buffers
    only, so statistics are never mutated there and the output of one sample
    is independent of the rest of the batch.
    """
    if mode == "train":
        mu = x.data.mean(axis=(2, 3), keepdims=True)
        var = x.data.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.mean(axis=0).reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.mean(axis=0).reshape(-1)
        nsp = x.shape[2] * x.shape[3]

        def bwd(g):
            gm = gamma.data[None, :, None, None]
            gxhat = g * gm
            gvar_term = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
            gmean_term = gxhat.mean(axis=(2, 3), keepdims=True)
            gx = inv * (gxhat - gmean_term - xhat * gvar_term)
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gbeta = g.sum(axis=(0, 2, 3))
            return (gx.astype(x.dtype, copy=False), ggamma, gbeta)

        return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd)

    inv = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype, copy=False)
    mu = running_mean.astype(x.dtype, copy=False)
    scale = (gamma.data * inv)[None, :, None, None]
    shift = (beta.data - gamma.data * inv * mu)[None, :, None, None]
    out = x.data * scale + shift

    def bwd_eval(g):
        ggamma = (g * ((x.data - mu[None, :, None, None]) * inv[None, :, None, None])).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        return ((g * scale).astype(x.dtype, copy=False), ggamma, gbeta)

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), bwd_eval)


# ---------------------------------------------------------------------------
# batch-axis surgery for double-batched training

def batch_slice(x, start, step=2):
    """x[start::step] along the batch axis, with scatter-add gradient."""
    out = np.ascontiguousarray(x.data[start::step])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[start::step] = g
        return (gx,)

    return _make(out, (x,), bwd)


def interleave_batch(a, b):
    """Weave two equal-size batches: out[0::2]=a, out[1::2]=b."""
    if a.shape != b.shape:
        raise ValueError("interleave_batch shape mismatch")
    n = a.shape[0]
    out = np.empty((2 * n,) + a.shape[1:], dtype=a.dtype)
    out[0::2] = a.data
    out[1::2] = b.data

    def bwd(g):
        return (np.ascontiguousarray(g[0::2]), np.ascontiguousarray(g[1::2]))

    return _make(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# operator dispatch used by graph execution

OPERATOR_KINDS = (
    "conv2d",
    "conv2d_1x1",
    "linear",
    "relu",
    "leaky_relu",
    "instance_norm",
    "max_pool",
    "nearest_upsample",
    "channel_concat",
    "sigmoid",
    "softmax",
    "elementwise_mean",
)


def forward_op(kind, inputs, params=None, attrs=None, buffers=None, mode="eval"):
    """Evaluate one operator kind on Tensor inputs."""
    params = params or {}
    attrs = attrs or {}
    if kind in ("conv2d", "conv2d_1x1"):
        return conv2d(inputs[0], params["weight"], params["bias"])
    if kind == "linear":
        return linear(inputs[0], params["weight"], params["bias"])
    if kind == "relu":
        return relu(inputs[0])
    if kind == "leaky_relu":
        return leaky_relu(inputs[0], attrs.get("negative_slope", 0.01))
    if kind == "instance_norm":
        return instance_norm(
            inputs[0], params["weight"], params["bias"],
            buffers["running_mean"], buffers["running_var"], mode,
            eps=attrs.get("eps", 1e-5), momentum=attrs.get("momentum", 0.1),
        )
    if kind == "max_pool":
        return max_pool2x2(inputs[0])
    if kind == "nearest_upsample":
        return upsample2x(inputs[0])
    if kind == "channel_concat":
        return concat_channels(inputs)
    if kind == "sigmoid":
        return sigmoid(inputs[0])
    if kind == "softmax":
        return softmax_channels(inputs[0])
    if kind == "elementwise_mean":
        return elementwise_mean(inputs)
    raise ValueError(f"unknown operator kind {kind!r}")
