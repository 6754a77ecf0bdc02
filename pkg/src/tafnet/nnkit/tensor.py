"""Minimal reverse-mode autodiff over float64 numpy arrays.

Every op builds the graph eagerly; Tensor.backward() walks it once in
reverse topological order. 3D convolution is decomposed into one matmul
per kernel offset so BLAS does the heavy lifting without an im2col buffer.
"""

from __future__ import annotations

import numpy as np

from ..errors import ParamError, ShapeError

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss tensor")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- convenience operators -------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _make(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return ga, gb

    return _make(out, (a, b), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(out, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _make(out, (a,), backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _make(out, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / out.size

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, a.data.shape).copy(),)

    return _make(out, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return _make(out, (a,), backward)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    out = a.data * factor

    def backward(g):
        return (g * factor,)

    return _make(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ex = np.exp(a.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out**2),)

    return _make(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), backward)


# im2col buffer budget per chunk; caps transient memory, keeps GEMMs large
_CONV_BUFFER_BYTES = 256 * 1024 * 1024


def conv3d(x, w, b=None, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation of (B, Cin, D, H, W) with (Cout, Cin, k, k, k).

    Implemented as chunked im2col + one BLAS GEMM per chunk; the column
    buffer is bounded by a fixed byte budget.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ShapeError("conv3d expects 5D input and 5D weights")
    cout, cin, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if w.data.shape[2:] != (k, k, k):
        raise ShapeError(f"conv3d kernel must be cubic, got {w.data.shape[2:]}")
    if x.data.shape[1] != cin:
        raise ShapeError(
            f"input channels {x.data.shape[1]} != weight channels {cin}"
        )
    if stride < 1:
        raise ParamError(f"stride must be >= 1, got {stride}")
    if padding == "same":
        if k % 2 == 0:
            raise ParamError("'same' padding requires an odd kernel")
        pad = (k - 1) // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ParamError(f"unknown padding {padding!r}")

    bsz = x.data.shape[0]
    spatial = x.data.shape[2:]
    do, ho, wo = (int((s + 2 * pad - k) // stride + 1) for s in spatial)
    if min(do, ho, wo) < 1:
        raise ShapeError(f"conv3d output would be empty for input {x.data.shape}")
    n_out = do * ho * wo
    offsets = [(di, dj, dl) for di in range(k) for dj in range(k) for dl in range(k)]
    per_sample = cin * k**3 * n_out * 8
    chunk = max(1, min(bsz, _CONV_BUFFER_BYTES // max(1, per_sample)))
    w_mat = w.data.reshape(cout, cin * k**3)

    def padded(arr):
        if pad == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))

    def im2col(xp_chunk):
        n = xp_chunk.shape[0]
        cols = np.empty((n, cin, k**3, do, ho, wo), dtype=DTYPE)
        for idx, (di, dj, dl) in enumerate(offsets):
            cols[:, :, idx] = xp_chunk[
                :, :,
                di : di + stride * do : stride,
                dj : dj + stride * ho : stride,
                dl : dl + stride * wo : stride,
            ]
        return cols.reshape(n, cin * k**3, n_out)

    xp = padded(x.data)
    out = np.empty((bsz, cout, n_out), dtype=DTYPE)
    for start in range(0, bsz, chunk):
        cols = im2col(xp[start : start + chunk])
        out[start : start + chunk] = w_mat @ cols
    out = out.reshape(bsz, cout, do, ho, wo)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None, None]
        parents.append(b)

    def backward(g):
        gf = g.reshape(bsz, cout, n_out)
        gw_mat = np.zeros((cout, cin * k**3), dtype=DTYPE) if w.requires_grad else None
        gxp = (
            np.zeros((bsz, cin) + tuple(s + 2 * pad for s in spatial), dtype=DTYPE)
            if x.requires_grad
            else None
        )
        xp_b = padded(x.data) if gw_mat is not None else None
        wt = w_mat.T.copy() if gxp is not None else None
        for start in range(0, bsz, chunk):
            sl = slice(start, start + chunk)
            if gw_mat is not None:
                cols = im2col(xp_b[sl])
                gw_mat += np.matmul(gf[sl], cols.transpose(0, 2, 1)).sum(axis=0)
            if gxp is not None:
                gcols = (wt @ gf[sl]).reshape(-1, cin, k**3, do, ho, wo)
                for idx, (di, dj, dl) in enumerate(offsets):
                    gxp[sl][
                        :, :,
                        di : di + stride * do : stride,
                        dj : dj + stride * ho : stride,
                        dl : dl + stride * wo : stride,
                    ] += gcols[:, :, idx]
        gx = None
        if gxp is not None:
            gx = (
                gxp[:, :, pad : pad + spatial[0], pad : pad + spatial[1], pad : pad + spatial[2]]
                if pad
                else gxp
            )
        grads = [gx, gw_mat.reshape(w.data.shape) if gw_mat is not None else None]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)) if b.requires_grad else None)
        return tuple(grads)

    return _make(out, tuple(parents), backward)


def maxpool3d(x, k: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must be divisible by k."""
    x = as_tensor(x)
    bsz, c, d, h, w = x.data.shape
    if d % k or h % k or w % k:
        raise ShapeError(f"maxpool3d({k}) needs dims divisible by {k}, got {(d, h, w)}")
    d2, h2, w2 = d // k, h // k, w // k
    blocks = (
        x.data.reshape(bsz, c, d2, k, h2, k, w2, k)
        .transpose(0, 1, 2, 4, 6, 3, 5, 7)
        .reshape(bsz, c, d2, h2, w2, k**3)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((bsz, c, d2, h2, w2, k**3), dtype=DTYPE)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = (
            gb.reshape(bsz, c, d2, h2, w2, k, k, k)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(bsz, c, d, h, w)
        )
        return (gx,)

    return _make(out, (x,), backward)


def gap(x) -> Tensor:
    """Global average pooling over the spatial axes: (B, C, *s) -> (B, C)."""
    x = as_tensor(x)
    if x.data.ndim < 3:
        raise ShapeError(f"gap expects (B, C, spatial...), got {x.data.shape}")
    axes = tuple(range(2, x.data.ndim))
    return reduce_mean(x, axis=axes)


def affine(x, w, b=None) -> Tensor:
    """x @ w (+ b) over the last axis."""
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def binary_cross_entropy(p, targets, weights=None, eps: float = 1e-12) -> Tensor:
    """Mean weighted BCE on probabilities (clipped to [eps, 1-eps])."""
    p = as_tensor(p)
    y = np.asarray(targets, dtype=DTYPE)
    if p.data.shape != y.shape:
        raise ShapeError(f"probabilities {p.data.shape} vs targets {y.shape}")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=DTYPE)
    pc = np.clip(p.data, eps, 1.0 - eps)
    losses = -w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    out = losses.mean()
    inside = (p.data > eps) & (p.data < 1.0 - eps)

    def backward(g):
        dp = -w * (y / pc - (1.0 - y) / (1.0 - pc)) / y.size
        return (g * dp * inside,)

    return _make(out, (p,), backward)


def multi_head_attention(q_in, k_in, v_in, wq, bq, wk, bk, wv, bv, wo, bo, heads: int):
    """Scaled dot-product attention with `heads` heads over (B, T, d_model).

    Queries come from `q_in`; keys/values from `k_in`/`v_in`. Returns the
    projected output and the per-head attention tensor (B, H, Tq, Tk).
    """
    q_in, k_in, v_in = as_tensor(q_in), as_tensor(k_in), as_tensor(v_in)
    bsz, tq, d_model = q_in.data.shape
    tk = k_in.data.shape[1]
    if d_model % heads:
        raise ParamError(f"d_model {d_model} not divisible by heads {heads}")
    dk = d_model // heads

    def split_heads(t, length):
        return transpose(reshape(t, (bsz, length, heads, dk)), (0, 2, 1, 3))

    q = split_heads(affine(q_in, wq, bq), tq)
    k = split_heads(affine(k_in, wk, bk), tk)
    v = split_heads(affine(v_in, wv, bv), tk)
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    attn = softmax(logits, axis=-1)
    ctx = matmul(attn, v)
    merged = reshape(transpose(ctx, (0, 2, 1, 3)), (bsz, tq, d_model))
    out = affine(merged, wo, bo)
    return out, attn
