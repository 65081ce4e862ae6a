"""Dense tensors with define-by-run reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` records a node: the op
kind, its parent tensors and a closure mapping the output gradient to parent
gradients.  Nodes carry a global creation sequence number, so sorting the
nodes reachable from a loss by that number gives a topological order that
matches the order in which the forward pass appended them.

Broadcasting is deliberately narrow: operands of binary elementwise ops must
have identical shapes, or one of them is a scalar, or the smaller operand's
shape equals the trailing dimensions of the larger one (a parameter shared
over a leading batch/token axis).
"""

import itertools
import math

import numpy as np

from . import _kernels
from .errors import ContractError, NumericalError, ShapeError

DEFAULT_DTYPE = np.float32

_seq = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._op = None
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    # ---------------------------------------------------------- properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def values(self):
        """Flat row-major view of the stored values."""
        return self.data.reshape(-1)

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # ------------------------------------------------------------- sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def backward(self):
        backward(self)


# ------------------------------------------------------------------ graph


class ComputationGraph:
    """Nodes reachable from an output, in forward append order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out):
        seen = set()
        stack = [out]
        nodes = []
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes)

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [t._op for t in self.nodes if t._op is not None]


def backward(loss, graph=None):
    """Populate ``.grad`` on every leaf tensor with ``requires_grad``.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad``
    between independent backward passes over shared leaves.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or ComputationGraph.from_output(loss)
    grads = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- helpers


def _t(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_finite(arr, kind):
    if not np.isfinite(arr).all():
        raise NumericalError(f"{kind} produced non-finite values")


def _make(data, kind, parents, backward_fn):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._seq = next(_seq)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._op = kind
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._op = None
        out._parents = ()
        out._backward = None
    return out


def _broadcast_kind(a, b):
    if a.shape == b.shape:
        return "same"
    if b.size == 1 and b.ndim <= 1:
        return "b_scalar"
    if a.size == 1 and a.ndim <= 1:
        return "a_scalar"
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        return "b_suffix"
    if a.ndim < b.ndim and b.shape[b.ndim - a.ndim :] == a.shape:
        return "a_suffix"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, shape):
    if g.shape == tuple(shape):
        return g
    size = int(np.prod(shape)) if len(shape) else 1
    if size == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _t(a), _t(b)
    _broadcast_kind(a, b)
    out = a.data + b.data
    _check_finite(out, "add")
    sa, sb = a.shape, b.shape
    return _make(out, "add", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b):
    a, b = _t(a), _t(b)
    _broadcast_kind(a, b)
    out = a.data - b.data
    _check_finite(out, "sub")
    sa, sb = a.shape, b.shape
    return _make(out, "sub", (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b):
    a, b = _t(a), _t(b)
    _broadcast_kind(a, b)
    out = a.data * b.data
    _check_finite(out, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(out, "mul", (a, b), bw)


def scale(x, c):
    x = _t(x)
    c = float(c)
    out = (x.data * c).astype(x.dtype, copy=False)
    _check_finite(out, "scale")
    return _make(out, "scale", (x,), lambda g: ((g * c).astype(g.dtype, copy=False),))


def relu(x):
    x = _t(x)
    out = np.maximum(x.data, 0)
    mask = out > 0
    # subgradient at exactly zero is zero
    return _make(out, "relu", (x,), lambda g: (g * mask,))


def gelu(x):
    """GELU, tanh approximation."""
    x = _t(x)
    k = _kernels.active()
    out = k.gelu_fwd(x.data)
    _check_finite(out, "gelu")
    xd = x.data
    return _make(out, "gelu", (x,), lambda g: (k.gelu_bwd(xd, g),))


def elementwise(kind, x, y=None):
    """Dispatch by name: relu, gelu, add, mul, sub, scale."""
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "add":
        return add(x, y)
    if kind == "mul":
        return mul(x, y)
    if kind == "sub":
        return sub(x, y)
    if kind == "scale":
        return scale(x, y)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------- linear


def matmul(a, b):
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch mismatch: {a.shape} x {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    _check_finite(out, "matmul")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


def linear(x, w, b=None):
    """``x @ w + b`` with ``w`` of shape (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ----------------------------------------------------------- normalizations


def softmax(x, axis=-1):
    x = _t(x)
    axis = axis % x.ndim
    k = _kernels.active()
    moved = np.moveaxis(x.data, axis, -1)
    mshape = moved.shape
    y2 = k.softmax_fwd(np.ascontiguousarray(moved.reshape(-1, mshape[-1])))
    _check_finite(y2, "softmax")
    out = np.moveaxis(y2.reshape(mshape), -1, axis)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, mshape[-1]))
        dx = k.softmax_bwd(y2, gm)
        return (np.moveaxis(dx.reshape(mshape), -1, axis),)

    return _make(out, "softmax", (x,), bw)


def layernorm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layernorm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm params {gamma.shape}/{beta.shape} do not match d={d}")
    k = _kernels.active()
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    y2, xhat, rstd = k.layernorm_fwd(x2, gamma.data, beta.data, eps)
    _check_finite(y2, "layernorm")
    shape = x.shape
    gd = gamma.data

    def bw(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        dx = k.layernorm_bwd(g2, xhat, rstd, gd).reshape(shape) if x.requires_grad else None
        dgamma = (g2 * xhat).sum(axis=0) if gamma.requires_grad else None
        dbeta = g2.sum(axis=0) if beta.requires_grad else None
        return dx, dgamma, dbeta

    return _make(y2.reshape(shape), "layernorm", (x, gamma, beta), bw)


# ---------------------------------------------------------------- movement


def reshape(x, shape):
    x = _t(x)
    shape = tuple(int(s) for s in shape)
    out = x.data.reshape(shape)
    old = x.shape
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None):
    x = _t(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _make(out, "transpose", (x,), lambda g: (g.transpose(inv),))


def tsum(x, axis=None):
    x = _t(x)
    out = np.asarray(x.data.sum(axis=axis), dtype=x.dtype)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype),)

    return _make(out, "sum", (x,), bw)


def mean(x, axis=None):
    x = _t(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis), 1.0 / count)


# ------------------------------------------------------------- convolution


def conv2d(x, w, b=None, stride=1, pad=0):
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[Co,C,kh,kw]``.

    Computed as a sum over kernel taps, each one BLAS contraction, without
    materializing im2col buffers.
    """
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel/shape mismatch: input {x.shape}, weight {w.shape}")
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}")
    parents = (x, w) if b is None else (x, w, b)
    if b is not None:
        b = _t(b)
    if stride == 1:
        out, bw = _conv_flat(x, w, b, pad, ho, wo)
    else:
        out, bw = _conv_taps(x, w, b, stride, pad, ho, wo)
    return _make(out, "conv2d", parents, bw)


def _conv_flat(x, w, b, pad, ho, wo):
    # Stride 1: lay the padded input out as [C, rows, cols, N] and flatten the
    # last three axes.  Tap (i, j) then reads one contiguous slice starting at
    # (i * cols + j) * N, so every tap is a single strided-view GEMM.  Output
    # columns past ``wo`` wrap into the next row and are discarded.
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    dtype = np.result_type(x.dtype, w.dtype)
    xt = np.zeros((c, hp + 1, wp, n), dtype=dtype)  # one spare row absorbs the wrap
    xt[:, pad : pad + h, pad : pad + wd, :] = x.data.transpose(1, 2, 3, 0)
    xf = xt.reshape(c, -1)
    span = ho * wp * n
    offsets = [((i * wp) + j) * n for i in range(kh) for j in range(kw)]
    taps = [np.ascontiguousarray(w.data[:, :, i, j]) for i in range(kh) for j in range(kw)]
    acc = np.zeros((co, span), dtype=dtype)
    for off, wt in zip(offsets, taps):
        acc += wt @ xf[:, off : off + span]
    acc = acc.reshape(co, ho, wp, n)[:, :, :wo, :]
    if b is not None:
        acc = acc + b.data[:, None, None, None]
    _check_finite(acc, "conv2d")
    out = np.ascontiguousarray(acc.transpose(3, 0, 1, 2))

    def bw(g):
        gt = np.zeros((co, ho, wp, n), dtype=g.dtype)
        gt[:, :, :wo, :] = g.transpose(1, 2, 3, 0)
        gf = gt.reshape(co, span)
        gx = gw = None
        if x.requires_grad:
            gxf = np.zeros(xf.shape, dtype=g.dtype)
            for off, wt in zip(offsets, taps):
                gxf[:, off : off + span] += wt.T @ gf
            gxt = gxf.reshape(c, hp + 1, wp, n)[:, pad : pad + h, pad : pad + wd, :]
            gx = np.ascontiguousarray(gxt.transpose(3, 0, 1, 2))
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for (i, j), off in zip(((i, j) for i in range(kh) for j in range(kw)), offsets):
                gw[:, :, i, j] = gf @ xf[:, off : off + span].T
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return out, bw


def _conv_taps(x, w, b, stride, pad, ho, wo):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd_ = w.data

    def window(arr, i, j):
        return arr[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]

    acc = np.zeros((co, n, ho, wo), dtype=np.result_type(x.dtype, w.dtype))
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(wd_[:, :, i, j], window(xp, i, j), axes=([1], [1]))
    if b is not None:
        acc += b.data[:, None, None, None]
    _check_finite(acc, "conv2d")
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))

    def bw(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))  # (co, n, ho, wo)
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    window(gxp, i, j)[...] += np.tensordot(
                        wd_[:, :, i, j], gt, axes=([0], [0])
                    ).transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(gt, window(xp, i, j), axes=([1, 2, 3], [0, 2, 3]))
        grads = [gx, gw]
        if b is not None:
            grads.append(gt.sum(axis=(1, 2, 3)) if b.requires_grad else None)
        return tuple(grads)

    return out, bw


# --------------------------------------------------------------------- loss


def cross_entropy(logits, labels, reduction="mean"):
    """Softmax cross-entropy of ``logits[N, m]`` against integer ``labels[N]``."""
    logits = _t(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy expects (N, m) logits for {labels.shape[0]} labels")
    n, m = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ContractError(f"labels must lie in [0, {m})")
    z = logits.data.astype(np.float64) - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    nll = logsum - z[np.arange(n), labels]
    total = nll.sum()
    denom = n if reduction == "mean" else 1
    out = np.asarray(total / denom, dtype=logits.dtype)
    _check_finite(out, "cross_entropy")

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / denom)).astype(logits.dtype),)

    return _make(out, "cross_entropy", (logits,), bw)


def gelu_reference(v):
    """Scalar tanh-approximation GELU, for oracles and documentation."""
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v**3)))
