"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record their parents and an adjoint closure; :func:`backward` sorts
the recorded graph into a :class:`GradTape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import kernels

_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Invalid hyper-parameters for an operation or module."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_adjoint", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._adjoint = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, retain_graph=False):
        backward(self, retain_graph=retain_graph)

    # -- operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, parents, adjoint):
    """Build an op output; records the graph edge only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._adjoint = adjoint
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    # python scalars adopt the tensor operand's dtype
    if not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------------------
# tape and backward
# ---------------------------------------------------------------------------


class GradTape:
    """Topologically ordered record of the graph feeding a tensor.

    ``nodes`` runs from leaves to the root, so :meth:`replay` walks it in
    reverse and visits every node exactly once.
    """

    def __init__(self, root):
        self.root = root
        self.nodes = _topological_order(root)

    def __len__(self):
        return len(self.nodes)

    def replay(self, seed=None):
        grads = {id(self.root): np.ones_like(self.root.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._adjoint is None:
                continue
            parent_grads = node._adjoint(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    def clear(self):
        for node in self.nodes:
            node._parents = ()
            node._adjoint = None
        self.nodes = []


def _topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss, retain_graph=False):
    """Populate ``.grad`` on every gradient-requiring tensor feeding ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradTape(loss)
    tape.replay()
    if not retain_graph:
        tape.clear()
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def adjoint(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), adjoint)


def div(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def adjoint(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _result(ad / bd, (a, b), adjoint)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)
    ad = a.data
    return _result(ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    # exp of a non-positive argument only, so no overflow warnings
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    ad = a.data
    return _result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),))


def softplus(a):
    ad = a.data
    out = np.maximum(ad, 0.0) + np.log1p(np.exp(-np.abs(ad)))
    return _result(out, (a,), lambda g: (g * _sigmoid(ad),))


def swish(x, beta=1.0):
    """x * sigmoid(beta * x); ``beta`` may be a float or a learnable tensor."""
    beta = as_tensor(beta, dtype=x.dtype)
    xd, bd = x.data, beta.data
    s = _sigmoid(bd * xd)
    out = xd * s

    def adjoint(g):
        ds = s * (1.0 - s)
        gx = g * (s + bd * xd * ds)
        gb = _unbroadcast(g * xd * xd * ds, bd.shape)
        return gx, gb

    return _result(out, (x, beta), adjoint)


def silu(x):
    return swish(x, 1.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def adjoint(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), adjoint)


def minimum(a, b):
    """Elementwise min; gradient goes to ``a`` on ties."""
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    take_a = ad <= bd

    def adjoint(g):
        return _unbroadcast(g * take_a, ad.shape), _unbroadcast(g * ~take_a, bd.shape)

    return _result(np.minimum(ad, bd), (a, b), adjoint)


# ---------------------------------------------------------------------------
# shape, reduction, indexing
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), adjoint)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    # materialised so downstream reductions never depend on the input's strides
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inverse)),))


def _is_basic(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index):
    """Indexing; repeated advanced indices accumulate their gradients."""
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def adjoint(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return _result(a.data[index], (a,), adjoint)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint)


def matmul(a, b):
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def adjoint(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            # shared weight: fold batch dims into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _result(ad @ bd, (a, b), adjoint)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    out = e / np.sum(e, axis=axis, keepdims=True)

    def adjoint(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (a,), adjoint)


# ---------------------------------------------------------------------------
# sequence operators
# ---------------------------------------------------------------------------


def conv1d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """1-D cross-correlation over ``[B, Cin, T]`` with ``weight`` ``[Cout, Cin/groups, K]``.

    ``groups`` must be 1 or equal to Cin (depthwise).
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise DimensionError(f"conv1d expects x [B,C,T] and weight [O,C,K], got {x.shape} and {weight.shape}")
    B, Cin, T = x.shape
    Cout, Cw, K = weight.shape
    if stride < 1 or padding < 0 or K < 1:
        raise ConfigurationError(f"conv1d needs K>=1, stride>=1, padding>=0 (K={K}, stride={stride}, padding={padding})")
    if groups == 1:
        if Cw != Cin:
            raise DimensionError(f"conv1d channel mismatch: x {x.shape} vs weight {weight.shape}")
    elif groups == Cin and Cw == 1 and Cout == Cin:
        pass
    else:
        raise DimensionError(f"conv1d groups={groups} unsupported for x {x.shape} and weight {weight.shape}")
    if T + 2 * padding < K:
        raise DimensionError(f"conv1d kernel {K} longer than padded input {T + 2 * padding}")

    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    n_out = (T + 2 * padding - K) // stride + 1
    wd = weight.data

    if groups != 1:
        w2 = np.ascontiguousarray(wd[:, 0, :])
        out = kernels.depthwise_forward(np.ascontiguousarray(xp), w2, stride)

        def core_adjoint(g):
            gxp, gw = kernels.depthwise_backward(np.ascontiguousarray(g), np.ascontiguousarray(xp), w2, stride)
            return gxp, gw[:, None, :]

    else:
        span = stride * (n_out - 1) + 1
        # columns [B, Cin*K, T']
        cols = np.stack([xp[:, :, j : j + span : stride] for j in range(K)], axis=2).reshape(B, Cin * K, n_out)
        w2 = wd.reshape(Cout, Cin * K)
        out = np.matmul(w2, cols)

        def core_adjoint(g):
            gw = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(Cout, Cin, K)
            gcols = np.matmul(w2.T, g).reshape(B, Cin, K, n_out)
            gxp = np.zeros_like(xp)
            for j in range(K):
                gxp[:, :, j : j + span : stride] += gcols[:, :, j, :]
            return gxp, gw

    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def adjoint(g):
        gxp, gw = core_adjoint(g)
        gx = gxp[:, :, padding : padding + T] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result(out, parents, adjoint)


def adaptive_avg_pool1d_to_one(x):
    """Mean over the time axis, keeping it as length 1: ``[B,C,T] -> [B,C,1]``."""
    T = x.shape[-1]
    if T == 0:
        raise DimensionError("adaptive_avg_pool1d_to_one on an empty sequence")
    xd = x.data
    # summing in sorted order makes the result exactly invariant to time permutations
    return _result(
        np.ascontiguousarray(np.sort(xd, axis=-1)).mean(axis=-1, keepdims=True),
        (x,),
        lambda g: (np.broadcast_to(g / T, xd.shape).copy(),),
    )


def max_pool1d(x, k, s):
    """Unpadded max pooling; gradient goes to the first maximal element."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool1d expects [B,C,T], got {x.shape}")
    T = x.shape[-1]
    if k < 1 or s < 1:
        raise ConfigurationError(f"max_pool1d needs k>=1 and s>=1 (k={k}, s={s})")
    if k > T:
        raise DimensionError(f"max_pool1d window {k} exceeds sequence length {T}")
    out, idx = kernels.maxpool1d_forward(np.ascontiguousarray(x.data), int(k), int(s))
    return _result(out, (x,), lambda g: (kernels.maxpool1d_backward(np.ascontiguousarray(g), idx, T),))


def interpolation_matrix(src_len, dst_len, dtype=np.float64):
    """``[src_len, dst_len]`` matrix for endpoint-aligned linear resampling."""
    if src_len < 1 or dst_len < 1:
        raise DimensionError(f"interpolation needs positive lengths, got {src_len} -> {dst_len}")
    m = np.zeros((src_len, dst_len), dtype=dtype)
    if src_len == 1:
        m[0, :] = 1.0
        return m
    if dst_len == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(dst_len) * ((src_len - 1) / (dst_len - 1))
    lo = np.minimum(np.floor(pos).astype(np.int64), src_len - 1)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = pos - lo
    cols = np.arange(dst_len)
    np.add.at(m, (lo, cols), 1.0 - frac)
    np.add.at(m, (hi, cols), frac)
    return m


def linear_interpolate(x, target_len):
    """Resample the last axis to ``target_len`` with aligned endpoints."""
    L = x.shape[-1]
    if target_len < 1:
        raise DimensionError(f"target_len must be >= 1, got {target_len}")
    if L == target_len:
        return x
    m = interpolation_matrix(L, target_len, dtype=x.dtype)
    return matmul(x, Tensor(m))


def layer_norm(x, gamma, beta_shift, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta_shift.data

    def adjoint(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        reduce = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=reduce), g.sum(axis=reduce)

    return _result(out, (x, gamma, beta_shift), adjoint)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` over the last axis; weight is ``[out, in]``."""
    out = matmul(x, transpose(weight))
    return out if bias is None else out + bias


def multi_head_self_attention(x, num_heads, w_qkv, b_qkv, w_out, b_out, local_window=None):
    """Scaled dot-product self-attention on ``[B, T, D]``.

    ``w_qkv`` is ``[3D, D]`` (query, key, value stacked), ``w_out`` ``[D, D]``.
    With ``local_window`` set, position i only attends to |i - j| <= window.
    """
    B, T, D = x.shape
    if D % num_heads:
        raise ConfigurationError(f"embedding dim {D} not divisible by {num_heads} heads")
    dh = D // num_heads
    qkv = linear(x, w_qkv, b_qkv)  # [B,T,3D]
    qkv = transpose(reshape(qkv, (B, T, 3, num_heads, dh)), (2, 0, 3, 1, 4))  # [3,B,H,T,dh]
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if local_window is not None:
        idx = np.arange(T)
        blocked = np.abs(idx[:, None] - idx[None, :]) > local_window
        scores = scores + Tensor(np.where(blocked, -1e9, 0.0).astype(x.dtype))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)  # [B,H,T,dh]
    ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (B, T, D))
    return linear(ctx, w_out, b_out)
