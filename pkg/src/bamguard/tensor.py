"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation on :class:`Tensor` records its parents and a backward rule when
gradient recording is on. :func:`backward` walks that graph once in reverse
topological order and accumulates gradients into the leaves.
"""

from __future__ import annotations

import contextlib
import os
import threading
import warnings

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


_DEFAULT_DTYPE = np.float64 if os.environ.get("BAMGUARD_FLOAT64") else np.float32
_grad_mode = threading.local()


def _log_branch(mask):
    # gradcheck records which side of every kink each op took
    log = getattr(_grad_mode, "branches", None)
    if log is not None:
        log.append(mask)


@contextlib.contextmanager
def branch_log():
    """Collect the branch masks of relu/minimum/clamp evaluated inside the block."""
    prev = getattr(_grad_mode, "branches", None)
    _grad_mode.branches = log = []
    try:
        yield log
    finally:
        _grad_mode.branches = prev


def grad_enabled():
    return getattr(_grad_mode, "enabled", True)


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype):
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default float type (``float64`` for gradient checks)."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Stop recording the graph in the current thread."""
    old = grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"

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
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, other: matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward, op):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    """Hadamard product with singleton broadcasting."""
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def minimum(a, b):
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    _log_branch(pick_a)
    sa, sb = a.shape, b.shape
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0), sa),
                            _unbroadcast(np.where(pick_a, 0, g), sb)), "minimum")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    _log_branch(mask)
    return _make(np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                 lambda g: (g * mask,), "relu")


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows exp
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype, copy=False)
    return _make(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(a):
    a = as_tensor(a)
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def log(a):
    a = as_tensor(a)
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo=None, hi=None):
    """Saturating clamp; gradient is zero wherever the bound is active."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    _log_branch(inside)
    return _make(out, (a,), lambda g: (g * inside,), "clamp")


# ------------------------------------------------------------------ shaping

def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def flatten(a):
    return reshape(a, (a.shape[0], -1))


def take_along(a, index):
    """Pick ``a[i, index[i]]`` for each row of a 2-D tensor."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, index] = g
        return (full,)

    return _make(a.data[rows, index], (a,), backward, "take_along")


# --------------------------------------------------------------- reductions

def _check_axis(a, axis):
    if axis is None:
        return
    for ax in np.atleast_1d(axis):
        if not -a.ndim <= ax < a.ndim:
            raise DimensionError(f"axis {ax} out of range for {a.ndim}-d tensor")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.dtype),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    _check_axis(a, axis)
    if axis is None:
        count = a.data.size
    else:
        count = int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def global_avg_pool(a):
    """Mean over the spatial axes of ``(N, C, H, W)``; returns ``(N, C)``."""
    a = as_tensor(a)
    if a.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got shape {a.shape}")
    return mean(a, axis=(2, 3))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_axis(a, axis)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _make(p, (a,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),), "softmax")


# ------------------------------------------------------------- linear maps

def matmul(a, b):
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dense(x, weight, bias=None):
    """``x @ weight.T + bias`` with ``weight`` of shape ``(Dout, Din)``."""
    x, weight = _binary_operands(x, weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense: input shape {x.shape} incompatible with weight shape {weight.shape} (axis 1)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return _make(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "dense")
    bias = as_tensor(bias, dtype=x.dtype)
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = out + bias.data
    return _make(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)), "dense")


def conv_output_size(size, k, stride, padding, dilation):
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, kernel, bias=None, stride=1, padding=0, dilation=1):
    """2-D cross-correlation of ``(N, C, H, W)`` with ``(Co, C, kh, kw)``."""
    x, kernel = _binary_operands(x, kernel)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"invalid geometry stride={stride} padding={padding} dilation={dilation}")
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    co, ck, kh, kw = kernel.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels (axis 1) {c} != kernel channels (axis 1) {ck}")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise DimensionError(
            f"conv2d: no kernel placement fits; input spatial {(h, w)} (axes 2, 3), "
            f"kernel {(kh, kw)}, padding {padding}, dilation {dilation}")
    xd, kd = x.data, kernel.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _kernels.im2col(xp, kh, kw, stride, dilation, oh, ow).reshape(n, c * kh * kw, oh * ow)
    wmat = kd.reshape(co, -1)
    out = np.matmul(wmat, cols)
    parents = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out += bias.data[:, None]
        parents = (x, kernel, bias)
    out = out.reshape(n, co, oh, ow)

    def backward(g):
        gmat = g.reshape(n, co, oh * ow)
        gk = np.tensordot(gmat, cols, axes=([0, 2], [0, 2])).reshape(kd.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat).reshape(n, c, kh, kw, oh, ow)
            gxp = _kernels.col2im(gcols, xp.shape, stride, dilation)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=(0, 2))

    return _make(out, parents, backward, "conv2d")


# ----------------------------------------------------------------- backward

def topological_order(root):
    """Nodes reachable from ``root`` (inputs first), each exactly once."""
    order, seen = [], set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss, inputs=()):
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Returns ``False`` (and warns) when ``loss`` is not connected to any leaf
    requiring gradients; tensors in ``inputs`` then receive zero gradients.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        warnings.warn("loss is detached from every leaf; gradients are zero", RuntimeWarning,
                      stacklevel=2)
        for t in inputs:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        return False
    order = topological_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient reached leaf of shape {node.shape}")
            g = g.astype(node.dtype, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for t in inputs:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
    return True
