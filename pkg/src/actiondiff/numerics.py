"""Dense tensors with reverse-mode differentiation.

numpy supplies storage and kernels; this module owns the differentiation
rules, the finiteness guarantee (any op producing NaN/Inf raises), and the
determinism contract. Graphs are built implicitly through parent links and
torn down by a single backward pass in reverse insertion order.

Production paths run in float32; tests switch the whole module to float64
with :func:`use_dtype` when verifying gradients against central differences.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "NumericsError",
    "ShapeError",
    "NonFiniteError",
    "GraphConsumedError",
    "set_default_dtype",
    "default_dtype",
    "use_dtype",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "slc",
    "concat",
    "pad",
    "broadcast_to",
    "mean",
    "tsum",
    "softmax",
    "layer_norm",
    "gelu",
    "silu",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "pow_const",
    "clamp",
    "embedding",
    "sinusoidal_encoding",
    "attention",
    "grad_check",
]


class NumericsError(Exception):
    pass


class ShapeError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


class GraphConsumedError(NumericsError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

_ids = itertools.count()
_tls = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch the module-wide dtype. float32 is the production setting;
    float64 is the verification mode used by gradient checks."""
    global _default_dtype
    if isinstance(dtype, str):
        dtype = _DTYPES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


@contextmanager
def use_dtype(dtype):
    prev = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _grad_on() -> bool:
    return getattr(_tls, "grad", True)


@contextmanager
def no_grad():
    """Disable graph recording (forward values unchanged)."""
    prev = _grad_on()
    _tls.grad = False
    try:
        yield
    finally:
        _tls.grad = prev


class Tensor:
    """Immutable dense array plus optional gradient buffer.

    Data buffers are write-locked after creation. Leaf parameters may be
    updated between graph lifetimes via :meth:`assign_` (optimizer use only).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=_default_dtype, order="C")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor created from non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._id = next(_ids)
        self._consumed = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return _wrap(self.data, (), None, "detach")

    def assign_(self, new_data) -> None:
        """Replace a leaf parameter's values in place. Only valid between
        graph lifetimes (optimizer steps); never on interior nodes."""
        if self._parents:
            raise NumericsError("assign_ is only allowed on leaf tensors")
        arr = np.asarray(new_data, dtype=self.data.dtype)
        if not arr.flags["C_CONTIGUOUS"] or arr.flags.writeable is False:
            arr = arr.copy()
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign_ shape {arr.shape} != {self.data.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("assign_ with non-finite values")
        arr.flags.writeable = False
        self.data = arr

    # -- autodiff -----------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root. Visits each node exactly
        once in reverse insertion order; a second sweep over the same graph
        raises GraphConsumedError."""
        if self.size != 1:
            raise ShapeError("backward root must be a scalar")
        if self._consumed:
            raise GraphConsumedError("graph already consumed by backward")
        if not self.requires_grad:
            raise NumericsError("backward on a tensor that does not require grad")

        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append(p)

        for node in nodes:
            if node._consumed:
                raise GraphConsumedError("graph already consumed by backward")

        self.grad = np.ones_like(self.data)
        # Insertion order is a topological order: parents precede children.
        for node in sorted(nodes, key=lambda n: n._id, reverse=True):
            if node.grad is None or node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
        for node in nodes:
            if node._parents:
                node._consumed = True

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, pow_const(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def __repr__(self) -> str:  # pragma: no cover
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{grad})"


def _wrap(data: np.ndarray, parents, vjp, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    t = object.__new__(Tensor)
    data = np.asarray(data)  # ascontiguousarray would promote 0-d to 1-d
    if data.flags.writeable:
        data.flags.writeable = False
    # else: a view of an already-locked buffer is immutable as-is; keeping
    # the view avoids copying every slice (convolutions slice heavily)
    t.data = data
    t.grad = None
    t._id = next(_ids)
    t._consumed = False
    if _grad_on() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._vjp = vjp
    else:
        t.requires_grad = False
        t._parents = ()
        t._vjp = None
    return t


def _const_like(value, ref: Tensor) -> Tensor:
    arr = np.asarray(value, dtype=ref.data.dtype)
    return _wrap(arr, (), None, "const")


def _as_tensor(x, ref: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else _default_dtype
    return _wrap(np.asarray(x, dtype=dtype), (), None, "const")


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _suffix_axes(big: tuple, small: tuple, op: str) -> tuple:
    """Validate that `small` is a trailing suffix of `big` (leading-axis batch
    broadcast) and return the axes summed to reduce a gradient back."""
    k = len(big) - len(small)
    if k < 0 or big[k:] != small:
        raise ShapeError(f"{op}: shapes {big} and {small} do not align")
    return tuple(range(k))


def _binary(op_name, a, b, fwd, vjp_a, vjp_b):
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)
    _check_same_dtype(a, b, op_name)
    if a.shape == b.shape:
        red_a = red_b = ()
    elif a.ndim >= b.ndim:
        red_b = _suffix_axes(a.shape, b.shape, op_name)
        red_a = ()
    else:
        red_a = _suffix_axes(b.shape, a.shape, op_name)
        red_b = ()

    def vjp(g):
        ga = vjp_a(g)
        gb = vjp_b(g)
        if red_a and ga is not None:
            ga = ga.sum(axis=red_a)
        if red_b and gb is not None:
            gb = gb.sum(axis=red_b)
        return ga, gb

    return _wrap(fwd(a.data, b.data), (a, b), vjp, op_name), a, b


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return _wrap(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add")
    out, _, _ = _binary("add", a, b, np.add, lambda g: g, lambda g: g)
    return out


def sub(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        return _wrap(a.data - a.data.dtype.type(b), (a,), lambda g: (g,), "sub")
    out, _, _ = _binary("sub", a, b, np.subtract, lambda g: g, lambda g: -g)
    return out


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        c = a.data.dtype.type(b)
        return _wrap(a.data * c, (a,), lambda g: (g * c,), "mul")
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)
    out, at, bt = _binary(
        "mul", a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data
    )
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, ref=a)
    _check_same_dtype(a, b, "matmul")
    if b.ndim == 2:
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
        k, n = b.shape

        def vjp(g):
            ga = np.matmul(g, b.data.T)
            gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            return ga, gb

        return _wrap(np.matmul(a.data, b.data), (a, b), vjp, "matmul")
    if a.ndim == b.ndim and a.ndim >= 2 and a.shape[:-2] == b.shape[:-2]:
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: {a.shape} @ {b.shape}")

        def vjp(g):
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            return ga, gb

        return _wrap(np.matmul(a.data, b.data), (a, b), vjp, "matmul")
    raise ShapeError(f"matmul: unsupported shapes {a.shape} @ {b.shape}")


def reshape(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = t.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _wrap(out, (t,), lambda g: (g.reshape(t.shape),), "reshape")


def transpose(t: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(t.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for ndim {t.ndim}")
    inv = tuple(np.argsort(axes))
    return _wrap(
        np.transpose(t.data, axes), (t,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def slc(t: Tensor, key) -> Tensor:
    """Multi-axis contiguous slice. `key` is a tuple of slice objects (no
    steps, no integer indexing)."""
    if not isinstance(key, tuple):
        key = (key,)
    for s in key:
        if not isinstance(s, slice) or s.step not in (None, 1):
            raise ShapeError("slc supports contiguous slices only")

    def vjp(g):
        buf = np.zeros(t.shape, dtype=g.dtype)
        buf[key] = g
        return (buf,)

    return _wrap(t.data[key], (t,), vjp, "slc")


def concat(ts, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat of empty list")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for i in range(len(ts)):
            idx[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _wrap(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def pad(t: Tensor, pad_width) -> Tensor:
    """Zero padding; pad_width as in np.pad."""
    pw = tuple((int(a), int(b)) for a, b in pad_width)
    if len(pw) != t.ndim:
        raise ShapeError("pad width rank mismatch")
    inner = tuple(slice(a, a + n) for (a, _), n in zip(pw, t.shape))
    return _wrap(np.pad(t.data, pw), (t,), lambda g: (g[inner],), "pad")


def broadcast_to(t: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    k = len(shape) - t.ndim
    if k < 0:
        raise ShapeError(f"broadcast_to: cannot shrink {t.shape} to {shape}")
    stretched = []
    for i, (src, dst) in enumerate(zip(t.shape, shape[k:])):
        if src == dst:
            continue
        if src == 1:
            stretched.append(k + i)
        else:
            raise ShapeError(f"broadcast_to: {t.shape} -> {shape}")
    lead = tuple(range(k))
    st = tuple(stretched)

    def vjp(g):
        if st:
            g = g.sum(axis=st, keepdims=True)
        if lead:
            g = g.sum(axis=lead)
        return (g.reshape(t.shape),)

    return _wrap(np.broadcast_to(t.data, shape).copy(), (t,), vjp, "broadcast_to")


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)

    def vjp(g):
        if not keepdims:
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g, t.shape).copy(),)

    return _wrap(t.data.sum(axis=axes, keepdims=keepdims), (t,), vjp, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, t.ndim)
    count = 1
    for a in axes:
        count *= t.shape[a]
    inv = 1.0 / count

    def vjp(g):
        if not keepdims:
            for a in axes:
                g = np.expand_dims(g, a)
        return (np.broadcast_to(g * inv, t.shape).copy(),)

    return _wrap(t.data.mean(axis=axes, keepdims=keepdims), (t,), vjp, "mean")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for ndim {t.ndim}")
    ax = axis % t.ndim
    shifted = t.data - t.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _wrap(y, (t,), vjp, "softmax")


def layer_norm(t: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalization only (zero mean, unit variance along `axis`); any affine
    transform is applied by the caller."""
    ax = axis % t.ndim
    mu = t.data.mean(axis=ax, keepdims=True)
    var = t.data.var(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = (t.data - mu) * inv

    def vjp(g):
        gm = g.mean(axis=ax, keepdims=True)
        gx = (g * xh).mean(axis=ax, keepdims=True)
        return (inv * (g - gm - xh * gx),)

    return _wrap(xh, (t,), vjp, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    x = t.data
    u = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * du),)

    return _wrap(y, (t,), vjp, "gelu")


def silu(t: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-t.data))
    return _wrap(t.data * s, (t,), lambda g: (g * s * (1.0 + t.data * (1.0 - s)),), "silu")


def sigmoid(t: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-t.data))
    return _wrap(y, (t,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(t: Tensor) -> Tensor:
    y = np.exp(t.data)
    return _wrap(y, (t,), lambda g: (g * y,), "exp")


def log(t: Tensor) -> Tensor:
    return _wrap(np.log(t.data), (t,), lambda g: (g / t.data,), "log")


def sqrt(t: Tensor) -> Tensor:
    y = np.sqrt(t.data)
    return _wrap(y, (t,), lambda g: (g * 0.5 / y,), "sqrt")


def pow_const(t: Tensor, p: float) -> Tensor:
    if p == 0.0:
        return _wrap(np.ones_like(t.data), (t,), lambda g: (np.zeros_like(g),), "pow")
    y = t.data**p
    return _wrap(y, (t,), lambda g: (g * p * t.data ** (p - 1.0),), "pow")


def clamp(t: Tensor, lo: float, hi: float) -> Tensor:
    y = np.clip(t.data, lo, hi)
    inside = (t.data > lo) & (t.data < hi)
    return _wrap(y, (t,), lambda g: (g * inside,), "clamp")


def embedding(weight: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.min(initial=0) < 0 or (idx.size and idx.max() >= weight.shape[0]):
        raise ShapeError("embedding index out of range")

    def vjp(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, idx, g)
        return (gw,)

    return _wrap(weight.data[idx], (weight,), vjp, "embedding")


def sinusoidal_encoding(positions, dim: int, base: float = 10000.0) -> Tensor:
    """Constant sin/cos position code; positions may be a count or an array."""
    if dim % 2 != 0:
        raise ShapeError("sinusoidal encoding dim must be even")
    if isinstance(positions, int):
        positions = np.arange(positions)
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = pos * freqs
    enc = np.empty((pos.shape[0], dim), dtype=_default_dtype)
    enc[:, 0::2] = np.sin(ang)
    enc[:, 1::2] = np.cos(ang)
    return _wrap(enc, (), None, "sinusoidal_encoding")


def attention(q: Tensor, k: Tensor, v: Tensor, additive_mask=None, scale=None) -> Tensor:
    """Scaled dot-product attention over the last two axes; built from
    primitives so gradients need no dedicated rule."""
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise ShapeError(f"attention: query dim {dk} != key dim {k.shape[-1]}")
    if scale is None:
        scale = 1.0 / math.sqrt(dk)
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = mul(matmul(q, kt), scale)
    if additive_mask is not None:
        scores = add(scores, _as_tensor(additive_mask, ref=scores))
    return matmul(softmax(scores, axis=-1), v)


def grad_check(fn, point, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar `fn` and a
    central finite difference, over all coordinates of `point`. Run this in
    float64 mode; float32 cannot meet the verification tolerances."""
    if not 1e-6 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-6, 1e-3]")
    base = np.array(point.data if isinstance(point, Tensor) else point,
                    dtype=_default_dtype)

    x = Tensor(base, requires_grad=True)
    out = fn(x)
    if out.size != 1:
        raise ShapeError("grad_check target must be scalar-valued")
    out.backward()
    analytic = x.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        with no_grad():
            hi = fn(Tensor((flat + bump).reshape(base.shape))).item()
            lo = fn(Tensor((flat - bump).reshape(base.shape))).item()
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NonFiniteError("non-finite value at perturbed point")
        numeric[i] = (hi - lo) / (2.0 * step)

    denom = np.abs(analytic) + np.abs(numeric) + 1e-12
    return float(np.max(np.abs(analytic - numeric) / denom))
