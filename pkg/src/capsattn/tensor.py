"""Dense tensors with define-by-run reverse-mode differentiation.

Every operation that touches a tensor with ``requires_grad=True`` records a
node (its inputs plus a backward closure). Node ids come from a global
monotone counter, so sorting the nodes reachable from a loss by id yields a
valid topological order; that sorted set is the tape for that loss.

Storage defaults to float32. Reductions accumulate in float64.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "tensor",
    "parameter",
    "no_grad",
    "precision",
    "get_default_dtype",
    "corrupt_backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "einsum",
    "elementwise",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "sqrt",
    "softmax",
    "conv2d",
    "max_pool2d",
    "reduce",
    "sum",
    "mean",
    "amax",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "flip",
    "broadcast_to",
    "index",
    "detach",
    "backward",
    "zero_grad",
    "finite_diff_grad",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextmanager
def no_grad():
    """Disable tape recording on this thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def precision(dtype):
    """Set the dtype used for newly created tensors on this thread."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = prev


# Test hook: names of ops whose backward output gets scaled by 1.5.
_faults: set[str] = set()


@contextmanager
def corrupt_backward(op: str):
    """Deliberately break the backward rule of ``op`` (negative-control hook)."""
    _faults.add(op)
    try:
        yield
    finally:
        _faults.discard(op)


class Tensor:
    """An n-dimensional array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "node_id", "_grad", "_inputs", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_default_dtype(), copy=True)
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self._grad = None
        self._inputs: tuple[Tensor, ...] | None = None
        self._backward = None
        self._op = "leaf"

    # construction from an op result; bypasses the dtype cast
    @classmethod
    def _result(cls, data: np.ndarray, inputs: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out._grad = None
        out._op = op
        if _grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.node_id = next(_ids)
            out._inputs = tuple(inputs)
            out._backward = backward
        else:
            out.requires_grad = False
            out.node_id = None
            out._inputs = None
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._inputs is None

    @property
    def grad(self) -> np.ndarray | None:
        if self._grad is None and self.requires_grad and self.is_leaf:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731

    def __getitem__(self, key):
        return index(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    """Same values, no tape connection."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.node_id = None
    out._grad = None
    out._inputs = None
    out._backward = None
    out._op = "leaf"
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    if isinstance(x, Tensor):
        return x.ndim == 0
    return np.ndim(x) == 0


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    # only the scalar case can reach here
    return np.asarray(g.sum(dtype=np.float64), dtype=g.dtype).reshape(shape)


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ (only scalar broadcasting is allowed)")


def _scalar_operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return detach(Tensor(x, dtype=like.dtype))


def _prepare(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{name}: at least one operand must be a Tensor")
    if not isinstance(a, Tensor):
        if not _is_scalar(a):
            raise DimensionError(f"{name}: non-tensor operand must be a scalar")
        a = _scalar_operand(a, b)
    if not isinstance(b, Tensor):
        if not _is_scalar(b):
            raise DimensionError(f"{name}: non-tensor operand must be a scalar")
        b = _scalar_operand(b, a)
    _binary_shapes(a, b, name)
    return a, b


def add(a, b) -> Tensor:
    a, b = _prepare(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _prepare(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _prepare(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _prepare(a, b, "div")

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return Tensor._result(a.data / b.data, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,), "neg")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product ``[m,k] @ [k,n] -> [m,n]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def _parse_einsum(spec: str):
    spec = spec.replace(" ", "")
    if "->" not in spec or "." in spec:
        raise ContractError(f"einsum: explicit two-operand form without ellipsis required, got {spec!r}")
    lhs, out = spec.split("->")
    parts = lhs.split(",")
    if len(parts) != 2:
        raise ContractError(f"einsum: exactly two operands required, got {spec!r}")
    sa, sb = parts
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ContractError(f"einsum: repeated index within one operand in {spec!r}")
    for s, other in ((sa, sb), (sb, sa)):
        for ch in s:
            if ch not in other and ch not in out:
                raise ContractError(f"einsum: index {ch!r} is summed within a single operand in {spec!r}")
    for ch in out:
        if ch not in sa and ch not in sb:
            raise ContractError(f"einsum: output index {ch!r} appears in no operand")
    return sa, sb, out


def _contract(sa: str, sb: str, out: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Evaluate a validated bilinear einsum as one batched matmul."""
    batch = [c for c in out if c in sa and c in sb]
    keep_a = [c for c in out if c in sa and c not in sb]
    keep_b = [c for c in out if c in sb and c not in sa]
    summed = [c for c in sa if c in sb and c not in out]
    size = dict(zip(sa, a.shape))
    size.update(zip(sb, b.shape))
    prod = lambda idx: int(np.prod([size[c] for c in idx], dtype=np.int64))  # noqa: E731
    at = a.transpose([sa.index(c) for c in batch + keep_a + summed]).reshape(prod(batch), prod(keep_a), prod(summed))
    bt = b.transpose([sb.index(c) for c in batch + summed + keep_b]).reshape(prod(batch), prod(summed), prod(keep_b))
    r = np.matmul(at, bt).reshape([size[c] for c in batch + keep_a + keep_b])
    order = batch + keep_a + keep_b
    return np.ascontiguousarray(r.transpose([order.index(c) for c in out]))


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Bilinear contraction of two tensors, e.g. ``einsum("ij,jk->ik", a, b)``.

    Every index of one operand must appear in the other operand or the
    output; this keeps both gradients expressible as einsums of the same kind.
    """
    sa, sb, out = _parse_einsum(spec)
    for s, t in ((sa, a), (sb, b)):
        if len(s) != t.ndim:
            raise DimensionError(f"einsum {spec!r}: operand has shape {t.shape}, expected rank {len(s)}")
    sizes: dict[str, int] = {}
    for s, t in ((sa, a), (sb, b)):
        for ch, n in zip(s, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum {spec!r}: size mismatch on index {ch!r} between {a.shape} and {b.shape}")

    def bw(g):
        ga = _contract(out, sb, sa, g, b.data) if a.requires_grad else None
        gb = _contract(out, sa, sb, g, a.data) if b.requires_grad else None
        return ga, gb

    return Tensor._result(_contract(sa, sb, out, a.data, b.data), (a, b), bw, "einsum")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN so a poisoned input still surfaces in the loss
    return Tensor._result(np.maximum(x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return Tensor._result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    """Square root whose derivative at exactly zero is taken as zero."""
    y = np.sqrt(x.data)

    def bw(g):
        safe = np.where(y > 0, y, 1)
        return (np.where(y > 0, g / (2 * safe), 0).astype(g.dtype),)

    return Tensor._result(y, (x,), bw, "sqrt")


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "linear": lambda x: x,
}


def elementwise(x: Tensor, f: str) -> Tensor:
    try:
        return _ACTIVATIONS[f](x)
    except KeyError:
        raise ContractError(f"unknown elementwise function {f!r}") from None


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction, float64 normaliser)."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z.astype(np.float64))
    y = (e / e.sum(axis=axis, keepdims=True)).astype(x.dtype)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True, dtype=np.float64).astype(g.dtype)
        return (y * (g - inner),)

    return Tensor._result(y, (x,), bw, "softmax")


def conv2d(x: Tensor, kernel: Tensor, padding: str = "valid") -> Tensor:
    """Valid cross-correlation over the trailing ``[H, W, Cin]`` axes.

    ``x`` may carry any number of leading batch axes; ``kernel`` is
    ``[kh, kw, Cin, Cout]``.
    """
    if padding != "valid":
        raise ContractError("conv2d: only valid padding is supported")
    if x.ndim < 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    kh, kw, cin, cout = kernel.shape
    *lead, H, W, C = x.shape
    if C != cin:
        raise DimensionError(f"conv2d: input channels {C} != kernel channels {cin} ({x.shape} vs {kernel.shape})")
    if kh > H or kw > W:
        raise DimensionError(f"conv2d: kernel {kernel.shape[:2]} larger than input {(H, W)}")
    ho, wo = H - kh + 1, W - kw + 1
    n = int(np.prod(lead, dtype=np.int64))
    xs = x.data.reshape(n, H, W, C)
    if kh == 1 and kw == 1:
        cols = xs.reshape(n * ho * wo, C)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xs, (kh, kw), axis=(1, 2))  # n,ho,wo,C,kh,kw
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * C)
    kmat = kernel.data.reshape(kh * kw * C, cout)
    out = (cols @ kmat).reshape(*lead, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(n * ho * wo, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ kmat.T).reshape(n, ho, wo, kh, kw, C)
            gx = np.zeros((n, H, W, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + ho, j:j + wo, :] += gcols[:, :, :, i, j, :]
            gx = gx.reshape(x.shape)
        return gx, gk

    return Tensor._result(out, (x, kernel), bw, "conv2d")


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Valid max pooling over the trailing ``[H, W, C]`` axes."""
    stride = stride or window
    *lead, H, W, C = x.shape
    if window > H or window > W:
        raise DimensionError(f"max_pool2d: window {window} larger than input {(H, W)}")
    ho, wo = (H - window) // stride + 1, (W - window) // stride + 1
    n = int(np.prod(lead, dtype=np.int64))
    xs = x.data.reshape(n, H, W, C)
    win = np.lib.stride_tricks.sliding_window_view(xs, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo].reshape(n, ho, wo, C, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        g4 = g.reshape(n, ho, wo, C)
        gx = np.zeros((n, H, W, C), dtype=g.dtype)
        for i in range(window):
            for j in range(window):
                hit = arg == i * window + j
                gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += np.where(hit, g4, 0)
        return (gx.reshape(x.shape),)

    return Tensor._result(np.ascontiguousarray(out).reshape(*lead, ho, wo, C), (x,), bw, "max_pool2d")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    y = np.asarray(x.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        return (np.array(_expand_back(g, x.shape, axes, keepdims)),)

    return Tensor._result(y, (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes], dtype=np.int64))
    y = np.asarray(x.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64), dtype=x.dtype)

    def bw(g):
        return (np.array(_expand_back(g, x.shape, axes, keepdims)) / count,)

    return Tensor._result(y, (x,), bw, "mean")


def amax(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum; ties share the incoming gradient equally."""
    axes = _norm_axes(axis, x.ndim)
    yk = x.data.max(axis=axes, keepdims=True)
    mask = x.data == yk
    share = mask / mask.sum(axis=axes, keepdims=True)
    y = yk if keepdims else np.squeeze(yk, axis=axes)

    def bw(g):
        return ((_expand_back(g, x.shape, axes, keepdims) * share).astype(g.dtype),)

    return Tensor._result(np.asarray(y), (x,), bw, "max")


_REDUCERS = {"sum": sum, "mean": mean, "max": amax}


def reduce(x: Tensor, op: str, axis=None, keepdims: bool = False) -> Tensor:
    if op not in _REDUCERS:
        raise ContractError(f"reduce: unknown op {op!r}")
    return _REDUCERS[op](x, axis, keepdims)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 in shape:
        known = int(np.prod([s for s in shape if s != -1], dtype=np.int64))
        if shape.count(-1) > 1 or known == 0 or x.size % known:
            raise DimensionError(f"reshape: cannot infer {shape} from {x.shape}")
        shape = tuple(x.size // known if s == -1 else s for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"reshape: {x.shape} has {x.size} elements, {shape} needs {int(np.prod(shape))}")
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))
    return Tensor._result(y, (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise DimensionError("concat: empty input list")
    ax = axis % xs[0].ndim
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in xs], axis=ax), tuple(xs), bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if any(t.shape != xs[0].shape for t in xs):
        raise DimensionError(f"stack: shapes differ: {[t.shape for t in xs]}")
    ax = axis % (xs[0].ndim + 1)

    def bw(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(xs)))

    return Tensor._result(np.stack([t.data for t in xs], axis=ax), tuple(xs), bw, "stack")


def flip(x: Tensor, axis: int) -> Tensor:
    return Tensor._result(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis).copy(),), "flip")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast (size-1 axes only, same rank); gradient sums back."""
    shape = tuple(shape)
    if x.ndim != len(shape) or any(s != t and s != 1 for s, t in zip(x.shape, shape)):
        raise DimensionError(f"broadcast_to: cannot broadcast {x.shape} to {shape}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)

    def bw(g):
        return (g.sum(axis=axes, keepdims=True, dtype=np.float64).astype(g.dtype),)

    return Tensor._result(np.ascontiguousarray(np.broadcast_to(x.data, shape)), (x,), bw, "broadcast_to")


def _is_advanced(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in parts)


def index(x: Tensor, key) -> Tensor:
    """numpy-style indexing (basic or advanced) with scatter-add backward."""
    y = np.array(x.data[key], copy=True)
    advanced = _is_advanced(key)

    def bw(g):
        gx = np.zeros_like(x.data, dtype=g.dtype)
        if advanced:
            np.add.at(gx, key, g)
        else:
            gx[key] += g
        return (gx,)

    return Tensor._result(y, (x,), bw, "index")


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p._grad = None


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Leaves passed in ``leaves`` that the loss does not depend on receive an
    explicit zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any tensor requiring grad (empty tape)")

    nodes: dict[int, Tensor] = {}
    todo = [loss]
    while todo:
        t = todo.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        if t._inputs:
            todo.extend(i for i in t._inputs if i.requires_grad and i.node_id not in nodes)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._inputs is None:
            t._grad = g.copy() if t._grad is None else t._grad + g
            continue
        in_grads = t._backward(g)
        scale = 1.5 if t._op in _faults else None
        for inp, ig in zip(t._inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise AssertionError(f"{t._op}: gradient shape {ig.shape} != input shape {inp.shape}")
            if scale is not None:
                ig = ig * scale
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = ig if prev is None else prev + ig

    for leaf in leaves or ():
        if leaf._grad is None:
            leaf._grad = np.zeros_like(leaf.data)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, step: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 result).

    ``x`` is temporarily promoted to float64 so the perturbed evaluations run
    in double precision wherever they depend on ``x``; its original values
    are restored afterwards.
    """
    if step <= 0:
        raise ContractError("finite_diff_grad: step must be positive")
    orig = x.data
    base = orig.astype(np.float64)
    flat = base.reshape(-1)
    out = np.zeros(flat.size, dtype=np.float64)

    def value():
        with no_grad():
            r = f(x)
        return float(np.asarray(r.data if isinstance(r, Tensor) else r, dtype=np.float64).reshape(-1)[0])

    try:
        for i in range(flat.size):
            v0 = flat[i]
            flat[i] = v0 + step
            x.data = base
            fp = value()
            flat[i] = v0 - step
            x.data = base
            fm = value()
            flat[i] = v0
            out[i] = (fp - fm) / (2 * step)
    finally:
        x.data = orig
    return out.reshape(orig.shape)
