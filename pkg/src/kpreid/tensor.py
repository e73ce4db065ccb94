"""Minimal numpy-backed tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in execution order; :func:`backward` replays them in reverse.
Outside a tape every op is a plain numpy computation, which is what inference
uses.

Broadcasting is deliberately limited to adding a 1-D bias over the trailing
axis. Any other shape disagreement raises :class:`DimensionError`.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EvaluationError

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.is_leaf = True
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.is_leaf = True
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("tensor/tensor division is not supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of the differentiable operations run inside its context."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def _register_leaf(self, t: Tensor) -> None:
        if id(t) not in self._leaves:
            self._leaves[id(t)] = t
            t.grad = np.zeros_like(t.data)

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        for t in inputs:
            if t.requires_grad and t.is_leaf:
                self._register_leaf(t)
        out.requires_grad = True
        out.is_leaf = False
        self.nodes.append(_Node(op, tuple(inputs), out, backward))


def apply_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
             backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` and record ``backward`` on the active tape if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor._wrap(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, backward)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Propagate d(loss)/d(leaf) through ``tape``.

    Every leaf seen on the tape gets its ``.grad`` buffer filled. If ``params``
    is given, their gradients are returned in order, with zeros for tensors
    that never took part in the computation.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in tape.leaves:
        leaf.grad = np.zeros_like(leaf.data)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if params is None:
        return [leaf.grad for leaf in tape.leaves]
    out = []
    for p in params:
        if id(p) in tape._leaves:
            out.append(p.grad)
        else:
            p.grad = np.zeros_like(p.data)
            out.append(p.grad)
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _is_trailing_bias(a: Tensor, b: Tensor) -> bool:
    return b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0] and a.ndim > 1


def _sum_to_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if _is_trailing_bias(a, b):
        return apply_op("add_bias", a.data + b.data, (a, b), lambda g: (g, _sum_to_bias(g)))
    _check_same(a, b, "add")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if _is_trailing_bias(a, b):
        return apply_op("sub_bias", a.data - b.data, (a, b), lambda g: (g, -_sum_to_bias(g)))
    _check_same(a, b, "sub")
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a 2-D weight applied to every row of ``a``; otherwise both
    operands must share their leading (batch) extents exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, n = bd.shape

        def bw(g):
            return g @ bd.T, ad.reshape(-1, k).T @ g.reshape(-1, n)

        return apply_op("matmul", ad @ bd, (a, b), bw)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")

    def bw_batched(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return apply_op("bmm", ad @ bd, (a, b), bw_batched)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return apply_op("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return apply_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, bw)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[key]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] += g
        return (full,)

    return apply_op("index", np.array(out, copy=True), (a,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows ``a[idx]`` along axis 0; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return apply_op("take_rows", a.data[idx], (a,), bw)


def expand(a: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis (e.g. one per batch item)."""
    out = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return apply_op("expand", out, (a,), lambda g: (g.sum(axis=0),))


def astype(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    return apply_op("astype", a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at zero is zero."""
    ad = a.data
    out = np.sqrt(np.sum(ad * ad, axis=-1))

    def bw(g):
        safe = np.where(out > 0, out, 1)
        return (np.where((out > 0)[..., None], ad * (g / safe)[..., None], 0).astype(ad.dtype),)

    return apply_op("row_norm", out, (a,), bw)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return apply_op("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op("sin", np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return apply_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    half = x.dtype.type(0.5)
    inner = c * (x + k * x * x * x)
    t = np.tanh(inner)
    out = half * x * (1 + t)

    def bw(g):
        dinner = c * (1 + 3 * k * x * x)
        return (g * (half * (1 + t) + half * x * (1 - t * t) * dinner),)

    return apply_op("gelu", out, (a,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return apply_op("softmax", y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match width {d}")
    xd = x.data
    eps = xd.dtype.type(eps)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    gd = gain.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_bias(g * xhat) if xd.ndim > 1 else g * xhat, _sum_to_bias(g) if xd.ndim > 1 else g

    return apply_op("layer_norm", out, (x, gain, bias), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise division by max(||row||, eps)."""
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    denom = np.maximum(norm, xd.dtype.type(eps))
    y = xd / denom
    live = norm > eps

    def bw(g):
        proj = np.sum(g * y, axis=-1, keepdims=True)
        return (np.where(live, (g - y * proj) / denom, g / denom),)

    return apply_op("l2_normalize", y, (x,), bw)


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0, floor: float = 1e-7) -> float:
    """Worst relative error between tape gradients and central differences.

    ``f`` must rebuild its scalar output from the current values of ``params``
    each call. ``max_coords`` caps the coordinates probed per tensor (chosen
    with a seeded generator); by default every coordinate is checked.

    The error for one coordinate is ``|a - n| / max(|a|, |n|, floor)``. The
    floor keeps gradients that are exactly zero (the attention key bias is
    one: softmax ignores a shift shared by all keys) from being judged on the
    ~1e-11 round-off of the difference quotient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    with Tape() as tape:
        loss = f()
    _require_finite(loss)
    analytic = [g.copy() for g in backward(tape, loss, params)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = _require_finite(f())
            flat[i] = orig - h
            fm = _require_finite(f())
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            a = float(gflat[i])
            denom = max(abs(a), abs(numeric), floor)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def _require_finite(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(()))
    if not math.isfinite(v):
        raise EvaluationError(f"function returned non-finite value {v}")
    return v
