"""Small dense-tensor engine with reverse-mode differentiation.

Every op runs eagerly on float64 numpy arrays. When a :class:`Graph` is
active (``with Graph() as g:``) each op appends a record holding a
vector-Jacobian closure; :func:`backward` replays those records in reverse
insertion order. Outside a graph nothing is recorded, which is how
inference runs.

Shapes are strict: binary elementwise ops need identical shapes, the only
implicit broadcast is scalar-with-tensor. Row biases go through
:func:`add_bias` and time repetition through :func:`repeat_time`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "backward", "grad_check",
    "matmul", "transpose", "add", "sub", "mul", "add_bias", "elementwise",
    "sigmoid", "tanh", "relu", "log1p", "absolute", "huber",
    "concat", "gather", "repeat_time", "unfold", "select_time", "slice_last", "reshape",
    "sum_all", "max_over_time", "lstm_scan",
    "DimensionError", "DomainError", "EmptySequenceError", "ContractError",
    "DeterminismError", "NonFiniteError",
]


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EmptySequenceError(ValueError):
    pass


class ContractError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ids = itertools.count()


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("value", "grad", "requires_grad", "name", "node_id")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.array(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

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

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Graph:
    """Ordered op records. Insertion order is a topological order."""

    records: list[_Record] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)


_active: list[Graph] = []


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{kind} produced non-finite values")
    result = Tensor.__new__(Tensor)
    result.value = np.asarray(out, dtype=np.float64)
    result.grad = None
    result.requires_grad = False
    result.name = None
    result.node_id = next(_ids)
    if _active and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        _active[-1].records.append(_Record(kind, tuple(inputs), result, vjp))
    return result


def backward(graph: Graph, loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Reverse accumulation from a scalar ``loss``.

    Sets ``.grad`` on every tensor in ``params`` (default: all leaves that
    require grad and appear in the graph); unreachable ones get zeros.
    Returns the gradients in ``params`` order.
    """
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for rec in reversed(graph.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for inp, g_in in zip(rec.inputs, rec.vjp(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in
    if params is None:
        produced = {id(r.output) for r in graph.records}
        seen: dict[int, Tensor] = {}
        for r in graph.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        params = list(seen.values())
    out = []
    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
        out.append(p.grad)
    return out


# ----------------------------------------------------------------- linear algebra


_ROWS = 32


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # OpenBLAS picks kernels by matrix shape, so a row's rounding can depend
    # on how many other rows share the call; fixed-shape row blocks make
    # every row's result independent of batch size and padding
    m = a.shape[0]
    if m == _ROWS:
        return a @ b
    pad = (-m) % _ROWS
    if pad:
        a = np.concatenate([a, np.zeros((pad, a.shape[1]))])
    out = np.concatenate([a[i:i + _ROWS] @ b for i in range(0, a.shape[0], _ROWS)])
    return out[:m]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., k] @ b[k, n]``; leading axes of ``a`` are treated as rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    lead = a.shape[:-1]
    a2 = a.value.reshape(-1, a.shape[-1])
    out = _mm(a2, b.value).reshape(*lead, b.shape[1])

    def vjp(g):
        g2 = g.reshape(-1, b.shape[1])
        da = _mm(g2, b.value.T).reshape(a.shape) if a.requires_grad else None
        db = a2.T @ g2 if b.requires_grad else None
        return da, db

    return _emit("matmul", (a, b), out, vjp)


def transpose(a: Tensor) -> Tensor:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.shape}")
    return _emit("transpose", (a,), a.value.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.value.reshape(shape)
    return _emit("reshape", (a,), out.copy(), lambda g: (g.reshape(a.shape),))


# ----------------------------------------------------------------- elementwise


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.value.ndim and b.value.ndim:
        raise DimensionError(f"{kind} needs identical shapes: {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    return np.asarray(g.sum()).reshape(t.shape) if t.value.ndim == 0 and g.ndim else g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit("add", (a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", (a, b), a.value - b.value,
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return _emit("mul", (a, b), a.value * b.value,
                 lambda g: (_unbroadcast(g * b.value, a), _unbroadcast(g * a.value, b)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b[n]`` to every row of ``x[..., n]``."""
    if b.value.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    return _emit("add_bias", (x, b), x.value + b.value,
                 lambda g: (g, g.reshape(-1, b.shape[0]).sum(axis=0)))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.value)
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.value)
    return _emit("tanh", (x,), t, lambda g: (g * (1.0 - t * t),))


def relu(x: Tensor) -> Tensor:
    on = x.value > 0
    return _emit("relu", (x,), np.where(on, x.value, 0.0), lambda g: (g * on,))


def log1p(x: Tensor) -> Tensor:
    if np.any(x.value < 0):
        raise DomainError("log1p input must be nonnegative")
    return _emit("log1p", (x,), np.log1p(x.value), lambda g: (g / (1.0 + x.value),))


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0."""
    return _emit("abs", (x,), np.abs(x.value), lambda g: (g * np.sign(x.value),))


def huber(x: Tensor, a: float = 1.0) -> Tensor:
    """Elementwise Huber on nonnegative input: 0.5x^2 below ``a``, linear above."""
    v = x.value
    if np.any(v < 0):
        raise DomainError("huber expects nonnegative input")
    quad = v < a
    out = np.where(quad, 0.5 * v * v, a * (v - 0.5 * a))
    return _emit("huber", (x,), out, lambda g: (g * np.where(quad, v, a),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "log1p": log1p, "abs": absolute}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *args) -> Tensor:
    if kind in _UNARY:
        (x,) = args
        return _UNARY[kind](_as_tensor(x))
    if kind in _BINARY:
        return _BINARY[kind](*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = [t.value for t in tensors]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return np.split(g, cuts, axis=axis)

    return _emit("concat", tuple(tensors), out, vjp)


def gather(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back into the rows."""
    idx = np.asarray(index, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"row index out of range for table of {n} rows")

    def vjp(g):
        dt = np.zeros_like(table.value)
        np.add.at(dt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _emit("gather", (table,), table.value[idx], vjp)


def repeat_time(x: Tensor, steps: int) -> Tensor:
    """``x[B, d]`` -> ``[B, steps, d]``."""
    out = np.repeat(x.value[:, None, :], steps, axis=1)
    return _emit("repeat_time", (x,), out, lambda g: (g.sum(axis=1),))


def unfold(x: Tensor, width: int) -> Tensor:
    """Sliding windows ``x[B, T, D]`` -> ``[B, T-width+1, width*D]``."""
    bsz, steps, dim = x.shape
    n_win = steps - width + 1
    if n_win < 1:
        raise DimensionError(f"sequence of length {steps} shorter than window {width}")
    out = np.concatenate([x.value[:, o:o + n_win, :] for o in range(width)], axis=2)

    def vjp(g):
        dx = np.zeros_like(x.value)
        for o in range(width):
            dx[:, o:o + n_win, :] += g[:, :, o * dim:(o + 1) * dim]
        return (dx,)

    return _emit("unfold", (x,), out, vjp)


def select_time(x: Tensor, t: int) -> Tensor:
    """``x[:, t, :]``."""
    def vjp(g):
        dx = np.zeros_like(x.value)
        dx[:, t, :] = g
        return (dx,)

    return _emit("select_time", (x,), x.value[:, t, :].copy(), vjp)


def slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    """``x[..., lo:hi]``."""
    def vjp(g):
        dx = np.zeros_like(x.value)
        dx[..., lo:hi] = g
        return (dx,)

    return _emit("slice", (x,), x.value[..., lo:hi].copy(), vjp)


def sum_all(x: Tensor) -> Tensor:
    return _emit("sum", (x,), np.asarray(x.value.sum()), lambda g: (np.full(x.shape, float(g)),))


def max_over_time(x: Tensor, mask=None) -> Tensor:
    """Per-channel max over unmasked time steps.

    Accepts ``[T, d]`` with mask ``[T]`` or ``[B, T, d]`` with mask ``[B, T]``.
    The gradient goes to the first maximal row of each channel.
    """
    v = x.value
    squeeze = v.ndim == 2
    if squeeze:
        v = v[None]
    m = np.ones(v.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(v.shape[:2])
    if not m.any(axis=1).all():
        raise EmptySequenceError("max_over_time over a fully masked sequence")
    filled = np.where(m[:, :, None], v, -np.inf)
    arg = filled.argmax(axis=1)
    out = np.take_along_axis(v, arg[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        g3 = g[None] if squeeze else g
        dx = np.zeros_like(v)
        np.put_along_axis(dx, arg[:, None, :], g3[:, None, :], axis=1)
        return (dx[0] if squeeze else dx,)

    return _emit("max_over_time", (x,), out[0] if squeeze else out, vjp)


# ----------------------------------------------------------------- recurrence


def lstm_scan(x: Tensor, mask, w_in: Tensor, w_rec: Tensor, bias: Tensor, reverse: bool = False) -> Tensor:
    """One-direction LSTM over ``x[B, T, d_in]``, zero initial state.

    Gate layout in the packed ``4d`` axis is (input, forget, candidate,
    output). At masked steps the state is carried unchanged, so the output
    at a padded position repeats the last real state of its scan direction.
    Returns hidden states ``[B, T, d]``.
    """
    bsz, steps, d_in = x.shape
    hid = w_rec.shape[0]
    if w_in.shape != (d_in, 4 * hid) or w_rec.shape != (hid, 4 * hid) or bias.shape != (4 * hid,):
        raise DimensionError(
            f"lstm params {w_in.shape}, {w_rec.shape}, {bias.shape} do not fit input {x.shape}")
    m = np.ones((bsz, steps), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    proj = (_mm(x.value.reshape(-1, d_in), w_in.value) + bias.value).reshape(bsz, steps, 4 * hid)
    order = range(steps - 1, -1, -1) if reverse else range(steps)

    h = np.zeros((bsz, hid))
    c = np.zeros((bsz, hid))
    out = np.empty((bsz, steps, hid))
    cache = []
    for t in order:
        z = proj[:, t] + _mm(h, w_rec.value)
        s = _sigmoid(z)
        i, f, o = s[:, :hid], s[:, hid:2 * hid], s[:, 3 * hid:]
        g = np.tanh(z[:, 2 * hid:3 * hid])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t:t + 1]
        cache.append((t, h, c, i, f, g, o, tc, mt))
        h = np.where(mt, h_new, h)
        c = np.where(mt, c_new, c)
        out[:, t] = h

    def vjp(dout):
        dproj = np.zeros_like(proj)
        dw_rec = np.zeros_like(w_rec.value)
        dh = np.zeros((bsz, hid))
        dc = np.zeros((bsz, hid))
        for t, h_prev, c_prev, i, f, g, o, tc, mt in reversed(cache):
            dh = dh + dout[:, t]
            dc_new = dc + dh * o * (1.0 - tc * tc)
            dz = np.concatenate([
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dc_new * i * (1.0 - g * g),
                dh * tc * o * (1.0 - o),
            ], axis=1) * mt
            dproj[:, t] = dz
            dw_rec += h_prev.T @ dz
            dh = np.where(mt, _mm(dz, w_rec.value.T), dh)
            dc = np.where(mt, dc_new * f, dc)
        flat = dproj.reshape(-1, 4 * hid)
        dx = _mm(flat, w_in.value.T).reshape(x.shape) if x.requires_grad else None
        dw_in = x.value.reshape(-1, d_in).T @ flat
        return dx, dw_in, dw_rec, flat.sum(axis=0)

    return _emit("lstm_scan", (x, w_in, w_rec, bias), out, vjp)


# ----------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values each
    call. Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = f().value.copy()
    with Graph() as g:
        loss = f()
    if not np.array_equal(base, loss.value):
        raise DeterminismError("f returned different values on identical parameters")
    analytic = [a.copy() for a in backward(g, loss, params)]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a.reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + eps
            up = f().item()
            flat[j] = keep - eps
            down = f().item()
            flat[j] = keep
            num = (up - down) / (2.0 * eps)
            err = abs(a_flat[j] - num) / max(1e-8, abs(a_flat[j]) + abs(num))
            worst = max(worst, err)
    return worst
