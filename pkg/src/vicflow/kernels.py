"""Dense numeric kernels with reverse-mode gradients.

Everything downstream (attention, matcher, losses) is assembled from the
operations in this module, so each kernel carries an analytic vector-Jacobian
product that is verified against central finite differences by
``check_gradient``. All arithmetic is float64; gradient checks at the 1e-6
level are not meaningful in single precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "GradCheckReport",
    "as_tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "clamp",
    "softmax_rows",
    "layer_norm",
    "global_avg_pool",
    "sum_axis",
    "mean_axis",
    "sum_all",
    "mean_all",
    "concat",
    "reshape",
    "transpose",
    "slice_axis",
    "gather_pairs",
    "position_embed",
    "check_gradient",
]

_SQRT_FLOOR = 1e-30  # below this the sqrt vjp is defined as 0 (subgradient choice)


class Tensor:
    """A float64 array, optionally attached to a :class:`GradTape`.

    Tensors without a tape behave as plain values: operations on them
    evaluate eagerly and record nothing, which is the inference fast path.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data, tape: "GradTape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        if tape is not None:
            tape._tensors.append(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        taped = " taped" if self.tape is not None else ""
        return f"Tensor(shape={self.data.shape}{taped})"

    # operator sugar; all routed through the module-level kernels
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    forward: Callable[..., np.ndarray]
    vjp: Callable[[np.ndarray], tuple]


class GradTape:
    """Ordered record of operations for reverse-mode differentiation.

    The record order is the execution order, which is already a valid
    topological order, so ``backward`` is a single reverse sweep. A tape is
    single-owner: do not share one across threads.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._tensors: list[Tensor] = []

    def leaf(self, data) -> Tensor:
        """Create a watched input tensor whose gradient will be populated."""
        return Tensor(data, tape=self)

    def _record(self, out, inputs, forward, vjp) -> None:
        self._records.append(_Record(out, inputs, forward, vjp))

    def backward(self, out: Tensor) -> None:
        """Accumulate gradients of a scalar ``out`` into every taped tensor."""
        if out.tape is not self:
            raise ValueError("tape-mismatch: output does not belong to this tape")
        if out.size != 1:
            raise ValueError("backward requires a scalar output")
        for t in self._tensors:
            t.grad = None
        out.grad = np.ones_like(out.data)
        for rec in reversed(self._records):
            if rec.out.grad is None:
                continue
            grads = rec.vjp(rec.out.grad)
            for t, g in zip(rec.inputs, grads):
                if g is None or t.tape is not self:
                    continue
                t.grad = g if t.grad is None else t.grad + g

    def replay(self) -> None:
        """Re-run every recorded forward in order, refreshing outputs in place."""
        for rec in self._records:
            rec.out.data = rec.forward(*[t.data for t in rec.inputs])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_tape(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("tape-mismatch: operands recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _make(forward, vjp_factory, *inputs) -> Tensor:
    """Evaluate ``forward`` and, if any input is taped, record the op."""
    tensors = tuple(as_tensor(x) for x in inputs)
    datas = tuple(t.data for t in tensors)
    out_data = forward(*datas)
    tape = _result_tape(*tensors)
    out = Tensor(out_data, tape=tape)
    if tape is not None:
        vjp = vjp_factory(out_data, *datas)
        tape._record(out, tensors, forward, vjp)
    return out


# ---------------------------------------------------------------------------
# elementary kernels


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape-mismatch: matmul {a.shape} @ {b.shape}")

    def fwd(x, y):
        return x @ y

    def vjps(out_data, x, y):
        return lambda g: (g @ y.T, x.T @ g)

    return _make(fwd, vjps, a, b)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjps(out_data, x, y):
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))

    return _make(np.add, vjps, a, b)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjps(out_data, x, y):
        return lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))

    return _make(np.subtract, vjps, a, b)


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)

    def vjps(out_data, x, y):
        return lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))

    return _make(np.multiply, vjps, a, b)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjps(out_data, x, y):
        return lambda g: (
            _unbroadcast(g / y, x.shape),
            _unbroadcast(-g * x / (y * y), y.shape),
        )

    return _make(np.divide, vjps, a, b)


def neg(a) -> Tensor:
    return _make(np.negative, lambda o, x: lambda g: (-g,), as_tensor(a))


def relu(a) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (g * (x > 0.0),)

    return _make(lambda x: np.maximum(x, 0.0), vjps, as_tensor(a))


def sigmoid(a) -> Tensor:
    def fwd(x):
        # stable in both tails
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def vjps(out_data, x):
        return lambda g: (g * out_data * (1.0 - out_data),)

    return _make(fwd, vjps, as_tensor(a))


def tanh(a) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (g * (1.0 - out_data * out_data),)

    return _make(np.tanh, vjps, as_tensor(a))


def exp(a) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (g * out_data,)

    return _make(np.exp, vjps, as_tensor(a))


def log(a) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (g / x,)

    return _make(np.log, vjps, as_tensor(a))


def sqrt(a) -> Tensor:
    """Square root whose vjp is 0 at (numerically) zero inputs.

    The zero-input subgradient keeps norms of identically-zero displacement
    vectors differentiable: their value cannot change under any parameter
    perturbation, so a zero gradient is the consistent choice.
    """

    def vjps(out_data, x):
        def vjp(g):
            safe = np.where(x > _SQRT_FLOOR, out_data, np.inf)
            return (g * 0.5 / safe,)

        return vjp

    return _make(np.sqrt, vjps, as_tensor(a))


def clamp(a, lo: float, hi: float) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (g * ((x >= lo) & (x <= hi)),)

    return _make(lambda x: np.clip(x, lo, hi), vjps, as_tensor(a))


def softmax_rows(a) -> Tensor:
    """Row-wise softmax over the last axis (numerically stable)."""
    a = as_tensor(a)
    if a.ndim < 1:
        raise ValueError("shape-mismatch: softmax_rows needs at least 1 axis")

    def fwd(x):
        if x.shape[-1] == 0:
            return np.zeros_like(x)
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def vjps(out_data, x):
        def vjp(g):
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            return ((g - dot) * out_data,)

        return vjp

    return _make(fwd, vjps, a)


def layer_norm(a, eps: float = 1e-8) -> Tensor:
    """Normalize each row (last axis) to zero mean and unit variance."""
    a = as_tensor(a)

    def fwd(x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + eps)

    def vjps(out_data, x):
        def vjp(g):
            mu = x.mean(axis=-1, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
            inv = 1.0 / np.sqrt(var + eps)
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * out_data).mean(axis=-1, keepdims=True)
            return (inv * (g - gm - out_data * gx),)

        return vjp

    return _make(fwd, vjps, a)


def sum_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def fwd(x):
        return x.sum(axis=axis, keepdims=keepdims)

    def vjps(out_data, x):
        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return vjp

    return _make(fwd, vjps, a)


def mean_axis(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def fwd(x):
        return x.mean(axis=axis, keepdims=keepdims)

    def vjps(out_data, x):
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= x.shape[ax]

        def vjp(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, x.shape).copy(),)

        return vjp

    return _make(fwd, vjps, a)


def global_avg_pool(a) -> Tensor:
    """Mean over every axis except the last (channels)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ValueError("shape-mismatch: global_avg_pool needs spatial axes")
    return mean_axis(a, tuple(range(a.ndim - 1)))


def sum_all(a) -> Tensor:
    def vjps(out_data, x):
        return lambda g: (np.broadcast_to(g, x.shape).copy(),)

    return _make(lambda x: np.asarray(x.sum()), vjps, as_tensor(a))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def vjps(out_data, x):
        return lambda g: (np.broadcast_to(g / n, x.shape).copy(),)

    return _make(lambda x: np.asarray(x.mean()), vjps, a)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("shape-mismatch: concat of zero tensors")

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def vjps(out_data, *xs):
        sizes = [x.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]

        def vjp(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

        return vjp

    return _make(fwd, vjps, *ts)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)

    def vjps(out_data, x):
        return lambda g: (g.reshape(x.shape),)

    return _make(lambda x: x.reshape(shape), vjps, a)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"shape-mismatch: transpose expects 2-d, got {a.shape}")
    return _make(lambda x: x.T.copy(), lambda o, x: lambda g: (g.T.copy(),), a)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def fwd(x):
        return x[idx].copy()

    def vjps(out_data, x):
        def vjp(g):
            full = np.zeros_like(x)
            full[idx] = g
            return (full,)

        return vjp

    return _make(fwd, vjps, a)


def gather_pairs(a, rows, cols) -> Tensor:
    """Pick entries ``a[rows[k], cols[k]]`` of a 2-d tensor as a vector."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if a.ndim != 2:
        raise ValueError("shape-mismatch: gather_pairs expects a 2-d tensor")

    def fwd(x):
        return x[rows, cols].copy()

    def vjps(out_data, x):
        def vjp(g):
            full = np.zeros_like(x)
            np.add.at(full, (rows, cols), g)
            return (full,)

        return vjp

    return _make(fwd, vjps, a)


# ---------------------------------------------------------------------------
# position embedding


def position_embed(positions, d: int) -> np.ndarray:
    """Deterministic sinusoidal embedding of 2-d points in the unit square.

    Channels alternate sin/cos per frequency; the first half of the width
    encodes x, the second half y. Frequencies are spread geometrically from
    1 to 32 cycles per unit, which keeps nearby points distinguishable at
    normalized pedestrian scales. ``d`` must be divisible by 4.
    """
    if d % 4 != 0:
        raise ValueError(f"dimension-indivisible: position embedding width {d} not divisible by 4")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 2:
        raise ValueError(f"shape-mismatch: positions must be count x 2, got {pos.shape}")
    nfreq = d // 4
    if nfreq == 1:
        freqs = np.array([1.0])
    else:
        freqs = np.exp(np.linspace(math.log(1.0), math.log(32.0), nfreq))
    out = np.empty((pos.shape[0], d))
    for ax in range(2):
        ang = 2.0 * math.pi * pos[:, ax : ax + 1] * freqs[None, :]
        block = np.empty((pos.shape[0], 2 * nfreq))
        block[:, 0::2] = np.sin(ang)
        block[:, 1::2] = np.cos(ang)
        out[:, ax * 2 * nfreq : (ax + 1) * 2 * nfreq] = block
    return out


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    checked: int
    worst_index: tuple[int, ...] | None = None

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"grad-check {state}: max rel err {self.max_rel_error:.3e} over {self.checked} coords (tol {self.tol:g})"


def check_gradient(
    f: Callable[[Tensor], Tensor],
    x,
    tol: float = 1e-6,
    step: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central finite differences.

    Relative error for a coordinate is |a - n| / max(1, |a|, |n|); the unit
    floor keeps near-zero gradients from inflating the ratio. When
    ``max_coords`` is given, a random subset of coordinates is probed, which
    is how large parameter tensors stay affordable.
    """
    x = np.asarray(x, dtype=np.float64)
    tape = GradTape()
    xt = tape.leaf(x.copy())
    y = f(xt)
    if y.size != 1:
        raise ValueError("check_gradient requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise ValueError("non-finite-evaluation: f(x) is not finite")
    tape.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)

    coords = list(np.ndindex(*x.shape)) if x.shape else [()]
    if max_coords is not None and len(coords) > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        picks = gen.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in picks]

    max_err = 0.0
    worst = None
    for idx in coords:
        xp = x.copy()
        xp[idx] += step
        fp = f(Tensor(xp)).item()
        xm = x.copy()
        xm[idx] -= step
        fm = f(Tensor(xm)).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError("non-finite-evaluation: f not finite at perturbation")
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > max_err:
            max_err = err
            worst = idx
    return GradCheckReport(max_rel_error=max_err, passed=max_err <= tol, tol=tol, checked=len(coords), worst_index=worst)
