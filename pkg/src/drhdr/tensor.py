"""Dense NCHW float32 tensors and a reverse-mode differentiation tape.

All values in the package are 4-D ``(batch, channels, height, width)`` arrays;
scalars are shaped ``(1, 1, 1, 1)``.  Operators compute forward results with
plain numpy and, when a tape is active and an input is gradient-tracked,
register a backward closure on that tape.  Reductions accumulate in float64
and keep the unrounded scalar on the result (``Tensor.exact``) so that
finite-difference checks are not limited by float32 quantisation of the
objective value.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "scalar",
    "add",
    "sub",
    "mul",
    "scale",
    "shift",
    "neg",
    "sum_all",
    "mean_all",
    "abs_elem",
    "log1p_elem",
]


_TAPES: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """(batch, channels, height, width) float32 array, optionally gradient-tracked."""

    __slots__ = ("data", "requires_grad", "grad", "exact")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"tensor data must be 4-D NCHW, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        # float64 value carried by scalar results of reductions (and the
        # scalar tail of elementwise chains); None for general tensors.
        self.exact: float | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.exact) if self.exact is not None else float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the underlying functions do the tape bookkeeping
    def __add__(self, other):
        return shift(self, float(other)) if np.isscalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -float(other)) if np.isscalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if np.isscalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("tensor division only supports scalar divisors")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


def scalar(value: float) -> Tensor:
    t = Tensor(np.full((1, 1, 1, 1), value, dtype=np.float32))
    t.exact = float(value)
    return t


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; nodes are appended in execution order, so the
    list is topologically sorted by construction and backward walks it in
    exact reverse order, accumulating (never overwriting) gradients."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPES.pop()
        assert popped is self, "tape contexts must nest"
        return False

    def _record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(op, inputs, output, backward_fn))
        self._produced.add(id(output))

    def __len__(self) -> int:
        return len(self.nodes)


def record_op(
    op: str,
    inputs: Sequence[Tensor],
    out_data: np.ndarray,
    backward_fn: Callable[[np.ndarray], tuple],
    exact: float | None = None,
) -> Tensor:
    """Wrap a forward result and register its backward closure on the active tape."""
    inputs = tuple(inputs)
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    out.exact = exact
    tape = _active_tape()
    if tape is not None and req:
        tape._record(op, inputs, out, backward_fn)
    return out


def backward(tape: Tape, output: Tensor, seed=None) -> None:
    """Populate ``.grad`` of every gradient-tracked tensor reachable from ``output``.

    ``output`` must be a scalar (1,1,1,1) tensor unless an explicit ``seed``
    gradient of matching shape is supplied.  Gradients accumulate: calling
    backward twice doubles them.
    """
    if id(output) not in tape._produced:
        raise ValueError("backward target was not produced by this tape")
    if seed is None:
        if output.shape != (1, 1, 1, 1):
            raise ValueError(
                f"backward needs a scalar output or an explicit seed gradient, got shape {output.shape}"
            )
        seed_arr = np.ones((1, 1, 1, 1), dtype=np.float32)
    else:
        seed_arr = np.ascontiguousarray(getattr(seed, "data", seed), dtype=np.float32)
        if seed_arr.shape != output.data.shape:
            raise ValueError("seed gradient shape must match the output shape")

    flows: dict[int, np.ndarray] = {id(output): seed_arr}
    holders: dict[int, Tensor] = {id(output): output}
    for node in reversed(tape.nodes):
        g = flows.get(id(node.output))
        if g is None:
            continue
        grads_in = node.backward_fn(g)
        for tin, gi in zip(node.inputs, grads_in):
            if gi is None or not tin.requires_grad:
                continue
            if gi.dtype != np.float32:
                gi = gi.astype(np.float32)
            key = id(tin)
            if key in flows:
                flows[key] = flows[key] + gi
            else:
                flows[key] = gi
                holders[key] = tin

    for key, t in holders.items():
        if t.requires_grad:
            t.grad = flows[key].copy() if t.grad is None else t.grad + flows[key]


def grad_check(f, x: Tensor, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients of ``f`` and central differences.

    ``f`` must be pure and return a scalar tensor.  The relative error of each
    element is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``;
    the maximum over elements is returned.
    """

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        if out.shape != (1, 1, 1, 1):
            raise ValueError("grad_check needs a scalar-valued function")
        val = out.item()
        if not np.isfinite(val):
            raise NumericError("grad_check: function value is not finite")
        return val

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if out.shape != (1, 1, 1, 1):
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: function value is not finite")
    backward(tape, out)
    analytic = np.zeros(x.shape, dtype=np.float64) if leaf.grad is None else leaf.grad.astype(np.float64)

    worst = 0.0
    for idx in np.ndindex(x.shape):
        xp = x.data.copy()
        xm = x.data.copy()
        xp[idx] += eps
        xm[idx] -= eps
        # use the realised float32 step so input rounding cancels out
        h = float(np.float64(xp[idx]) - np.float64(xm[idx]))
        numeric = (evaluate(xp) - evaluate(xm)) / h
        a = analytic[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _exact_binary(a: Tensor, b: Tensor, fn) -> float | None:
    if a.data.size != 1 or b.data.size != 1:
        return None
    av = a.exact if a.exact is not None else float(np.float64(a.data.reshape(())))
    bv = b.exact if b.exact is not None else float(np.float64(b.data.reshape(())))
    return float(fn(av, bv))


def _exact_unary(a: Tensor, fn) -> float | None:
    if a.data.size != 1:
        return None
    av = a.exact if a.exact is not None else float(np.float64(a.data.reshape(())))
    return float(fn(av))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = a.data + b.data

    def bw(g):
        return g, g

    return record_op("add", (a, b), out, bw, exact=_exact_binary(a, b, lambda x, y: x + y))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return g, -g

    return record_op("sub", (a, b), out, bw, exact=_exact_binary(a, b, lambda x, y: x - y))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, g * ad

    return record_op("mul", (a, b), out, bw, exact=_exact_binary(a, b, lambda x, y: x * y))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * np.float32(s)

    def bw(g):
        return (g * np.float32(s),)

    return record_op("scale", (a,), out, bw, exact=_exact_unary(a, lambda x: x * s))


def shift(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data + np.float32(s)

    def bw(g):
        return (g,)

    return record_op("shift", (a,), out, bw, exact=_exact_unary(a, lambda x: x + s))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def abs_elem(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    ad = a.data

    def bw(g):
        # subgradient from the positive side at 0
        return (g * np.where(ad >= 0, np.float32(1.0), np.float32(-1.0)),)

    return record_op("abs", (a,), out, bw, exact=_exact_unary(a, abs))


def log1p_elem(a: Tensor) -> Tensor:
    if a.data.min() <= -1.0:
        raise ValueError("log1p: values must be > -1")
    out = np.log1p(a.data)
    ad = a.data

    def bw(g):
        return (g / (np.float32(1.0) + ad),)

    return record_op("log1p", (a,), out, bw, exact=_exact_unary(a, np.log1p))


def sum_all(a: Tensor) -> Tensor:
    total = float(a.data.sum(dtype=np.float64))
    out = np.full((1, 1, 1, 1), total, dtype=np.float32)
    shape = a.data.shape

    def bw(g):
        return (np.full(shape, float(g.reshape(())), dtype=np.float32),)

    return record_op("sum", (a,), out, bw, exact=total)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    total = float(a.data.sum(dtype=np.float64)) / n
    out = np.full((1, 1, 1, 1), total, dtype=np.float32)
    shape = a.data.shape

    def bw(g):
        return (np.full(shape, float(g.reshape(())) / n, dtype=np.float32),)

    return record_op("mean", (a,), out, bw, exact=total)
