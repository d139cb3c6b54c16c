"""Dense float64 tensors with reverse-mode automatic differentiation.

Conventions
-----------
* Every tensor stores a float64 numpy array. Vectors are row vectors of
  shape ``(1, d)``; a layer maps ``x @ W`` with ``W`` of shape ``(in, out)``.
* There is no broadcasting. Binary elementwise ops require equal shapes;
  repeat a row with ``matmul(ones(n, 1), row)`` when needed.
* ``backward`` refuses to overwrite gradients that are already present.
  Call :func:`zero_grad` between optimizer steps, or pass
  ``accumulate=True`` to add into the existing buffers on purpose.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.size == 0:
            raise DimensionError("tensors must have positive dimensions")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: Op | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


@dataclass(eq=False)
class Op:
    """One recorded operation: inputs, output and the local backward rule."""

    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Operations reachable from a loss, in recording (topological) order."""

    ops: list[Op] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        ordered: list[Op] = []
        seen: set[int] = set()
        stack: list[tuple[Op, bool]] = []
        if loss._op is not None:
            stack.append((loss._op, False))
        while stack:
            op, expanded = stack.pop()
            if expanded:
                ordered.append(op)
                continue
            if id(op) in seen:
                continue
            seen.add(id(op))
            stack.append((op, True))
            for t in op.inputs:
                if t._op is not None and id(t._op) not in seen:
                    stack.append((t._op, False))
        return cls(ordered)

    def leaves(self) -> list[Tensor]:
        found: dict[int, Tensor] = {}
        for op in self.ops:
            for t in op.inputs:
                if t._op is None and t.requires_grad:
                    found.setdefault(id(t), t)
        return list(found.values())


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Run forward computations without recording operations."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _record(kind: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
    out._op = Op(kind, inputs, out, backward) if out.requires_grad else None
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _record("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Tensor, k: float) -> Tensor:
    return _record("scale", (a,), a.data * k, lambda g: (g * k,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log: input must be strictly positive")
    return _record("log", (a,), np.log(x), lambda g: (g / x,))


def elementwise(kind: str, *args: Tensor) -> Tensor:
    """Dispatch ``tanh | sigmoid | log`` (unary) and ``add | mul`` (binary)."""
    unary = {"tanh": tanh, "sigmoid": sigmoid, "log": log}
    binary = {"add": add, "mul": mul, "sub": sub}
    if kind in unary:
        if len(args) != 1:
            raise DomainError(f"{kind} takes one operand")
        return unary[kind](args[0])
    if kind in binary:
        if len(args) != 2:
            raise DomainError(f"{kind} takes two operands")
        return binary[kind](*args)
    raise DomainError(f"unknown elementwise kind {kind!r}")


def softmax(v: Tensor) -> Tensor:
    """Normalize all entries of ``v`` (treated as one flat vector)."""
    x = v.data
    if x.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(x - x.max())
    y = e / e.sum()

    def back(g):
        return (y * (g - np.sum(g * y)),)

    return _record("softmax", (v,), y, back)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join row vectors side by side."""
    if not parts:
        raise DomainError("concat of an empty part list")
    for p in parts:
        if p.shape[0] != 1:
            raise DimensionError(f"concat expects row vectors, got {p.shape}")
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=1)
    return _record("concat", tuple(parts), out, lambda g: tuple(np.split(g, cuts, axis=1)))


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack ``k`` row vectors of equal width into a ``k x d`` matrix."""
    if not rows:
        raise DomainError("stack_rows of an empty list")
    width = rows[0].shape[1]
    for r in rows:
        if r.shape != (1, width):
            raise DimensionError(f"stack_rows expects (1, {width}) rows, got {r.shape}")
    out = np.concatenate([r.data for r in rows], axis=0)
    return _record("stack_rows", tuple(rows), out, lambda g: tuple(g[i : i + 1] for i in range(len(rows))))


def embedding_lookup(table: Tensor, idx: int) -> Tensor:
    n = table.shape[0]
    if not 0 <= idx < n:
        raise IndexError(f"embedding id {idx} outside [0, {n})")

    def back(g):
        full = np.zeros_like(table.data)
        full[idx] += g[0]
        return (full,)

    return _record("embedding", (table,), table.data[idx : idx + 1].copy(), back)


def pick(v: Tensor, row: int, col: int) -> Tensor:
    """Select one entry as a 1x1 tensor."""

    def back(g):
        full = np.zeros_like(v.data)
        full[row, col] = g[0, 0]
        return (full,)

    return _record("pick", (v,), v.data[row : row + 1, col : col + 1].copy(), back)


def pick_row(m: Tensor, row: int) -> Tensor:
    """Select one row of a matrix as a ``1 x d`` tensor."""
    if not 0 <= row < m.shape[0]:
        raise IndexError(f"row {row} outside [0, {m.shape[0]})")

    def back(g):
        full = np.zeros_like(m.data)
        full[row] = g[0]
        return (full,)

    return _record("pick_row", (m,), m.data[row : row + 1].copy(), back)


def transpose(a: Tensor) -> Tensor:
    return _record("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = a.shape
    return _record("sum", (a,), np.array([[a.data.sum()]]), lambda g: (np.full(shape, g[0, 0]),))


def sum_all(items: Iterable[Tensor]) -> Tensor:
    """Add 1x1 tensors (or equal-shape tensors) left to right."""
    it = iter(items)
    try:
        acc = next(it)
    except StopIteration:
        raise DomainError("sum_all of nothing") from None
    for x in it:
        acc = add(acc, x)
    return acc


def ones(rows: int, cols: int) -> Tensor:
    return Tensor(np.ones((rows, cols)))


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, accumulate: bool = False) -> Tape:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Returns the tape that was replayed. Raises :class:`GradientError` when a
    leaf already holds a gradient and ``accumulate`` is false.
    """
    if loss.data.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_loss(loss)
    leaves = tape.leaves()
    if not accumulate:
        stale = [t for t in leaves if t.grad is not None]
        if stale:
            names = ", ".join(t.name or repr(t) for t in stale[:3])
            raise GradientError(f"gradients already present ({names}); call zero_grad first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for t in leaves:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        if t.grad is None:
            t.grad = g.copy()
        else:
            t.grad = t.grad + g
    if loss._op is None and loss.requires_grad:
        if loss.grad is not None and not accumulate:
            raise GradientError("gradient already present on the loss leaf; call zero_grad first")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- grad check


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4) -> float:
    """Largest relative gap between autodiff and central-difference gradients.

    ``f`` rebuilds its graph from ``params`` on every call; the parameter
    arrays are perturbed in place and restored afterwards.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise DomainError(f"eps {eps} outside [1e-6, 1e-3]")
    def value() -> float:
        with no_grad():
            return f().item()

    first = value()
    second = value()
    if first != second:
        raise GradientError("objective is not deterministic across evaluations")
    saved = [p.grad for p in params]
    zero_grad(params)
    backward(f())
    worst = 0.0
    try:
        for p in params:
            analytic = p.grad
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = value()
                flat[i] = orig - eps
                down = value()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = analytic.reshape(-1)[i]
                rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, rel)
    finally:
        for p, g in zip(params, saved):
            p.grad = g
    if math.isnan(worst):
        raise GradientError("NaN encountered during gradient check")
    return worst
