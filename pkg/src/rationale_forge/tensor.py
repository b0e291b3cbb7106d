"""Dense float64 tensors with reverse-mode automatic differentiation.

Small by design: 1-D/2-D arrays, no broadcasting (explicit expand/tile ops
instead), one backward rule per op so every gradient path stays auditable.
Recording happens only while a :class:`Tape` is active, so evaluation code
that never opens a tape pays no graph cost.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward called on a detached graph or an already-consumed tape."""


# Stack of active tapes; ops record on the innermost one. Single-threaded by
# contract (one logical thread of control per training run).
_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of operations for one forward pass.

    Ops are appended in creation order, which is a topological order by
    construction, so the backward sweep is a single reverse iteration that
    visits each node exactly once.
    """

    __slots__ = ("_ops", "_consumed")

    def __init__(self) -> None:
        self._ops: list[tuple[str, "Tensor", Callable[[np.ndarray], None]]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def op_names(self) -> list[str]:
        return [name for name, _, _ in self._ops]


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float64 array plus an optional gradient buffer.

    Values are immutable once built except through the documented entry
    points (optimizer steps mutate ``data`` in place, ``backward`` fills
    ``grad``). ``grad`` accumulates across backward calls until explicitly
    reset via :func:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

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
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def zero_grad(tensors) -> None:
    """Explicit gradient reset between steps; accumulation is never silent."""
    for t in tensors:
        t.grad = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Never accumulate in place: upstream gradient arrays may be shared
    # between several parents of the same node.
    t.grad = g if t.grad is None else t.grad + g


def _finite(name: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{name} produced non-finite values")


def _make(name: str, out_data: np.ndarray, parents: Sequence[Tensor],
          backward_rule: Callable[[np.ndarray], None]) -> Tensor:
    _finite(name, out_data)
    tape = active_tape()
    record = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = record
    out.grad = None
    out.tape = tape if record else None
    if record:
        tape._ops.append((name, out, backward_rule))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every recorded tensor reachable from ``loss``.

    ``loss`` must be a scalar recorded on an active-at-the-time tape. A tape
    may be swept once; rebuilding the forward pass is required before
    differentiating again.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise TapeError("loss is detached: it was not recorded on any tape")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward call")
    tape._consumed = True
    loss.grad = np.ones((), dtype=np.float64)
    for _, out, rule in reversed(tape._ops):
        if out.grad is not None:
            rule(out.grad)


# ---------------------------------------------------------------------------
# elementwise and affine ops


def _check_same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make("add", a.data + b.data, (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make("sub", a.data - b.data, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make("mul", a.data * b.data, (a, b), rule)


def affine(a: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    """scale * a + shift with float constants."""

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * scale)

    return _make("affine", a.data * scale + shift, (a,), rule)


def absolute(a: Tensor) -> Tensor:
    """|a|; the subgradient at 0 is taken as 0."""

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * np.sign(a.data))

    return _make("absolute", np.abs(a.data), (a,), rule)


def sigmoid(a: Tensor) -> Tensor:
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _make("sigmoid", out_data, (a,), rule)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out_data * out_data))

    return _make("tanh", out_data, (a,), rule)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make("matmul", a.data @ b.data, (a, b), rule)


def add_bias(m: Tensor, bias: Tensor) -> Tensor:
    """Add a length-k bias vector to every row of an (n, k) matrix."""
    if m.ndim != 2 or bias.ndim != 1 or m.shape[1] != bias.shape[0]:
        raise ShapeError(f"add_bias: matrix {m.shape} incompatible with bias {bias.shape}")

    def rule(g):
        if m.requires_grad:
            _accumulate(m, g)
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))

    return _make("add_bias", m.data + bias.data, (m, bias), rule)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make("reshape", a.data.reshape(shape), (a,), rule)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    if axis >= a.ndim or start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow: slice [{start}:{start + length}) along axis {axis} "
                         f"outside shape {a.shape}")
    index = tuple(slice(None) if d != axis else slice(start, start + length)
                  for d in range(a.ndim))

    def rule(g):
        if a.requires_grad:
            full = np.zeros(a.shape)
            full[index] = g
            _accumulate(a, full)

    return _make("narrow", a.data[index], (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    first = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(first) or any(
                t.shape[d] != first[d] for d in range(len(first)) if d != axis):
            raise ShapeError(f"concat: shapes {first} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = tuple(slice(None) if d != axis else slice(lo, hi)
                              for d in range(t.ndim))
                _accumulate(t, g[index])

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), rule)


def expand_cols(a: Tensor, k: int) -> Tensor:
    """Explicitly tile an (n, 1) column to (n, k)."""
    if a.ndim != 2 or a.shape[1] != 1:
        raise ShapeError(f"expand_cols needs an (n, 1) column, got {a.shape}")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g.sum(axis=1, keepdims=True))

    return _make("expand_cols", np.broadcast_to(a.data, (a.shape[0], k)), (a,), rule)


def tile_rows(a: Tensor, n: int) -> Tensor:
    """Explicitly tile a (1, k) row to (n, k)."""
    if a.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"tile_rows needs a (1, k) row, got {a.shape}")

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g.sum(axis=0, keepdims=True))

    return _make("tile_rows", np.broadcast_to(a.data, (n, a.shape[1])), (a,), rule)


# ---------------------------------------------------------------------------
# reductions and normalizations


def total(a: Tensor, axis: int | None = None) -> Tensor:
    """Sum over all elements (scalar) or along one axis."""

    def rule(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.full(a.shape, float(g)))
            else:
                _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make("sum", a.data.sum(axis=axis), (a,), rule)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.size if axis is None else a.shape[axis]

    def rule(g):
        if a.requires_grad:
            if axis is None:
                _accumulate(a, np.full(a.shape, float(g) / count))
            else:
                _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape) / count)

    return _make("mean", a.data.mean(axis=axis), (a,), rule)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        if a.requires_grad:
            inner = (g * out_data).sum(axis=axis, keepdims=True)
            _accumulate(a, out_data * (g - inner))

    return _make("softmax", out_data, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        if a.requires_grad:
            _accumulate(a, g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", out_data, (a,), rule)


# ---------------------------------------------------------------------------
# gather/scatter ops


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of a (vocab, dim) table; equal ids give equal rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id outside vocabulary of size {table.shape[0]}")

    def rule(g):
        if table.requires_grad:
            full = np.zeros(table.shape)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    return _make("embedding", table.data[ids], (table,), rule)


def gather_labels(m: Tensor, idx: np.ndarray) -> Tensor:
    """Pick m[i, idx[i]] for each row, returned as an (n, 1) column."""
    idx = np.asarray(idx, dtype=np.int64)
    if m.ndim != 2 or idx.shape != (m.shape[0],):
        raise ShapeError(f"gather_labels: matrix {m.shape} with index shape {idx.shape}")
    rows = np.arange(m.shape[0])

    def rule(g):
        if m.requires_grad:
            full = np.zeros(m.shape)
            np.add.at(full, (rows, idx), g[:, 0])
            _accumulate(m, full)

    return _make("gather_labels", m.data[rows, idx][:, None], (m,), rule)


def straight_through(soft: Tensor, hard_data: np.ndarray) -> Tensor:
    """Forward the hard values; route gradients to the soft relaxation."""
    hard_data = np.asarray(hard_data, dtype=np.float64)
    if hard_data.shape != soft.shape:
        raise ShapeError(f"straight_through: hard {hard_data.shape} vs soft {soft.shape}")

    def rule(g):
        if soft.requires_grad:
            _accumulate(soft, g)

    return _make("straight_through", hard_data, (soft,), rule)
