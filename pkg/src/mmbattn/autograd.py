"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

The engine is deliberately small.  A :class:`Tensor` is a shaped float64
buffer; a :class:`Graph` is an append-only tape of executed operations;
``Graph.backward`` walks the tape exactly once, in reverse execution
order.  Graphs are rebuilt per forward pass, which keeps dynamically
toggled architectures (ablation combinations) trivial.

Broadcasting is restricted on purpose: in binary elementwise ops only the
second operand may broadcast to the first, through trailing alignment or
explicit length-1 axes.  The first operand fixes the output shape, so the
backward reduction logic stays small and auditable.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

# Sigmoid outputs are clamped to the open interval (0, 1): extreme logits
# saturate at the nearest representable value instead of exactly 0 or 1.
_SIGMOID_LO = np.nextafter(0.0, 1.0)
_SIGMOID_HI = np.nextafter(1.0, 0.0)


class Tensor:
    """A shaped float64 buffer, optionally carrying an accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps ndim: 0-d arrays are contiguous
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, context: str = "tensor") -> None:
        if not np.isfinite(self.data).all():
            raise ContractError(f"non-finite values in {context}")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``; gradients from multiple consumers sum."""
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable sigmoid, branch split on sign, clamped to (0, 1)."""
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.ravel()
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIGMOID_LO, _SIGMOID_HI).reshape(arr.shape)


def _check_broadcast(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    if len(b_shape) > len(a_shape):
        raise DimensionError(f"cannot broadcast {b_shape} to {a_shape}")
    pad = len(a_shape) - len(b_shape)
    for da, db in zip(a_shape[pad:], b_shape):
        if db != da and db != 1:
            raise DimensionError(f"cannot broadcast {b_shape} to {a_shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``: the inverse of the broadcast rule above."""
    pad = g.ndim - len(shape)
    if pad:
        g = g.sum(axis=tuple(range(pad)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Graph:
    """Append-only tape of executed operations.

    One graph per forward/backward pass.  Parameters are shared across
    graphs; each graph owns its intermediate tensors.  ``record=False``
    runs ops forward-only (evaluation mode).  ``check_finite=True`` makes
    any NaN/Inf op result raise immediately instead of propagating.
    """

    def __init__(self, record: bool = True, check_finite: bool = False):
        self.record = record
        self.check_finite = check_finite
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    # -- plumbing -----------------------------------------------------

    def _result(self, data, inputs: tuple[Tensor, ...],
                backward: Callable[[np.ndarray], None]) -> Tensor:
        if self.check_finite and not np.isfinite(data).all():
            raise ContractError("non-finite op result")
        rg = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=rg)
        if rg:
            self._nodes.append((out, backward))
        return out

    def record_op(self, data, inputs: Sequence[Tensor],
                  backward: Callable[[np.ndarray], None]) -> Tensor:
        """Register an externally implemented differentiable operation.

        ``backward`` receives the upstream gradient of the output and must
        call :func:`accumulate_grad` on whichever inputs require it.
        """
        return self._result(data, tuple(inputs), backward)

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` for every requires_grad tensor reachable from ``loss``."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if not self.record:
            raise ContractError("backward called on a non-recording graph")
        if loss.grad is None:
            loss.grad = np.ones_like(loss.data)
        for out, bw in reversed(self._nodes):
            if out.grad is not None:
                bw(out.grad)

    # -- operations ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, g @ b.data.T)
            if b.requires_grad:
                accumulate_grad(b, a.data.T @ g)

        return self._result(a.data @ b.data, (a, b), backward)

    def _elementwise(self, a, b, fwd, da_of, db_of):
        _check_broadcast(a.shape, b.shape)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, da_of(g))
            if b.requires_grad:
                accumulate_grad(b, _reduce_to(db_of(g), b.shape))

        return self._result(fwd(a.data, b.data), (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise(a, b, np.add, lambda g: g, lambda g: g)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise(a, b, np.subtract, lambda g: g, lambda g: -g)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._elementwise(a, b, np.multiply,
                                 lambda g: g * b.data, lambda g: g * a.data)

    def _check_axis(self, a: Tensor, axis: int) -> None:
        if not 0 <= axis < a.data.ndim:
            raise DimensionError(f"axis {axis} out of range for shape {a.shape}")

    def reduce_sum(self, a: Tensor, axis: int) -> Tensor:
        self._check_axis(a, axis)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, np.broadcast_to(np.expand_dims(g, axis), a.shape))

        return self._result(a.data.sum(axis=axis), (a,), backward)

    def reduce_mean(self, a: Tensor, axis: int) -> Tensor:
        self._check_axis(a, axis)
        d = a.shape[axis]

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, np.broadcast_to(np.expand_dims(g / d, axis), a.shape))

        return self._result(a.data.mean(axis=axis), (a,), backward)

    def reduce_max(self, a: Tensor, axis: int) -> Tensor:
        self._check_axis(a, axis)
        # np.argmax returns the first (lowest-index) maximum: the tie rule.
        idx = np.argmax(a.data, axis=axis)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                full = np.zeros_like(a.data)
                np.put_along_axis(full, np.expand_dims(idx, axis),
                                  np.expand_dims(g, axis), axis)
                accumulate_grad(a, full)

        return self._result(a.data.max(axis=axis), (a,), backward)

    def relu(self, a: Tensor) -> Tensor:
        mask = a.data > 0  # relu'(0) = 0

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, g * mask)

        return self._result(np.maximum(a.data, 0.0), (a,), backward)

    def sigmoid(self, a: Tensor) -> Tensor:
        out_data = stable_sigmoid(a.data)

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, g * out_data * (1.0 - out_data))

        return self._result(out_data, (a,), backward)

    def concat(self, tensors: Sequence[Tensor], axis: int) -> Tensor:
        parts = list(tensors)
        if not parts:
            raise DimensionError("concat of an empty tensor list")
        rank = parts[0].data.ndim
        if not 0 <= axis < rank:
            raise DimensionError(f"axis {axis} out of range for rank {rank}")
        for t in parts[1:]:
            if t.data.ndim != rank or any(
                    i != axis and t.shape[i] != parts[0].shape[i] for i in range(rank)):
                raise DimensionError(
                    f"concat shapes incompatible along axis {axis}: "
                    f"{[p.shape for p in parts]}")
        sizes = [t.shape[axis] for t in parts]
        offsets = np.concatenate(([0], np.cumsum(sizes)))

        def backward(g: np.ndarray) -> None:
            for t, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * rank
                    sl[axis] = slice(int(start), int(stop))
                    accumulate_grad(t, g[tuple(sl)])

        return self._result(np.concatenate([t.data for t in parts], axis=axis),
                            tuple(parts), backward)

    def reshape(self, a: Tensor, shape: Sequence[int]) -> Tensor:
        new_shape = tuple(int(s) for s in shape)
        if int(np.prod(new_shape, dtype=np.int64)) != a.size:
            raise DimensionError(f"cannot reshape {a.shape} to {new_shape}")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, g.reshape(a.shape))

        return self._result(a.data.reshape(new_shape), (a,), backward)

    def transpose(self, a: Tensor) -> Tensor:
        if a.data.ndim != 2:
            raise DimensionError(f"transpose needs a 2-d operand, got {a.shape}")

        def backward(g: np.ndarray) -> None:
            if a.requires_grad:
                accumulate_grad(a, np.ascontiguousarray(g.T))

        return self._result(a.data.T, (a,), backward)
