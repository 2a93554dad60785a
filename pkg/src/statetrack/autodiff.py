"""Reverse-mode automatic differentiation over small dense float64 tensors.

Operations record onto an explicit :class:`ComputationTape` when one is
active (``with ComputationTape() as tape:``); with no tape active they run
forward-only, which is what evaluation paths use.  Only the operations the
model actually needs are provided, and broadcasting is restricted to
exact-shape or scalar operands.
"""

from __future__ import annotations

import threading
from typing import Callable

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ContractError(RuntimeError):
    """An operation was used outside its documented contract."""


class Tensor:
    """A dense float64 array with an optional accumulated gradient.

    Leaves created with ``requires_grad=True`` receive gradients from
    :meth:`ComputationTape.backward`; everything else is treated as a
    constant or an intermediate.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "backward_fn")

    def __init__(self, out: Tensor, backward_fn):
        self.out = out
        self.backward_fn = backward_fn


class _TapeState(threading.local):
    current: "ComputationTape | None" = None


_STATE = _TapeState()


class ComputationTape:
    """Append-only record of operations; append order is topological order.

    A tape belongs to the single thread that opened it (the active tape is
    thread-local).  Tensors holding frozen values may be read from any thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._outer: ComputationTape | None = None

    def __enter__(self) -> "ComputationTape":
        self._outer = _STATE.current
        _STATE.current = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.current = self._outer
        self._outer = None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        Repeated calls without clearing leaf grads accumulate additively.
        """
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {list(loss.shape)}")
        if id(loss) not in self._produced:
            raise ContractError("backward() loss was not produced on this tape")

        adjoints: dict[int, np.ndarray] = {}
        holders: dict[int, Tensor] = {}

        def get_adj(t: Tensor) -> np.ndarray:
            buf = adjoints.get(id(t))
            if buf is None:
                buf = np.zeros_like(t.values)
                adjoints[id(t)] = buf
                holders[id(t)] = t
            return buf

        get_adj(loss)[...] = 1.0
        for node in reversed(self.nodes):
            g = adjoints.get(id(node.out))
            if g is not None:
                node.backward_fn(g, get_adj)

        for tid, buf in adjoints.items():
            t = holders[tid]
            if t.requires_grad:
                if t.grad is None:
                    t.grad = buf.copy()
                else:
                    t.grad += buf


def active_tape() -> ComputationTape | None:
    return _STATE.current


def _record(out: Tensor, backward_fn) -> Tensor:
    tape = _STATE.current
    if tape is not None:
        tape.nodes.append(_Node(out, backward_fn))
        tape._produced.add(id(out))
    return out


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float64))


# ---------------------------------------------------------------------------
# elementwise ops (exact-shape or scalar broadcast only)

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(
            f"{op}: shapes {list(a.shape)} and {list(b.shape)} are not broadcastable")


def _accumulate(t: Tensor, g: np.ndarray, get_adj) -> None:
    # sum-reduce the upstream gradient when t was scalar-broadcast
    buf = get_adj(t)
    if g.shape == buf.shape:
        buf += g
    else:
        buf += g.sum()


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.values + b.values)

    def fn(g, get_adj):
        _accumulate(a, g, get_adj)
        _accumulate(b, g, get_adj)

    return _record(out, fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.values * b.values)

    def fn(g, get_adj):
        _accumulate(a, g * b.values, get_adj)
        _accumulate(b, g * a.values, get_adj)

    return _record(out, fn)


def scale(a: Tensor, k: float) -> Tensor:
    """Multiply by a plain Python constant (no gradient for k)."""
    out = Tensor(a.values * k)

    def fn(g, get_adj):
        get_adj(a)[...] += g * k

    return _record(out, fn)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.values))
    y = out.values

    def fn(g, get_adj):
        get_adj(a)[...] += g * (1.0 - y * y)

    return _record(out, fn)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) saturates cleanly instead of overflowing exp
    out = Tensor(0.5 * (np.tanh(0.5 * a.values) + 1.0))
    y = out.values

    def fn(g, get_adj):
        get_adj(a)[...] += g * y * (1.0 - y)

    return _record(out, fn)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul: expected 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree: {list(a.shape)} x {list(b.shape)}")
    out = Tensor(a.values @ b.values)

    def fn(g, get_adj):
        get_adj(a)[...] += g @ b.values.T
        get_adj(b)[...] += a.values.T @ g

    return _record(out, fn)


def matvec(a: Tensor, x: Tensor) -> Tensor:
    """A @ x for A of shape [m, k] and x of shape [k]."""
    if a.values.ndim != 2 or x.values.ndim != 1 or a.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: shapes {list(a.shape)} and {list(x.shape)} do not chain")
    out = Tensor(a.values @ x.values)

    def fn(g, get_adj):
        get_adj(a)[...] += np.outer(g, x.values)
        get_adj(x)[...] += a.values.T @ g

    return _record(out, fn)


def matvec_t(a: Tensor, x: Tensor) -> Tensor:
    """A.T @ x for A of shape [m, k] and x of shape [m]."""
    if a.values.ndim != 2 or x.values.ndim != 1 or a.shape[0] != x.shape[0]:
        raise DimensionError(f"matvec_t: shapes {list(a.shape)} and {list(x.shape)} do not chain")
    out = Tensor(a.values.T @ x.values)

    def fn(g, get_adj):
        get_adj(a)[...] += np.outer(x.values, g)
        get_adj(x)[...] += a.values @ g

    return _record(out, fn)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"dot: shapes {list(a.shape)} and {list(b.shape)} must be equal 1-D")
    out = Tensor(np.dot(a.values, b.values))

    def fn(g, get_adj):
        get_adj(a)[...] += g * b.values
        get_adj(b)[...] += g * a.values

    return _record(out, fn)


# ---------------------------------------------------------------------------
# shape ops

def concat(*parts: Tensor) -> Tensor:
    """Concatenate flattened parts into one 1-D tensor."""
    if not parts:
        raise DimensionError("concat: needs at least one part")
    out = Tensor(np.concatenate([p.values.reshape(-1) for p in parts]))
    sizes = [p.size for p in parts]

    def fn(g, get_adj):
        offset = 0
        for p, n in zip(parts, sizes):
            get_adj(p)[...] += g[offset:offset + n].reshape(p.shape)
            offset += n

    return _record(out, fn)


def narrow(a: Tensor, start: int, length: int) -> Tensor:
    """A contiguous 1-D slice of the flattened tensor (rows of a matrix are contiguous)."""
    if start < 0 or length < 1 or start + length > a.size:
        raise DimensionError(f"narrow: [{start}, {start + length}) out of range for size {a.size}")
    out = Tensor(a.values.reshape(-1)[start:start + length].copy())

    def fn(g, get_adj):
        get_adj(a).reshape(-1)[start:start + length] += g

    return _record(out, fn)


def row(a: Tensor, i: int) -> Tensor:
    """Row i of a 2-D tensor, as a 1-D tensor."""
    if a.values.ndim != 2:
        raise DimensionError(f"row: expected a 2-D tensor, got shape {list(a.shape)}")
    cols = a.shape[1]
    return narrow(a, i * cols, cols)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view size {a.size} as {list(shape)}")
    out = Tensor(a.values.reshape(shape).copy())

    def fn(g, get_adj):
        get_adj(a)[...] += g.reshape(a.shape)

    return _record(out, fn)


# ---------------------------------------------------------------------------
# reductions and losses

def total(a: Tensor) -> Tensor:
    out = Tensor(a.values.sum())

    def fn(g, get_adj):
        get_adj(a)[...] += g

    return _record(out, fn)


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(a.values.sum() / n)

    def fn(g, get_adj):
        get_adj(a)[...] += g / n

    return _record(out, fn)


def softmax(a: Tensor) -> Tensor:
    """Max-shifted softmax of a 1-D tensor; output is strictly positive and sums to 1."""
    if a.values.ndim != 1 or a.size < 1:
        raise DimensionError(f"softmax: expected a non-empty 1-D tensor, got shape {list(a.shape)}")
    shifted = a.values - a.values.max()
    e = np.exp(shifted)
    out = Tensor(e / e.sum())
    y = out.values

    def fn(g, get_adj):
        get_adj(a)[...] += y * (g - np.dot(g, y))

    return _record(out, fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared componentwise differences, as a scalar."""
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {list(a.shape)} and {list(b.shape)} differ")
    diff = a.values - b.values
    n = a.size
    out = Tensor(np.dot(diff.reshape(-1), diff.reshape(-1)) / n)

    def fn(g, get_adj):
        get_adj(a)[...] += g * (2.0 / n) * diff
        get_adj(b)[...] -= g * (2.0 / n) * diff

    return _record(out, fn)


def nll(dist: Tensor, index: int) -> Tensor:
    """Negative log likelihood of class `index` under a 1-D distribution."""
    if dist.values.ndim != 1:
        raise DimensionError(f"nll: expected a 1-D distribution, got shape {list(dist.shape)}")
    if not 0 <= index < dist.size:
        raise DimensionError(f"nll: index {index} out of range for size {dist.size}")
    p = dist.values[index]
    with np.errstate(divide="ignore"):
        # -log(0) = inf is deliberate: the training loop aborts on it
        out = Tensor(-np.log(p))

    def fn(g, get_adj):
        get_adj(dist)[index] += -g / p

    return _record(out, fn)


# ---------------------------------------------------------------------------
# gradient verification

def finite_difference(f: Callable[[], float], t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of f() w.r.t. every entry of t.

    Perturbs t.values in place and restores it; f must be a pure forward
    evaluation (no tape needed).
    """
    flat = t.values.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return out.reshape(t.shape)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor).

    The floor treats components below it as zero-scale so that exact-zero
    gradients compare against finite-difference noise sensibly.
    """
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def check_gradients(build_loss: Callable[[], Tensor], tensors: dict[str, Tensor],
                    eps: float = 1e-5, floor: float = 1e-6) -> dict[str, float]:
    """Compare backward gradients of build_loss() against central differences.

    Returns the worst relative error per named tensor.  build_loss is called
    once under a fresh tape for the backward pass and 2*size times per tensor
    for the finite differences.
    """
    for t in tensors.values():
        t.zero_grad()
    with ComputationTape() as tape:
        loss = build_loss()
    tape.backward(loss)

    def forward() -> float:
        return build_loss().item()

    errors = {}
    for name, t in tensors.items():
        fd = finite_difference(forward, t, eps=eps)
        ad = t.grad if t.grad is not None else np.zeros_like(t.values)
        errors[name] = relative_error(ad, fd, floor=floor)
    return errors
