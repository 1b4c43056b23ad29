"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every operation produces a new :class:`Tensor` that remembers its operands and
a closure propagating the upstream gradient back to them.  Calling
:meth:`Tensor.backward` replays that tape in reverse topological order.

The engine only supports what the models in this package need: elementwise
arithmetic with numpy broadcasting, matrix products, a handful of
nonlinearities, reductions, concatenation and indexing.  All data is float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "NonFiniteError",
    "as_tensor",
    "concat",
    "stack",
    "where_first_min",
    "evaluate",
    "gradient",
    "trace",
    "AdamState",
    "adam_init",
    "adam_step",
]


class GraphError(ValueError):
    """Raised for malformed graphs: unbound leaves, bad shapes, non-scalar outputs."""


class NonFiniteError(FloatingPointError):
    """Raised when a node produces NaN or inf while finiteness checking is on."""

    def __init__(self, op: str, index: int):
        super().__init__(f"non-finite value produced by node #{index} ({op})")
        self.op = op
        self.index = index


# Finiteness checking is opt-in (evaluate/gradient turn it on); training loops
# check the loss instead so that the hot path stays cheap.
_check_state = {"on": False, "count": 0}


@contextlib.contextmanager
def _checking() -> Iterator[None]:
    prev = dict(_check_state)
    _check_state.update(on=True, count=0)
    try:
        yield
    finally:
        _check_state.update(prev)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 array that is never mutated in place; ``grad`` is filled in by
    :meth:`backward` for every node that requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        if _check_state["on"]:
            _check_state["count"] += 1
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(op, _check_state["count"])

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _make(data, parents: tuple[Tensor, ...], op: str, backward) -> Tensor:
        req = any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req, _parents=parents if req else (), op=op)
        if req:
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    # -- elementwise arithmetic ---------------------------------------------
    def __add__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(a.data + b.data, (a, b), "add", back)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g, a.shape))
            b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(a.data - b.data, (a, b), "sub", back)

    def __rsub__(self, other) -> Tensor:
        return as_tensor(other) - self

    def __mul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other

        def back(g):
            a._accum(_unbroadcast(g * b.data, a.shape))
            b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(a.data * b.data, (a, b), "mul", back)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        a = self
        return Tensor._make(-a.data, (a,), "neg", lambda g: a._accum(-g))

    def __truediv__(self, other) -> Tensor:
        # only division by constants is needed
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other) -> Tensor:
        other = as_tensor(other)
        a, b = self, other
        if a.ndim < 1 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
            raise GraphError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

        def back(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                a2 = a.data.reshape(-1, a.shape[-1])
                b._accum(a2.T @ g.reshape(-1, g.shape[-1]))

        return Tensor._make(a.data @ b.data, (a, b), "matmul", back)

    def square(self) -> Tensor:
        a = self
        return Tensor._make(a.data * a.data, (a,), "square", lambda g: a._accum(2.0 * a.data * g))

    # -- nonlinearities ---------------------------------------------------------
    def tanh(self) -> Tensor:
        a = self
        y = np.tanh(a.data)
        return Tensor._make(y, (a,), "tanh", lambda g: a._accum(g * (1.0 - y * y)))

    def sigmoid(self) -> Tensor:
        a = self
        y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
        return Tensor._make(y, (a,), "sigmoid", lambda g: a._accum(g * y * (1.0 - y)))

    def exp(self) -> Tensor:
        a = self
        y = np.exp(a.data)
        return Tensor._make(y, (a,), "exp", lambda g: a._accum(g * y))

    def log(self) -> Tensor:
        a = self
        with np.errstate(invalid="ignore", divide="ignore"):
            y = np.log(a.data)
        return Tensor._make(y, (a,), "log", lambda g: a._accum(g / a.data))

    def relu(self) -> Tensor:
        a = self
        mask = a.data > 0
        return Tensor._make(a.data * mask, (a,), "relu", lambda g: a._accum(g * mask))

    def clip(self, lo: float, hi: float) -> Tensor:
        """Clamp into ``[lo, hi]``; the gradient is zero where the input lies outside."""
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor._make(np.clip(a.data, lo, hi), (a,), "clip", lambda g: a._accum(g * mask))

    # -- reductions ---------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", back)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return (self.sum(axis=axis, keepdims=keepdims) * (1.0 / n))._rename("mean")

    def min(self, axis: int = -1) -> Tensor:
        """Minimum along ``axis``; ties route the gradient to the first minimum."""
        a = self
        idx = np.argmin(a.data, axis=axis)
        out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def back(g):
            full = np.zeros(a.shape)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            a._accum(full)

        return Tensor._make(out, (a,), "min", back)

    def sqnorm(self, axis: int = -1) -> Tensor:
        """Squared Euclidean norm along ``axis``."""
        a = self

        def back(g):
            a._accum(2.0 * a.data * np.expand_dims(g, axis))

        return Tensor._make((a.data * a.data).sum(axis=axis), (a,), "sqnorm", back)

    # -- shape ops ----------------------------------------------------------------
    def reshape(self, *shape) -> Tensor:
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: a._accum(g.reshape(a.shape)))

    def transpose(self, *axes) -> Tensor:
        a = self
        axes = axes or tuple(reversed(range(a.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(a.data.transpose(axes), (a,), "transpose", lambda g: a._accum(g.transpose(inv)))

    def broadcast_to(self, shape) -> Tensor:
        a = self
        return Tensor._make(
            np.broadcast_to(a.data, shape), (a,), "broadcast", lambda g: a._accum(_unbroadcast(g, a.shape))
        )

    def __getitem__(self, key) -> Tensor:
        a = self

        def back(g):
            full = np.zeros(a.shape)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor._make(a.data[key], (a,), "slice", back)

    def _rename(self, op: str) -> Tensor:
        self.op = op
        return self

    # -- backward ------------------------------------------------------------------
    def topo(self) -> list[Tensor]:
        """Nodes reachable from this one, operands before their consumers."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, seed: np.ndarray | float | None = None) -> None:
        if seed is None:
            if self.data.size != 1:
                raise GraphError(f"backward() needs a scalar output, got shape {self.shape}")
            seed = np.ones(self.shape)
        order = self.topo()
        for node in order:
            if node._backward is not None:
                node.grad = None
        self.grad = np.broadcast_to(np.asarray(seed, dtype=np.float64), self.shape).copy()
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat", back)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [t.reshape(t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)._rename("stack")


def where_first_min(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """One-hot mask of the first minimal entry along ``axis`` (the subgradient used by ``min``)."""
    idx = np.argmin(x, axis=axis)
    mask = np.zeros_like(x, dtype=bool)
    np.put_along_axis(mask, np.expand_dims(idx, axis), True, axis=axis)
    return mask


# -- functional graph interface --------------------------------------------------

class _Bindings(dict):
    def __missing__(self, key):
        raise GraphError(f"unbound leaf {key!r}")


def _bind(bindings: Mapping[str, np.ndarray], requires_grad: bool) -> _Bindings:
    return _Bindings({k: Tensor(v, requires_grad=requires_grad) for k, v in bindings.items()})


def evaluate(graph: Callable, bindings: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Run ``graph`` on the named leaves and return its outputs as arrays.

    ``graph`` is any callable taking a mapping of leaf tensors and returning a
    tensor or a mapping of tensors; a bare tensor is returned under ``"out"``.
    Non-finite intermediates raise :class:`NonFiniteError` naming the node.
    """
    with _checking():
        try:
            out = graph(_bind(bindings, requires_grad=False))
        except ValueError as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(str(exc)) from exc
    if isinstance(out, Tensor):
        out = {"out": out}
    return {k: v.numpy() for k, v in out.items()}


def gradient(graph: Callable, bindings: Mapping[str, np.ndarray], output: str | None = None) -> dict[str, np.ndarray]:
    """Gradient of a scalar graph output with respect to every bound leaf."""
    with _checking():
        leaves = _bind(bindings, requires_grad=True)
        try:
            out = graph(leaves)
        except ValueError as exc:
            if isinstance(exc, GraphError):
                raise
            raise GraphError(str(exc)) from exc
    if isinstance(out, Mapping):
        if output is None:
            raise GraphError("graph returns several outputs; name one")
        out = out[output]
    if out.data.size != 1:
        raise GraphError(f"gradient needs a scalar output, got shape {out.shape}")
    out.backward()
    return {k: (t.grad.copy() if t.grad is not None else np.zeros(t.shape)) for k, t in leaves.items()}


def trace(graph: Callable, bindings: Mapping[str, np.ndarray]) -> list[str]:
    """Op names of the recorded graph in topological order (for inspection)."""
    out = graph(_bind(bindings, requires_grad=True))
    if isinstance(out, Mapping):
        out = next(iter(out.values()))
    return [n.op for n in out.topo()]


# -- Adam ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: Mapping[str, np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
    return AdamState(m=zeros, v={k: z.copy() for k, z in zeros.items()}, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.  Inputs are left untouched."""
    if state.step < 0:
        raise ValueError("Adam step counter must be non-negative")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p) or state.m[name].shape != g.shape:
            raise GraphError(f"Adam shape mismatch for {name!r}: {np.shape(p)} vs {g.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)
