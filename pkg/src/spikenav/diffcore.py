"""Minimal dense-tensor autodiff engine with spike-threshold surrogate gradients.

Eager reverse-mode differentiation over float64 numpy arrays. Each operation
records its parents and a backward closure; ``backward()`` on a scalar loss
walks the graph in reverse topological order and accumulates gradients into
every tensor that requires them. Broadcasting is restricted to row-vector
bias style ((m, n) op (n,)) and scalars; anything fancier raises.

The one non-standard piece is the spike nonlinearity family: ``spike_threshold``
is a hard step in the forward pass but backpropagates a triangular
pseudo-derivative, and ``graded_spike`` passes the thresholded value itself
with a scaled straight-through window. ``spike_surrogate_integral`` is the
smooth antiderivative of the triangular window, used to build differentiable
proxy networks for gradient checking.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An operation precondition was violated (e.g. non-scalar loss)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


@dataclass(frozen=True)
class SurrogateParams:
    """Triangular pseudo-derivative: peak ``s_grad`` at the threshold,
    linearly decaying to zero at distance ``tau_grad``."""

    v_th: float
    tau_grad: float
    s_grad: float

    def __post_init__(self):
        if not (self.tau_grad > 0 and self.s_grad > 0):
            raise ContractError("tau_grad and s_grad must be positive")

    def window(self, v: np.ndarray) -> np.ndarray:
        """g(v) = s_grad * max(0, 1 - |v - v_th| / tau_grad)."""
        return self.s_grad * np.maximum(0.0, 1.0 - np.abs(v - self.v_th) / self.tau_grad)


class Tensor:
    """A dense float64 array plus optional gradient buffer and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    # -- introspection -------------------------------------------------

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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- gradient management -------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        The loss must be scalar (a single element). Repeated calls without
        zeroing accumulate, which is what optimizers over minibatches expect.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._backward is None:
                node._accumulate(g)
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    if parent._backward is None:
                        parent._accumulate(pg)
                    else:
                        key = id(parent)
                        if key in grads:
                            grads[key] = grads[key] + pg
                        else:
                            grads[key] = pg

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), iterative to spare the stack."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    order.reverse()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to an operand's shape (row-vector/scalar only)."""
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    if len(shape) == 1 and g.ndim == 2 and g.shape[1] == shape[0]:
        return g.sum(axis=0)
    raise DimensionError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape:
        return
    if b.shape == () or a.shape == ():
        return
    # row-vector bias: (m, n) with (n,)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return
    if b.ndim == 2 and a.ndim == 1 and b.shape[1] == a.shape[0]:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not align")


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _make(a.data * b.data, (a, b), backward, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return ((a, -g),)

    return _make(-a.data, (a,), backward, "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims {a.shape} x {b.shape}")

    def backward(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return ((a, g.T),)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        return ((a, g.reshape(old)),)

    return _make(a.data.reshape(shape), (a,), backward, "reshape")


def take_row(a, i: int) -> Tensor:
    """Row ``i`` of a 2-D tensor as a (1, n) tensor."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError("take_row expects a 2-D tensor")

    def backward(g):
        full = np.zeros_like(a.data)
        full[i, :] = g[0, :]
        return ((a, full),)

    return _make(a.data[i : i + 1, :].copy(), (a,), backward, "take_row")


def stack_rows(rows) -> Tensor:
    """Stack a list of (1, n) tensors into (T, n), routing gradients per row."""
    rows = [_as_tensor(r) for r in rows]
    if not rows:
        raise ContractError("stack_rows needs at least one row")
    for r in rows:
        if r.ndim != 2 or r.shape[0] != 1 or r.shape[1] != rows[0].shape[1]:
            raise DimensionError("stack_rows expects uniform (1, n) rows")

    def backward(g):
        return tuple((r, g[t : t + 1, :]) for t, r in enumerate(rows))

    return _make(np.vstack([r.data for r in rows]), tuple(rows), backward, "stack_rows")


# -- nonlinearities and reductions ----------------------------------------


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backward(g):
        return ((a, g * (1.0 - y * y)),)

    return _make(y, (a,), backward, "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def backward(g):
        return ((a, g * y),)

    return _make(y, (a,), backward, "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return ((a, g / a.data),)

    return _make(np.log(a.data), (a,), backward, "log")


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed overflow-free; derivative is the sigmoid."""
    a = _as_tensor(a)
    x = a.data
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        return ((a, g * sig),)

    return _make(y, (a,), backward, "softplus")


def tsum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        def backward(g):
            return ((a, np.full_like(a.data, float(g))),)

        return _make(np.asarray(a.data.sum()), (a,), backward, "sum")
    if a.ndim != 2 or axis not in (0, 1):
        raise DimensionError("axis sum supports 2-D tensors, axis 0 or 1")

    def backward_ax(g):
        return ((a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()),)

    return _make(a.data.sum(axis=axis), (a,), backward_ax, f"sum{axis}")


def tmean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size

        def backward(g):
            return ((a, np.full_like(a.data, float(g) / n)),)

        return _make(np.asarray(a.data.mean()), (a,), backward, "mean")
    if a.ndim != 2 or axis not in (0, 1):
        raise DimensionError("axis mean supports 2-D tensors, axis 0 or 1")
    n = a.shape[axis]

    def backward_ax(g):
        return ((a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy()),)

    return _make(a.data.mean(axis=axis), (a,), backward_ax, f"mean{axis}")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only through the interior."""
    a = _as_tensor(a)
    inside = (a.data > lo) & (a.data < hi)

    def backward(g):
        return ((a, g * inside),)

    return _make(np.clip(a.data, lo, hi), (a,), backward, "clip")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError("minimum expects equal shapes")
    take_a = a.data <= b.data

    def backward(g):
        return ((a, g * take_a), (b, g * ~take_a))

    return _make(np.minimum(a.data, b.data), (a, b), backward, "minimum")


# -- spike operations ------------------------------------------------------


def spike_threshold(v, p: SurrogateParams) -> Tensor:
    """Binary step 1[v >= v_th] with the triangular surrogate backward."""
    v = _as_tensor(v)
    spikes = (v.data >= p.v_th).astype(np.float64)

    def backward(g):
        return ((v, g * p.window(v.data)),)

    return _make(spikes, (v,), backward, "spike")


def graded_spike(u, v_th: float, p: SurrogateParams) -> Tensor:
    """Emit the full value where |u| >= v_th, zero elsewhere.

    Backward is a scaled straight-through: incoming gradient times ``s_grad``
    wherever ``|u|`` lies within ``tau_grad`` of the emission threshold, zero
    outside. Keeps gradients bounded without modelling the jump.
    """
    u = _as_tensor(u)
    emit = np.abs(u.data) >= v_th
    window = np.abs(np.abs(u.data) - v_th) <= p.tau_grad

    def backward(g):
        return ((u, g * (p.s_grad * window)),)

    return _make(u.data * emit, (u,), backward, "graded_spike")


def spike_surrogate_integral(v, p: SurrogateParams) -> Tensor:
    """Smooth stand-in for ``spike_threshold``: the exact antiderivative of
    the triangular window, so finite differences agree with the backward pass.

    Piecewise: 0 below the window, a quadratic ramp across it, and the
    constant ``s_grad * tau_grad`` (the triangle's area) above.
    """
    v = _as_tensor(v)
    x = v.data
    lo, th, hi = p.v_th - p.tau_grad, p.v_th, p.v_th + p.tau_grad
    area = p.s_grad * p.tau_grad
    y = np.zeros_like(x)
    rising = (x > lo) & (x <= th)
    falling = (x > th) & (x < hi)
    d = x - lo
    y[rising] = 0.5 * p.s_grad / p.tau_grad * d[rising] ** 2
    e = hi - x
    y[falling] = area - 0.5 * p.s_grad / p.tau_grad * e[falling] ** 2
    y[x >= hi] = area

    def backward(g):
        return ((v, g * p.window(x)),)

    return _make(y, (v,), backward, "spike_smooth")


# -- verification -----------------------------------------------------------


def finite_diff_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between analytic d f/d x and central differences.

    ``f`` must be deterministic and must read ``x`` through graph operations.
    Relative error uses max(1e-8, |numeric|) in the denominator.
    """
    x.zero_grad()
    loss = f(x)
    loss.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    worst = 0.0
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = f(x).item()
            flat[i] = orig - eps
            f_lo = f(x).item()
            flat[i] = orig
            numeric = (f_hi - f_lo) / (2.0 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
