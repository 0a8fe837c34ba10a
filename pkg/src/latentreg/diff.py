"""A small reverse-mode automatic differentiation engine and its optimizer.

Operations record themselves on the innermost active :class:`Tape`::

    with Tape() as tape:
        w = Tensor(np.ones(3), requires_grad=True, name="w")
        loss = sum_(mul(w, w))
    grads = tape.backward(loss)     # {w: array([2., 2., 2.])}

Every op follows the dtype of its inputs, so the same graph runs in float64
(for gradient checks and pose descents) or float32 (for bulk training).
Tapes are thread-local; independent tapes can run concurrently.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "ShapeError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "affine",
    "relu",
    "max_pool_points",
    "concat",
    "reshape",
    "transpose",
    "sum_",
    "mean",
    "squared_l2",
    "row_norm",
    "gather_rows",
    "so3_exp",
    "OptimState",
    "AdamW",
    "adamw_step",
    "PlateauSchedule",
    "plateau_schedule",
]

_local = threading.local()


class ShapeError(ValueError):
    pass


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


class Tape:
    """Records the nodes created while it is active, in creation order."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> Tape:
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def backward(self, out: Tensor) -> dict:
        """Gradients of scalar ``out`` w.r.t. every leaf that requires grad.

        Nodes are visited once each, in reverse creation order (a valid
        reverse topological order). Gradients are also stored on ``leaf.grad``.
        """
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
        grads = {id(out): np.ones_like(out.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._parents == ():
                    leaves[key] = parent
        result = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            result[leaf] = grads[key]
        if out._parents == () and out.requires_grad:
            out.grad = np.ones_like(out.data)
            result[out] = out.grad
        return result


class Tensor:
    """An ndarray plus the provenance needed for the backward pass."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        stack = _stack()
        if stack:
            stack[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``np.matmul`` semantics, including batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading batch dims)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"affine: x {x.shape}, W {w.shape}, b {b.shape} do not fit")
    lead = x.shape[:-1]

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g @ w.data.T) if x.requires_grad else None
        gw = (x.data.reshape(-1, w.shape[0]).T @ g2) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    out = (x.data.reshape(-1, w.shape[0]) @ w.data + b.data).reshape(lead + (w.shape[1],))
    return _make(out, (x, w, b), backward)


def max_pool_points(x) -> Tensor:
    """Per-feature max over the point axis: ``(..., k, f) -> (..., f)``.

    Ties go to the lowest point index, which is also where the gradient goes.
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"max_pool_points needs (..., k, f), got {x.shape}")
    idx = np.argmax(x.data, axis=-2)
    out = np.take_along_axis(x.data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return _make(out, (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(data, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def gather_rows(x, idx) -> Tensor:
    """``out[..., i, :] = x[..., idx[..., i], :]`` with constant integer ``idx``."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    out = np.take_along_axis(x.data, idx[..., None], axis=-2)

    def backward(g):
        k, f = x.shape[-2:]
        batch = int(np.prod(x.shape[:-2], dtype=np.int64))
        flat_idx = (idx.reshape(batch, -1) + (np.arange(batch) * k)[:, None]).ravel()
        gx = np.zeros((batch * k, f), dtype=x.data.dtype)
        np.add.at(gx, flat_idx, g.reshape(-1, f))
        return (gx.reshape(x.shape),)

    return _make(out, (x,), backward)


# -- reductions ----------------------------------------------------------------

def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis=axis), 1.0 / n)


def squared_l2(x, y) -> Tensor:
    """``sum((x - y)^2)`` as a scalar."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ShapeError(f"squared_l2: shapes {x.shape} and {y.shape} differ")
    d = x.data - y.data
    return _make(np.sum(d * d), (x, y), lambda g: (2 * g * d, -2 * g * d))


def row_norm(x) -> Tensor:
    """Euclidean norm over the last axis; the gradient at a zero row is zero."""
    x = as_tensor(x)
    n = np.sqrt(np.sum(x.data * x.data, axis=-1))

    def backward(g):
        safe = np.where(n > 0, n, 1)
        return (x.data * (g / safe * (n > 0))[..., None],)

    return _make(n, (x,), backward)


# -- rotations ------------------------------------------------------------------

def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _exp_and_jacobians(v):
    """Rotation ``exp([v]_x)`` and its three partial derivatives."""
    theta = math.sqrt(float(v @ v))
    k = _skew(v)
    eye = np.eye(3)
    if theta < 1e-8:
        r = eye + k + 0.5 * (k @ k)
        return r, [_skew(eye[i]) @ r for i in range(3)]
    r = eye + math.sin(theta) / theta * k + (1 - math.cos(theta)) / theta**2 * (k @ k)
    # closed-form derivative of the exponential map (left-trivialised)
    jac = [(v[i] * k + _skew(np.cross(v, (eye - r) @ eye[i]))) @ r / theta**2 for i in range(3)]
    return r, jac


def so3_exp(w) -> Tensor:
    """Rotation matrices ``exp([w]_x)`` from rotation vectors ``(..., 3)``, exact derivative."""
    w = as_tensor(w)
    if w.shape[-1:] != (3,):
        raise ShapeError(f"so3_exp needs rotation vectors (..., 3), got {w.shape}")
    flat = w.data.reshape(-1, 3).astype(np.float64)
    pairs = [_exp_and_jacobians(v) for v in flat]
    r = np.stack([p[0] for p in pairs]).reshape(w.shape[:-1] + (3, 3))

    def backward(g):
        gf = g.reshape(-1, 3, 3)
        gw = np.array([[np.sum(gf[n] * dr) for dr in pairs[n][1]] for n in range(len(pairs))])
        return (gw.reshape(w.shape).astype(w.data.dtype),)

    return _make(r.astype(w.data.dtype), (w,), backward)


# -- optimisation ------------------------------------------------------------------

@dataclass
class OptimState:
    """AdamW moments plus the plateau tracker used by :func:`plateau_schedule`."""

    lr: float = 1e-2
    weight_decay: float = 1e-2
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best: float = math.inf
    bad_lr: int = 0
    bad_stop: int = 0
    reductions: int = 0


def adamw_step(params: dict, grads: dict, state: OptimState) -> tuple[dict, OptimState]:
    """One AdamW update of ``params`` (name -> array) in place.

    Decay is a separate multiplicative shrink ``p *= 1 - lr * wd`` applied
    before the Adam move, never folded into the gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class AdamW:
    """Thin object wrapper over :func:`adamw_step` for :class:`Tensor` leaves."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 1e-2,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        names = [p.name or f"param{i}" for i, p in enumerate(self.params)]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.names = names
        self.state = OptimState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    @property
    def lr(self) -> float:
        return self.state.lr

    def step(self, grads: dict) -> None:
        arrays = {n: p.data for n, p in zip(self.names, self.params)}
        named = {n: grads[p] for n, p in zip(self.names, self.params) if p in grads}
        adamw_step(arrays, named, self.state)


def plateau_schedule(state: OptimState, loss: float, factor: float = 10.0,
                     patience_lr: int = 10, patience_stop: int = 100,
                     threshold: float = 0.0) -> bool:
    """Track the best loss; cut the lr on plateaus and report when to stop.

    A loss counts as an improvement when it is below ``best * (1 - threshold)``
    (plain ``< best`` with the default threshold of zero). After
    ``patience_lr`` non-improving calls the lr is divided by ``factor`` and that
    counter restarts; after ``patience_stop`` consecutive non-improving calls
    the return value is True.
    """
    loss = float(loss)
    if not math.isfinite(loss):
        raise FloatingPointError(f"plateau schedule received a non-finite loss {loss!r}")
    limit = state.best - abs(state.best) * threshold if math.isfinite(state.best) else math.inf
    if loss < limit:
        state.best = loss
        state.bad_lr = 0
        state.bad_stop = 0
        return False
    state.bad_lr += 1
    state.bad_stop += 1
    if state.bad_lr >= patience_lr:
        state.lr /= factor
        state.bad_lr = 0
        state.reductions += 1
    return state.bad_stop >= patience_stop


class PlateauSchedule:
    def __init__(self, factor: float = 10.0, patience_lr: int = 10,
                 patience_stop: int = 100, threshold: float = 0.0):
        self.factor = factor
        self.patience_lr = patience_lr
        self.patience_stop = patience_stop
        self.threshold = threshold

    def __call__(self, state: OptimState, loss: float) -> bool:
        return plateau_schedule(state, loss, self.factor, self.patience_lr,
                                self.patience_stop, self.threshold)
