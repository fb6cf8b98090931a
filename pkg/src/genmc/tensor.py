"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value the model computes is a :class:`Tensor`.  Operations record their
inputs and a backward rule; :func:`backward` walks the recorded graph in
reverse topological order, visiting each node once, and accumulates
``dLoss/dLeaf`` into the ``grad`` buffer of every leaf that requires grad.

Layout convention: sequences are stored token-major, ``[..., L, d]``, so a
per-position representation is a row.  Leading axes are batch axes; they must
match exactly between operands (the only implicit broadcast is adding a bias
over trailing axes, or adding a constant mask).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
NEG_INF = -1e9  # additive mask value for blocked positions

_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self.op = "leaf"
        self._prev: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward_fn: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._prev = tuple(parents)
            out._backward = backward_fn
        else:
            out._prev = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # -- operators --------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce ``grad`` over leading axes so it matches a trailing-axis bias shape."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


# -- elementwise ------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
            pass
        elif a.ndim < b.ndim and b.shape[b.ndim - a.ndim:] == a.shape:
            a, b = b, a
        else:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    sb = b.shape

    def bw(g):
        return g, _sum_to(g, sb)

    return Tensor._result(a.data + b.data, (a, b), "add", bw)


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """``x + c`` for a non-differentiable array ``c`` that numpy-broadcasts to ``x``."""
    out = x.data + c
    if out.shape != x.shape:
        raise ShapeError(f"add_constant: constant {np.shape(c)} would reshape {x.shape}")
    return Tensor._result(out, (x,), "add_const", lambda g: (g,))


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), "neg", lambda g: (-g,))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._result(a.data * c, (a,), "scale", lambda g: (g * c,))
    if not isinstance(a, Tensor):
        return mul(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor._result(np.where(pos, x.data, 0.0), (x,), "relu", lambda g: (g * pos,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), "exp", lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), "log", lambda g: (g / xd,))


# -- shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), "reshape",
                          lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return Tensor._result(np.swapaxes(x.data, -1, -2), (x,), "transpose",
                          lambda g: (np.swapaxes(g, -1, -2),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), "permute",
                          lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[idx] += g
        return (full,)

    return Tensor._result(np.array(x.data[idx], dtype=DTYPE), (x,), "index", bw)


def take(x: Tensor, ids, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated ids scatter-add in backward."""
    ids = np.asarray(ids, dtype=np.int64)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, ids, np.moveaxis(g, axis, 0))
        return (full,)

    return Tensor._result(np.take(x.data, ids, axis=axis), (x,), "take", bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [t for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim) if i != axis):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tensors, "concat", bw)


def concat_time(a: Tensor, b: Tensor) -> Tensor:
    """Join two ``[..., L, d]`` sequences along time: rows of ``a`` then rows of ``b``."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_time: widths {a.shape} and {b.shape} differ")
    return concat([a, b], axis=-2)


def detach(x: Tensor) -> Tensor:
    """Same values, no edge back to ``x``."""
    return Tensor(x.data.copy())


# -- reductions ---------------------------------------------------------------

def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return Tensor._result(np.array(x.data.sum()), (x,), "sum",
                          lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return Tensor._result(np.array(x.data.mean()), (x,), "mean",
                          lambda g: (np.full(shape, float(g) / n),))


def weighted_sum(x: Tensor, w: np.ndarray) -> Tensor:
    """Scalar ``sum(x * w)`` for a constant weight array ``w`` of x's shape."""
    w = np.asarray(w, dtype=DTYPE)
    if w.shape != x.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} vs tensor {x.shape}")
    return Tensor._result(np.array((x.data * w).sum()), (x,), "wsum",
                          lambda g: (float(g) * w,))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.  ``b`` may be a 2-D weight shared across a's batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), "matmul", bw)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x[..., din]``, ``w[din, dout]``, ``b[dout]``."""
    y = matmul(x, w) if x.ndim >= 2 else reshape(matmul(reshape(x, (1, -1)), w), (-1,))
    return y if b is None else add(y, b)


# -- normalisation / probabilities --------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("softmax: NaN in input")
    z = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), "softmax", bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NumericError("log_softmax: NaN in input")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), "log_softmax", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then ``gamma * xhat + beta``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: empty input")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to(g * xhat, (d,)), _sum_to(g, (d,))

    return Tensor._result(xhat * gd + beta.data, (x, gamma, beta), "layer_norm", bw)


def max_pool_time(h: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Max over the time axis of ``h[..., L, d]`` -> ``[..., d]``.

    ``mask`` is an additive constant broadcastable to ``h`` (``NEG_INF`` at
    padded rows).  Ties route the gradient to the first maximal position.
    """
    if h.ndim < 2 or h.shape[-2] == 0:
        raise ShapeError(f"max_pool_time: empty time axis in {h.shape}")
    vals = h.data if mask is None else h.data + mask
    arg = vals.argmax(axis=-2)
    out = np.take_along_axis(h.data, arg[..., None, :], axis=-2)[..., 0, :]
    shape = h.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return (full,)

    return Tensor._result(out, (h,), "max_pool", bw)


def cross_entropy_rows(logits: Tensor, targets, weights=None) -> Tensor:
    """``sum_i w_i * -log softmax(logits_i)[t_i]`` over the rows of ``logits[N, V]``."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows: expected [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != n:
        raise ShapeError(f"cross_entropy_rows: {t.shape[0]} targets for {n} rows")
    if ((t < 0) | (t >= v)).any():
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    w = np.ones(n, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    xd = logits.data
    if np.isnan(xd).any():
        raise NumericError("cross_entropy: NaN in logits")
    shifted = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    losses = lse - shifted[rows, t]
    p = np.exp(shifted - lse[:, None])

    def bw(g):
        d = p.copy()
        d[rows, t] -= 1.0
        return (d * (w * float(g))[:, None],)

    return Tensor._result(np.array((losses * w).sum()), (logits,), "cross_entropy", bw)


def cross_entropy_from_logits(logits: Tensor, target: int) -> Tensor:
    """Scalar ``-log softmax(logits)[target]`` for a 1-D logit vector."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy_from_logits: expected 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= int(target) < n:
        raise IndexError(f"cross_entropy: target {target} out of range [0, {n})")
    return cross_entropy_rows(reshape(logits, (1, n)), [int(target)])


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table[V, d]`` at ``ids`` (any int array shape) -> ``[*ids.shape, d]``."""
    ids = np.asarray(ids, dtype=np.int64)
    v = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise IndexError(f"embedding_lookup: id outside [0, {v})")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return Tensor._result(table.data[ids], (table,), "embedding", bw)


# -- graph traversal ----------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` (through grad-tracking edges), inputs before outputs."""
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
        for p in reversed(node._prev):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ``dloss/dleaf`` into every reachable leaf's ``grad``.

    Gradients add onto existing buffers; call ``zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._prev, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.isfinite(pg).all():
                label = node.name or node.op
                raise NumericError(f"backward: non-finite gradient produced at node {label!r} "
                                   f"(output shape {node.shape})")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
