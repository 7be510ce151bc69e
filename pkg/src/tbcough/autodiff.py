"""Dense-tensor reverse-mode automatic differentiation on top of numpy.

Graphs are built define-by-run: every op applied to a :class:`Tensor` that
requires a gradient records its parents and a vector-Jacobian product.
Calling :func:`backward` on a scalar walks the recorded graph once in
reverse topological order.

Elementwise ops follow numpy broadcasting; gradients are summed back to
the operand shape.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_ids = itertools.count()

#: Raise on NaN/inf in any op output. Tests rely on this being on.
CHECK_FINITE = True


class GraphError(RuntimeError):
    """Misuse of the graph API (non-scalar seed, backward before forward...)."""


class ShapeError(ValueError):
    def __init__(self, op: str, node: int, detail: str):
        super().__init__(f"shape mismatch in node {node} ({op}): {detail}")
        self.op = op
        self.node = node


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, node: int):
        super().__init__(f"non-finite value produced by node {node} ({op})")
        self.op = op
        self.node = node


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "id", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, vjp: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(op, out.id)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, next(_ids), f"{a.shape} vs {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _node(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _node(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), "div", vjp)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise unary ------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return _node(a.data ** exponent, (a,), "pow",
                 lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(np.where(keep, a.data, 0).astype(a.dtype), (a,), "relu",
                 lambda g: (g * keep,))


def dropout(a: Tensor, keep_prob: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout. Identity (same object) when not training."""
    if not train or keep_prob >= 1.0:
        return a
    if rng is None:
        raise GraphError("dropout in train mode needs an rng")
    mask = (rng.random(a.shape) < keep_prob).astype(a.dtype) / a.dtype.type(keep_prob)
    return _node(a.data * mask, (a,), "dropout", lambda g: (g * mask,))


# -- reductions and shape ops -----------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), "sum", vjp)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) / float(n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", next(_ids), f"{a.shape} -> {shape}") from None
    return _node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), "transpose",
                 lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out, copy=True), (a,), "getitem", vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", next(_ids), str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tensors, "concat", vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError("stack", next(_ids), str(exc)) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(out, tensors, "stack", vjp)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """(..., n, k) @ (k, m) or batched (B, n, k) @ (B, k, m)."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError("matmul", next(_ids), f"{a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), "matmul", vjp)


# -- normalisations ---------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,), "softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_softmax(a: Tensor, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to ``mask`` entries; masked entries get exactly 0."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError("masked_softmax", next(_ids), f"mask {mask.shape} vs {a.shape}")
    if not np.all(mask.any(axis=axis)):
        raise GraphError("masked_softmax: a row has no unmasked entries")
    z = np.where(mask, a.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)
    return _node(out, (a,), "masked_softmax",
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = a.data - lse
    soft = np.exp(out)
    return _node(out, (a,), "log_softmax",
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.maximum(np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)), eps)
    out = a.data / norm
    return _node(out, (a,), "l2_normalize",
                 lambda g: ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,))


# -- fused recurrent primitive ----------------------------------------------

def lstm(x: Tensor, mask: np.ndarray, w_ih: Tensor, w_hh: Tensor, bias: Tensor,
         reverse: bool = False) -> Tensor:
    """Single-direction LSTM over a padded batch.

    ``x`` is (B, T, d), ``mask`` (B, T) with 1 on true frames, ``w_ih``
    (d, 4H), ``w_hh`` (H, 4H), ``bias`` (4H,). Gate order is i, f, g, o.
    On masked steps the state is carried unchanged, so in the forward
    direction step T-1 holds the state at each sample's last true frame and
    in the reverse direction padded steps stay at the zero initial state.
    Returns the per-step hidden states, (B, T, H).
    """
    B, T, d = x.shape
    H = w_hh.shape[0]
    if w_ih.shape != (d, 4 * H) or w_hh.shape != (H, 4 * H) or bias.shape != (4 * H,):
        raise ShapeError("lstm", next(_ids),
                         f"x {x.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape}, b {bias.shape}")
    m = np.asarray(mask, dtype=x.dtype)
    if m.shape != (B, T):
        raise ShapeError("lstm", next(_ids), f"mask {m.shape} vs {(B, T)}")
    dt = x.dtype
    xw = x.data @ w_ih.data + bias.data
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h = np.zeros((B, H), dtype=dt)
    c = np.zeros((B, H), dtype=dt)
    out = np.empty((B, T, H), dtype=dt)
    cache = {}
    whh = w_hh.data
    for t in steps:
        a = xw[:, t] + h @ whh
        i = _sigmoid(a[:, :H])
        f = _sigmoid(a[:, H:2 * H])
        gg = np.tanh(a[:, 2 * H:3 * H])
        o = _sigmoid(a[:, 3 * H:])
        c_new = f * c + i * gg
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t:t + 1]
        cache[t] = (h, c, i, f, gg, o, tc, mt)
        h = mt * h_new + (1 - mt) * h
        c = mt * c_new + (1 - mt) * c
        out[:, t] = h

    def vjp(g):
        da_all = np.zeros((B, T, 4 * H), dtype=dt)
        dwhh = np.zeros_like(whh)
        dh = np.zeros((B, H), dtype=dt)
        dc = np.zeros((B, H), dtype=dt)
        for t in reversed(list(steps)):
            h_prev, c_prev, i, f, gg, o, tc, mt = cache[t]
            dh = dh + g[:, t]
            dh_new = mt * dh
            dc_new = mt * dc + dh_new * o * (1 - tc * tc)
            da = da_all[:, t]
            da[:, :H] = dc_new * gg * i * (1 - i)
            da[:, H:2 * H] = dc_new * c_prev * f * (1 - f)
            da[:, 2 * H:3 * H] = dc_new * i * (1 - gg * gg)
            da[:, 3 * H:] = dh_new * tc * o * (1 - o)
            dwhh += h_prev.T @ da
            dh = (1 - mt) * dh + da @ whh.T
            dc = (1 - mt) * dc + dc_new * f
        dx = da_all @ w_ih.data.T
        dwih = x.data.reshape(-1, d).T @ da_all.reshape(-1, 4 * H)
        return dx, dwih, dwhh, da_all.sum(axis=(0, 1))

    return _node(out, (x, w_ih, w_hh, bias), "lstm", vjp)


# -- graph traversal --------------------------------------------------------

def toposort(roots: Iterable[Tensor]) -> list[Tensor]:
    """Nodes reachable from ``roots`` through differentiable edges, inputs first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    for root in roots:
        if root.id in seen:
            continue
        stack = [(root, iter(root._parents))]
        seen.add(root.id)
        while stack:
            node, parents = stack[-1]
            for p in parents:
                if p.id not in seen and p.requires_grad:
                    seen.add(p.id)
                    stack.append((p, iter(p._parents)))
                    break
            else:
                stack.pop()
                order.append(node)
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every differentiable leaf."""
    if root.data.size != 1:
        raise GraphError(f"backward seed must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(toposort([root])):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else prev + pg


class Graph:
    """A recorded computation with named free inputs and named outputs.

    ``fn`` maps a dict of bound input tensors to a dict of output tensors.
    """

    def __init__(self, fn: Callable[[dict[str, Tensor]], Mapping[str, Tensor]]):
        self.fn = fn
        self.bindings: dict[str, Tensor] | None = None
        self.outputs: dict[str, Tensor] | None = None
        self.nodes: list[Tensor] = []

    def evaluate(self, bindings: Mapping[str, object]) -> dict[str, np.ndarray]:
        bound = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in bindings.items()}
        outputs = dict(self.fn(bound))
        self.bindings = bound
        self.outputs = outputs
        self.nodes = toposort(outputs.values())
        return {k: v.data for k, v in outputs.items()}

    def backward(self, seed: str) -> dict[str, np.ndarray]:
        if self.outputs is None:
            raise GraphError("backward called before evaluate")
        if seed not in self.outputs:
            raise GraphError(f"unknown output {seed!r}")
        leaves = {k: t for k, t in self.bindings.items() if t.requires_grad}
        for t in leaves.values():
            t.grad = None
        backward(self.outputs[seed])
        return {k: t.grad if t.grad is not None else np.zeros_like(t.data)
                for k, t in leaves.items()}


def evaluate(graph: Graph, bindings: Mapping[str, object]) -> dict[str, np.ndarray]:
    return graph.evaluate(bindings)


def gradients(graph: Graph, seed_output: str) -> dict[str, np.ndarray]:
    return graph.backward(seed_output)


def grad_check(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor. Everything
    runs in double precision.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    x = Tensor(point.copy(), requires_grad=True)
    y = fn(x)
    if y.data.size != 1:
        raise GraphError("grad_check needs a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise NonFiniteError(y.op, y.id)
    backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(point)
    numeric = np.empty_like(point)
    flat = point.reshape(-1)
    num_flat = numeric.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = float(fn(Tensor(point)).data)
        flat[k] = orig - step
        fm = float(fn(Tensor(point)).data)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError("grad_check", -1)
        num_flat[k] = (fp - fm) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
