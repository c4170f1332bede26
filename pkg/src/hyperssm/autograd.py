"""Reverse-mode differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float64 array. Primitives build new tensors and,
when any input requires a gradient, attach a backward rule and append the
result to the active :class:`Tape`. :func:`backward` walks the tape in
reverse and accumulates gradients additively.

Only first-order gradients are supported.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    # -- array-ish conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise NotImplementedError("only squaring is supported")

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Ordered record of primitive applications.

    Used as a context manager; nested tapes shadow the outer one. Each thread
    has its own active-tape stack.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape = active_tape()
        if tape is not None:
            tape.record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# backward pass
# -----------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss)/d(node) to every node that requires a gradient.

    Leaf tensors get their ``grad`` attribute filled (added to any existing
    gradient). Returns a map from ``id(tensor)`` to gradient for leaves.
    When ``tape`` is given, its recorded order is used; otherwise the graph is
    sorted from ``loss``.
    """
    loss = as_tensor(loss)
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if tape is not None:
        nodes = [n for n in tape.nodes if n.requires_grad]
        if not any(n is loss for n in nodes):
            raise ValueError("loss was not recorded on this tape")
    else:
        nodes = _topo_order(loss)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            leaves[id(node)] = node
            grads[id(node)] = g
            continue
        in_grads = node.backward_fn(g)
        for parent, pg in zip(node.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.backward_fn is None:
                leaves[key] = parent

    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[key] = g
    return out


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> list[np.ndarray]:
    """Gradients of scalar ``f`` w.r.t. each positional numpy argument."""
    leaves = [Tensor(np.array(a, dtype=DTYPE), requires_grad=True) for a in args]
    with Tape() as tape:
        out = f(*leaves)
    backward(out, tape)
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-5,
    analytic: np.ndarray | None = None,
    rel_floor: float = 0.0,
) -> float:
    """Max relative error between the analytic and central-difference gradient.

    Error per coordinate is ``|analytic - fd| / (|fd| + floor)`` with
    ``floor = max(1e-8, rel_floor * max|fd|)``. For deep compositions a
    ``rel_floor`` around 1e-6 stops coordinates whose gradient is ~1e-7 of
    the largest one from measuring only central-difference noise. A NaN
    anywhere yields ``inf`` so the check fails loudly.
    """
    x = np.array(x, dtype=DTYPE)
    if analytic is None:
        (analytic,) = grad(f, x)
    fd = np.empty_like(x)
    flat, fd_flat = x.reshape(-1), fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(x)).data)
        flat[i] = orig - step
        lo = float(f(Tensor(x)).data)
        flat[i] = orig
        fd_flat[i] = (hi - lo) / (2 * step)
    floor = max(1e-8, rel_floor * float(np.max(np.abs(fd), initial=0.0)))
    err = np.abs(analytic - fd) / (np.abs(fd) + floor)
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max()) if err.size else 0.0


# -----------------------------------------------------------------------------
# elementwise arithmetic
# -----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), lambda g: (g * _sigmoid(-x),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _node(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def cosh(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cosh(a.data), (a,), lambda g: (g * np.sinh(a.data),))


def sinh(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.sinh(a.data), (a,), lambda g: (g * np.cosh(a.data),))


def arcosh(a) -> Tensor:
    """``arccosh`` with the argument clamped to ``>= 1``.

    Below 1 the gradient is 0 (clamped region); at the kink the derivative
    blows up, so ``u^2 - 1`` is floored at 1e-30 to keep it finite.
    """
    a = as_tensor(a)
    x = a.data
    xc = np.maximum(x, 1.0)
    out = np.arccosh(xc)

    def bw(g):
        d = 1.0 / np.sqrt(np.maximum(xc * xc - 1.0, 1e-30))
        return (np.where(x >= 1.0, g * d, 0.0),)

    return _node(out, (a,), bw)


def arcosh1p(a) -> Tensor:
    """``arccosh(1 + d)`` for ``d >= 0`` (negative ``d`` clamped to 0).

    Accurate for tiny ``d`` where forming ``1 + d`` first would round away.
    """
    a = as_tensor(a)
    x = a.data
    d = np.maximum(x, 0.0)
    root = np.sqrt(d * (d + 2.0))
    out = np.log1p(d + root)

    def bw(g):
        return (np.where(x >= 0.0, g / np.maximum(root, 1e-15), 0.0),)

    return _node(out, (a,), bw)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clamp with subgradient 1 inside the closed interval, 0 outside."""
    a = as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _node(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def relu(a) -> Tensor:
    """``max(x, 0)`` with subgradient 0 at exactly 0."""
    a = as_tensor(a)
    x = a.data
    return _node(np.maximum(x, 0.0), (a,), lambda g: (np.where(x > 0, g, 0.0),))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _node(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        ),
    )


# -----------------------------------------------------------------------------
# reductions and shape
# -----------------------------------------------------------------------------


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _node(out, (a,), bw)


def l2norm(a, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; gradient at the zero vector is 0."""
    a = as_tensor(a)
    n = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    out = n if keepdims else np.squeeze(n, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * a.data / safe, 0.0),)

    return _node(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def take(table, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]`` (embedding lookup) with scatter-add backward."""
    table = as_tensor(table)
    ids = np.asarray(ids)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), bw)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, parts, bw)


def split(a, sections: int, axis: int = -1) -> list[Tensor]:
    a = as_tensor(a)
    n = a.shape[axis] // sections
    ax = axis % a.ndim
    out = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(i * n, (i + 1) * n)
        out.append(getitem(a, tuple(sl)))
    return out


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``a`` of shape [..., K] and ``b`` of shape [K, M] or batched."""
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = np.tensordot(a.data, g, axes=(tuple(range(a.ndim - 1)), tuple(range(g.ndim))))
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def linear(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


# -----------------------------------------------------------------------------
# sequence primitives
# -----------------------------------------------------------------------------


def rmsnorm(x, gain, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x^2) + eps) * gain`` over the last axis."""
    x, gain = as_tensor(x), as_tensor(gain)
    xd = x.data
    r = np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd / r
    out = xhat * gain.data

    def bw(g):
        d = xd.shape[-1]
        gx_hat = g * gain.data
        gx = gx_hat / r - xhat * np.sum(gx_hat * xhat, axis=-1, keepdims=True) / (d * r)
        ggain = _unbroadcast(g * xhat, gain.shape)
        return gx, ggain

    return _node(out, (x, gain), bw)


def depthwise_conv1d(x, kernel) -> Tensor:
    """Causal per-channel convolution.

    ``x``: [..., L, C]; ``kernel``: [K, C] where ``kernel[k]`` weighs lag ``k``.
    ``out[t] = sum_k kernel[k] * x[t - k]`` with zeros before the sequence start.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    xd, kd = x.data, kernel.data
    K, L = kd.shape[0], xd.shape[-2]
    out = np.zeros_like(xd)
    for k in range(min(K, L)):
        out[..., k:, :] += kd[k] * xd[..., : L - k, :]

    def bw(g):
        gx = np.zeros_like(xd)
        gk = np.zeros_like(kd)
        for k in range(min(K, L)):
            gx[..., : L - k, :] += kd[k] * g[..., k:, :]
            gk[k] = np.sum(g[..., k:, :] * xd[..., : L - k, :], axis=tuple(range(xd.ndim - 1)))
        return gx, gk

    return _node(out, (x, kernel), bw)


def scan_forward(a: np.ndarray, B: np.ndarray, C: np.ndarray, u: np.ndarray):
    """Sequential selective-state recurrence, returning outputs and all states.

    Shapes: ``a`` [..., L], ``B``/``C`` [..., L, N], ``u`` [..., L, P].
    ``h_t = a_t h_{t-1} + u_t B_t^T`` (state [..., P, N]), ``y_t = h_t C_t``.
    """
    L = u.shape[-2]
    P, N = u.shape[-1], B.shape[-1]
    lead = u.shape[:-2]
    hs = np.empty(lead + (L, P, N), dtype=DTYPE)
    ys = np.empty(lead + (L, P), dtype=DTYPE)
    h = np.zeros(lead + (P, N), dtype=DTYPE)
    for t in range(L):
        h = a[..., t, None, None] * h + u[..., t, :, None] * B[..., t, None, :]
        hs[..., t, :, :] = h
        ys[..., t, :] = np.einsum("...pn,...n->...p", h, C[..., t, :])
    return ys, hs


def ssm_scan(a, B, C, u) -> Tensor:
    """Differentiable sequential scan (see :func:`scan_forward`)."""
    a, B, C, u = (as_tensor(v) for v in (a, B, C, u))
    ys, hs = scan_forward(a.data, B.data, C.data, u.data)

    def bw(g):
        ad, Bd, Cd, ud = a.data, B.data, C.data, u.data
        L = ud.shape[-2]
        ga, gB, gC, gu = (np.zeros_like(v) for v in (ad, Bd, Cd, ud))
        dh = np.zeros_like(hs[..., 0, :, :])
        for t in range(L - 1, -1, -1):
            h_t = hs[..., t, :, :]
            gC[..., t, :] = np.einsum("...p,...pn->...n", g[..., t, :], h_t)
            dh = dh + g[..., t, :, None] * Cd[..., t, None, :]
            if t > 0:
                ga[..., t] = np.einsum("...pn,...pn->...", dh, hs[..., t - 1, :, :])
            gu[..., t, :] = np.einsum("...pn,...n->...p", dh, Bd[..., t, :])
            gB[..., t, :] = np.einsum("...pn,...p->...n", dh, ud[..., t, :])
            dh = dh * ad[..., t, None, None]
        return ga, gB, gC, gu

    return _node(ys, (a, B, C, u), bw)


def segment_decay(log_a: np.ndarray) -> np.ndarray:
    """Lower-triangular ``D[t, s] = prod_{k=s+1..t} a_k`` from ``log a``; 0 above."""
    # a_0 never enters a product; leave it out so it cannot leak in via round-off
    head = np.zeros_like(log_a[..., :1])
    cs = np.cumsum(np.concatenate([head, log_a[..., 1:]], axis=-1), axis=-1)
    diff = cs[..., :, None] - cs[..., None, :]
    L = log_a.shape[-1]
    mask = np.tril(np.ones((L, L), dtype=bool))
    return np.where(mask, np.exp(np.where(mask, diff, 0.0)), 0.0)


def ssd(log_a, B, C, u) -> Tensor:
    """Dense dual form ``y = (D o (C B^T)) u`` with decay built from ``log a``.

    Materialises an [L, L] matrix per sequence; agrees with :func:`ssm_scan`
    on ``a = exp(log_a)``.
    """
    log_a, B, C, u = (as_tensor(v) for v in (log_a, B, C, u))
    Dm = segment_decay(log_a.data)
    G = np.einsum("...tn,...sn->...ts", C.data, B.data)
    M = Dm * G
    out = M @ u.data

    def bw(g):
        gM = g @ np.swapaxes(u.data, -1, -2)
        gu = np.swapaxes(M, -1, -2) @ g
        gG = gM * Dm
        gC = gG @ B.data
        gB = np.swapaxes(gG, -1, -2) @ C.data
        # d D[t,s] / d log_a[k] = D[t,s] for s < k <= t
        W = gM * G * Dm
        L = W.shape[-1]
        # sum over t >= k, s < k: 2D prefix sums of W
        rows = np.cumsum(W[..., ::-1, :], axis=-2)[..., ::-1, :]  # sum over t >= row
        cols = np.cumsum(rows, axis=-1)  # sum over s <= col
        gla = np.zeros_like(log_a.data)
        idx = np.arange(1, L)
        gla[..., 1:] = cols[..., idx, idx - 1]
        return gla, gB, gC, gu

    return _node(out, (log_a, B, C, u), bw)


def masked_mean(x, lengths: np.ndarray) -> Tensor:
    """Mean over the first ``lengths[b]`` positions of ``x[b]`` ([B, L, D] -> [B, D]).

    Each row is summed over its real positions only, so trailing padding never
    changes the result.
    """
    x = as_tensor(x)
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths <= 0):
        raise ValueError("masked_mean needs at least one real position per row")
    out = np.stack([x.data[b, : lengths[b]].sum(axis=0) / lengths[b] for b in range(len(lengths))])

    def bw(g):
        gx = np.zeros_like(x.data)
        for b, n in enumerate(lengths):
            gx[b, :n] = g[b] / n
        return (gx,)

    return _node(out, (x,), bw)


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    x = as_tensor(x)
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))
