"""Poincare-ball and Lorentz-hyperboloid geometry with curvature ``K = -1/c``.

Every function accepts plain arrays or :class:`~hyperssm.autograd.Tensor`
inputs. With arrays in, arrays (or floats) come out; with any Tensor in, the
result is a Tensor on the active tape so it can be differentiated, including
with respect to a Tensor-valued ``c``.

Points carry their coordinates in the last axis; leading axes are batch axes.
"""

from __future__ import annotations

import enum
import functools

import numpy as np

from . import autograd as ag
from .autograd import Tensor

EPS_BALL = 1e-5
MACLAURIN_CUTOFF = 1e-3


class ManifoldKind(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    POINCARE = "poincare"
    LORENTZ = "lorentz"


class GeometryError(ValueError):
    """Raised for dimension mismatches and points off their manifold."""


def _dual(fn):
    """Run ``fn`` on Tensors; unwrap the result if no input was a Tensor."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        tensor_in = any(isinstance(a, Tensor) for a in (*args, *kwargs.values()))
        out = fn(*args, **kwargs)
        if tensor_in:
            return out
        if isinstance(out, tuple):
            return tuple(_unwrap(o) for o in out)
        return _unwrap(out)

    return wrapper


def _unwrap(x):
    if isinstance(x, Tensor):
        return float(x.data) if x.data.ndim == 0 else x.data
    return x


def _cval(c) -> float:
    return float(c.data) if isinstance(c, Tensor) else float(c)


def _check_c(c) -> None:
    if not _cval(c) > 0:
        raise GeometryError(f"curvature parameter c must be positive, got {_cval(c)}")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _sqnorm(x: Tensor) -> Tensor:
    return ag.sum_(ag.square(x), axis=-1)


def _same_dim(x, y) -> None:
    if np.shape(_data(x))[-1:] != np.shape(_data(y))[-1:]:
        raise GeometryError(
            f"dimension mismatch: {np.shape(_data(x))} vs {np.shape(_data(y))}"
        )


# -----------------------------------------------------------------------------
# inner products and distances
# -----------------------------------------------------------------------------


@_dual
def minkowski_inner(x, y):
    """``-x0*y0 + sum_i xi*yi`` over the last axis."""
    _same_dim(x, y)
    if np.shape(_data(x))[-1] < 2:
        raise GeometryError("Minkowski vectors need at least 2 coordinates")
    prod = ag.mul(x, y)
    return ag.sub(ag.sum_(prod[..., 1:], axis=-1), prod[..., 0])


@_dual
def euclidean_distance(x, y):
    _same_dim(x, y)
    return ag.l2norm(ag.sub(x, y), keepdims=False)


@_dual
def poincare_distance(x, y, c=1.0):
    """Geodesic distance in the ball of radius ``sqrt(c)``.

    ``sqrt(c) * arcosh(1 + 2 c |x-y|^2 / ((c - |x|^2)(c - |y|^2)))``, which at
    ``c = 1`` reduces to the familiar unit-ball formula.
    """
    _same_dim(x, y)
    _check_c(c)
    x, y, c = ag.as_tensor(x), ag.as_tensor(y), ag.as_tensor(c)
    cv = float(c.data)
    nx, ny = _sqnorm(x), _sqnorm(y)
    if np.any(nx.data >= cv) or np.any(ny.data >= cv):
        raise GeometryError("Poincare point on or outside the ball boundary")
    num = ag.mul(2.0, ag.mul(c, _sqnorm(ag.sub(x, y))))
    den = ag.mul(ag.sub(c, nx), ag.sub(c, ny))
    return ag.mul(ag.sqrt(c), ag.arcosh1p(ag.div(num, den)))


@_dual
def lorentz_distance(x, y, c=1.0):
    """``sqrt(c) * arcosh(-<x, y>_M / c)``.

    On the hyperboloid ``-<x, y>_M / c - 1 = <x-y, x-y>_M / (2c)``, which is
    evaluated instead: it is exactly 0 for ``x = y`` and avoids the
    cancellation in ``<x, y>_M`` for nearby far-out points. Negative
    round-off is clamped to 0 (argument clamped to >= 1).
    """
    _same_dim(x, y)
    _check_c(c)
    c = ag.as_tensor(c)
    diff = ag.sub(ag.as_tensor(x), ag.as_tensor(y))
    excess = ag.div(minkowski_inner(diff, diff), ag.mul(2.0, c))
    return ag.mul(ag.sqrt(c), ag.arcosh1p(excess))


def distance(x, y, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE):
    kind = ManifoldKind(kind)
    if kind is ManifoldKind.POINCARE:
        return poincare_distance(x, y, c)
    if kind is ManifoldKind.LORENTZ:
        return lorentz_distance(x, y, c)
    return euclidean_distance(x, y)


# -----------------------------------------------------------------------------
# projection pipeline
# -----------------------------------------------------------------------------


def squash_normalize(s):
    """``normalize(tanh(s))`` along the last axis.

    Returns ``(u, degenerate)`` where ``degenerate`` marks rows whose
    ``tanh(s)`` was exactly zero; those rows come back as zero vectors.
    """
    tensor_in = isinstance(s, Tensor)
    t = ag.tanh(s)
    n = ag.l2norm(t)
    degenerate = n.data[..., 0] == 0
    safe = ag.where(n.data > 0, n, 1.0)
    u = ag.div(t, safe)
    return (u if tensor_in else u.data), degenerate


@_dual
def norm_scale(u, gamma, kind: ManifoldKind = ManifoldKind.POINCARE):
    """``gamma * u`` (Poincare), ``gamma * clamp(u, -8, 8)`` (Lorentz), ``u`` (Euclidean)."""
    kind = ManifoldKind(kind)
    if kind is ManifoldKind.EUCLIDEAN:
        return ag.as_tensor(u)
    if kind is ManifoldKind.LORENTZ:
        u = ag.clamp(u, -8.0, 8.0)
    return ag.mul(gamma, u)


@_dual
def stable_cosh_sinh(z):
    """cosh/sinh with a fifth-order Maclaurin branch for ``|z| < 1e-3``."""
    z = ag.as_tensor(z)
    small = np.abs(z.data) < MACLAURIN_CUTOFF
    z2 = ag.square(z)
    z4 = ag.square(z2)
    cosh_series = ag.add(1.0, ag.add(ag.div(z2, 2.0), ag.div(z4, 24.0)))
    sinh_series = ag.mul(z, ag.add(1.0, ag.add(ag.div(z2, 6.0), ag.div(z4, 120.0))))
    if small.all():
        return cosh_series, sinh_series
    with np.errstate(over="ignore"):
        return (
            ag.where(small, cosh_series, ag.cosh(z)),
            ag.where(small, sinh_series, ag.sinh(z)),
        )


def _radial_parts(h):
    h = ag.as_tensor(h)
    n = ag.l2norm(h)
    safe = ag.where(n.data > 0, n, 1.0)
    return h, n, ag.div(h, safe)


@_dual
def project_poincare(h, c=1.0):
    """``sqrt(c) tanh(|h|/sqrt(c)) h/|h|``, kept at radius <= sqrt(c)(1 - EPS_BALL).

    ``h = 0`` maps to the origin.
    """
    _check_c(c)
    c = ag.as_tensor(c)
    h, n, direction = _radial_parts(h)
    sc = ag.sqrt(c)
    r = ag.mul(sc, ag.tanh(ag.div(n, sc)))
    r = ag.clamp(r, None, float(sc.data) * (1.0 - EPS_BALL))
    return ag.mul(r, direction)


@_dual
def project_lorentz(h, c=1.0):
    """``(sqrt(c) cosh z, sqrt(c) sinh z h/|h|)`` with ``z = |h|/sqrt(c)``.

    Output has one more coordinate than ``h``; ``h = 0`` maps to the apex
    ``(sqrt(c), 0, ..., 0)``.
    """
    _check_c(c)
    c = ag.as_tensor(c)
    h, n, direction = _radial_parts(h)
    sc = ag.sqrt(c)
    ch, sh = stable_cosh_sinh(ag.div(n, sc))
    time = ag.mul(sc, ch)
    space = ag.mul(ag.mul(sc, sh), direction)
    return ag.concat([time, space], axis=-1)


def project(h, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE):
    kind = ManifoldKind(kind)
    if kind is ManifoldKind.POINCARE:
        return project_poincare(h, c)
    if kind is ManifoldKind.LORENTZ:
        return project_lorentz(h, c)
    return h


def origin(dim: int, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE) -> np.ndarray:
    """Manifold origin for ``dim`` ambient coordinates (``dim = D + 1`` for Lorentz)."""
    o = np.zeros(dim)
    if ManifoldKind(kind) is ManifoldKind.LORENTZ:
        o[0] = np.sqrt(_cval(c))
    return o


@_dual
def h_norm(e, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE):
    """Geodesic distance from the manifold origin."""
    kind = ManifoldKind(kind)
    e = ag.as_tensor(e)
    if kind is ManifoldKind.POINCARE:
        return poincare_distance(e, Tensor(np.zeros(e.shape[-1])), c)
    if kind is ManifoldKind.LORENTZ:
        if np.any(e.data[..., 0] <= 0):
            raise GeometryError("Lorentz point with non-positive time coordinate")
        _check_c(c)
        c = ag.as_tensor(c)
        sc = ag.sqrt(c)
        return ag.mul(sc, ag.arcosh(ag.div(e[..., 0], sc)))
    return ag.l2norm(e, keepdims=False)


# -----------------------------------------------------------------------------
# constraint maintenance (array-only)
# -----------------------------------------------------------------------------


def _ball_limit(c: float) -> float:
    return np.sqrt(c) * (1.0 - EPS_BALL)


def check_on_manifold(e, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE, tol: float = 1e-5) -> bool:
    """True when every point in ``e`` satisfies its manifold constraint."""
    kind = ManifoldKind(kind)
    e = _data(e)
    c = _cval(c)
    if not np.all(np.isfinite(e)):
        return False
    if kind is ManifoldKind.POINCARE:
        norms = np.linalg.norm(e, axis=-1)
        # one ulp of slack for points built as r * h/|h|
        return bool(np.all(norms <= _ball_limit(c) * (1.0 + 4e-16)))
    if kind is ManifoldKind.LORENTZ:
        inner = _data(minkowski_inner(e, e))
        return bool(np.all(np.abs(inner + c) <= tol) and np.all(e[..., 0] > 0))
    return True


def stabilize_point(e, c=1.0, kind: ManifoldKind = ManifoldKind.POINCARE) -> np.ndarray:
    """Pull points back onto their manifold.

    Lorentz: recompute the time coordinate from the space part.
    Poincare: radially rescale anything beyond ``sqrt(c)(1 - EPS_BALL)``.
    """
    kind = ManifoldKind(kind)
    e = np.array(_data(e), dtype=float)
    c = _cval(c)
    if kind is ManifoldKind.LORENTZ:
        space = e[..., 1:]
        e[..., 0] = np.sqrt(c + np.sum(space * space, axis=-1))
    elif kind is ManifoldKind.POINCARE:
        limit = _ball_limit(c)
        norms = np.linalg.norm(e, axis=-1, keepdims=True)
        scale = np.where(norms > limit, limit / np.where(norms > 0, norms, 1.0), 1.0)
        e = e * scale
    return e
