"""Training objectives: centripetal/clustering hinges and in-batch contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import geometry as geo
from .autograd import Tensor
from .geometry import ManifoldKind


@dataclass
class LossConfig:
    w_ce: float = 1.0
    w_cl: float = 1.0
    alpha0: float = 1.0
    beta0: float = 0.1
    temperature: float = 0.05

    def __post_init__(self):
        if min(self.w_ce, self.w_cl) < 0:
            raise ValueError("loss weights must be non-negative")
        if min(self.alpha0, self.beta0) < 0:
            raise ValueError("margins must be non-negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


def _on_manifold(points, c, kind) -> None:
    for p in points:
        if not geo.check_on_manifold(ag.as_tensor(p).data, c, kind, tol=np.inf):
            raise geo.GeometryError("loss input is not a valid manifold point")


def dynamic_margins(c, alpha0: float = 1.0, beta0: float = 0.1):
    """``(alpha0 sqrt(c), beta0 sqrt(c))``; Tensor ``c`` gives Tensor margins."""
    if isinstance(c, Tensor):
        if not float(c.data) > 0:
            raise geo.GeometryError("c must be positive")
        r = ag.sqrt(c)
        return ag.mul(alpha0, r), ag.mul(beta0, r)
    if not c > 0:
        raise geo.GeometryError("c must be positive")
    r = float(np.sqrt(c))
    return alpha0 * r, beta0 * r


def _finish(t: Tensor, tensor_in: bool):
    return t if tensor_in else float(t.data)


def centripetal_loss(e, e_pos, c=1.0, kind=ManifoldKind.POINCARE, beta=0.1):
    """Batch mean of ``max(|e+|_c - |e|_c + beta, 0)``: parents sit nearer the origin."""
    tensor_in = any(isinstance(v, Tensor) for v in (e, e_pos, c, beta))
    _on_manifold((e, e_pos), c, kind)
    e, e_pos = ag.as_tensor(e), ag.as_tensor(e_pos)
    gap = ag.add(ag.sub(geo.h_norm(e_pos, c, kind), geo.h_norm(e, c, kind)), beta)
    return _finish(ag.mean(ag.relu(gap)), tensor_in)


def clustering_loss(e, e_pos, e_neg, c=1.0, kind=ManifoldKind.POINCARE, alpha=1.0):
    """Batch mean of ``max(d(e, e+) - d(e, e-) + alpha, 0)``."""
    tensor_in = any(isinstance(v, Tensor) for v in (e, e_pos, e_neg, c, alpha))
    _on_manifold((e, e_pos, e_neg), c, kind)
    e, e_pos, e_neg = ag.as_tensor(e), ag.as_tensor(e_pos), ag.as_tensor(e_neg)
    d_pos = geo.distance(e, e_pos, c, kind)
    d_neg = geo.distance(e, e_neg, c, kind)
    return _finish(ag.mean(ag.relu(ag.add(ag.sub(d_pos, d_neg), alpha))), tensor_in)


def hyperbolic_loss(e, e_pos, e_neg, c=1.0, kind=ManifoldKind.POINCARE, cfg: LossConfig | None = None):
    """``w_ce * centripetal + w_cl * clustering`` with margins scaled by ``sqrt(c)``."""
    cfg = cfg or LossConfig()
    alpha, beta = dynamic_margins(c, cfg.alpha0, cfg.beta0)
    cen = centripetal_loss(e, e_pos, c, kind, beta)
    clu = clustering_loss(e, e_pos, e_neg, c, kind, alpha)
    total = ag.add(ag.mul(cfg.w_ce, cen), ag.mul(cfg.w_cl, clu))
    tensor_in = isinstance(cen, Tensor) or isinstance(clu, Tensor)
    return _finish(total, tensor_in)


def batch_contrastive_loss(emb, positive_index, temperature: float = 0.05):
    """In-batch softmax cross-entropy over dot-product similarities.

    ``positive_index[i]`` is the row holding item ``i``'s positive. The
    diagonal is excluded from every softmax.
    """
    tensor_in = isinstance(emb, Tensor)
    emb = ag.as_tensor(emb)
    pos = np.asarray(positive_index, dtype=np.int64)
    n = emb.shape[0]
    if n < 2 or pos.shape != (n,):
        raise ValueError("need a batch of at least 2 with one positive index per row")
    if np.any(pos == np.arange(n)) or np.any((pos < 0) | (pos >= n)):
        raise ValueError("every item needs a positive other than itself")
    sim = ag.div(ag.matmul(emb, ag.transpose(emb)), temperature)
    sim = ag.where(np.eye(n, dtype=bool), -1e30, sim)
    m = sim.data.max(axis=1, keepdims=True)
    shifted = ag.sub(sim, m)
    lse = ag.log(ag.sum_(ag.exp(shifted), axis=1))
    target = shifted[np.arange(n), pos]
    return _finish(ag.mean(ag.sub(lse, target)), tensor_in)

