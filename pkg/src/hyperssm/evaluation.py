"""Distance-based subsumption scoring, threshold calibration, reports and exports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from . import geometry as geo
from .encoder import HyperbolicEncoder
from .hierarchy import LabeledPair, Taxonomy


@dataclass
class EvalReport:
    task: str
    threshold: float
    precision: float
    recall: float
    f1: float
    n_pos: int
    n_neg: int
    per_hop: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def f1_score(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall, F1; F1 as ``2tp / (2tp + fp + fn)`` (= 2PR/(P+R), fewer roundings)."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return p, r, f


# -----------------------------------------------------------------------------
# scoring
# -----------------------------------------------------------------------------


def score_pair(model: HyperbolicEncoder, child_text: str, candidate_text: str) -> float:
    """Manifold distance between the two texts' embeddings; lower means more likely."""
    e = model.embed_texts([child_text, candidate_text])
    return float(model.distance(e[0], e[1]))


def embed_entities(model: HyperbolicEncoder, tax: Taxonomy, ids: Sequence[str] | None = None):
    """Embeddings for ``ids`` (default: all entities) and an id -> row index."""
    ids = list(tax.ids if ids is None else ids)
    emb = model.embed_texts([tax.label(i) for i in ids])
    return emb, {n: k for k, n in enumerate(ids)}


def pair_scores(model: HyperbolicEncoder, tax: Taxonomy, pairs: Sequence[LabeledPair], cache=None) -> np.ndarray:
    """Distances for every pair; each entity is embedded once."""
    if cache is None:
        needed = sorted({p.child for p in pairs} | {p.candidate for p in pairs})
        cache = embed_entities(model, tax, needed)
    emb, index = cache
    a = emb[[index[p.child] for p in pairs]]
    b = emb[[index[p.candidate] for p in pairs]]
    return np.asarray(model.distance(a, b), dtype=float)


# -----------------------------------------------------------------------------
# calibration and reports
# -----------------------------------------------------------------------------


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    """Midpoints of consecutive unique scores plus one point above the maximum."""
    u = np.unique(scores)
    top = u[-1] + (u[-1] - u[0] if len(u) > 1 else 1.0)
    if top == u[-1]:
        top = u[-1] + 1.0
    return np.concatenate([(u[:-1] + u[1:]) / 2.0, [top]])


def calibrate_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximising F1 for the rule ``score < threshold``.

    Returns ``(threshold, f1)``; ties go to the larger threshold (higher recall).
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise ValueError("calibration needs both positive and negative labels")
    cands = candidate_thresholds(scores)
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    # number of items strictly below each candidate
    k = np.searchsorted(s, cands, side="left")
    tp = np.concatenate([[0], np.cumsum(y)])[k]
    pred = k
    n_pos = int(y.sum())
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(pred + n_pos > 0, 2.0 * tp / (pred + n_pos), 0.0)
    best = np.flatnonzero(f1 == f1.max())[-1]
    return float(cands[best]), float(f1[best])


def report_from_scores(
    scores, pairs: Sequence[LabeledPair], threshold: float, task: str = "mixed"
) -> EvalReport:
    scores = np.asarray(scores, dtype=float)
    labels = np.array([p.label for p in pairs], dtype=bool)
    pred = scores < threshold

    def prf(mask):
        tp = int(np.sum(pred & labels & mask))
        fp = int(np.sum(pred & ~labels & mask))
        fn = int(np.sum(~pred & labels & mask))
        return f1_score(tp, fp, fn)

    everything = np.ones(len(pairs), dtype=bool)
    p, r, f = prf(everything)
    hops = np.array([p_.hops for p_ in pairs])
    per_hop = {}
    for h in sorted(set(hops[labels].tolist())):
        per_hop[str(h)] = prf(~labels | (hops == h))[2]
    return EvalReport(task, float(threshold), p, r, f, int(labels.sum()), int((~labels).sum()), per_hop)


def evaluate(
    model: HyperbolicEncoder,
    tax: Taxonomy,
    pairs: Sequence[LabeledPair],
    threshold: float,
    task: str = "mixed",
    cache=None,
) -> EvalReport:
    """Predict positive iff distance < threshold; precision/recall/F1 with per-hop F1."""
    return report_from_scores(pair_scores(model, tax, pairs, cache), pairs, threshold, task)


# -----------------------------------------------------------------------------
# h-norm analysis and export
# -----------------------------------------------------------------------------


@dataclass
class HNormAnalysis:
    ids: list[str]
    h_norms: np.ndarray
    depths: np.ndarray
    spearman: float
    degenerate: bool

    def mean_by_depth(self) -> dict[int, float]:
        return {int(d): float(self.h_norms[self.depths == d].mean()) for d in np.unique(self.depths)}


def hnorm_depth_analysis(
    model: HyperbolicEncoder,
    tax: Taxonomy,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> HNormAnalysis:
    """Per-entity h-norm against depth from the roots, with Spearman's rho.

    Constant (to round-off) h-norms or depths make rho undefined; it is then reported as 0
    with ``degenerate=True``.
    """
    depth = tax.depths()
    ids = [i for i in tax.ids if i in depth]
    if sample is not None and sample < len(ids):
        rng = rng if rng is not None else np.random.default_rng(0)
        ids = [ids[k] for k in sorted(rng.choice(len(ids), size=sample, replace=False))]
    emb, _ = embed_entities(model, tax, ids)
    hn = np.asarray(model.h_norm(emb), dtype=float)
    d = np.array([depth[i] for i in ids], dtype=float)
    # unit-norm (Euclidean) embeddings differ only by round-off
    if np.ptp(hn) <= 1e-12 * max(1.0, float(np.max(np.abs(hn)))) or np.ptp(d) == 0:
        return HNormAnalysis(ids, hn, d.astype(int), 0.0, True)
    rho = float(spearmanr(hn, d).statistic)
    return HNormAnalysis(ids, hn, d.astype(int), rho, False)


def export_embeddings(model: HyperbolicEncoder, tax: Taxonomy, path: str | Path) -> int:
    """Write ``id, label, depth, h_norm, coord_0..coord_k`` rows; returns the row count."""
    emb, _ = embed_entities(model, tax)
    hn = np.asarray(model.h_norm(emb), dtype=float)
    depth = tax.depths()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\t".join(["id", "label", "depth", "h_norm"]
                           + [f"coord_{k}" for k in range(emb.shape[1])]) + "\n")
        for row, node in enumerate(tax.ids):
            coords = "\t".join(repr(float(v)) for v in emb[row])
            fh.write(f"{node}\t{tax.label(node)}\t{depth.get(node, -1)}\t{float(hn[row])!r}\t{coords}\n")
    return len(tax.ids)


def check_export(path: str | Path, c: float, kind) -> bool:
    """Re-read an export and verify every point against its manifold."""
    rows = np.loadtxt(path, delimiter="\t", skiprows=1, usecols=None, dtype=str, ndmin=2)
    coords = rows[:, 4:].astype(float)
    return geo.check_on_manifold(coords, c, kind, tol=np.inf)
