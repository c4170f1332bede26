"""Taxonomies: loading, closure, pair/triplet sampling, splits, delta-hyperbolicity."""

from __future__ import annotations

import csv
import itertools
import warnings
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


@dataclass(frozen=True)
class LabeledPair:
    child: str
    candidate: str
    label: bool
    hops: int = 0


class Taxonomy:
    """Immutable is-a DAG over entity ids.

    ``edges`` holds direct ``(child, parent)`` pairs. Ancestor/descendant maps
    with shortest hop counts are computed once on construction.
    """

    def __init__(self, entities: dict[str, str], edges: Iterable[tuple[str, str]]):
        self.entities = dict(entities)
        self.ids = list(self.entities)
        self.edges = sorted(set(edges))
        self.parents: dict[str, list[str]] = {i: [] for i in self.ids}
        self.children: dict[str, list[str]] = {i: [] for i in self.ids}
        for child, parent in self.edges:
            for node in (child, parent):
                if node not in self.entities:
                    raise TaxonomyError(f"edge references unknown id {node!r}")
            if child == parent:
                raise TaxonomyError(f"self loop on {child!r}")
            self.parents[child].append(parent)
            self.children[parent].append(child)
        _check_acyclic(self)
        self.ancestors = {i: _bfs(i, self.parents) for i in self.ids}
        self.descendants = {i: _bfs(i, self.children) for i in self.ids}

    def __len__(self) -> int:
        return len(self.ids)

    def label(self, node: str) -> str:
        return self.entities[node]

    def roots(self) -> list[str]:
        return [i for i in self.ids if not self.parents[i]]

    def related(self, u: str, v: str) -> bool:
        """True when one of ``u``, ``v`` subsumes the other (or they coincide)."""
        return u == v or v in self.ancestors[u] or u in self.ancestors[v]

    def depths(self) -> dict[str, int]:
        """Shortest hop distance from any root."""
        depth = {r: 0 for r in self.roots()}
        queue = deque(depth)
        while queue:
            node = queue.popleft()
            for ch in self.children[node]:
                if ch not in depth:
                    depth[ch] = depth[node] + 1
                    queue.append(ch)
        return depth

    def positive_pairs(self) -> dict[tuple[str, str], int]:
        """All ``(descendant, ancestor) -> hops`` over ``E`` and its closure."""
        return {(d, a): h for d in self.ids for a, h in self.ancestors[d].items()}


def _bfs(start: str, adj: dict[str, list[str]]) -> dict[str, int]:
    hops = {}
    queue = deque([(start, 0)])
    seen = {start}
    while queue:
        node, h = queue.popleft()
        for nxt in adj[node]:
            if nxt not in seen:
                seen.add(nxt)
                hops[nxt] = h + 1
                queue.append((nxt, h + 1))
    return hops


def _check_acyclic(tax: Taxonomy) -> None:
    state = dict.fromkeys(tax.ids, 0)  # 0 new, 1 on stack, 2 done
    for root in tax.ids:
        if state[root]:
            continue
        stack = [(root, iter(tax.parents[root]))]
        state[root] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
            elif state[nxt] == 1:
                raise TaxonomyError(f"cycle detected at edge {node!r} -> {nxt!r}")
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(tax.parents[nxt])))


# -----------------------------------------------------------------------------
# file formats
# -----------------------------------------------------------------------------


def _tsv_rows(path: str | Path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line.split("\t")


def load_taxonomy(entities_path: str | Path, edges_path: str | Path) -> Taxonomy:
    """Read ``id<TAB>label`` and ``child_id<TAB>parent_id`` files."""
    entities = {}
    for lineno, row in _tsv_rows(entities_path):
        if len(row) < 2:
            raise TaxonomyError(f"{entities_path}:{lineno}: expected id<TAB>label")
        entities[row[0]] = row[1]
    edges = []
    for lineno, row in _tsv_rows(edges_path):
        if len(row) < 2:
            raise TaxonomyError(f"{edges_path}:{lineno}: expected child<TAB>parent")
        edges.append((row[0], row[1]))
    return Taxonomy(entities, edges)


def save_taxonomy(tax: Taxonomy, entities_path: str | Path, edges_path: str | Path) -> None:
    with open(entities_path, "w", encoding="utf-8", newline="") as fh:
        for i in tax.ids:
            fh.write(f"{i}\t{tax.entities[i]}\n")
    with open(edges_path, "w", encoding="utf-8", newline="") as fh:
        for child, parent in tax.edges:
            fh.write(f"{child}\t{parent}\n")


def save_pairs(pairs: Sequence[LabeledPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for p in pairs:
            w.writerow([p.child, p.candidate, int(p.label), p.hops])


def load_pairs(path: str | Path) -> list[LabeledPair]:
    return [
        LabeledPair(row[0], row[1], bool(int(row[2])), int(row[3]))
        for _, row in _tsv_rows(path)
    ]


# -----------------------------------------------------------------------------
# closure and hops
# -----------------------------------------------------------------------------


def transitive_closure(tax: Taxonomy) -> dict[tuple[str, str], int]:
    """Indirect subsumptions ``(descendant, ancestor) -> shortest hops``, hops >= 2."""
    return {(d, a): h for d in tax.ids for a, h in tax.ancestors[d].items() if h >= 2}


def hop_distance(tax: Taxonomy, u: str, v: str) -> int | None:
    """Shortest directed child-to-ancestor path length from ``u`` to ``v``."""
    if u == v:
        return 0
    return tax.ancestors[u].get(v)


# -----------------------------------------------------------------------------
# negatives and triplets
# -----------------------------------------------------------------------------


def hard_negatives(tax: Taxonomy, node: str) -> list[str]:
    """Siblings and cousins: share an ancestor within two hops of both, unrelated."""
    out = set()
    for anc, h in tax.ancestors[node].items():
        if h > 2:
            continue
        for cand, h2 in tax.descendants[anc].items():
            if h2 <= 2 and not tax.related(node, cand):
                out.add(cand)
    return sorted(out)


class NegativeSampler:
    """Caches the unrelated and hard-negative candidate lists per node."""

    def __init__(self, tax: Taxonomy):
        self.tax = tax
        self._hard: dict[str, list[str]] = {}
        self._unrelated: dict[str, np.ndarray] = {}
        self._ids = np.array(tax.ids)

    def hard(self, node: str) -> list[str]:
        if node not in self._hard:
            self._hard[node] = hard_negatives(self.tax, node)
        return self._hard[node]

    def unrelated(self, node: str) -> np.ndarray:
        if node not in self._unrelated:
            tax = self.tax
            keep = [not tax.related(node, c) for c in tax.ids]
            self._unrelated[node] = self._ids[np.array(keep, dtype=bool)]
        return self._unrelated[node]

    def draw(self, node: str, hard_fraction: float, rng: np.random.Generator) -> str | None:
        hard = self.hard(node)
        if hard and rng.random() < hard_fraction:
            return hard[rng.integers(len(hard))]
        pool = self.unrelated(node)
        if len(pool) == 0:
            return None
        return str(pool[rng.integers(len(pool))])


def sample_triplets(
    tax: Taxonomy,
    count: int,
    hard_fraction: float,
    rng: np.random.Generator,
    positives: Iterable[tuple[str, str]] | None = None,
    sampler: NegativeSampler | None = None,
) -> list[Triplet]:
    """Draw ``count`` (anchor, ancestor, unrelated) triplets.

    Anchors are uniform over nodes that have an allowed ancestor; the positive
    is one of those ancestors, direct parents weighted twice. Negatives are
    unrelated to the anchor in both directions; with probability
    ``hard_fraction`` they are taken from its siblings/cousins. ``positives``
    restricts which (descendant, ancestor) pairs may serve as positives.
    """
    if not tax.edges:
        raise TaxonomyError("taxonomy has no edges to sample from")
    sampler = sampler or NegativeSampler(tax)
    if positives is None:
        allowed = {d: dict(tax.ancestors[d]) for d in tax.ids if tax.ancestors[d]}
    else:
        allowed = {}
        for d, a in positives:
            allowed.setdefault(d, {})[a] = tax.ancestors[d][a]
    anchors = sorted(allowed)
    options = {}
    for d in anchors:
        ancs = sorted(allowed[d])
        w = np.array([2.0 if allowed[d][a] == 1 else 1.0 for a in ancs])
        options[d] = (ancs, w / w.sum())
    out: list[Triplet] = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise TaxonomyError("could not find valid negatives for the allowed anchors")
        anchor = anchors[rng.integers(len(anchors))]
        ancs, probs = options[anchor]
        positive = ancs[rng.choice(len(ancs), p=probs)] if len(ancs) > 1 else ancs[0]
        negative = sampler.draw(anchor, hard_fraction, rng)
        if negative is None:
            continue
        out.append(Triplet(anchor, positive, negative))
    return out


# -----------------------------------------------------------------------------
# splits and evaluation pairs
# -----------------------------------------------------------------------------


@dataclass
class Splits:
    task: str
    train: list[tuple[str, str]] = field(default_factory=list)
    val: list[tuple[str, str]] = field(default_factory=list)
    test: list[tuple[str, str]] = field(default_factory=list)

    def part(self, name: str) -> list[tuple[str, str]]:
        return getattr(self, name)


def make_splits(
    tax: Taxonomy,
    task: str = "mixed",
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> Splits:
    """Edge-level split of positive subsumptions.

    ``mixed``: ``E`` and its closure are partitioned train/val/test.
    ``multi``: every direct edge is train-visible; the closure is divided
    between val and test in the ratio of the last two fractions.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    rng = np.random.default_rng(seed)
    if task == "mixed":
        pool = sorted(tax.positive_pairs())
        order = rng.permutation(len(pool))
        n_train = int(round(fractions[0] * len(pool)))
        n_val = int(round(fractions[1] * len(pool)))
        idx = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
        parts = [[pool[i] for i in sorted(ix)] for ix in idx]
        return Splits(task, *parts)
    if task == "multi":
        closure = sorted(transitive_closure(tax))
        order = rng.permutation(len(closure))
        rest = fractions[1] + fractions[2]
        n_val = int(round(len(closure) * (fractions[1] / rest))) if rest > 0 else 0
        val = [closure[i] for i in sorted(order[:n_val])]
        test = [closure[i] for i in sorted(order[n_val:])]
        return Splits(task, list(tax.edges), val, test)
    raise ValueError(f"unknown task {task!r}; expected 'mixed' or 'multi'")


def build_eval_pairs(
    tax: Taxonomy,
    positives: Sequence[tuple[str, str]],
    neg_ratio: int = 10,
    rng: np.random.Generator | None = None,
    hard_share: float = 0.5,
    sampler: NegativeSampler | None = None,
) -> list[LabeledPair]:
    """Labelled pairs: the given positives plus ``neg_ratio`` negatives each.

    For each positive ``(child, ancestor)`` the negatives are ``(child, x)``
    with ``x`` unrelated to ``child``; at least ``hard_share`` of them are
    siblings/cousins when enough exist. Negatives are distinct pairs. If a
    child runs out of candidates, fewer negatives are produced and a warning
    is issued.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    sampler = sampler or NegativeSampler(tax)
    out = [LabeledPair(c, a, True, tax.ancestors[c][a]) for c, a in positives]
    used: set[tuple[str, str]] = set()
    n_hard_target = int(np.ceil(hard_share * neg_ratio))
    short = 0
    for child, _ in positives:
        hard = [h for h in sampler.hard(child) if (child, h) not in used]
        k_hard = min(n_hard_target, len(hard))
        picks = list(rng.choice(hard, size=k_hard, replace=False)) if k_hard else []
        for h in picks:
            used.add((child, str(h)))
        pool = [str(x) for x in sampler.unrelated(child) if (child, str(x)) not in used]
        k_rest = min(neg_ratio - k_hard, len(pool))
        rest = list(rng.choice(pool, size=k_rest, replace=False)) if k_rest else []
        for x in rest:
            used.add((child, str(x)))
        picks += rest
        short += neg_ratio - len(picks)
        out.extend(LabeledPair(child, str(x), False, 0) for x in picks)
    if short:
        warnings.warn(f"only {len(out) - len(positives)} negatives available "
                      f"({short} short of the {neg_ratio}:1 ratio)", stacklevel=2)
    return out


# -----------------------------------------------------------------------------
# delta-hyperbolicity
# -----------------------------------------------------------------------------


def undirected_distances(tax: Taxonomy) -> tuple[np.ndarray, list[str]]:
    """All-pairs hop distances on the largest connected component (undirected)."""
    index = {n: i for i, n in enumerate(tax.ids)}
    n = len(tax.ids)
    rows = [index[c] for c, _ in tax.edges]
    cols = [index[p] for _, p in tax.edges]
    adj = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(adj, directed=False)
    big = np.argmax(np.bincount(comp))
    keep = np.flatnonzero(comp == big)
    sub = adj[keep][:, keep]
    dist = shortest_path(sub, directed=False, unweighted=True)
    return dist, [tax.ids[i] for i in keep]


def four_point_delta(dist: np.ndarray, quads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-quadruple ``(max - median)/2`` of the three pair sums, and the largest pair distance."""
    w, x, y, z = quads.T
    sums = np.stack([
        dist[w, x] + dist[y, z],
        dist[w, y] + dist[x, z],
        dist[w, z] + dist[x, y],
    ], axis=1)
    sums.sort(axis=1)
    delta = (sums[:, 2] - sums[:, 1]) / 2.0
    pair_max = np.max(np.stack([
        dist[w, x], dist[y, z], dist[w, y], dist[x, z], dist[w, z], dist[x, y]
    ], axis=1), axis=1)
    return delta, pair_max


def _summarise(delta: np.ndarray, pair_max: np.ndarray) -> tuple[float, float]:
    norm = np.divide(delta, pair_max, out=np.zeros_like(delta), where=pair_max > 0)
    return float(delta.mean()), float(norm.mean())


def delta_hyperbolicity(
    tax: Taxonomy, n_quadruples: int = 100_000, rng: np.random.Generator | None = None
) -> tuple[float, float]:
    """Sampled four-point delta: ``(mean delta, mean delta / quadruple diameter)``.

    Quadruples are four distinct nodes drawn uniformly from the largest
    undirected component.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    dist, nodes = undirected_distances(tax)
    n = len(nodes)
    if n < 4:
        raise TaxonomyError("delta-hyperbolicity needs at least 4 connected nodes")
    quads = np.empty((n_quadruples, 4), dtype=np.int64)
    for i in range(n_quadruples):
        quads[i] = rng.choice(n, size=4, replace=False)
    return _summarise(*four_point_delta(dist, quads))


def delta_hyperbolicity_exact(tax: Taxonomy) -> tuple[float, float]:
    """Same statistics averaged over every 4-subset (small graphs only)."""
    dist, nodes = undirected_distances(tax)
    n = len(nodes)
    if n < 4:
        raise TaxonomyError("delta-hyperbolicity needs at least 4 connected nodes")
    quads = np.array(list(itertools.combinations(range(n), 4)), dtype=np.int64)
    return _summarise(*four_point_delta(dist, quads))


# -----------------------------------------------------------------------------
# synthetic data
# -----------------------------------------------------------------------------

_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    out, seen = [], set()
    syllables = [o + v for o in _ONSETS for v in _VOWELS]
    while len(out) < n:
        k = rng.integers(2, 4)
        w = "".join(syllables[i] for i in rng.integers(len(syllables), size=k))
        if w not in seen:
            seen.add(w)
            out.append(w)
    return out


def generate_synthetic_tree(
    branching: int = 3,
    depth: int = 4,
    label_scheme: str = "path",
    seed: int = 0,
    min_branching: int = 1,
) -> Taxonomy:
    """Random tree; every node above ``depth`` gets U[min_branching, branching] children.

    Each node owns a unique pseudo-word. With ``label_scheme="path"`` a label
    is the words on the root-to-node path, so token overlap mirrors ancestry;
    ``"word"`` labels carry only the node's own word.
    """
    if branching < 2 or depth < 2:
        raise ValueError("need branching >= 2 and depth >= 2")
    if not 1 <= min_branching <= branching:
        raise ValueError("min_branching must lie in [1, branching]")
    if label_scheme not in ("path", "word"):
        raise ValueError("label_scheme must be 'path' or 'word'")
    rng = np.random.default_rng(seed)
    parent_of: dict[int, int | None] = {0: None}
    level = [0]
    for _ in range(depth):
        nxt = []
        for node in level:
            for _ in range(int(rng.integers(min_branching, branching + 1))):
                child = len(parent_of)
                parent_of[child] = node
                nxt.append(child)
        level = nxt
    vocab = _make_words(len(parent_of), rng)
    labels = {}
    for node in parent_of:
        if label_scheme == "word":
            labels[node] = vocab[node]
            continue
        path, cur = [], node
        while cur is not None:
            path.append(vocab[cur])
            cur = parent_of[cur]
        labels[node] = " ".join(reversed(path))
    width = len(str(len(parent_of) - 1))
    ident = {n: f"n{n:0{width}d}" for n in parent_of}
    entities = {ident[n]: labels[n] for n in parent_of}
    edges = [(ident[n], ident[p]) for n, p in parent_of.items() if p is not None]
    return Taxonomy(entities, edges)
