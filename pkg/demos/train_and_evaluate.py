"""Train HiM-Poincare, HiM-Lorentz and the Euclidean baseline on one synthetic tree.

Mirrors one seed of acceptance criterion 6/7 (about 3 minutes on one core).
Run: python3 demos/train_and_evaluate.py [epochs]
"""

import sys
import time

import numpy as np

from hyperssm import evaluation as ev
from hyperssm import hierarchy as hi
from hyperssm import training as tr
from hyperssm.encoder import ManifoldConfig
from hyperssm.training import TrainConfig

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
tax = hi.generate_synthetic_tree(3, 6, seed=0, min_branching=2)
splits = hi.make_splits(tax, "mixed", seed=0)
rng = np.random.default_rng(1)
val = hi.build_eval_pairs(tax, splits.val, 10, rng)
test = hi.build_eval_pairs(tax, splits.test, 10, rng)
texts = [tax.label(i) for i in tax.ids]
print(f"{len(tax)} nodes, {len(splits.train)} train positives, {len(val)} val / {len(test)} test pairs")
print("example label:", texts[-1])

for kind in ("poincare", "lorentz", "euclidean"):
    cfg = TrainConfig.desk(epochs=epochs, manifold=ManifoldConfig(kind=kind))
    model = tr.build_model(texts, cfg.manifold, seed=0)
    t0 = time.perf_counter()
    tr.train(model, tax, splits.train, cfg, val)
    cache = ev.embed_entities(model, tax)
    thr, val_f1 = ev.calibrate_threshold(ev.pair_scores(model, tax, val, cache), [p.label for p in val])
    rep = ev.evaluate(model, tax, test, thr, cache=cache)
    an = ev.hnorm_depth_analysis(model, tax)
    by_depth = {d: round(v, 3) for d, v in an.mean_by_depth().items()}
    print(f"\n{kind}: {time.perf_counter() - t0:.0f}s  c={model.c:.3f} gamma={model.gamma:.3f}")
    print(f"  val F1 {val_f1:.3f}  test F1 {rep.f1:.3f} (P {rep.precision:.3f}, R {rep.recall:.3f})")
    print(f"  per-hop F1 {({k: round(v, 3) for k, v in rep.per_hop.items()})}")
    print(f"  rho(h_norm, depth) {an.spearman:.3f}  mean h-norm by depth {by_depth}")
