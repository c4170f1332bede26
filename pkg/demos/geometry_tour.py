"""Tour of the two hyperbolic models: projection, distance, h-norm, curvature.

Run: python3 demos/geometry_tour.py
"""

import numpy as np

from hyperssm import geometry as geo
from hyperssm.geometry import ManifoldKind

P, L = ManifoldKind.POINCARE, ManifoldKind.LORENTZ

# The textbook check: distance from the origin to (0.5, 0) on the unit ball is ln 3.
print("d_P(0, (0.5, 0)) =", geo.poincare_distance([0.0, 0.0], [0.5, 0.0], 1.0), " ln 3 =", np.log(3))

# Tangent vectors of growing length land further from the origin in both models.
for r in (0.1, 1.0, 3.0):
    h = np.array([r, 0.0, 0.0])
    for c in (0.25, 1.0, 4.0):
        ep, el = geo.project(h, c, P), geo.project(h, c, L)
        print(f"|h|={r:<4} c={c:<5} poincare |x|={np.linalg.norm(ep):.4f} h_norm={geo.h_norm(ep, c, P):.4f}"
              f"   lorentz <e,e>_M={geo.minkowski_inner(el, el):+.6f} h_norm={geo.h_norm(el, c, L):.4f}")

# Lorentz h-norm equals |h| whatever c is; the Poincare h-norm is 2|h| (geodesic to origin).
rng = np.random.default_rng(0)
h = rng.normal(size=(5, 8)) * 0.3
print("lorentz h_norm / |h|:", np.round(geo.h_norm(geo.project(h, 2.0, L), 2.0, L) / np.linalg.norm(h, axis=1), 12))
print("poincare h_norm / |h|:", np.round(geo.h_norm(geo.project(h, 2.0, P), 2.0, P) / np.linalg.norm(h, axis=1), 12))

# Float64 limit of the hyperboloid: the constraint error grows with cosh(|h|/sqrt c)^2.
for scale in (5, 10, 15, 20):
    e = geo.project_lorentz(np.array([scale, 0.0]), 1.0)
    print(f"|h|={scale:>2}: |<e,e>_M + c| = {abs(geo.minkowski_inner(e, e) + 1.0):.1e}")
