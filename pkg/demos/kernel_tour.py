"""
The completion kernels on small inputs
======================================

Gridding spreads points onto cube vertices, reverse gridding turns vertex
values back into points, cubic sampling gathers per-vertex features and the
folding layers densify a coarse cloud. Each step is checked against the
property it should satisfy.
"""

import numpy as np

from occlusynth.kernels import (FoldingParams, cubic_feature_sampling, grad_check,
                                folding_densify, gridding, gridding_reverse_cells,
                                vertex_coords)
from occlusynth.rng import SeededRng

g = np.random.default_rng(0)

# gridding keeps the total mass: one unit per point
pts = g.uniform(-1, 1, (1000, 3))
grid = gridding(pts)
print("grid", grid.shape, "mass", grid.sum())

# a single point comes back exactly from the cell that contains it
p = np.array([[0.123, -0.456, 0.789]])
rec, cells = gridding_reverse_cells(gridding(p))
home = np.floor((p[0] + 1) * 79 / 2).astype(int)
row = np.flatnonzero(np.all(cells == home, axis=1))[0]
print("recovered", rec[row], "error", np.abs(rec[row] - p[0]).max())

# a vertex point puts all of its weight on that vertex
v = vertex_coords(80)
print("vertex weight", gridding(np.array([[v[3], v[40], v[77]]]))[3, 40, 77])

# cubic sampling: 8 vertices per map, raw features, coarse maps first
maps = [g.normal(size=(160, 10, 10, 10)), g.normal(size=(80, 20, 20, 20)),
        g.normal(size=(40, 40, 40, 40))]
feats = cubic_feature_sampling(g.uniform(-1, 1, (5, 3)), maps)
print("features per point:", feats.shape[1])

# folding: 9 copies per coarse point; with zero weights they are exact copies
coarse = g.uniform(-1, 1, (3072, 3))
params = FoldingParams.random(SeededRng(1))
dense = folding_densify(coarse, g.normal(size=(3072, 280)), params)
print("dense", dense.shape)
flat = folding_densify(coarse, g.normal(size=(3072, 280)), params.zeros_like())
print("zero folding == tiled:", np.array_equal(flat, np.repeat(coarse, 9, axis=0)))

# analytic gradients against central differences
for name, err in grad_check(trials=5).items():
    print(f"{name:24s} max rel. error {err:.2e}")
