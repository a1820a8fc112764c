"""Central finite differences against the analytic kernel gradients."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from ..rng import SeededRng
from .folding import FoldingConfig, FoldingParams, folding_densify, folding_weight_grads
from .grid import gridding, gridding_grad, gridding_reverse, gridding_reverse_grad
from .sampling import cubic_feature_sampling, cubic_feature_sampling_grad

KERNELS = ("gridding", "gridding_reverse", "cubic_feature_sampling", "folding")
REL_FLOOR = 1e-8
# folding outputs are piecewise linear in each weight, so a larger step loses
# nothing to truncation and gains digits against roundoff
DEFAULT_STEPS = {"gridding": 1e-6, "gridding_reverse": 1e-6,
                 "cubic_feature_sampling": 1e-6, "folding": 1e-3}


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    den = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / den)) if a.size else 0.0


def _interior_points(g: np.random.Generator, n: int, res: int, margin: float) -> np.ndarray:
    """Random points at least ``margin`` (in cell units) away from every cell face."""
    cells = g.integers(0, res - 1, size=(n, 3))
    frac = g.uniform(margin, 1.0 - margin, size=(n, 3))
    return -1.0 + (cells + frac) * (2.0 / (res - 1))


def _check_gridding(g, eps):
    res = int(g.integers(3, 9))
    pts = _interior_points(g, int(g.integers(1, 17)), res, 1e-3)
    up = g.normal(size=(res, res, res))
    ana = gridding_grad(pts, up)
    num = np.empty_like(pts)
    for i in range(pts.shape[0]):
        for j in range(3):
            p1, p2 = pts.copy(), pts.copy()
            p1[i, j] += eps
            p2[i, j] -= eps
            num[i, j] = (np.sum(up * gridding(p1, res)) - np.sum(up * gridding(p2, res))) / (2 * eps)
    return rel_error(ana, num)


def _check_reverse(g, eps, n_entries=64):
    res = int(g.integers(3, 9))
    grid = g.uniform(0.1, 1.0, size=(res, res, res))
    n_out = (res - 1) ** 3
    up = g.normal(size=(n_out, 3))
    ana = gridding_reverse_grad(grid, up)
    flat_ids = g.choice(res ** 3, min(n_entries, res ** 3), replace=False)
    num = np.empty(len(flat_ids))
    for k, fid in enumerate(flat_ids):
        idx = np.unravel_index(fid, grid.shape)
        g1, g2 = grid.copy(), grid.copy()
        g1[idx] += eps
        g2[idx] -= eps
        num[k] = (np.sum(up * gridding_reverse(g1)) - np.sum(up * gridding_reverse(g2))) / (2 * eps)
    return rel_error(ana.ravel()[flat_ids], num)


def _check_cubic(g, eps, n_entries=64):
    maps = [g.normal(size=(int(g.integers(1, 5)),) + (r,) * 3) for r in (3, 4, 6)]
    pts = g.uniform(-1, 1, size=(int(g.integers(1, 17)), 3))
    width = 8 * sum(m.shape[0] for m in maps)
    up = g.normal(size=(len(pts), width))
    ana = cubic_feature_sampling_grad(pts, maps, up)
    errs = []
    for mi, m in enumerate(maps):
        ids = g.choice(m.size, min(n_entries, m.size), replace=False)
        num = np.empty(len(ids))
        for k, fid in enumerate(ids):
            idx = np.unravel_index(fid, m.shape)
            m1 = [x.copy() for x in maps]
            m2 = [x.copy() for x in maps]
            m1[mi][idx] += eps
            m2[mi][idx] -= eps
            num[k] = (np.sum(up * cubic_feature_sampling(pts, m1))
                      - np.sum(up * cubic_feature_sampling(pts, m2))) / (2 * eps)
        errs.append(rel_error(ana[mi].ravel()[ids], num))
    return max(errs)


def _relu_pattern(cache) -> np.ndarray:
    return np.concatenate([(a > 0).ravel() for a in cache["fold1"][1:] + cache["fold2"][1:]])


def _check_folding(g, eps, rng: SeededRng, n_entries=40, max_draws=400):
    params = FoldingParams.random(rng.child("params"))
    cfg = FoldingConfig()
    n = int(g.integers(1, 4))
    coarse = g.uniform(-1, 1, size=(n, 3))
    feats = g.normal(size=(n, 280))
    up = g.normal(size=(n * cfg.r, 3))
    ana = folding_weight_grads(coarse, feats, params, up, cfg)
    names = sorted(ana)
    errs = []
    for _ in range(max_draws):
        if len(errs) == n_entries:
            break
        name = names[int(g.integers(len(names)))]
        layer = params.fold1 if name.startswith("fold1") else params.fold2
        kind, k = name.split(".")[1][0], int(name.split(".")[1][1])
        arr = layer.weights[k] if kind == "w" else layer.biases[k]
        idx = tuple(int(g.integers(s)) for s in arr.shape)
        old = arr[idx]
        # the offsets are exactly linear in one weight while no ReLU flips, so
        # the central difference is exact up to roundoff; entries whose step
        # crosses a kink are drawn again. Only the offsets are differenced:
        # the tiled coordinates do not depend on the weights.
        arr[idx] = old + eps
        c1 = folding_densify(coarse, feats, params, cfg, cache=True)[1]
        arr[idx] = old - eps
        c2 = folding_densify(coarse, feats, params, cfg, cache=True)[1]
        arr[idx] = old
        if not np.array_equal(_relu_pattern(c1), _relu_pattern(c2)):
            continue
        num = np.sum(up * (c1["offsets"] - c2["offsets"])) / (2 * eps)
        errs.append(rel_error(ana[name][idx], num))
    if len(errs) < n_entries:
        raise RuntimeError("too many finite-difference steps crossed a ReLU kink; use a smaller step")
    return max(errs)


def grad_check(kernels: Optional[Iterable[str]] = None, trials: int = 50,
               eps: Optional[float] = None, rng: SeededRng = SeededRng(0)) -> Dict[str, float]:
    """Maximum relative error per kernel over ``trials`` random small instances.

    ``eps`` overrides the per-kernel default step in :data:`DEFAULT_STEPS`.
    """
    if eps is not None and not eps > 0:
        raise ValueError("finite-difference step must be positive")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    names = list(KERNELS if kernels is None else kernels)
    for k in names:
        if k not in KERNELS:
            raise ValueError(f"unknown kernel {k!r}; choose from {KERNELS}")
    report = {}
    for name in names:
        worst = 0.0
        for t in range(trials):
            sub = rng.child(name, t)
            g = sub.generator()
            step = DEFAULT_STEPS[name] if eps is None else eps
            if name == "gridding":
                e = _check_gridding(g, step)
            elif name == "gridding_reverse":
                e = _check_reverse(g, step)
            elif name == "cubic_feature_sampling":
                e = _check_cubic(g, step)
            else:
                e = _check_folding(g, step, sub)
            worst = max(worst, e)
        report[name] = worst
    return report
