"""Coarse point selection and cubic feature sampling."""

from __future__ import annotations

from typing import List, Sequence, Tuple

import numpy as np

from ..errors import EmptyInputError, ShapeError
from ..rng import SeededRng
from .grid import CORNERS, _check_points

N_COARSE = 3072


def sample_coarse(points: np.ndarray, rng: SeededRng, n: int = N_COARSE) -> Tuple[np.ndarray, bool]:
    """``n`` rows of ``points``; returns ``(selection, topped_up)``.

    With at least ``n`` rows the draw is without replacement. Otherwise every
    row is kept once and the remainder is drawn with replacement.
    """
    p = np.asarray(points, dtype=np.float64)
    if len(p) == 0:
        raise EmptyInputError("cannot sample from an empty cloud")
    g = rng.generator()
    if len(p) >= n:
        return p[g.choice(len(p), n, replace=False)], False
    extra = g.integers(0, len(p), n - len(p))
    return p[np.concatenate([np.arange(len(p)), extra])], True


def cell_corner_ids(points: np.ndarray, res: int) -> np.ndarray:
    """Flat vertex ids ``(N, 8)`` of the cell holding each point.

    A point on a face shared by two cells goes to the cell with the lower index.
    """
    u = (points + 1.0) * ((res - 1) / 2.0)
    i0 = np.clip(np.ceil(u).astype(np.int64) - 1, 0, res - 2)
    ids = np.empty((len(points), 8), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        ids[:, c] = ((i0[:, 0] + dx) * res + (i0[:, 1] + dy)) * res + (i0[:, 2] + dz)
    return ids


def _check_maps(maps: Sequence[np.ndarray]) -> List[np.ndarray]:
    out = []
    for k, m in enumerate(maps):
        m = np.asarray(m, dtype=np.float64)
        if m.ndim != 4 or not (m.shape[1] == m.shape[2] == m.shape[3]) or m.shape[1] < 2:
            raise ShapeError(f"feature map {k} must have shape (C, r, r, r), got {m.shape}")
        out.append(m)
    return out


def cubic_feature_sampling(points: np.ndarray, maps: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate the raw features of the 8 enclosing vertices for every map.

    Layout per point: for each map in the given order, 8 corner blocks of
    ``C`` channels each. Width = ``8 * sum(C)``.
    """
    p = _check_points(points)
    blocks = []
    for m in _check_maps(maps):
        c, r = m.shape[0], m.shape[1]
        flat = m.reshape(c, -1)
        ids = cell_corner_ids(p, r)
        blocks.append(flat[:, ids].transpose(1, 2, 0).reshape(len(p), 8 * c))
    return np.concatenate(blocks, axis=1) if blocks else np.zeros((len(p), 0))


def cubic_feature_sampling_grad(points: np.ndarray, maps: Sequence[np.ndarray],
                                upstream: np.ndarray) -> List[np.ndarray]:
    """Gradient of ``sum(upstream * cubic_feature_sampling(points, maps))`` per map."""
    p = _check_points(points)
    ms = _check_maps(maps)
    up = np.asarray(upstream, dtype=np.float64)
    width = 8 * sum(m.shape[0] for m in ms)
    if up.shape != (len(p), width):
        raise ShapeError(f"upstream gradient must have shape {(len(p), width)}, got {up.shape}")
    grads, col = [], 0
    for m in ms:
        c, r = m.shape[0], m.shape[1]
        ids = cell_corner_ids(p, r).ravel()
        vals = up[:, col:col + 8 * c].reshape(-1, c)
        col += 8 * c
        g = np.zeros((r ** 3, c))
        np.add.at(g, ids, vals)
        grads.append(g.T.reshape(m.shape))
    return grads
