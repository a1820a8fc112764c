"""Trilinear gridding over [-1, 1]^3 and its reverse, with analytic gradients.

Grids are indexed ``[ix, iy, iz]`` with vertex ``i`` at ``-1 + i * 2 / (res - 1)``.
Corner ``c`` of a cell is ``(dx, dy, dz) = (c >> 2, (c >> 1) & 1, c & 1)``.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from ..errors import ShapeError

RES = 80
CUBE_TOL = 1e-9
CORNERS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1] for c in range(8)], dtype=np.int64)


def vertex_coords(res: int) -> np.ndarray:
    return -1.0 + np.arange(res) * (2.0 / (res - 1))


def _check_points(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError("points must have shape (N, 3)")
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    if len(p) and np.max(np.abs(p)) > 1.0 + CUBE_TOL:
        raise ValueError("point outside the [-1, 1] cube")
    return np.clip(p, -1.0, 1.0)


def _locate(p: np.ndarray, res: int) -> Tuple[np.ndarray, np.ndarray]:
    """Lower cell index and fractional offset per coordinate."""
    u = (p + 1.0) * ((res - 1) / 2.0)
    i0 = np.clip(np.floor(u).astype(np.int64), 0, res - 2)
    return i0, u - i0


def gridding_weights(points: np.ndarray, res: int = RES) -> Tuple[np.ndarray, np.ndarray]:
    """Flat vertex ids ``(N, 8)`` and trilinear weights ``(N, 8)`` in corner order.

    The last corner takes ``1 - (sum of the first seven, left to right)``, so the
    left-to-right sum of each row is exactly 1.0 in floating point.
    """
    if res < 2:
        raise ValueError("grid resolution must be at least 2")
    p = _check_points(points)
    i0, f = _locate(p, res)
    lo, hi = 1.0 - f, f
    w = np.empty((len(p), 8))
    ids = np.empty((len(p), 8), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        wx = hi[:, 0] if dx else lo[:, 0]
        wy = hi[:, 1] if dy else lo[:, 1]
        wz = hi[:, 2] if dz else lo[:, 2]
        w[:, c] = wx * wy * wz
        ids[:, c] = ((i0[:, 0] + dx) * res + (i0[:, 1] + dy)) * res + (i0[:, 2] + dz)
    acc = w[:, 0].copy()
    for c in range(1, 7):
        acc = acc + w[:, c]
    w[:, 7] = 1.0 - acc
    return ids, w


def gridding(points: np.ndarray, res: int = RES, normalization: str = "sum") -> np.ndarray:
    """Scatter points onto the vertex lattice.

    ``"sum"`` adds every contributing weight (total mass = point count).
    ``"count"`` divides each vertex by the number of points that touched it.
    """
    if normalization not in ("sum", "count"):
        raise ValueError("normalization must be 'sum' or 'count'")
    ids, w = gridding_weights(points, res)
    flat = np.bincount(ids.ravel(), weights=w.ravel(), minlength=res ** 3)
    if normalization == "count":
        cnt = np.bincount(ids.ravel(), minlength=res ** 3)
        flat = np.where(cnt > 0, flat / np.maximum(cnt, 1), 0.0)
    return flat.reshape(res, res, res)


def gridding_grad(points: np.ndarray, upstream: np.ndarray, normalization: str = "sum") -> np.ndarray:
    """Gradient of ``sum(upstream * gridding(points))`` with respect to the points.

    Weights are piecewise linear in each coordinate; on cell faces the
    derivative of the lower cell is used.
    """
    g = np.asarray(upstream, dtype=np.float64)
    res = g.shape[0]
    if g.shape != (res, res, res):
        raise ShapeError("upstream gradient must be a cubic grid")
    p = _check_points(points)
    i0, f = _locate(p, res)
    ids, _ = gridding_weights(p, res)
    gflat = g.ravel()
    if normalization == "count":
        cnt = np.bincount(ids.ravel(), minlength=res ** 3).astype(np.float64)
        gflat = gflat / np.maximum(cnt, 1.0)
    elif normalization != "sum":
        raise ValueError("normalization must be 'sum' or 'count'")
    inv_h = (res - 1) / 2.0
    out = np.zeros_like(p)
    lo, hi = 1.0 - f, f
    for c, (dx, dy, dz) in enumerate(CORNERS):
        up = gflat[ids[:, c]]
        wx = hi[:, 0] if dx else lo[:, 0]
        wy = hi[:, 1] if dy else lo[:, 1]
        wz = hi[:, 2] if dz else lo[:, 2]
        sx = inv_h if dx else -inv_h
        sy = inv_h if dy else -inv_h
        sz = inv_h if dz else -inv_h
        out[:, 0] += up * sx * wy * wz
        out[:, 1] += up * wx * sy * wz
        out[:, 2] += up * wx * wy * sz
    return out


def _cell_views(grid: np.ndarray):
    """The 8 corner value arrays of every cell, each ``(res-1)^3``, in corner order."""
    views = []
    for dx, dy, dz in CORNERS:
        views.append(grid[dx:dx + grid.shape[0] - 1, dy:dy + grid.shape[1] - 1,
                          dz:dz + grid.shape[2] - 1])
    return views


def _reverse_all(grid: np.ndarray):
    res = grid.shape[0]
    v = vertex_coords(res)
    views = _cell_views(grid)
    total = views[0].copy()
    for c in range(1, 8):
        total = total + views[c]
    nonzero = views[0] != 0
    for c in range(1, 8):
        nonzero |= views[c] != 0
    emit = nonzero & (total != 0)
    # weighted average per axis: lower vertex times the lower-corner mass
    # plus upper vertex times the upper-corner mass
    coords = []
    for axis in range(3):
        lower = np.zeros_like(total)
        upper = np.zeros_like(total)
        for c, corner in enumerate(CORNERS):
            if corner[axis]:
                upper = upper + views[c]
            else:
                lower = lower + views[c]
        shape = [1, 1, 1]
        shape[axis] = res - 1
        lo_v = v[:-1].reshape(shape)
        hi_v = v[1:].reshape(shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            coords.append((lo_v * lower + hi_v * upper) / total)
    return emit, coords, total


def gridding_reverse_cells(grid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Emitted points and the ``(ix, iy, iz)`` lower-corner index of their cells.

    A cell emits when at least one of its vertices is nonzero; cells whose
    vertex values cancel to a zero total are skipped. Output order is C order
    over cells.
    """
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 3 or len(set(g.shape)) != 1 or g.shape[0] < 2:
        raise ShapeError("grid must be a cube with at least 2 vertices per axis")
    emit, coords, _ = _reverse_all(g)
    cells = np.argwhere(emit)
    pts = np.stack([c[emit] for c in coords], axis=1)
    return pts, cells


def gridding_reverse(grid: np.ndarray) -> np.ndarray:
    return gridding_reverse_cells(grid)[0]


def gridding_reverse_grad(grid: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * gridding_reverse(grid))`` w.r.t. vertex values.

    For an emitted point ``q = sum_v w_v x_v / sum_v w_v`` of one cell,
    ``dq/dw_v = (x_v - q) / sum_v w_v``.
    """
    g = np.asarray(grid, dtype=np.float64)
    pts, cells = gridding_reverse_cells(g)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != pts.shape:
        raise ShapeError(f"upstream gradient shape {up.shape} != output shape {pts.shape}")
    res = g.shape[0]
    v = vertex_coords(res)
    views = _cell_views(g)
    idx = tuple(cells.T)
    total = sum(views[c][idx] for c in range(8))
    out = np.zeros(res ** 3)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        xv = np.stack([v[cells[:, 0] + dx], v[cells[:, 1] + dy], v[cells[:, 2] + dz]], axis=1)
        contrib = np.einsum("ij,ij->i", up, xv - pts) / total
        flat = ((cells[:, 0] + dx) * res + (cells[:, 1] + dy)) * res + (cells[:, 2] + dz)
        out += np.bincount(flat, weights=contrib, minlength=res ** 3)
    return out.reshape(res, res, res)
