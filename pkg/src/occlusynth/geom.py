"""Point clouds, boxes and nearest-neighbour search.

Points are ``(N, 3)`` float64 arrays. Distances reported by :class:`KdIndex`
are recomputed from coordinates with a fixed formula, so any two code paths
that agree on neighbour ids also agree on distances bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInputError

FRAMES = ("world", "normalized")

# relative slack when collecting candidates that may tie with the k-th neighbour
_TIE_RTOL = 1e-9
_TIE_ATOL = 1e-15


def as_points(a, name: str = "points") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 3:
        arr = arr.reshape(1, 3)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {arr.shape}")
    return arr


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance along the last axis, fixed summation order."""
    d = a - b
    return (d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1]) + d[..., 2] * d[..., 2]


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.max, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("min and max must have the same dimension")
        if np.any(lo > hi):
            raise ValueError("Aabb requires min <= max componentwise")
        object.__setattr__(self, "min", _frozen(lo))
        object.__setattr__(self, "max", _frozen(hi))

    @classmethod
    def of(cls, pts: np.ndarray) -> "Aabb":
        pts = np.asarray(pts, dtype=np.float64)
        if len(pts) == 0:
            raise EmptyInputError("empty input")
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return np.all((pts >= self.min) & (pts <= self.max), axis=-1)


@dataclass(frozen=True)
class PointCloud:
    """Unordered 3D points with optional per-point sensor heads and normals.

    ``extra`` carries additional per-point scalar properties (reflectance,
    provenance, unknown PLY properties) keyed by name.
    """

    points: np.ndarray
    heads: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    frame: str = "world"
    extra: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        n = len(pts)
        object.__setattr__(self, "points", _frozen(pts))
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}")
        if self.heads is not None:
            h = as_points(self.heads, "heads")
            if len(h) != n:
                raise ValueError("heads must have the same length as points")
            object.__setattr__(self, "heads", _frozen(h))
        if self.normals is not None:
            nrm = as_points(self.normals, "normals")
            if len(nrm) != n:
                raise ValueError("normals must have the same length as points")
            if n and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", _frozen(nrm))
        extra = {}
        for k, v in dict(self.extra).items():
            v = np.asarray(v)
            if len(v) != n:
                raise ValueError(f"extra property {k!r} has wrong length")
            extra[k] = _frozen(v)
        object.__setattr__(self, "extra", extra)

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        """Cloud restricted to ``idx`` (boolean mask or index array), all fields kept aligned."""
        idx = np.asarray(idx)
        return PointCloud(
            self.points[idx],
            None if self.heads is None else self.heads[idx],
            None if self.normals is None else self.normals[idx],
            self.frame,
            {k: v[idx] for k, v in self.extra.items()},
        )

    def with_points(self, pts: np.ndarray, frame: Optional[str] = None, heads=None) -> "PointCloud":
        return PointCloud(
            pts,
            heads,
            None,
            self.frame if frame is None else frame,
            dict(self.extra),
        )

    def bounds(self) -> Aabb:
        return Aabb.of(self.points)


def concat(clouds: List[PointCloud]) -> PointCloud:
    if not clouds:
        raise EmptyInputError("empty input")
    frames = {c.frame for c in clouds}
    if len(frames) != 1:
        raise ValueError("cannot concatenate clouds in different frames")

    def cat(attr):
        vals = [getattr(c, attr) for c in clouds]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    keys = set.intersection(*(set(c.extra) for c in clouds))
    return PointCloud(
        np.concatenate([c.points for c in clouds]),
        cat("heads"),
        cat("normals"),
        frames.pop(),
        {k: np.concatenate([c.extra[k] for c in clouds]) for k in sorted(keys)},
    )


class KdIndex:
    """Balanced k-d tree with exact, id-tie-broken answers.

    The tree (scipy's cKDTree) only proposes candidates; final ranking uses
    :func:`sq_dist` and ``(distance, id)`` lexicographic order, which makes the
    answers identical to an exhaustive scan.
    """

    def __init__(self, points: np.ndarray):
        pts = as_points(points)
        if len(pts) == 0:
            raise EmptyInputError("empty input")
        self.points = _frozen(pts)
        self._tree = cKDTree(self.points, balanced_tree=True, compact_nodes=True)

    def __len__(self) -> int:
        return len(self.points)

    def nearest_k(self, query, k: int) -> List[Tuple[int, float]]:
        ids, d = self.query(np.asarray(query, dtype=np.float64).reshape(1, 3), k)
        return [(int(i), float(x)) for i, x in zip(ids[0], d[0])]

    def query(self, queries: np.ndarray, k: int = 1) -> Tuple[np.ndarray, np.ndarray]:
        """k nearest neighbours for many queries: ``(ids, distances)``, each ``(Q, k)``."""
        q = as_points(queries, "queries")
        n = len(self.points)
        if k < 1:
            raise ValueError("k must be >= 1")
        if k > n:
            raise ValueError(f"k={k} exceeds cloud size {n}")
        if len(q) == 0:
            return np.zeros((0, k), dtype=np.int64), np.zeros((0, k))
        kk = min(k + 1, n)
        d_tree, i_tree = self._tree.query(q, k=kk)
        d_tree = d_tree.reshape(len(q), kk)
        i_tree = i_tree.reshape(len(q), kk).astype(np.int64)

        ids = np.empty((len(q), k), dtype=np.int64)
        bound = d_tree[:, k - 1] * (1.0 + _TIE_RTOL) + _TIE_ATOL
        if kk > k:
            ambiguous = d_tree[:, k] <= bound
        else:
            ambiguous = np.zeros(len(q), dtype=bool)

        # unambiguous rows: tree's first k are the true first k; reorder by (dist, id)
        clear = ~ambiguous
        if np.any(clear):
            cand = i_tree[clear, :k]
            dd = sq_dist(self.points[cand], q[clear][:, None, :])
            order = _rowwise_lexsort(dd, cand)
            ids[clear] = np.take_along_axis(cand, order, axis=1)

        for row in np.flatnonzero(ambiguous):
            cand = np.asarray(self._tree.query_ball_point(q[row], bound[row]), dtype=np.int64)
            dd = sq_dist(self.points[cand], q[row])
            order = np.lexsort((cand, dd))
            ids[row] = cand[order[:k]]

        dist = np.sqrt(sq_dist(self.points[ids], q[:, None, :]))
        return ids, dist

    def nearest_sq(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest neighbour id and *squared* distance per query."""
        ids, _ = self.query(queries, 1)
        ids = ids[:, 0]
        return ids, sq_dist(self.points[ids], as_points(queries))

    def radius(self, query, r: float) -> List[Tuple[int, float]]:
        """All points within distance ``r`` of ``query``, ascending by (distance, id)."""
        if r < 0:
            raise ValueError("radius must be non-negative")
        q = np.asarray(query, dtype=np.float64).reshape(3)
        cand = np.asarray(
            self._tree.query_ball_point(q, r * (1.0 + _TIE_RTOL) + (_TIE_ATOL if r > 0 else 0.0)),
            dtype=np.int64,
        )
        if len(cand) == 0:
            return []
        d = np.sqrt(sq_dist(self.points[cand], q))
        keep = d <= r
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        return [(int(cand[i]), float(d[i])) for i in order]


def _rowwise_lexsort(primary: np.ndarray, secondary: np.ndarray) -> np.ndarray:
    # stable sort by secondary then by primary == lexicographic (primary, secondary)
    o1 = np.argsort(secondary, axis=1, kind="stable")
    p = np.take_along_axis(primary, o1, axis=1)
    o2 = np.argsort(p, axis=1, kind="stable")
    return np.take_along_axis(o1, o2, axis=1)


def build_kd_index(cloud) -> KdIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return KdIndex(pts)


def nearest_k(index: KdIndex, query, k: int) -> List[Tuple[int, float]]:
    return index.nearest_k(query, k)
