"""Completion losses and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import EmptyInputError
from .geom import KdIndex, PointCloud
from .kernels.grid import RES, gridding

REPORT_SCHEMA_VERSION = 1


def _pts(cloud) -> np.ndarray:
    p = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ValueError("expected an (N, 3) point array")
    if len(p) == 0:
        raise EmptyInputError("empty input")
    return p


def nn_sq_dist(src, dst) -> np.ndarray:
    """Squared distance from every point of ``src`` to its nearest point in ``dst``."""
    return KdIndex(_pts(dst)).nearest_sq(_pts(src))[1]


def chamfer(p, q) -> float:
    """Mean squared NN distance from ``p`` to ``q`` plus the same from ``q`` to ``p``."""
    return float(np.mean(nn_sq_dist(p, q)) + np.mean(nn_sq_dist(q, p)))


def precision_recall(p_out, p_gt, d: float = 0.01) -> Tuple[float, float]:
    if not d > 0:
        raise ValueError("distance threshold must be positive")
    prec = float(np.mean(np.sqrt(nn_sq_dist(p_out, p_gt)) < d))
    rec = float(np.mean(np.sqrt(nn_sq_dist(p_gt, p_out)) < d))
    return prec, rec


def fscore(p_out, p_gt, d: float = 0.01) -> Tuple[float, float, float]:
    """``(precision, recall, F)``; F is 0 when precision and recall are both 0."""
    prec, rec = precision_recall(p_out, p_gt, d)
    f = 0.0 if prec + rec == 0 else 2.0 * prec * rec / (prec + rec)
    return prec, rec, f


def gridding_loss(p_pred, p_gt, res: int = RES) -> float:
    """Mean absolute difference of the two clouds' vertex grids."""
    a = gridding(_pts(p_pred), res)
    b = gridding(_pts(p_gt), res)
    return float(np.mean(np.abs(a - b)))


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.01
    stage: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")


def staged_loss(p_coarse, p_output, p_gt, cfg: LossConfig = LossConfig()) -> float:
    """Stage 1 scores the coarse cloud by Chamfer distance, stage 2 by gridding loss.

    Both add ``alpha`` times the Chamfer distance of the dense output.
    """
    if cfg.stage == 1:
        first = chamfer(p_coarse, p_gt)
    elif cfg.stage == 2:
        first = gridding_loss(p_coarse, p_gt)
    else:
        raise ValueError("stage must be 1 or 2")
    return first + cfg.alpha * chamfer(p_output, p_gt)


@dataclass(frozen=True)
class PlaneStats:
    distances: np.ndarray
    within_5cm: float
    within_10cm: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    degenerate: np.ndarray        # True where the neighbourhood was collinear

    def to_json(self) -> dict:
        return {"count": int(len(self.distances)), "within_0.05": self.within_5cm,
                "within_0.10": self.within_10cm, "median": float(np.median(self.distances)),
                "hist_edges": self.hist_edges.tolist(), "hist_counts": self.hist_counts.tolist(),
                "degenerate": int(self.degenerate.sum())}


def plane_stats(filled, dense_gt, k: int = 15, collinear_tol: float = 1e-9,
                bins: Optional[np.ndarray] = None) -> PlaneStats:
    """Distance of each filled point to the plane through its ``k`` nearest ground-truth points.

    The plane passes through the neighbourhood centroid with the normal of least
    scatter. Collinear neighbourhoods have no plane; the distance to their line
    is used and the point is flagged.
    """
    f = _pts(filled)
    g = _pts(dense_gt)
    if len(g) < k:
        raise ValueError(f"need at least {k} ground-truth points, got {len(g)}")
    ids, _ = KdIndex(g).query(f, k)
    nb = g[ids]
    cen = nb.mean(axis=1)
    dev = nb - cen[:, None, :]
    cov = np.einsum("nki,nkj->nij", dev, dev) / k
    evals, evecs = np.linalg.eigh(cov)
    rel = f - cen
    normal = evecs[:, :, 0]
    dist = np.abs(np.einsum("ni,ni->n", rel, normal))
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= collinear_tol * scale
    if np.any(degenerate):
        axis = evecs[degenerate, :, 2]
        r = rel[degenerate]
        along = np.einsum("ni,ni->n", r, axis)[:, None] * axis
        dist[degenerate] = np.linalg.norm(r - along, axis=1)
    edges = np.linspace(0.0, 0.2, 21) if bins is None else np.asarray(bins, dtype=np.float64)
    counts, _ = np.histogram(np.minimum(dist, edges[-1]), bins=edges)
    return PlaneStats(dist, float(np.mean(dist <= 0.05)), float(np.mean(dist <= 0.10)),
                      edges, counts, degenerate)


@dataclass(frozen=True)
class MetricsReport:
    cd: float
    precision: float
    recall: float
    fscore: float
    gridding_loss: Optional[float]
    n_pred: int
    n_gt: int
    d: float
    frame: str

    def __post_init__(self):
        for name in ("precision", "recall", "fscore"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.cd < 0:
            raise ValueError("cd must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["schema_version"] = REPORT_SCHEMA_VERSION
        d["display"] = {"cd_x1e4": self.cd * 1e4}
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def evaluate(pred: PointCloud, gt: PointCloud, d: float = 0.01) -> MetricsReport:
    """All metrics in the frame shared by both clouds.

    The gridding loss is only defined inside the normalized cube and is
    omitted otherwise.
    """
    if pred.frame != gt.frame:
        raise ValueError(f"frame mismatch: {pred.frame} vs {gt.frame}")
    prec, rec, f = fscore(pred, gt, d)
    gl = None
    if np.max(np.abs(pred.points)) <= 1.0 and np.max(np.abs(gt.points)) <= 1.0:
        gl = gridding_loss(pred, gt)
    return MetricsReport(chamfer(pred, gt), prec, rec, f, gl, len(pred), len(gt), float(d), pred.frame)
