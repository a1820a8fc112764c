"""Merging generated points into a measured scene."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import KdIndex, PointCloud

MEASURED = 0
GENERATED = 1


@dataclass(frozen=True)
class MergeConfig:
    threshold: float = 0.08

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("merge threshold must be positive")


def merge_completion(measured: PointCloud, generated: PointCloud,
                     cfg: MergeConfig = MergeConfig()) -> PointCloud:
    """Measured points verbatim, plus generated points at least ``threshold`` from all of them.

    The result carries a ``provenance`` uint8 extra (0 measured, 1 generated).
    An existing ``provenance`` on the measured cloud is kept, so merging twice
    with the same generated cloud is a no-op.
    """
    if measured.frame != generated.frame:
        raise ValueError(f"frame mismatch: {measured.frame} vs {generated.frame}")
    prov_in = measured.extra.get("provenance")
    prov_in = (np.zeros(len(measured), dtype=np.uint8) if prov_in is None
               else np.asarray(prov_in, dtype=np.uint8))
    if len(generated) == 0:
        keep = np.zeros(0, dtype=np.int64)
    elif len(measured) == 0:
        keep = np.arange(len(generated))
    else:
        d = np.sqrt(KdIndex(measured.points).nearest_sq(generated.points)[1])
        keep = np.flatnonzero(d >= cfg.threshold)
    pts = np.concatenate([measured.points, generated.points[keep]])
    prov = np.concatenate([prov_in, np.full(len(keep), GENERATED, dtype=np.uint8)])
    return PointCloud(pts, None, None, measured.frame, {"provenance": prov})
