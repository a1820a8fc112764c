"""Procedural street scenes scanned by a simulated profile scanner.

The scanner drives along +x. Its mirror sweeps a plane perpendicular to the
driving direction, so every ray of one strip column has constant x and the
scene reduces to a 2D (y, z) problem per column. The world is a union of
axis-aligned boxes expressed relative to the local road height
``ground_z(x) = slope * x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .rng import SeededRng
from .scanstrip import STRIP_ROWS, ScanStrip

INF = 1e9


@dataclass(frozen=True)
class Box:
    """Solid box; ``z`` bounds are relative to the road surface."""

    x: Tuple[float, float]
    y: Tuple[float, float]
    z: Tuple[float, float]


@dataclass(frozen=True)
class StreetParams:
    length: float = 60.0
    x0: float = 0.0
    col_spacing: float = 0.1
    road_width: float = 7.0
    head_y: float = -3.5
    sensor_height: float = 2.75
    curb_height: float = 0.15
    sidewalk_width: float = 3.0
    wall_height: float = 8.0
    slope: float = 0.0
    noise: float = 0.0
    # (x_start, x_end) ranges where the right curb is lowered to a driveway
    driveways: Tuple[Tuple[float, float], ...] = ()
    poles: Tuple[Tuple[float, float], ...] = ()


@dataclass
class StreetScene:
    params: StreetParams
    boxes: List[Box] = field(default_factory=list)

    def ground_z(self, x):
        return self.params.slope * np.asarray(x, dtype=np.float64)

    def curb_lines(self) -> List[np.ndarray]:
        """Ground-truth curb face lines (BEV start/end) for the right and left curbs."""
        p = self.params
        x_end = p.x0 + p.length
        lines = []
        cuts = sorted(p.driveways)
        start = p.x0
        for a, b in cuts:
            lines.append(np.array([[start, 0.0], [a, 0.0]]))
            start = b
        lines.append(np.array([[start, 0.0], [x_end, 0.0]]))
        lines.append(np.array([[p.x0, -p.road_width], [x_end, -p.road_width]]))
        return [ln for ln in lines if ln[1, 0] - ln[0, 0] > 0]


def build_street(params: StreetParams) -> StreetScene:
    p = params
    W, S, hc = p.road_width, p.sidewalk_width, p.curb_height
    full = (-INF, INF)
    boxes = [
        Box(full, (-W, 0.0), (-2.0, 0.0)),                       # road slab
        Box(full, (S, S + 6.0), (-2.0, hc + p.wall_height)),     # right building
        Box(full, (-W - S - 6.0, -W - S), (-2.0, hc + p.wall_height)),
        Box(full, (-W - S, -W), (-2.0, hc)),                     # left sidewalk
    ]
    # right sidewalk, interrupted by lowered driveways
    edges = [p.x0 - 1.0]
    for a, b in sorted(p.driveways):
        edges += [a, b]
    edges.append(p.x0 + p.length + 1.0)
    for i in range(0, len(edges), 2):
        boxes.append(Box((edges[i], edges[i + 1]), (0.0, S), (-2.0, hc)))
    for a, b in sorted(p.driveways):
        boxes.append(Box((a, b), (0.0, S), (-2.0, 0.02)))
    for px, py in p.poles:
        boxes.append(Box((px - 0.05, px + 0.05), (py - 0.05, py + 0.05), (-2.0, 2.5)))
    return StreetScene(p, boxes)


def _ray_boxes_2d(oy, oz, dy, dz, boxes_yz):
    """Smallest positive hit parameter of 2D rays against 2D boxes (slab test)."""
    t_best = np.full(dy.shape, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_y = 1.0 / dy
        inv_z = 1.0 / dz
        for (y0, y1), (z0, z1) in boxes_yz:
            ty0, ty1 = (y0 - oy) * inv_y, (y1 - oy) * inv_y
            tz0, tz1 = (z0 - oz) * inv_z, (z1 - oz) * inv_z
            # rays parallel to a slab: inside -> unbounded, outside -> miss
            par_y = dy == 0
            ty0 = np.where(par_y, np.where((oy >= y0) & (oy <= y1), -np.inf, np.inf), ty0)
            ty1 = np.where(par_y, np.where((oy >= y0) & (oy <= y1), np.inf, -np.inf), ty1)
            par_z = dz == 0
            tz0 = np.where(par_z, np.where((oz >= z0) & (oz <= z1), -np.inf, np.inf), tz0)
            tz1 = np.where(par_z, np.where((oz >= z0) & (oz <= z1), np.inf, -np.inf), tz1)
            t_near = np.maximum(np.minimum(ty0, ty1), np.minimum(tz0, tz1))
            t_far = np.minimum(np.maximum(ty0, ty1), np.maximum(tz0, tz1))
            hit = (t_near <= t_far) & (t_near > 1e-9)
            t_best = np.where(hit & (t_near < t_best), t_near, t_best)
    return t_best


def scan_street(scene: StreetScene, rng: Optional[SeededRng] = None,
                max_range: float = 60.0, strip_id: int = 0) -> ScanStrip:
    """Simulate one strip: ``STRIP_ROWS`` mirror angles by one column per position."""
    p = scene.params
    n_cols = int(round(p.length / p.col_spacing))
    xs = p.x0 + (np.arange(n_cols) + 0.5) * p.col_spacing
    theta = 2.0 * np.pi * (np.arange(STRIP_ROWS) + 0.5) / STRIP_ROWS
    dy, dz = np.cos(theta), np.sin(theta)

    P = np.full((STRIP_ROWS, n_cols, 3), np.nan)
    H = np.empty((STRIP_ROWS, n_cols, 3))
    valid = np.zeros((STRIP_ROWS, n_cols), dtype=bool)
    oz_local = p.sensor_height
    gz = scene.ground_z(xs)
    H[..., 0] = xs[None, :]
    H[..., 1] = p.head_y
    H[..., 2] = (gz + p.sensor_height)[None, :]

    # columns share box sets except where x-limited boxes start or stop
    sets = {}
    for c, x in enumerate(xs):
        key = tuple(i for i, b in enumerate(scene.boxes) if b.x[0] <= x <= b.x[1])
        sets.setdefault(key, []).append(c)
    for key, cols in sets.items():
        yz = [(scene.boxes[i].y, scene.boxes[i].z) for i in key]
        t = _ray_boxes_2d(p.head_y, oz_local, dy, dz, yz)
        ok = np.isfinite(t) & (t <= max_range)
        cols = np.asarray(cols)
        valid[:, cols] = ok[:, None]
        y = p.head_y + t * dy
        z = oz_local + t * dz
        P[:, cols, 0] = xs[cols][None, :]
        P[:, cols, 1] = np.where(ok, y, np.nan)[:, None]
        P[:, cols, 2] = np.where(ok, z, np.nan)[:, None] + gz[cols][None, :]

    if p.noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        g = rng.child("range_noise").generator()
        jitter = g.normal(0.0, p.noise, size=valid.shape)
        ray = P - H
        dist = np.linalg.norm(ray, axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = (dist + jitter) / dist
        P = np.where(valid[..., None], H + ray * scale[..., None], np.nan)
    P[~valid] = np.nan
    refl = np.where(valid, 0.5, np.nan)
    return ScanStrip(P, H, valid, None, refl, strip_id)


def random_street(rng: SeededRng, length: float = 60.0, x0: float = 0.0) -> StreetParams:
    """Street parameters drawn from plausible urban ranges."""
    g = rng.generator()
    return StreetParams(
        length=length,
        x0=x0,
        road_width=float(g.uniform(6.0, 8.0)),
        head_y=-float(g.uniform(3.0, 3.8)),
        curb_height=float(g.uniform(0.10, 0.18)),
        sidewalk_width=float(g.uniform(2.5, 3.5)),
        slope=float(g.uniform(-0.02, 0.02)),
        noise=0.003,
    )
