"""Curb (road boundary) extraction and parking-candidate selection."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .geom import Aabb, PointCloud
from .rng import SeededRng
from .scanstrip import ScanStrip


@dataclass(frozen=True)
class CurbRuleConfig:
    raster_cell: float = 0.33
    max_median_height: float = 0.30
    min_elongation: float = 5.0
    ground_band: float = 0.5
    min_boundary_length: float = 7.0
    min_endpoint_clearance: float = 3.5

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if not v > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Segment:
    ids: np.ndarray          # flat strip pixel indices, row * cols + col
    points: np.ndarray       # (M, 3) member coordinates
    mean_normal: np.ndarray
    footprint: Aabb
    strip_id: int = 0

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class BoundaryPolyline:
    vertices: np.ndarray     # (K, 2) bird's-eye positions
    z: np.ndarray            # (K,) curb-top height per vertex
    sidewalk_sign: int = 1   # +1: sidewalk lies left of the travel direction
    id: int = 0

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 2:
            raise ValueError("a polyline needs at least two 2D vertices")
        if self.sidewalk_sign not in (1, -1):
            raise ValueError("sidewalk_sign must be +1 or -1")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.float64).reshape(len(v)))

    @property
    def curb_top_height(self) -> float:
        return float(np.mean(self.z))

    @property
    def tangents(self) -> np.ndarray:
        return _tangents(self.vertices)

    @property
    def arc_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)))

    def point_at(self, s: float) -> Tuple[np.ndarray, np.ndarray]:
        """Position and unit tangent at arc length ``s``."""
        seg = np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        s = float(np.clip(s, 0.0, cum[-1]))
        i = int(np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1))
        while seg[i] == 0 and i + 1 < len(seg):
            i += 1
        u = (s - cum[i]) / seg[i] if seg[i] > 0 else 0.0
        a, b = self.vertices[i], self.vertices[i + 1]
        return a + u * (b - a), (b - a) / seg[i]


@dataclass(frozen=True)
class ParkingCandidate:
    anchor: np.ndarray       # (2,) on the boundary
    direction: np.ndarray    # (2,) unit road direction
    side: np.ndarray         # (2,) unit normal pointing toward the sidewalk
    polyline_id: int
    arc_position: float


def _tangents(v: np.ndarray) -> np.ndarray:
    d = np.gradient(v, axis=0) if len(v) > 2 else np.repeat(np.diff(v, axis=0), len(v), axis=0)
    n = np.linalg.norm(d, axis=1, keepdims=True)
    n[n == 0] = 1.0
    return d / n


def _left(t: np.ndarray) -> np.ndarray:
    return np.stack([-t[..., 1], t[..., 0]], axis=-1)


def grow_vertical_segments(strip: ScanStrip, angle_tol: float = 30.0,
                           min_points: int = 20, window_cols: Optional[int] = None) -> List[Segment]:
    """Strip-space connected regions of pixels whose normals are near horizontal.

    A pixel qualifies when its normal deviates less than ``angle_tol`` degrees
    from the horizontal plane. Components use 4-connectivity in the strip.
    With ``window_cols`` set, components are grown separately inside column
    windows of that width, so a long curb on a sloped street comes out as
    short pieces that each sit close to their local ground.
    """
    ok = strip.valid & strip.has_normal
    nz = np.where(ok, np.abs(np.nan_to_num(strip.n[..., 2])), 1.0)
    mask = ok & (nz < np.sin(np.radians(angle_tol)))
    if window_cols is None:
        labels, n_lab = ndimage.label(mask)
    else:
        if window_cols < 1:
            raise ValueError("window_cols must be >= 1")
        labels = np.zeros(mask.shape, dtype=np.int64)
        n_lab = 0
        for a in range(0, mask.shape[1], window_cols):
            lab, n = ndimage.label(mask[:, a:a + window_cols])
            labels[:, a:a + window_cols] = np.where(lab > 0, lab + n_lab, 0)
            n_lab += n
    if n_lab == 0:
        return []
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    bounds = np.searchsorted(flat[order], np.arange(1, n_lab + 2))
    p_flat = strip.p.reshape(-1, 3)
    n_flat = strip.n.reshape(-1, 3)
    segs = []
    for lab in range(n_lab):
        ids = order[bounds[lab]:bounds[lab + 1]]
        if len(ids) < min_points:
            continue
        ids = np.sort(ids)
        pts = p_flat[ids]
        mn = n_flat[ids].mean(axis=0)
        mn = mn / max(np.linalg.norm(mn), 1e-300)
        segs.append(Segment(ids.astype(np.int64), pts, mn, Aabb.of(pts), strip.strip_id))
    # deterministic order: by first member pixel (row-major)
    segs.sort(key=lambda s: int(s.ids[0]))
    return segs


def local_ground_height(cloud_points: np.ndarray, segment: Segment, radius: float = 1.0,
                        percentile: float = 5.0) -> float:
    """Low percentile of z among points within ``radius`` (BEV) of the segment."""
    pts = np.asarray(cloud_points, dtype=np.float64)
    lo = segment.footprint.min[:2] - radius
    hi = segment.footprint.max[:2] + radius
    near = np.all((pts[:, :2] >= lo) & (pts[:, :2] <= hi), axis=1)
    cand = pts[near]
    if len(cand):
        d, _ = cKDTree(segment.points[:, :2]).query(cand[:, :2], k=1)
        cand = cand[d <= radius]
    if len(cand) == 0:
        cand = segment.points
    return float(np.percentile(cand[:, 2], percentile))


def curb_rule_values(segment: Segment, cfg: CurbRuleConfig = CurbRuleConfig()) -> Dict[str, float]:
    pts = segment.points
    cell = np.floor(pts[:, :2] / cfg.raster_cell).astype(np.int64)
    _, inv = np.unique(cell, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    n_cells = inv.max() + 1
    zmax = np.full(n_cells, -np.inf)
    zmin = np.full(n_cells, np.inf)
    np.maximum.at(zmax, inv, pts[:, 2])
    np.minimum.at(zmin, inv, pts[:, 2])
    median_h = float(np.median(zmax - zmin))

    xy = pts[:, :2] - pts[:, :2].mean(axis=0)
    if len(pts) > 1:
        w, v = np.linalg.eigh(xy.T @ xy)
        axis = v[:, -1]
        proj = xy @ axis
        length = float(proj.max() - proj.min())
    else:
        length = 0.0
    elong = np.inf if median_h == 0 else length / median_h
    return {"median_height": median_h, "length": length, "elongation": float(elong),
            "z_min": float(pts[:, 2].min()), "z_max": float(pts[:, 2].max())}


def classify_curb(segment: Segment, ground_height: float,
                  cfg: CurbRuleConfig = CurbRuleConfig()) -> bool:
    """All three curb rules: low per-cell height, elongated, close to the ground."""
    if len(segment) == 0:
        raise ValueError("segment is empty")
    r = curb_rule_values(segment, cfg)
    low = r["median_height"] < cfg.max_median_height
    elongated = r["elongation"] >= cfg.min_elongation
    near_ground = (r["z_min"] >= ground_height - cfg.ground_band
                   and r["z_max"] <= ground_height + cfg.ground_band)
    return bool(low and elongated and near_ground)


def _densify(v: np.ndarray, z: np.ndarray, max_gap: float = 1.0):
    out_v, out_z = [v[0]], [z[0]]
    for i in range(1, len(v)):
        gap = np.linalg.norm(v[i] - v[i - 1])
        k = int(np.ceil(gap / max_gap))
        for j in range(1, k):
            u = j / k
            out_v.append(v[i - 1] + u * (v[i] - v[i - 1]))
            out_z.append(z[i - 1] + u * (z[i] - z[i - 1]))
        out_v.append(v[i])
        out_z.append(z[i])
    return np.array(out_v), np.array(out_z)


def _segment_polyline(seg: Segment, step: float) -> Tuple[np.ndarray, np.ndarray]:
    xy = seg.points[:, :2]
    c = xy.mean(axis=0)
    w, vecs = np.linalg.eigh((xy - c).T @ (xy - c))
    u = vecs[:, -1]
    # canonical sign: first significant component positive
    if u[0] < -1e-12 or (abs(u[0]) <= 1e-12 and u[1] < 0):
        u = -u
    t = (xy - c) @ u
    b = np.floor((t - t.min()) / step).astype(np.int64)
    verts, zs = [], []
    for k in np.unique(b):
        m = b == k
        verts.append(xy[m].mean(axis=0))
        zs.append(seg.points[m, 2].max())
    verts, zs = np.array(verts), np.array(zs)
    # end vertices slide along the principal axis to the true extent so that
    # neighbouring pieces of one curb meet within the chaining gap
    verts[0] += (t.min() - (verts[0] - c) @ u) * u
    verts[-1] += (t.max() - (verts[-1] - c) @ u) * u
    if len(verts) < 2:
        lo, hi = c + t.min() * u, c + t.max() * u
        if np.allclose(lo, hi):
            hi = lo + 1e-3 * u
        verts = np.array([lo, hi])
        zs = np.array([zs[0], zs[0]])
    return verts, zs


def _direction(v: np.ndarray) -> np.ndarray:
    d = v[-1] - v[0]
    return d / max(np.linalg.norm(d), 1e-300)


def _try_chain(a, b, max_gap, max_angle):
    """Concatenate polylines ``a`` and ``b`` (vertex, z) if their ends meet and directions agree."""
    va, za = a
    vb, zb = b
    cos_gate = np.cos(np.radians(max_angle))
    if abs(float(_direction(va) @ _direction(vb))) < cos_gate:
        return None
    options = [
        (np.linalg.norm(va[-1] - vb[0]), False, False),
        (np.linalg.norm(va[-1] - vb[-1]), False, True),
        (np.linalg.norm(va[0] - vb[-1]), True, True),
        (np.linalg.norm(va[0] - vb[0]), True, False),
    ]
    gap, rev_a, rev_b = min(options, key=lambda o: o[0])
    if gap > max_gap:
        return None
    if rev_a and rev_b:
        # b ends where a starts: b then a keeps a's orientation
        return _densify(np.vstack([vb, va]), np.concatenate([zb, za]))
    if rev_a:
        vb2, zb2 = vb[::-1], zb[::-1]
        return _densify(np.vstack([vb2, va]), np.concatenate([zb2, za]))
    if rev_b:
        vb, zb = vb[::-1], zb[::-1]
    return _densify(np.vstack([va, vb]), np.concatenate([za, zb]))


def _sidewalk_sign(v: np.ndarray, cloud_points: Optional[np.ndarray],
                   fallback_normal: np.ndarray, tree: Optional[cKDTree] = None) -> int:
    tang = _tangents(v)
    left = _left(tang)
    if cloud_points is not None and len(cloud_points):
        tree = cKDTree(cloud_points[:, :2]) if tree is None else tree
        score = 0.0
        for vi, li in zip(v, left):
            idx = tree.query_ball_point(vi, 1.5)
            if not idx:
                continue
            q = cloud_points[idx]
            s = (q[:, :2] - vi) @ li
            lz, rz = q[(s > 0.3), 2], q[(s < -0.3), 2]
            if len(lz) and len(rz):
                score += np.median(lz) - np.median(rz)
        if score != 0.0:
            return 1 if score > 0 else -1
    # curb faces are seen from the road, so their normals point at the road side
    toward_road = float(np.mean(left @ fallback_normal[:2]))
    return -1 if toward_road > 0 else 1


def build_boundary_map(segments: Sequence[Segment], cloud: Optional[PointCloud] = None,
                       step: float = 0.5, chain_gap: float = 0.5,
                       chain_angle: float = 15.0) -> List[BoundaryPolyline]:
    """Fit one ordered polyline per curb segment and chain collinear neighbours.

    Vertices are bin means along the segment's principal direction (``step``
    apart); ends within ``chain_gap`` metres whose overall directions agree
    within ``chain_angle`` degrees are joined. With ``cloud`` the sidewalk side
    is the higher ground across the line, otherwise it is opposite the mean
    curb-face normal.
    """
    items = []
    for seg in segments:
        v, z = _segment_polyline(seg, step)
        items.append(((*_densify(v, z),), [seg.mean_normal]))
    merged = True
    while merged:
        merged = False
        for i in range(len(items)):
            for j in range(i + 1, len(items)):
                out = _try_chain(items[i][0], items[j][0], chain_gap, chain_angle)
                if out is not None:
                    items[i] = (out, items[i][1] + items[j][1])
                    del items[j]
                    merged = True
                    break
            if merged:
                break
    pts = None if cloud is None or len(cloud) == 0 else cloud.points
    tree = None if pts is None or not items else cKDTree(pts[:, :2])
    polys = []
    for k, ((v, z), normals) in enumerate(items):
        sign = _sidewalk_sign(v, pts, np.mean(normals, axis=0), tree)
        polys.append(BoundaryPolyline(v, z, sign, k))
    return polys


def select_parking_candidates(polylines: Sequence[BoundaryPolyline],
                              cfg: CurbRuleConfig = CurbRuleConfig(),
                              rng: SeededRng = SeededRng(0),
                              per_polyline: int = 1) -> List[ParkingCandidate]:
    """Random anchors on boundaries long enough to park along.

    Only polylines longer than ``min_boundary_length`` qualify; anchors are
    uniform on the sub-arc at least ``min_endpoint_clearance`` from both ends.
    """
    out = []
    for poly in polylines:
        L = poly.arc_length
        if not L > cfg.min_boundary_length:
            continue
        lo, hi = cfg.min_endpoint_clearance, L - cfg.min_endpoint_clearance
        if hi < lo:
            continue
        g = rng.child("polyline", int(poly.id)).generator()
        for s in np.sort(g.uniform(lo, hi, size=per_polyline)):
            anchor, t = poly.point_at(s)
            side = poly.sidewalk_sign * _left(t)
            cand = ParkingCandidate(anchor, t, side, int(poly.id), float(s))
            assert lo <= s <= hi and abs(float(t @ side)) < 1e-12
            out.append(cand)
    return out


def polylines_to_geojson(polylines: Sequence[BoundaryPolyline]) -> dict:
    feats = []
    for p in polylines:
        feats.append({
            "type": "Feature",
            "geometry": {"type": "LineString",
                         "coordinates": [[float(x), float(y), float(z)]
                                         for (x, y), z in zip(p.vertices, p.z)]},
            "properties": {"id": int(p.id), "curb_top_height": p.curb_top_height,
                           "sidewalk_sign": int(p.sidewalk_sign),
                           "arc_length": p.arc_length},
        })
    return {"type": "FeatureCollection", "features": feats}


def polylines_from_geojson(doc: dict) -> List[BoundaryPolyline]:
    out = []
    for f in doc["features"]:
        c = np.asarray(f["geometry"]["coordinates"], dtype=np.float64)
        props = f.get("properties", {})
        out.append(BoundaryPolyline(c[:, :2], c[:, 2], int(props.get("sidewalk_sign", 1)),
                                    int(props.get("id", len(out)))))
    return out


def save_boundaries(path, polylines: Sequence[BoundaryPolyline]) -> None:
    with open(path, "w") as fh:
        json.dump(polylines_to_geojson(polylines), fh, indent=1)


def load_boundaries(path) -> List[BoundaryPolyline]:
    with open(path) as fh:
        return polylines_from_geojson(json.load(fh))


def extract_boundaries(strip: ScanStrip, cloud: PointCloud,
                       cfg: CurbRuleConfig = CurbRuleConfig(),
                       angle_tol: float = 30.0, min_points: int = 20,
                       window_cols: Optional[int] = None) -> List[BoundaryPolyline]:
    """Segments -> curb classification -> boundary polylines, for one filtered strip."""
    segs = grow_vertical_segments(strip, angle_tol, min_points, window_cols)
    curbs = [s for s in segs if classify_curb(s, local_ground_height(cloud.points, s), cfg)]
    return build_boundary_map(curbs, cloud)
