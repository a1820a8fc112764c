"""Vehicle meshes, local ground fitting and parking poses."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .boundary import ParkingCandidate
from .errors import EmptyInputError, FormatError, NoReliableGroundError
from .geom import PointCloud
from .rng import SeededRng

PARKING_MODES = ("on_road", "sidewalk", "perpendicular")


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray     # (V, 3)
    triangles: np.ndarray    # (T, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def corners(self) -> np.ndarray:
        """Triangle corner coordinates, shape ``(T, 3, 3)``."""
        return self.vertices[self.triangles]

    def transformed(self, R: np.ndarray, t: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(R).T + np.asarray(t), self.triangles)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)


@dataclass(frozen=True)
class VehicleDims:
    length: float = 4.5
    width: float = 1.8
    height: float = 1.5

    def __post_init__(self):
        if min(self.length, self.width, self.height) <= 0:
            raise ValueError("vehicle dimensions must be positive")
        if not self.length > self.width:
            raise ValueError("vehicle length must exceed its width")


@dataclass(frozen=True)
class GroundPlane:
    normal: np.ndarray
    d: float                 # plane: normal . x = d
    inliers: int
    rms: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9 or n[2] <= 0:
            raise ValueError("ground normal must be unit length and point upward")
        object.__setattr__(self, "normal", n)

    def height_at(self, x: float, y: float) -> float:
        n = self.normal
        return (self.d - n[0] * x - n[1] * y) / n[2]

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.normal - self.d


@dataclass(frozen=True)
class ModeProbabilities:
    on_road: float = 0.70
    sidewalk: float = 0.25
    perpendicular: float = 0.05

    def __post_init__(self):
        p = np.array([self.on_road, self.sidewalk, self.perpendicular])
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("mode probabilities must be non-negative and sum to 1")


@dataclass(frozen=True)
class VehiclePose:
    rotation: np.ndarray     # model -> world
    translation: np.ndarray
    mesh_id: str
    mode: str
    lateral_offset: float    # gap to the curb (on_road/perpendicular) or share on the sidewalk (sidewalk)
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, mesh: TriangleMesh) -> TriangleMesh:
        return mesh.transformed(self.rotation, self.translation)

    def to_json(self) -> dict:
        return {"matrix": [float(x) for x in self.matrix.ravel()], "mesh_id": self.mesh_id,
                "mode": self.mode, "lateral_offset": float(self.lateral_offset),
                "meta": self.meta}

    @classmethod
    def from_json(cls, doc: dict) -> "VehiclePose":
        m = np.asarray(doc["matrix"], dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3], doc["mesh_id"], doc["mode"],
                   float(doc["lateral_offset"]), dict(doc.get("meta", {})))


def clean_mesh(vertices: np.ndarray, triangles: np.ndarray, tol: float = 1e-9) -> TriangleMesh:
    """Merge vertices closer than ``tol`` (grid snapping) and drop zero-area triangles."""
    v = np.asarray(vertices, dtype=np.float64)
    t = np.asarray(triangles, dtype=np.int64)
    key = np.round(v / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    # keep first-seen vertex order for stable output
    order = np.argsort(first, kind="stable")
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    v_new = v[first[order]]
    t_new = remap[inv[t]]
    c = v_new[t_new]
    area2 = np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)
    keep = (area2 > 0) & (t_new[:, 0] != t_new[:, 1]) & (t_new[:, 1] != t_new[:, 2]) \
        & (t_new[:, 0] != t_new[:, 2])
    t_new = t_new[keep]
    if len(t_new) == 0:
        raise EmptyInputError("mesh has no non-degenerate triangles")
    used = np.unique(t_new)
    compact = np.full(len(v_new), -1)
    compact[used] = np.arange(len(used))
    return TriangleMesh(v_new[used], compact[t_new])


def load_mesh(path) -> TriangleMesh:
    """Read a triangulated Wavefront OBJ (``v`` and ``f`` records only)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise FormatError(
                        f"{path}:{lineno}: face with {len(tok) - 1} vertices; "
                        "triangulate the mesh before loading")
                idx = []
                for f in tok[1:]:
                    i = int(f.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                faces.append(idx)
    if not verts or not faces:
        raise EmptyInputError(f"{path}: empty mesh")
    return clean_mesh(np.array(verts), np.array(faces))


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*(float(x) for x in v)))
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def canonicalize_vehicle(mesh: TriangleMesh, dims: VehicleDims = VehicleDims(),
                         forward_axis: Optional[int] = None,
                         up_axis: Optional[int] = None) -> TriangleMesh:
    """Rotate longest extent to +x and shortest to +z, scale to ``dims.length``,
    and put the bounding-box bottom centre at the origin.

    Axis hints override the extent ordering; without them two extents within
    1 % of each other make the orientation ambiguous.
    """
    lo, hi = mesh.bounds()
    ext = hi - lo
    if forward_axis is None or up_axis is None:
        order = np.argsort(-ext, kind="stable")
        srt = ext[order]
        if srt[0] <= srt[1] * 1.01 or srt[1] <= srt[2] * 1.01:
            if forward_axis is None or up_axis is None:
                raise ValueError("ambiguous vehicle axes: extents within 1%; pass axis hints")
        fwd = int(order[0]) if forward_axis is None else forward_axis
        up = int(order[2]) if up_axis is None else up_axis
    else:
        fwd, up = forward_axis, up_axis
    if fwd == up:
        raise ValueError("forward and up axes must differ")
    side = 3 - fwd - up
    P = np.zeros((3, 3))
    P[0, fwd] = 1.0
    P[1, side] = 1.0
    P[2, up] = 1.0
    if np.linalg.det(P) < 0:
        P[1] *= -1.0
    scale = dims.length / ext[fwd]
    v = (mesh.vertices @ P.T) * scale
    vlo, vhi = v.min(axis=0), v.max(axis=0)
    shift = np.array([(vlo[0] + vhi[0]) / 2, (vlo[1] + vhi[1]) / 2, vlo[2]])
    return TriangleMesh(v - shift, mesh.triangles)


def _plane_from(pts: np.ndarray) -> Optional[Tuple[np.ndarray, float]]:
    n = np.cross(pts[1] - pts[0], pts[2] - pts[0])
    length = np.linalg.norm(n)
    if length < 1e-12:
        return None
    n = n / length
    if n[2] < 0:
        n = -n
    return n, float(n @ pts[0])


def _refit(pts: np.ndarray) -> Tuple[np.ndarray, float]:
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
    n = vt[-1]
    if n[2] < 0:
        n = -n
    n = n / np.linalg.norm(n)
    return n, float(n @ c)


def fit_ground_plane(cloud, center, radius: float = 2.0, rng: SeededRng = SeededRng(0),
                     threshold: float = 0.03, iterations: int = 200,
                     min_points: int = 50, min_inlier_ratio: float = 0.4) -> GroundPlane:
    """RANSAC plane through points within ``radius`` (horizontal) of ``center``,
    refined by total least squares on the inliers."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64).reshape(-1)
    dxy = pts[:, :2] - c[:2]
    near = pts[(dxy[:, 0] ** 2 + dxy[:, 1] ** 2) <= radius * radius]
    if len(near) < min_points:
        raise NoReliableGroundError(
            f"no reliable ground: {len(near)} points within {radius} m (need {min_points})")
    g = rng.generator()
    best_count, best = -1, None
    for _ in range(iterations):
        sample = near[g.choice(len(near), 3, replace=False)]
        plane = _plane_from(sample)
        if plane is None:
            continue
        n, d = plane
        count = int(np.count_nonzero(np.abs(near @ n - d) <= threshold))
        if count > best_count:
            best_count, best = count, (n, d)
    if best is None:
        raise NoReliableGroundError("no reliable ground: all samples degenerate")
    n, d = best
    inl = np.abs(near @ n - d) <= threshold
    n, d = _refit(near[inl])
    inl = np.abs(near @ n - d) <= threshold
    if inl.sum() < 3 or inl.mean() < min_inlier_ratio:
        raise NoReliableGroundError(
            f"no reliable ground: inlier ratio {inl.mean():.2f} < {min_inlier_ratio}")
    n, d = _refit(near[inl])
    res = near[inl] @ n - d
    return GroundPlane(n, d, int(inl.sum()), float(np.sqrt(np.mean(res ** 2))))


@dataclass(frozen=True)
class PlacementPlan:
    """Bird's-eye placement before ground alignment."""

    center: np.ndarray       # (2,) bbox-centre position
    heading: np.ndarray      # (2,) unit direction of the model +x axis
    mode: str
    offset: float


def plan_location(candidate: ParkingCandidate, dims: VehicleDims, rng: SeededRng,
                  modes: ModeProbabilities = ModeProbabilities(),
                  mode: Optional[str] = None, offset: Optional[float] = None,
                  max_gap: float = 0.3) -> PlacementPlan:
    """Step 1: shift the anchor off the curb by half the body plus a random gap.

    ``on_road``: gap ~ U(0, max_gap) between the body side and the curb.
    ``sidewalk``: U(1/4, 3/4) of the width rests on the sidewalk.
    ``perpendicular``: nose toward the curb, gap ~ U(0, max_gap).
    """
    g = rng.child("location").generator()
    u_mode, u_off = g.random(2)
    if mode is None:
        cum = np.cumsum([modes.on_road, modes.sidewalk, modes.perpendicular])
        mode = PARKING_MODES[int(np.searchsorted(cum, u_mode, side="right").clip(0, 2))]
    if mode not in PARKING_MODES:
        raise ValueError(f"unknown parking mode {mode!r}")
    side = np.asarray(candidate.side, dtype=np.float64)
    direction = np.asarray(candidate.direction, dtype=np.float64)
    anchor = np.asarray(candidate.anchor, dtype=np.float64)
    if mode == "on_road":
        off = max_gap * u_off if offset is None else offset
        center = anchor - side * (dims.width / 2 + off)
        heading = direction
    elif mode == "sidewalk":
        off = 0.25 + 0.5 * u_off if offset is None else offset
        center = anchor + side * (off * dims.width - dims.width / 2)
        heading = direction
    else:
        off = max_gap * u_off if offset is None else offset
        center = anchor - side * (dims.length / 2 + off)
        heading = side
    return PlacementPlan(center, heading / np.linalg.norm(heading), mode, float(off))


def pose_vehicle(candidate: ParkingCandidate, plane: GroundPlane, mesh: TriangleMesh,
                 dims: VehicleDims = VehicleDims(), rng: SeededRng = SeededRng(0),
                 modes: ModeProbabilities = ModeProbabilities(), mesh_id: str = "mesh",
                 mode: Optional[str] = None, offset: Optional[float] = None) -> VehiclePose:
    """Place a canonical vehicle (bbox bottom centre at the model origin).

    The model +z axis is aligned with the ground normal, the model +x axis with
    the in-plane projection of the planned heading, and the origin is seated on
    the plane below the planned centre.
    """
    plan = plan_location(candidate, dims, rng, modes, mode, offset)
    z_axis = plane.normal
    h3 = np.array([plan.heading[0], plan.heading[1], 0.0])
    x_axis = h3 - (h3 @ z_axis) * z_axis
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis], axis=1)
    cx, cy = plan.center
    t = np.array([cx, cy, plane.height_at(cx, cy)])
    meta = {"anchor": [float(x) for x in candidate.anchor],
            "polyline_id": int(candidate.polyline_id),
            "plane": {"normal": [float(x) for x in plane.normal], "d": plane.d},
            "seed_path": rng.path_string()}
    return VehiclePose(R, t, mesh_id, plan.mode, plan.offset, meta)


def place_vehicle(candidate: ParkingCandidate, cloud: PointCloud, mesh: TriangleMesh,
                  dims: VehicleDims = VehicleDims(), rng: SeededRng = SeededRng(0),
                  modes: ModeProbabilities = ModeProbabilities(), mesh_id: str = "mesh",
                  radius: float = 2.0) -> Tuple[VehiclePose, GroundPlane]:
    """Plan the location, fit the ground there, then pose the vehicle."""
    plan = plan_location(candidate, dims, rng, modes)
    plane = fit_ground_plane(cloud, plan.center, radius, rng.child("ransac"))
    return pose_vehicle(candidate, plane, mesh, dims, rng, modes, mesh_id), plane


def _box(lo: np.ndarray, hi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([[x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
                  [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1]])
    # outward-facing, counter-clockwise
    t = np.array([[0, 2, 1], [0, 3, 2], [4, 5, 6], [4, 6, 7],
                  [0, 1, 5], [0, 5, 4], [1, 2, 6], [1, 6, 5],
                  [2, 3, 7], [2, 7, 6], [3, 0, 4], [3, 4, 7]])
    return v, t


def procedural_car(dims: VehicleDims = VehicleDims(), rng: SeededRng = SeededRng(0)) -> TriangleMesh:
    """Two closed boxes (body + cabin) spanning exactly ``dims``, canonical frame."""
    g = rng.generator()
    L, W, H = dims.length, dims.width, dims.height
    body_h = H * g.uniform(0.45, 0.6)
    cab_lo = -L / 2 + L * g.uniform(0.2, 0.3)
    cab_hi = L / 2 - L * g.uniform(0.2, 0.3)
    inset = W * g.uniform(0.03, 0.08)
    v1, t1 = _box(np.array([-L / 2, -W / 2, 0.0]), np.array([L / 2, W / 2, body_h]))
    v2, t2 = _box(np.array([cab_lo, -W / 2 + inset, body_h]), np.array([cab_hi, W / 2 - inset, H]))
    return TriangleMesh(np.vstack([v1, v2]), np.vstack([t1, t2 + 8]))


def load_dims_table(path) -> Dict[str, VehicleDims]:
    """Per-model metric dimensions: ``{"model.obj": {"length": .., "width": .., "height": ..}}``."""
    with open(path) as fh:
        doc = json.load(fh)
    return {k: VehicleDims(**v) for k, v in doc.items()}


def load_model_dir(path, dims_table: Optional[Dict[str, VehicleDims]] = None,
                   default: VehicleDims = VehicleDims()) -> Dict[str, Tuple[TriangleMesh, VehicleDims]]:
    """Every ``*.obj`` in ``path``, canonicalised; sorted by file name."""
    out = {}
    table = dims_table or {}
    for f in sorted(Path(path).glob("*.obj")):
        dims = table.get(f.name, default)
        out[f.name] = (canonicalize_vehicle(load_mesh(f), dims), dims)
    if not out:
        raise EmptyInputError(f"no .obj models in {path}")
    return out


def choose_model(models: Sequence[str], rng: SeededRng) -> str:
    names = sorted(models)
    return names[int(rng.child("model").generator().integers(len(names)))]
