"""Line-of-sight occlusion against a posed vehicle mesh.

Every scan point is treated as the end of a segment starting at its sensor
head. A point is occluded when that segment crosses the vehicle mesh strictly
between the endpoints. Triangles are tested with a watertight
segment/triangle intersection; a flat-array BVH prunes the candidates.
"""

from __future__ import annotations

import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numba
import numpy as np

from .errors import EmptyInputError, FormatError, SceneRejected
from .geom import PointCloud
from .placement import TriangleMesh, VehiclePose
from .plyio import read_ply, write_ply
from .rng import SeededRng

SEGMENT_EPS = 1e-6
LEAF_SIZE = 4
# node boxes are padded so that float error in the slab test can only add
# candidates, never drop one; the primitive test alone decides hits
_BOX_PAD_REL = 1e-9
_BOX_PAD_ABS = 1e-12


@dataclass(frozen=True)
class Bvh:
    """Flat BVH; node 0 is the root. Leaves have ``left == -1``."""

    lo: np.ndarray          # (M, 3)
    hi: np.ndarray          # (M, 3)
    left: np.ndarray        # (M,) int64
    right: np.ndarray
    start: np.ndarray       # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray       # triangle ids, leaf-contiguous
    tris: np.ndarray        # (T, 3, 3) corners

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.left < 0)


def build_bvh(mesh: TriangleMesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Median split on the longest centroid axis until leaves hold ``leaf_size`` triangles."""
    if len(mesh.triangles) == 0:
        raise EmptyInputError("cannot build a BVH over an empty mesh")
    if leaf_size < 1:
        raise ValueError("leaf_size must be >= 1")
    tris = np.ascontiguousarray(mesh.corners)
    tlo = tris.min(axis=1)
    thi = tris.max(axis=1)
    cen = (tlo + thi) / 2
    order = np.arange(len(tris))
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node(a, b):
        ids = order[a:b]
        box_lo, box_hi = tlo[ids].min(axis=0), thi[ids].max(axis=0)
        pad = _BOX_PAD_REL * np.maximum(np.abs(box_lo), np.abs(box_hi)) + _BOX_PAD_ABS
        lo.append(box_lo - pad)
        hi.append(box_hi + pad)
        left.append(-1)
        right.append(-1)
        start.append(a)
        count.append(b - a)
        return len(left) - 1

    stack = [(new_node(0, len(tris)), 0, len(tris))]
    while stack:
        node, a, b = stack.pop()
        if b - a <= leaf_size:
            continue
        ids = order[a:b]
        c = cen[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic for equal centroids
        srt = np.lexsort((ids, c[:, axis]))
        order[a:b] = ids[srt]
        mid = (a + b) // 2
        l_node = new_node(a, mid)
        r_node = new_node(mid, b)
        left[node], right[node] = l_node, r_node
        count[node] = 0
        stack.append((r_node, mid, b))
        stack.append((l_node, a, mid))
    as_i = lambda x: np.asarray(x, dtype=np.int64)
    return Bvh(np.asarray(lo), np.asarray(hi), as_i(left), as_i(right), as_i(start),
               as_i(count), order.astype(np.int64), tris)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _shear(d):
    """Per-segment part of the watertight test: dominant axis and shear constants.

    Returns ``kz = -1`` for a zero direction.
    """
    ad0, ad1, ad2 = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if ad1 > ad0 and ad1 >= ad2:
        kz = 1
    elif ad2 > ad0 and ad2 > ad1:
        kz = 2
    if d[kz] == 0.0:
        return 0, 0, -1, 0.0, 0.0, 0.0
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _segment_triangle(o, kx, ky, kz, sx, sy, sz, tris, t, eps):
    """Watertight test of segment ``o + s d``, ``eps < s < 1 - eps``, against triangle ``t``.

    ``kx .. sz`` come from :func:`_shear` of the segment direction ``d``.
    """
    if kz < 0:
        return False
    ax_ = tris[t, 0, kx] - o[kx]; ay_ = tris[t, 0, ky] - o[ky]; az_ = tris[t, 0, kz] - o[kz]
    bx_ = tris[t, 1, kx] - o[kx]; by_ = tris[t, 1, ky] - o[ky]; bz_ = tris[t, 1, kz] - o[kz]
    cx_ = tris[t, 2, kx] - o[kx]; cy_ = tris[t, 2, ky] - o[ky]; cz_ = tris[t, 2, kz] - o[kz]
    ax = ax_ - sx * az_; ay = ay_ - sy * az_
    bx = bx_ - sx * bz_; by = by_ - sy * bz_
    cx = cx_ - sx * cz_; cy = cy_ - sy * cz_
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return False
    det = u + v + w
    if det == 0.0:
        return False
    tt = (u * sz * az_ + v * sz * bz_ + w * sz * cz_) / det
    return tt > eps and tt < 1.0 - eps


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _segment_box(o, d, lo, hi):
    t0 = 0.0
    t1 = 1.0
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return False
            continue
        inv = 1.0 / d[k]
        ta = (lo[k] - o[k]) * inv
        tb = (hi[k] - o[k]) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _bvh_hits(origins, targets, lo, hi, left, right, start, count, order, tris,
              eps, out, visits, i0, i1):
    stack = np.empty(128, dtype=np.int64)
    d = np.empty(3)
    for i in range(i0, i1):
        o = origins[i]
        for k in range(3):
            d[k] = targets[i, k] - o[k]
        kx, ky, kz, sx, sy, sz = _shear(d)
        hit = False
        nv = 0
        sp = 0
        stack[0] = 0
        sp = 1
        while sp > 0 and not hit:
            sp -= 1
            node = stack[sp]
            nv += 1
            if not _segment_box(o, d, lo[node], hi[node]):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t = order[j]
                    if _segment_triangle(o, kx, ky, kz, sx, sy, sz, tris, t, eps):
                        hit = True
                        break
            else:
                stack[sp] = right[node]
                stack[sp + 1] = left[node]
                sp += 2
        out[i] = hit
        visits[i] = nv


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _brute_hits(origins, targets, tris, eps, out, i0, i1):
    d = np.empty(3)
    for i in range(i0, i1):
        o = origins[i]
        for k in range(3):
            d[k] = targets[i, k] - o[k]
        kx, ky, kz, sx, sy, sz = _shear(d)
        hit = False
        for t in range(tris.shape[0]):
            if _segment_triangle(o, kx, ky, kz, sx, sy, sz, tris, t, eps):
                hit = True
                break
        out[i] = hit


def default_threads() -> int:
    env = os.environ.get("OCCLUSYNTH_THREADS")
    if env:
        n = int(env)
        if n < 1:
            raise ValueError("OCCLUSYNTH_THREADS must be >= 1")
        return n
    return 1


def _check_segments(origins, targets) -> Tuple[np.ndarray, np.ndarray]:
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    t = np.ascontiguousarray(targets, dtype=np.float64).reshape(-1, 3)
    if o.shape != t.shape:
        raise ValueError("origins and targets must have the same shape")
    if not (np.all(np.isfinite(o)) and np.all(np.isfinite(t))):
        raise ValueError("segment endpoints must be finite")
    if np.any(np.all(o == t, axis=1)):
        raise ValueError("segment origin equals its target")
    return o, t


def _run_chunks(fn, n: int, threads: Optional[int], chunk: int = 4096) -> None:
    threads = default_threads() if threads is None else threads
    bounds = [(a, min(a + chunk, n)) for a in range(0, n, chunk)]
    if threads <= 1 or len(bounds) <= 1:
        for a, b in bounds:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=threads) as ex:
        list(ex.map(lambda ab: fn(*ab), bounds))


def segments_hit(bvh: Bvh, origins, targets, eps: float = SEGMENT_EPS,
                 threads: Optional[int] = None, return_visits: bool = False):
    """Vectorised :func:`segment_hits`; each entry depends only on its own segment."""
    o, t = _check_segments(origins, targets)
    n = len(o)
    out = np.zeros(n, dtype=np.bool_)
    visits = np.zeros(n, dtype=np.int64)

    def run(a, b):
        _bvh_hits(o, t, bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count,
                  bvh.order, bvh.tris, eps, out, visits, a, b)

    _run_chunks(run, n, threads)
    return (out, visits) if return_visits else out


def segment_hits(bvh: Bvh, origin, target, eps: float = SEGMENT_EPS) -> bool:
    return bool(segments_hit(bvh, np.reshape(origin, (1, 3)), np.reshape(target, (1, 3)), eps)[0])


def brute_force_hits(mesh: TriangleMesh, origins, targets, eps: float = SEGMENT_EPS,
                     threads: Optional[int] = None) -> np.ndarray:
    """Every segment against every triangle; reference for the BVH."""
    o, t = _check_segments(origins, targets)
    tris = np.ascontiguousarray(mesh.corners)
    out = np.zeros(len(o), dtype=np.bool_)
    _run_chunks(lambda a, b: _brute_hits(o, t, tris, eps, out, a, b), len(o), threads, 1024)
    return out


def occlusion_mask(cloud: PointCloud, bvh: Bvh, eps: float = SEGMENT_EPS,
                   threads: Optional[int] = None) -> np.ndarray:
    """True where the head-to-point segment crosses the mesh."""
    if cloud.heads is None:
        raise ValueError("occlusion needs per-point sensor heads")
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    return segments_hit(bvh, cloud.heads, cloud.points, eps, threads)


def crop_scene(cloud: PointCloud, location, rng: SeededRng, half_size: float = 4.0,
               jitter: float = 0.2, min_points: int = 5000) -> Tuple[np.ndarray, PointCloud]:
    """Axis-aligned square crop around ``location`` with a centre jittered uniformly in a disk."""
    if cloud.heads is None:
        raise ValueError("scene crop needs per-point sensor heads")
    g = rng.generator()
    u, v = g.random(2)
    rad = jitter * np.sqrt(u)
    ang = 2.0 * np.pi * v
    loc = np.asarray(location, dtype=np.float64).reshape(-1)
    center = np.array([loc[0] + rad * np.cos(ang), loc[1] + rad * np.sin(ang),
                       loc[2] if len(loc) > 2 else 0.0])
    p = cloud.points
    keep = np.flatnonzero((np.abs(p[:, 0] - center[0]) <= half_size)
                          & (np.abs(p[:, 1] - center[1]) <= half_size))
    if len(keep) < min_points:
        raise SceneRejected(f"crop holds {len(keep)} points, fewer than {min_points}")
    return center, cloud.subset(keep)


@dataclass(frozen=True)
class ScenePairRaw:
    complete: PointCloud
    gapped: PointCloud
    center: np.ndarray
    pose: Optional[VehiclePose]
    removed: int
    kept: np.ndarray            # indices into ``complete`` forming ``gapped``
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.removed != len(self.complete) - len(self.gapped):
            raise ValueError("removed count disagrees with the cloud sizes")
        if len(self.kept) != len(self.gapped):
            raise ValueError("kept indices disagree with the gapped cloud")


def synthesize_pair(complete: PointCloud, posed_mesh: TriangleMesh, bvh: Optional[Bvh] = None,
                    center=None, pose: Optional[VehiclePose] = None,
                    eps: float = SEGMENT_EPS, threads: Optional[int] = None) -> ScenePairRaw:
    """Remove every point whose line of sight is blocked by ``posed_mesh``."""
    bvh = build_bvh(posed_mesh) if bvh is None else bvh
    hit = occlusion_mask(complete, bvh, eps, threads)
    kept = np.flatnonzero(~hit)
    meta = {"no_occlusion": bool(not hit.any())}
    if not hit.any():
        warnings.warn("vehicle occludes no points; scene flagged", stacklevel=2)
    if center is None:
        center = complete.bounds().min / 2 + complete.bounds().max / 2
    return ScenePairRaw(complete, complete.subset(kept), np.asarray(center, dtype=np.float64),
                        pose, int(hit.sum()), kept, meta)


def scene_paths(directory, index: int) -> Dict[str, Path]:
    d = Path(directory)
    stem = f"scene{index:04d}"
    return {"complete": d / f"{stem}_complete.ply", "gap": d / f"{stem}_gap.ply",
            "meta": d / f"{stem}_meta.json"}


def write_scene(directory, index: int, pair: ScenePairRaw, extra_meta: Optional[dict] = None) -> Dict[str, Path]:
    paths = scene_paths(directory, index)
    Path(directory).mkdir(parents=True, exist_ok=True)
    write_ply(paths["complete"], pair.complete)
    write_ply(paths["gap"], pair.gapped)
    meta = {"scene": index, "center": [float(x) for x in pair.center],
            "removed": pair.removed, "complete_count": len(pair.complete),
            "gap_count": len(pair.gapped),
            "pose": pair.pose.to_json() if pair.pose is not None else None}
    meta.update(pair.meta)
    meta.update(extra_meta or {})
    with open(paths["meta"], "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return paths


def read_scene(directory, index: int) -> Tuple[PointCloud, PointCloud, dict]:
    paths = scene_paths(directory, index)
    for k, p in paths.items():
        if not p.exists():
            raise FormatError(f"scene{index:04d}: missing {k} file {p.name}")
    with open(paths["meta"]) as fh:
        meta = json.load(fh)
    return read_ply(paths["complete"]), read_ply(paths["gap"]), meta


def list_scenes(directory) -> list:
    out = []
    for p in sorted(Path(directory).glob("scene*_meta.json")):
        out.append(int(p.name[5:9]))
    return out
