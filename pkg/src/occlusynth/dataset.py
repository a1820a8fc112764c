"""Fixed-size normalized scene pairs, augmentation, geographic splits and storage."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from shapely.geometry import Point, Polygon

from .errors import CorruptionError, FormatError, InsufficientPointsError, ShapeError
from .geom import PointCloud
from .plyio import read_ply, write_ply
from .raycast import ScenePairRaw
from .rng import SeededRng

N_COMPLETE = 27_648
N_GAPPED = 18_500
SPLITS = ("train", "test", "val")


def subsample(cloud: PointCloud, n: int, rng: SeededRng) -> PointCloud:
    """Uniform sample without replacement; original point order is kept."""
    if len(cloud) == 0:
        raise InsufficientPointsError("cannot subsample an empty cloud")
    if n < 1:
        raise ValueError("n must be positive")
    if len(cloud) < n:
        raise InsufficientPointsError(f"insufficient points: {len(cloud)} < {n}")
    idx = np.sort(rng.generator().choice(len(cloud), n, replace=False))
    return cloud.subset(idx)


@dataclass(frozen=True)
class NormTransform:
    """``x' = (x - cx)/s``, ``y' = (y - cy)/s``, ``z' = k (z - z_ref)/s``."""

    cx: float
    cy: float
    z_ref: float
    scale: float = 4.0
    z_gain: float = 3.0

    def __post_init__(self):
        if not (self.scale > 0 and self.z_gain > 0):
            raise ValueError("scale and z_gain must be positive")

    def forward(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        out = np.empty_like(p)
        out[:, 0] = (p[:, 0] - self.cx) / self.scale
        out[:, 1] = (p[:, 1] - self.cy) / self.scale
        out[:, 2] = self.z_gain * (p[:, 2] - self.z_ref) / self.scale
        return out

    def inverse(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        out = np.empty_like(p)
        out[:, 0] = p[:, 0] * self.scale + self.cx
        out[:, 1] = p[:, 1] * self.scale + self.cy
        out[:, 2] = p[:, 2] * self.scale / self.z_gain + self.z_ref
        return out

    def to_json(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "z_ref": self.z_ref,
                "scale": self.scale, "z_gain": self.z_gain}

    @classmethod
    def from_json(cls, doc: Mapping) -> "NormTransform":
        return cls(float(doc["cx"]), float(doc["cy"]), float(doc["z_ref"]),
                   float(doc["scale"]), float(doc["z_gain"]))


@dataclass(frozen=True)
class NormConfig:
    scale: float = 4.0
    z_gain: float = 3.0
    z_percentile: float = 5.0
    # lifts the reference above the ground proxy so the full height band fits the cube
    z_offset: float = 0.825


def _normalize(cloud: PointCloud, tf: NormTransform) -> PointCloud:
    return PointCloud(tf.forward(cloud.points), None, None, "normalized", dict(cloud.extra))


def _check_cube(cloud: PointCloud, what: str, tol: float = 1e-9) -> None:
    if len(cloud) and np.max(np.abs(cloud.points)) > 1.0 + tol:
        axis = int(np.argmax(np.max(np.abs(cloud.points), axis=0)))
        raise ShapeError(f"{what}: normalized coordinate outside [-1, 1] on axis "
                         f"{'xyz'[axis]} ({np.max(np.abs(cloud.points[:, axis])):.4f})")


@dataclass(frozen=True)
class ScenePair:
    complete: PointCloud
    gapped: PointCloud
    transform: NormTransform
    meta: Dict = field(default_factory=dict)

    def check(self, n_complete: int = N_COMPLETE, n_gapped: int = N_GAPPED) -> None:
        if len(self.complete) != n_complete or len(self.gapped) != n_gapped:
            raise ShapeError(f"pair has {len(self.complete)}/{len(self.gapped)} points, "
                             f"expected {n_complete}/{n_gapped}")
        _check_cube(self.complete, "complete")
        _check_cube(self.gapped, "gapped")


def normalize_pair(raw: ScenePairRaw, cfg: NormConfig = NormConfig(),
                   complete: Optional[PointCloud] = None,
                   gapped: Optional[PointCloud] = None) -> ScenePair:
    """Shared transform for both clouds, referenced to the raw complete scene.

    ``complete``/``gapped`` substitute already subsampled clouds; the vertical
    reference always comes from the full raw complete cloud.
    """
    z_ref = float(np.percentile(raw.complete.points[:, 2], cfg.z_percentile)) + cfg.z_offset
    tf = NormTransform(float(raw.center[0]), float(raw.center[1]), z_ref, cfg.scale, cfg.z_gain)
    c = _normalize(raw.complete if complete is None else complete, tf)
    g = _normalize(raw.gapped if gapped is None else gapped, tf)
    _check_cube(c, "complete")
    _check_cube(g, "gapped")
    return ScenePair(c, g, tf, {"world_center": [float(x) for x in raw.center]})


def build_scene_pair(raw: ScenePairRaw, rng: SeededRng, scene_id: int,
                     cfg: NormConfig = NormConfig(), n_complete: int = N_COMPLETE,
                     n_gapped: int = N_GAPPED) -> ScenePair:
    """Subsample in the world frame, then normalize both clouds with one transform."""
    c = subsample(raw.complete, n_complete, rng.child("complete"))
    g = subsample(raw.gapped, n_gapped, rng.child("gapped"))
    pair = normalize_pair(raw, cfg, c, g)
    meta = dict(pair.meta, scene=int(scene_id), seed_path=rng.path_string(),
                removed=int(raw.removed))
    return ScenePair(pair.complete, pair.gapped, pair.transform, meta)


# rotation by k quarter turns about +z, then an optional mirror
_ROT = [np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1]]),
        np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]]),
        np.array([[-1, 0, 0], [0, -1, 0], [0, 0, 1]]),
        np.array([[0, 1, 0], [-1, 0, 0], [0, 0, 1]])]
_FLIP = {"none": np.diag([1, 1, 1]), "x": np.diag([-1, 1, 1]), "y": np.diag([1, -1, 1])}


def augmentation_matrix(quarter_turns: int, flip: str = "none") -> np.ndarray:
    """Integer 3x3 matrix; entries are 0/±1, so applying it is exact in floating point."""
    if flip not in _FLIP:
        raise ValueError(f"flip must be one of {sorted(_FLIP)}")
    return _FLIP[flip] @ _ROT[int(quarter_turns) % 4]


def apply_augmentation(pair: ScenePair, quarter_turns: int, flip: str = "none") -> ScenePair:
    M = augmentation_matrix(quarter_turns, flip)

    def tf(c: PointCloud) -> PointCloud:
        # signed permutation: select and negate columns instead of a matmul
        p = c.points
        out = np.empty_like(p)
        for i in range(3):
            j = int(np.flatnonzero(M[i])[0])
            out[:, i] = p[:, j] if M[i, j] > 0 else -p[:, j]
        return PointCloud(out, None, None, c.frame, dict(c.extra))

    meta = dict(pair.meta, augment={"quarter_turns": int(quarter_turns) % 4, "flip": flip,
                                    "matrix": M.tolist()})
    return ScenePair(tf(pair.complete), tf(pair.gapped), pair.transform, meta)


def augment(pair: ScenePair, rng: SeededRng) -> ScenePair:
    """Random quarter-turn about z followed by no flip, an x flip or a y flip."""
    g = rng.generator()
    k = int(g.integers(4))
    flip = ("none", "x", "y")[int(g.integers(3))]
    return apply_augmentation(pair, k, flip)


@dataclass(frozen=True)
class SplitRegion:
    label: str
    polygon: Optional[Sequence[Sequence[float]]] = None
    halfplane: Optional[Mapping[str, object]] = None   # {"normal": [a, b], "offset": c}: a x + b y <= c

    def __post_init__(self):
        if self.label not in SPLITS:
            raise ValueError(f"split label must be one of {SPLITS}")
        if (self.polygon is None) == (self.halfplane is None):
            raise ValueError("a region is either a polygon or a halfplane")
        if self.polygon is not None:
            poly = Polygon(self.polygon)
            if not poly.is_valid or poly.area <= 0:
                raise ValueError("split polygon is invalid or empty")
            if abs(poly.convex_hull.area - poly.area) > 1e-9 * max(1.0, poly.area):
                raise ValueError("split polygons must be convex")

    def contains(self, xy) -> bool:
        if self.polygon is not None:
            return bool(Polygon(self.polygon).covers(Point(xy[0], xy[1])))
        a, b = self.halfplane["normal"]
        return bool(a * xy[0] + b * xy[1] <= self.halfplane["offset"])

    def as_polygon(self, extent: float = 1e7) -> Polygon:
        if self.polygon is not None:
            return Polygon(self.polygon)
        a, b = (float(x) for x in self.halfplane["normal"])
        c = float(self.halfplane["offset"])
        n = np.hypot(a, b)
        if n == 0:
            raise ValueError("halfplane normal must be nonzero")
        a, b, c = a / n, b / n, c / n
        base = np.array([a, b]) * c
        t = np.array([-b, a])
        inward = -np.array([a, b])
        pts = [base + t * extent, base - t * extent,
               base - t * extent + inward * extent, base + t * extent + inward * extent]
        return Polygon([tuple(p) for p in pts])

    def to_json(self) -> dict:
        d = {"label": self.label}
        if self.polygon is not None:
            d["polygon"] = [list(map(float, p)) for p in self.polygon]
        else:
            d["halfplane"] = {"normal": list(map(float, self.halfplane["normal"])),
                              "offset": float(self.halfplane["offset"])}
        return d


@dataclass(frozen=True)
class SplitSpec:
    regions: Sequence[SplitRegion] = ()
    val_count: int = 0

    def __post_init__(self):
        polys = [r.as_polygon() for r in self.regions]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                if polys[i].intersection(polys[j]).area > 1e-9:
                    raise ValueError(f"split regions {i} and {j} overlap")
        if self.val_count < 0:
            raise ValueError("val_count must be non-negative")

    @classmethod
    def from_json(cls, doc: Mapping) -> "SplitSpec":
        regions = [SplitRegion(r["label"], r.get("polygon"), r.get("halfplane"))
                   for r in doc.get("regions", [])]
        return cls(tuple(regions), int(doc.get("val_count", 0)))

    def to_json(self) -> dict:
        return {"regions": [r.to_json() for r in self.regions], "val_count": self.val_count}


@dataclass(frozen=True)
class DatasetManifest:
    splits: Dict[str, List[int]]
    split_spec: dict
    seed: int
    counts: Dict[str, int]
    files: Dict[str, str] = field(default_factory=dict)    # name -> sha256

    def __post_init__(self):
        seen = set()
        for k in SPLITS:
            ids = set(self.splits.get(k, []))
            if ids & seen:
                raise ValueError("dataset splits overlap")
            seen |= ids

    def all_ids(self) -> List[int]:
        return sorted(i for k in SPLITS for i in self.splits.get(k, []))

    def to_json(self) -> dict:
        return {"version": 1, "splits": {k: list(self.splits.get(k, [])) for k in SPLITS},
                "split_spec": self.split_spec, "seed": self.seed, "counts": self.counts,
                "files": dict(sorted(self.files.items()))}

    @classmethod
    def from_json(cls, doc: Mapping) -> "DatasetManifest":
        return cls({k: [int(i) for i in v] for k, v in doc["splits"].items()},
                   doc.get("split_spec", {}), int(doc["seed"]), dict(doc["counts"]),
                   dict(doc.get("files", {})))


def split_geographic(centers: Mapping[int, Sequence[float]], spec: SplitSpec,
                     rng: SeededRng, seed: int = 0) -> DatasetManifest:
    """Assign scenes by the region holding their world centre.

    Scenes outside every region form a pool: up to ``spec.val_count`` of them,
    drawn at random, become validation scenes and the rest go to training.
    """
    splits = {k: [] for k in SPLITS}
    pool = []
    for sid in sorted(centers):
        xy = centers[sid]
        for region in spec.regions:
            if region.contains(xy):
                splits[region.label].append(int(sid))
                break
        else:
            pool.append(int(sid))
    n_val = min(spec.val_count, len(pool))
    val = set(rng.generator().choice(pool, n_val, replace=False).tolist()) if n_val else set()
    splits["val"] = sorted(set(splits["val"]) | val)
    splits["train"] = sorted(set(splits["train"]) | {s for s in pool if s not in val})
    counts = {k: len(v) for k, v in splits.items()}
    return DatasetManifest(splits, spec.to_json(), int(seed), counts)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _pair_files(directory: Path, sid: int) -> Dict[str, Path]:
    stem = f"scene{sid:04d}"
    return {"complete": directory / f"{stem}_complete.ply", "gap": directory / f"{stem}_gap.ply",
            "meta": directory / f"{stem}_meta.json"}


def write_dataset(pairs: Mapping[int, ScenePair], manifest: DatasetManifest, directory) -> DatasetManifest:
    """Write float32 clouds, per-scene metadata and a checksummed manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if sorted(pairs) != manifest.all_ids():
        raise ValueError("pairs and manifest disagree on scene ids")
    files = {}
    for sid in sorted(pairs):
        pair = pairs[sid]
        paths = _pair_files(d, sid)
        write_ply(paths["complete"], pair.complete, coord_dtype="f4")
        write_ply(paths["gap"], pair.gapped, coord_dtype="f4")
        meta = dict(pair.meta, scene=int(sid), transform=pair.transform.to_json())
        with open(paths["meta"], "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
        for p in paths.values():
            files[p.name] = _sha256(p)
    out = DatasetManifest(manifest.splits, manifest.split_spec, manifest.seed,
                          manifest.counts, files)
    with open(d / "manifest.json", "w") as fh:
        json.dump(out.to_json(), fh, indent=2, sort_keys=True)
    return out


def read_dataset(directory, verify: bool = True):
    """Inverse of :func:`write_dataset`; returns ``(pairs, manifest)``."""
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise FormatError(f"{d}: manifest.json missing")
    with open(mpath) as fh:
        manifest = DatasetManifest.from_json(json.load(fh))
    ids = manifest.all_ids()
    on_disk = sorted(int(p.name[5:9]) for p in d.glob("scene*_complete.ply"))
    total = sum(manifest.counts.get(k, 0) for k in SPLITS)
    if total != len(ids) or on_disk != ids:
        raise CorruptionError(f"manifest lists {total} scenes but {len(on_disk)} are on disk")
    pairs = {}
    for sid in ids:
        paths = _pair_files(d, sid)
        for kind, p in paths.items():
            if not p.exists():
                raise CorruptionError(f"scene {sid}: missing {kind} file {p.name}")
            if verify and manifest.files.get(p.name) != _sha256(p):
                raise CorruptionError(f"scene {sid}: checksum mismatch in {p.name}")
        with open(paths["meta"]) as fh:
            meta = json.load(fh)
        tf = NormTransform.from_json(meta.pop("transform"))
        pairs[sid] = ScenePair(read_ply(paths["complete"]), read_ply(paths["gap"]), tf, meta)
    return pairs, manifest
