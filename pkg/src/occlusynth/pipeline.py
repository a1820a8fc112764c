"""End-to-end orchestration: strip to boundaries to placed vehicles to scene pairs."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boundary import BoundaryPolyline, ParkingCandidate, extract_boundaries, select_parking_candidates
from .config import PipelineConfig
from .dataset import (DatasetManifest, ScenePair, SplitSpec, augment, build_scene_pair,
                      split_geographic)
from .errors import FormatError, NoReliableGroundError, SceneRejected
from .geom import PointCloud
from .placement import (GroundPlane, TriangleMesh, VehicleDims, VehiclePose, choose_model,
                        place_vehicle, procedural_car)
from .raycast import ScenePairRaw, crop_scene, synthesize_pair
from .rng import SeededRng
from .scanstrip import ScanStrip, apply_filters, estimate_normals, strip_to_cloud
from .synthetic import StreetParams, build_street, random_street, scan_street

log = logging.getLogger(__name__)

Models = Mapping[str, Tuple[TriangleMesh, VehicleDims]]


@dataclass(frozen=True)
class PlacedVehicle:
    pose: VehiclePose
    plane: GroundPlane
    candidate: ParkingCandidate


def preprocess_strip(strip: ScanStrip, cfg: PipelineConfig) -> Tuple[ScanStrip, PointCloud]:
    """Normals on the full strip (neighbours are still present), then the filters."""
    filtered = apply_filters(estimate_normals(strip), cfg.filter)
    return filtered, strip_to_cloud(filtered)


def boundaries_from(strip: ScanStrip, cloud: PointCloud, cfg: PipelineConfig) -> List[BoundaryPolyline]:
    return extract_boundaries(strip, cloud, cfg.curb, cfg.angle_tol, cfg.min_segment_points,
                              cfg.window_cols)


def procedural_models(cfg: PipelineConfig, rng: SeededRng) -> Dict[str, Tuple[TriangleMesh, VehicleDims]]:
    return {"procedural_car": (procedural_car(cfg.dims, rng.child("procedural_car")), cfg.dims)}


def place_all(cloud: PointCloud, candidates: Sequence[ParkingCandidate], models: Models,
              cfg: PipelineConfig, rng: SeededRng) -> List[PlacedVehicle]:
    """One vehicle per candidate; candidates without reliable ground are skipped."""
    out = []
    names = sorted(models)
    for i, cand in enumerate(candidates):
        crng = rng.child("candidate", i)
        name = choose_model(names, crng)
        mesh, dims = models[name]
        try:
            pose, plane = place_vehicle(cand, cloud, mesh, dims, crng, cfg.modes, name,
                                        cfg.ground_radius)
        except NoReliableGroundError as e:
            log.warning("candidate %d skipped: %s", i, e)
            continue
        pose.meta["candidate"] = i
        out.append(PlacedVehicle(pose, plane, cand))
    return out


def _with_point_ids(cloud: PointCloud) -> PointCloud:
    extra = dict(cloud.extra)
    extra["point_id"] = np.arange(len(cloud), dtype=np.uint32)
    return PointCloud(cloud.points, cloud.heads, cloud.normals, cloud.frame, extra)


def synthesize_scene(cloud: PointCloud, pose: VehiclePose, mesh: TriangleMesh,
                     cfg: PipelineConfig, rng: SeededRng,
                     threads: Optional[int] = None) -> ScenePairRaw:
    """Crop around the vehicle, then remove everything it hides from the sensor.

    Crop points carry a ``point_id`` extra so the gap cloud can be matched to
    the complete cloud after a round trip through files.
    """
    center, crop = crop_scene(cloud, pose.translation, rng.child("crop"), cfg.crop_half_size,
                              cfg.crop_jitter, cfg.crop_min_points)
    posed = mesh.transformed(pose.rotation, pose.translation)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pair = synthesize_pair(_with_point_ids(crop), posed, center=center, pose=pose,
                               threads=threads)
    pair.meta["seed_path"] = rng.path_string()
    return pair


def synthesize_all(cloud: PointCloud, placed: Sequence[VehiclePose], models: Models,
                   cfg: PipelineConfig, rng: SeededRng,
                   threads: Optional[int] = None) -> List[ScenePairRaw]:
    out = []
    for j, pose in enumerate(placed):
        if pose.mesh_id not in models:
            raise FormatError(f"pose {j} refers to unknown model {pose.mesh_id!r}")
        try:
            out.append(synthesize_scene(cloud, pose, models[pose.mesh_id][0], cfg,
                                        rng.child("scene", j), threads))
        except SceneRejected as e:
            log.warning("pose %d skipped: %s", j, e)
    return out


def raw_from_files(complete: PointCloud, gapped: PointCloud, meta: dict) -> ScenePairRaw:
    """Rebuild a raw pair from scene files written by :func:`~occlusynth.raycast.write_scene`."""
    ids_c = complete.extra.get("point_id")
    ids_g = gapped.extra.get("point_id")
    if ids_c is None or ids_g is None:
        raise FormatError("scene clouds carry no point_id property")
    order = np.argsort(ids_c, kind="stable")
    pos = np.searchsorted(ids_c[order], ids_g)
    if np.any(pos >= len(order)) or np.any(ids_c[order][np.minimum(pos, len(order) - 1)] != ids_g):
        raise FormatError("gap cloud holds points missing from the complete cloud")
    kept = order[pos]
    center = np.asarray(meta["center"], dtype=np.float64)
    return ScenePairRaw(complete, gapped, center, None, len(complete) - len(gapped), kept,
                        {k: v for k, v in meta.items() if k not in ("pose",)})


def build_pairs(raws: Mapping[int, ScenePairRaw], cfg: PipelineConfig,
                rng: SeededRng) -> Dict[int, ScenePair]:
    out = {}
    for sid in sorted(raws):
        srng = rng.child("pair", int(sid))
        pair = build_scene_pair(raws[sid], srng, sid, cfg.norm, cfg.n_complete, cfg.n_gapped)
        if cfg.augment:
            pair = augment(pair, srng.child("augment"))
        out[sid] = pair
    return out


def build_dataset(raws: Mapping[int, ScenePairRaw], split: SplitSpec, cfg: PipelineConfig,
                  seed: int) -> Tuple[Dict[int, ScenePair], DatasetManifest]:
    """Pairs for every raw scene plus the geographic split over their world centres."""
    root = SeededRng(seed, ("dataset",))
    pairs = build_pairs(raws, cfg, root)
    centers = {sid: raws[sid].center[:2] for sid in raws}
    manifest = split_geographic(centers, split, root.child("split"), seed)
    counts = dict(manifest.counts, n_complete=cfg.n_complete, n_gapped=cfg.n_gapped)
    return pairs, DatasetManifest(manifest.splits, manifest.split_spec, seed, counts)


def street_scan(params: StreetParams, rng: SeededRng, strip_id: int = 0) -> ScanStrip:
    return scan_street(build_street(params), rng.child("scan"), strip_id=strip_id)


def synthetic_corpus(seed: int, n_scenes: int, cfg: Optional[PipelineConfig] = None,
                     street_length: float = 120.0, col_spacing: float = 0.15,
                     per_polyline: int = 13, threads: Optional[int] = None,
                     street_gap: float = 200.0) -> Iterator[ScenePairRaw]:
    """Raw scene pairs from procedurally generated streets laid out along +x.

    Streets are scanned, filtered and searched for curbs; each curb receives
    ``per_polyline`` candidate parking spots and every spot yields one scene.
    Streets are added until ``n_scenes`` scenes exist.
    """
    cfg = cfg or PipelineConfig()
    root = SeededRng(seed, ("corpus",))
    models = procedural_models(cfg, root)
    produced = 0
    k = 0
    while produced < n_scenes:
        srng = root.child("street", k)
        if k > 4 * max(1, n_scenes):
            raise RuntimeError("synthetic streets keep failing to yield scenes")
        params = replace(random_street(srng, street_length, x0=k * street_gap),
                         col_spacing=col_spacing)
        strip, cloud = preprocess_strip(street_scan(params, srng, strip_id=k), cfg)
        polys = boundaries_from(strip, cloud, cfg)
        cands = select_parking_candidates(polys, cfg.curb, srng.child("candidates"), per_polyline)
        placed = place_all(cloud, cands, models, cfg, srng.child("place"))
        for j, pv in enumerate(placed):
            if produced >= n_scenes:
                break
            try:
                raw = synthesize_scene(cloud, pv.pose, models[pv.pose.mesh_id][0], cfg,
                                       srng.child("scene", j), threads)
            except SceneRejected:
                continue
            if len(raw.gapped) < cfg.n_gapped or raw.meta.get("no_occlusion"):
                continue
            raw.meta.update(street=k, scene_in_street=j)
            produced += 1
            yield raw
        k += 1
