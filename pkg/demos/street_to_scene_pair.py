"""
From a scanned street to one training pair
==========================================

A synthetic street is scanned by the simulated profile scanner, filtered,
searched for curbs, and a procedural car is parked along one of them. Every
point the car hides from the scanner is removed, which leaves the gap scene.
"""

import numpy as np

from occlusynth.config import PipelineConfig
from occlusynth.dataset import build_scene_pair
from occlusynth.boundary import select_parking_candidates
from occlusynth.metrics import chamfer
from occlusynth.pipeline import (boundaries_from, place_all, preprocess_strip,
                                 procedural_models, synthesize_scene)
from occlusynth.rng import SeededRng
from occlusynth.synthetic import StreetParams, build_street, scan_street

cfg = PipelineConfig()
root = SeededRng(21)

# a 40 m street, scanned with 3 mm range noise
street = StreetParams(length=40.0, noise=0.003)
strip = scan_street(build_street(street), root.child("scan"))
print("strip:", strip.shape, "valid pixels:", int(strip.valid.sum()))

# normals first (neighbours are still present), then range and height filters
filtered, cloud = preprocess_strip(strip, cfg)
print("after filters:", len(cloud), "points")

# curbs become BEV polylines; each long enough one offers parking spots
polys = boundaries_from(filtered, cloud, cfg)
for p in polys:
    length = np.sum(np.linalg.norm(np.diff(p.vertices, axis=0), axis=1))
    print(f"curb {p.id}: {length:.1f} m at y = {np.median(p.vertices[:, 1]):+.2f}")

cands = select_parking_candidates(polys, cfg.curb, root.child("candidates"), 2)
models = procedural_models(cfg, root)
placed = place_all(cloud, cands, models, cfg, root.child("vehicles"))
pose = placed[0].pose
print("vehicle mode:", pose.mode, "at", np.round(pose.translation, 2))

# crop 8 m x 8 m around the car and cast every head-to-point segment
raw = synthesize_scene(cloud, pose, models[pose.mesh_id][0], cfg, root.child("scene"))
print(f"complete {len(raw.complete)}, gap {len(raw.gapped)}, removed {raw.removed}")

# resample to fixed sizes and map into the unit cube
pair = build_scene_pair(raw, root.child("pair"), 0, cfg.norm, cfg.n_complete, cfg.n_gapped)
print("pair sizes:", len(pair.complete), len(pair.gapped))
print("coordinate range:", pair.complete.points.min(axis=0), pair.complete.points.max(axis=0))
print("CD(gap, complete) in the cube:", chamfer(pair.gapped, pair.complete))
