"""``occlusynth`` command line: one subcommand per pipeline stage plus a self-contained demo.

Exit codes: 0 success, 1 domain error, 2 usage or configuration error.
Every run writes a manifest next to its outputs with the resolved
configuration, its hash, the seed, library versions and input/output checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .boundary import load_boundaries, save_boundaries, select_parking_candidates
from .config import ConfigError, PipelineConfig
from .dataset import DatasetManifest, SplitSpec, build_scene_pair, write_dataset
from .errors import EmptyInputError, OcclusynthError
from .geom import PointCloud
from .kernels.gradcheck import KERNELS, grad_check
from .metrics import evaluate
from .pipeline import (boundaries_from, build_dataset, place_all, preprocess_strip,
                       procedural_models, raw_from_files, street_scan, synthesize_all,
                       synthesize_scene)
from .placement import VehiclePose, load_dims_table, load_model_dir
from .plyio import read_ply, write_ply
from .postprocess import MergeConfig, merge_completion
from .raycast import default_threads, list_scenes, read_scene, write_scene
from .rng import SeededRng
from .scanstrip import FilterConfig, cloud_to_strip, load_strip
from .synthetic import StreetParams

log = logging.getLogger("occlusynth")

GRAD_TOLERANCE = 1e-4
MANIFEST_NAME = "run_manifest.json"


class _Parser(argparse.ArgumentParser):
    """Usage errors print the full help text before exiting with status 2."""

    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"\n{self.prog}: error: {message}\n")


# --------------------------------------------------------------------- helpers

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _checksums(paths: Sequence[Path], base: Optional[Path] = None) -> Dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name == MANIFEST_NAME or f.name.endswith(".manifest.json"):
                continue
            key = str(f.relative_to(base)) if base is not None and f.is_relative_to(base) else str(f)
            out[key] = sha256_file(f)
    return out


def _versions() -> Dict[str, str]:
    out = {"python": platform.python_version()}
    for pkg in ("occlusynth", "numpy", "scipy", "numba", "shapely", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


def write_manifest(out: Path, command: str, argv: Sequence[str], cfg: PipelineConfig,
                   inputs: Sequence[Path], outputs: Sequence[Path], threads: int,
                   extra: Optional[dict] = None) -> Path:
    """Manifest beside the outputs: ``out/run_manifest.json`` or ``<out>.manifest.json``."""
    out = Path(out)
    where = out / MANIFEST_NAME if out.is_dir() else out.with_name(out.name + ".manifest.json")
    base = out if out.is_dir() else out.parent
    doc = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed,
        "threads": threads,
        "config": cfg.to_json(),
        "config_hash": cfg.digest(),
        "versions": _versions(),
        "inputs": _checksums([Path(p) for p in inputs]),
        "outputs": _checksums([Path(p) for p in outputs], base),
    }
    doc.update(extra or {})
    with open(where, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return where


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        cfg = replace(cfg, seed=seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _threads(cfg: PipelineConfig) -> int:
    return cfg.threads if cfg.threads > 0 else default_threads()


def _models(models_dir: Optional[str], cfg: PipelineConfig):
    if models_dir is None:
        return procedural_models(cfg, SeededRng(cfg.seed, ("models",)))
    d = Path(models_dir)
    table = load_dims_table(d / "dims.json") if (d / "dims.json").exists() else None
    return load_model_dir(d, table, cfg.dims)


# ----------------------------------------------------------------- subcommands

def cmd_filter(args, cfg: PipelineConfig):
    over = {k: getattr(args, k) for k in ("max_range", "sensor_height", "h_min", "h_max")
            if getattr(args, k) is not None}
    cfg = replace(cfg, filter=FilterConfig(**{**cfg.filter.__dict__, **over}))
    strip = load_strip(args.input)
    filtered, cloud = preprocess_strip(strip, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, cloud)
    log.info("kept %d of %d valid pixels", len(cloud), int(strip.valid.sum()))
    return cfg, [args.input], [out]


def cmd_boundaries(args, cfg: PipelineConfig):
    cloud = read_ply(args.input)
    polys = boundaries_from(cloud_to_strip(cloud), cloud, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_boundaries(out, polys)
    log.info("%d boundary polylines", len(polys))
    return cfg, [args.input], [out]


def cmd_place(args, cfg: PipelineConfig):
    polys = load_boundaries(args.boundaries)
    cloud = read_ply(args.cloud)
    per = args.per_polyline or cfg.per_polyline
    root = SeededRng(cfg.seed, ("place",))
    cands = select_parking_candidates(polys, cfg.curb, root.child("candidates"), per)
    placed = place_all(cloud, cands, _models(args.models, cfg), cfg, root.child("vehicles"))
    doc = {"seed": cfg.seed, "poses": [pv.pose.to_json() for pv in placed],
           "candidates": len(cands)}
    out = Path(args.out)
    _dump(out, doc)
    log.info("%d vehicles placed from %d candidates", len(placed), len(cands))
    inputs = [args.boundaries, args.cloud] + ([args.models] if args.models else [])
    return cfg, inputs, [out]


def cmd_synthesize(args, cfg: PipelineConfig):
    cloud = read_ply(args.cloud)
    with open(args.poses) as fh:
        poses = [VehiclePose.from_json(p) for p in json.load(fh)["poses"]]
    raws = synthesize_all(cloud, poses, _models(args.models, cfg), cfg,
                          SeededRng(cfg.seed, ("synthesize",)), _threads(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, raw in enumerate(raws):
        write_scene(out, i, raw)
    log.info("%d scenes from %d poses", len(raws), len(poses))
    inputs = [args.cloud, args.poses] + ([args.models] if args.models else [])
    return cfg, inputs, [out]


def cmd_dataset(args, cfg: PipelineConfig):
    ids = list_scenes(args.scenes)
    if not ids:
        raise EmptyInputError(f"no scenes in {args.scenes}")
    raws = {}
    for sid in ids:
        complete, gap, meta = read_scene(args.scenes, sid)
        raws[sid] = raw_from_files(complete, gap, meta)
    with open(args.split) as fh:
        split = SplitSpec.from_json(json.load(fh))
    pairs, manifest = build_dataset(raws, split, cfg, cfg.seed)
    out = Path(args.out)
    write_dataset(pairs, manifest, out)
    return cfg, [args.scenes, args.split], [out]


def cmd_kernel_check(args, cfg: PipelineConfig):
    kernels = args.kernels or list(KERNELS)
    errors = grad_check(kernels, args.trials, args.eps, SeededRng(cfg.seed, ("kernel-check",)))
    passed = {k: bool(v < GRAD_TOLERANCE) for k, v in errors.items()}
    doc = {"seed": cfg.seed, "trials": args.trials, "tolerance": GRAD_TOLERANCE,
           "max_rel_error": errors, "passed": passed, "all_passed": all(passed.values())}
    out = Path(args.out)
    _dump(out, doc)
    for k, v in errors.items():
        print(f"{k:24s} max rel. error {v:.3e}  {'ok' if passed[k] else 'FAIL'}")
    if not doc["all_passed"]:
        raise OcclusynthError("gradient check exceeded tolerance")
    return cfg, [], [out]


def cmd_eval(args, cfg: PipelineConfig):
    d = cfg.eval_d if args.d is None else args.d
    report = evaluate(read_ply(args.pred), read_ply(args.gt), d)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.dumps())
    print(f"CD {report.cd:.6e}  F@{d:g} {report.fscore:.4f}")
    return cfg, [args.pred, args.gt], [out]


def cmd_merge(args, cfg: PipelineConfig):
    mcfg = cfg.merge if args.threshold is None else MergeConfig(args.threshold)
    cfg = replace(cfg, merge=mcfg)
    merged = merge_completion(read_ply(args.input), read_ply(args.generated), mcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_ply(out, merged)
    return cfg, [args.input, args.generated], [out]


DEMO_STREET = StreetParams(length=40.0, noise=0.003)


def run_demo(cfg: PipelineConfig, out: Path, threads: int) -> dict:
    """Synthetic street to one evaluated scene pair; returns the report document."""
    root = SeededRng(cfg.seed, ("demo",))
    strip = street_scan(DEMO_STREET, root.child("street"))
    filtered, cloud = preprocess_strip(strip, cfg)
    polys = boundaries_from(filtered, cloud, cfg)
    cands = select_parking_candidates(polys, cfg.curb, root.child("candidates"), 2)
    models = procedural_models(cfg, root)
    placed = place_all(cloud, cands, models, cfg, root.child("vehicles"))
    raw = None
    for j, pv in enumerate(placed):
        cand = synthesize_scene(cloud, pv.pose, models[pv.pose.mesh_id][0], cfg,
                                root.child("scene", j), threads)
        if len(cand.gapped) >= cfg.n_gapped and not cand.meta.get("no_occlusion"):
            raw = cand
            break
    if raw is None:
        raise OcclusynthError("demo street produced no usable scene")
    out.mkdir(parents=True, exist_ok=True)
    save_boundaries(out / "boundaries.json", polys)
    _dump(out / "poses.json", {"seed": cfg.seed, "poses": [pv.pose.to_json() for pv in placed]})
    write_scene(out / "scenes", 0, raw)
    pair = build_scene_pair(raw, root.child("pair"), 0, cfg.norm, cfg.n_complete, cfg.n_gapped)
    manifest = DatasetManifest({"train": [0], "test": [], "val": []}, {}, cfg.seed,
                               {"train": 1, "test": 0, "val": 0})
    write_dataset({0: pair}, manifest, out / "dataset")

    # the gap scene as a do-nothing completion, and the merge of the true
    # complete scene into it as the best possible one (merged in metres)
    baseline = evaluate(pair.gapped, pair.complete, cfg.eval_d)
    tf = pair.transform
    merged_w = merge_completion(PointCloud(tf.inverse(pair.gapped.points)),
                                PointCloud(tf.inverse(pair.complete.points)), cfg.merge)
    merged = PointCloud(tf.forward(merged_w.points), frame="normalized", extra=merged_w.extra)
    write_ply(out / "merged_oracle.ply", merged, coord_dtype="f4")
    oracle = evaluate(merged, pair.complete, cfg.eval_d)
    report = {
        "seed": cfg.seed,
        "boundaries": len(polys),
        "candidates": len(cands),
        "placed": len(placed),
        "scene": {"removed": raw.removed, "complete": len(raw.complete), "gap": len(raw.gapped),
                  "mode": raw.pose.mode, "center": [float(x) for x in raw.center]},
        "pair": {"complete": len(pair.complete), "gap": len(pair.gapped),
                 "transform": pair.transform.to_json()},
        "gap_vs_complete": baseline.to_json(),
        "oracle_merge": dict(oracle.to_json(), generated=int((merged.extra["provenance"] == 1).sum())),
    }
    _dump(out / "report.json", report)
    return report


def cmd_demo(args, cfg: PipelineConfig):
    out = Path(args.out)
    report = run_demo(cfg, out, _threads(cfg))
    g = report["gap_vs_complete"]
    print(f"scene: {report['scene']['removed']} points occluded by a {report['scene']['mode']} vehicle")
    print(f"gap vs complete: CD {g['cd']:.4e}  F@{g['d']:g} {g['fscore']:.4f}")
    return cfg, [], [out]


# ---------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration overriding the defaults")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: config, then OCCLUSYNTH_THREADS, then 1)")
    common.add_argument("-v", "--verbose", action="store_true")
    seeded = argparse.ArgumentParser(add_help=False)
    seeded.add_argument("--seed", type=int, default=None)

    p = _Parser(prog="occlusynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("filter", parents=[common], help="range/height filters on a scan strip")
    s.add_argument("--in", dest="input", required=True, help="SST1 strip")
    s.add_argument("--out", required=True, help="output PLY")
    s.add_argument("--max-range", type=float)
    s.add_argument("--sensor-height", type=float)
    s.add_argument("--h-min", type=float)
    s.add_argument("--h-max", type=float)
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("boundaries", parents=[common], help="curb polylines from a filtered cloud")
    s.add_argument("--in", dest="input", required=True, help="PLY written by 'filter'")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_boundaries)

    s = sub.add_parser("place", parents=[common, seeded], help="place vehicles along boundaries")
    s.add_argument("--boundaries", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--models", help="directory of OBJ models (default: procedural car)")
    s.add_argument("--per-polyline", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_place)

    s = sub.add_parser("synthesize", parents=[common, seeded], help="crop and ray-cast scene pairs")
    s.add_argument("--cloud", required=True)
    s.add_argument("--poses", required=True)
    s.add_argument("--models")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synthesize)

    s = sub.add_parser("dataset", parents=[common, seeded], help="sample, normalize and split scenes")
    s.add_argument("--scenes", required=True)
    s.add_argument("--split", required=True, help="JSON split regions")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_dataset)

    s = sub.add_parser("kernel-check", parents=[common, seeded], help="finite-difference gradient checks")
    s.add_argument("--trials", type=int, default=50)
    s.add_argument("--eps", type=float, default=None)
    s.add_argument("--kernels", nargs="+", choices=KERNELS)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_kernel_check)

    s = sub.add_parser("eval", parents=[common], help="Chamfer distance and F-score")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--d", type=float, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("merge", parents=[common], help="merge generated points into a measured scene")
    s.add_argument("--input", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_merge)

    s = sub.add_parser("demo", parents=[common, seeded], help="end-to-end run on a synthetic street")
    s.add_argument("--out", default="demo_out")
    s.set_defaults(fn=cmd_demo)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        cfg, inputs, outputs = args.fn(args, cfg)
        write_manifest(Path(outputs[0]), args.command, argv, cfg, inputs, outputs, _threads(cfg))
    except ConfigError as e:
        print(f"occlusynth: {e}", file=sys.stderr)
        return 2
    except (OcclusynthError, ValueError, OSError, KeyError) as e:
        print(f"occlusynth {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
