"""Pipeline configuration: one JSON document, schema-checked, unknown keys rejected."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional

import jsonschema

from .boundary import CurbRuleConfig
from .dataset import N_COMPLETE, N_GAPPED, NormConfig
from .placement import ModeProbabilities, VehicleDims
from .postprocess import MergeConfig
from .scanstrip import FilterConfig


def _num(minimum=None, exclusive=None):
    s: Dict[str, Any] = {"type": "number"}
    if minimum is not None:
        s["minimum"] = minimum
    if exclusive is not None:
        s["exclusiveMinimum"] = exclusive
    return s


def _obj(props: Dict[str, dict]) -> dict:
    return {"type": "object", "properties": props, "additionalProperties": False}


SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "threads": {"type": "integer", "minimum": 0},
    "filter": _obj({"max_range": _num(exclusive=0), "sensor_height": _num(),
                    "h_min": _num(), "h_max": _num()}),
    "curb": _obj({"raster_cell": _num(exclusive=0), "max_median_height": _num(exclusive=0),
                  "min_elongation": _num(exclusive=0), "ground_band": _num(exclusive=0),
                  "min_boundary_length": _num(minimum=0), "min_endpoint_clearance": _num(minimum=0)}),
    "segments": _obj({"angle_tol": _num(exclusive=0), "min_points": {"type": "integer", "minimum": 1},
                      "window_cols": {"type": ["integer", "null"], "minimum": 1}}),
    "placement": _obj({
        "modes": _obj({"on_road": _num(minimum=0), "sidewalk": _num(minimum=0),
                       "perpendicular": _num(minimum=0)}),
        "dims": _obj({"length": _num(exclusive=0), "width": _num(exclusive=0),
                      "height": _num(exclusive=0)}),
        "ground_radius": _num(exclusive=0),
        "per_polyline": {"type": "integer", "minimum": 1},
    }),
    "crop": _obj({"half_size": _num(exclusive=0), "jitter": _num(minimum=0),
                  "min_points": {"type": "integer", "minimum": 1}}),
    "dataset": _obj({"n_complete": {"type": "integer", "minimum": 1},
                     "n_gapped": {"type": "integer", "minimum": 1},
                     "scale": _num(exclusive=0), "z_gain": _num(exclusive=0),
                     "z_percentile": _num(minimum=0), "z_offset": _num(),
                     "augment": {"type": "boolean"}}),
    "merge": _obj({"threshold": _num(exclusive=0)}),
    "eval": _obj({"d": _num(exclusive=0)}),
})


class ConfigError(ValueError):
    """Invalid configuration document (CLI usage error)."""


@dataclass
class PipelineConfig:
    seed: int = 0
    threads: int = 0            # 0: take the environment default
    filter: FilterConfig = field(default_factory=FilterConfig)
    curb: CurbRuleConfig = field(default_factory=CurbRuleConfig)
    angle_tol: float = 30.0
    min_segment_points: int = 20
    window_cols: Optional[int] = 64
    modes: ModeProbabilities = field(default_factory=ModeProbabilities)
    dims: VehicleDims = field(default_factory=VehicleDims)
    ground_radius: float = 2.0
    per_polyline: int = 1
    crop_half_size: float = 4.0
    crop_jitter: float = 0.2
    crop_min_points: int = 5000
    n_complete: int = N_COMPLETE
    n_gapped: int = N_GAPPED
    norm: NormConfig = field(default_factory=NormConfig)
    augment: bool = False
    merge: MergeConfig = field(default_factory=MergeConfig)
    eval_d: float = 0.01

    def to_json(self) -> dict:
        return {
            "seed": self.seed, "threads": self.threads,
            "filter": asdict(self.filter), "curb": asdict(self.curb),
            "segments": {"angle_tol": self.angle_tol, "min_points": self.min_segment_points,
                         "window_cols": self.window_cols},
            "placement": {"modes": asdict(self.modes), "dims": asdict(self.dims),
                          "ground_radius": self.ground_radius, "per_polyline": self.per_polyline},
            "crop": {"half_size": self.crop_half_size, "jitter": self.crop_jitter,
                     "min_points": self.crop_min_points},
            "dataset": {"n_complete": self.n_complete, "n_gapped": self.n_gapped,
                        "scale": self.norm.scale, "z_gain": self.norm.z_gain,
                        "z_percentile": self.norm.z_percentile, "z_offset": self.norm.z_offset,
                        "augment": self.augment},
            "merge": asdict(self.merge), "eval": {"d": self.eval_d},
        }

    def digest(self) -> str:
        """SHA-256 of the canonical document; the thread count never changes results and is left out."""
        doc = self.to_json()
        doc.pop("threads")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_json(cls, doc: Optional[dict]) -> "PipelineConfig":
        """Defaults overlaid with ``doc``; raises :class:`ConfigError` naming the bad key."""
        doc = {} if doc is None else copy.deepcopy(doc)
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as e:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {e.message}") from None
        base = cls().to_json()
        for k, v in doc.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                for kk, vv in v.items():
                    if isinstance(vv, dict):
                        base[k][kk] = dict(base[k][kk], **vv)
                    else:
                        base[k][kk] = vv
            else:
                base[k] = v
        try:
            pl, ds, seg, cr = base["placement"], base["dataset"], base["segments"], base["crop"]
            return cls(
                seed=int(base["seed"]), threads=int(base["threads"]),
                filter=FilterConfig(**base["filter"]), curb=CurbRuleConfig(**base["curb"]),
                angle_tol=float(seg["angle_tol"]), min_segment_points=int(seg["min_points"]),
                window_cols=None if seg["window_cols"] is None else int(seg["window_cols"]),
                modes=ModeProbabilities(**pl["modes"]), dims=VehicleDims(**pl["dims"]),
                ground_radius=float(pl["ground_radius"]), per_polyline=int(pl["per_polyline"]),
                crop_half_size=float(cr["half_size"]), crop_jitter=float(cr["jitter"]),
                crop_min_points=int(cr["min_points"]),
                n_complete=int(ds["n_complete"]), n_gapped=int(ds["n_gapped"]),
                norm=NormConfig(ds["scale"], ds["z_gain"], ds["z_percentile"], ds["z_offset"]),
                augment=bool(ds["augment"]),
                merge=MergeConfig(**base["merge"]), eval_d=float(base["eval"]["d"]),
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"config error: {e}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from None
        return cls.from_json(doc)
