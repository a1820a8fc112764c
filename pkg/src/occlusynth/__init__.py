"""Synthesize vehicle-occluded LiDAR scene pairs and evaluate gap-completion kernels."""

from .config import PipelineConfig
from .dataset import NormTransform, ScenePair
from .errors import OcclusynthError
from .geom import KdIndex, PointCloud
from .metrics import chamfer, evaluate, fscore
from .placement import TriangleMesh, VehiclePose
from .postprocess import merge_completion
from .rng import SeededRng
from .scanstrip import ScanStrip

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig", "NormTransform", "ScenePair", "OcclusynthError", "KdIndex", "PointCloud",
    "chamfer", "evaluate", "fscore", "TriangleMesh", "VehiclePose", "merge_completion",
    "SeededRng", "ScanStrip",
]
