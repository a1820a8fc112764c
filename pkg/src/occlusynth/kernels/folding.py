"""Folding-based densification with weight gradients.

Each coarse point is copied ``r`` times. Copy ``j`` is paired with the
``j``-th node of a ``u x u`` planar grid. Two shared MLPs map
(point, feature, grid node) to a 3D offset that is added to the copied point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from ..errors import ShapeError
from ..rng import SeededRng
from .layers import BN_EPS

FEAT_DIM = 280


@dataclass(frozen=True)
class FoldingConfig:
    r: int = 9
    u: int = 3
    extent: float = 0.05

    def __post_init__(self):
        if self.u * self.u != self.r:
            raise ValueError("folding grid side squared must equal the upsampling factor")
        if not self.extent > 0:
            raise ValueError("grid extent must be positive")

    def grid(self) -> np.ndarray:
        """``(r, 2)`` planar grid nodes centred on the origin."""
        t = np.linspace(-self.extent, self.extent, self.u)
        a, b = np.meshgrid(t, t, indexing="ij")
        return np.stack([a.ravel(), b.ravel()], axis=1)


@dataclass
class FoldLayer:
    """Shared MLP: linear, BN, ReLU, linear, BN, ReLU, linear."""

    weights: List[np.ndarray]          # (out, in) each
    biases: List[np.ndarray]
    bn: List[Dict[str, np.ndarray]] = field(default_factory=list)   # one per hidden layer

    def __post_init__(self):
        if len(self.weights) != 3 or len(self.biases) != 3:
            raise ShapeError("a folding layer has exactly three linear layers")
        for k in range(2):
            if self.weights[k + 1].shape[1] != self.weights[k].shape[0]:
                raise ShapeError(f"folding linear {k + 1} input width mismatch")
        if not self.bn:
            self.bn = [{"gamma": np.ones(w.shape[0]), "beta": np.zeros(w.shape[0]),
                        "mean": np.zeros(w.shape[0]), "var": np.ones(w.shape[0])}
                       for w in self.weights[:2]]

    @classmethod
    def random(cls, dims: Tuple[int, ...], rng: SeededRng) -> "FoldLayer":
        ws, bs = [], []
        for k in range(3):
            g = rng.child("linear", k).generator()
            bound = 1.0 / np.sqrt(dims[k])
            ws.append(g.uniform(-bound, bound, size=(dims[k + 1], dims[k])))
            bs.append(g.uniform(-bound, bound, size=dims[k + 1]))
        return cls(ws, bs)

    def zeros_like(self) -> "FoldLayer":
        return FoldLayer([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases],
                         [{k: v.copy() for k, v in d.items()} for d in self.bn])

    def forward(self, x: np.ndarray, cache: bool = False):
        acts = [x]
        h = x
        for k in range(3):
            z = h @ self.weights[k].T + self.biases[k]
            if k < 2:
                bn = self.bn[k]
                scale = bn["gamma"] / np.sqrt(bn["var"] + BN_EPS)
                z = (z - bn["mean"]) * scale + bn["beta"]
                acts.append(z)
                h = np.maximum(z, 0.0)
            else:
                h = z
        return (h, acts) if cache else h

    def backward(self, acts: List[np.ndarray], upstream: np.ndarray):
        """Weight/bias gradients and the gradient w.r.t. the layer input."""
        gw: List[np.ndarray] = [None] * 3
        gb: List[np.ndarray] = [None] * 3
        g = upstream
        for k in (2, 1, 0):
            h_in = acts[0] if k == 0 else np.maximum(acts[k], 0.0)
            gw[k] = g.T @ h_in
            gb[k] = g.sum(axis=0)
            g = g @ self.weights[k]
            if k > 0:
                bn = self.bn[k - 1]
                scale = bn["gamma"] / np.sqrt(bn["var"] + BN_EPS)
                g = g * (acts[k] > 0) * scale
        return gw, gb, g


@dataclass
class FoldingParams:
    fold1: FoldLayer    # 285 -> 285 -> 128 -> 3
    fold2: FoldLayer    # 286 -> 286 -> 128 -> 3

    @classmethod
    def random(cls, rng: SeededRng, feat_dim: int = FEAT_DIM) -> "FoldingParams":
        d1, d2 = feat_dim + 5, feat_dim + 6
        return cls(FoldLayer.random((d1, d1, 128, 3), rng.child("fold1")),
                   FoldLayer.random((d2, d2, 128, 3), rng.child("fold2")))

    def zeros_like(self) -> "FoldingParams":
        return FoldingParams(self.fold1.zeros_like(), self.fold2.zeros_like())

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, layer in (("fold1", self.fold1), ("fold2", self.fold2)):
            for k in range(3):
                out[f"{name}.w{k}"] = layer.weights[k]
                out[f"{name}.b{k}"] = layer.biases[k]
            for k in range(2):
                for key, v in layer.bn[k].items():
                    out[f"{name}.bn{k}.{key}"] = v
        return out


def _tile(coarse: np.ndarray, feats: np.ndarray, cfg: FoldingConfig):
    n = len(coarse)
    pts = np.repeat(coarse, cfg.r, axis=0)
    f = np.repeat(feats, cfg.r, axis=0)
    grid = np.tile(cfg.grid(), (n, 1))
    return pts, f, grid


def folding_densify(coarse: np.ndarray, feats: np.ndarray, params: FoldingParams,
                    cfg: FoldingConfig = FoldingConfig(), cache: bool = False):
    """``r * N`` output points; point ``i``'s copies occupy rows ``i*r .. i*r + r - 1``."""
    c = np.asarray(coarse, dtype=np.float64)
    f = np.asarray(feats, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 3:
        raise ShapeError("coarse points must have shape (N, 3)")
    if f.ndim != 2 or len(f) != len(c):
        raise ShapeError(f"features must be row-aligned with the coarse points: {f.shape} vs {c.shape}")
    if f.shape[1] + 5 != params.fold1.weights[0].shape[1]:
        raise ShapeError(f"folding layer 1 expects {params.fold1.weights[0].shape[1] - 5} "
                         f"feature channels, got {f.shape[1]}")
    pts, tf, grid = _tile(c, f, cfg)
    x1 = np.concatenate([pts, tf, grid], axis=1)
    y1, a1 = params.fold1.forward(x1, cache=True)
    x2 = np.concatenate([y1, pts, tf], axis=1)
    offsets, a2 = params.fold2.forward(x2, cache=True)
    out = offsets + pts
    if cache:
        return out, {"fold1": a1, "fold2": a2, "x1": x1, "x2": x2, "offsets": offsets}
    return out


def folding_weight_grads(coarse: np.ndarray, feats: np.ndarray, params: FoldingParams,
                         upstream: np.ndarray, cfg: FoldingConfig = FoldingConfig()) -> Dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * folding_densify(...))`` w.r.t. all linear weights and biases."""
    out, cache = folding_densify(coarse, feats, params, cfg, cache=True)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != out.shape:
        raise ShapeError(f"upstream gradient must have shape {out.shape}")
    gw2, gb2, gx2 = params.fold2.backward(cache["fold2"], up)
    # first three columns of the second input are the first layer's output
    gw1, gb1, _ = params.fold1.backward(cache["fold1"], gx2[:, :3])
    grads = {}
    for name, gw, gb in (("fold1", gw1, gb1), ("fold2", gw2, gb2)):
        for k in range(3):
            grads[f"{name}.w{k}"] = gw[k]
            grads[f"{name}.b{k}"] = gb[k]
    return grads
