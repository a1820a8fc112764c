"""Forward graph of the gap-completion network with seed-reproducible parameters.

gridding -> 4 conv blocks -> 2 dense -> 2 dense -> 4 transposed conv blocks
with additive skips -> gridding reverse -> coarse sampling -> cubic features
-> 3 GeLU dense -> two folding layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..errors import FormatError, ShapeError
from ..rng import SeededRng
from .folding import FoldingConfig, FoldingParams, FoldLayer, folding_densify
from .grid import RES, gridding, gridding_reverse
from .layers import (LazyDense, batch_norm, conv3d, conv_transpose3d, dense, gelu,
                     leaky_relu, maxpool3d, relu)
from .sampling import N_COARSE, cubic_feature_sampling, sample_coarse

ENC_CHANNELS = (40, 80, 160, 320)
DEC_CHANNELS = (160, 80, 40, 1)
KERNEL = 4
BOTTOM = 5                     # spatial side after the last pooling
FLAT = ENC_CHANNELS[-1] * BOTTOM ** 3      # 40,000
FC_HIDDEN = 8000
GLOBAL_DIM = 4000
MLP_DIMS = (2240, 560, 560, 280)


def _bn_identity(c: int) -> Dict[str, np.ndarray]:
    return {"gamma": np.ones(c), "beta": np.zeros(c), "mean": np.zeros(c), "var": np.ones(c)}


@dataclass
class ConvBlock:
    w: np.ndarray
    b: np.ndarray
    bn: Dict[str, np.ndarray]
    transposed: bool = False

    @property
    def out_channels(self) -> int:
        return self.w.shape[1] if self.transposed else self.w.shape[0]

    def zeroed(self) -> "ConvBlock":
        return ConvBlock(np.zeros_like(self.w), np.zeros_like(self.b),
                         {k: v.copy() for k, v in self.bn.items()}, self.transposed)


@dataclass
class SgcParams:
    enc: List[ConvBlock]
    enc_fc: List[LazyDense]        # 40,000 -> 8,000 -> 4,000
    dec_fc: List[LazyDense]        # 4,000 -> 8,000 -> 40,000
    dec: List[ConvBlock]
    mlp_w: List[np.ndarray]
    mlp_b: List[np.ndarray]
    folding: FoldingParams
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def random(cls, seed: int) -> "SgcParams":
        root = SeededRng(int(seed), ("sgc",))
        enc, cin = [], 1
        for i, cout in enumerate(ENC_CHANNELS):
            g = root.child("enc", i).generator()
            bound = 1.0 / np.sqrt(cin * KERNEL ** 3)
            enc.append(ConvBlock(g.uniform(-bound, bound, (cout, cin, KERNEL, KERNEL, KERNEL)),
                                 g.uniform(-bound, bound, cout), _bn_identity(cout)))
            cin = cout
        dec = []
        for i, cout in enumerate(DEC_CHANNELS):
            g = root.child("dec", i).generator()
            bound = 1.0 / np.sqrt(cout * KERNEL ** 3)
            dec.append(ConvBlock(g.uniform(-bound, bound, (cin, cout, KERNEL, KERNEL, KERNEL)),
                                 g.uniform(-bound, bound, cout), _bn_identity(cout), True))
            cin = cout

        def lazy(name, n_in, n_out):
            bound = 1.0 / np.sqrt(n_in)
            bias = root.child(name, "bias").generator().uniform(-bound, bound, n_out)
            return LazyDense(n_in, n_out, root.child(name, "weight"), bound, bias)

        enc_fc = [lazy("enc_fc0", FLAT, FC_HIDDEN), lazy("enc_fc1", FC_HIDDEN, GLOBAL_DIM)]
        dec_fc = [lazy("dec_fc0", GLOBAL_DIM, FC_HIDDEN), lazy("dec_fc1", FC_HIDDEN, FLAT)]
        mlp_w, mlp_b = [], []
        for k in range(3):
            g = root.child("mlp", k).generator()
            bound = 1.0 / np.sqrt(MLP_DIMS[k])
            mlp_w.append(g.uniform(-bound, bound, (MLP_DIMS[k + 1], MLP_DIMS[k])))
            mlp_b.append(g.uniform(-bound, bound, MLP_DIMS[k + 1]))
        folding = FoldingParams.random(root.child("folding"))
        return cls(enc, enc_fc, dec_fc, dec, mlp_w, mlp_b, folding, int(seed))

    def validate(self) -> None:
        """Raise :class:`ShapeError` naming the first layer that deviates from the graph."""
        cin = 1
        for i, (blk, cout) in enumerate(zip(self.enc, ENC_CHANNELS)):
            want = (cout, cin, KERNEL, KERNEL, KERNEL)
            if blk.w.shape != want or blk.b.shape != (cout,):
                raise ShapeError(f"encoder conv {i}: weight {blk.w.shape}, expected {want}")
            cin = cout
        if len(self.enc) != 4 or len(self.dec) != 4:
            raise ShapeError("encoder and decoder need four convolution blocks each")
        for i, (blk, cout) in enumerate(zip(self.dec, DEC_CHANNELS)):
            want = (cin, cout, KERNEL, KERNEL, KERNEL)
            if blk.w.shape != want or blk.b.shape != (cout,):
                raise ShapeError(f"decoder transposed conv {i}: weight {blk.w.shape}, expected {want}")
            cin = cout
        for name, layers, dims in (("encoder fc", self.enc_fc, (FLAT, FC_HIDDEN, GLOBAL_DIM)),
                                   ("decoder fc", self.dec_fc, (GLOBAL_DIM, FC_HIDDEN, FLAT))):
            for i, layer in enumerate(layers):
                if (layer.n_in, layer.n_out) != (dims[i], dims[i + 1]):
                    raise ShapeError(f"{name} {i}: {layer.n_in}->{layer.n_out}, "
                                     f"expected {dims[i]}->{dims[i + 1]}")
        for k in range(3):
            want = (MLP_DIMS[k + 1], MLP_DIMS[k])
            if self.mlp_w[k].shape != want:
                raise ShapeError(f"mlp dense {k}: weight {self.mlp_w[k].shape}, expected {want}")
        d1 = MLP_DIMS[-1] + 5
        want1 = [(d1, d1), (128, d1), (3, 128)]
        want2 = [(d1 + 1, d1 + 1), (128, d1 + 1), (3, 128)]
        for name, layer, want in (("folding 1", self.folding.fold1, want1),
                                  ("folding 2", self.folding.fold2, want2)):
            for k, w in enumerate(layer.weights):
                if w.shape != want[k]:
                    raise ShapeError(f"{name} linear {k}: weight {w.shape}, expected {want[k]}")

    def with_zero_decoder(self) -> "SgcParams":
        zero_fc = [replace(f, bound=0.0, bias=np.zeros(f.n_out)) for f in self.dec_fc]
        return replace(self, dec_fc=zero_fc, dec=[b.zeroed() for b in self.dec])

    def with_zero_folding(self) -> "SgcParams":
        return replace(self, folding=self.folding.zeros_like())

    # serialization: dense tensors go to one little-endian float64 blob,
    # lazy layers are stored as their generator description
    def _tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for side, blocks in (("enc", self.enc), ("dec", self.dec)):
            for i, blk in enumerate(blocks):
                out[f"{side}{i}.w"] = blk.w
                out[f"{side}{i}.b"] = blk.b
                for k, v in blk.bn.items():
                    out[f"{side}{i}.bn.{k}"] = v
        for side, layers in (("enc_fc", self.enc_fc), ("dec_fc", self.dec_fc)):
            for i, layer in enumerate(layers):
                out[f"{side}{i}.b"] = layer.bias
        for k in range(3):
            out[f"mlp{k}.w"] = self.mlp_w[k]
            out[f"mlp{k}.b"] = self.mlp_b[k]
        out.update(self.folding.tensors())
        return out

    def save(self, blob_path, manifest_path) -> None:
        entries, offset = [], 0
        tensors = self._tensors()
        with open(blob_path, "wb") as fh:
            for name, arr in tensors.items():
                data = np.ascontiguousarray(arr, dtype="<f8")
                fh.write(data.tobytes())
                entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
                offset += data.nbytes
        lazy = {}
        for side, layers in (("enc_fc", self.enc_fc), ("dec_fc", self.dec_fc)):
            for i, layer in enumerate(layers):
                lazy[f"{side}{i}"] = {"n_in": layer.n_in, "n_out": layer.n_out,
                                      "seed": layer.rng.seed, "path": list(layer.rng.path),
                                      "bound": layer.bound, "block_rows": layer.block_rows}
        doc = {"version": 1, "dtype": "<f8", "seed": self.seed, "size": offset,
               "tensors": entries, "lazy_dense": lazy}
        with open(manifest_path, "w") as fh:
            json.dump(doc, fh, indent=2)

    @classmethod
    def load(cls, blob_path, manifest_path) -> "SgcParams":
        with open(manifest_path) as fh:
            doc = json.load(fh)
        raw = Path(blob_path).read_bytes()
        if len(raw) != doc["size"]:
            raise FormatError(f"parameter blob has {len(raw)} bytes, manifest says {doc['size']}")
        t = {}
        for e in doc["tensors"]:
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            t[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n,
                                         offset=e["offset"]).reshape(e["shape"]).copy()

        def blocks(side, transposed):
            return [ConvBlock(t[f"{side}{i}.w"], t[f"{side}{i}.b"],
                              {k: t[f"{side}{i}.bn.{k}"] for k in ("gamma", "beta", "mean", "var")},
                              transposed) for i in range(4)]

        def lazies(side):
            out = []
            for i in range(2):
                d = doc["lazy_dense"][f"{side}{i}"]
                rng = SeededRng(int(d["seed"]), tuple(d["path"]))
                out.append(LazyDense(d["n_in"], d["n_out"], rng, float(d["bound"]),
                                     t[f"{side}{i}.b"], int(d["block_rows"])))
            return out

        def fold(name):
            return FoldLayer([t[f"{name}.w{k}"] for k in range(3)], [t[f"{name}.b{k}"] for k in range(3)],
                             [{key: t[f"{name}.bn{k}.{key}"] for key in ("gamma", "beta", "mean", "var")}
                              for k in range(2)])

        return cls(blocks("enc", False), lazies("enc_fc"), lazies("dec_fc"), blocks("dec", True),
                   [t[f"mlp{k}.w"] for k in range(3)], [t[f"mlp{k}.b"] for k in range(3)],
                   FoldingParams(fold("fold1"), fold("fold2")), int(doc["seed"]))


def _expect(name: str, arr: np.ndarray, shape: Tuple[int, ...]) -> None:
    if arr.shape != shape:
        raise ShapeError(f"{name}: produced shape {arr.shape}, expected {shape}")


def mlp_features(feats: np.ndarray, params: SgcParams) -> np.ndarray:
    h = feats
    for k in range(3):
        h = gelu(dense(h, params.mlp_w[k], params.mlp_b[k]))
    return h


def sgc_forward(gapped, params: SgcParams, rng: SeededRng, n_coarse: int = N_COARSE,
                folding_cfg: FoldingConfig = FoldingConfig()):
    """Evaluate the full graph on one normalized cloud.

    Returns ``(coarse, output, intermediates)`` where ``intermediates`` maps
    every stage name to the shape it produced plus a few scalars.
    """
    pts = np.asarray(getattr(gapped, "points", gapped), dtype=np.float64)
    inter: Dict[str, object] = {}
    grid_in = gridding(pts, RES)
    _expect("gridding", grid_in, (RES, RES, RES))
    x = grid_in[None]
    inter["grid"] = x.shape
    skips = []
    side = RES
    for i, blk in enumerate(params.enc):
        x = conv3d(x, blk.w, blk.b, padding=2)
        x = leaky_relu(batch_norm(x, **blk.bn), 0.2)
        x = maxpool3d(x, 2)
        side //= 2
        _expect(f"encoder block {i}", x, (ENC_CHANNELS[i], side, side, side))
        inter[f"enc{i}"] = x.shape
        skips.append(x)
    flat = x.reshape(-1)
    _expect("flatten", flat, (FLAT,))
    h = relu(params.enc_fc[0](flat))
    _expect("encoder fc 0", h, (FC_HIDDEN,))
    g_feat = relu(params.enc_fc[1](h))
    _expect("global feature", g_feat, (GLOBAL_DIM,))
    inter["global"] = g_feat.shape
    h = relu(params.dec_fc[0](g_feat))
    _expect("decoder fc 0", h, (FC_HIDDEN,))
    h = relu(params.dec_fc[1](h))
    _expect("decoder fc 1", h, (FLAT,))
    x = h.reshape(ENC_CHANNELS[-1], BOTTOM, BOTTOM, BOTTOM) + skips[3]
    dec_maps = []
    side = BOTTOM
    for i, blk in enumerate(params.dec):
        x = conv_transpose3d(x, blk.w, blk.b, stride=2, crop=1)
        x = relu(batch_norm(x, **blk.bn))
        side *= 2
        _expect(f"decoder block {i}", x, (DEC_CHANNELS[i], side, side, side))
        x = x + (skips[2 - i] if i < 3 else grid_in[None])
        inter[f"dec{i}"] = x.shape
        dec_maps.append(x)
    grid_out = dec_maps[-1][0]
    cloud = gridding_reverse(grid_out)
    inter["reverse"] = cloud.shape
    coarse, topped = sample_coarse(cloud, rng.child("coarse"), n_coarse)
    _expect("coarse sampling", coarse, (n_coarse, 3))
    inter["coarse"] = coarse.shape
    inter["coarse_topped_up"] = topped
    feats = cubic_feature_sampling(coarse, dec_maps[:3])
    _expect("cubic feature sampling", feats, (n_coarse, MLP_DIMS[0]))
    inter["cubic"] = feats.shape
    f = mlp_features(feats, params)
    _expect("mlp", f, (n_coarse, MLP_DIMS[-1]))
    inter["mlp"] = f.shape
    out = folding_densify(coarse, f, params.folding, folding_cfg)
    _expect("folding", out, (folding_cfg.r * n_coarse, 3))
    inter["output"] = out.shape
    return coarse, out, inter
