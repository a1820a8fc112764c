import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from occlusynth.dataset import (N_COMPLETE, N_GAPPED, DatasetManifest, NormConfig, NormTransform,
                                ScenePair, SplitRegion, SplitSpec, apply_augmentation, augment,
                                augmentation_matrix, build_scene_pair, normalize_pair, read_dataset,
                                split_geographic, subsample, write_dataset)
from occlusynth.errors import CorruptionError, InsufficientPointsError, ShapeError
from occlusynth.geom import KdIndex, PointCloud
from occlusynth.metrics import chamfer
from occlusynth.raycast import ScenePairRaw
from occlusynth.rng import SeededRng


def raw_scene(gen, n=30_000, gap_frac=0.7, center=(120.0, -40.0)):
    cx, cy = center
    xy = gen.uniform(-3.95, 3.95, (n, 2)) + [cx, cy]
    z = 30.0 + np.where(gen.random(n) < 0.6, gen.normal(0, 0.01, n), gen.uniform(-0.3, 1.9, n))
    pts = np.column_stack([xy, z])
    heads = pts + [0.0, -5.0, 2.0]
    complete = PointCloud(pts, heads)
    kept = np.flatnonzero(gen.random(n) < gap_frac)
    return ScenePairRaw(complete, complete.subset(kept), np.array([cx, cy, 30.0]), None,
                        n - len(kept), kept)


class TestSubsample:
    def test_standard_sizes(self, gen):
        c = PointCloud(gen.random((30_000, 3)))
        s = subsample(c, N_COMPLETE, SeededRng(1))
        assert len(s) == 27_648
        assert len(np.unique(s.points, axis=0)) == 27_648
        members = {tuple(p) for p in c.points}
        assert all(tuple(p) in members for p in s.points)

    def test_identity_when_sizes_match(self, gen):
        c = PointCloud(gen.random((100, 3)))
        assert np.array_equal(subsample(c, 100, SeededRng(0)).points, c.points)

    def test_deterministic(self, gen):
        c = PointCloud(gen.random((500, 3)))
        a = subsample(c, 50, SeededRng(4))
        b = subsample(c, 50, SeededRng(4))
        assert np.array_equal(a.points, b.points)

    def test_insufficient(self, gen):
        with pytest.raises(InsufficientPointsError, match="insufficient points"):
            subsample(PointCloud(gen.random((10, 3))), 11, SeededRng(0))
        with pytest.raises(InsufficientPointsError):
            subsample(PointCloud(np.zeros((0, 3))), 1, SeededRng(0))


class TestNormalization:
    def test_corner(self):
        tf = NormTransform(100.0, 200.0, 7.5)
        assert np.array_equal(tf.forward(np.array([[104.0, 204.0, 7.5]])), [[1.0, 1.0, 0.0]])

    def test_one_metre_up(self):
        tf = NormTransform(100.0, 200.0, 7.5)
        assert tf.forward(np.array([[100.0, 200.0, 8.5]]))[0, 2] == 0.75

    @given(arrays(np.float64, (20, 3), elements=st.floats(-1000, 1000)),
           st.floats(-1000, 1000), st.floats(-1000, 1000), st.floats(-100, 100))
    def test_round_trip(self, pts, cx, cy, zr):
        tf = NormTransform(cx, cy, zr)
        assert np.max(np.abs(tf.inverse(tf.forward(pts)) - pts)) < 1e-12

    def test_pair_uses_shared_transform(self, gen):
        raw = raw_scene(gen, 5000)
        pair = normalize_pair(raw)
        z = raw.complete.points[:, 2]
        assert pair.transform.z_ref == pytest.approx(np.percentile(z, 5) + NormConfig().z_offset)
        assert (pair.transform.cx, pair.transform.cy) == (120.0, -40.0)
        assert np.array_equal(pair.gapped.points, pair.complete.points[raw.kept])
        assert pair.complete.frame == "normalized"
        assert np.max(np.abs(pair.complete.points)) <= 1.0

    def test_out_of_cube_is_an_error(self, gen):
        raw = raw_scene(gen, 2000)
        pts = raw.complete.points.copy()
        pts[0, 2] += 10.0
        bad = PointCloud(pts, raw.complete.heads)
        raw = ScenePairRaw(bad, bad.subset(raw.kept), raw.center, None, raw.removed, raw.kept)
        with pytest.raises(ShapeError, match="axis z"):
            normalize_pair(raw)

    def test_build_pair_counts_and_determinism(self, gen):
        raw = raw_scene(gen)
        a = build_scene_pair(raw, SeededRng(3).child("pair", 0), 0)
        b = build_scene_pair(raw, SeededRng(3).child("pair", 0), 0)
        a.check()
        assert (len(a.complete), len(a.gapped)) == (N_COMPLETE, N_GAPPED)
        assert np.array_equal(a.complete.points, b.complete.points)
        assert np.array_equal(a.gapped.points, b.gapped.points)
        # every sampled point maps back onto a raw point
        back = a.transform.inverse(a.complete.points)
        _, sq = KdIndex(raw.complete.points).nearest_sq(back)
        assert np.sqrt(sq.max()) < 1e-12


def small_pair(gen, n=64):
    tf = NormTransform(0.0, 0.0, 0.0)
    c = PointCloud(gen.uniform(-1, 1, (n, 3)), frame="normalized")
    g = c.subset(np.arange(0, n, 2))
    return ScenePair(c, g, tf, {"scene": 1})


class TestAugment:
    def test_half_turn(self):
        p = ScenePair(PointCloud([[0.5, -0.25, 0.3]], frame="normalized"),
                      PointCloud([[0.5, -0.25, 0.3]], frame="normalized"), NormTransform(0, 0, 0))
        out = apply_augmentation(p, 2)
        assert np.array_equal(out.complete.points, [[-0.5, 0.25, 0.3]])

    def test_identity(self, gen):
        p = small_pair(gen)
        out = apply_augmentation(p, 0, "none")
        assert np.array_equal(out.complete.points, p.complete.points)
        assert out.meta["augment"] == {"quarter_turns": 0, "flip": "none",
                                       "matrix": np.eye(3, dtype=int).tolist()}

    def test_quarter_turn_direction(self):
        assert np.array_equal(augmentation_matrix(1) @ [1, 0, 0], [0, 1, 0])

    def test_dihedral_group(self):
        mats = {augmentation_matrix(k, f).tobytes() for k in range(4) for f in ("none", "x", "y")}
        assert len(mats) == 8
        for k in range(4):
            for f in ("none", "x", "y"):
                M = augmentation_matrix(k, f)
                assert np.array_equal(M.T @ M, np.eye(3)) and M[2, 2] == 1

    @pytest.mark.parametrize("k,flip", [(k, f) for k in range(4) for f in ("none", "x", "y")])
    def test_matches_matrix_and_preserves_distances(self, gen, k, flip):
        p = small_pair(gen)
        out = apply_augmentation(p, k, flip)
        M = augmentation_matrix(k, flip)
        assert np.array_equal(out.complete.points, p.complete.points @ M.T)
        d0 = np.sum((p.complete.points[:, None] - p.complete.points[None]) ** 2, axis=2)
        d1 = np.sum((out.complete.points[:, None] - out.complete.points[None]) ** 2, axis=2)
        assert np.array_equal(np.sort(d0.ravel()), np.sort(d1.ravel()))
        assert chamfer(out.complete, out.gapped) == chamfer(p.complete, p.gapped)

    def test_same_transform_on_both(self, gen):
        p = small_pair(gen)
        for i in range(20):
            out = augment(p, SeededRng(i))
            assert np.array_equal(out.gapped.points, out.complete.points[::2])


def grid_centers(n=138, cols=23):
    return {i: (float(i % cols) * 10.0, float(i // cols) * 10.0) for i in range(n)}


class TestSplits:
    def test_all_in_train(self):
        spec = SplitSpec((SplitRegion("train", polygon=[(-5, -5), (500, -5), (500, 500), (-5, 500)]),))
        m = split_geographic(grid_centers(), spec, SeededRng(0))
        assert m.splits["test"] == [] and len(m.splits["train"]) == 138

    def test_halfplane_test_region(self):
        spec = SplitSpec((SplitRegion("test", halfplane={"normal": [1, 0], "offset": 45.0}),))
        centers = grid_centers()
        m = split_geographic(centers, spec, SeededRng(0))
        assert all(centers[i][0] >= 45.0 for i in m.splits["train"])
        assert all(centers[i][0] <= 45.0 for i in m.splits["test"])

    def test_scaled_counts(self):
        centers = {i: (float(i), 0.0) for i in range(138)}
        spec = SplitSpec((SplitRegion("test", halfplane={"normal": [1, 0], "offset": 24.5}),),
                         val_count=3)
        m = split_geographic(centers, spec, SeededRng(0).child("split"))
        assert m.counts == {"train": 110, "test": 25, "val": 3}
        ids = [set(m.splits[k]) for k in ("train", "test", "val")]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert set().union(*ids) == set(range(138))

    def test_val_draw_is_seeded(self):
        centers = {i: (float(i), 0.0) for i in range(50)}
        spec = SplitSpec((), val_count=5)
        a = split_geographic(centers, spec, SeededRng(1))
        b = split_geographic(centers, spec, SeededRng(1))
        assert a.splits == b.splits

    def test_overlap_rejected(self):
        sq = [(0, 0), (10, 0), (10, 10), (0, 10)]
        with pytest.raises(ValueError, match="overlap"):
            SplitSpec((SplitRegion("train", polygon=sq),
                       SplitRegion("test", halfplane={"normal": [1, 0], "offset": 5.0})))

    def test_touching_regions_allowed(self):
        SplitSpec((SplitRegion("train", halfplane={"normal": [1, 0], "offset": 5.0}),
                   SplitRegion("test", halfplane={"normal": [-1, 0], "offset": -5.0})))

    def test_region_validation(self):
        with pytest.raises(ValueError):
            SplitRegion("holdout", halfplane={"normal": [1, 0], "offset": 0})
        with pytest.raises(ValueError):
            SplitRegion("test", polygon=[(0, 0), (4, 0), (1, 1), (0, 4)])

    def test_spec_json_round_trip(self):
        spec = SplitSpec((SplitRegion("test", polygon=[(0, 0), (1, 0), (1, 1)]),
                          SplitRegion("val", halfplane={"normal": [0, 1], "offset": -3.0})), 2)
        assert SplitSpec.from_json(json.loads(json.dumps(spec.to_json()))).to_json() == spec.to_json()


def small_dataset(gen, n=5):
    pairs = {}
    for sid in range(n):
        c = PointCloud(gen.uniform(-1, 1, (300, 3)).astype(np.float32).astype(np.float64),
                       frame="normalized")
        pairs[sid] = ScenePair(c, c.subset(np.arange(0, 300, 3)),
                               NormTransform(sid * 10.0, 1.5, 2.25), {"seed_path": f"0/{sid}"})
    manifest = DatasetManifest({"train": [0, 1, 2], "test": [3], "val": [4]}, {}, 7,
                               {"train": 3, "test": 1, "val": 1})
    return pairs, manifest


class TestStorage:
    def test_round_trip(self, tmp_path, gen):
        pairs, manifest = small_dataset(gen)
        write_dataset(pairs, manifest, tmp_path)
        back, m = read_dataset(tmp_path)
        assert m.splits == manifest.splits and m.seed == 7
        for sid, p in pairs.items():
            assert np.array_equal(back[sid].complete.points, p.complete.points)
            assert np.array_equal(back[sid].gapped.points, p.gapped.points)
            assert back[sid].transform == p.transform
            assert back[sid].complete.frame == "normalized"

    def test_count_mismatch(self, tmp_path, gen):
        pairs, manifest = small_dataset(gen)
        write_dataset(pairs, manifest, tmp_path)
        doc = json.loads((tmp_path / "manifest.json").read_text())
        doc["counts"]["train"] = 4
        (tmp_path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(CorruptionError):
            read_dataset(tmp_path)

    def test_missing_meta_names_scene(self, tmp_path, gen):
        pairs, manifest = small_dataset(gen)
        write_dataset(pairs, manifest, tmp_path)
        (tmp_path / "scene0003_meta.json").unlink()
        with pytest.raises(CorruptionError, match="scene 3"):
            read_dataset(tmp_path)

    def test_checksum_mismatch(self, tmp_path, gen):
        pairs, manifest = small_dataset(gen)
        write_dataset(pairs, manifest, tmp_path)
        f = tmp_path / "scene0001_gap.ply"
        blob = bytearray(f.read_bytes())
        blob[-1] ^= 1
        f.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError, match="checksum"):
            read_dataset(tmp_path)
        read_dataset(tmp_path, verify=False)

    def test_ids_must_match_manifest(self, tmp_path, gen):
        pairs, manifest = small_dataset(gen)
        del pairs[4]
        with pytest.raises(ValueError):
            write_dataset(pairs, manifest, tmp_path)

    def test_overlapping_manifest(self):
        with pytest.raises(ValueError):
            DatasetManifest({"train": [1, 2], "test": [2]}, {}, 0, {})
