import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import brute_nn_sq
from occlusynth.geom import PointCloud
from occlusynth.postprocess import GENERATED, MEASURED, MergeConfig, merge_completion


def cloud(pts, frame="world"):
    return PointCloud(np.asarray(pts, dtype=np.float64).reshape(-1, 3), frame=frame)


def test_full_overlap_returns_input(gen):
    m = cloud(gen.uniform(0, 5, (300, 3)))
    g = cloud(m.points[:100] + gen.uniform(-0.04, 0.04, (100, 3)))
    out = merge_completion(m, g)
    assert np.array_equal(out.points, m.points)
    assert np.all(out.extra["provenance"] == MEASURED)


def test_single_far_point_added():
    m = cloud([[0, 0, 0], [1, 0, 0]])
    out = merge_completion(m, cloud([[0.95, 0.05, 0.0], [0.0, 0.1, 0.0]]))
    # the first generated point is about 7 cm away, the second 10 cm
    assert out.points.tolist() == [[0, 0, 0], [1, 0, 0], [0.0, 0.1, 0.0]]
    assert out.extra["provenance"].tolist() == [MEASURED, MEASURED, GENERATED]


def test_threshold_distance_is_kept():
    m = cloud([[0.0, 0.0, 0.0]])
    out = merge_completion(m, cloud([[0.5, 0.0, 0.0]]), MergeConfig(0.5))
    assert len(out) == 2


def test_empty_inputs(gen):
    m = cloud(gen.normal(size=(10, 3)))
    assert np.array_equal(merge_completion(m, cloud(np.zeros((0, 3)))).points, m.points)
    g = cloud(gen.normal(size=(4, 3)))
    out = merge_completion(cloud(np.zeros((0, 3))), g)
    assert np.array_equal(out.points, g.points)


def test_frame_mismatch(gen):
    with pytest.raises(ValueError, match="frame"):
        merge_completion(cloud([[0, 0, 0]], "world"), cloud([[1, 0, 0]], "normalized"))
    with pytest.raises(ValueError):
        MergeConfig(0.0)


@given(st.integers(0, 2 ** 32 - 1), st.floats(0.01, 0.5))
def test_merge_properties(seed, threshold):
    gen = np.random.default_rng(seed)
    m = cloud(gen.uniform(0, 2, (int(gen.integers(1, 200)), 3)))
    g = cloud(gen.uniform(0, 2, (int(gen.integers(0, 200)), 3)))
    cfg = MergeConfig(threshold)
    out = merge_completion(m, g, cfg)
    n = len(m)
    assert np.array_equal(out.points[:n], m.points)
    added = out.points[n:]
    if len(added):
        assert np.all(np.sqrt(brute_nn_sq(added, m.points)) >= threshold)
    want = int(np.sum(np.sqrt(brute_nn_sq(g.points, m.points)) >= threshold)) if len(g) else 0
    assert len(added) == want
    again = merge_completion(out, g, cfg)
    assert np.array_equal(again.points, out.points)
    assert np.array_equal(again.extra["provenance"], out.extra["provenance"])
