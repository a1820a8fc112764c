import numpy as np
import pytest

from occlusynth.config import PipelineConfig
from occlusynth.pipeline import boundaries_from, preprocess_strip
from occlusynth.rng import SeededRng
from occlusynth.synthetic import StreetParams, build_street, random_street, scan_street


@pytest.fixture(scope="module")
def street():
    params = StreetParams(length=30.0, col_spacing=0.2)
    return params, scan_street(build_street(params))


def test_strip_shape_and_heads(street):
    params, strip = street
    assert strip.shape == (3000, 150)
    assert np.all(strip.h[..., 1] == params.head_y)
    assert np.all(strip.h[..., 2] == params.sensor_height)
    # every return of a column shares the column's x
    same_x = np.where(strip.valid, strip.p[..., 0] - strip.h[..., 0], 0.0)
    assert np.all(same_x == 0.0)


def test_hits_lie_on_box_surfaces(street):
    params, strip = street
    pts = strip.p[strip.valid]
    road = (pts[:, 1] > -params.road_width + 1e-6) & (pts[:, 1] < -1e-6) & (pts[:, 2] < 0.05)
    assert road.sum() > 1000
    assert np.all(np.abs(pts[road, 2]) < 1e-9)
    face = np.abs(pts[:, 1]) < 1e-9
    assert face.sum() > 0
    assert np.all((pts[face, 2] >= -1e-9) & (pts[face, 2] <= params.curb_height + 1e-9))


def test_straight_down_ray(street):
    params, strip = street
    # the row whose angle is closest to -90 degrees looks at the road below the head
    row = int(np.argmin(np.abs(2 * np.pi * (np.arange(3000) + 0.5) / 3000 - 1.5 * np.pi)))
    p = strip.p[row, 0]
    assert p[2] == pytest.approx(0.0, abs=1e-9)
    assert p[1] == pytest.approx(params.head_y, abs=0.01)


def test_slope_shifts_heights():
    params = StreetParams(length=10.0, col_spacing=0.5, slope=0.02, x0=100.0)
    strip = scan_street(build_street(params))
    gz = 0.02 * strip.h[0, :, 0]
    assert np.allclose(strip.h[0, :, 2], gz + 2.75)


def test_noise_needs_rng_and_is_deterministic():
    params = StreetParams(length=5.0, noise=0.003)
    scene = build_street(params)
    with pytest.raises(ValueError):
        scan_street(scene)
    a = scan_street(scene, SeededRng(1))
    b = scan_street(scene, SeededRng(1))
    assert np.array_equal(a.p, b.p, equal_nan=True)


def test_ground_truth_curb_lines():
    lines = build_street(StreetParams(length=30.0, driveways=((12.0, 16.0),))).curb_lines()
    assert len(lines) == 3
    assert lines[0][1, 0] == 12.0 and lines[1][0, 0] == 16.0


def test_curbs_found_where_built():
    params = StreetParams(length=30.0, col_spacing=0.15)
    cfg = PipelineConfig()
    strip, cloud = preprocess_strip(scan_street(build_street(params)), cfg)
    polys = boundaries_from(strip, cloud, cfg)
    assert len(polys) == 2
    found = sorted(float(np.median(p.vertices[:, 1])) for p in polys)
    assert found == pytest.approx([-params.road_width, 0.0], abs=0.05)
    for p in polys:
        assert p.vertices[:, 0].min() < 0.5 and p.vertices[:, 0].max() > 29.5


def test_random_street_ranges():
    for k in range(20):
        p = random_street(SeededRng(k))
        assert 6 <= p.road_width <= 8 and 0.10 <= p.curb_height <= 0.18
        assert abs(p.head_y) + p.sidewalk_width < 15.0
