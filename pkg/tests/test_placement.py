from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occlusynth.boundary import ParkingCandidate
from occlusynth.errors import EmptyInputError, FormatError, NoReliableGroundError
from occlusynth.placement import (GroundPlane, ModeProbabilities, TriangleMesh, VehicleDims,
                                  VehiclePose, canonicalize_vehicle, choose_model, clean_mesh,
                                  fit_ground_plane, load_dims_table, load_mesh, load_model_dir,
                                  place_vehicle, plan_location, pose_vehicle, procedural_car,
                                  save_obj)
from occlusynth.rng import SeededRng

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


def box_mesh(lx, ly, lz):
    v = np.array([[x, y, z] for z in (0, lz) for y in (0, ly) for x in (0, lx)], float)
    t = [[0, 3, 1], [0, 2, 3], [4, 5, 7], [4, 7, 6], [0, 1, 5], [0, 5, 4],
         [1, 3, 7], [1, 7, 5], [3, 2, 6], [3, 6, 7], [2, 0, 4], [2, 4, 6]]
    return TriangleMesh(v, np.array(t))


def edge_counts(mesh):
    c = Counter()
    for a, b, d in mesh.triangles:
        for e in ((a, b), (b, d), (d, a)):
            c[tuple(sorted(e))] += 1
    return c


def plane_points(gen, n, normal, d, half=2.0, center=(0.0, 0.0)):
    normal = np.asarray(normal, float) / np.linalg.norm(normal)
    xy = gen.uniform(-half, half, (n, 2)) + center
    z = (d - xy @ normal[:2]) / normal[2]
    return np.column_stack([xy, z])


def tilt(deg):
    a = np.radians(deg)
    return np.array([np.sin(a), 0.0, np.cos(a)])


def candidate(anchor=(0.0, 0.0), direction=(1.0, 0.0), side=(0.0, 1.0)):
    return ParkingCandidate(np.array(anchor), np.array(direction), np.array(side), 0, 5.0)


class TestMeshIO:
    def test_cube(self, tmp_path):
        (tmp_path / "c.obj").write_text(CUBE_OBJ)
        m = load_mesh(tmp_path / "c.obj")
        assert (len(m.vertices), len(m.triangles)) == (8, 12)
        assert all(v == 2 for v in edge_counts(m).values())

    def test_quad_rejected(self, tmp_path):
        (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        with pytest.raises(FormatError, match="triangulate"):
            load_mesh(tmp_path / "q.obj")

    def test_duplicates_merged_and_degenerates_dropped(self, tmp_path):
        text = CUBE_OBJ.replace("f 1 3 2\n", "f 9 3 2\nf 1 1 2\n") + "v 0 0 1e-12\n"
        (tmp_path / "d.obj").write_text(text.replace("v 0 0 0\n", "v 0 0 0\n", 1))
        m = load_mesh(tmp_path / "d.obj")
        assert (len(m.vertices), len(m.triangles)) == (8, 12)

    def test_slash_and_negative_indices(self, tmp_path):
        (tmp_path / "s.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 -1//1\n")
        m = load_mesh(tmp_path / "s.obj")
        assert len(m.triangles) == 1

    def test_empty(self, tmp_path):
        (tmp_path / "e.obj").write_text("# nothing\n")
        with pytest.raises(EmptyInputError):
            load_mesh(tmp_path / "e.obj")
        with pytest.raises(EmptyInputError):
            clean_mesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))

    def test_obj_round_trip(self, tmp_path):
        m = procedural_car()
        save_obj(tmp_path / "car.obj", m)
        back = load_mesh(tmp_path / "car.obj")
        assert np.array_equal(back.vertices, m.vertices)
        assert np.array_equal(back.triangles, m.triangles)


class TestCanonicalize:
    def test_box_scaled(self):
        m = canonicalize_vehicle(box_mesh(2.0, 1.0, 0.8), VehicleDims(4.5, 1.8, 1.5))
        lo, hi = m.bounds()
        assert np.allclose(hi - lo, [4.5, 2.25, 1.8], atol=1e-12)
        assert lo[2] == 0.0
        assert np.allclose((lo + hi)[:2], 0.0, atol=1e-12)

    def test_axes_permuted(self):
        # long axis along z, short along x
        m = canonicalize_vehicle(box_mesh(0.8, 1.0, 2.0))
        lo, hi = m.bounds()
        assert np.allclose(hi - lo, [4.5, 2.25, 1.8], atol=1e-12)

    def test_idempotent(self):
        once = canonicalize_vehicle(box_mesh(2.0, 1.0, 0.8))
        twice = canonicalize_vehicle(once)
        assert np.max(np.abs(once.vertices - twice.vertices)) < 1e-12

    def test_cube_is_ambiguous(self):
        with pytest.raises(ValueError, match="ambiguous"):
            canonicalize_vehicle(box_mesh(1.0, 1.0, 1.0))

    def test_hints_resolve_ambiguity(self):
        m = canonicalize_vehicle(box_mesh(1.0, 1.0, 1.0), forward_axis=0, up_axis=2)
        lo, hi = m.bounds()
        assert np.allclose(hi - lo, 4.5)

    def test_rotation_is_proper(self):
        # an asymmetric marker vertex must not be mirrored
        m = box_mesh(2.0, 1.0, 0.8)
        v = np.vstack([m.vertices, [[2.0, 0.0, 0.8]]])
        c = canonicalize_vehicle(TriangleMesh(v, np.vstack([m.triangles, [[8, 5, 6]]])))
        tri = c.corners
        n0 = np.cross(m.corners[:, 1] - m.corners[:, 0], m.corners[:, 2] - m.corners[:, 0])
        n1 = np.cross(tri[:12, 1] - tri[:12, 0], tri[:12, 2] - tri[:12, 0])
        # signed volume keeps its sign under a proper rotation
        vol0 = np.sum(np.einsum("ij,ij->i", m.corners[:, 0], n0))
        vol1 = np.sum(np.einsum("ij,ij->i", tri[:12, 0], n1))
        assert np.sign(vol0) == np.sign(vol1)


class TestGroundPlane:
    def test_flat_with_outliers(self, gen):
        pts = plane_points(gen, 900, [0, 0, 1], 5.0)
        out = np.column_stack([gen.uniform(-2, 2, (100, 2)), gen.uniform(3, 8, 100)])
        gp = fit_ground_plane(np.vstack([pts, out]), [0, 0, 5], rng=SeededRng(1))
        assert np.degrees(np.arccos(gp.normal[2])) < 0.5
        assert abs(gp.d - 5.0) < 0.01

    def test_inclined(self, gen):
        n = tilt(10.0)
        pts = plane_points(gen, 500, n, 1.0) + gen.normal(0, 0.005, (500, 3))
        gp = fit_ground_plane(pts, [0, 0, 0], rng=SeededRng(2))
        assert abs(np.degrees(np.arccos(gp.normal[2])) - 10.0) < 0.5

    def test_noiseless_exact(self, gen):
        n = tilt(7.0)
        pts = plane_points(gen, 300, n, 2.0)
        gp = fit_ground_plane(pts, [0, 0, 0], rng=SeededRng(3))
        assert np.max(np.abs(gp.distance(pts))) < 1e-12
        assert np.allclose(gp.normal, n, atol=1e-12)

    def test_seed_deterministic(self, gen):
        pts = np.vstack([plane_points(gen, 200, [0, 0, 1], 0.0),
                         np.column_stack([gen.uniform(-2, 2, (150, 2)), gen.uniform(0, 3, 150)])])
        a = fit_ground_plane(pts, [0, 0, 0], rng=SeededRng(4))
        b = fit_ground_plane(pts, [0, 0, 0], rng=SeededRng(4))
        assert np.array_equal(a.normal, b.normal) and a.d == b.d

    def test_too_few_points(self, gen):
        with pytest.raises(NoReliableGroundError, match="no reliable ground"):
            fit_ground_plane(plane_points(gen, 30, [0, 0, 1], 0.0), [0, 0, 0])

    def test_low_inlier_ratio(self, gen):
        pts = np.column_stack([gen.uniform(-2, 2, (200, 2)), gen.uniform(0, 5, 200)])
        with pytest.raises(NoReliableGroundError):
            fit_ground_plane(pts, [0, 0, 0])

    def test_radius_is_horizontal(self, gen):
        pts = plane_points(gen, 400, [0, 0, 1], 100.0, half=3.0)
        gp = fit_ground_plane(pts, [0, 0, 0], radius=2.0)
        assert gp.inliers == np.count_nonzero(np.hypot(pts[:, 0], pts[:, 1]) <= 2.0)


class TestPose:
    def flat(self, z=0.0):
        return GroundPlane(np.array([0.0, 0.0, 1.0]), z, 100, 0.0)

    def test_offset_arithmetic(self):
        pose = pose_vehicle(candidate(), self.flat(), procedural_car(), mode="on_road", offset=0.12)
        assert np.allclose(pose.translation, [0.0, -1.02, 0.0], atol=1e-15)
        assert np.allclose(pose.rotation, np.eye(3), atol=1e-15)
        assert pose.lateral_offset == 0.12

    def test_sloped_contact(self, gen):
        n = tilt(10.0)
        plane = GroundPlane(n, 0.7, 100, 0.0)
        car = procedural_car()
        for seed in range(10):
            pose = pose_vehicle(candidate(direction=(0.6, 0.8), side=(-0.8, 0.6)), plane, car,
                                rng=SeededRng(seed))
            posed = pose.apply(car)
            bottom = posed.vertices[car.vertices[:, 2] == 0.0]
            assert np.max(np.abs(plane.distance(bottom))) < 1e-3
            R = pose.rotation
            assert np.allclose(R.T @ R, np.eye(3), atol=1e-9) and abs(np.linalg.det(R) - 1) < 1e-9

    @given(st.integers(0, 10_000), st.floats(0, 2 * np.pi))
    def test_on_road_near_side_gap(self, seed, theta):
        d = np.array([np.cos(theta), np.sin(theta)])
        side = np.array([-d[1], d[0]])
        car = procedural_car()
        pose = pose_vehicle(candidate((3.0, -2.0), d, side), self.flat(), car,
                            rng=SeededRng(seed), mode="on_road")
        posed = pose.apply(car).vertices
        # signed distance toward the sidewalk; the body is on the road side
        s = (posed[:, :2] - [3.0, -2.0]) @ side
        gap = -s.max()
        assert -1e-9 <= gap < 0.3

    def test_sidewalk_share(self):
        car = procedural_car()
        for seed in range(20):
            pose = pose_vehicle(candidate(), self.flat(), car, rng=SeededRng(seed), mode="sidewalk")
            y = pose.apply(car).vertices[:, 1]
            share = y.max() / 1.8
            assert 0.25 - 1e-9 <= share <= 0.75 + 1e-9
            assert share == pytest.approx(pose.lateral_offset)

    def test_perpendicular(self):
        car = procedural_car()
        pose = pose_vehicle(candidate(), self.flat(), car, mode="perpendicular", offset=0.1)
        v = pose.apply(car).vertices
        assert np.allclose(pose.rotation[:, 0], [0, 1, 0], atol=1e-15)
        assert v[:, 1].max() == pytest.approx(-0.1)

    def test_mode_frequencies(self):
        modes = ModeProbabilities(0.5, 0.3, 0.2)
        got = Counter(plan_location(candidate(), VehicleDims(), SeededRng(0).child(i), modes).mode
                      for i in range(4000))
        for name, p in (("on_road", 0.5), ("sidewalk", 0.3), ("perpendicular", 0.2)):
            assert abs(got[name] / 4000 - p) < 3 * np.sqrt(p * (1 - p) / 4000)

    def test_deterministic_and_json(self, gen):
        pts = plane_points(gen, 600, [0, 0, 1], 0.0, half=4.0)
        car = procedural_car()
        a, _ = place_vehicle(candidate(), pts, car, rng=SeededRng(8), mesh_id="car")
        b, _ = place_vehicle(candidate(), pts, car, rng=SeededRng(8), mesh_id="car")
        assert np.array_equal(a.matrix, b.matrix) and a.mode == b.mode
        back = VehiclePose.from_json(a.to_json())
        assert np.array_equal(back.matrix, a.matrix) and back.mesh_id == "car"
        assert len(a.to_json()["matrix"]) == 16

    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            VehiclePose(np.diag([1.0, 1.0, -1.0]), np.zeros(3), "m", "on_road", 0.0)


class TestProceduralCar:
    def test_construction(self):
        m = procedural_car()
        lo, hi = m.bounds()
        assert np.array_equal(hi - lo, [4.5, 1.8, 1.5])
        assert len(m.triangles) == 24
        assert all(v == 2 for v in edge_counts(m).values())

    def test_custom_dims(self):
        lo, hi = procedural_car(VehicleDims(5.0, 2.0, 1.7), SeededRng(3)).bounds()
        assert np.allclose(hi - lo, [5.0, 2.0, 1.7], atol=1e-15)

    def test_dims_validation(self):
        with pytest.raises(ValueError):
            VehicleDims(1.0, 2.0, 1.0)


class TestModelDir:
    def test_dir_and_dims_table(self, tmp_path):
        save_obj(tmp_path / "b.obj", box_mesh(2.0, 1.0, 0.8))
        save_obj(tmp_path / "a.obj", box_mesh(4.0, 1.5, 1.2))
        (tmp_path / "dims.json").write_text('{"a.obj": {"length": 5.0, "width": 1.9, "height": 1.6}}')
        models = load_model_dir(tmp_path, load_dims_table(tmp_path / "dims.json"))
        assert list(models) == ["a.obj", "b.obj"]
        lo, hi = models["a.obj"][0].bounds()
        assert (hi - lo)[0] == pytest.approx(5.0)
        assert models["b.obj"][1] == VehicleDims()
        assert choose_model(list(models), SeededRng(1)) == choose_model(list(models)[::-1], SeededRng(1))

    def test_empty_dir(self, tmp_path):
        with pytest.raises(EmptyInputError):
            load_model_dir(tmp_path)
