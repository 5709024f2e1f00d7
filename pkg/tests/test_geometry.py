import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat.geometry import (
    ParametricMesh,
    SimilarityTransform,
    apply_transform,
    camera_from_orbit,
    load_blendshapes,
    load_mesh,
    mesh_eval,
    project,
    rodrigues_exp,
    rodrigues_exp_batch,
    rodrigues_jacobian,
    rotate_about_vertical,
    rotation_to_vector,
    rotation_vjp_batch,
    save_mesh,
    skew,
    to_matrix,
    transform_backward,
    triangle_frames,
    triangle_frames_backward,
)

from conftest import central_diff, rel_err
from helpers import quaternion_rotation

vec3 = st.lists(st.floats(-1.8, 1.8), min_size=3, max_size=3).map(np.array)


class TestRodrigues:
    def test_zero_is_identity(self):
        assert np.array_equal(rodrigues_exp([0.0, 0.0, 0.0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = rodrigues_exp([0, 0, np.pi / 2])
        np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_matches_quaternion_oracle(self):
        r = np.array([0.3, -0.1, 0.2])
        R = rodrigues_exp(r)
        np.testing.assert_allclose(R, quaternion_rotation(r), atol=1e-14)
        np.testing.assert_allclose(R.T, rodrigues_exp(-r), atol=1e-14)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            rodrigues_exp([np.nan, 0, 0])

    def test_small_angle_branch_is_continuous(self):
        for theta in [0.0, 1e-9, 5e-5, 9.99e-5, 1.01e-4, 1e-3]:
            r = theta * np.array([0.6, -0.8, 0.0])
            np.testing.assert_allclose(rodrigues_exp(r), quaternion_rotation(r), atol=1e-15)

    @given(vec3, vec3)
    @settings(max_examples=100, deadline=None)
    def test_orthonormal_and_isometric(self, r, v):
        R = rodrigues_exp(r)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(R @ rodrigues_exp(-r), np.eye(3), atol=1e-9)
        assert np.linalg.norm(R @ v) == pytest.approx(np.linalg.norm(v), abs=1e-9)

    def test_batch_matches_scalar(self, rng):
        rs = rng.normal(size=(20, 3))
        rs[0] = 0.0
        rs[1] = 1e-6
        out = rodrigues_exp_batch(rs)
        for r, R in zip(rs, out):
            np.testing.assert_allclose(R, rodrigues_exp(r), atol=1e-15)

    def test_log_map_round_trip(self, rng):
        for _ in range(20):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 3.0) / np.linalg.norm(r)
            np.testing.assert_allclose(rotation_to_vector(rodrigues_exp(r)), r, atol=1e-9)


class TestRodriguesJacobian:
    def test_identity_is_negative_skew(self):
        J = rodrigues_jacobian([0, 0, 0], [1, 0, 0])
        np.testing.assert_array_equal(J, [[0, 0, 0], [0, 0, 1], [0, -1, 0]])

    @pytest.mark.parametrize("r,v", [((0, 0, 0.5), (1, 0, 0)), ((0.2, 0.3, -0.1), (0, 1, 0))])
    def test_named_cases_match_finite_differences(self, r, v):
        r = np.array(r, float)
        v = np.array(v, float)
        fd = central_diff(lambda: rodrigues_exp(r) @ v, r, h=1e-5).T
        assert rel_err(rodrigues_jacobian(r, v), fd) < 1e-5

    def test_random_cases_match_finite_differences(self, rng):
        for _ in range(100):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 3.0) / np.linalg.norm(r)
            v = rng.normal(size=3)
            fd = central_diff(lambda: rodrigues_exp(r) @ v, r, h=1e-5).T
            assert rel_err(rodrigues_jacobian(r, v), fd) < 1e-5

    def test_near_identity(self):
        r = np.array([3e-5, -2e-5, 1e-5])
        v = np.array([0.3, 1.0, -0.5])
        fd = central_diff(lambda: rodrigues_exp(r) @ v, r, h=1e-7).T
        assert rel_err(rodrigues_jacobian(r, v), fd) < 1e-6

    def test_batch_vjp_matches_jacobian(self, rng):
        rs = rng.normal(size=(10, 3))
        rs[0] = 0
        g = rng.normal(size=(10, 3, 3))
        out = rotation_vjp_batch(rs, g)
        for r, gi, oi in zip(rs, g, out):
            expected = sum(rodrigues_jacobian(r, e).T @ gi[:, c] for c, e in enumerate(np.eye(3)))
            np.testing.assert_allclose(oi, expected, atol=1e-12)


class TestSimilarityTransform:
    def test_identity(self):
        assert np.array_equal(to_matrix(SimilarityTransform.identity()), np.eye(4))

    def test_scale_and_shift(self):
        T = to_matrix(SimilarityTransform([2, 2, 2], [0, 0, 0], [1, 0, 0]))
        expected = np.diag([2.0, 2.0, 2.0, 1.0])
        expected[0, 3] = 1.0
        np.testing.assert_array_equal(T, expected)

    def test_half_turn_about_y(self):
        T = to_matrix(SimilarityTransform([1, 1, 1], [0, np.pi, 0], [0, 0, 0]))
        np.testing.assert_allclose(apply_transform(T, np.array([[1.0, 0, 1]])), [[-1, 0, -1]], atol=1e-15)

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValueError):
            to_matrix(SimilarityTransform([1, 0, 1], [0, 0, 0], [0, 0, 0]))

    def test_bottom_row(self, rng):
        T = to_matrix(SimilarityTransform(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3)))
        assert np.array_equal(T[3], [0, 0, 0, 1])

    def test_scale_recovered_from_column_norms(self, rng):
        for _ in range(20):
            s = rng.uniform(0.1, 3.0, 3)
            T = to_matrix(SimilarityTransform(s, rng.normal(size=3), rng.normal(size=3)))
            np.testing.assert_allclose(np.linalg.norm(T[:3, :3], axis=0), s, atol=1e-9)

    def test_apply_identity_exact_and_translation(self, rng):
        V = rng.normal(size=(10, 3))
        assert np.array_equal(apply_transform(np.eye(4), V), V)
        T = np.eye(4)
        T[:3, 3] = [0.5, -1.0, 2.0]
        np.testing.assert_allclose(apply_transform(T, V), V + [0.5, -1.0, 2.0], atol=1e-15)

    def test_composition(self, rng):
        V = rng.normal(size=(15, 3))
        T1 = to_matrix(SimilarityTransform(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3)))
        T2 = to_matrix(SimilarityTransform(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3)))
        np.testing.assert_allclose(apply_transform(T1 @ T2, V), apply_transform(T1, apply_transform(T2, V)), atol=1e-12)

    def test_backward_matches_finite_differences(self, rng):
        xf = SimilarityTransform(rng.uniform(0.5, 2, 3), rng.normal(size=3), rng.normal(size=3))
        V = rng.normal(size=(6, 3))
        G = rng.normal(size=(6, 3))

        def loss():
            return np.sum(G * apply_transform(to_matrix(xf), V))

        g_v, g_s, g_r, g_t = transform_backward(xf, V, G)
        assert rel_err(g_s, central_diff(loss, xf.s)) < 1e-7
        assert rel_err(g_r, central_diff(loss, xf.r)) < 1e-7
        assert rel_err(g_t, central_diff(loss, xf.t)) < 1e-7
        assert rel_err(g_v, central_diff(loss, V)) < 1e-7


def _toy_mesh(rng, k=3):
    base = rng.normal(size=(5, 3))
    return ParametricMesh(base, rng.normal(size=(k, 5, 3)), np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]]))


class TestMesh:
    def test_zero_params_gives_base(self, rng):
        mesh = _toy_mesh(rng)
        assert np.array_equal(mesh_eval(mesh, np.zeros(3)), mesh.base_vertices)

    def test_unit_vector_adds_one_shape(self, rng):
        mesh = _toy_mesh(rng)
        np.testing.assert_allclose(mesh_eval(mesh, [0, 1.0, 0]), mesh.base_vertices + mesh.blendshapes[1], atol=1e-15)

    def test_linear_combination(self, rng):
        mesh = _toy_mesh(rng)
        p1, p2 = rng.normal(size=3), rng.normal(size=3)
        a, b = 0.7, -1.3
        disp = lambda p: mesh_eval(mesh, p) - mesh.base_vertices  # noqa: E731
        np.testing.assert_allclose(disp(a * p1 + b * p2), a * disp(p1) + b * disp(p2), atol=1e-12)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            mesh_eval(_toy_mesh(rng), np.zeros(4))

    def test_rejects_bad_indices(self):
        with pytest.raises(ValueError):
            ParametricMesh(np.zeros((3, 3)), None, np.array([[0, 1, 3]]))

    def test_file_round_trip(self, rng, tmp_path):
        mesh = _toy_mesh(rng)
        save_mesh(mesh, tmp_path / "m.obj", tmp_path / "m.blend")
        back = load_mesh(tmp_path / "m.obj", tmp_path / "m.blend")
        assert np.array_equal(back.base_vertices, mesh.base_vertices)
        assert np.array_equal(back.blendshapes, mesh.blendshapes)
        assert np.array_equal(back.triangles, mesh.triangles)
        assert (tmp_path / "m.blend").read_text().splitlines()[0] == "blendshapes 3 5"

    def test_blendshape_header_checked(self, tmp_path):
        p = tmp_path / "bad.txt"
        p.write_text("blendshapes 2 2\n0 0 0\n")
        with pytest.raises(ValueError):
            load_blendshapes(p)


class TestTriangleFrames:
    def test_unit_right_triangle(self):
        V = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        fr = triangle_frames(V, np.array([[0, 1, 2]]))
        np.testing.assert_allclose(fr.centers[0], [1 / 3, 1 / 3, 0])
        np.testing.assert_allclose(fr.rotations[0][:, 1], [0, 0, 1])
        assert fr.scales[0] == pytest.approx(np.sqrt(0.5))
        np.testing.assert_allclose(fr.rotations[0].T @ fr.rotations[0], np.eye(3), atol=1e-15)

    def test_rigid_equivariance(self, rng):
        V = rng.normal(size=(5, 3))
        tris = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
        R = rodrigues_exp(rng.normal(size=3))
        t = rng.normal(size=3)
        a = triangle_frames(V, tris)
        b = triangle_frames(V @ R.T + t, tris)
        np.testing.assert_allclose(b.rotations, R @ a.rotations, atol=1e-9)
        np.testing.assert_allclose(b.centers, a.centers @ R.T + t, atol=1e-9)
        np.testing.assert_allclose(b.scales, a.scales, atol=1e-12)

    def test_uniform_scale(self, rng):
        V = rng.normal(size=(5, 3))
        tris = np.array([[0, 1, 2], [1, 3, 2]])
        a, b = triangle_frames(V, tris), triangle_frames(2 * V, tris)
        np.testing.assert_allclose(b.scales, 2 * a.scales)
        np.testing.assert_allclose(b.rotations, a.rotations, atol=1e-14)

    def test_degenerate_flagged(self):
        V = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]])
        fr = triangle_frames(V, np.array([[0, 1, 2], [0, 1, 3]]))
        assert fr.degenerate.tolist() == [True, False]
        assert np.array_equal(fr.rotations[0], np.eye(3))

    def test_backward_matches_finite_differences(self, rng):
        V = rng.normal(size=(5, 3))
        tris = np.array([[0, 1, 2], [1, 3, 2], [2, 3, 4]])
        gc, gr, gs = rng.normal(size=(3, 3)), rng.normal(size=(3, 3, 3)), rng.normal(size=3)

        def loss():
            fr = triangle_frames(V, tris)
            return np.sum(gc * fr.centers) + np.sum(gr * fr.rotations) + np.sum(gs * fr.scales)

        fr = triangle_frames(V, tris)
        g = triangle_frames_backward(V, tris, fr, gc, gr, gs)
        assert rel_err(g, central_diff(loss, V, h=1e-6)) < 1e-7


class TestCamera:
    @pytest.mark.parametrize("az,offset", [(0, (0, 0, 4)), (180, (0, 0, -4)), (90, (4, 0, 0))])
    def test_orbit_anchors(self, az, offset):
        cam = camera_from_orbit(az, 0, 4.0, target=(0.1, 0.2, 0.3))
        np.testing.assert_allclose(cam.position, np.add(offset, [0.1, 0.2, 0.3]), atol=1e-12)

    def test_view_rotation_orthonormal(self):
        for az, el in [(0, 0), (37, 20), (200, -45), (90, 89.9), (10, 90)]:
            R = camera_from_orbit(az, el, 3.0).rotation
            np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(R) == pytest.approx(1.0)

    def test_rejects_bad_radius(self):
        with pytest.raises(ValueError):
            camera_from_orbit(0, 0, 0.0)

    def test_target_projects_to_centre(self):
        cam = camera_from_orbit(123, 17, 3.5, target=(0.2, -0.1, 0.4), focal=200, resolution=(96, 64))
        u, v, depth, ok = project(cam, cam.target)
        assert ok
        assert (u, v) == pytest.approx((48.0, 32.0))
        assert depth == pytest.approx(3.5)

    def test_offset_along_right(self):
        cam = camera_from_orbit(40, 10, 4.0, focal=150, resolution=(128, 128))
        p = cam.target + 0.1 * cam.rotation[0]
        u, v, depth, _ = project(cam, p)
        assert u == pytest.approx(64 + 150 * 0.1 / 4.0)
        assert v == pytest.approx(64.0)

    def test_behind_camera_flagged(self):
        cam = camera_from_orbit(0, 0, 4.0)
        assert project(cam, [0, 0, 5.0])[3] is False

    def test_orbit_scene_duality(self, rng):
        for _ in range(20):
            alpha = rng.uniform(0, 360)
            p = rng.normal(scale=0.5, size=3)
            a = project(camera_from_orbit(alpha, 15, 4.0), p)
            b = project(camera_from_orbit(0, 15, 4.0), rotate_about_vertical(-alpha) @ p)
            assert abs(a[0] - b[0]) < 1e-6 and abs(a[1] - b[1]) < 1e-6

    def test_skew(self, rng):
        a, b = rng.normal(size=3), rng.normal(size=3)
        np.testing.assert_allclose(skew(a) @ b, np.cross(a, b))
