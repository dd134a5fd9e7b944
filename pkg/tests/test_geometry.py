import numpy as np
import pytest

from gradsdf.geometry import (ColorFrame, DepthFrame, Intrinsics, Pose,
                              backproject, bilinear_gradient_batch,
                              bilinear_sample, project, se3_exp)

INTR = Intrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def random_twist(rng, scale=1.0):
    xi = rng.uniform(-1.0, 1.0, size=6)
    return xi / max(np.linalg.norm(xi), 1e-9) * rng.uniform(0.0, scale)


class TestPose:
    def test_identity_roundtrip(self):
        p = Pose.identity()
        assert np.allclose(p.apply([1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])

    def test_compose_inverse_is_identity(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            pose = se3_exp(random_twist(rng))
            ident = pose.compose(pose.inverse())
            assert np.allclose(ident.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(ident.translation, 0.0, atol=1e-9)

    def test_rotation_orthonormal(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pose = se3_exp(random_twist(rng))
            assert np.allclose(pose.rotation.T @ pose.rotation, np.eye(3), atol=1e-9)
            assert abs(np.linalg.det(pose.rotation) - 1.0) < 1e-9

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 2.0, np.zeros(3))

    def test_apply_inverse_matches(self):
        rng = np.random.default_rng(2)
        pose = se3_exp(random_twist(rng))
        pts = rng.normal(size=(10, 3))
        assert np.allclose(pose.apply_inverse(pose.apply(pts)), pts, atol=1e-12)


class TestSe3Exp:
    def test_zero_twist_is_identity(self):
        p = se3_exp(np.zeros(6))
        assert np.allclose(p.rotation, np.eye(3))
        assert np.allclose(p.translation, 0.0)

    def test_pure_translation(self):
        p = se3_exp([1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
        assert np.allclose(p.rotation, np.eye(3))
        assert np.allclose(p.translation, [1.0, 2.0, 3.0])

    def test_half_turn_about_z(self):
        p = se3_exp([0.0, 0.0, 0.0, 0.0, 0.0, np.pi])
        assert np.allclose(p.apply([1.0, 0.0, 0.0]), [-1.0, 0.0, 0.0], atol=1e-9)

    def test_exp_of_negated_twist_inverts(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            xi = random_twist(rng)
            ident = se3_exp(xi).compose(se3_exp(-xi))
            assert np.allclose(ident.matrix(), np.eye(4), atol=1e-9)

    def test_small_angle_branch_continuous(self):
        xi = np.array([0.1, -0.2, 0.3, 1e-9, -1e-9, 1e-9])
        xi2 = np.array([0.1, -0.2, 0.3, 2e-8, -2e-8, 2e-8])
        assert np.allclose(se3_exp(xi).matrix(), se3_exp(xi2).matrix(), atol=1e-7)


class TestProjection:
    def test_on_axis_point_maps_to_principal_point(self):
        assert np.allclose(project(INTR, [0.0, 0.0, 1.0]), [320.0, 240.0])

    def test_pinhole_formula(self):
        assert np.allclose(project(INTR, [0.1, 0.0, 1.0]), [370.0, 240.0])

    def test_behind_camera_raises(self):
        with pytest.raises(ValueError, match="behind camera"):
            project(INTR, [0.0, 0.0, -1.0])

    def test_backproject_principal_ray(self):
        assert np.allclose(backproject(INTR, [320.0, 240.0], 2.0), [0.0, 0.0, 2.0])

    def test_backproject_inverse_example(self):
        assert np.allclose(backproject(INTR, [370.0, 240.0], 1.0), [0.1, 0.0, 1.0])

    def test_backproject_invalid_depth(self):
        with pytest.raises(ValueError, match="depth"):
            backproject(INTR, [320.0, 240.0], 0.0)

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            uv = rng.uniform([0, 0], [639, 479])
            d = rng.uniform(0.2, 5.0)
            assert np.allclose(project(INTR, backproject(INTR, uv, d)), uv, atol=1e-9)


class TestBilinear:
    def _frame(self, image):
        img = np.asarray(image, dtype=float)
        h, w = img.shape
        intr = Intrinsics(fx=100.0, fy=100.0, cx=w / 2.0 - 0.5, cy=h / 2.0 - 0.5,
                          width=w, height=h)
        return ColorFrame(np.repeat(img[..., None], 3, axis=2), intr)

    def test_integer_pixel_returns_value(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(size=(8, 10))
        frame = self._frame(img)
        for _ in range(20):
            v = rng.integers(0, 8)
            u = rng.integers(0, 10)
            val, _ = bilinear_sample(frame, [u, v], channel=0)
            assert abs(val - img[v, u]) < 1e-12

    def test_midpoint_average(self):
        img = np.zeros((4, 4))
        img[1, 1] = 0.2
        img[1, 2] = 0.4
        val, _ = bilinear_sample(self._frame(img), [1.5, 1.0], channel=1)
        assert abs(val - 0.3) < 1e-12

    def test_outside_image_raises(self):
        with pytest.raises(ValueError, match="outside image"):
            bilinear_sample(self._frame(np.zeros((6, 6))), [-1.0, 5.0], channel=0)

    def test_constant_image_constant_value_zero_gradient(self):
        img = np.full((7, 9), 0.37)
        rng = np.random.default_rng(6)
        for _ in range(30):
            uv = rng.uniform([0, 0], [8, 6])
            val, grad = bilinear_sample(self._frame(img), uv, channel=2)
            assert abs(val - 0.37) < 1e-12
            assert np.all(np.abs(grad) < 1e-12)

    def test_linear_image_exact_values_and_slope(self):
        u = np.arange(12, dtype=float)
        img = np.tile(0.05 * u, (9, 1))
        rng = np.random.default_rng(7)
        for _ in range(30):
            uv = rng.uniform([0, 0], [11, 8])
            val, grad = bilinear_sample(self._frame(img), uv, channel=0)
            assert abs(val - 0.05 * uv[0]) < 1e-9
            assert abs(grad[0] - 0.05) < 1e-9
            assert abs(grad[1]) < 1e-9

    def test_batch_marks_out_of_bounds(self):
        img = np.zeros((5, 5))
        vals, grads, valid = bilinear_gradient_batch(
            img, [[2.0, 2.0], [-0.1, 2.0], [2.0, 4.5]])
        assert valid.tolist() == [True, False, False]


class TestFrames:
    def test_depth_frame_rejects_negative(self):
        with pytest.raises(ValueError):
            DepthFrame(np.full((480, 640), -1.0), INTR)

    def test_depth_frame_accepts_invalid_markers(self):
        z = np.zeros((480, 640))
        z[0, 0] = np.nan
        frame = DepthFrame(z, INTR)
        assert not frame.valid_mask().any()

    def test_color_frame_range_check(self):
        with pytest.raises(ValueError):
            ColorFrame(np.full((480, 640, 3), 1.5), INTR)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1.0, fy=500.0, cx=320, cy=240, width=640, height=480)
        with pytest.raises(ValueError):
            Intrinsics(fx=500.0, fy=500.0, cx=700, cy=240, width=640, height=480)
