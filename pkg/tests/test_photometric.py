import time

import numpy as np
import pytest

from gradsdf import (BaParams, ColorFrame, DepthFrame, FusionParams, Intrinsics,
                     Keyframe, Pose, estimate_normals, integrate_frame,
                     mean_voxel_color, optimize_distances, optimize_poses,
                     photometric_energy, project_voxel_surface_point, se3_exp,
                     select_keyframes)
from gradsdf.datasets import Trajectory, ate_rmse
from gradsdf.photometric import (ObservationTable, _pose_sweep_decoupled, bundle_adjust,
                                 gather_observations, surface_voxel_rows)
from gradsdf.synthetic import (SphereScene, look_at_pose, render_color_from_depth,
                               render_plane_depth, render_sphere_color,
                               render_sphere_depth)
from gradsdf.volume import GradientSdfVolume

from .conftest import oracle_fusion_params
from .oracles import analytic_sphere_volume

INTR = Intrinsics(fx=240.0, fy=240.0, cx=119.5, cy=89.5, width=240, height=180)

THREE_SPHERES = [(np.array([0.0, 0.0, 0.0]), 0.22),
                 (np.array([0.45, 0.1, -0.05]), 0.16),
                 (np.array([-0.15, 0.42, 0.12]), 0.13)]


def smooth_texture(points):
    p = np.asarray(points)
    r = 0.5 + 0.22 * np.sin(14.0 * p[:, 0] + 2.0) * np.cos(9.0 * p[:, 1] - 1.0)
    g = 0.5 + 0.22 * np.sin(11.0 * p[:, 1] - 1.0) * np.cos(13.0 * p[:, 2] + 0.7)
    b = 0.5 + 0.22 * np.sin(12.0 * p[:, 2] + 0.5) * np.cos(10.0 * p[:, 0] + 1.9)
    return np.stack([r, g, b], axis=1)


def linear_texture(points):
    """Affine in world coordinates, so fronto-parallel views are exactly bilinear."""
    p = np.asarray(points)
    r = 0.5 + 0.8 * p[:, 0] + 0.3 * p[:, 1]
    g = 0.5 - 0.5 * p[:, 0] + 0.7 * p[:, 1]
    b = 0.5 + 0.4 * p[:, 0] - 0.6 * p[:, 1]
    return np.stack([r, g, b], axis=1)


def arc_poses(center, n, radius=1.5, span_deg=60.0):
    poses = []
    for k in range(n):
        az = np.deg2rad(-span_deg / 2 + span_deg * k / max(n - 1, 1))
        el = 0.25 + 0.08 * np.sin(3 * az)
        eye = center + radius * np.array([np.cos(az) * np.cos(el),
                                          np.sin(az) * np.cos(el), np.sin(el)])
        poses.append(look_at_pose(eye, center))
    return poses


def plane_keyframes(n=4, z0=0.5):
    """Translated cameras viewing the plane z = z0 with a world-affine texture.

    Pure translations keep every image affine in pixel coordinates, so
    bilinear samples reproduce the texture exactly and the photometric cost of
    the true configuration is zero to machine precision.
    """
    offsets = [(0.0, 0.0, 0.0), (0.06, 0.01, 0.0), (-0.04, 0.05, 0.02),
               (0.02, -0.05, -0.03), (-0.06, -0.02, 0.01)][:n]
    kfs = []
    for i, t in enumerate(offsets):
        pose = Pose(np.eye(3), np.asarray(t))
        depth = render_plane_depth([0.0, 0.0, z0], [0.0, 0.0, -1.0], pose, INTR)
        color = render_color_from_depth(depth, pose, linear_texture)
        kfs.append(Keyframe(i, color, pose))
    return kfs


def fused_plane_volume(z0=0.5):
    params = oracle_fusion_params(0.02)
    depth = render_plane_depth([0.0, 0.0, z0], [0.0, 0.0, -1.0], Pose.identity(), INTR)
    vol = params.new_volume()
    integrate_frame(vol, depth, estimate_normals(depth), Pose.identity(), params)
    return vol


@pytest.fixture(scope="module")
def sphere_ba_setup():
    """Exact three-sphere geometry, ten textured arc keyframes with depth."""
    centroid = np.mean([c for c, _ in THREE_SPHERES], axis=0)
    poses = arc_poses(centroid, 10)
    scene = SphereScene(THREE_SPHERES, poses, False, 5)
    vol = analytic_sphere_volume(THREE_SPHERES, voxel_size=0.02, truncation=0.1)

    def make_keyframes():
        return [Keyframe(i, render_sphere_color(scene, p, INTR, smooth_texture), p,
                         render_sphere_depth(scene, p, INTR))
                for i, p in enumerate(poses)]

    return vol, poses, make_keyframes


def keyframe_rmse_cm(keyframes, gt_poses):
    est = Trajectory(np.arange(len(keyframes), dtype=float),
                     [kf.pose for kf in keyframes])
    gt = Trajectory(np.arange(len(gt_poses), dtype=float), list(gt_poses))
    return ate_rmse(est, gt)


def perturb_keyframes(keyframes, seed=17, sigma_t=0.005, sigma_deg=0.5,
                      keep_first=True):
    rng = np.random.default_rng(seed)
    start = 1 if keep_first else 0
    for kf in keyframes[start:]:
        xi = np.concatenate([rng.normal(0.0, sigma_t, 3),
                             rng.normal(0.0, np.deg2rad(sigma_deg), 3)])
        kf.pose = se3_exp(xi).compose(kf.pose)
    return keyframes


class TestSelectKeyframes:
    def test_ten_percent_of_300(self):
        sel = select_keyframes(range(300), 0.10)
        assert len(sel) == 30
        assert sel == list(range(0, 300, 10))

    def test_ratio_one_keeps_all(self):
        assert select_keyframes(range(7), 1.0) == list(range(7))

    def test_half_ratio(self):
        assert select_keyframes(range(5), 0.5) == [0, 2, 4]

    def test_empty_input(self):
        assert select_keyframes([], 0.1) == []

    def test_invalid_ratio(self):
        with pytest.raises(ValueError):
            select_keyframes(range(10), 0.0)


class TestProjectVoxelSurfacePoint:
    def _volume_with_voxel(self, key, psi, grad, v_s=0.02):
        vol = GradientSdfVolume(v_s, 5 * v_s)
        vol.update([key], [psi], [1.0], [grad])
        return vol

    def test_on_axis_point_hits_principal_point(self):
        # surface point at (0, 0, 1): voxel center 1 m + psi 0.02 behind it
        vol = self._volume_with_voxel((0, 0, 51), 0.02, (0.0, 0.0, 1.0))
        kf = Keyframe(0, ColorFrame(np.full((180, 240, 3), 0.5), INTR), Pose.identity())
        uv, visible = project_voxel_surface_point(vol, (0, 0, 51), kf)
        assert visible
        assert np.allclose(uv, [119.5, 89.5], atol=1e-9)

    def test_point_behind_camera_invisible(self):
        vol = self._volume_with_voxel((0, 0, -50), 0.0, (0.0, 0.0, 1.0))
        kf = Keyframe(0, ColorFrame(np.full((180, 240, 3), 0.5), INTR), Pose.identity())
        _, visible = project_voxel_surface_point(vol, (0, 0, -50), kf)
        assert not visible

    def test_occluded_by_nearer_geometry(self):
        # surface voxel on a far plane; the keyframe's depth shows a near plane
        vol = self._volume_with_voxel((0, 0, 40), 0.0, (0.0, 0.0, 1.0))  # z = 0.8
        near_depth = DepthFrame(np.full((180, 240), 0.4), INTR)
        color = ColorFrame(np.full((180, 240, 3), 0.5), INTR)
        kf = Keyframe(0, color, Pose.identity(), depth=near_depth)
        _, visible = project_voxel_surface_point(vol, (0, 0, 40), kf)
        assert not visible

        consistent = Keyframe(0, color, Pose.identity(),
                              depth=DepthFrame(np.full((180, 240), 0.8), INTR))
        _, vis2 = project_voxel_surface_point(vol, (0, 0, 40), consistent)
        assert vis2


class TestEnergy:
    def test_equal_intensities_zero_energy(self):
        intens = np.full((4, 7, 3), 0.3)
        nu = np.ones((4, 7), dtype=bool)
        assert photometric_energy(intens, nu) == pytest.approx(0.0, abs=1e-15)

    def test_two_frame_single_channel_example(self):
        # intensities 0.2 / 0.4 in one channel: residuals -+0.1 -> E = 0.02
        intens = np.full((2, 1, 3), 0.5)
        intens[0, 0, 0] = 0.2
        intens[1, 0, 0] = 0.4
        nu = np.ones((2, 1), dtype=bool)
        assert photometric_energy(intens, nu) == pytest.approx(0.02, abs=1e-12)

    def test_variance_identity_on_random_instances(self):
        # quadratic cost equals sum over voxels/channels of N_j * Var
        rng = np.random.default_rng(0)
        for _ in range(100):
            n_f = rng.integers(2, 8)
            n_j = rng.integers(1, 30)
            nu = rng.random((n_f, n_j)) < 0.7
            intens = rng.random((n_f, n_j, 3))
            e = photometric_energy(intens, nu, robust_delta=None)
            expected = 0.0
            for j in range(n_j):
                vis = np.nonzero(nu[:, j])[0]
                if len(vis) == 0:
                    continue
                for c in range(3):
                    vals = intens[vis, j, c]
                    expected += len(vals) * np.var(vals)
            assert e == pytest.approx(expected, abs=1e-9)

    def test_perfect_data_zero_on_plane(self):
        vol = fused_plane_volume()
        kfs = plane_keyframes()
        obs = gather_observations(vol, kfs)
        assert obs.n_obs.max() >= 2
        e = photometric_energy(obs.intensities, obs.visibility, robust_delta=None)
        assert e < 1e-9


class TestOptimizePoses:
    def test_ground_truth_is_fixed_point(self):
        vol = fused_plane_volume()
        kfs = plane_keyframes()
        report = optimize_poses(vol, kfs, BaParams(max_outer_iterations=1,
                                                   robust_delta=None,
                                                   regularizer_weight=0.0))
        assert report.max_pose_update < 1e-5

    def test_needs_two_keyframes(self):
        vol = fused_plane_volume()
        with pytest.raises(ValueError):
            optimize_poses(vol, plane_keyframes(1))

    def test_decoupled_recovery(self, sphere_ba_setup):
        vol, poses, make_keyframes = sphere_ba_setup
        kfs = perturb_keyframes(make_keyframes())
        initial = keyframe_rmse_cm(kfs, poses)
        optimize_poses(vol, kfs, BaParams(max_outer_iterations=20))
        final = keyframe_rmse_cm(kfs, poses)
        assert final <= 0.5 * initial

    def test_coupled_matches_decoupled(self, sphere_ba_setup):
        vol, poses, make_keyframes = sphere_ba_setup
        kfs_d = perturb_keyframes(make_keyframes())
        kfs_c = perturb_keyframes(make_keyframes())
        optimize_poses(vol, kfs_d, BaParams(max_outer_iterations=20))
        optimize_poses(vol, kfs_c, BaParams(max_outer_iterations=20, decoupled=False))
        diff = abs(keyframe_rmse_cm(kfs_c, poses) - keyframe_rmse_cm(kfs_d, poses))
        assert diff <= 0.2

    def test_coupled_normal_system_nonsingular(self, sphere_ba_setup):
        # with frame 0 fixed, the joint step must solve without damping failure
        vol, poses, make_keyframes = sphere_ba_setup
        kfs = perturb_keyframes(make_keyframes())
        report = optimize_poses(vol, kfs, BaParams(max_outer_iterations=1,
                                                   decoupled=False))
        assert report.max_pose_update > 0.0

    def test_pose_only_close_to_full_ba(self, sphere_ba_setup):
        vol, poses, make_keyframes = sphere_ba_setup
        kfs_p = perturb_keyframes(make_keyframes())
        vol_p = analytic_sphere_volume(THREE_SPHERES, voxel_size=0.02, truncation=0.1)
        optimize_poses(vol_p, kfs_p, BaParams(max_outer_iterations=15))

        kfs_f = perturb_keyframes(make_keyframes())
        vol_f = analytic_sphere_volume(THREE_SPHERES, voxel_size=0.02, truncation=0.1)
        bundle_adjust(vol_f, kfs_f, BaParams(max_outer_iterations=15))
        diff = abs(keyframe_rmse_cm(kfs_p, poses) - keyframe_rmse_cm(kfs_f, poses))
        assert diff <= 0.3

    def test_decoupled_sweep_scales_linearly_in_frames(self, sphere_ba_setup):
        vol, poses, make_keyframes = sphere_ba_setup
        centroid = np.mean([c for c, _ in THREE_SPHERES], axis=0)
        scene = SphereScene(THREE_SPHERES, [], False, 5)

        def timed_sweep(n_frames):
            arc = arc_poses(centroid, n_frames)
            kfs = [Keyframe(i, render_sphere_color(scene, p, INTR, smooth_texture),
                            p, render_sphere_depth(scene, p, INTR))
                   for i, p in enumerate(arc)]
            params = BaParams()
            best = np.inf
            for _ in range(3):
                obs = gather_observations(vol, kfs, with_gradients=True)
                t0 = time.perf_counter()
                _pose_sweep_decoupled(vol, kfs, params, obs)
                best = min(best, time.perf_counter() - t0)
            return best

        t_single = timed_sweep(6)
        t_double = timed_sweep(12)
        assert t_double <= 2.5 * max(t_single, 1e-4)


class TestOptimizeDistances:
    def test_infinite_regularizer_freezes_distances(self, sphere_ba_setup):
        vol, poses, make_keyframes = sphere_ba_setup
        vol2 = analytic_sphere_volume(THREE_SPHERES, voxel_size=0.02, truncation=0.1)
        psi_before = vol2.psi.copy()
        optimize_distances(vol2, make_keyframes(),
                           BaParams(max_outer_iterations=3,
                                    regularizer_weight=1e12))
        assert np.abs(vol2.psi - psi_before).max() < 1e-9

    def test_single_voxel_step_matches_closed_form(self):
        # one voxel whose stored distance is off the true plane by 1 cm, two
        # translated cameras, texture affine in world x: every quantity in the
        # scalar Gauss-Newton step has a closed form computed here by hand
        v_s = 0.02
        z_plane = 0.54
        c0, c1 = 0.3, 0.9  # intensity = c0 + c1 * world_x
        vol = GradientSdfVolume(v_s, 5 * v_s)
        key = np.array([0, 0, 25])          # center (0, 0, 0.5), true psi -0.04
        psi0 = -0.03                        # start 1 cm off
        ghat = np.array([0.0, 0.0, 1.0])
        vol.update([key], [psi0], [1.0], [ghat])

        def tex(points):
            vals = c0 + c1 * np.asarray(points)[:, 0]
            return np.stack([vals] * 3, axis=1)

        kfs = []
        for i, t in enumerate(([0.05, 0.0, 0.0], [-0.05, 0.01, -0.02])):
            pose = Pose(np.eye(3), t)
            depth = render_plane_depth([0.0, 0.0, z_plane], [0.0, 0.0, -1.0],
                                       pose, INTR)
            kfs.append(Keyframe(i, render_color_from_depth(depth, pose, tex), pose))

        params = BaParams(max_outer_iterations=1, robust_delta=None,
                          regularizer_weight=0.0, surface_band=0.05)
        optimize_distances(vol, kfs, params)

        # hand path: image of camera at t is I(u, v) = c0 + c1 * (t_x + (z_plane
        # - t_z) * (u - cx) / fx); sample at the projection of p_s = v - psi ghat
        p_s = np.array([0.0, 0.0, 0.5]) - psi0 * ghat
        a = []
        r = []
        for kf in kfs:
            t = kf.pose.translation
            p_c = p_s - t
            u_i = INTR.fx * p_c[0] / p_c[2] + INTR.cx
            intensity = c0 + c1 * (t[0] + (z_plane - t[2]) * (u_i - INTR.cx) / INTR.fx)
            grad_u = c1 * (z_plane - t[2]) / INTR.fx
            du_dpsi = np.array([INTR.fx / p_c[2], 0.0,
                                -INTR.fx * p_c[0] / p_c[2]**2]) @ (-ghat)
            a.append(grad_u * du_dpsi)
            r.append(intensity)
        a = np.asarray(a)
        r = np.asarray(r)
        r = r - r.mean()
        step = -np.sum(3 * a * r) / np.sum(3 * a * a)  # 3 identical channels
        assert vol.psi[0] == pytest.approx(psi0 + step, abs=1e-12)
        assert abs(step) < 0.02  # pulls toward the true distance, no clamping

    def test_plane_distance_recovery(self):
        # band distances perturbed by +v_s/2 recover by >= 50% under the
        # default regularizer; oblique views give the distance direction
        # leverage (fronto-parallel cameras see almost no parallax from psi)
        vol = fused_plane_volume()
        psi_true = vol.psi.copy()
        rows, _, _ = surface_voxel_rows(vol, band=vol.voxel_size)
        vol.set_distances(rows, vol.psi[rows] + vol.voxel_size / 2.0)
        initial = np.abs(vol.psi[rows] - psi_true[rows]).mean()

        def sharp_texture(points):
            p = np.asarray(points)
            r = 0.5 + 0.3 * np.sin(41.0 * p[:, 0] + 1.0) * np.cos(13.0 * p[:, 1])
            g = 0.5 + 0.3 * np.sin(37.0 * p[:, 1] - 2.0) * np.cos(17.0 * p[:, 0])
            b = 0.5 + 0.3 * np.sin(43.0 * (p[:, 0] + p[:, 1])) * np.cos(11.0 * p[:, 1])
            return np.stack([r, g, b], axis=1)

        target = np.array([0.0, 0.0, 0.5])
        eyes = [(0.0, 0.0, 0.0), (0.35, 0.1, 0.05), (-0.3, 0.2, 0.02),
                (0.15, -0.35, 0.0), (-0.2, -0.3, 0.08), (0.3, -0.15, -0.05)]
        kfs = []
        for i, eye in enumerate(eyes):
            pose = look_at_pose(np.asarray(eye), target)
            depth = render_plane_depth([0.0, 0.0, 0.5], [0.0, 0.0, -1.0], pose, INTR)
            kfs.append(Keyframe(i, render_color_from_depth(depth, pose, sharp_texture),
                                pose))

        optimize_distances(vol, kfs, BaParams(max_outer_iterations=10))
        final = np.abs(vol.psi[rows] - psi_true[rows]).mean()
        assert final <= 0.5 * initial

    def test_skips_underobserved_voxels(self):
        v_s = 0.02
        vol = GradientSdfVolume(v_s, 5 * v_s)
        vol.update([(0, 0, 25)], [0.0], [1.0], [(0.0, 0.0, 1.0)])
        img = np.full((180, 240, 3), 0.5)
        # single keyframe: N_j = 1 < 2, distance must stay put
        kfs = [Keyframe(0, ColorFrame(img, INTR), Pose.identity()),
               Keyframe(1, ColorFrame(img, INTR), Pose(np.eye(3), [0.0, 0.0, -5.0]))]
        optimize_distances(vol, kfs, BaParams(max_outer_iterations=1,
                                              regularizer_weight=0.0,
                                              surface_band=0.05))
        assert vol.psi[0] == 0.0


class TestMeanVoxelColor:
    def test_single_observation_returns_it(self):
        v_s = 0.02
        vol = GradientSdfVolume(v_s, 5 * v_s)
        vol.update([(0, 0, 25)], [0.0], [1.0], [(0.0, 0.0, 1.0)])
        img = np.full((180, 240, 3), 0.0)
        img[..., 0] = 0.7
        img[..., 1] = 0.2
        img[..., 2] = 0.9
        kfs = [Keyframe(0, ColorFrame(img, INTR), Pose.identity())]
        keys, colors, has_color = mean_voxel_color(vol, kfs)
        assert has_color[0]
        assert np.allclose(colors[0], [0.7, 0.2, 0.9], atol=1e-12)

    def test_two_observations_averaged(self):
        v_s = 0.02
        vol = GradientSdfVolume(v_s, 5 * v_s)
        vol.update([(0, 0, 25)], [0.0], [1.0], [(0.0, 0.0, 1.0)])
        kfs = []
        for i, val in enumerate((0.2, 0.4)):
            img = np.full((180, 240, 3), val)
            kfs.append(Keyframe(i, ColorFrame(img, INTR), Pose.identity()))
        _, colors, has_color = mean_voxel_color(vol, kfs)
        assert has_color[0]
        assert np.allclose(colors[0], 0.3, atol=1e-12)

    def test_unseen_voxel_flagged_colorless(self):
        v_s = 0.02
        vol = GradientSdfVolume(v_s, 5 * v_s)
        vol.update([(0, 0, -25)], [0.0], [1.0], [(0.0, 0.0, 1.0)])  # behind camera
        img = np.full((180, 240, 3), 0.5)
        kfs = [Keyframe(0, ColorFrame(img, INTR), Pose.identity())]
        _, _, has_color = mean_voxel_color(vol, kfs)
        assert not has_color[0]

    def test_constant_color_scene_exact(self, sphere_ba_setup):
        vol, poses, _ = sphere_ba_setup
        scene = SphereScene(THREE_SPHERES, poses, False, 5)

        def flat(points):
            return np.tile([0.6, 0.35, 0.8], (len(points), 1))

        kfs = [Keyframe(i, render_sphere_color(scene, p, INTR, flat, background=0.1),
                        p, render_sphere_depth(scene, p, INTR))
               for i, p in enumerate(poses)]
        _, colors, has_color = mean_voxel_color(vol, kfs)
        assert has_color.sum() > 1000
        err = np.abs(colors[has_color] - np.array([0.6, 0.35, 0.8]))
        assert err.max() < 1e-6
