import numpy as np
import pytest

from gradsdf import FusionParams, Intrinsics, Pose, estimate_normals, integrate_frame
from gradsdf.synthetic import render_plane_depth
from gradsdf.volume import (DegenerateGradientError, GradientSdfVolume,
                            IncompleteNeighborhoodError, NoEstimateError,
                            load_volume, lookup_count_audit, pack_keys,
                            save_volume, world_to_key)

from .oracles import brute_force_trilinear


class TestWorldToKey:
    def test_origin(self):
        assert world_to_key([0.0, 0.0, 0.0], 0.02).tolist() == [0, 0, 0]

    def test_round_up_past_half(self):
        assert world_to_key([0.011, 0.0, 0.0], 0.02).tolist() == [1, 0, 0]

    def test_negative_and_below_half(self):
        assert world_to_key([-0.011, 0.009, 0.0], 0.02).tolist() == [-1, 0, 0]

    def test_ties_round_away_from_zero(self):
        assert world_to_key([0.01, -0.01, 0.0], 0.02).tolist() == [1, -1, 0]

    def test_voxel_center_recovered_exactly(self):
        rng = np.random.default_rng(0)
        keys = rng.integers(-500, 500, size=(200, 3))
        back = world_to_key(keys * 0.02, 0.02)
        assert np.array_equal(back, keys)

    def test_pack_keys_injective(self):
        rng = np.random.default_rng(1)
        keys = np.unique(rng.integers(-1000, 1000, size=(500, 3)), axis=0)
        packed = pack_keys(keys)
        assert len(np.unique(packed)) == len(keys)


def make_volume(entries, voxel_size=0.02, truncation=0.1):
    """entries: list of (key, psi, weight, grad)."""
    vol = GradientSdfVolume(voxel_size, truncation)
    keys = np.array([e[0] for e in entries])
    psi = np.array([e[1] for e in entries], dtype=float)
    w = np.array([e[2] for e in entries], dtype=float)
    g = np.array([e[3] for e in entries], dtype=float)
    vol.update(keys, psi, w, g / w[:, None])
    return vol


def linear_field_volume(extent=4, voxel_size=0.02, grad=(0.0, 0.0, 1.0), offset=0.0):
    """psi(v) = v . grad + offset on a filled grid, gradient stored exactly."""
    rng = range(-extent, extent + 1)
    entries = []
    for i in rng:
        for j in rng:
            for k in rng:
                v = np.array([i, j, k], dtype=float) * voxel_size
                psi = float(v @ np.asarray(grad)) + offset
                entries.append(((i, j, k), psi, 1.0, np.asarray(grad, dtype=float)))
    return make_volume(entries, voxel_size, truncation=10 * voxel_size)


class TestTaylorQuery:
    def test_at_voxel_center_returns_psi(self):
        vol = make_volume([((0, 0, 0), 0.015, 1.0, (0.0, 0.0, 1.0))])
        d, g = vol.taylor_query([0.0, 0.0, 0.0])
        assert abs(d - 0.015) < 1e-15
        assert np.allclose(g, [0, 0, 1])

    def test_offset_arithmetic(self):
        # psi = 0.02, ghat = e_z, offset 0.01 along z -> d = 0.03
        vol = make_volume([((0, 0, 0), 0.02, 1.0, (0.0, 0.0, 1.0))],
                          voxel_size=0.04, truncation=0.2)
        d, _ = vol.taylor_query([0.0, 0.0, 0.01])
        assert abs(d - 0.03) < 1e-15

    def test_missing_voxel_no_estimate(self):
        vol = make_volume([((0, 0, 0), 0.0, 1.0, (0.0, 0.0, 1.0))])
        with pytest.raises(NoEstimateError):
            vol.taylor_query([1.0, 1.0, 1.0])

    def test_degenerate_gradient(self):
        vol = GradientSdfVolume(0.02, 0.1)
        vol.update([(0, 0, 0)], [0.01], [1.0], [(0.0, 0.0, 1e-9)])
        with pytest.raises(DegenerateGradientError):
            vol.taylor_query([0.0, 0.0, 0.0])

    def test_plane_fusion_reproduces_analytic_sdf(self):
        # noise-free fronto-parallel plane at z = 0.5, positive side z > 0.5
        intr = Intrinsics(fx=200.0, fy=200.0, cx=79.5, cy=59.5, width=160, height=120)
        params = FusionParams(voxel_size=0.02, trunc_factor=5.0)
        depth = render_plane_depth([0.0, 0.0, 0.5], [0.0, 0.0, -1.0],
                                   Pose.identity(), intr)
        vol = params.new_volume()
        integrate_frame(vol, depth, estimate_normals(depth), Pose.identity(), params)

        rng = np.random.default_rng(2)
        v_s = params.voxel_size
        checked = 0
        while checked < 200:
            p = np.array([rng.uniform(-0.15, 0.15), rng.uniform(-0.1, 0.1),
                          0.5 + rng.uniform(-0.08, 0.08)])
            key = world_to_key(p, v_s)
            if vol.find_rows(key.reshape(1, 3))[0] < 0:
                continue
            d, g = vol.taylor_query(p)
            assert abs(d - (p[2] - 0.5)) <= 1e-3 * v_s
            assert np.allclose(g, [0.0, 0.0, 1.0], atol=1e-9)
            checked += 1


class TestTrilinearQuery:
    def test_constant_field(self):
        vol = linear_field_volume(extent=2, grad=(0, 0, 0), offset=0.03)
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.uniform(-0.02, 0.02, size=3)
            assert abs(vol.trilinear_distance(p) - 0.03) < 1e-12

    def test_linear_field_gradient_exact(self):
        vol = linear_field_volume(extent=4, grad=(0.0, 0.0, 1.0))
        d, grad = vol.trilinear_query([0.005, -0.007, 0.013])
        assert abs(d - 0.013) < 1e-12
        assert np.allclose(grad, [0.0, 0.0, 1.0], atol=1e-9)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        keys = np.array([[i, j, k] for i in range(4) for j in range(4) for k in range(4)])
        psi = rng.uniform(-0.05, 0.05, size=len(keys))
        vol = GradientSdfVolume(0.02, 0.1)
        vol.update(keys, psi, np.ones(len(keys)),
                   np.tile([0.0, 0.0, 1.0], (len(keys), 1)))
        for _ in range(50):
            p = rng.uniform(0.001, 0.058, size=3)
            expected = brute_force_trilinear(keys, psi, p, 0.02)
            assert abs(vol.trilinear_distance(p) - expected) < 1e-12

    def test_missing_corner_incomplete(self):
        vol = make_volume([((0, 0, 0), 0.0, 1.0, (0.0, 0.0, 1.0))])
        with pytest.raises(IncompleteNeighborhoodError):
            vol.trilinear_distance([0.01, 0.01, 0.01])


class TestClosestSurfacePoint:
    def test_zero_distance_voxel_is_on_surface(self):
        vol = make_volume([((2, 0, 0), 0.0, 1.0, (1.0, 0.0, 0.0))])
        assert np.allclose(vol.closest_surface_point((2, 0, 0)), [0.04, 0.0, 0.0])

    def test_projection_arithmetic(self):
        vol = make_volume([((5, 0, 0), 0.05, 1.0, (1.0, 0.0, 0.0))])
        assert np.allclose(vol.closest_surface_point((5, 0, 0)), [0.05, 0.0, 0.0])

    def test_degenerate_gradient_raises(self):
        vol = GradientSdfVolume(0.02, 0.1)
        vol.update([(0, 0, 0)], [0.01], [1.0], [(0.0, 0.0, 1e-9)])
        with pytest.raises(DegenerateGradientError):
            vol.closest_surface_point((0, 0, 0))

    def test_sphere_band_projects_onto_sphere(self, sphere_volume):
        vol, scene = sphere_volume
        center, radius = scene.spheres[0]
        ghat, ok = vol.normalized_gradients()
        near = ok & (np.abs(vol.psi) <= 0.25 * vol.voxel_size)
        keys = vol.keys[near]
        assert len(keys) > 100
        radii = []
        for key in keys:
            p_s = vol.closest_surface_point(key)
            radii.append(np.linalg.norm(p_s - center))
        err = np.abs(np.asarray(radii) - radius)
        assert err.max() <= 0.1 * vol.voxel_size


class TestReadCounts:
    def test_taylor_is_single_lookup(self):
        vol = make_volume([((0, 0, 0), 0.01, 1.0, (0.0, 0.0, 1.0))])
        n = lookup_count_audit(vol, lambda v: v.taylor_query([0.001, 0.0, 0.0]))
        assert n == 1

    def test_trilinear_distance_reads_eight(self):
        vol = linear_field_volume(extent=2)
        n = lookup_count_audit(vol, lambda v: v.trilinear_distance([0.005, 0.005, 0.005]))
        assert n == 8

    def test_trilinear_full_query_at_most_32(self):
        vol = linear_field_volume(extent=3)
        n = lookup_count_audit(vol, lambda v: v.trilinear_query([0.005, 0.005, 0.005]))
        assert 8 < n <= 32

    def test_world_to_key_costs_nothing(self):
        vol = make_volume([((0, 0, 0), 0.01, 1.0, (0.0, 0.0, 1.0))])
        n = lookup_count_audit(vol, lambda v: world_to_key([0.3, 0.2, 0.1], v.voxel_size))
        assert n == 0

    def test_batch_query_counts_one_per_point(self):
        vol = linear_field_volume(extent=2)
        pts = np.zeros((17, 3))
        n = lookup_count_audit(vol, lambda v: v.taylor_query_batch(pts))
        assert n == 17


class TestSnapshot:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(5)
        keys = np.unique(rng.integers(-300, 300, size=(200, 3)), axis=0)
        vol = GradientSdfVolume(0.02, 0.1)
        vol.update(keys, rng.uniform(-0.1, 0.1, len(keys)),
                   rng.uniform(0.1, 5.0, len(keys)), rng.normal(size=(len(keys), 3)))

        path1 = tmp_path / "a.gsdf"
        path2 = tmp_path / "b.gsdf"
        save_volume(vol, path1)
        loaded = load_volume(path1)
        save_volume(loaded, path2)
        assert path1.read_bytes() == path2.read_bytes()
        assert loaded.voxel_size == vol.voxel_size
        assert loaded.truncation == vol.truncation
        assert np.array_equal(loaded.keys, vol.keys)
        assert np.allclose(loaded.psi, vol.psi, atol=1e-6)

    def test_magic_checked(self, tmp_path):
        bad = tmp_path / "bad.gsdf"
        bad.write_bytes(b"NOPE!" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_volume(bad)

    def test_header_fields(self, tmp_path):
        vol = GradientSdfVolume(0.01, 0.1)
        vol.update([(1, 2, 3)], [0.05], [2.0], [(0.0, 1.0, 0.0)])
        path = tmp_path / "v.gsdf"
        save_volume(vol, path)
        raw = path.read_bytes()
        assert raw[:5] == b"GSDF1"
        assert np.frombuffer(raw[5:21], dtype="<f8").tolist() == [0.01, 0.1]
        assert len(raw) == 21 + 32  # one 32-byte record
