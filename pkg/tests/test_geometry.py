import numpy as np
import pytest

from dimvo.errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DivergedBehindCamera,
    TooFewPoints,
    ZeroBaseline,
)
from dimvo.geometry import (
    PoseSE3,
    decompose_essential,
    essential_from_fundamental,
    normalize_pixels,
    pnp,
    project,
    quat_to_rot,
    refine_pose,
    reprojection_residuals,
    reprojection_rms,
    rot_to_quat,
    rotation_angle,
    skew,
    so3_exp,
    triangulate,
    triangulate_many,
)

K = np.array([[500.0, 0, 320], [0, 505.0, 240], [0, 0, 1]])


def random_pose(seed, angle=0.15, trans=0.5):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=3)
    w *= angle / np.linalg.norm(w)
    return PoseSE3(so3_exp(w), rng.normal(scale=trans, size=3))


def scene_points(seed, n=30, depth=6.0):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.5, 1.5, (n, 3))
    pts[:, 2] = depth + rng.uniform(-1.0, 1.0, n)
    return pts


class TestRotationHelpers:
    def test_quat_round_trip(self):
        for seed in range(20):
            r = random_pose(seed, angle=2.0).r
            assert np.abs(quat_to_rot(rot_to_quat(r)) - r).max() < 1e-12

    def test_exp_of_zero(self):
        assert np.allclose(so3_exp([0, 0, 0]), np.eye(3))

    def test_pose_invariants(self):
        pose = random_pose(1)
        assert np.abs(pose.r.T @ pose.r - np.eye(3)).max() <= 1e-9
        assert abs(np.linalg.det(pose.r) - 1.0) <= 1e-9

    def test_invalid_rotation_rejected(self):
        with pytest.raises(ValueError):
            PoseSE3(np.eye(3) * 2.0, np.zeros(3))


class TestEssential:
    def test_recover_from_forward_constructed_f(self):
        pose = random_pose(2)
        t_hat = pose.t / np.linalg.norm(pose.t)
        e_true = skew(t_hat) @ pose.r
        e_true /= np.linalg.norm(e_true)
        kinv = np.linalg.inv(K)
        f = kinv.T @ e_true @ kinv
        e = essential_from_fundamental(f, K, K)
        assert min(np.linalg.norm(e - e_true), np.linalg.norm(e + e_true)) < 1e-9

    def test_identity_intrinsics(self):
        pose = random_pose(3)
        t_hat = pose.t / np.linalg.norm(pose.t)
        e_true = skew(t_hat) @ pose.r
        f = e_true + 1e-3 * np.outer(t_hat, t_hat)  # slightly off the manifold
        e = essential_from_fundamental(f, np.eye(3), np.eye(3))
        sv = np.linalg.svd(e, compute_uv=False)
        assert abs(sv[0] - sv[1]) < 1e-12 and sv[2] < 1e-12

    def test_pure_translation_skew_form(self):
        e = essential_from_fundamental(skew([1.0, 0, 0]), np.eye(3), np.eye(3))
        expected = skew([1.0, 0, 0]) / np.linalg.norm(skew([1.0, 0, 0]))
        assert min(np.linalg.norm(e - expected), np.linalg.norm(e + expected)) < 1e-12


class TestDecomposeEssential:
    def test_recovers_pose(self):
        pose = random_pose(4)
        pts = scene_points(5)
        na = normalize_pixels(np.eye(3), project(PoseSE3.identity(), np.eye(3), pts))
        nb = normalize_pixels(np.eye(3), project(pose, np.eye(3), pts))
        t_hat = pose.t / np.linalg.norm(pose.t)
        e = skew(t_hat) @ pose.r
        got = decompose_essential(e, na, nb)
        assert rotation_angle(got.r.T @ pose.r) < 1e-6
        assert np.arccos(np.clip(np.dot(got.t, t_hat), -1, 1)) < 1e-6

    def test_unit_translation(self):
        pose = PoseSE3(np.eye(3), np.array([1.0, 0.0, 0.0]))
        pts = scene_points(6)
        na = normalize_pixels(np.eye(3), project(PoseSE3.identity(), np.eye(3), pts))
        nb = normalize_pixels(np.eye(3), project(pose, np.eye(3), pts))
        got = decompose_essential(skew([1.0, 0, 0]), na, nb)
        assert abs(np.linalg.norm(got.t) - 1.0) < 1e-12

    def test_points_behind_raises(self):
        # epipolar-consistent correspondences generated from points behind
        # camera b; mixed with points behind camera a, no candidate can put
        # a majority in front of both views
        pose = PoseSE3(np.eye(3), np.array([0.0, 0.0, -8.0]))
        t_hat = pose.t / np.linalg.norm(pose.t)
        e = skew(t_hat) @ pose.r
        rng = np.random.default_rng(9)
        behind_b = rng.uniform(-1.0, 1.0, (10, 3)) + [0, 0, 4.0]  # z_b = z - 8 < 0
        behind_a = rng.uniform(-1.0, 1.0, (10, 3)) + [0, 0, -4.0]  # z_a < 0
        pts = np.vstack([behind_b, behind_a])

        def proj(pose_, pts_):
            p = pose_.apply(pts_)
            return p[:, :2] / p[:, 2:3]

        na = proj(PoseSE3.identity(), pts)
        nb = proj(pose, pts)
        with pytest.raises(CheiralityAmbiguous):
            decompose_essential(e, na, nb)


class TestTriangulate:
    def test_exact_recovery(self):
        pose_b = random_pose(10)
        pts = scene_points(11, n=10)
        na = normalize_pixels(np.eye(3), project(PoseSE3.identity(), np.eye(3), pts))
        nb = normalize_pixels(np.eye(3), project(pose_b, np.eye(3), pts))
        got = triangulate_many(PoseSE3.identity(), pose_b, na, nb)
        assert np.abs(got - pts).max() < 1e-9

    def test_zero_baseline(self):
        pose = random_pose(12)
        with pytest.raises(ZeroBaseline):
            triangulate(pose, pose, np.zeros(2), np.zeros(2))

    def test_point_on_baseline_rejected_by_reprojection(self):
        # camera b sits at (0, 0, 1), so the baseline is the z axis and a
        # point on it sees collinear rays; the solve cannot pin its depth
        pose_b = PoseSE3(np.eye(3), np.array([0.0, 0.0, -1.0]))
        pt = np.array([0.0, 0.0, 3.0])
        na = pt[:2] / pt[2]
        pb = pose_b.apply(pt)
        nb = pb[:2] / pb[2]
        got = triangulate(PoseSE3.identity(), pose_b, na, nb)
        err = np.abs(got - pt).max()
        assert not np.isfinite(err) or err > 0.5


class TestPnp:
    def test_general_recovery(self):
        pose = random_pose(13)
        pts = scene_points(14, n=20)
        res = pnp(pts, project(pose, K, pts), K)
        assert not res.planar
        assert rotation_angle(res.pose.r.T @ pose.r) < 1e-6
        assert np.abs(res.pose.t - pose.t).max() < 1e-6
        assert res.reproj_rms < 1e-6

    def test_five_nonplanar_points_rejected(self):
        pose = random_pose(15)
        pts = scene_points(16, n=5)
        with pytest.raises(TooFewPoints):
            pnp(pts, project(pose, K, pts), K)

    def test_planar_chessboard_recovery(self):
        pose = random_pose(17, angle=0.3, trans=0.4)
        grid = np.stack(np.meshgrid(np.linspace(-0.5, 0.5, 7),
                                    np.linspace(-0.5, 0.5, 7)), -1).reshape(-1, 2)
        pts = np.concatenate([grid, np.zeros((49, 1))], axis=1) + [0, 0, 4.0]
        res = pnp(pts, project(pose, K, pts), K)
        assert res.planar
        assert rotation_angle(res.pose.r.T @ pose.r) < 1e-6
        assert np.abs(res.pose.t - pose.t).max() < 1e-6

    def test_planar_four_points(self):
        pose = random_pose(18, angle=0.2, trans=0.3)
        pts = np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0],
                        [-0.5, 0.5, 0]]) + [0, 0, 3.0]
        res = pnp(pts, project(pose, K, pts), K)
        assert res.planar
        assert np.abs(res.pose.t - pose.t).max() < 1e-6

    def test_collinear_rejected(self):
        t = np.linspace(0, 1, 10)
        pts = np.stack([t, 2 * t, 3 + t], axis=1)
        pose = random_pose(19)
        with pytest.raises(DegenerateConfiguration):
            pnp(pts, project(pose, K, pts), K)


class TestRefinePose:
    def test_zero_update_at_optimum(self):
        pose = random_pose(20)
        pts = scene_points(21)
        px = project(pose, K, pts)
        got = refine_pose(pose, pts, px, K)
        assert rotation_angle(got.r.T @ pose.r) < 1e-12
        assert np.abs(got.t - pose.t).max() < 1e-12

    def test_recovers_from_perturbation(self):
        pose = random_pose(22)
        pts = scene_points(23)
        px = project(pose, K, pts)
        w = np.array([0.05, -0.05, 0.04])
        w *= np.deg2rad(5.0) / np.linalg.norm(w)
        start = PoseSE3(so3_exp(w) @ pose.r, pose.t + [0.06, -0.05, 0.06])
        got = refine_pose(start, pts, px, K)
        assert rotation_angle(got.r.T @ pose.r) < 1e-8
        assert np.abs(got.t - pose.t).max() < 1e-8

    def test_rms_never_increases(self):
        pose = random_pose(24)
        pts = scene_points(25)
        rng = np.random.default_rng(26)
        px = project(pose, K, pts) + rng.normal(0, 1.0, (len(pts), 2))
        start_rms = reprojection_rms(pose, pts, px, K)
        got = refine_pose(pose, pts, px, K)
        assert reprojection_rms(got, pts, px, K) <= start_rms + 1e-12

    def test_jacobian_matches_finite_differences(self):
        for seed in range(5):
            pose = random_pose(30 + seed)
            pts = scene_points(40 + seed, n=8)
            px = project(pose, K, pts) + 1.0  # nonzero residuals
            res0, jac = reprojection_residuals(pose, pts, px, K)
            eps = 1e-6
            for axis in range(6):
                d = np.zeros(6)
                d[axis] = eps
                plus = PoseSE3.from_rt(so3_exp(d[:3]) @ pose.r, pose.t + d[3:])
                minus = PoseSE3.from_rt(so3_exp(-d[:3]) @ pose.r, pose.t - d[3:])
                rp, _ = reprojection_residuals(plus, pts, px, K)
                rm, _ = reprojection_residuals(minus, pts, px, K)
                fd = (rp - rm) / (2 * eps)
                scale = np.abs(fd).max()
                assert np.abs(jac[:, axis] - fd).max() <= 1e-5 * max(scale, 1.0)

    def test_too_few_points(self):
        pose = random_pose(27)
        pts = scene_points(28, n=2)
        with pytest.raises(TooFewPoints):
            refine_pose(pose, pts, project(pose, K, pts), K)

    def test_initial_points_behind_rejected(self):
        pts = scene_points(29)
        bad = PoseSE3(np.eye(3), np.array([0.0, 0.0, -20.0]))
        with pytest.raises(DivergedBehindCamera):
            refine_pose(bad, pts, np.zeros((len(pts), 2)), K)

    def test_returned_rotation_orthonormal(self):
        pose = random_pose(31)
        pts = scene_points(32)
        rng = np.random.default_rng(33)
        px = project(pose, K, pts) + rng.normal(0, 0.5, (len(pts), 2))
        got = refine_pose(pose, pts, px, K)
        assert np.abs(got.r.T @ got.r - np.eye(3)).max() <= 1e-9
        assert abs(np.linalg.det(got.r) - 1.0) <= 1e-9
