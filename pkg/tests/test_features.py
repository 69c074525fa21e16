import numpy as np
import pytest

from dimvo.errors import ImageTooSmall
from dimvo.features import (
    Keypoint,
    OrbConfig,
    build_pyramid,
    detect_fast,
    dump_keypoints,
    orb_detect_and_describe,
    orient,
    patch_margin,
    pyramid_dims,
)
from dimvo.matching import hamming, match_ratio
from synthscene import rotation_map, rotate_image, textured_leaves


class TestPyramid:
    def test_single_level_is_input(self, natural_image):
        levels = build_pyramid(natural_image, 1, 1.2)
        assert len(levels) == 1
        assert np.array_equal(levels[0], natural_image)

    def test_vga_level_dims(self):
        assert pyramid_dims(640, 480, 2, 1.2)[1] == (533, 400)
        img = np.zeros((480, 640), np.uint8)
        levels = build_pyramid(img, 2, 1.2)
        assert levels[1].shape == (400, 533)

    def test_too_small_rejected(self):
        img = np.zeros((40, 40), np.uint8)
        with pytest.raises(ImageTooSmall):
            build_pyramid(img, 8, 1.2)

    def test_below_64_rejected(self):
        with pytest.raises(ImageTooSmall):
            build_pyramid(np.zeros((48, 200), np.uint8), 1, 1.2)


class TestFast:
    def test_constant_image_empty(self):
        assert detect_fast(np.full((64, 64), 40, np.uint8), 20) == []

    def test_single_dot_detected(self):
        img = np.zeros((64, 64), np.uint8)
        img[32, 32] = 255
        kps = detect_fast(img, 20)
        assert len(kps) >= 1
        assert all(abs(kp.x - 32) <= 1 and abs(kp.y - 32) <= 1 for kp in kps)

    def test_rot90_preserves_count(self, natural_image):
        img = natural_image[:256, :320]
        kps = detect_fast(img, 20)
        kps_rot = detect_fast(np.rot90(img).copy(), 20)
        assert len(kps) == len(kps_rot)

    def test_threshold_validated(self):
        with pytest.raises(ValueError):
            detect_fast(np.zeros((64, 64), np.uint8), 0)

    def test_deterministic(self, natural_image):
        a = detect_fast(natural_image, 20)
        b = detect_fast(natural_image, 20)
        assert [(k.x, k.y, k.response) for k in a] == [
            (k.x, k.y, k.response) for k in b
        ]


def ramp_patch(size=64):
    """Brightness increasing toward +x."""
    return np.tile(np.linspace(40, 215, size).astype(np.uint8), (size, 1))


class TestOrient:
    def test_ramp_toward_plus_x(self):
        angle = orient(ramp_patch(), Keypoint(x=32, y=32))
        assert min(angle, 2 * np.pi - angle) < 0.05

    def test_rotated_ramp_shifts_angle(self):
        img = ramp_patch()
        base = orient(img, Keypoint(x=32, y=32))
        for phi in (np.pi / 2, np.pi / 6):
            rot = rotate_image(img, phi)
            got = orient(rot, Keypoint(x=32, y=32))
            delta = (got - base - phi + np.pi) % (2 * np.pi) - np.pi
            assert abs(delta) < 0.05

    def test_symmetric_patch_zero(self):
        img = np.full((64, 64), 128, np.uint8)
        assert orient(img, Keypoint(x=32, y=32)) == 0.0

    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError):
            orient(np.zeros((64, 64), np.uint8), Keypoint(x=2, y=2))


class TestOrbPipeline:
    def test_constant_image_empty(self):
        kps, descs = orb_detect_and_describe(np.full((128, 128), 99, np.uint8))
        assert kps == []
        assert descs.shape == (0, 32)

    def test_grid_occupancy_on_checkerboard(self):
        tile = np.kron(np.indices((12, 16)).sum(0) % 2, np.ones((32, 32)))
        img = (tile * 200 + 20).astype(np.uint8)
        cfg = OrbConfig(grid=(4, 3), min_distance=0.0)
        kps, _ = orb_detect_and_describe(img, cfg)
        h, w = img.shape
        cells = {(min(int(k.x * 4 / w), 3), min(int(k.y * 3 / h), 2)) for k in kps}
        assert len(cells) == 12

    def test_keypoint_count_capped(self, natural_image):
        cfg = OrbConfig(n_features=150)
        kps, descs = orb_detect_and_describe(natural_image, cfg)
        assert len(kps) <= 150
        assert len(descs) == len(kps)

    def test_canonical_ordering(self, natural_image):
        kps, _ = orb_detect_and_describe(natural_image)
        keys = [(k.octave, -k.response, k.x, k.y) for k in kps]
        assert keys == sorted(keys)

    def test_border_margin_respected(self, natural_image):
        cfg = OrbConfig()
        kps, _ = orb_detect_and_describe(natural_image, cfg)
        margin = patch_margin()
        h, w = natural_image.shape
        for kp in kps:
            scale = cfg.scale_factor**kp.octave
            lw, lh = int(w / scale), int(h / scale)
            lx, ly = kp.x / (w / lw), kp.y / (h / lh)
            assert margin - 1 <= lx <= lw - margin
            assert margin - 1 <= ly <= lh - margin

    def test_detection_bit_exact_across_runs(self, natural_image):
        kps_a, da = orb_detect_and_describe(natural_image)
        kps_b, db = orb_detect_and_describe(natural_image)
        assert np.array_equal(da, db)
        assert [(k.x, k.y, k.octave, k.angle, k.response) for k in kps_a] == \
               [(k.x, k.y, k.octave, k.angle, k.response) for k in kps_b]

    def test_dump_format(self, natural_image):
        kps, descs = orb_detect_and_describe(natural_image, OrbConfig(n_features=5))
        lines = dump_keypoints(kps, descs).splitlines()
        assert len(lines) == len(kps)
        parts = lines[0].split()
        assert len(parts) == 6
        assert len(parts[5]) == 64  # 32 bytes hex


def rotation_recall(img, angle_deg, tol_px=2.0):
    """Recovered fraction of ground-truth correspondences under rotation.

    A correspondence is a mutually-nearest keypoint pair at the same
    octave within tol_px of the known rotation map (the same physical
    feature seen twice); recall asks how many of those the ratio-test
    matcher finds again.
    """
    ang = np.deg2rad(angle_deg)
    kps_a, da = orb_detect_and_describe(img)
    kps_b, db = orb_detect_and_describe(rotate_image(img, ang))
    xy_a = np.array([(k.x, k.y) for k in kps_a])
    xy_b = np.array([(k.x, k.y) for k in kps_b])
    oct_a = np.array([k.octave for k in kps_a])
    oct_b = np.array([k.octave for k in kps_b])
    mapped = rotation_map(xy_a, ang, img.shape[1], img.shape[0])
    d2 = ((mapped[:, None, :] - xy_b[None, :, :]) ** 2).sum(-1)
    d2 = d2 + 1e12 * (oct_a[:, None] != oct_b[None, :])
    nn_ab = d2.argmin(1)
    nn_ba = d2.argmin(0)
    corr = {
        i: int(nn_ab[i])
        for i in range(len(kps_a))
        if d2[i, nn_ab[i]] <= tol_px**2 and nn_ba[nn_ab[i]] == i
    }
    hd = [hamming(da[i], db[j]) for i, j in corr.items()]
    matched = {m.idx_a: m.idx_b for m in match_ratio(da, db, 0.8)}
    recovered = sum(1 for i, j in corr.items() if matched.get(i) == j)
    return len(corr), recovered / max(1, len(corr)), float(np.median(hd))


class TestRotationInvariance:
    @pytest.mark.parametrize("angle", [15, 30, 90])
    def test_descriptor_stability(self, natural_image, angle):
        n_corr, recall, median_hamming = rotation_recall(natural_image, angle)
        assert n_corr >= 100
        assert median_hamming <= 48
        assert recall >= 0.70
