"""Oriented multi-scale corner detection with 256-bit binary descriptors.

The detector is the 16-pixel Bresenham-circle segment test (9 contiguous
pixels all brighter or all darker than the center by a threshold), with
non-maximum suppression on the sum of absolute differences over the
qualifying arc. Orientation comes from the intensity centroid of a
radius-15 patch, and descriptors compare box-smoothed intensities at the
learned 256 point pairs, steered by the keypoint angle in 12-degree bins.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._brief_pattern import PAIRS
from .errors import ImageTooSmall

# Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
], dtype=np.int64)

ARC_MIN = 9
N_ANGLE_BINS = 30
ORIENT_RADIUS = 15
BLUR_RADIUS = 3  # 7x7 box

_SEGMENT_LUT = None
_STEERED = None
PATCH_MARGIN = None


@dataclass
class OrbConfig:
    n_features: int = 1000
    n_levels: int = 8
    scale_factor: float = 1.2
    fast_threshold: int = 20
    grid: tuple[int, int] = (8, 6)
    # near-duplicate corners (across octaves, or chained along an edge)
    # produce ambiguous descriptors that the ratio test then rejects;
    # suppress anything closer than this to a stronger keypoint
    min_distance: float = 5.0

    def __post_init__(self):
        if self.scale_factor <= 1:
            raise ValueError("scale_factor must be > 1")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        if not 1 <= self.fast_threshold <= 254:
            raise ValueError("fast_threshold must be in [1, 254]")
        if min(self.grid) < 1:
            raise ValueError("grid must be >= 1x1")
        if self.min_distance < 0:
            raise ValueError("min_distance must be >= 0")


@dataclass
class Keypoint:
    """Corner in level-0 coordinates; angle in [0, 2*pi) radians."""

    x: float
    y: float
    octave: int = 0
    response: float = 0.0
    angle: float = 0.0


def _segment_lut():
    """For every 16-bit circle mask: does it contain a circular run >= 9?"""
    global _SEGMENT_LUT
    if _SEGMENT_LUT is None:
        masks = (np.arange(65536, dtype=np.uint32)[:, None] >> np.arange(16)) & 1
        doubled = np.concatenate([masks, masks], axis=1)
        window = np.lib.stride_tricks.sliding_window_view(doubled, ARC_MIN, axis=1)
        _SEGMENT_LUT = (window.sum(axis=2) == ARC_MIN).any(axis=1)
    return _SEGMENT_LUT


def _steered_patterns():
    """Pattern coordinates rotated to each of the 30 angle bins."""
    global _STEERED, PATCH_MARGIN
    if _STEERED is None:
        x0, y0, x1, y1 = (PAIRS[:, i].astype(np.float64) for i in range(4))
        p0 = np.empty((N_ANGLE_BINS, 256, 2), dtype=np.int64)
        p1 = np.empty((N_ANGLE_BINS, 256, 2), dtype=np.int64)
        for b in range(N_ANGLE_BINS):
            th = 2.0 * math.pi * b / N_ANGLE_BINS
            c, s = math.cos(th), math.sin(th)
            p0[b, :, 0] = np.rint(x0 * c - y0 * s)
            p0[b, :, 1] = np.rint(x0 * s + y0 * c)
            p1[b, :, 0] = np.rint(x1 * c - y1 * s)
            p1[b, :, 1] = np.rint(x1 * s + y1 * c)
        _STEERED = (p0, p1)
        PATCH_MARGIN = int(max(np.abs(p0).max(), np.abs(p1).max())) + BLUR_RADIUS
    return _STEERED


def patch_margin():
    _steered_patterns()
    return PATCH_MARGIN


def _max_arc_sums(mask, absdiff):
    """Per row: the largest sum of |diff| over a circular run of >= 9 set bits."""
    n = len(mask)
    scores = np.zeros(n)
    if n == 0:
        return scores
    m2 = np.concatenate([mask, mask], axis=1)
    d2 = np.concatenate([absdiff, absdiff], axis=1).astype(np.float64)
    padded = np.zeros((n, 34), dtype=np.int8)
    padded[:, 1:33] = m2
    dd = padded[:, 1:] - padded[:, :-1]
    rs, cs = np.nonzero(dd == 1)
    _, ce = np.nonzero(dd == -1)
    # starts/ends pair up in row-major order
    run_len = ce - cs
    keep = (run_len >= ARC_MIN) & (cs < 16)
    if not np.any(keep):
        return scores
    csum = np.zeros((n, 33))
    np.cumsum(d2 * m2, axis=1, out=csum[:, 1:])
    sums = csum[rs[keep], ce[keep]] - csum[rs[keep], cs[keep]]
    full_ring = run_len[keep] > 16  # all 16 bits set; doubled run counts twice
    sums = np.where(full_ring, csum[rs[keep], 32] / 2.0, sums)
    np.maximum.at(scores, rs[keep], sums)
    return scores


def _fast_corners(img, threshold):
    """Segment-test corners with NMS; returns (xs, ys, responses)."""
    img = np.asarray(img)
    h, w = img.shape
    if h < 7 or w < 7:
        return np.empty(0, int), np.empty(0, int), np.empty(0)
    center = img[3:h - 3, 3:w - 3].astype(np.int16)
    ih, iw = center.shape
    diffs = np.empty((16, ih, iw), dtype=np.int16)
    for k, (dx, dy) in enumerate(CIRCLE):
        diffs[k] = img[3 + dy:3 + dy + ih, 3 + dx:3 + dx + iw]
        diffs[k] -= center

    bright_bits = np.zeros((ih, iw), dtype=np.uint16)
    dark_bits = np.zeros((ih, iw), dtype=np.uint16)
    for k in range(16):
        bright_bits |= (diffs[k] > threshold).astype(np.uint16) << k
        dark_bits |= (diffs[k] < -threshold).astype(np.uint16) << k
    lut = _segment_lut()
    cand = lut[bright_bits] | lut[dark_bits]
    cy, cx = np.nonzero(cand)
    if len(cy) == 0:
        return np.empty(0, int), np.empty(0, int), np.empty(0)

    dc = diffs[:, cy, cx].T.astype(np.int32)
    absd = np.abs(dc)
    score = np.maximum(
        _max_arc_sums(dc > threshold, absd),
        _max_arc_sums(dc < -threshold, absd),
    )

    score_map = np.zeros((h, w))
    ys, xs = cy + 3, cx + 3
    score_map[ys, xs] = score
    local_max = score_map.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dx == 0 and dy == 0:
                continue
            shifted = np.zeros_like(score_map)
            ys0, ys1 = max(0, dy), min(h, h + dy)
            xs0, xs1 = max(0, dx), min(w, w + dx)
            shifted[ys0:ys1, xs0:xs1] = score_map[ys0 - dy:ys1 - dy, xs0 - dx:xs1 - dx]
            np.maximum(local_max, shifted, out=local_max)
    keep = score_map[ys, xs] >= local_max[ys, xs]
    xs, ys, score = xs[keep], ys[keep], score[keep]
    # subpixel peak of the response surface (separable parabola fit)
    sx = _parabola_offset(score_map[ys, xs - 1], score, score_map[ys, xs + 1])
    sy = _parabola_offset(score_map[ys - 1, xs], score, score_map[ys + 1, xs])
    return xs + sx, ys + sy, score


def _parabola_offset(s_minus, s_center, s_plus):
    den = s_minus + s_plus - 2.0 * s_center
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(den < 0, (s_minus - s_plus) / (2.0 * den), 0.0)
    return np.clip(off, -0.5, 0.5)


def detect_fast(img, threshold):
    """Segment-test corner detection on a single grayscale image."""
    if not 1 <= threshold <= 254:
        raise ValueError("threshold must be in [1, 254]")
    xs, ys, resp = _fast_corners(img, int(threshold))
    return [
        Keypoint(x=float(x), y=float(y), octave=0, response=float(r))
        for x, y, r in zip(xs, ys, resp)
    ]


_ORIENT_MASK = None


def _orient_weights():
    global _ORIENT_MASK
    if _ORIENT_MASK is None:
        r = ORIENT_RADIUS
        dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
        inside = dx * dx + dy * dy <= r * r
        _ORIENT_MASK = (dx * inside, dy * inside)
    return _ORIENT_MASK


def _orientations(img, xs, ys):
    """Intensity-centroid angle for integer keypoint positions (vectorized)."""
    xw, yw = _orient_weights()
    r = ORIENT_RADIUS
    offs = np.arange(-r, r + 1)
    py = ys[:, None, None] + offs[None, :, None]
    px = xs[:, None, None] + offs[None, None, :]
    patches = img[py, px].astype(np.float64)
    m10 = (patches * xw[None]).sum(axis=(1, 2))
    m01 = (patches * yw[None]).sum(axis=(1, 2))
    angles = np.mod(np.arctan2(m01, m10), 2.0 * math.pi)
    angles[(m10 == 0) & (m01 == 0)] = 0.0  # symmetric patch convention
    return angles


def orient(img, kp: Keypoint):
    """Orientation of one keypoint; the radius-15 patch must be in bounds."""
    img = np.asarray(img)
    x, y = int(round(kp.x)), int(round(kp.y))
    r = ORIENT_RADIUS
    if not (r <= x < img.shape[1] - r and r <= y < img.shape[0] - r):
        raise ValueError("orientation patch out of bounds")
    return float(_orientations(img, np.array([x]), np.array([y]))[0])


def _box_sums(img):
    """Integral-image 7x7 box sums; valid where the box is fully inside."""
    ii = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.int64)
    np.cumsum(np.cumsum(img, axis=0, dtype=np.int64), axis=1, out=ii[1:, 1:])
    r = BLUR_RADIUS
    h, w = img.shape
    out = np.zeros((h, w), dtype=np.int64)
    out[r:h - r, r:w - r] = (
        ii[2 * r + 1:h + 1, 2 * r + 1:w + 1]
        - ii[2 * r + 1:h + 1, 0:w - 2 * r]
        - ii[0:h - 2 * r, 2 * r + 1:w + 1]
        + ii[0:h - 2 * r, 0:w - 2 * r]
    )
    return out


def _describe(box, xs, ys, angles):
    """256-bit descriptors from box-smoothed intensity comparisons."""
    p0, p1 = _steered_patterns()
    bins = np.rint(angles / (2.0 * math.pi / N_ANGLE_BINS)).astype(int) % N_ANGLE_BINS
    q0 = p0[bins]  # (n, 256, 2)
    q1 = p1[bins]
    s0 = box[ys[:, None] + q0[:, :, 1], xs[:, None] + q0[:, :, 0]]
    s1 = box[ys[:, None] + q1[:, :, 1], xs[:, None] + q1[:, :, 0]]
    bits = (s0 < s1).astype(np.uint8)
    return np.packbits(bits, axis=1, bitorder="little")


def _bilinear_resize(img, out_w, out_h):
    h, w = img.shape
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :]
    fy = (ys - y0)[:, None]
    img = img.astype(np.float64)
    top = img[y0[:, None], x0[None, :]] * (1 - fx) + img[y0[:, None], x1[None, :]] * fx
    bot = img[y1[:, None], x0[None, :]] * (1 - fx) + img[y1[:, None], x1[None, :]] * fx
    return np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255).astype(np.uint8)


def pyramid_dims(width, height, n_levels, scale_factor):
    dims = []
    for k in range(n_levels):
        s = scale_factor**k
        dims.append((int(width / s), int(height / s)))
    return dims


def build_pyramid(img, n_levels, scale_factor):
    """Scale pyramid; level k has dimensions floor(dim / scale_factor**k)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("pyramid input must be grayscale")
    h, w = img.shape
    if min(h, w) < 64:
        raise ImageTooSmall(f"level 0 is {w}x{h}, need at least 64x64")
    dims = pyramid_dims(w, h, n_levels, scale_factor)
    for k, (dw, dh) in enumerate(dims):
        if min(dw, dh) < 32:
            raise ImageTooSmall(f"level {k} would be {dw}x{dh}, below 32x32")
    levels = [img]
    for dw, dh in dims[1:]:
        levels.append(_bilinear_resize(levels[-1], dw, dh))
    return levels


def _level_transforms(dims):
    """Affine (a, b) per level mapping level coords to level-0: x0 = a*x + b."""
    out = [(1.0, 0.0, 1.0, 0.0)]
    ax = bx = ay = by = None
    for k in range(1, len(dims)):
        sx = dims[k - 1][0] / dims[k][0]
        sy = dims[k - 1][1] / dims[k][1]
        pax, pbx, pay, pby = out[-1]
        # one resize step maps x -> sx*x + 0.5*(sx - 1)
        ax = pax * sx
        bx = pax * 0.5 * (sx - 1) + pbx
        ay = pay * sy
        by = pay * 0.5 * (sy - 1) + pby
        out.append((ax, bx, ay, by))
    return out


def _too_close(occupied, x, y, min_d, bucket):
    bx, by = int(x // bucket), int(y // bucket)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for px, py in occupied.get((bx + dx, by + dy), ()):
                if (px - x) ** 2 + (py - y) ** 2 < min_d * min_d:
                    return True
    return False


def orb_detect_and_describe(img, cfg: OrbConfig | None = None):
    """Detect oriented corners over a scale pyramid and describe them.

    Returns (keypoints, descriptors): keypoints in level-0 coordinates in
    canonical order (octave, response descending, x, y) and a matching
    (n, 32) uint8 descriptor array. At most ``cfg.n_features`` keypoints
    are kept, spread over the spatial grid best-response-first.
    """
    cfg = cfg or OrbConfig()
    img = np.asarray(img)
    if img.ndim == 3:
        from .imgproc import to_gray

        img = to_gray(img)
    levels = build_pyramid(img, cfg.n_levels, cfg.scale_factor)
    margin = patch_margin()
    transforms = _level_transforms([(l.shape[1], l.shape[0]) for l in levels])

    recs = []  # (x0, y0, octave, response, angle, descriptor)
    for octave, level in enumerate(levels):
        h, w = level.shape
        xs, ys, resp = _fast_corners(level, cfg.fast_threshold)
        xi = np.rint(xs).astype(int)
        yi = np.rint(ys).astype(int)
        keep = (
            (xi >= margin) & (xi < w - margin) & (yi >= margin) & (yi < h - margin)
        )
        xs, ys, xi, yi, resp = xs[keep], ys[keep], xi[keep], yi[keep], resp[keep]
        if len(xs) == 0:
            continue
        angles = _orientations(level, xi, yi)
        descs = _describe(_box_sums(level), xi, yi, angles)
        ax, bx, ay, by = transforms[octave]
        x0 = ax * xs + bx
        y0 = ay * ys + by
        for i in range(len(xs)):
            recs.append((x0[i], y0[i], octave, resp[i], angles[i], descs[i]))

    if not recs:
        return [], np.empty((0, 32), dtype=np.uint8)

    h0, w0 = levels[0].shape
    gx, gy = cfg.grid
    cap = max(1, math.ceil(cfg.n_features / (gx * gy)))
    order = sorted(range(len(recs)), key=lambda i: (-recs[i][3], recs[i][2], recs[i][0], recs[i][1]))
    cell_counts = np.zeros((gy, gx), dtype=int)
    min_d = cfg.min_distance
    bucket = max(min_d, 1.0)
    occupied: dict[tuple[int, int], list[tuple[float, float]]] = {}
    selected = []
    for i in order:
        x, y = recs[i][0], recs[i][1]
        cx = min(int(x * gx / w0), gx - 1)
        cy = min(int(y * gy / h0), gy - 1)
        if cell_counts[cy, cx] >= cap:
            continue
        if min_d > 0 and _too_close(occupied, x, y, min_d, bucket):
            continue
        cell_counts[cy, cx] += 1
        occupied.setdefault((int(x // bucket), int(y // bucket)), []).append((x, y))
        selected.append(i)
    selected = selected[: cfg.n_features]

    selected.sort(key=lambda i: (recs[i][2], -recs[i][3], recs[i][0], recs[i][1]))
    kps = [
        Keypoint(x=float(recs[i][0]), y=float(recs[i][1]), octave=recs[i][2],
                 response=float(recs[i][3]), angle=float(recs[i][4]))
        for i in selected
    ]
    descs = np.array([recs[i][5] for i in selected], dtype=np.uint8)
    return kps, descs


def dump_keypoints(kps, descs):
    """Debug dump, one `x y octave angle response hex(descriptor)` line each."""
    lines = []
    for kp, d in zip(kps, descs):
        lines.append(
            f"{kp.x:.3f} {kp.y:.3f} {kp.octave} {kp.angle:.6f} "
            f"{kp.response:.3f} {bytes(d).hex()}"
        )
    return "\n".join(lines)
