"""Synthetic imagery with exactly known geometry, shared across tests.

Provides procedural textures (a dead-leaves style mix of disks and smooth
noise), in-plane rotation with its forward correspondence map, and a small
perspective renderer for textured quads so tracker tests have a ground
truth trajectory that is correct by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dimvo.dataio import CameraIntrinsics, Trajectory
from dimvo.features import _bilinear_resize
from dimvo.geometry import PoseSE3


def textured_leaves(size, seed, n_disks=350, lo=30, hi=225):
    """Overlapping random disks plus multi-octave noise; rich in stable corners.

    ``lo``/``hi`` bound the disk intensities; a narrow mid-reflectance range
    mimics an indoor scene whose contrast collapses under the attenuation
    curve of the synthetic darkener.
    """
    rng = np.random.default_rng(seed)
    img = np.full((size, size), (lo + hi) / 2.0)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(n_disks):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(6, 40)
        val = rng.uniform(lo, hi)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[mask] = val
    noise = np.zeros((size, size))
    for cells, weight in ((30, 0.5), (60, 0.3), (120, 0.2)):
        g = rng.uniform(0, 255, (cells, cells)).astype(np.uint8)
        noise += weight * _bilinear_resize(g, size, size)
    noise -= noise.mean()
    span = (hi - lo) / 255.0
    return np.clip(np.rint(img + 0.35 * span * noise), 0, 255).astype(np.uint8)


def rotate_image(img, angle, fill=127):
    """Rotate content by `angle` radians about the image center (bilinear)."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    sx = ca * dx + sa * dy + cx
    sy = -sa * dx + ca * dy + cy
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0
    valid = (x0 >= 0) & (y0 >= 0) & (x0 < w - 1) & (y0 < h - 1)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    f = img.astype(np.float64)
    top = f[y0c, x0c] * (1 - fx) + f[y0c, x0c + 1] * fx
    bot = f[y0c + 1, x0c] * (1 - fx) + f[y0c + 1, x0c + 1] * fx
    out = np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255)
    out[~valid] = fill
    return out.astype(np.uint8)


def rotation_map(pts, angle, width, height):
    """Where rotate_image moves the given points (the correspondence oracle)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ca, sa = np.cos(angle), np.sin(angle)
    dx, dy = pts[:, 0] - cx, pts[:, 1] - cy
    return np.stack([ca * dx - sa * dy + cx, sa * dx + ca * dy + cy], axis=1)


@dataclass
class Quad:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    texture: np.ndarray


def look_at(center, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera pose for a camera at `center` looking at `target`.

    World axes follow the image convention (x right, y down, z forward).
    """
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return PoseSE3.from_rt(r, -r @ center)


def _tex_sample(tex, u, v):
    th, tw = tex.shape
    x = np.clip(u * (tw - 1), 0, tw - 1)
    y = np.clip(v * (th - 1), 0, th - 1)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, tw - 1)
    y1 = np.minimum(y0 + 1, th - 1)
    fx = x - x0
    fy = y - y0
    t = tex.astype(np.float64)
    top = t[y0, x0] * (1 - fx) + t[y0, x1] * fx
    bot = t[y1, x0] * (1 - fx) + t[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def render(quads, pose: PoseSE3, intr: CameraIntrinsics, background=8):
    """Perspective render of textured quads with a z-buffer."""
    w, h = intr.width, intr.height
    img = np.full((h, w), float(background))
    zbuf = np.full((h, w), np.inf)
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                         np.arange(h, dtype=np.float64))
    pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    k = intr.k
    for q in quads:
        c1 = pose.r @ q.e1
        c2 = pose.r @ q.e2
        c3 = pose.r @ q.origin + pose.t
        m = k @ np.column_stack([c1, c2, c3])
        try:
            minv = np.linalg.inv(m)
        except np.linalg.LinAlgError:
            continue
        abw = pix @ minv.T
        with np.errstate(divide="ignore", invalid="ignore"):
            alpha = abw[..., 0] / abw[..., 2]
            beta = abw[..., 1] / abw[..., 2]
        z = c3[2] + alpha * c1[2] + beta * c2[2]
        valid = (
            np.isfinite(alpha) & np.isfinite(beta)
            & (alpha >= 0) & (alpha <= 1) & (beta >= 0) & (beta <= 1)
            & (z > 1e-3) & (z < zbuf)
        )
        if not np.any(valid):
            continue
        sample = _tex_sample(q.texture, alpha[valid], beta[valid])
        img[valid] = sample
        zbuf[valid] = z[valid]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def corner_quads(seed=0, scale=1.0, lo=35, hi=190):
    """Looking into a textured room corner: two oblique walls plus floor.

    The slanted walls keep the visible structure strongly non-planar, which
    a fundamental-matrix-only initializer needs (a dominant fronto-parallel
    plane makes the eight-point problem degenerate).
    """
    s = scale
    return [
        Quad(np.array([0.0, -4.0, 6.5]) * s, np.array([-7.0, 0, -5.0]) * s,
             np.array([0, 8.0, 0]) * s, textured_leaves(512, seed, lo=lo, hi=hi)),
        Quad(np.array([0.0, -4.0, 6.5]) * s, np.array([7.0, 0, -5.0]) * s,
             np.array([0, 8.0, 0]) * s, textured_leaves(512, seed + 1, lo=lo, hi=hi)),
        Quad(np.array([-6.0, 3.6, 0.0]) * s, np.array([12.0, 0, 0]) * s,
             np.array([0, 0, 6.5]) * s, textured_leaves(512, seed + 2, lo=lo, hi=hi)),
        Quad(np.array([-6.0, -3.8, 0.0]) * s, np.array([12.0, 0, 0]) * s,
             np.array([0, 0, 6.5]) * s, textured_leaves(512, seed + 3, lo=lo, hi=hi)),
    ]


def default_intrinsics(width=512, height=384):
    f = 0.85 * width
    return CameraIntrinsics(fx=f, fy=f, cx=(width - 1) / 2.0,
                            cy=(height - 1) / 2.0, width=width, height=height)


def sweep_path(n_frames, fps=20.0, amp=0.28, y_amp=0.35, z_amp=0.45, scale=1.0):
    """Smooth out-and-back camera sweep in front of the corner.

    Mimics slow handheld motion: enough baseline for triangulation, enough
    out-of-line motion for a well-conditioned similarity alignment, and the
    start view stays matchable so the tracker keeps revisiting its initial
    map. Returns a list of (timestamp, world-to-camera pose).
    """
    target = np.array([0.0, 0.0, 6.0]) * scale
    out = []
    for i in range(n_frames):
        phase = 2.0 * np.pi * i / n_frames
        theta = amp * np.sin(phase)
        center = np.array([
            2.2 * np.sin(theta),
            y_amp * np.sin(2.0 * phase) - 0.2,
            z_amp * (0.5 - 0.5 * np.cos(phase)),
        ]) * scale
        out.append((i / fps, look_at(center, target)))
    return out


def render_sequence(n_frames, seed=0, width=512, height=384, scale=1.0):
    """Rendered sweep sequence: (frames, timestamps, gt Trajectory, intrinsics)."""
    quads = corner_quads(seed=seed, scale=scale)
    intr = default_intrinsics(width, height)
    data = sweep_path(n_frames, scale=scale)
    frames = [render(quads, p, intr) for _, p in data]
    gt = Trajectory([(t, p.inverse()) for t, p in data])
    return frames, [t for t, _ in data], gt, intr


def write_sequence(dirpath, frames, timestamps, intr: CameraIntrinsics):
    """Materialize frames as a loadable sequence directory."""
    from dimvo.dataio import write_image

    dirpath.mkdir(parents=True, exist_ok=True)
    images = dirpath / "images"
    images.mkdir(exist_ok=True)
    lines = []
    for i, (t, frame) in enumerate(zip(timestamps, frames)):
        name = f"{i:06d}.png"
        write_image(frame, images / name)
        lines.append(f"{t:.6f} {name}")
    (dirpath / "times.txt").write_text("\n".join(lines) + "\n")
    intr.write(dirpath / "intrinsics.txt")
    return dirpath
