"""Calibrated two-view geometry and pose estimation.

Pose convention: a ``PoseSE3`` maps world coordinates into camera
coordinates, ``x_cam = R @ x_world + t``. All projections assume
pre-rectified images (zero distortion); only fx, fy, cx, cy are used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DivergedBehindCamera,
    TooFewPoints,
    ZeroBaseline,
)

ORTHONORMAL_TOL = 1e-9


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1.0
        out = u @ vt
    return out


@dataclass
class PoseSE3:
    """Rigid transform with a proper rotation (det +1)."""

    r: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if self.r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.r.shape}")
        err = np.abs(self.r.T @ self.r - np.eye(3)).max()
        if err > ORTHONORMAL_TOL or abs(np.linalg.det(self.r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal with det +1")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, r, t):
        """Build a pose, re-orthonormalizing r against numerical drift."""
        return cls(_orthonormalize(np.asarray(r, dtype=np.float64)), t)

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def inverse(self):
        return PoseSE3(self.r.T, -self.r.T @ self.t)

    def apply(self, pts):
        """Transform (3,) or (n, 3) points."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.r.T + self.t

    def center(self):
        """Camera center expressed in world coordinates."""
        return -self.r.T @ self.t


def quat_to_rot(q):
    """Unit quaternion (qx, qy, qz, qw) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat(r):
    """Rotation matrix to unit quaternion (qx, qy, qz, qw), qw >= 0."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (r[2, 1] - r[1, 2]) / s
        y = (r[0, 2] - r[2, 0]) / s
        z = (r[1, 0] - r[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(r)))
        if i == 0:
            s = np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
            w = (r[2, 1] - r[1, 2]) / s
            x = 0.25 * s
            y = (r[0, 1] + r[1, 0]) / s
            z = (r[0, 2] + r[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2]) * 2.0
            w = (r[0, 2] - r[2, 0]) / s
            x = (r[0, 1] + r[1, 0]) / s
            y = 0.25 * s
            z = (r[1, 2] + r[2, 1]) / s
        else:
            s = np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2]) * 2.0
            w = (r[1, 0] - r[0, 1]) / s
            x = (r[0, 2] + r[2, 0]) / s
            y = (r[1, 2] + r[2, 1]) / s
            z = 0.25 * s
    q = np.array([x, y, z, w])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def so3_exp(w):
    """Rodrigues formula: axis-angle 3-vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    k = skew(w)
    if theta < 1e-12:
        return np.eye(3) + k + 0.5 * (k @ k)
    return (
        np.eye(3)
        + (np.sin(theta) / theta) * k
        + ((1.0 - np.cos(theta)) / theta**2) * (k @ k)
    )


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_angle(r):
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project(pose: PoseSE3, k, pts3d):
    """Project (n, 3) world points to pixels through a pinhole camera."""
    k = np.asarray(k, dtype=np.float64)
    p = pose.apply(pts3d)
    z = p[..., 2]
    u = k[0, 0] * p[..., 0] / z + k[0, 2]
    v = k[1, 1] * p[..., 1] / z + k[1, 2]
    return np.stack([u, v], axis=-1)


def normalize_pixels(k, pts2d):
    """Pixels to normalized image coordinates through K^-1."""
    k = np.asarray(k, dtype=np.float64)
    pts2d = np.asarray(pts2d, dtype=np.float64)
    x = (pts2d[..., 0] - k[0, 2]) / k[0, 0]
    y = (pts2d[..., 1] - k[1, 2]) / k[1, 1]
    return np.stack([x, y], axis=-1)


def essential_from_fundamental(f, k_a, k_b):
    """E = Kb^T F Ka with singular values projected to (1, 1, 0).

    The result has unit Frobenius norm, so its nonzero singular values
    are both 1/sqrt(2).
    """
    k_a = np.asarray(k_a, dtype=np.float64)
    k_b = np.asarray(k_b, dtype=np.float64)
    e = k_b.T @ np.asarray(f, dtype=np.float64) @ k_a
    u, _, vt = np.linalg.svd(e)
    s = np.array([1.0, 1.0, 0.0]) / np.sqrt(2.0)
    return u @ np.diag(s) @ vt


def decompose_essential(e, pts_a, pts_b):
    """Recover the relative pose (R, t) with ||t|| = 1 from an essential matrix.

    ``pts_a``/``pts_b`` are matched points in normalized image coordinates.
    Among the four (R, t) candidates, the one placing the most triangulated
    points in front of both cameras wins; if no candidate accounts for more
    than half of the points, raises CheiralityAmbiguous.
    """
    pts_a = np.atleast_2d(np.asarray(pts_a, dtype=np.float64))
    pts_b = np.atleast_2d(np.asarray(pts_b, dtype=np.float64))
    if len(pts_a) < 1:
        raise CheiralityAmbiguous("no correspondences to disambiguate with")
    u, _, vt = np.linalg.svd(np.asarray(e, dtype=np.float64))
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    t = t / np.linalg.norm(t)

    pose_a = PoseSE3.identity()
    best = None
    for r, tc in ((r1, t), (r1, -t), (r2, t), (r2, -t)):
        pose_b = PoseSE3.from_rt(r, tc)
        pts = triangulate_many(pose_a, pose_b, pts_a, pts_b)
        z_a = pts[:, 2]
        z_b = pose_b.apply(pts)[:, 2]
        n_good = int(np.count_nonzero((z_a > 0) & (z_b > 0)))
        if best is None or n_good > best[0]:
            best = (n_good, pose_b)
    n_good, pose = best
    if n_good <= 0.5 * len(pts_a):
        raise CheiralityAmbiguous(
            f"best candidate explains only {n_good}/{len(pts_a)} points"
        )
    return pose


def triangulate(pose_a: PoseSE3, pose_b: PoseSE3, pt_a, pt_b):
    """Linear (DLT) triangulation of one correspondence in normalized coords."""
    return triangulate_many(
        pose_a, pose_b, np.asarray(pt_a)[None, :], np.asarray(pt_b)[None, :]
    )[0]


def triangulate_many(pose_a: PoseSE3, pose_b: PoseSE3, pts_a, pts_b):
    """Batched DLT triangulation; returns (n, 3) world points."""
    if np.linalg.norm(pose_a.center() - pose_b.center()) <= 1e-9:
        raise ZeroBaseline("camera centers coincide")
    pa = np.hstack([pose_a.r, pose_a.t[:, None]])
    pb = np.hstack([pose_b.r, pose_b.t[:, None]])
    pts_a = np.asarray(pts_a, dtype=np.float64)
    pts_b = np.asarray(pts_b, dtype=np.float64)
    n = len(pts_a)
    a = np.empty((n, 4, 4))
    a[:, 0] = pts_a[:, 0, None] * pa[2] - pa[0]
    a[:, 1] = pts_a[:, 1, None] * pa[2] - pa[1]
    a[:, 2] = pts_b[:, 0, None] * pb[2] - pb[0]
    a[:, 3] = pts_b[:, 1, None] * pb[2] - pb[1]
    _, _, vt = np.linalg.svd(a)
    x = vt[:, 3, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        return x[:, :3] / x[:, 3:4]


def reprojection_residuals(pose: PoseSE3, pts3d, pts2d, k):
    """Stacked pixel residuals and the analytic Jacobian of the pose.

    The pose increment is (w, dt): R <- exp(w) R and t <- t + dt, so the
    camera point moves as dp = -[R X]x w + dt. Returns (residuals (2n,),
    jacobian (2n, 6)).
    """
    k = np.asarray(k, dtype=np.float64)
    pts3d = np.asarray(pts3d, dtype=np.float64)
    pts2d = np.asarray(pts2d, dtype=np.float64)
    p = pose.apply(pts3d)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    fx, fy = k[0, 0], k[1, 1]
    u = fx * x / z + k[0, 2]
    v = fy * y / z + k[1, 2]
    res = np.stack([u - pts2d[:, 0], v - pts2d[:, 1]], axis=1).reshape(-1)

    n = len(pts3d)
    # d(pixel)/d(camera point)
    dz = np.zeros((n, 2, 3))
    dz[:, 0, 0] = fx / z
    dz[:, 0, 2] = -fx * x / z**2
    dz[:, 1, 1] = fy / z
    dz[:, 1, 2] = -fy * y / z**2
    # d(camera point)/d(w, dt): [-[R X]x | I]
    q = p - pose.t
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    dp = np.zeros((n, 3, 6))
    dp[:, 0, 1] = qz
    dp[:, 0, 2] = -qy
    dp[:, 1, 0] = -qz
    dp[:, 1, 2] = qx
    dp[:, 2, 0] = qy
    dp[:, 2, 1] = -qx
    dp[:, :, 3:] = np.eye(3)
    jac = np.einsum("nij,njk->nik", dz, dp).reshape(-1, 6)
    return res, jac


def reprojection_rms(pose: PoseSE3, pts3d, pts2d, k):
    err = project(pose, k, pts3d) - np.asarray(pts2d, dtype=np.float64)
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def refine_pose(initial: PoseSE3, pts3d, pts2d, k, max_iters=100, tol=1e-10):
    """Gauss-Newton refinement of a camera pose against fixed 3D points.

    Each step is accepted only if it keeps all depths positive and does
    not increase the reprojection RMS (halving the step up to 8 times);
    a step that still leaves a point behind the camera after 8 halvings
    raises DivergedBehindCamera.
    """
    pts3d = np.asarray(pts3d, dtype=np.float64)
    pts2d = np.asarray(pts2d, dtype=np.float64)
    if len(pts3d) < 3:
        raise TooFewPoints(f"need >= 3 points, got {len(pts3d)}")
    pose = initial
    if np.any(pose.apply(pts3d)[:, 2] <= 0):
        raise DivergedBehindCamera("initial pose puts points behind the camera")
    rms = reprojection_rms(pose, pts3d, pts2d, k)
    for _ in range(max_iters):
        res, jac = reprojection_residuals(pose, pts3d, pts2d, k)
        jtj = jac.T @ jac
        jtr = jac.T @ res
        try:
            step = np.linalg.solve(jtj, -jtr)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jtj, -jtr, rcond=None)[0]

        accepted = None
        behind = False
        for half in range(9):
            s = step / (2.0**half)
            cand = PoseSE3.from_rt(so3_exp(s[:3]) @ pose.r, pose.t + s[3:])
            if np.any(cand.apply(pts3d)[:, 2] <= 0):
                behind = True
                continue
            behind = False
            cand_rms = reprojection_rms(cand, pts3d, pts2d, k)
            if cand_rms <= rms:
                accepted = (cand, cand_rms, np.linalg.norm(s))
                break
        if accepted is None:
            if behind:
                raise DivergedBehindCamera("point depth stayed negative after 8 halvings")
            break  # no decreasing step left; stalled at a (local) optimum
        pose, rms, step_norm = accepted
        if step_norm < tol:
            break
    return pose


@dataclass
class PnpResult:
    pose: PoseSE3
    reproj_rms: float
    planar: bool = field(default=False)


def pnp(pts3d, pts2d, k, max_iters=100, tol=1e-12):
    """Camera pose from 3D-2D correspondences (linear solve + refinement).

    Uses a DLT on normalized coordinates for general point clouds
    (>= 6 points) and a plane-homography decomposition when the points
    are coplanar (>= 4 points); either initialization is polished with
    refine_pose. A near-planar cloud makes the 12-parameter DLT
    ill-conditioned, so a DLT solve that fails a sanity check retries
    through the best-fit-plane homography.
    """
    pts3d = np.asarray(pts3d, dtype=np.float64)
    pts2d = np.asarray(pts2d, dtype=np.float64)
    n = len(pts3d)
    if n < 4:
        raise TooFewPoints(f"need >= 4 points, got {n}")

    centered = pts3d - pts3d.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("world points are collinear")
    planar = sv[2] <= 1e-6 * sv[0]

    if planar:
        pose0 = _pnp_planar_init(pts3d, pts2d, k)
    else:
        if n < 6:
            raise TooFewPoints(f"general solve needs >= 6 points, got {n}")
        pose0 = None
        try:
            pose0 = _pnp_dlt_init(pts3d, pts2d, k)
        except DegenerateConfiguration:
            pass
        if pose0 is not None:
            sane = (
                np.all(pose0.apply(pts3d)[:, 2] > 0)
                and reprojection_rms(pose0, pts3d, pts2d, k)
                < 0.25 * (k[0, 2] + k[1, 2])
            )
            if not sane:
                pose0 = None
        if pose0 is None:
            pose0 = _pnp_planar_init(pts3d, pts2d, k)

    pose = refine_pose(pose0, pts3d, pts2d, k, max_iters=max_iters, tol=tol)
    return PnpResult(pose, reprojection_rms(pose, pts3d, pts2d, k), planar)


def _pnp_dlt_init(pts3d, pts2d, k):
    xn = normalize_pixels(k, pts2d)
    n = len(pts3d)
    # normalize world coordinates for conditioning: centroid 0, RMS sqrt(3)
    mu = pts3d.mean(axis=0)
    rms = np.sqrt(np.mean(np.sum((pts3d - mu) ** 2, axis=1)))
    scale = np.sqrt(3.0) / max(rms, 1e-12)
    pn = (pts3d - mu) * scale
    xh = np.hstack([pn, np.ones((n, 1))])
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, 0, None] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -xn[:, 1, None] * xh
    _, _, vt = np.linalg.svd(a)
    p = vt[-1].reshape(3, 4)
    if np.linalg.det(p[:, :3]) < 0:
        p = -p
    u, s, vt3 = np.linalg.svd(p[:, :3])
    r = u @ vt3
    t = p[:, 3] / s.mean()
    # undo the world normalization: x_cam = R (scale (X - mu)) + t
    pose = PoseSE3.from_rt(r, t / scale - r @ mu)
    if np.median(pose.apply(pts3d)[:, 2]) < 0:
        raise DegenerateConfiguration("linear PnP solve put the scene behind the camera")
    return pose


def _pnp_planar_init(pts3d, pts2d, k):
    mu = pts3d.mean(axis=0)
    _, _, vt = np.linalg.svd(pts3d - mu)
    basis = vt.copy()
    if np.linalg.det(basis) < 0:
        basis[2] *= -1.0
    uv = (pts3d - mu) @ basis[:2].T  # in-plane coordinates
    xn = normalize_pixels(k, pts2d)

    n = len(pts3d)
    a = np.zeros((2 * n, 9))
    uvh = np.hstack([uv, np.ones((n, 1))])
    a[0::2, 0:3] = uvh
    a[0::2, 6:9] = -xn[:, 0, None] * uvh
    a[1::2, 3:6] = uvh
    a[1::2, 6:9] = -xn[:, 1, None] * uvh
    _, sv, vt9 = np.linalg.svd(a)
    if sv[7] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("homography system is rank deficient")
    h = vt9[-1].reshape(3, 3)
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    r1 = lam * h[:, 0]
    r2 = lam * h[:, 1]
    t = lam * h[:, 2]
    r = _orthonormalize(np.column_stack([r1, r2, np.cross(r1, r2)]))
    pose_plane = PoseSE3(r, t)
    if np.median((uv @ r[:, :2].T + t)[:, 2]) < 0:
        pose_plane = PoseSE3(_orthonormalize(np.column_stack([-r1, -r2, np.cross(r1, r2)])), -t)
    # compose with the world -> plane-coordinate rotation
    r_full = pose_plane.r @ basis
    t_w = pose_plane.t - r_full @ mu
    return PoseSE3.from_rt(r_full, t_w)
