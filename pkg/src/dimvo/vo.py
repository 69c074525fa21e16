"""Minimal monocular visual-odometry tracker.

State machine over a frame stream: two-view initialization from a
fundamental-matrix RANSAC, per-frame camera pose from PnP against the
triangulated landmark map, keyframe insertion when the tracked-inlier
count decays, and an explicit per-frame status so downstream metrics can
measure how long tracking survived. Scale is arbitrary (norm of the
initial baseline), as for any single-camera pipeline.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import imgproc
from .dataio import Trajectory
from .errors import (
    CheiralityAmbiguous,
    DegenerateConfiguration,
    DivergedBehindCamera,
    NoConsensus,
    TooFewMatches,
    TooFewPoints,
    ZeroBaseline,
)
from .features import OrbConfig, orb_detect_and_describe
from .geometry import (
    PoseSE3,
    decompose_essential,
    essential_from_fundamental,
    normalize_pixels,
    pnp,
    project,
    refine_pose,
    triangulate,
    triangulate_many,
)
from .matching import match_ratio, ransac_fundamental


class FrameStatus(enum.Enum):
    NOT_INITIALIZED = "not_initialized"
    INITIALIZING = "initializing"
    TRACKING = "tracking"
    LOST = "lost"


@dataclass
class VoConfig:
    min_init_inliers: int = 100
    min_track_inliers: int = 15
    keyframe_inlier_ratio: float = 0.5
    # a marginally tracked frame may keep the trajectory alive, but only a
    # well-constrained pose is allowed to extend the map, and bursts of
    # keyframes compound pose noise into the map, so space them out
    keyframe_min_inliers: int = 30
    keyframe_cooldown: int = 8
    reproj_threshold_px: float = 2.0
    lost_patience: int = 20
    match_ratio: float = 0.8
    min_parallax_deg: float = 1.0
    # landmark depth error scales with 1/parallax, so initialization waits
    # until the median triangulation angle clears this bar, and landmarks
    # added later (whose baselines are whatever the keyframe spacing gives)
    # must individually clear it too
    min_median_parallax_deg: float = 3.0
    cull_window: int = 50
    # hold the initialization reference this many frames so the baseline
    # can grow; slide it sooner if the views stop sharing content
    init_window: int = 60
    ransac_threshold_px: float = 1.0
    ransac_confidence: float = 0.999
    ransac_max_iters: int = 500
    enhancer: imgproc.EnhancerConfig = field(default_factory=imgproc.EnhancerConfig)
    orb: OrbConfig = field(default_factory=OrbConfig)

    def __post_init__(self):
        if self.min_init_inliers < 8:
            raise ValueError("min_init_inliers must be >= 8")
        for name in ("min_track_inliers", "keyframe_inlier_ratio",
                     "reproj_threshold_px", "lost_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ProcessedFrame:
    """One frame after enhancement and feature extraction."""

    frame_id: int
    timestamp: float
    keypoints: list
    descriptors: np.ndarray

    def xy(self):
        return np.array([(k.x, k.y) for k in self.keypoints]).reshape(-1, 2)


@dataclass
class Landmark:
    position: np.ndarray
    observations: list
    descriptor: np.ndarray
    last_seen: int = 0
    # first-observation ray, kept so the point can be re-triangulated
    # against a later keyframe once a wider baseline is available
    ref_pose: PoseSE3 | None = None
    ref_norm: np.ndarray | None = None
    tri_parallax_deg: float = 0.0


@dataclass
class KeyframeEntry:
    frame: ProcessedFrame
    pose: PoseSE3
    bound: set[int]  # keypoint indices already tied to landmarks


@dataclass
class TrackState:
    """Map, keyframes and bookkeeping of an initialized tracker."""

    landmarks: list[Landmark]
    keyframes: list[tuple[int, PoseSE3]]
    poses: dict[int, PoseSE3]
    kf_history: list[KeyframeEntry]
    kf_baseline: int
    tracked_count: int = 0
    last_pose: PoseSE3 | None = None

    # keyframes kept around as triangulation partners
    HISTORY = 5


def _triangulated_landmarks(frame_a, frame_b, pose_a, pose_b, matches, k, cfg,
                            first_seen):
    """Triangulate matches and keep the geometrically sound ones.

    Returns (landmarks, kept matches, median parallax of the kept set in
    degrees).
    """
    if not matches:
        return [], [], 0.0
    xy_a = frame_a.xy()[[m.idx_a for m in matches]]
    xy_b = frame_b.xy()[[m.idx_b for m in matches]]
    na = normalize_pixels(k, xy_a)
    nb = normalize_pixels(k, xy_b)
    try:
        pts = triangulate_many(pose_a, pose_b, na, nb)
    except ZeroBaseline:
        return [], [], 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        z_a = pose_a.apply(pts)[:, 2]
        z_b = pose_b.apply(pts)[:, 2]
        ok = (z_a > 0) & (z_b > 0) & np.isfinite(pts).all(axis=1)
        err_a = np.linalg.norm(project(pose_a, k, pts) - xy_a, axis=1)
        err_b = np.linalg.norm(project(pose_b, k, pts) - xy_b, axis=1)
        ok &= (err_a <= cfg.reproj_threshold_px) & (err_b <= cfg.reproj_threshold_px)
        ray_a = pts - pose_a.center()
        ray_b = pts - pose_b.center()
        cosang = np.sum(ray_a * ray_b, axis=1) / (
            np.linalg.norm(ray_a, axis=1) * np.linalg.norm(ray_b, axis=1)
        )
        parallax = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
        ok &= parallax > cfg.min_parallax_deg
    landmarks = []
    kept = []
    for i in np.nonzero(ok)[0]:
        m = matches[i]
        landmarks.append(Landmark(
            position=pts[i],
            observations=[(frame_a.frame_id, m.idx_a), (frame_b.frame_id, m.idx_b)],
            descriptor=frame_a.descriptors[m.idx_a],
            last_seen=first_seen,
            ref_pose=pose_a,
            ref_norm=na[i],
            tri_parallax_deg=float(parallax[i]),
        ))
        kept.append(m)
    median_par = float(np.median(parallax[ok])) if np.any(ok) else 0.0
    return landmarks, kept, median_par


def try_initialize(frame_a: ProcessedFrame, frame_b: ProcessedFrame, k,
                   cfg: VoConfig, seed=42):
    """Two-view initialization; returns (pose_b, landmarks) or None (pending).

    The pose of frame_b is relative to frame_a with unit baseline norm.
    Landmarks must triangulate in front of both views, reproject within
    the threshold, and subtend enough parallax; low-parallax pairs (pure
    rotation) come out under ``min_init_inliers`` and stay pending.
    """
    return _try_initialize_counted(frame_a, frame_b, k, cfg, seed)[0]


def _try_initialize_counted(frame_a, frame_b, k, cfg, seed):
    matches = match_ratio(frame_a.descriptors, frame_b.descriptors, cfg.match_ratio)
    n_matches = len(matches)
    if n_matches < max(8, cfg.min_init_inliers // 4):
        return None, n_matches
    try:
        res = ransac_fundamental(
            matches, frame_a.keypoints, frame_b.keypoints,
            cfg.ransac_threshold_px, cfg.ransac_confidence,
            cfg.ransac_max_iters, seed,
        )
    except (TooFewMatches, NoConsensus, DegenerateConfiguration):
        return None, n_matches
    inlier_matches = [m for m, keep in zip(matches, res.inlier_mask) if keep]
    e = essential_from_fundamental(res.f, k, k)
    xy_a = frame_a.xy()[[m.idx_a for m in inlier_matches]]
    xy_b = frame_b.xy()[[m.idx_b for m in inlier_matches]]
    na = normalize_pixels(k, xy_a)
    nb = normalize_pixels(k, xy_b)
    try:
        pose_b = decompose_essential(e, na, nb)
    except CheiralityAmbiguous:
        return None, n_matches
    pose_b = _polish_two_view(pose_b, na, nb, xy_b, k, cfg)
    landmarks, _, median_par = _triangulated_landmarks(
        frame_a, frame_b, PoseSE3.identity(), pose_b, inlier_matches, k, cfg,
        first_seen=0,
    )
    if len(landmarks) < cfg.min_init_inliers:
        return None, n_matches
    if median_par < cfg.min_median_parallax_deg:
        return None, n_matches
    return (pose_b, landmarks), n_matches


def _polish_two_view(pose_b, na, nb, xy_b, k, cfg, max_rounds=25):
    """Alternate triangulation and motion-only refinement of the second view.

    The linear essential-matrix pose is noisy at narrow baselines; this
    coordinate descent between structure and the second pose tightens it
    while keeping the unit baseline gauge. Converges slowly, so give it
    a generous round budget with an early stop.
    """
    identity = PoseSE3.identity()
    for _ in range(max_rounds):
        try:
            pts = triangulate_many(identity, pose_b, na, nb)
        except ZeroBaseline:
            break
        with np.errstate(invalid="ignore", divide="ignore"):
            ok = (pts[:, 2] > 0) & (pose_b.apply(pts)[:, 2] > 0)
            ok &= np.isfinite(pts).all(axis=1)
            err_b = np.linalg.norm(project(pose_b, k, pts) - xy_b, axis=1)
        ok &= err_b <= 2.0 * cfg.reproj_threshold_px
        if ok.sum() < 20:
            break
        try:
            refined = refine_pose(pose_b, pts[ok], xy_b[ok], k)
        except (TooFewPoints, DivergedBehindCamera):
            break
        norm = np.linalg.norm(refined.t)
        if norm < 1e-12:
            break
        new_pose = PoseSE3(refined.r, refined.t / norm)
        step = np.linalg.norm(new_pose.t - pose_b.t) + np.linalg.norm(
            new_pose.r - pose_b.r
        )
        pose_b = new_pose
        if step < 1e-6:
            break
    return pose_b


def _refine_with_trim(pose, pts3d, pts2d, k, cfg):
    """Refine a pose, dropping reprojection outliers between rounds."""
    inliers = None
    for _ in range(2):
        err = np.linalg.norm(project(pose, k, pts3d) - pts2d, axis=1)
        inliers = err <= cfg.reproj_threshold_px
        if inliers.sum() < cfg.min_track_inliers:
            return None, 0
        if inliers.all():
            break
        try:
            pose = refine_pose(pose, pts3d[inliers], pts2d[inliers], k)
        except (TooFewPoints, DivergedBehindCamera):
            return None, 0
    return pose, int(inliers.sum())


def track_frame(state: TrackState, frame: ProcessedFrame, k, cfg: VoConfig):
    """Localize one frame against the landmark map.

    Solves a fresh linear PnP on the 3D-2D matches, falling back to
    refinement seeded from the last tracked pose when the linear solve
    fails or keeps too few inliers (the usual case for a brief matching
    dip). Returns (state, status, n_inliers); losing the frame leaves
    the map untouched so later frames can still relocalize against it.
    """
    if not state.landmarks or len(frame.keypoints) == 0:
        return state, FrameStatus.LOST, 0
    lm_desc = np.stack([lm.descriptor for lm in state.landmarks])
    matches = match_ratio(lm_desc, frame.descriptors, cfg.match_ratio)
    if len(matches) < max(6, cfg.min_track_inliers):
        return state, FrameStatus.LOST, 0
    pts3d = np.array([state.landmarks[m.idx_a].position for m in matches])
    pts2d = frame.xy()[[m.idx_b for m in matches]]

    pose, n_inliers = None, 0
    try:
        cand = pnp(pts3d, pts2d, k).pose
        pose, n_inliers = _refine_with_trim(cand, pts3d, pts2d, k, cfg)
    except (TooFewPoints, DegenerateConfiguration, DivergedBehindCamera):
        pass
    if (pose is None or n_inliers < 2 * cfg.min_track_inliers) \
            and state.last_pose is not None:
        prior, n_prior = _refine_with_trim(state.last_pose, pts3d, pts2d, k, cfg)
        if prior is not None and n_prior > n_inliers:
            pose, n_inliers = prior, n_prior
    if pose is None or n_inliers < cfg.min_track_inliers:
        return state, FrameStatus.LOST, 0

    err = np.linalg.norm(project(pose, k, pts3d) - pts2d, axis=1)
    inliers = err <= cfg.reproj_threshold_px
    n_inliers = int(inliers.sum())

    state.tracked_count += 1
    state.poses[frame.frame_id] = pose
    state.last_pose = pose
    for m, good in zip(matches, inliers):
        if good:
            lm = state.landmarks[m.idx_a]
            lm.last_seen = state.tracked_count
            lm.observations.append((frame.frame_id, m.idx_b))

    last_kf_id = state.keyframes[-1][0] if state.keyframes else -(10**9)
    if (n_inliers < cfg.keyframe_inlier_ratio * state.kf_baseline
            and n_inliers >= cfg.keyframe_min_inliers
            and frame.frame_id - last_kf_id >= cfg.keyframe_cooldown):
        _insert_keyframe(state, frame, pose, matches, inliers, k, cfg)

    state.landmarks = [
        lm for lm in state.landmarks
        if state.tracked_count - lm.last_seen <= cfg.cull_window
    ]
    return state, FrameStatus.TRACKING, n_inliers


MIN_NEW_LANDMARKS = 10


def _triangulate_against(entry: KeyframeEntry, frame, pose, bound_cur, k, cfg,
                         first_seen):
    free_kf = [i for i in range(len(entry.frame.keypoints)) if i not in entry.bound]
    free_cur = [i for i in range(len(frame.keypoints)) if i not in bound_cur]
    if not free_kf or not free_cur:
        return [], []
    sub = match_ratio(entry.frame.descriptors[free_kf],
                      frame.descriptors[free_cur], cfg.match_ratio)
    for m in sub:  # map back to full index space
        m.idx_a = free_kf[m.idx_a]
        m.idx_b = free_cur[m.idx_b]
    new_lms, kept, _ = _triangulated_landmarks(
        entry.frame, frame, entry.pose, pose, sub, k, cfg, first_seen=first_seen
    )
    return new_lms, kept


def _insert_keyframe(state, frame, pose, matches, inliers, k, cfg):
    """Triangulate fresh landmarks and promote the frame to keyframe.

    New points must clear the strict parallax bar (narrow-baseline depths
    poison the map), so triangulation partners are picked from the recent
    keyframe history, oldest first, where baselines are widest. If no pair
    yields a useful batch the old keyframes stay in place and the attempt
    repeats on the next frame.
    """
    bound_cur = {m.idx_b for m, good in zip(matches, inliers) if good}
    strict = replace(cfg, min_parallax_deg=max(cfg.min_parallax_deg,
                                               cfg.min_median_parallax_deg))
    # oldest partner first: the widest baseline gives the best depths
    best: tuple[list, list] | None = None
    for entry in state.kf_history:
        new_lms, kept = _triangulate_against(
            entry, frame, pose, bound_cur, k, strict, state.tracked_count
        )
        if len(new_lms) >= MIN_NEW_LANDMARKS:
            best = (new_lms, kept)
            break
        if best is None or len(new_lms) > len(best[0]):
            best = (new_lms, kept)
    if best is None or len(best[0]) < MIN_NEW_LANDMARKS:
        return
    new_lms, kept = best
    state.landmarks.extend(new_lms)
    bound_cur |= {m.idx_b for m in kept}
    state.keyframes.append((frame.frame_id, pose))
    state.kf_history.append(KeyframeEntry(frame, pose, bound_cur))
    del state.kf_history[:-TrackState.HISTORY]
    state.kf_baseline = int(inliers.sum()) + len(new_lms)


@dataclass
class FrameRecord:
    frame: int
    timestamp: float
    status: str
    n_inliers: int


@dataclass
class VoResult:
    trajectory: Trajectory
    records: list[FrameRecord]
    init_time: float | None
    tracking_fraction: float


def process_frames(seq, cfg: VoConfig, threads=1, workdir=None):
    """Enhance, grayscale and extract features for every frame."""
    from .matching import _detect_all, _enhanced_gray_frames

    grays = _enhanced_gray_frames(seq, cfg.enhancer, workdir, threads)
    feats = _detect_all(grays, cfg.orb, threads)
    return [
        ProcessedFrame(i, seq.frames[i][0], kps, descs)
        for i, (kps, descs) in enumerate(feats)
    ]


def run_vo(seq, cfg: VoConfig | None = None, seed=42, threads=1, workdir=None,
           progress=None):
    """Run the tracker over a sequence.

    Returns the estimated trajectory (TUM convention, camera-in-world, only
    for tracked frames), one status record per frame, and the timestamp of
    the first tracked frame. Deterministic for a fixed seed.
    """
    cfg = cfg or VoConfig()
    k = seq.intrinsics.k
    frames = process_frames(seq, cfg, threads, workdir)

    statuses: list[tuple[FrameStatus, int]] = []
    all_poses: dict[int, PoseSE3] = {}
    state = None
    ref = None
    lost_streak = 0
    for f in frames:
        if state is None:
            if ref is None:
                statuses.append((FrameStatus.NOT_INITIALIZED, 0))
                ref = f
                continue
            init, n_matches = _try_initialize_counted(
                ref, f, k, cfg, seed=[seed, f.frame_id]
            )
            if init is None:
                statuses.append((FrameStatus.INITIALIZING, 0))
                # slide the reference once the views diverge or the window fills
                if (n_matches < max(8, cfg.min_init_inliers // 4)
                        or f.frame_id - ref.frame_id >= cfg.init_window):
                    ref = f
                continue
            pose_b, landmarks = init
            n = len(landmarks)
            # both initialization frames count as tracked
            statuses[ref.frame_id] = (FrameStatus.TRACKING, n)
            statuses.append((FrameStatus.TRACKING, n))
            all_poses[ref.frame_id] = PoseSE3.identity()
            all_poses[f.frame_id] = pose_b
            bound_a = {obs[1] for lm in landmarks for obs in lm.observations
                       if obs[0] == ref.frame_id}
            bound_b = {obs[1] for lm in landmarks for obs in lm.observations
                       if obs[0] == f.frame_id}
            state = TrackState(
                landmarks=landmarks,
                keyframes=[(ref.frame_id, PoseSE3.identity()), (f.frame_id, pose_b)],
                poses={ref.frame_id: PoseSE3.identity(), f.frame_id: pose_b},
                kf_history=[
                    KeyframeEntry(ref, PoseSE3.identity(), bound_a),
                    KeyframeEntry(f, pose_b, bound_b),
                ],
                kf_baseline=n,
                last_pose=pose_b,
            )
            lost_streak = 0
        else:
            state, status, n = track_frame(state, f, k, cfg)
            statuses.append((status, n))
            if status == FrameStatus.TRACKING:
                all_poses[f.frame_id] = state.poses[f.frame_id]
                lost_streak = 0
            else:
                lost_streak += 1
                if lost_streak >= cfg.lost_patience:
                    state = None
                    ref = None
        if progress:
            progress(f"frame {f.frame_id}: {statuses[-1][0].value} "
                     f"({statuses[-1][1]} inliers)")

    records = [
        FrameRecord(i, frames[i].timestamp, statuses[i][0].value, statuses[i][1])
        for i in range(len(frames))
    ]
    samples = []
    for i in range(len(frames)):
        if statuses[i][0] == FrameStatus.TRACKING:
            cam_in_world = all_poses[i].inverse()
            samples.append((frames[i].timestamp, cam_in_world))
    n_tracking = sum(1 for s, _ in statuses if s == FrameStatus.TRACKING)
    init_time = next(
        (frames[i].timestamp for i in range(len(frames))
         if statuses[i][0] == FrameStatus.TRACKING),
        None,
    )
    return VoResult(
        trajectory=Trajectory(samples),
        records=records,
        init_time=init_time,
        tracking_fraction=n_tracking / max(1, len(frames)),
    )


def write_status_csv(records, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "timestamp", "status", "n_inliers"])
        for r in records:
            w.writerow([r.frame, f"{r.timestamp:.9f}", r.status, r.n_inliers])


def read_status_csv(path):
    import csv

    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(FrameRecord(
                frame=int(row["frame"]),
                timestamp=float(row["timestamp"]),
                status=row["status"],
                n_inliers=int(row["n_inliers"]),
            ))
    return records
