"""Descriptor matching and robust fundamental-matrix estimation.

Hosts the per-sequence match-count benchmark: for each enhancer, count
how many consecutive-frame matches survive geometric verification
(RANSAC inliers of the fundamental matrix under the Sampson distance).
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateConfiguration, NoConsensus, TooFewMatches
from .features import Keypoint, OrbConfig, orb_detect_and_describe

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

DEGENERATE_DISPARITY_PX = 0.5


def hamming(a, b) -> int:
    """Bit difference count between two 32-byte descriptors."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1)
    b = np.asarray(b, dtype=np.uint8).reshape(-1)
    return int(_POPCOUNT[np.bitwise_xor(a, b)].sum())


def hamming_matrix(desc_a, desc_b):
    """Pairwise Hamming distances, (len(a), len(b)) int32."""
    a = np.asarray(desc_a, dtype=np.uint8)
    b = np.asarray(desc_b, dtype=np.uint8)
    out = np.empty((len(a), len(b)), dtype=np.int32)
    block = max(1, 2**22 // max(1, b.size))
    for i in range(0, len(a), block):
        x = np.bitwise_xor(a[i:i + block, None, :], b[None, :, :])
        out[i:i + block] = _POPCOUNT[x].sum(axis=2, dtype=np.int32)
    return out


@dataclass
class Match:
    idx_a: int
    idx_b: int
    distance: int


def match_ratio(desc_a, desc_b, ratio=0.8):
    """Nearest-neighbor matching with ratio test and mutual cross-check.

    A match is kept when the best distance is strictly below ``ratio``
    times the second-best and the pairing is mutual; a lone candidate in
    ``desc_b`` has no second-best and passes the ratio test by default.
    """
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    desc_a = np.asarray(desc_a, dtype=np.uint8)
    desc_b = np.asarray(desc_b, dtype=np.uint8)
    if len(desc_a) == 0 or len(desc_b) == 0:
        return []
    d = hamming_matrix(desc_a, desc_b)
    best_b_for_a = np.argmin(d, axis=1)
    best_a_for_b = np.argmin(d, axis=0)
    d1 = d[np.arange(len(desc_a)), best_b_for_a]
    if d.shape[1] >= 2:
        part = np.partition(d, 1, axis=1)
        d2 = part[:, 1].astype(np.float64)
    else:
        d2 = np.full(len(desc_a), np.inf)
    matches = []
    for i in range(len(desc_a)):
        j = int(best_b_for_a[i])
        if d1[i] < ratio * d2[i] and int(best_a_for_b[j]) == i:
            matches.append(Match(i, j, int(d1[i])))
    return matches


def _as_xy(kps):
    if isinstance(kps, np.ndarray):
        return np.asarray(kps, dtype=np.float64).reshape(-1, 2)
    return np.array([(kp.x, kp.y) for kp in kps], dtype=np.float64).reshape(-1, 2)


def _hartley_normalize(pts):
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    if rms < 1e-12:
        raise DegenerateConfiguration("coincident points")
    s = math.sqrt(2.0) / rms
    t = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return centered * s, t


def eight_point(pts_a, pts_b):
    """Normalized eight-point fundamental matrix.

    Returns a rank-2, unit-Frobenius-norm F with x_b^T F x_a = 0, the sign
    fixed so F[2, 2] >= 0 whenever it is significant.
    """
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    if len(pts_a) < 8:
        raise TooFewMatches(f"need >= 8 correspondences, got {len(pts_a)}")
    na, ta = _hartley_normalize(pts_a)
    nb, tb = _hartley_normalize(pts_b)
    a = np.empty((len(na), 9))
    a[:, 0] = nb[:, 0] * na[:, 0]
    a[:, 1] = nb[:, 0] * na[:, 1]
    a[:, 2] = nb[:, 0]
    a[:, 3] = nb[:, 1] * na[:, 0]
    a[:, 4] = nb[:, 1] * na[:, 1]
    a[:, 5] = nb[:, 1]
    a[:, 6] = na[:, 0]
    a[:, 7] = na[:, 1]
    a[:, 8] = 1.0
    _, sv, vt = np.linalg.svd(a)
    if sv[7] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("design matrix is rank deficient")
    f = vt[-1].reshape(3, 3)
    u, s, vtf = np.linalg.svd(f)
    f = u @ np.diag([s[0], s[1], 0.0]) @ vtf
    f = tb.T @ f @ ta
    f /= np.linalg.norm(f)
    if abs(f[2, 2]) > 1e-12 and f[2, 2] < 0:
        f = -f
    return f


def sampson_distance(f, pts_a, pts_b):
    """First-order epipolar error per correspondence, in pixels."""
    pts_a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 2)
    pts_b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 2)
    ha = np.hstack([pts_a, np.ones((len(pts_a), 1))])
    hb = np.hstack([pts_b, np.ones((len(pts_b), 1))])
    fa = ha @ f.T  # F x_a per row
    fb = hb @ f  # F^T x_b per row
    num = np.sum(hb * fa, axis=1) ** 2
    den = fa[:, 0] ** 2 + fa[:, 1] ** 2 + fb[:, 0] ** 2 + fb[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d2 = np.where(den > 0, num / den, np.inf)
    return np.sqrt(d2)


@dataclass
class FundamentalResult:
    f: np.ndarray
    inlier_mask: np.ndarray
    n_inliers: int


def ransac_fundamental(matches, kps_a, kps_b, threshold_px=1.0, confidence=0.999,
                       max_iters=1000, seed=42):
    """Fundamental matrix by seeded RANSAC over matched keypoints.

    Iterations adapt to the best inlier ratio w via
    ceil(log(1 - confidence) / log(1 - w^8)), capped at ``max_iters``.
    The final F is re-estimated from all inliers and the inlier mask
    recomputed against it, so every reported inlier has Sampson distance
    <= threshold_px under the returned matrix.
    """
    if threshold_px <= 0:
        raise ValueError("threshold_px must be > 0")
    xy_a = _as_xy(kps_a)
    xy_b = _as_xy(kps_b)
    n = len(matches)
    if n < 8:
        raise TooFewMatches(f"need >= 8 matches, got {n}")
    pa = xy_a[[m.idx_a for m in matches]]
    pb = xy_b[[m.idx_b for m in matches]]

    rng = np.random.default_rng(seed)
    best_mask = None
    best_count = 0
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        sample = rng.choice(n, size=8, replace=False)
        try:
            f = eight_point(pa[sample], pb[sample])
        except DegenerateConfiguration:
            continue
        mask = sampson_distance(f, pa, pb) <= threshold_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0:
                break
            denom = math.log1p(-min(w, 1.0 - 1e-12) ** 8)
            if denom < 0.0:
                needed = math.ceil(math.log(max(1e-12, 1.0 - confidence)) / denom)
    if best_mask is None or best_count < 8:
        raise NoConsensus(f"best consensus {best_count} < 8")

    # refit on the consensus set until the inlier set stabilizes; this also
    # washes out most of the sampling-seed dependence
    mask = best_mask
    f = eight_point(pa[mask], pb[mask])
    for _ in range(3):
        new_mask = sampson_distance(f, pa, pb) <= threshold_px
        if new_mask.sum() < 8 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
        f = eight_point(pa[mask], pb[mask])
    mask = sampson_distance(f, pa, pb) <= threshold_px
    return FundamentalResult(f=f, inlier_mask=mask, n_inliers=int(mask.sum()))


@dataclass
class PairResult:
    enhancer: str
    frame_i: int
    frame_j: int
    n_matches: int
    n_inliers: int
    degenerate_motion: bool


@dataclass
class BenchResult:
    pairs: list[PairResult] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)

    def mean_inliers(self, enhancer):
        counts = [p.n_inliers for p in self.pairs if p.enhancer == enhancer]
        return float(np.mean(counts)) if counts else 0.0

    def enhancers(self):
        seen = []
        for p in self.pairs:
            if p.enhancer not in seen:
                seen.append(p.enhancer)
        return seen


def match_bench(seq, enhancers, orb: OrbConfig | None = None, ratio=0.8,
                threshold_px=1.0, confidence=0.999, max_iters=1000, seed=42,
                workdir=None, threads=1, progress=None):
    """Consecutive-frame inlier counts for a set of enhancers.

    Near-static pairs (median keypoint disparity below half a pixel) make
    the fundamental matrix degenerate; those report the raw ratio-test
    match count and are flagged ``degenerate_motion``. A failing enhancer
    is recorded in ``errors`` without aborting the others.
    """
    orb = orb or OrbConfig()
    if len(seq) < 2:
        raise ValueError("need at least 2 frames")
    result = BenchResult()
    for cfg in enhancers:
        label = cfg.label()
        try:
            frames = _enhanced_gray_frames(seq, cfg, workdir, threads)
            feats = _detect_all(frames, orb, threads)
            for i in range(len(feats) - 1):
                kps_a, da = feats[i]
                kps_b, db = feats[i + 1]
                matches = match_ratio(da, db, ratio)
                pair = _verify_pair(matches, kps_a, kps_b, threshold_px,
                                    confidence, max_iters, seed + i)
                result.pairs.append(PairResult(label, i, i + 1, *pair))
                if progress:
                    progress(f"{label}: pair {i}-{i + 1}: "
                             f"{pair[1]} inliers / {pair[0]} matches")
        except Exception as e:  # propagate per enhancer, keep the rest running
            result.errors[label] = f"{type(e).__name__}: {e}"
    return result


def _verify_pair(matches, kps_a, kps_b, threshold_px, confidence, max_iters, seed):
    n_matches = len(matches)
    if n_matches == 0:
        return (0, 0, False)
    xy_a = _as_xy(kps_a)[[m.idx_a for m in matches]]
    xy_b = _as_xy(kps_b)[[m.idx_b for m in matches]]
    disparity = np.median(np.linalg.norm(xy_a - xy_b, axis=1))
    if disparity < DEGENERATE_DISPARITY_PX:
        return (n_matches, n_matches, True)
    if n_matches < 8:
        return (n_matches, 0, False)
    try:
        res = ransac_fundamental(matches, kps_a, kps_b, threshold_px,
                                 confidence, max_iters, seed)
    except (NoConsensus, DegenerateConfiguration):
        return (n_matches, 0, False)
    return (n_matches, res.n_inliers, False)


def _enhanced_gray_frames(seq, cfg, workdir, threads):
    """Enhanced grayscale frames for one enhancer config."""
    from . import imgproc
    from .dataio import read_image

    if cfg.kind == "external":
        if workdir is None:
            raise ValueError("external enhancer needs a workdir")
        out_dir = Path(workdir) / "external"
        seq_dir = seq.frames[0][1].parent
        imgproc.external_enhance(seq_dir, cfg.command, out_dir)
        paths = [out_dir / p.name for _, p in seq.frames]
        loader = lambda p: imgproc.to_gray(read_image(p))
        return _parallel_map(loader, paths, threads)

    def job(path):
        return imgproc.to_gray(imgproc.apply_enhancer(read_image(path), cfg))

    return _parallel_map(job, [p for _, p in seq.frames], threads)


def _detect_all(frames, orb, threads):
    return _parallel_map(lambda f: orb_detect_and_describe(f, orb), frames, threads)


def _parallel_map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def write_pair_csv(result: BenchResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["enhancer", "frame_i", "frame_j", "n_matches", "n_inliers",
                    "degenerate_motion"])
        for p in result.pairs:
            w.writerow([p.enhancer, p.frame_i, p.frame_j, p.n_matches,
                        p.n_inliers, int(p.degenerate_motion)])


def write_summary_csv(results: dict[str, BenchResult], path):
    """Summary table: one row per sequence, one column per enhancer."""
    enhancers = []
    for r in results.values():
        for e in r.enhancers():
            if e not in enhancers:
                enhancers.append(e)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence"] + enhancers)
        for name, r in results.items():
            w.writerow([name] + [round(r.mean_inliers(e)) for e in enhancers])
