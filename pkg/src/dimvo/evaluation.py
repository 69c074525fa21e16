"""Trajectory metrics: similarity alignment, ATE, AOE and correct rate.

A single-camera pipeline recovers geometry only up to a similarity
transform, so every metric here first aligns the estimate to the ground
truth with a closed-form least-squares sim(3) fit over the associated
samples. Accuracy (ATE) and longevity (correct rate) are always reported
together: a tracker that survives longer accumulates more drift, so
either number alone is easy to game.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Trajectory, associate
from .errors import DegenerateGeometry, EmptyGroundTruth, TooFewPairs
from .geometry import rotation_angle

TRACKING = "tracking"

DEFAULT_ATE_THRESHOLD_M = 0.3
DEFAULT_AOE_THRESHOLD_RAD = float(np.deg2rad(10.0))
DEFAULT_MAX_DT = 0.02


@dataclass
class Sim3Transform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")

    @classmethod
    def identity(cls):
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation


def umeyama_align(est, gt, with_scale=True):
    """Least-squares similarity aligning est onto gt.

    Minimizes sum ||gt_i - (s R est_i + t)||^2 in closed form; s is fixed
    to 1 when ``with_scale`` is false. Collinear or coincident point sets
    leave the rotation unconstrained and raise DegenerateGeometry.
    """
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(est) != len(gt):
        raise ValueError("point lists must pair up")
    n = len(est)
    if n < 3:
        raise DegenerateGeometry(f"need >= 3 points, got {n}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    ec = est - mu_e
    gc = gt - mu_g
    cov = gc.T @ ec / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] < 1e-15 or d[1] <= 1e-9 * d[0]:
        raise DegenerateGeometry("points are collinear or coincident")
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    r = u @ np.diag(s) @ vt
    if with_scale:
        var_e = float((ec**2).sum()) / n
        scale = float((d * s).sum()) / var_e
    else:
        scale = 1.0
    t = mu_g - scale * (r @ mu_e)
    return Sim3Transform(scale=scale, rotation=r, translation=t)


def ate_rmse(est: Trajectory, gt: Trajectory, max_dt=DEFAULT_MAX_DT):
    """RMSE of translational residuals after sim(3) alignment.

    Returns (rmse_meters, transform). The transform maps estimate
    coordinates into ground-truth coordinates.
    """
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 3:
        raise TooFewPairs(f"only {len(pairs)} associated pairs")
    pe = est.positions()[[i for i, _ in pairs]]
    pg = gt.positions()[[j for _, j in pairs]]
    transform = umeyama_align(pe, pg, with_scale=True)
    residuals = pg - transform.apply(pe)
    rmse = float(np.sqrt(np.mean(np.sum(residuals**2, axis=1))))
    return rmse, transform


def aoe(est: Trajectory, gt: Trajectory, alignment: Sim3Transform,
        max_dt=DEFAULT_MAX_DT):
    """RMSE of geodesic rotation errors under a fixed alignment rotation."""
    pairs = associate(est, gt, max_dt)
    if len(pairs) < 1:
        raise TooFewPairs("no associated pairs")
    re = est.rotations()
    rg = gt.rotations()
    errs = [
        rotation_angle(rg[j] @ (alignment.rotation @ re[i]).T)
        for i, j in pairs
    ]
    return float(np.sqrt(np.mean(np.square(errs))))


def _record_time_status(records):
    out = []
    for r in records:
        if hasattr(r, "timestamp"):
            out.append((float(r.timestamp), r.status))
        else:
            t, status = r[0], r[1]
            out.append((float(t), status))
    out.sort(key=lambda x: x[0])
    return out


def _record_intervals(times, t_start, t_end):
    """Coverage interval per record, clipped to the ground-truth span."""
    if len(times) == 0:
        return np.zeros(0)
    times = np.asarray(times)
    if len(times) > 1:
        gaps = np.diff(times)
        last = float(np.median(gaps))
    else:
        last = t_end - t_start
    ends = np.append(times[1:], times[-1] + last)
    lo = np.clip(times, t_start, t_end)
    hi = np.clip(ends, t_start, t_end)
    return np.maximum(hi - lo, 0.0)


def correct_rate(est: Trajectory, gt: Trajectory, records,
                 ate_thresh=DEFAULT_ATE_THRESHOLD_M,
                 aoe_thresh=DEFAULT_AOE_THRESHOLD_RAD,
                 max_dt=DEFAULT_MAX_DT):
    """Fraction of ground-truth time with a pose inside both error bounds.

    A frame counts as correct when its status is tracking and, after one
    global sim(3) alignment fitted on the tracked frames, its translation
    and rotation errors stay within the thresholds. Frames without an
    estimate (or the whole sequence, when too few frames align) count as
    incorrect. The denominator is the ground-truth duration, so dropped
    frames always cost.
    """
    if len(gt) < 2:
        raise EmptyGroundTruth("ground truth must span a positive duration")
    gt_times = gt.timestamps()
    t_start, t_end = float(gt_times[0]), float(gt_times[-1])
    total = t_end - t_start
    if total <= 0:
        raise EmptyGroundTruth("ground truth must span a positive duration")

    recs = _record_time_status(records)
    rec_times = np.array([t for t, _ in recs])
    intervals = _record_intervals(rec_times, t_start, t_end)

    pairs = associate(est, gt, max_dt)
    gt_for_est = dict(pairs)
    est_for_rec = dict(associate(rec_times, est.timestamps(), max_dt))

    tracked = []
    for ridx, (t, status) in enumerate(recs):
        if status != TRACKING:
            continue
        eidx = est_for_rec.get(ridx)
        if eidx is None or eidx not in gt_for_est:
            continue
        tracked.append((ridx, eidx, gt_for_est[eidx]))
    if len(tracked) < 3:
        return 0.0

    pe = est.positions()[[e for _, e, _ in tracked]]
    pg = gt.positions()[[g for _, _, g in tracked]]
    try:
        transform = umeyama_align(pe, pg, with_scale=True)
    except DegenerateGeometry:
        return 0.0
    re = est.rotations()
    rg = gt.rotations()

    correct_time = 0.0
    aligned = transform.apply(pe)
    for row, (ridx, eidx, gidx) in enumerate(tracked):
        terr = float(np.linalg.norm(pg[row] - aligned[row]))
        rerr = rotation_angle(rg[gidx] @ (transform.rotation @ re[eidx]).T)
        if terr <= ate_thresh and rerr <= aoe_thresh:
            correct_time += float(intervals[ridx])
    return correct_time / total


def tracked_duration(records, t_start, t_end):
    recs = _record_time_status(records)
    rec_times = np.array([t for t, _ in recs])
    intervals = _record_intervals(rec_times, t_start, t_end)
    return float(sum(
        iv for iv, (_, status) in zip(intervals, recs) if status == TRACKING
    ))


@dataclass
class MetricsReport:
    sequence: str
    label: str
    ate_rmse: float
    aoe_rmse: float
    cr: float
    init_time: float | None
    n_paired: int
    ate_thresh: float
    aoe_thresh: float
    tracked_duration: float
    total_duration: float


@dataclass
class RunEvaluation:
    """A MetricsReport plus the per-frame series used for plotting."""

    report: MetricsReport
    pair_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    pair_errors_m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    est_aligned: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    gt_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))


def evaluate_run(est: Trajectory, gt: Trajectory, records, sequence="run",
                 label="unlabeled", ate_thresh=DEFAULT_ATE_THRESHOLD_M,
                 aoe_thresh=DEFAULT_AOE_THRESHOLD_RAD, max_dt=DEFAULT_MAX_DT):
    """All metrics for one run, with the series needed for figures."""
    ate, transform = ate_rmse(est, gt, max_dt)
    aoe_val = aoe(est, gt, transform, max_dt)
    cr = correct_rate(est, gt, records, ate_thresh, aoe_thresh, max_dt)

    pairs = associate(est, gt, max_dt)
    pe = est.positions()[[i for i, _ in pairs]]
    pg = gt.positions()[[j for _, j in pairs]]
    aligned = transform.apply(pe)
    errors = np.linalg.norm(pg - aligned, axis=1)
    times = est.timestamps()[[i for i, _ in pairs]]

    gt_times = gt.timestamps()
    recs = _record_time_status(records)
    init_time = next((t for t, s in recs if s == TRACKING), None)
    report = MetricsReport(
        sequence=sequence,
        label=label,
        ate_rmse=ate,
        aoe_rmse=aoe_val,
        cr=cr,
        init_time=init_time,
        n_paired=len(pairs),
        ate_thresh=ate_thresh,
        aoe_thresh=aoe_thresh,
        tracked_duration=tracked_duration(records, gt_times[0], gt_times[-1]),
        total_duration=float(gt_times[-1] - gt_times[0]),
    )
    return RunEvaluation(
        report=report,
        pair_times=times,
        pair_errors_m=errors,
        est_aligned=transform.apply(est.positions()),
        gt_positions=gt.positions(),
    )


def _f9(x):
    """Clamp a float to 9 significant digits for serialization."""
    if x is None:
        return None
    return float(f"{float(x):.9g}")


def metrics_dict(report: MetricsReport, extra=None):
    d = {
        "sequence": report.sequence,
        "label": report.label,
        "ate_rmse_m": _f9(report.ate_rmse),
        "aoe_rmse_rad": _f9(report.aoe_rmse),
        "cr": _f9(report.cr),
        "init_time_s": _f9(report.init_time),
        "n_paired": report.n_paired,
        "ate_thresh_m": _f9(report.ate_thresh),
        "aoe_thresh_rad": _f9(report.aoe_thresh),
        "tracked_duration_s": _f9(report.tracked_duration),
        "total_duration_s": _f9(report.total_duration),
    }
    if extra:
        d.update(extra)
    return d


def write_metrics_json(report: MetricsReport, path, extra=None):
    Path(path).write_text(json.dumps(metrics_dict(report, extra), indent=2) + "\n")


def load_metrics_json(path):
    d = json.loads(Path(path).read_text())
    report = MetricsReport(
        sequence=d["sequence"],
        label=d["label"],
        ate_rmse=d["ate_rmse_m"],
        aoe_rmse=d["aoe_rmse_rad"],
        cr=d["cr"],
        init_time=d["init_time_s"],
        n_paired=d["n_paired"],
        ate_thresh=d["ate_thresh_m"],
        aoe_thresh=d["aoe_thresh_rad"],
        tracked_duration=d["tracked_duration_s"],
        total_duration=d["total_duration_s"],
    )
    return report, d


SUMMARY_COLUMNS = [
    "kind", "sequence", "label", "ate_rmse_m", "aoe_rmse_rad", "cr",
    "init_time_s", "tracked_duration_s", "total_duration_s", "n_paired",
    "ate_thresh_m", "aoe_thresh_rad",
]


def group_means(reports):
    """Per-label mean ATE and mean CR, labels in first-seen order."""
    order = []
    for r in reports:
        if r.label not in order:
            order.append(r.label)
    out = []
    for label in order:
        rs = [r for r in reports if r.label == label]
        out.append((
            label,
            float(np.mean([r.ate_rmse for r in rs])),
            float(np.mean([r.cr for r in rs])),
            len(rs),
        ))
    return out


def write_summary_csv(reports, path):
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in reports:
            w.writerow([
                "sequence", r.sequence, r.label, f"{r.ate_rmse:.9g}",
                f"{r.aoe_rmse:.9g}", f"{r.cr:.9g}",
                "" if r.init_time is None else f"{r.init_time:.9g}",
                f"{r.tracked_duration:.9g}", f"{r.total_duration:.9g}",
                r.n_paired, f"{r.ate_thresh:.9g}", f"{r.aoe_thresh:.9g}",
            ])
        for label, mean_ate, mean_cr, n in group_means(reports):
            w.writerow(["group_mean", f"mean({label})", label,
                        f"{mean_ate:.9g}", "", f"{mean_cr:.9g}",
                        "", "", "", n, "", ""])


def format_summary_text(reports):
    """Aligned per-sequence rows plus a per-group mean table."""
    lines = []
    lines.append(f"{'sequence':<20} {'label':<12} {'ATE [m]':>9} {'AOE [rad]':>10} "
                 f"{'CR':>7} {'init [s]':>9} {'tracked [s]':>12}")
    for r in reports:
        init = "-" if r.init_time is None else f"{r.init_time:.2f}"
        lines.append(
            f"{r.sequence:<20} {r.label:<12} {r.ate_rmse:>9.3f} {r.aoe_rmse:>10.4f} "
            f"{100 * r.cr:>6.1f}% {init:>9} {r.tracked_duration:>12.2f}"
        )
    lines.append("")
    lines.append(f"{'group':<12} {'mean ATE [m]':>13} {'mean CR':>9}")
    for label, mean_ate, mean_cr, _ in group_means(reports):
        lines.append(f"{label:<12} {mean_ate:>13.3f} {100 * mean_cr:>8.1f}%")
    thresholds = {(r.ate_thresh, r.aoe_thresh) for r in reports}
    for ate_t, aoe_t in sorted(thresholds):
        lines.append("")
        lines.append(f"thresholds: ATE <= {ate_t:.9g} m, AOE <= {aoe_t:.9g} rad")
    return "\n".join(lines) + "\n"


def render_figure(runs: list[RunEvaluation], path):
    """Trajectories (top view) and error-over-time, one row per run, SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = max(1, len(runs))
    fig, axes = plt.subplots(n, 2, figsize=(9, 3.2 * n), squeeze=False)
    for row, run in enumerate(runs):
        ax_t, ax_e = axes[row]
        if len(run.gt_positions):
            ax_t.plot(run.gt_positions[:, 0], run.gt_positions[:, 1],
                      "-", color="black", lw=1.0, label="ground truth")
        if len(run.est_aligned):
            ax_t.plot(run.est_aligned[:, 0], run.est_aligned[:, 1],
                      "-", color="tab:blue", lw=1.0, label="estimate (aligned)")
        ax_t.set_title(f"{run.report.sequence} ({run.report.label})", fontsize=9)
        ax_t.set_xlabel("x [m]")
        ax_t.set_ylabel("y [m]")
        ax_t.axis("equal")
        ax_t.legend(fontsize=7)
        if len(run.pair_times):
            ax_e.plot(run.pair_times, run.pair_errors_m, color="tab:red", lw=0.9)
        ax_e.axhline(run.report.ate_thresh, color="gray", ls="--", lw=0.8)
        ax_e.set_xlabel("t [s]")
        ax_e.set_ylabel("translational error [m]")
        ax_e.set_title(
            f"ATE {run.report.ate_rmse:.3f} m, CR {100 * run.report.cr:.1f}%",
            fontsize=9,
        )
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def report(runs, out_dir):
    """Summary files for a batch of evaluated runs.

    Writes summary.csv, summary.txt and trajectories.svg into ``out_dir``;
    ``runs`` may contain RunEvaluation (plotted) or bare MetricsReport
    entries (tables only). Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [r.report if isinstance(r, RunEvaluation) else r for r in runs]
    csv_path = out_dir / "summary.csv"
    txt_path = out_dir / "summary.txt"
    write_summary_csv(reports, csv_path)
    txt_path.write_text(format_summary_text(reports))
    paths = [csv_path, txt_path]
    plottable = [r for r in runs if isinstance(r, RunEvaluation)]
    if plottable:
        svg_path = out_dir / "trajectories.svg"
        render_figure(plottable, svg_path)
        paths.append(svg_path)
    return paths
