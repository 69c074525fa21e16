"""Sequence and trajectory ingestion, timestamp association, synthetic darkening.

Trajectory files use the TUM interchange convention, one sample per line:
``timestamp tx ty tz qx qy qz qw`` with ``#`` comment lines. Poses stored in
a Trajectory are taken verbatim from the file (body-in-world, as every tool
that consumes this format expects).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    MissingFile,
    MixedResolutions,
    NonMonotonicTimestamps,
    ParseError,
    UnsupportedImage,
)
from .geometry import PoseSE3, quat_to_rot, rot_to_quat

QUAT_NORM_TOL = 1e-6


@dataclass
class CameraIntrinsics:
    """Pinhole model, focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: np.ndarray = field(default_factory=lambda: np.zeros(5))

    def __post_init__(self):
        self.dist = np.asarray(self.dist, dtype=np.float64).reshape(-1)
        if len(self.dist) > 5:
            raise ValueError("at most 5 distortion coefficients")
        self.dist = np.pad(self.dist, (0, 5 - len(self.dist)))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def k(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    @classmethod
    def from_file(cls, path):
        """Parse a flat `key: value` text file (fx, fy, cx, cy, width, height, dist)."""
        path = Path(path)
        if not path.is_file():
            raise MissingFile(str(path))
        values = {}
        for i, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if ":" not in line:
                raise ParseError(f"{path}:{i}: expected 'key: value'")
            key, _, val = line.partition(":")
            values[key.strip()] = val.strip()
        try:
            dist = [float(x) for x in values.get("dist", "").split()] or [0.0]
            return cls(
                fx=float(values["fx"]),
                fy=float(values["fy"]),
                cx=float(values["cx"]),
                cy=float(values["cy"]),
                width=int(values["width"]),
                height=int(values["height"]),
                dist=np.array(dist),
            )
        except KeyError as e:
            raise ParseError(f"{path}: missing intrinsics key {e}") from e
        except ValueError as e:
            raise ParseError(f"{path}: {e}") from e

    def write(self, path):
        lines = [
            f"fx: {self.fx:.9f}",
            f"fy: {self.fy:.9f}",
            f"cx: {self.cx:.9f}",
            f"cy: {self.cy:.9f}",
            f"width: {self.width}",
            f"height: {self.height}",
            "dist: " + " ".join(f"{d:.9f}" for d in self.dist),
        ]
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class ImageSequence:
    """Ordered frames (timestamp, image path) sharing one resolution."""

    frames: list[tuple[float, Path]]
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def timestamps(self):
        return np.array([t for t, _ in self.frames])

    def load_image(self, index):
        return read_image(self.frames[index][1])


@dataclass
class Trajectory:
    """Timestamped poses with strictly increasing timestamps."""

    samples: list[tuple[float, PoseSE3]]

    def __len__(self):
        return len(self.samples)

    def timestamps(self):
        return np.array([t for t, _ in self.samples])

    def positions(self):
        return np.array([p.t for _, p in self.samples]).reshape(-1, 3)

    def rotations(self):
        return np.array([p.r for _, p in self.samples]).reshape(-1, 3, 3)


def read_image(path):
    """Decode an 8-bit image as uint8, (h, w) grayscale or (h, w, 3) RGB."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        img = Image.open(path)
        img.load()
    except Exception as e:
        raise UnsupportedImage(f"{path}: {e}") from e
    if img.mode == "L":
        return np.asarray(img, dtype=np.uint8)
    if img.mode == "RGB":
        return np.asarray(img, dtype=np.uint8)
    if img.mode in ("P", "RGBA"):
        return np.asarray(img.convert("RGB"), dtype=np.uint8)
    raise UnsupportedImage(f"{path}: mode {img.mode} is not 8-bit grayscale/RGB")


def write_image(img, path):
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise UnsupportedImage("only uint8 images are written")
    Image.fromarray(img).save(Path(path))


def _image_shape(path):
    """Resolution and 8-bit check from the header, without full decode."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as img:
            mode, size = img.mode, img.size
    except Exception as e:
        raise UnsupportedImage(f"{path}: {e}") from e
    if mode not in ("L", "RGB", "P", "RGBA"):
        raise UnsupportedImage(f"{path}: mode {mode} is not 8-bit grayscale/RGB")
    return size  # (width, height)


def load_sequence(seq_dir, timestamps_file=None, intrinsics=None, meta=None):
    """Load an image sequence directory.

    Layout: ``<seq_dir>/images/*.png|*.pgm``, ``<seq_dir>/times.txt`` with
    one ``<timestamp> <filename>`` pair per line, and a flat key:value
    intrinsics file at ``<seq_dir>/intrinsics.txt`` (overridable).
    """
    seq_dir = Path(seq_dir)
    times_path = Path(timestamps_file) if timestamps_file else seq_dir / "times.txt"
    if not times_path.is_file():
        raise MissingFile(str(times_path))
    if intrinsics is None:
        intrinsics = CameraIntrinsics.from_file(seq_dir / "intrinsics.txt")
    elif not isinstance(intrinsics, CameraIntrinsics):
        intrinsics = CameraIntrinsics.from_file(intrinsics)

    frames = []
    for i, line in enumerate(times_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{times_path}:{i}: expected '<timestamp> <filename>'")
        try:
            t = float(parts[0])
        except ValueError as e:
            raise ParseError(f"{times_path}:{i}: bad timestamp {parts[0]!r}") from e
        frames.append((t, seq_dir / "images" / parts[1]))

    ts = [t for t, _ in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotonicTimestamps(f"{times_path}: timestamps must strictly increase")

    size = None
    for _, p in frames:
        s = _image_shape(p)
        if size is None:
            size = s
        elif s != size:
            raise MixedResolutions(f"{p}: {s} differs from {size}")
    return ImageSequence(frames=frames, intrinsics=intrinsics, meta=dict(meta or {}))


def load_trajectory(path):
    """Parse a TUM trajectory file; quaternions are renormalized."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    samples = []
    for i, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"{path}:{i}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(x) for x in parts]
        except ValueError as e:
            raise ParseError(f"{path}:{i}: {e}") from e
        t, tx, ty, tz, qx, qy, qz, qw = vals
        qn = np.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        # inclusive tolerance, with float slack so a norm of exactly
        # 1 - 1e-6 written in decimal still passes
        if abs(qn - 1.0) - QUAT_NORM_TOL > 1e-12:
            raise ParseError(f"{path}:{i}: quaternion norm {qn:.6g} is not 1")
        pose = PoseSE3(quat_to_rot((qx, qy, qz, qw)), np.array([tx, ty, tz]))
        samples.append((t, pose))
    ts = [t for t, _ in samples]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise NonMonotonicTimestamps(f"{path}: timestamps must strictly increase")
    return Trajectory(samples)


def save_trajectory(traj: Trajectory, path, header=None):
    lines = []
    if header:
        lines.extend("# " + h for h in header.splitlines())
    for t, pose in traj.samples:
        q = rot_to_quat(pose.r)
        tx, ty, tz = pose.t
        lines.append(
            f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
            f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def associate(a, b, max_dt):
    """Pair samples of two timestamp lists by nearest time.

    Accepts Trajectory/ImageSequence instances or plain timestamp arrays.
    Candidate pairs within ``max_dt`` are taken greedily by smallest time
    difference (ties toward the earlier candidate), each sample used at
    most once; the resulting index pairs are returned ordered by time.
    """
    if max_dt < 0:
        raise ValueError("max_dt must be >= 0")
    ta = a.timestamps() if hasattr(a, "timestamps") else np.asarray(a, dtype=np.float64)
    tb = b.timestamps() if hasattr(b, "timestamps") else np.asarray(b, dtype=np.float64)
    if len(ta) == 0 or len(tb) == 0:
        return []

    cand = []
    for i, t in enumerate(ta):
        lo = int(np.searchsorted(tb, t - max_dt, side="left"))
        hi = int(np.searchsorted(tb, t + max_dt, side="right"))
        for j in range(lo, hi):
            cand.append((abs(t - tb[j]), tb[j], t, i, j))
    cand.sort(key=lambda c: (c[0], c[1], c[2]))

    used_a, used_b = set(), set()
    pairs = []
    for _, _, _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        pairs.append((i, j))
    pairs.sort(key=lambda ij: ta[ij[0]])
    return pairs


class DarkLevel(enum.Enum):
    """Synthetic luminosity conditions, darkest last."""

    SHADED = "shaded"
    SEMI_DARK = "semi-dark"
    DARK = "dark"


# attenuation exponent and sensor-noise sigma (gray levels) per condition
DARKEN_PARAMS = {
    DarkLevel.SHADED: (1.5, 2.0),
    DarkLevel.SEMI_DARK: (2.5, 4.0),
    DarkLevel.DARK: (4.0, 6.0),
}


def synth_darken(img, level: DarkLevel, seed=0):
    """Attenuate an image to a synthetic low-light condition.

    Applies ``p -> 255 * (p / 255) ** gamma_d`` per pixel, then additive
    zero-mean Gaussian sensor noise, clamped back to [0, 255]. Bit-exact
    reproducible for a fixed seed.
    """
    level = DarkLevel(level)
    gamma_d, sigma = DARKEN_PARAMS[level]
    img = np.asarray(img)
    lut = 255.0 * (np.arange(256, dtype=np.float64) / 255.0) ** gamma_d
    out = lut[img]
    rng = np.random.default_rng(seed)
    out = out + rng.normal(0.0, sigma, size=out.shape)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def darken_lut(level: DarkLevel):
    """The noise-free attenuation curve as a 256-entry float LUT."""
    gamma_d, _ = DARKEN_PARAMS[DarkLevel(level)]
    return 255.0 * (np.arange(256, dtype=np.float64) / 255.0) ** gamma_d
