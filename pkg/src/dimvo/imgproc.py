"""Low-light preprocessing: gamma correction, global and tile-based histogram
equalization, and an illumination-attention blend around any of them.

Color images are handled on the luma channel (BT.601 weights) with chroma
ratios preserved; equalizing channels independently shifts hues, which is
exactly the artifact these enhancers are meant to avoid.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidGamma, InvalidTiling, PluginFailed, PluginIncomplete

ENHANCER_KINDS = ("none", "gamma", "histeq", "clahe", "attention", "external")
IMAGE_GLOBS = ("*.png", "*.pgm")


@dataclass
class EnhancerConfig:
    """One enhancement method plus its parameters.

    Spec strings accepted by :func:`parse_enhancer`:
    ``none``, ``gamma:<g>``, ``histeq``, ``clahe:<clip>:<tx>:<ty>``,
    ``attention:<base spec>``, ``external:<command>``.
    """

    kind: str = "none"
    gamma: float = 2.0
    clip_limit: float = 2.0
    tiles: tuple[int, int] = (8, 8)
    base: "EnhancerConfig | None" = None
    command: str = ""

    def __post_init__(self):
        if self.kind not in ENHANCER_KINDS:
            raise ValueError(f"unknown enhancer kind {self.kind!r}")
        if self.kind == "gamma" and self.gamma <= 0:
            raise InvalidGamma(f"gamma must be > 0, got {self.gamma}")
        if self.kind == "clahe":
            if self.clip_limit < 1.0:
                raise ValueError(f"clip_limit must be >= 1, got {self.clip_limit}")
            if min(self.tiles) < 1:
                raise InvalidTiling(f"tiles must be >= 1x1, got {self.tiles}")
        if self.kind == "attention":
            if self.base is None or self.base.kind not in ("gamma", "histeq", "clahe"):
                raise ValueError("attention base must be gamma, histeq or clahe")
        if self.kind == "external" and not self.command.strip():
            raise ValueError("external enhancer needs a command")

    def label(self):
        if self.kind == "gamma":
            return f"gamma:{self.gamma:g}"
        if self.kind == "clahe":
            return f"clahe:{self.clip_limit:g}:{self.tiles[0]}:{self.tiles[1]}"
        if self.kind == "attention":
            return f"attention:{self.base.label()}"
        if self.kind == "external":
            return f"external:{self.command}"
        return self.kind


def parse_enhancer(spec: str) -> EnhancerConfig:
    spec = spec.strip()
    kind, _, rest = spec.partition(":")
    if kind == "none" or kind == "histeq":
        return EnhancerConfig(kind=kind)
    if kind == "gamma":
        try:
            return EnhancerConfig(kind="gamma", gamma=float(rest))
        except ValueError as e:
            raise ValueError(f"bad gamma spec {spec!r}") from e
    if kind == "clahe":
        parts = rest.split(":") if rest else []
        clip = float(parts[0]) if len(parts) > 0 and parts[0] else 2.0
        tx = int(parts[1]) if len(parts) > 1 else 8
        ty = int(parts[2]) if len(parts) > 2 else 8
        return EnhancerConfig(kind="clahe", clip_limit=clip, tiles=(tx, ty))
    if kind == "attention":
        base = parse_enhancer(rest) if rest else EnhancerConfig(kind="gamma", gamma=2.0)
        return EnhancerConfig(kind="attention", base=base)
    if kind == "external":
        return EnhancerConfig(kind="external", command=rest)
    raise ValueError(f"unknown enhancer spec {spec!r}")


def to_gray(img):
    """BT.601 luma (0.299, 0.587, 0.114), rounded to uint8."""
    img = np.asarray(img)
    if img.ndim == 2:
        return img.astype(np.uint8, copy=False)
    y = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def _apply_luma_mapping(img, mapped_luma_float):
    """Rebuild a color image from a new luma, preserving chroma ratios."""
    if img.ndim == 2:
        return np.clip(np.rint(mapped_luma_float), 0, 255).astype(np.uint8)
    y_old = (
        0.299 * img[..., 0].astype(np.float64)
        + 0.587 * img[..., 1]
        + 0.114 * img[..., 2]
    )
    scale = mapped_luma_float / np.maximum(y_old, 1e-9)
    out = img.astype(np.float64) * scale[..., None]
    # pure black pixels carry no chroma; set them to the mapped gray value
    black = y_old < 0.5
    if np.any(black):
        out[black] = mapped_luma_float[black, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def gamma_lut(gamma):
    if gamma <= 0:
        raise InvalidGamma(f"gamma must be > 0, got {gamma}")
    ramp = np.arange(256, dtype=np.float64) / 255.0
    return np.clip(np.rint(255.0 * ramp ** (1.0 / gamma)), 0, 255).astype(np.uint8)


def gamma_correct(img, gamma):
    """Brightening gamma, ``out = 255 * (in / 255) ** (1 / gamma)`` per channel."""
    return gamma_lut(gamma)[np.asarray(img)]


def _equalization_mapping(luma_values, n_bins=256):
    """Float mapping p -> 255 (cdf(p) - cdf_min) / (n - cdf_min); identity if degenerate."""
    hist = np.bincount(luma_values.reshape(-1), minlength=n_bins).astype(np.float64)
    return _mapping_from_hist(hist)


def _mapping_from_hist(hist):
    n = hist.sum()
    cdf = np.cumsum(hist)
    nonzero = np.nonzero(hist)[0]
    if len(nonzero) == 0:
        return np.arange(256, dtype=np.float64)
    cdf_min = cdf[nonzero[0]]
    if n - cdf_min <= 0:  # constant input, degenerate cdf
        return np.arange(256, dtype=np.float64)
    return 255.0 * (cdf - cdf_min) / (n - cdf_min)


def hist_equalize(img):
    """Global histogram equalization on the luma channel."""
    img = np.asarray(img)
    y = to_gray(img)
    mapping = _equalization_mapping(y)
    return _apply_luma_mapping(img, mapping[y])


def _clipped_hist(values, n_pix, clip_limit):
    """Histogram with counts clipped at clip_limit * n_pix / 256.

    The clipped excess is redistributed uniformly and the clip reapplied
    until the spill is negligible, so clip_limit = 1 flattens the
    histogram to (numerically) uniform. A single-bin (constant) tile is
    returned as-is; its mapping must stay the degenerate identity.
    """
    hist = np.bincount(values, minlength=256).astype(np.float64)
    if np.count_nonzero(hist) <= 1:
        return hist
    limit = clip_limit * n_pix / 256.0
    for _ in range(16):
        excess = np.clip(hist - limit, 0.0, None).sum()
        if excess <= 1e-9 * n_pix:
            break
        hist = np.minimum(hist, limit) + excess / 256.0
    return hist


def clahe(img, clip_limit=2.0, tiles=(8, 8)):
    """Contrast-limited adaptive equalization with bilinear tile blending."""
    img = np.asarray(img)
    y = to_gray(img)
    h, w = y.shape
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1:
        raise InvalidTiling(f"tiles must be >= 1x1, got {tiles}")
    if tx > w or ty > h:
        raise InvalidTiling(f"{tx}x{ty} tiles exceed {w}x{h} image")
    if clip_limit < 1.0:
        raise ValueError(f"clip_limit must be >= 1, got {clip_limit}")

    x_edges = np.rint(np.linspace(0, w, tx + 1)).astype(int)
    y_edges = np.rint(np.linspace(0, h, ty + 1)).astype(int)
    mappings = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = y[y_edges[i]:y_edges[i + 1], x_edges[j]:x_edges[j + 1]]
            hist = _clipped_hist(tile.reshape(-1), tile.size, clip_limit)
            mappings[i, j] = _mapping_from_hist(hist)

    cx = (x_edges[:-1] + x_edges[1:]) / 2.0
    cy = (y_edges[:-1] + y_edges[1:]) / 2.0
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    j1 = np.clip(np.searchsorted(cx, xs), 0, tx - 1)
    j0 = np.clip(j1 - 1, 0, tx - 1)
    i1 = np.clip(np.searchsorted(cy, ys), 0, ty - 1)
    i0 = np.clip(i1 - 1, 0, ty - 1)
    span_x = np.where(j1 > j0, cx[j1] - cx[j0], 1.0)
    span_y = np.where(i1 > i0, cy[i1] - cy[i0], 1.0)
    wx = np.clip((xs - cx[j0]) / span_x, 0.0, 1.0)
    wy = np.clip((ys - cy[i0]) / span_y, 0.0, 1.0)

    i0g, i1g = i0[:, None], i1[:, None]
    j0g, j1g = j0[None, :], j1[None, :]
    m00 = mappings[i0g, j0g, y]
    m01 = mappings[i0g, j1g, y]
    m10 = mappings[i1g, j0g, y]
    m11 = mappings[i1g, j1g, y]
    wxg, wyg = wx[None, :], wy[:, None]
    mapped = (
        (1 - wyg) * ((1 - wxg) * m00 + wxg * m01)
        + wyg * ((1 - wxg) * m10 + wxg * m11)
    )
    return _apply_luma_mapping(img, mapped)


def attention_enhance(img, base: EnhancerConfig):
    """Blend input and a base enhancer with the inverse-luma attention map.

    A = 1 - gray(img) / 255; out = img + A * (base(img) - img). Dark
    regions take the enhanced value, bright regions stay untouched.
    """
    if base.kind not in ("gamma", "histeq", "clahe"):
        raise ValueError("attention base must be gamma, histeq or clahe")
    img = np.asarray(img)
    enhanced = apply_enhancer(img, base)
    a = 1.0 - to_gray(img).astype(np.float64) / 255.0
    if img.ndim == 3:
        a = a[..., None]
    out = img.astype(np.float64) + a * (enhanced.astype(np.float64) - img)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_enhancer(img, cfg: EnhancerConfig):
    """Apply an in-memory enhancer; the external kind is directory-based."""
    if cfg.kind == "none":
        return np.asarray(img).copy()
    if cfg.kind == "gamma":
        return gamma_correct(img, cfg.gamma)
    if cfg.kind == "histeq":
        return hist_equalize(img)
    if cfg.kind == "clahe":
        return clahe(img, cfg.clip_limit, cfg.tiles)
    if cfg.kind == "attention":
        return attention_enhance(img, cfg.base)
    raise ValueError(f"enhancer {cfg.kind!r} cannot run on a single image")


def list_sequence_images(directory):
    directory = Path(directory)
    paths = []
    for pattern in IMAGE_GLOBS:
        paths.extend(directory.glob(pattern))
    return sorted(paths)


def external_enhance(seq_dir, command, out_dir):
    """Run an external enhancer process over a directory of images.

    Protocol: ``<command> <in_dir> <out_dir>``; the plugin must write one
    output per input image with identical filename and resolution and
    exit 0. Violations raise PluginFailed / PluginIncomplete.
    """
    from PIL import Image

    seq_dir = Path(seq_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = list_sequence_images(seq_dir)
    argv = shlex.split(command) + [str(seq_dir), str(out_dir)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise PluginFailed(
            f"{argv[0]} exited {proc.returncode}: {proc.stderr.strip()[-2000:]}"
        )
    for src in inputs:
        dst = out_dir / src.name
        if not dst.is_file():
            raise PluginIncomplete(f"missing output {dst.name}")
        try:
            with Image.open(src) as a, Image.open(dst) as b:
                if a.size != b.size:
                    raise PluginIncomplete(
                        f"{dst.name}: resolution {b.size} differs from input {a.size}"
                    )
        except PluginIncomplete:
            raise
        except Exception as e:
            raise PluginIncomplete(f"{dst.name}: {e}") from e
    return out_dir
