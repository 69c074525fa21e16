import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthscene import (  # noqa: E402
    corner_quads,
    default_intrinsics,
    render,
    sweep_path,
    textured_leaves,
    write_sequence,
)
from dimvo.dataio import Trajectory  # noqa: E402


@pytest.fixture(scope="session")
def natural_image():
    """A natural-statistics test image (overlapping shapes plus texture)."""
    return textured_leaves(480, seed=11)


@pytest.fixture(scope="session")
def rendered_room():
    """100 bright frames of the textured room (frames, timestamps, gt, intr)."""
    quads = corner_quads(seed=5)
    intr = default_intrinsics()
    data = sweep_path(100)
    frames = [render(quads, p, intr) for _, p in data]
    gt = Trajectory([(t, p.inverse()) for t, p in data])
    return frames, [t for t, _ in data], gt, intr


@pytest.fixture(scope="session")
def room_seq_dir(rendered_room, tmp_path_factory):
    """The rendered room materialized as a sequence directory."""
    frames, timestamps, _, intr = rendered_room
    d = tmp_path_factory.mktemp("room") / "seq"
    write_sequence(d, frames, timestamps, intr)
    return d
