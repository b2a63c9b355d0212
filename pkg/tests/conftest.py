import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ttastream.geometry import Box, Detection

SRC_DIR = Path(__file__).resolve().parent.parent / "src"


def make_det(x1, y1, x2, y2, score, class_id=0, channel="c0"):
    return Detection(
        box=Box(float(x1), float(y1), float(x2), float(y2)),
        score=float(score),
        class_id=class_id,
        channel_id=channel,
    )


def random_detections(
    rng: np.random.Generator,
    n: int,
    classes: int = 1,
    channels=("a", "b", "c"),
    span: int = 40,
    max_size: int = 10,
):
    """Boxes on an integer grid so positive IoUs are bounded away from zero."""
    dets = []
    for _ in range(n):
        w = int(rng.integers(3, max_size + 1))
        h = int(rng.integers(3, max_size + 1))
        x1 = int(rng.integers(0, span - w))
        y1 = int(rng.integers(0, span - h))
        dets.append(
            make_det(
                x1,
                y1,
                x1 + w,
                y1 + h,
                float(rng.uniform(0.05, 1.0)),
                class_id=int(rng.integers(0, classes)),
                channel=str(rng.choice(list(channels))),
            )
        )
    return dets


def run_cli(args, cwd=None, extra_env=None):
    """Run the CLI in a subprocess with the package on PYTHONPATH."""
    env = os.environ.copy()
    env["PYTHONPATH"] = str(SRC_DIR) + os.pathsep + env.get("PYTHONPATH", "")
    if extra_env:
        env.update(extra_env)
    return subprocess.run(
        [sys.executable, "-m", "ttastream", *args],
        capture_output=True,
        text=True,
        cwd=cwd,
        env=env,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
