from pathlib import Path

import numpy as np
import pytest

import cellstorm as cs

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def camera():
    return cs.CameraModel()


@pytest.fixture
def tiny_unet_dir():
    return FIXTURES / "tiny_unet"


def make_uniform_stacks(photon_levels, model, frames=20, size=64, seed=7, fps=20.0):
    """Static uniform-illumination stacks, one per level."""
    stacks = []
    for i, photons in enumerate(photon_levels):
        data = np.stack(
            [
                cs.apply_camera(
                    np.full((size, size), float(photons)), model, t, seed=seed + i * 1000, fps=fps
                )
                for t in range(frames)
            ]
        )
        stacks.append(
            cs.FrameStack(size, size, frames, 100.0, fps, data, bit_depth=model.bit_depth)
        )
    return stacks
