"""Shared fixtures: tiny deterministic scenes and frame constructors."""

import numpy as np
import pytest

from vdclab.core import InvDepthFrame, VideoDepthClip, clip_depth_to_inverse
from vdclab.synth import SceneConfig, generate_scene


def inv_frame(values, mask=None):
    return InvDepthFrame(values=np.asarray(values, dtype=np.float64), mask=mask)


def inv_clip(*frame_values, masks=None):
    frames = []
    for i, v in enumerate(frame_values):
        m = None if masks is None else masks[i]
        frames.append(inv_frame(v, m))
    return VideoDepthClip.from_frames(frames)


@pytest.fixture(scope="session")
def small_seq():
    """16x16, 4 frames, forward dolly, with GT flow. Session-scoped: render once."""
    return generate_scene(SceneConfig(width=16, height=16, frame_count=4, seed=3))


@pytest.fixture(scope="session")
def small_gt_inv(small_seq):
    return clip_depth_to_inverse(small_seq.gt)
