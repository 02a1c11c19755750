import numpy as np
import pytest

from evident_motion import synth
from evident_motion.ground_filter import remove_ground
from evident_motion.motion import ScanIndex
from evident_motion.preprocess import apply_pose, crop_far


def coarse_lidar():
    return synth.Lidar(azimuth_res=np.deg2rad(1.0), elevations=tuple(np.deg2rad(np.linspace(-24, 4, 16))))


def world_frames(seq):
    """Cropped, ground-stripped world-frame clouds of a synthetic sequence, with their GT."""
    out = []
    for scan, pose, gt in zip(seq.scans, seq.poses, seq.gt_labels):
        cropped, kept = crop_far(scan)
        ng = ~remove_ground(cropped)
        world = apply_pose(cropped, pose).subset(np.flatnonzero(ng))
        out.append((world, gt[kept][ng]))
    return out


@pytest.fixture(scope="session")
def small_street():
    spec = synth.street_scene(frames=7, lidar=coarse_lidar(), camera=False)
    seq = synth.generate_sequence(spec, seed=1)
    frames = world_frames(seq)
    indices = [ScanIndex(w) for w, _ in frames]
    return frames, indices
