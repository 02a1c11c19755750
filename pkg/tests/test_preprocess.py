import numpy as np
import pytest
from scipy.spatial.distance import cdist

from evident_motion.preprocess import (DegenerateRegistrationError, PreprocessParams, apply_pose,
                                       best_rigid_transform, crop_far, dedup_window, icp_refine)
from evident_motion.scan_io import Pose, ScanRecord


def scan(xyz, origin=None):
    return ScanRecord.from_xyz(xyz, sensor_origin=origin)


def test_apply_pose_examples():
    s = scan([[1, 2, 3]])
    np.testing.assert_array_equal(apply_pose(s, Pose.identity()).points, s.points)
    moved = apply_pose(s, Pose(np.eye(3), [5, 0, 0]))
    np.testing.assert_array_equal(moved.points, [[6, 2, 3]])
    np.testing.assert_array_equal(moved.sensor_origin, [5, 0, 0])
    yawed = apply_pose(scan([[1, 0, 0]]), Pose.from_yaw(np.pi / 2))
    np.testing.assert_allclose(yawed.points, [[0, 1, 0]], atol=1e-9)


def test_apply_pose_inverse():
    rng = np.random.default_rng(0)
    s = ScanRecord(rng.normal(size=(100, 3)) * 10, rng.random(100))
    p = Pose.from_yaw(0.7, (3, -2, 1))
    back = apply_pose(apply_pose(s, p), p.inverse())
    np.testing.assert_allclose(back.points, s.points, atol=1e-9)
    np.testing.assert_array_equal(back.intensity, s.intensity)


def test_crop_examples():
    s = scan([[31, 0, 0], [30, 0, 0], [10, -29, 5]])
    out, kept = crop_far(s)
    np.testing.assert_array_equal(kept, [1, 2])
    assert len(out) == 2


def test_crop_relative_to_origin_and_idempotent():
    rng = np.random.default_rng(2)
    s = scan(rng.uniform(-60, 60, size=(500, 3)), origin=[20, 0, 0])
    once, kept = crop_far(s)
    assert np.all(np.abs(once.points - [20, 0, 0]) <= 30)
    twice, kept2 = crop_far(once)
    np.testing.assert_array_equal(twice.points, once.points)
    np.testing.assert_array_equal(kept2, np.arange(len(once)))


def test_dedup_examples():
    p = PreprocessParams()
    s = scan([[0, 0, 0]])
    assert len(dedup_window(s, [], p)[0]) == 1
    assert len(dedup_window(s, [scan([[0, 0, 0]])], p)[0]) == 0
    assert len(dedup_window(s, [scan([[1, 0, 0], [0, -1, 0]])], p)[0]) == 1


def test_dedup_against_brute_force():
    rng = np.random.default_rng(3)
    recent = [scan(rng.uniform(0, 3, size=(300, 3))) for _ in range(12)]
    s = scan(rng.uniform(0, 3, size=(400, 3)))
    params = PreprocessParams(dedup_window=10, dedup_radius=0.15)
    out, kept = dedup_window(s, recent, params)
    window = np.vstack([r.points for r in recent[-10:]])
    expect = np.flatnonzero(cdist(s.points, window).min(axis=1) > 0.15)
    np.testing.assert_array_equal(kept, expect)
    assert cdist(out.points, window).min() > 0.15
    again, kept2 = dedup_window(out, recent, params)
    np.testing.assert_array_equal(again.points, out.points)


def test_dedup_window_zero_keeps_all():
    s = scan([[0, 0, 0]])
    out, _ = dedup_window(s, [s], PreprocessParams(dedup_window=0))
    assert len(out) == 1


def test_params_validated():
    with pytest.raises(ValueError):
        PreprocessParams(crop_tau=0)
    with pytest.raises(ValueError):
        PreprocessParams(dedup_radius=0)
    with pytest.raises(ValueError):
        PreprocessParams(dedup_window=-1)


def test_kabsch_recovers_transform():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(30, 3))
    true = Pose.from_yaw(0.4, (1, 2, -1))
    est = best_rigid_transform(src, true.apply(src))
    np.testing.assert_allclose(est.matrix(), true.matrix(), atol=1e-9)


def structured_cloud(rng):
    # three orthogonal planes so translation is observable in every axis
    a = rng.uniform(0, 4, size=(400, 2))
    return np.vstack([np.c_[a[:, 0], a[:, 1], np.zeros(400)],
                      np.c_[a[:, 0], np.zeros(400), a[:, 1]],
                      np.c_[np.zeros(400), a[:, 0], a[:, 1]]])


def test_icp_fixed_point():
    s = scan(structured_cloud(np.random.default_rng(5)))
    pose = icp_refine(s, s, Pose.identity())
    np.testing.assert_allclose(pose.matrix(), np.eye(4), atol=1e-6)


def test_icp_recovers_translation():
    s = scan(structured_cloud(np.random.default_rng(6)))
    target = apply_pose(s, Pose(np.eye(3), [0.2, 0, 0]))
    pose = icp_refine(s, target, Pose.identity(), PreprocessParams(icp_max_iter=50))
    np.testing.assert_allclose(pose.translation, [0.2, 0, 0], atol=1e-3)


def test_icp_degenerate():
    s = scan([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(DegenerateRegistrationError):
        icp_refine(s, s, Pose.identity())
