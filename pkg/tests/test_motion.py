import math

import numpy as np
import pytest

from evident_motion.evidential import (VACUOUS, Belief, DiscretizeParams, OccupancyParams, angular_weight,
                                       build_smoothing_tables, depth_weight_l, discretize, fuse_all,
                                       make_belief)
from evident_motion.motion import (ScanIndex, ScanWindow, WindowParams, build_octree, candidate_beams,
                                   classify_leaf, classify_point, detect_window, leaf_test_plan,
                                   point_occupancy_in_scan, resolve_leaves)
from evident_motion.scan_io import ScanRecord

TABLES = build_smoothing_tables()
OCC = OccupancyParams()


# --- octree --------------------------------------------------------------------

def test_octree_singleton():
    t = build_octree(np.array([[1.0, 2.0, 3.0]]))
    assert t.n_leaves == 1
    np.testing.assert_array_equal(t.leaf_points(0), [0])


def test_octree_separated_points():
    t = build_octree(np.array([[0.0, 0, 0], [10.0, 0, 0]]))
    assert t.n_leaves == 2


def test_octree_cube_partition():
    rng = np.random.default_rng(0)
    pts = rng.random((2000, 3))
    t = build_octree(pts, 0.3)
    assert t.leaf_side <= 0.3
    assert t.leaf_sizes().sum() == len(pts)
    assert sorted(t.point_order) == list(range(len(pts)))
    for i in range(t.n_leaves):
        members = pts[t.leaf_points(i)]
        cell = np.floor((members - t.origin) / t.leaf_side)
        assert (cell == cell[0]).all()
    assert t.node_points(0, 0).size == len(pts)


def test_octree_empty():
    assert build_octree(np.empty((0, 3))).n_leaves == 0


# --- candidate beams -------------------------------------------------------------

def fan(spacing=0.001, n=100):
    a = spacing * np.arange(n)
    return ScanRecord.from_xyz(10 * np.c_[np.cos(a), np.sin(a), np.zeros(n)])


def test_collinear_beam_first():
    idx = ScanIndex(fan())
    P = 5 * np.array([math.cos(0.037), math.sin(0.037), 0])
    beams = candidate_beams(P, idx, 0.01)
    assert beams[0].index == 37
    assert beams[0].angle == pytest.approx(0, abs=1e-7)


def test_no_beam_in_cone():
    idx = ScanIndex(fan())
    assert candidate_beams([0, 0, 5], idx, 0.01) == []


def test_fan_cap_sorted():
    idx = ScanIndex(fan())
    P = np.array([5 * math.cos(0.0503), 5 * math.sin(0.0503), 0])
    beams = candidate_beams(P, idx, 0.1, cap=32)
    assert len(beams) == 32
    v = P / np.linalg.norm(P)
    ang = np.arccos(np.clip(idx.dirs @ v, -1, 1))
    expect = np.lexsort((np.arange(len(ang)), ang))[:32]
    assert [b.index for b in beams] == list(expect)


# --- single-scan occupancy -------------------------------------------------------

def test_occupancy_vacuous_without_beams():
    idx = ScanIndex(fan())
    assert point_occupancy_in_scan([0, 0, 5], idx, 0.01, OCC, TABLES) == VACUOUS


def test_occupancy_beam_passes_through():
    idx = ScanIndex(ScanRecord.from_xyz([[10.0, 0, 0]]))
    b = point_occupancy_in_scan([9.0, 0, 0], idx, 0.01, OCC, TABLES)
    assert b.e >= 0.99


def test_occupancy_two_agreeing_beams():
    idx = ScanIndex(ScanRecord.from_xyz([[10.0, 0, 0], [10.0, 0.01, 0]]))
    P = np.array([9.5, 0.003, 0])
    lam = 0.004
    b = point_occupancy_in_scan(P, idx, 3 * lam, OccupancyParams(theta_scale=lam), TABLES)
    singles = [point_occupancy_in_scan(P, ScanIndex(ScanRecord.from_xyz([q])), 3 * lam,
                                       OccupancyParams(theta_scale=lam), TABLES)
               for q in idx.endpoints]
    assert all(b.e >= s.e for s in singles)


# --- leaf rules --------------------------------------------------------------------

def test_small_leaf_tests_everything():
    t = build_octree(np.random.default_rng(1).random((5, 3)) * 0.1)
    tested, _, n_tested, voting = leaf_test_plan(t, WindowParams())
    assert tested.all() and n_tested.tolist() == [5] and not voting.any()


def test_leaf_of_twelve_tests_two():
    t = build_octree(np.random.default_rng(2).random((12, 3)) * 0.1)
    tested, leaf_of, n_tested, voting = leaf_test_plan(t, WindowParams())
    assert tested.sum() == 2 and n_tested.tolist() == [2] and voting.all()
    both = np.where(tested, 1, 0).astype(np.uint8)
    assert resolve_leaves(both, tested, leaf_of, n_tested, voting, 0.5).all()
    split = np.zeros(12, np.uint8)
    split[np.flatnonzero(tested)[0]] = 1
    assert resolve_leaves(split, tested, leaf_of, n_tested, voting, 0.5).all()
    none = np.zeros(12, np.uint8)
    assert not resolve_leaves(none, tested, leaf_of, n_tested, voting, 0.5).any()


def test_leaf_sampling_deterministic_and_seeded():
    pts = np.random.default_rng(3).random((3000, 3)) * 3
    t = build_octree(pts)
    a = leaf_test_plan(t, WindowParams(seed=5))[0]
    b = leaf_test_plan(t, WindowParams(seed=5))[0]
    c = leaf_test_plan(t, WindowParams(seed=6))[0]
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()


def test_window_params_validated():
    with pytest.raises(ValueError):
        WindowParams(k_half=0)
    with pytest.raises(ValueError):
        WindowParams(leaf_sample_fraction=0)
    with pytest.raises(ValueError):
        WindowParams(mode="vote")


# --- brute-force oracle -------------------------------------------------------------

def brute_occupancy(P, idx: ScanIndex, cone, cap):
    """All beams of the scan, no binning: same arithmetic, plain loops over numpy arrays."""
    d = P - idx.origin
    dp = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    v = d / dp
    c = idx.dirs[:, 0] * v[0] + idx.dirs[:, 1] * v[1] + idx.dirs[:, 2] * v[2]
    c = np.clip(c, -1.0, 1.0)
    ang = np.arccos(c)
    inside = np.flatnonzero(ang <= cone)
    inside = inside[np.lexsort((inside, ang[inside]))][:cap]
    parts = []
    for j in inside:
        r = idx.ranges[j] - dp * c[j]
        e = angular_weight(float(ang[j]), OCC.theta_scale) * TABLES.lookup_empty(r)
        parts.append(make_belief(e, TABLES.lookup_occupied(r)))
    return fuse_all(parts)[0]


def brute_classify(P, window, wp):
    cone = wp.neighbor_angle_mult * window.lambda_theta
    parts = []
    for idx in window.others:
        m = brute_occupancy(P, idx, cone, wp.neighbor_cap)
        parts.append(discretize(m, depth_weight_l(P, idx.b_norm, idx.origin, DiscretizeParams())))
    f = fuse_all(parts)[0]
    return int(f.e > f.o and f.e > f.u), f


def test_oracle_equivalence(small_street):
    frames, indices = small_street
    center, _ = frames[3]
    rng = np.random.default_rng(0)
    pick = np.sort(rng.choice(len(center), size=min(len(center), 1500), replace=False))
    window = ScanWindow(center.subset(pick), [x for i, x in enumerate(indices) if i != 3])
    wp = WindowParams(exhaustive=True)
    res = detect_window(window, OCC, DiscretizeParams(), wp, TABLES)
    labels, fused = zip(*(brute_classify(p, window, wp) for p in window.center.points))
    np.testing.assert_array_equal(res.labels, labels)
    np.testing.assert_allclose(res.fused, np.array(fused), atol=1e-12)
    assert 0 < np.sum(labels) < len(labels)


def test_reference_classifier_matches_compiled(small_street):
    frames, indices = small_street
    center, _ = frames[3]
    window = ScanWindow(center.subset(np.arange(0, len(center), 25)), [x for i, x in enumerate(indices) if i != 3],
                        indices[3])
    for mode in ("discretized", "pairwise"):
        wp = WindowParams(exhaustive=True, mode=mode)
        res = detect_window(window, OCC, DiscretizeParams(), wp, TABLES)
        ref = [classify_point(p, window, OCC, DiscretizeParams(), wp, TABLES) for p in window.center.points]
        np.testing.assert_array_equal(res.labels, ref)


def test_reference_leaf_matches_compiled(small_street):
    frames, indices = small_street
    center, _ = frames[3]
    window = ScanWindow(center, [x for i, x in enumerate(indices) if i != 3])
    wp = WindowParams()
    res = detect_window(window, OCC, DiscretizeParams(), wp, TABLES)
    tree = build_octree(center.points, wp.octree_resolution)
    sizes = tree.leaf_sizes()
    for i in np.flatnonzero(sizes >= wp.tau_np)[:40]:
        members = tree.leaf_points(i)
        ref = classify_leaf(members, tree.leaf_keys[i], window, OCC, DiscretizeParams(), wp, TABLES)
        np.testing.assert_array_equal(res.labels[members], ref)


# --- window-level behaviour -----------------------------------------------------------

def test_empty_window_is_static():
    c = ScanRecord.from_xyz(np.ones((4, 3)))
    assert not detect_window(ScanWindow(c, [])).labels.any()


def test_vacuous_scans_change_nothing(small_street):
    frames, indices = small_street
    center, _ = frames[3]
    others = [x for i, x in enumerate(indices) if i != 3]
    window = ScanWindow(center, others)
    # beams pointing straight down from far above see none of the street
    far = ScanIndex(ScanRecord.from_xyz([[0, 0, 500.0]], sensor_origin=[0, 0, 1000.0]))
    more = ScanWindow(center, others + [far], lambda_theta=window.lambda_theta)
    a = detect_window(window, wparams=WindowParams(exhaustive=True), tables=TABLES)
    b = detect_window(more, wparams=WindowParams(exhaustive=True), tables=TABLES)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_detection_deterministic(small_street):
    frames, indices = small_street
    center, _ = frames[3]
    window = ScanWindow(center, [x for i, x in enumerate(indices) if i != 3])
    a = detect_window(window, tables=TABLES)
    b = detect_window(window, tables=TABLES)
    np.testing.assert_array_equal(a.labels, b.labels)


def fan_scan(distance, n=41, spacing=0.001, origin=(0.0, 0.0, 0.0)):
    a = spacing * (np.arange(n) - n // 2)
    o = np.asarray(origin)
    return ScanIndex(ScanRecord.from_xyz(o + distance * np.c_[np.cos(a), np.sin(a), np.zeros(n)],
                                         sensor_origin=o))


@pytest.mark.parametrize("mode", ["discretized", "pairwise"])
def test_point_seen_through_is_moving(mode):
    P = np.array([[10.0, 0.0, 0.0]])
    others = [fan_scan(20.0, origin=(0.1 * k, 0, 0)) for k in range(1, 4)]
    window = ScanWindow(ScanRecord.from_xyz(P), others, fan_scan(10.0), lambda_theta=0.001)
    wp = WindowParams(exhaustive=True, mode=mode)
    assert detect_window(window, wparams=wp).labels.tolist() == [1]


@pytest.mark.parametrize("mode", ["discretized", "pairwise"])
def test_wall_point_is_static(mode):
    P = np.array([[10.0, 0.0, 0.0]])
    others = [fan_scan(10.0 - 0.1 * k, origin=(0.1 * k, 0, 0)) for k in range(1, 4)]
    window = ScanWindow(ScanRecord.from_xyz(P), others, fan_scan(10.0), lambda_theta=0.001)
    wp = WindowParams(exhaustive=True, mode=mode)
    assert detect_window(window, wparams=wp).labels.tolist() == [0]
