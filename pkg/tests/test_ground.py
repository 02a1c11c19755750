import numpy as np
import pytest

from evident_motion.ground_filter import (build_height_grid, classify_cells, ground_mask, remove_ground,
                                          strip_ground)
from evident_motion.scan_io import Label, ScanRecord


def scan(xyz, origin=None):
    return ScanRecord.from_xyz(xyz, sensor_origin=origin)


def tile_points(i, j, zs, cell=0.4):
    c = (np.array([i, j]) + 0.5) * cell
    return [[c[0], c[1], z] for z in zs]


def test_min_max():
    g = build_height_grid(scan(tile_points(0, 0, [0.0, 0.05])))
    c = g.cells[(0, 0)]
    assert (c.h_min, c.h_max) == (0.0, 0.05)


def test_empty_grid():
    g = classify_cells(build_height_grid(scan(np.empty((0, 3)))))
    assert g.cells == {}


def test_floor_convention():
    g = build_height_grid(scan([[0.4, 0.0, 0.0], [-0.01, 0.0, 0.0]]))
    assert set(g.cells) == {(1, 0), (-1, 0)}


def test_tiles_relative_to_sensor():
    g = build_height_grid(scan([[10.1, 5.1, 2.0]], origin=[10, 5, 2]))
    assert set(g.cells) == {(0, 0)}


def test_seed_rule():
    g = classify_cells(build_height_grid(scan(tile_points(0, 0, [0.0, 0.05]))))
    c = g.cells[(0, 0)]
    assert c.propagated == 0.0
    assert c.is_ground and c.ground_height == 0.05


def test_span_rule():
    pts = tile_points(0, 0, [0.0, 0.01]) + tile_points(1, 0, [0.0, 0.5])
    g = classify_cells(build_height_grid(scan(pts)))
    assert not g.cells[(1, 0)].is_ground
    assert g.cells[(1, 0)].ground_height == g.cells[(1, 0)].propagated


def test_curb():
    pts = tile_points(0, 0, [0.0, 0.0]) + tile_points(1, 0, [0.14, 0.16])
    g = classify_cells(build_height_grid(scan(pts)))
    c = g.cells[(1, 0)]
    assert c.propagated == 0.0
    assert not c.is_ground


def test_ramp_propagates():
    pts = []
    for i in range(11):
        pts += tile_points(i, 0, [0.08 * i, 0.08 * i + 0.01])
    g = classify_cells(build_height_grid(scan(pts)))
    assert all(g.cells[(i, 0)].is_ground for i in range(11))


def test_ramp_too_steep_stops():
    pts = []
    for i in range(5):
        pts += tile_points(i, 0, [0.12 * i])
    g = classify_cells(build_height_grid(scan(pts)))
    assert g.cells[(0, 0)].is_ground
    assert not g.cells[(1, 0)].is_ground


def test_ground_height_invariant():
    rng = np.random.default_rng(0)
    pts = rng.uniform([-8, -8, -0.3], [8, 8, 0.3], size=(3000, 3))
    g = classify_cells(build_height_grid(scan(pts)))
    for c in g.cells.values():
        assert c.h_min <= c.h_max
        if c.is_ground:
            assert c.ground_height == c.h_max
        elif np.isfinite(c.propagated):
            assert c.ground_height == c.propagated


def test_empty_origin_uses_blind_region_seed():
    # sensor 1.7 m above a flat ring of ground: the tiles around it are empty
    rng = np.random.default_rng(1)
    xy = rng.uniform(-15, 15, size=(40000, 2))
    xy = xy[np.hypot(*xy.T) > 3]
    pts = np.c_[xy, np.full(len(xy), -1.7)]
    assert remove_ground(scan(pts)).mean() == 1.0


def plane(rng, n, slope=0.0, sigma=0.0, half=20.0):
    xy = rng.uniform(-half, half, size=(n, 2))
    z = -1.7 + slope * xy[:, 0] + rng.normal(0, sigma, n) if sigma else -1.7 + slope * xy[:, 0]
    return np.c_[xy, z]


def test_flat_plane_recall():
    rng = np.random.default_rng(2)
    pts = plane(rng, 60000, sigma=0.009)
    assert remove_ground(scan(pts)).mean() >= 0.99


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_steep_slope_recall(seed):
    # about 25 points per tile; a 20% grade rises 0.08 m per tile, just under the step bound
    rng = np.random.default_rng(seed)
    pts = plane(rng, 60000, slope=0.2, sigma=0.002, half=10.0)
    assert remove_ground(scan(pts)).mean() >= 0.95


def box_surface(rng, lo, hi, n):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    pts = rng.uniform(lo, hi, size=(n, 3))
    face = rng.integers(0, 5, n)  # four sides and the top
    axis = np.array([0, 0, 1, 1, 2])[face]
    side = np.where(face % 2 == 0, lo[axis], hi[axis])
    side[face == 4] = hi[2]
    pts[np.arange(n), axis] = side
    return pts


def test_box_retained():
    rng = np.random.default_rng(4)
    ground = plane(rng, 40000, sigma=0.005)
    box = box_surface(rng, [5.0, 2.0, -1.7], [7.0, 3.5, -1.2], 4000)
    mask = remove_ground(scan(np.vstack([ground, box])))
    assert (~mask[len(ground):]).mean() >= 0.99
    assert mask[:len(ground)].mean() >= 0.95


def test_strip_ground_saturation_and_identity():
    pts = tile_points(0, 0, [0.0, 0.01]) + tile_points(1, 0, [0.02])
    s = scan(pts)
    work, labels = strip_ground(s, classify_cells(build_height_grid(s)))
    assert len(work) == 0 and (labels == Label.GROUND).all()
    g = build_height_grid(s)  # unclassified: nothing is ground
    work, labels = strip_ground(s, g)
    np.testing.assert_array_equal(work.points, s.points)
    assert (labels == 0).all()


def test_strip_ground_recount():
    rng = np.random.default_rng(5)
    pts = np.vstack([plane(rng, 5000, sigma=0.005, half=6),
                     box_surface(rng, [2, 2, -1.7], [3, 3, -0.5], 500)])
    s = scan(pts)
    g = classify_cells(build_height_grid(s))
    work, labels = strip_ground(s, g, np.full(len(s), Label.DROPPED))
    removed = sum(len(c.point_indices) for c in g.cells.values() if c.is_ground)
    assert len(s) - len(work) == removed
    assert np.sum(labels == Label.GROUND) == removed
    assert np.all(labels[~ground_mask(s, g)] == Label.DROPPED)


def test_deterministic():
    rng = np.random.default_rng(6)
    s = scan(plane(rng, 5000, sigma=0.02))
    np.testing.assert_array_equal(remove_ground(s), remove_ground(s))


def test_grid_params_validated():
    with pytest.raises(ValueError):
        build_height_grid(scan([[0, 0, 0]]), cell_size=0)
