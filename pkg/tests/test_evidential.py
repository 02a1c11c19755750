import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.stats import norm

from evident_motion.evidential import (VACUOUS, Belief, DegenerateGeometryError, DegenerateScanError,
                                       DiscretizeParams, OccupancyParams, beam_belief, beam_coordinates,
                                       build_smoothing_tables, compare, depth_weight_l, discretize, fuse,
                                       fuse_all, fuse_checked, smoothed_beam_belief)

O = np.zeros(3)
Q = np.array([10.0, 0.0, 0.0])
P_DEFAULT = OccupancyParams()


@st.composite
def beliefs(draw):
    e = draw(st.floats(0, 1))
    o = draw(st.floats(0, 1 - e))
    return Belief(e, o, max(0.0, 1.0 - e - o))


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


# --- beam beliefs ------------------------------------------------------------

def test_beam_before_hit():
    b = beam_belief([9, 0, 0], O, Q)
    assert close(b, (1, 0, 0))


def test_beam_past_hit():
    b = beam_belief([11, 0, 0], O, Q)
    assert b.e == 0
    assert b.o == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert b.u == pytest.approx(1 - math.exp(-0.5), abs=1e-12)


def test_beam_angular_weight():
    th = P_DEFAULT.theta_scale
    P = 5 * np.array([math.cos(th), math.sin(th), 0])
    b = beam_belief(P, O, Q)
    assert b.e == pytest.approx(math.exp(-0.5), abs=1e-9)
    assert b.o == 0


def test_beam_point_at_origin():
    with pytest.raises(DegenerateGeometryError):
        beam_belief(O, O, Q)


def test_beam_hit_uses_occupied_branch():
    b = beam_belief(Q, O, Q)
    assert close(b, (0, 1, 0))


def test_beam_coordinates_sign():
    r, th = beam_coordinates([7, 0, 0], O, Q)
    assert r == pytest.approx(3) and th == pytest.approx(0)
    r, _ = beam_coordinates([12, 0, 0], O, Q)
    assert r == pytest.approx(-2)


# --- smoothing tables --------------------------------------------------------

def occupied_oracle(r, sf, scale=1.0):
    """Direct adaptive quadrature of the one-sided kernel against N(0, sf^2)."""
    f = lambda s: math.exp(-0.5 * (s / scale) ** 2) * norm.pdf(r - s, scale=sf)
    return quad(f, -np.inf, 0.0, points=None, limit=200)[0]


def test_empty_table_limits_and_midpoint():
    t = build_smoothing_tables()
    assert t.empty[-1] == pytest.approx(1.0, abs=1e-12)
    assert t.empty[0] == pytest.approx(0.0, abs=1e-12)
    assert t.lookup_empty(0.0) == pytest.approx(0.5, abs=1e-3)
    assert t.lookup_empty(100.0) == t.empty[-1]


def test_empty_table_matches_cdf():
    t = build_smoothing_tables()
    sf = P_DEFAULT.sigma_f
    np.testing.assert_allclose(t.empty, norm.cdf(t.r / sf), atol=1e-12)


@pytest.mark.parametrize("r", [-2.0, -0.5, -0.3, -0.1, 0.0, 0.1, 0.3])
def test_occupied_table_matches_quadrature(r):
    t = build_smoothing_tables()
    assert t.lookup_occupied(r) == pytest.approx(occupied_oracle(r, P_DEFAULT.sigma_f), abs=1e-4)


def test_occupied_table_bounds_and_fine_grid():
    t = build_smoothing_tables()
    assert t.occupied.min() >= 0
    assert t.occupied.max() <= 1.0
    # 10x finer direct integration of the convolution sum
    sf = P_DEFAULT.sigma_f
    ds = t.step / 10
    s = np.arange(-8.0, 0.0 + ds / 2, ds)
    kern = np.exp(-0.5 * s ** 2)
    kern[-1] *= 0.5
    kern[0] *= 0.5
    direct = np.array([np.sum(kern * norm.pdf(r - s, scale=sf)) * ds for r in t.r])
    assert np.abs(direct - t.occupied).max() < 1e-3


def test_occupied_peak_location():
    # The smoothed kernel peaks where the quadrature oracle peaks, not at the hit.
    t = build_smoothing_tables()
    r = np.arange(-1.0, 0.5, 0.001)
    oracle = np.array([occupied_oracle(x, P_DEFAULT.sigma_f) for x in r])
    assert abs(t.r[np.argmax(t.occupied)] - r[np.argmax(oracle)]) <= t.step


def test_smoothed_saturation():
    t = build_smoothing_tables()
    sf = P_DEFAULT.sigma_f
    b = smoothed_beam_belief([10 - 5 * sf, 0, 0], O, Q, P_DEFAULT, t)
    assert b.e >= 0.999


def test_smoothed_midpoint():
    t = build_smoothing_tables()
    b = smoothed_beam_belief(Q, O, Q, P_DEFAULT, t)
    assert b.e == pytest.approx(0.5, abs=1e-2)
    assert b.is_valid()


def test_smoothed_converges_to_sharp():
    p = OccupancyParams(sigma_m=1e-4, sigma_r=1e-4)
    t = build_smoothing_tables(p)
    rng = np.random.default_rng(0)
    for r in np.r_[rng.uniform(-3, -0.01, 100), rng.uniform(0.0101, 9, 100)]:
        P = np.array([10.0 - r, 0.0, 0.0])
        a = smoothed_beam_belief(P, O, Q, p, t)
        b = beam_belief(P, O, Q, p)
        assert close(a, b, 1e-3), (r, a, b)


@settings(max_examples=300, deadline=None)
@given(st.floats(-20, 20), st.floats(-3, 3), st.floats(-3, 3))
def test_smoothed_beliefs_valid(x, y, z):
    assume(x * x + y * y + z * z > 1e-6)
    t = build_smoothing_tables()
    assert smoothed_beam_belief([x, y, z], O, Q, P_DEFAULT, t).is_valid()
    assert beam_belief([x, y, z], O, Q).is_valid()


# --- fusion ------------------------------------------------------------------

def test_fuse_vacuous_identity():
    assert close(fuse(Belief(0.5, 0.3, 0.2), VACUOUS), (0.5, 0.3, 0.2))


def test_fuse_hand_value():
    b = fuse(Belief(0.6, 0.2, 0.2), Belief(0.6, 0.2, 0.2))
    # K = 0.24: e = 0.6/0.76, o = 0.12/0.76, u = 0.04/0.76
    assert close(b, (0.7895, 0.1579, 0.0526), 1e-4)


def test_fuse_total_conflict():
    b, flag = fuse_checked(Belief(1, 0, 0), Belief(0, 1, 0))
    assert flag and b == VACUOUS


def test_fuse_all_counts_conflicts():
    b, n = fuse_all([Belief(1, 0, 0), Belief(0, 1, 0), Belief(0.5, 0, 0.5)])
    assert n == 1
    assert close(b, (0.5, 0, 0.5))


@settings(max_examples=2000, deadline=None)
@given(beliefs(), beliefs(), beliefs())
def test_fuse_commutative_associative(a, b, c):
    ab, k1 = fuse_checked(a, b)
    bc, k2 = fuse_checked(b, c)
    assume(not k1 and not k2)
    assert close(ab, fuse(b, a))
    left, k3 = fuse_checked(ab, c)
    right, k4 = fuse_checked(a, bc)
    assume(not k3 and not k4)
    assume(1 - (a.o * b.e + a.e * b.o) > 1e-3 and 1 - (b.o * c.e + b.e * c.o) > 1e-3)
    assume(1 - (ab.o * c.e + ab.e * c.o) > 1e-3)
    assert left.is_valid() and close(left, right)


def test_fuse_associative_random_trials():
    rng = np.random.default_rng(7)
    m = rng.dirichlet(np.ones(3), size=(10_000, 3))
    checked = 0
    for a, b, c in m:
        a, b, c = Belief(*a), Belief(*b), Belief(*c)
        ab, k1 = fuse_checked(a, b)
        bc, k2 = fuse_checked(b, c)
        left, k3 = fuse_checked(ab, c)
        right, k4 = fuse_checked(a, bc)
        if k1 or k2 or k3 or k4:
            continue
        checked += 1
        assert close(left, right)
        assert close(ab, fuse(b, a))
        assert left.is_valid()
    assert checked > 9000


# --- comparison --------------------------------------------------------------

def test_compare_examples():
    c = compare(Belief(1, 0, 0), Belief(0, 1, 0))
    assert c.conf == 1 and c.moving
    c = compare(VACUOUS, VACUOUS)
    assert c.cons == 1 and not c.moving
    c = compare(Belief(0.6, 0.2, 0.2), Belief(0.2, 0.6, 0.2))
    assert (c.conf, c.cons, c.unc) == pytest.approx((0.40, 0.28, 0.32))
    assert c.moving


@settings(max_examples=500, deadline=None)
@given(beliefs(), beliefs())
def test_compare_symmetric(a, b):
    x, y = compare(a, b), compare(b, a)
    assert x.moving == y.moving
    assert close(x[:3], y[:3], 1e-12)
    assert sum(x[:3]) == pytest.approx(1.0, abs=1e-9)


# --- discretization ----------------------------------------------------------

def test_depth_weight_examples():
    assert depth_weight_l(O, 40.0, O) == pytest.approx(0.8)
    assert depth_weight_l([40, 0, 0], 40.0, O) == pytest.approx(0.6)
    assert depth_weight_l([0, 20, 0], 40.0, O) == pytest.approx(0.7)
    assert depth_weight_l([80, 0, 0], 40.0, O) == pytest.approx(0.6)
    with pytest.raises(DegenerateScanError):
        depth_weight_l([1, 0, 0], 0.0, O)


def test_discretize_examples():
    assert close(discretize(Belief(0.5, 0.3, 0.2), 0.8), (0.8, 0, 0.2))
    assert close(discretize(Belief(0.2, 0.5, 0.3), 0.6), (0, 0.6, 0.4))
    assert discretize(Belief(0.4, 0.4, 0.2), 0.7) == VACUOUS


@settings(max_examples=500, deadline=None)
@given(beliefs(), st.floats(0.01, 1.0))
def test_discretize_properties(b, l):
    d = discretize(b, l)
    assert d.is_valid()
    assert (d.e > 0) + (d.o > 0) <= 1
    assert max(d.e, d.o) in (0.0, l)


def test_params_validation():
    with pytest.raises(ValueError):
        OccupancyParams(sigma_r=0)
    with pytest.raises(ValueError):
        DiscretizeParams(r_sup=0.5, r_inf=0.6)
