"""Dempster-Shafer occupancy algebra over the frame {empty, occupied}.

A belief is the mass triple (e, o, u) on {empty}, {occupied} and the whole
frame (unknown). Beam beliefs are computed from the geometry of a point
against a lidar beam O -> Q, optionally smoothed by the measurement and
registration noise, then combined with Dempster's rule.

Signed beam coordinate used throughout: ``r = |OQ| - <OP, OQ/|OQ|>``, i.e. the
distance from the projection P' of P onto the beam to the hit Q, positive
when P' lies between the sensor and the hit (the beam passed through P') and
non-positive when P' lies at or behind the hit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import ndtr

CONFLICT_EPS = 1e-12


class DegenerateGeometryError(ValueError):
    pass


class DegenerateScanError(ValueError):
    pass


class Belief(NamedTuple):
    e: float
    o: float
    u: float

    def is_valid(self, tol: float = 1e-9) -> bool:
        return min(self) >= -tol and abs(sum(self) - 1.0) <= tol

    def dominant(self) -> str | None:
        """Name of the strictly largest mass, or None on a tie."""
        e, o, u = self
        if e > o and e > u:
            return "e"
        if o > e and o > u:
            return "o"
        if u > e and u > o:
            return "u"
        return None


VACUOUS = Belief(0.0, 0.0, 1.0)


@dataclass(frozen=True)
class OccupancyParams:
    sigma_m: float = 0.05
    sigma_r: float = 0.15
    theta_scale: float = 0.0035
    range_kernel_scale: float = 1.0
    conv_table_step: float = 0.01
    conv_table_halfwidth: float = 5.0

    def __post_init__(self):
        for name in ("sigma_m", "sigma_r", "theta_scale", "range_kernel_scale",
                     "conv_table_step", "conv_table_halfwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def sigma_f(self) -> float:
        return math.sqrt(self.sigma_m ** 2 + self.sigma_r ** 2)


@dataclass(frozen=True)
class DiscretizeParams:
    r_sup: float = 0.8
    r_inf: float = 0.6

    def __post_init__(self):
        if not 0 < self.r_inf <= self.r_sup <= 1:
            raise ValueError("need 0 < r_inf <= r_sup <= 1")


def make_belief(e: float, o: float) -> Belief:
    """Clamp (e, o) to a valid triple; excess mass is taken from u first, then rescaled."""
    e = max(0.0, e)
    o = max(0.0, o)
    s = e + o
    if s > 1.0:
        e, o = e / s, o / s
    return Belief(e, o, max(0.0, 1.0 - e - o))


# --- beam geometry ---------------------------------------------------------

def beam_coordinates(P, origin, endpoint) -> tuple[float, float]:
    """Return ``(r, theta)``: signed distance of P' to Q and angle between OP and OQ."""
    ox, oy, oz = (float(v) for v in origin)
    qx, qy, qz = float(endpoint[0]) - ox, float(endpoint[1]) - oy, float(endpoint[2]) - oz
    px, py, pz = float(P[0]) - ox, float(P[1]) - oy, float(P[2]) - oz
    rq = math.sqrt(qx * qx + qy * qy + qz * qz)
    dp = math.sqrt(px * px + py * py + pz * pz)
    if rq == 0.0:
        raise DegenerateGeometryError("beam has zero length")
    if dp == 0.0:
        raise DegenerateGeometryError("point coincides with the beam origin")
    ux, uy, uz = qx / rq, qy / rq, qz / rq
    vx, vy, vz = px / dp, py / dp, pz / dp
    c = ux * vx + uy * vy + uz * vz
    c = min(1.0, max(-1.0, c))
    return rq - dp * c, math.acos(c)


def angular_weight(theta: float, theta_scale: float) -> float:
    return math.exp(-(theta * theta) / (2.0 * theta_scale * theta_scale))


def beam_belief(P, origin, endpoint, params: OccupancyParams = OccupancyParams()) -> Belief:
    """Unsmoothed belief at P induced by the beam origin -> endpoint."""
    r, theta = beam_coordinates(P, origin, endpoint)
    if r > 0.0:
        e_r, o_r = 1.0, 0.0
    else:
        x = r / params.range_kernel_scale
        e_r, o_r = 0.0, math.exp(-(x * x) / 2.0)
    return make_belief(angular_weight(theta, params.theta_scale) * e_r, o_r)


# --- smoothing tables ------------------------------------------------------

@dataclass(frozen=True)
class ConvTables:
    """Noise-convolved step (empty) and one-sided kernel (occupied) sampled over signed r."""

    step: float
    halfwidth: float
    empty: np.ndarray
    occupied: np.ndarray

    @property
    def r(self) -> np.ndarray:
        return -self.halfwidth + self.step * np.arange(len(self.empty))

    def lookup_empty(self, r: float) -> float:
        return _interp(self.empty, self.step, self.halfwidth, r)

    def lookup_occupied(self, r: float) -> float:
        return _interp(self.occupied, self.step, self.halfwidth, r)


def _interp(table: np.ndarray, step: float, halfwidth: float, r: float) -> float:
    x = (r + halfwidth) / step
    n = table.shape[0]
    if x <= 0.0:
        return float(table[0])
    if x >= n - 1:
        return float(table[n - 1])
    i = int(math.floor(x))
    f = x - i
    lo = float(table[i])
    return lo + f * (float(table[i + 1]) - lo)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


def occupied_convolution(r: np.ndarray, sigma_f: float, kernel_scale: float) -> np.ndarray:
    """``(o_r * N(0, sigma_f^2))(r)`` by Gauss-Legendre quadrature of the convolution integral.

    The integrand ``o_r(r - t) g(t)`` is smooth for ``t >= r`` and zero below, so
    each sample integrates over ``[max(r, -8 sigma), 8 sigma]``.
    """
    r = np.asarray(r, dtype=np.float64)
    hi = 8.0 * sigma_f
    lo = np.maximum(r, -hi)
    out = np.zeros_like(r)
    ok = lo < hi
    a, b = lo[ok][:, None], hi
    half = 0.5 * (b - a)
    t = a + half * (_GL_NODES[None, :] + 1.0)
    x = (r[ok][:, None] - t) / kernel_scale
    g = np.exp(-0.5 * (t / sigma_f) ** 2) / (sigma_f * math.sqrt(2.0 * math.pi))
    out[ok] = (half[:, 0] * ((np.exp(-0.5 * x * x) * g) @ _GL_WEIGHTS))
    return out


def build_smoothing_tables(params: OccupancyParams = OccupancyParams()) -> ConvTables:
    n = int(round(2.0 * params.conv_table_halfwidth / params.conv_table_step)) + 1
    r = -params.conv_table_halfwidth + params.conv_table_step * np.arange(n)
    sf = params.sigma_f
    empty = ndtr(r / sf)
    occupied = np.clip(occupied_convolution(r, sf, params.range_kernel_scale), 0.0, 1.0)
    for a in (empty, occupied):
        a.setflags(write=False)
    return ConvTables(params.conv_table_step, params.conv_table_halfwidth, empty, occupied)


def smoothed_beam_belief(P, origin, endpoint, params: OccupancyParams, tables: ConvTables) -> Belief:
    r, theta = beam_coordinates(P, origin, endpoint)
    e = angular_weight(theta, params.theta_scale) * tables.lookup_empty(r)
    o = tables.lookup_occupied(r)
    return make_belief(e, o)


# --- combination -----------------------------------------------------------

def fuse_checked(a: Belief, b: Belief) -> tuple[Belief, bool]:
    """Dempster's rule. Returns ``(belief, total_conflict)``; total conflict yields the vacuous belief."""
    e1, o1, u1 = a
    e2, o2, u2 = b
    k = o1 * e2 + e1 * o2
    norm = 1.0 - k
    if norm <= CONFLICT_EPS:
        return VACUOUS, True
    return Belief((e1 * e2 + e1 * u2 + u1 * e2) / norm,
                  (o1 * o2 + o1 * u2 + u1 * o2) / norm,
                  (u1 * u2) / norm), False


def fuse(a: Belief, b: Belief) -> Belief:
    return fuse_checked(a, b)[0]


def fuse_all(beliefs) -> tuple[Belief, int]:
    """Left fold of ``fuse`` starting from the vacuous belief; also counts total conflicts."""
    acc = VACUOUS
    conflicts = 0
    for b in beliefs:
        acc, c = fuse_checked(acc, b)
        conflicts += c
    return acc, conflicts


class Comparison(NamedTuple):
    conf: float
    cons: float
    unc: float
    moving: bool


def compare(a: Belief, b: Belief) -> Comparison:
    e1, o1, u1 = a
    e2, o2, u2 = b
    conf = e1 * o2 + o1 * e2
    cons = e1 * e2 + o1 * o2 + u1 * u2
    unc = u1 * (e2 + o2) + u2 * (e1 + o1)
    return Comparison(conf, cons, unc, conf > cons and conf > unc)


# --- discretization --------------------------------------------------------

def depth_weight_l(P, b_norm: float, origin, dparams: DiscretizeParams = DiscretizeParams()) -> float:
    """Discretized mass, decreasing linearly from r_sup at the sensor to r_inf at the farthest point."""
    if not b_norm > 0:
        raise DegenerateScanError("farthest-point distance must be positive")
    dx, dy, dz = (float(P[i]) - float(origin[i]) for i in range(3))
    d = math.sqrt(dx * dx + dy * dy + dz * dz)
    l = dparams.r_sup - (dparams.r_sup - dparams.r_inf) * (d / b_norm)
    return min(dparams.r_sup, max(dparams.r_inf, l))


def discretize(b: Belief, l: float) -> Belief:
    dom = b.dominant()
    if dom == "e":
        return Belief(l, 0.0, 1.0 - l)
    if dom == "o":
        return Belief(0.0, l, 1.0 - l)
    if dom == "u":
        return Belief(0.0, 0.0, 1.0)
    return VACUOUS
