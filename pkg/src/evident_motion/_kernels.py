"""Compiled inner loops for beam lookup and per-point classification.

Scalar arithmetic mirrors ``evidential`` operation for operation so the compiled
path and the pure-Python reference produce identical floating-point results.
"""
import math

import numpy as np
from numba import njit, prange

MODE_DISCRETIZED = 0
MODE_PAIRWISE = 1

_CONFLICT_EPS = 1e-12


@njit(cache=True)
def _interp(table, step, halfwidth, r):
    x = (r + halfwidth) / step
    n = table.shape[0]
    if x <= 0.0:
        return table[0]
    if x >= n - 1:
        return table[n - 1]
    i = int(math.floor(x))
    f = x - i
    lo = table[i]
    return lo + f * (table[i + 1] - lo)


@njit(cache=True)
def _make_belief(e, o):
    e = max(0.0, e)
    o = max(0.0, o)
    s = e + o
    if s > 1.0:
        e = e / s
        o = o / s
    return e, o, max(0.0, 1.0 - e - o)


@njit(cache=True)
def _fuse(e1, o1, u1, e2, o2, u2):
    k = o1 * e2 + e1 * o2
    norm = 1.0 - k
    if norm <= _CONFLICT_EPS:
        return 0.0, 0.0, 1.0, True
    return ((e1 * e2 + e1 * u2 + u1 * e2) / norm,
            (o1 * o2 + o1 * u2 + u1 * o2) / norm,
            (u1 * u2) / norm, False)


@njit(cache=True)
def _insert(count, cap, ang, idx, cosv, buf_ang, buf_idx, buf_cos):
    """Insert (ang, idx) into the ascending buffer, keeping at most ``cap`` entries."""
    if count == cap:
        la = buf_ang[cap - 1]
        if ang > la or (ang == la and idx > buf_idx[cap - 1]):
            return count
        pos = cap - 1
    else:
        pos = count
        count += 1
    while pos > 0:
        pa = buf_ang[pos - 1]
        if pa < ang or (pa == ang and buf_idx[pos - 1] < idx):
            break
        buf_ang[pos] = pa
        buf_idx[pos] = buf_idx[pos - 1]
        buf_cos[pos] = buf_cos[pos - 1]
        pos -= 1
    buf_ang[pos] = ang
    buf_idx[pos] = idx
    buf_cos[pos] = cosv
    return count


@njit(cache=True)
def collect_beams(vx, vy, vz, s, dirs, order, binoff, pt_base, bin_base,
                  el_lo, n_el, n_az, bw, cone, cap, buf_ang, buf_idx, buf_cos):
    """Beams of scan ``s`` within ``cone`` of unit direction v, nearest first. Returns the count."""
    cz = min(1.0, max(-1.0, vz))
    el = math.asin(cz)
    az = math.atan2(vy, vx)
    nel = n_el[s]
    naz = n_az[s]
    w = bw[s]
    waz = 2.0 * math.pi / naz
    margin = 1e-9
    e0 = int(math.floor((el - cone - margin - el_lo[s]) / w))
    e1 = int(math.floor((el + cone + margin - el_lo[s]) / w))
    if e0 < 0:
        e0 = 0
    if e1 > nel - 1:
        e1 = nel - 1
    if abs(el) + cone + margin >= 0.5 * math.pi:
        a0 = 0
        a1 = naz - 1
    else:
        daz = math.asin(min(1.0, math.sin(cone) / math.cos(abs(el)))) + margin
        a0 = int(math.floor((az - daz + math.pi) / waz))
        a1 = int(math.floor((az + daz + math.pi) / waz))
        if a1 - a0 + 1 >= naz:
            a0 = 0
            a1 = naz - 1
    count = 0
    pb = pt_base[s]
    bb = bin_base[s]
    for eb in range(e0, e1 + 1):
        for a in range(a0, a1 + 1):
            ab = a % naz
            b = eb * naz + ab
            for q in range(binoff[bb + b], binoff[bb + b + 1]):
                j = order[pb + q]
                g = pb + j
                c = dirs[g, 0] * vx + dirs[g, 1] * vy + dirs[g, 2] * vz
                c = min(1.0, max(-1.0, c))
                ang = math.acos(c)
                if ang <= cone:
                    count = _insert(count, cap, ang, j, c, buf_ang, buf_idx, buf_cos)
    return count


@njit(cache=True)
def occupancy_in_scan(px, py, pz, s, origins, dirs, ranges, order, binoff, pt_base, bin_base,
                      el_lo, n_el, n_az, bw, cone, cap, theta_scale,
                      t_empty, t_occ, t_step, t_hw, buf_ang, buf_idx, buf_cos):
    """Fused smoothed belief at P from the neighbouring beams of scan ``s``."""
    dx = px - origins[s, 0]
    dy = py - origins[s, 1]
    dz = pz - origins[s, 2]
    dp = math.sqrt(dx * dx + dy * dy + dz * dz)
    if dp == 0.0:
        return 0.0, 0.0, 1.0, 0, dp
    vx = dx / dp
    vy = dy / dp
    vz = dz / dp
    n = collect_beams(vx, vy, vz, s, dirs, order, binoff, pt_base, bin_base,
                      el_lo, n_el, n_az, bw, cone, cap, buf_ang, buf_idx, buf_cos)
    e, o, u = 0.0, 0.0, 1.0
    conflicts = 0
    pb = pt_base[s]
    for k in range(n):
        rq = ranges[pb + buf_idx[k]]
        c = buf_cos[k]
        r = rq - dp * c
        theta = buf_ang[k]
        fth = math.exp(-(theta * theta) / (2.0 * theta_scale * theta_scale))
        be, bo, bu = _make_belief(fth * _interp(t_empty, t_step, t_hw, r),
                                  _interp(t_occ, t_step, t_hw, r))
        e, o, u, flag = _fuse(e, o, u, be, bo, bu)
        if flag:
            conflicts += 1
    return e, o, u, conflicts, dp


@njit(cache=True)
def _discretize(e, o, u, l):
    if e > o and e > u:
        return l, 0.0, 1.0 - l
    if o > e and o > u:
        return 0.0, l, 1.0 - l
    return 0.0, 0.0, 1.0


@njit(parallel=True, cache=True)
def classify_points(points, n_others, center_slot, origins, dirs, ranges, order, binoff,
                    pt_base, bin_base, el_lo, n_el, n_az, bw, b_norm, cone, cap,
                    theta_scale, t_empty, t_occ, t_step, t_hw, r_sup, r_inf, mode):
    """Label each point Moving (1) or Static (0) against scans ``0 .. n_others - 1``.

    Returns ``(labels, fused, conflicts)`` where ``fused`` is the final (e, o, u)
    in discretized mode and (moving pairs, pairs, 0) in pairwise mode.
    """
    m = points.shape[0]
    labels = np.zeros(m, np.uint8)
    fused = np.zeros((m, 3))
    conflicts = np.zeros(m, np.int64)
    for i in prange(m):
        buf_ang = np.empty(cap)
        buf_idx = np.empty(cap, np.int64)
        buf_cos = np.empty(cap)
        px = points[i, 0]
        py = points[i, 1]
        pz = points[i, 2]
        nconf = 0
        if mode == MODE_DISCRETIZED:
            fe, fo, fu = 0.0, 0.0, 1.0
            for s in range(n_others):
                e, o, u, c, dp = occupancy_in_scan(
                    px, py, pz, s, origins, dirs, ranges, order, binoff, pt_base, bin_base,
                    el_lo, n_el, n_az, bw, cone, cap, theta_scale, t_empty, t_occ, t_step, t_hw,
                    buf_ang, buf_idx, buf_cos)
                nconf += c
                l = r_sup - (r_sup - r_inf) * (dp / b_norm[s])
                l = min(r_sup, max(r_inf, l))
                de, do, du = _discretize(e, o, u, l)
                fe, fo, fu, flag = _fuse(fe, fo, fu, de, do, du)
                if flag:
                    nconf += 1
            fused[i, 0] = fe
            fused[i, 1] = fo
            fused[i, 2] = fu
            if fe > fo and fe > fu:
                labels[i] = 1
        else:
            ce, co, cu, c, dp = occupancy_in_scan(
                px, py, pz, center_slot, origins, dirs, ranges, order, binoff, pt_base, bin_base,
                el_lo, n_el, n_az, bw, cone, cap, theta_scale, t_empty, t_occ, t_step, t_hw,
                buf_ang, buf_idx, buf_cos)
            nconf += c
            votes = 0
            for s in range(n_others):
                e, o, u, c, dp = occupancy_in_scan(
                    px, py, pz, s, origins, dirs, ranges, order, binoff, pt_base, bin_base,
                    el_lo, n_el, n_az, bw, cone, cap, theta_scale, t_empty, t_occ, t_step, t_hw,
                    buf_ang, buf_idx, buf_cos)
                nconf += c
                conf = ce * o + co * e
                cons = ce * e + co * o + cu * u
                unc = cu * (e + o) + u * (ce + co)
                if conf > cons and conf > unc:
                    votes += 1
            fused[i, 0] = votes
            fused[i, 1] = n_others
            if 2 * votes > n_others:
                labels[i] = 1
        conflicts[i] = nconf
    return labels, fused, conflicts


@njit(cache=True)
def candidates_single(vx, vy, vz, s, dirs, order, binoff, pt_base, bin_base,
                      el_lo, n_el, n_az, bw, cone, cap):
    buf_ang = np.empty(cap)
    buf_idx = np.empty(cap, np.int64)
    buf_cos = np.empty(cap)
    n = collect_beams(vx, vy, vz, s, dirs, order, binoff, pt_base, bin_base,
                      el_lo, n_el, n_az, bw, cone, cap, buf_ang, buf_idx, buf_cos)
    return buf_idx[:n].copy(), buf_ang[:n].copy()
