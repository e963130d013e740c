"""Compiled event loops.

Every kernel works on a ring of ``L`` sites where bond ``b`` joins sites ``b``
and ``b + 1 (mod L)``.  Rate tables are indexed ``[y - lo, z - lo]``.  The
random stream is a ``numpy.random.Generator`` passed in from Python, so the
state advances in place and results are reproducible per replicate stream.

Kernels report problems through integer status codes instead of raising
(see ``STATUS``); the Python wrappers turn them into exceptions.
"""
from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
CAP_BREACH = 1
LOG_OVERFLOW = 2
RATE_BOUND = 3
ORDER_BROKEN = 4
LABEL_ORDER = 5
BOOKKEEPING = 6
BAD_PROBABILITY = 7
GUARD = 8

STATUS = {
    OK: "ok",
    CAP_BREACH: "occupancy left the tabulated range (cap breach)",
    LOG_OVERFLOW: "event log capacity exceeded",
    RATE_BOUND: "a rate exceeded the declared rate upper bound",
    ORDER_BROKEN: "sitewise ordering of coupled configurations broken",
    LABEL_ORDER: "label walkers out of order (y > z)",
    BOOKKEEPING: "label interval bookkeeping inconsistent",
    BAD_PROBABILITY: "refresh probability outside [0, 1]",
    GUARD: "tracked discrepancy reached the wraparound window edge",
}

_PROB_EPS = 1e-12


# ------------------------------------------------------------------ single


@njit(cache=True, inline="always")
def _bond_rate(occ, p_tab, q_tab, lo, b, L):
    d = b + 1
    if d == L:
        d = 0
    y = occ[b] - lo
    z = occ[d] - lo
    return p_tab[y, z] + q_tab[y, z]


@njit(cache=True, inline="always")
def _tree_set(tree, P, b, val):
    k = P + b
    tree[k] = val
    k >>= 1
    while k >= 1:
        tree[k] = tree[2 * k] + tree[2 * k + 1]
        k >>= 1


@njit(cache=True)
def single_tree(occ, cur, p_tab, q_tab, lo, hi, t0, t_end, obs_times, obs_bonds, obs_cur,
                log_t, log_b, log_d, rng):
    """Gillespie direct method over bonds with a binary sum tree.

    Returns ``(status, n_events)``.  ``obs_cur[k, j]`` receives the current
    through ``obs_bonds[j]`` at ``obs_times[k]``; events are appended to the
    log arrays when they have nonzero length.
    """
    L = occ.shape[0]
    P = 1
    while P < L:
        P *= 2
    tree = np.zeros(2 * P)
    for b in range(L):
        tree[P + b] = _bond_rate(occ, p_tab, q_tab, lo, b, L)
    for k in range(P - 1, 0, -1):
        tree[k] = tree[2 * k] + tree[2 * k + 1]
    n_obs = obs_times.shape[0]
    n_log = log_t.shape[0]
    k_obs = 0
    n_ev = 0
    t = t0
    status = OK
    while True:
        total = tree[1]
        if total > 0.0:
            t += rng.exponential() / total
        else:
            t = np.inf
        while k_obs < n_obs and obs_times[k_obs] <= t:
            for j in range(obs_bonds.shape[0]):
                obs_cur[k_obs, j] = cur[obs_bonds[j]]
            k_obs += 1
        if t > t_end:
            break
        u = rng.random() * total
        k = 1
        while k < P:
            left = tree[2 * k]
            if u < left:
                k = 2 * k
            else:
                u -= left
                k = 2 * k + 1
        b = k - P
        if b >= L:
            continue
        d = b + 1
        if d == L:
            d = 0
        y = occ[b] - lo
        z = occ[d] - lo
        pr = p_tab[y, z]
        if u < pr:
            occ[b] -= 1
            occ[d] += 1
            cur[b] += 1
            direction = 1
        elif u < pr + q_tab[y, z]:
            occ[b] += 1
            occ[d] -= 1
            cur[b] -= 1
            direction = -1
        else:
            continue  # rounding at a leaf boundary
        if occ[b] < lo or occ[b] > hi or occ[d] < lo or occ[d] > hi:
            status = CAP_BREACH
            break
        if n_log > 0:
            if n_ev < n_log:
                log_t[n_ev] = t
                log_b[n_ev] = b
                log_d[n_ev] = direction
            else:
                status = LOG_OVERFLOW
        n_ev += 1
        bm = b - 1
        if bm < 0:
            bm = L - 1
        _tree_set(tree, P, bm, _bond_rate(occ, p_tab, q_tab, lo, bm, L))
        _tree_set(tree, P, b, _bond_rate(occ, p_tab, q_tab, lo, b, L))
        _tree_set(tree, P, d, _bond_rate(occ, p_tab, q_tab, lo, d, L))
    return status, n_ev


@njit(cache=True)
def single_thin(occ, cur, p_tab, q_tab, lo, hi, R, t0, obs_times, obs_bonds, obs_cur, rng):
    """Uniformised simulation: every bond carries a rate-``R`` clock; a clock
    ring at bond ``b`` with mark ``v ~ U[0, R)`` is a deposition if
    ``v < p``, a removal if ``p <= v < p + q`` and nothing otherwise.

    The number of rings in each observation interval is Poisson; one uniform
    chooses both the bond and the mark.  Returns ``(status, n_events)``.
    """
    L = occ.shape[0]
    LR = L * R
    span = hi - lo
    t = t0
    n_ev = 0
    for k in range(obs_times.shape[0]):
        tk = obs_times[k]
        if tk > t:
            n = rng.poisson(LR * (tk - t))
            for _ in range(n):
                x = rng.random() * L
                b = int(x)
                if b >= L:
                    b = L - 1
                v = (x - b) * R
                d = b + 1
                if d == L:
                    d = 0
                y = occ[b] - lo
                z = occ[d] - lo
                pr = p_tab[y, z]
                if v < pr:
                    occ[b] = y + lo - 1
                    occ[d] = z + lo + 1
                    cur[b] += 1
                    n_ev += 1
                    if z + 1 > span or y == 0:
                        return CAP_BREACH, n_ev
                else:
                    qr = q_tab[y, z]
                    if v < pr + qr:
                        occ[b] = y + lo + 1
                        occ[d] = z + lo - 1
                        cur[b] -= 1
                        n_ev += 1
                        if y + 1 > span or z == 0:
                            return CAP_BREACH, n_ev
                    elif pr + qr > R:
                        return RATE_BOUND, n_ev
            t = tk
        for j in range(obs_bonds.shape[0]):
            obs_cur[k, j] = cur[obs_bonds[j]]
    return OK, n_ev


# -------------------------------------------------------- discrepancy pair


@njit(cache=True)
def pair_thin(occ, Q, p_tab, q_tab, lo, hi, R, t0, obs_times, obs_Q, q_limit, rng):
    """Basic coupling of ``omega`` and ``omega - delta_Q`` with one discrepancy.

    Only ``omega`` is stored; the lower configuration differs at ``Q mod L``.
    ``Q`` is unwrapped (signed crossing count).  Returns
    ``(status, Q, n_events, max_abs_Q)``.
    """
    L = occ.shape[0]
    LR = L * R
    t = t0
    n_ev = 0
    qmax = abs(Q)
    qr = Q % L
    for k in range(obs_times.shape[0]):
        tk = obs_times[k]
        if tk > t:
            n = rng.poisson(LR * (tk - t))
            for _ in range(n):
                x = rng.random() * L
                b = int(x)
                if b >= L:
                    b = L - 1
                v = (x - b) * R
                d = b + 1
                if d == L:
                    d = 0
                y = occ[b]
                z = occ[d]
                if b != qr and d != qr:
                    pr = p_tab[y - lo, z - lo]
                    if v < pr:
                        occ[b] = y - 1
                        occ[d] = z + 1
                    else:
                        qq = q_tab[y - lo, z - lo]
                        if v < pr + qq:
                            occ[b] = y + 1
                            occ[d] = z - 1
                        else:
                            if pr + qq > R:
                                return RATE_BOUND, Q, n_ev, qmax
                            continue
                    n_ev += 1
                    if occ[b] < lo or occ[b] > hi or occ[d] < lo or occ[d] > hi:
                        return CAP_BREACH, Q, n_ev, qmax
                    continue
                ye = y - 1 if b == qr else y
                ze = z - 1 if d == qr else z
                pw = p_tab[y - lo, z - lo]
                pe = p_tab[ye - lo, ze - lo]
                qw = q_tab[y - lo, z - lo]
                qe = q_tab[ye - lo, ze - lo]
                pm = pw if pw > pe else pe
                qm = qw if qw > qe else qe
                if pm + qm > R:
                    return RATE_BOUND, Q, n_ev, qmax
                if v < pm:
                    step = 1
                    fw = v < pw
                    fe = v < pe
                elif v < pm + qm:
                    step = -1
                    v2 = v - pm
                    fw = v2 < qw
                    fe = v2 < qe
                else:
                    continue
                n_ev += 1
                if fw:
                    y -= step
                    z += step
                if fe:
                    ye -= step
                    ze += step
                occ[b] = y
                occ[d] = z
                if y < lo or y > hi or z < lo or z > hi or ye < lo or ze < lo:
                    return CAP_BREACH, Q, n_ev, qmax
                db = y - ye
                dd = z - ze
                if db == 1 and dd == 0:
                    if qr == d:
                        Q -= 1
                        qr = b
                elif db == 0 and dd == 1:
                    if qr == b:
                        Q += 1
                        qr = d
                else:
                    return ORDER_BROKEN, Q, n_ev, qmax
                if abs(Q) > qmax:
                    qmax = abs(Q)
                    if qmax >= q_limit:
                        return GUARD, Q, n_ev, qmax
            t = tk
        obs_Q[k] = Q
    return OK, Q, n_ev, qmax


# ------------------------------------------------------ label bookkeeping


@njit(cache=True, inline="always")
def label_right(m, X, a, b, L, s, c_dest_new):
    """Track label ``m`` at unwrapped site ``X`` with interval ``[a, b]``
    when a discrepancy crosses bond ``s`` to the right (highest label of the
    source moves and becomes the lowest at the destination)."""
    x = X % L
    d = s + 1
    if d == L:
        d = 0
    if x == s:
        if m == b:
            X += 1
            a = m
            b = m + c_dest_new - 1
        else:
            b -= 1
    elif x == d:
        a -= 1
    return X, a, b


@njit(cache=True, inline="always")
def label_left(m, X, a, b, L, s, c_dest_new):
    """As ``label_right`` for a discrepancy crossing bond ``s`` to the left
    (lowest label of site ``s + 1`` moves and becomes the highest at ``s``)."""
    x = X % L
    d = s + 1
    if d == L:
        d = 0
    if x == d:
        if m == a:
            X -= 1
            b = m
            a = m - c_dest_new + 1
        else:
            a += 1
    elif x == s:
        b += 1
    return X, a, b


# ---------------------------------------------------------- n-process run


@njit(cache=True)
def coupled_thin(configs, cur, p_tab, q_tab, lo, hi, R, t0, obs_times, obs_bonds, obs_cur,
                 il, ih, lab_m, lab_X, lab_a, lab_b, obs_X, x_limit, check_order, rng):
    """Basic coupling of ``n`` processes with one uniform mark per clock ring.

    Process ``k`` deposits iff ``v < p_k`` and removes iff
    ``P_max <= v < P_max + q_k``, reproducing the nested suffix sets of the
    basic coupling with each process keeping its own marginal rates.  Labels
    ``lab_m`` of the discrepancies between processes ``il <= ih`` are tracked
    incrementally (set ``il < 0`` to disable).  Returns ``(status, n_events)``.
    """
    n = configs.shape[0]
    L = configs.shape[1]
    LR = L * R
    t = t0
    n_ev = 0
    n_lab = lab_m.shape[0]
    pk = np.zeros(n)
    qk = np.zeros(n)
    fired = np.zeros(n, dtype=np.int64)
    for k in range(obs_times.shape[0]):
        tk = obs_times[k]
        if tk > t:
            nr = rng.poisson(LR * (tk - t))
            for _ in range(nr):
                x = rng.random() * L
                b = int(x)
                if b >= L:
                    b = L - 1
                v = (x - b) * R
                d = b + 1
                if d == L:
                    d = 0
                pm = 0.0
                qm = 0.0
                for j in range(n):
                    y = configs[j, b] - lo
                    z = configs[j, d] - lo
                    pk[j] = p_tab[y, z]
                    qk[j] = q_tab[y, z]
                    if pk[j] > pm:
                        pm = pk[j]
                    if qk[j] > qm:
                        qm = qk[j]
                if pm + qm > R:
                    return RATE_BOUND, n_ev
                if v >= pm + qm:
                    continue
                any_fired = False
                if v < pm:
                    for j in range(n):
                        fired[j] = 1 if v < pk[j] else 0
                else:
                    v2 = v - pm
                    for j in range(n):
                        fired[j] = -1 if v2 < qk[j] else 0
                for j in range(n):
                    if fired[j] != 0:
                        any_fired = True
                        configs[j, b] -= fired[j]
                        configs[j, d] += fired[j]
                        cur[j, b] += fired[j]
                        if configs[j, b] < lo or configs[j, b] > hi or configs[j, d] < lo or configs[j, d] > hi:
                            return CAP_BREACH, n_ev
                if not any_fired:
                    continue
                n_ev += 1
                if check_order:
                    for j in range(n - 1):
                        if configs[j, b] > configs[j + 1, b] or configs[j, d] > configs[j + 1, d]:
                            return ORDER_BROKEN, n_ev
                if il >= 0 and fired[il] != fired[ih]:
                    # discrepancy moves: net transfer of ih relative to il
                    rel = fired[ih] - fired[il]
                    if rel == 1:
                        c_new = configs[ih, d] - configs[il, d]
                        for j in range(n_lab):
                            X, a, bb = label_right(lab_m[j], lab_X[j], lab_a[j], lab_b[j], L, b, c_new)
                            lab_X[j] = X
                            lab_a[j] = a
                            lab_b[j] = bb
                    elif rel == -1:
                        c_new = configs[ih, b] - configs[il, b]
                        for j in range(n_lab):
                            X, a, bb = label_left(lab_m[j], lab_X[j], lab_a[j], lab_b[j], L, b, c_new)
                            lab_X[j] = X
                            lab_a[j] = a
                            lab_b[j] = bb
                    for j in range(n_lab):
                        if abs(lab_X[j]) >= x_limit:
                            return GUARD, n_ev
            t = tk
        for j in range(n):
            for jb in range(obs_bonds.shape[0]):
                obs_cur[k, j, jb] = cur[j, obs_bonds[jb]]
        for j in range(n_lab):
            obs_X[k, j] = lab_X[j]
    return OK, n_ev


# ------------------------------------------------- microscopic concavity


@njit(cache=True, inline="always")
def _inc(fd, k, lo):
    # f(k) - f(k - 1)
    return fd[k - 1 - lo, k - lo]


@njit(cache=True)
def micro_thin(om, et, p_tab, lo, hi, R, fd, t0, obs_times, state, obs_out, x_limit,
               log_arr, rng):
    """The label-walker construction on top of the coupled pair ``(eta, omega)``.

    ``state`` holds ``[y, Xy, ay, by, z, Xz, az, bz]`` and is updated in
    place.  ``fd[i, j] = f(j) - f(i)`` on the tabulated occupancies.
    ``obs_out[k] = (Xy, Xz, y, z)`` at each observation time.  ``log_arr``
    (rows ``time, y, z, Xy, Xz``) records every refresh when it has rows.
    Returns ``(status, n_events, n_refresh, min_probability, n_logged)``.
    """
    L = om.shape[0]
    LR = L * R
    y = state[0]
    Xy = state[1]
    ay = state[2]
    by = state[3]
    z = state[4]
    Xz = state[5]
    az = state[6]
    bz = state[7]
    t = t0
    n_ev = 0
    n_ref = 0
    n_log = 0
    cap_log = log_arr.shape[0]
    pmin = 1.0
    status = OK
    for k in range(obs_times.shape[0]):
        tk = obs_times[k]
        while status == OK:
            t += rng.exponential() / LR
            if t > tk:
                t = tk  # memoryless restart at the observation time
                break
            x = rng.random() * L
            s = int(x)
            if s >= L:
                s = L - 1
            v = (x - s) * R
            d = s + 1
            if d == L:
                d = 0
            pw = p_tab[om[s] - lo, om[d] - lo]
            pe = p_tab[et[s] - lo, et[d] - lo]
            if pw > R or pe > R:
                status = RATE_BOUND
                break
            fw = v < pw
            fe = v < pe
            if not fw and not fe:
                continue
            n_ev += 1
            xy = Xy % L
            xz = Xz % L
            touch_y = xy == s or xy == d
            touch_z = xz == s or xz == d
            if fw:
                om[s] -= 1
                om[d] += 1
            if fe:
                et[s] -= 1
                et[d] += 1
            if om[d] > hi or et[d] > hi:
                status = CAP_BREACH
                break
            if et[s] > om[s] or et[d] > om[d]:
                status = ORDER_BROKEN
                break
            if fw and not fe:
                c_new = om[d] - et[d]
                Xy, ay, by = label_right(y, Xy, ay, by, L, s, c_new)
                Xz, az, bz = label_right(z, Xz, az, bz, L, s, c_new)
            elif fe and not fw:
                c_new = om[s] - et[s]
                Xy, ay, by = label_left(y, Xy, ay, by, L, s, c_new)
                Xz, az, bz = label_left(z, Xz, az, bz, L, s, c_new)
            if abs(Xy) >= x_limit or abs(Xz) >= x_limit:
                status = GUARD
                break
            if not (touch_y or touch_z):
                continue
            n_ref += 1
            if Xy == Xz:
                i = Xy % L
                w = om[i]
                e = et[i]
                D = fd[e - lo, w - lo]
                if ay != az or by != bz:
                    status = BOOKKEEPING
                    break
                if D <= 0.0:
                    y = ay
                    z = by
                else:
                    p1 = fd[e + 1 - lo, w - lo] / D
                    p3 = _inc(fd, w, lo) / D
                    p2 = (_inc(fd, e + 1, lo) - _inc(fd, w, lo)) / D
                    lowest = min(p1, min(p2, p3))
                    if lowest < pmin:
                        pmin = lowest
                    if lowest < -_PROB_EPS or p1 + p2 + p3 > 1 + 1e-9 or p1 + p2 + p3 < 1 - 1e-9:
                        status = BAD_PROBABILITY
                        break
                    u = rng.random()
                    if u < p1:
                        y = ay
                        z = by - 1
                    elif u < p1 + p2:
                        y = ay
                        z = by
                    else:
                        y = by
                        z = by
            else:
                if touch_y:
                    i = Xy % L
                    w = om[i]
                    e = et[i]
                    D = fd[e - lo, w - lo]
                    if D <= 0.0:
                        y = ay
                    else:
                        pa = fd[e - lo, w - 1 - lo] / D
                        if pa < pmin:
                            pmin = pa
                        if pa < -_PROB_EPS or pa > 1 + _PROB_EPS:
                            status = BAD_PROBABILITY
                            break
                        y = ay if rng.random() < pa else by
                if touch_z:
                    i = Xz % L
                    w = om[i]
                    e = et[i]
                    D = fd[e - lo, w - lo]
                    if D <= 0.0:
                        z = bz
                    else:
                        pb = fd[e + 1 - lo, w - lo] / D
                        if pb < pmin:
                            pmin = pb
                        if pb < -_PROB_EPS or pb > 1 + _PROB_EPS:
                            status = BAD_PROBABILITY
                            break
                        z = bz - 1 if rng.random() < pb else bz
            if y > z:
                status = LABEL_ORDER
                break
            if not (ay <= y <= by and az <= z <= bz):
                status = BOOKKEEPING
                break
            if by - ay + 1 != om[Xy % L] - et[Xy % L] or bz - az + 1 != om[Xz % L] - et[Xz % L]:
                status = BOOKKEEPING
                break
            if n_log < cap_log:
                log_arr[n_log, 0] = t
                log_arr[n_log, 1] = y
                log_arr[n_log, 2] = z
                log_arr[n_log, 3] = Xy
                log_arr[n_log, 4] = Xz
                n_log += 1
        if status != OK:
            break
        # full consistency sweep at observation times
        for i in range(L):
            if et[i] > om[i]:
                status = ORDER_BROKEN
        if om[Xy % L] - et[Xy % L] < 1 or om[Xz % L] - et[Xz % L] < 1:
            status = BOOKKEEPING
        if Xy > Xz:
            status = LABEL_ORDER
        elif Xy < Xz:
            between = 0
            for j in range(Xy + 1, Xz):
                jj = j % L
                between += om[jj] - et[jj]
            if z - y != (by - y) + between + (z - az) + 1:
                status = BOOKKEEPING
        obs_out[k, 0] = Xy
        obs_out[k, 1] = Xz
        obs_out[k, 2] = y
        obs_out[k, 3] = z
        if status != OK:
            break
    state[0] = y
    state[1] = Xy
    state[2] = ay
    state[3] = by
    state[4] = z
    state[5] = Xz
    state[6] = az
    state[7] = bz
    return status, n_ev, n_ref, pmin, n_log
