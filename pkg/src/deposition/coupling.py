"""Basic coupling of several processes and second class particle bookkeeping.

Processes share one clock per bond and move type; a single uniform ``u``
decides which of them fire (those whose rate exceeds ``u`` times the largest
rate), so they "jump together as much as possible" while each keeps its own
marginal dynamics.

Discrepancies between an ordered pair ``eta <= omega`` carry integer labels
``X_m``, nondecreasing in ``m``.  On a right jump the highest label at the
source moves and becomes the lowest at the destination; on a left jump the
lowest label moves and becomes the highest.  Label positions are unwrapped
(signed) lattice sites; ring index ``i`` stands for every site ``i + kL``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .measures import measure_at_density, monotone_couple, seed_measure, shifted
from .rates import RateSpec
from .simulator import (DEFAULT_GUARD_FACTOR, GuardViolation, check_guard, initial_heights,
                        moving_limit, raise_status, rate_tables, simulation_bound)

__all__ = [
    "NoDiscrepancy",
    "Labels",
    "CoupledState",
    "DiscrepancyPair",
    "QTrajectory",
    "coupled_event",
    "relabel",
    "make_discrepancy_pair",
    "make_two_density_pair",
    "track_Q",
    "run_coupled",
    "q_limit",
]


class NoDiscrepancy(RuntimeError):
    """Relabelling requested at a site that holds no discrepancy."""


# ----------------------------------------------------------------- labels


@dataclass(frozen=True)
class Labels:
    """Explicit label map: ``X[k]`` is the position of label ``first + k``."""

    first: int
    X: tuple
    L: int

    def __post_init__(self):
        if any(b < a for a, b in zip(self.X, self.X[1:])):
            raise ValueError("label positions must be nondecreasing")

    def position(self, m: int) -> int:
        return self.X[m - self.first]

    def at_site(self, site: int) -> list[int]:
        """Labels whose position is congruent to ``site`` modulo ``L``."""
        return [self.first + k for k, x in enumerate(self.X) if (x - site) % self.L == 0]

    def interval(self, m: int) -> tuple[int, int]:
        """``(a^m, b^m)``: lowest and highest labels sharing the site of ``m``."""
        same = self.at_site(self.position(m))
        return min(same), max(same)

    def as_dict(self) -> dict[int, int]:
        return {self.first + k: x for k, x in enumerate(self.X)}


def relabel(labels: Labels, bond: int, direction: int) -> Labels:
    """Move one discrepancy across ``bond`` (sites ``bond`` and ``bond + 1``).

    ``direction = +1``: the highest label at ``bond`` moves right and becomes
    the lowest at ``bond + 1``.  ``direction = -1``: the lowest label at
    ``bond + 1`` moves left and becomes the highest at ``bond``.
    """
    if direction not in (1, -1):
        raise ValueError("direction must be +1 or -1")
    src = bond if direction == 1 else bond + 1
    present = labels.at_site(src)
    if not present:
        raise NoDiscrepancy(f"no discrepancy at site {src} to move across bond {bond}")
    m = max(present) if direction == 1 else min(present)
    X = list(labels.X)
    X[m - labels.first] += direction
    return Labels(labels.first, tuple(X), labels.L)


def _track_right(m, X, a, b, L, s, c_dest_new):
    return K.label_right.py_func(m, X, a, b, L, s, c_dest_new)


def _track_left(m, X, a, b, L, s, c_dest_new):
    return K.label_left.py_func(m, X, a, b, L, s, c_dest_new)


# ------------------------------------------------------------------ state


@dataclass
class CoupledState:
    """``n`` configurations on one ring evolving in basic coupling.

    ``pair = (il, ih)`` designates an ordered pair whose discrepancies are
    labelled; ``tracked`` holds ``m -> [X, a, b]`` for followed labels.
    """

    configs: np.ndarray
    bond_currents: np.ndarray
    time: float
    rng: np.random.Generator
    pair: Optional[tuple[int, int]] = None
    tracked: dict = field(default_factory=dict)
    initial_configs: np.ndarray = field(default=None, repr=False)
    n_events: int = 0

    def __post_init__(self):
        self.configs = np.ascontiguousarray(self.configs, dtype=np.int64)
        self.bond_currents = np.ascontiguousarray(self.bond_currents, dtype=np.int64)
        if self.configs.ndim != 2 or not 1 <= self.configs.shape[0] <= 4:
            raise ValueError("configs must have shape (n, L) with 1 <= n <= 4")
        if self.initial_configs is None:
            self.initial_configs = self.configs.copy()

    @property
    def n(self) -> int:
        return self.configs.shape[0]

    @property
    def L(self) -> int:
        return self.configs.shape[1]

    def discrepancies(self) -> np.ndarray:
        il, ih = self.pair
        return self.configs[ih] - self.configs[il]

    def ordered(self) -> bool:
        return bool(np.all(np.diff(self.configs, axis=0) >= 0))

    def labels(self, anchor: Optional[int] = None) -> Labels:
        """Explicit label map reconstructed from the counts around a tracked label.

        Sites are taken in the window ``[X - L/2, X + L/2)`` around the anchor's
        position ``X``; labels are consecutive in site order.
        """
        if not self.tracked:
            raise ValueError("no tracked label to anchor the label map")
        m = anchor if anchor is not None else min(self.tracked)
        X, a, _ = self.tracked[m]
        c = self.discrepancies()
        lo_site = X - self.L // 2
        pos = []
        first = None
        count_before = 0
        for site in range(lo_site, lo_site + self.L):
            k = int(c[site % self.L])
            if site < X:
                count_before += k
            pos.extend([site] * k)
        first = a - count_before
        return Labels(first, tuple(pos), self.L)

    def copy(self) -> "CoupledState":
        return CoupledState(self.configs.copy(), self.bond_currents.copy(), self.time, self.rng, self.pair,
                            {m: list(v) for m, v in self.tracked.items()}, self.initial_configs.copy(),
                            self.n_events)


def coupled_event(state: CoupledState, spec: RateSpec, bond: int, move_type: int, u: float) -> np.ndarray:
    """Apply one basic-coupling event in place; returns the firing mask.

    ``move_type = +1`` is a deposition across ``bond`` (rates ``p``), ``-1`` a
    removal (rates ``q``).  Process ``k`` fires iff its rate exceeds
    ``u * max_k rate``, so the firing sets are nested suffixes in rate order.
    """
    if not 0.0 <= u < 1.0:
        raise ValueError("u must lie in [0, 1)")
    L = state.L
    b = int(bond) % L
    d = (b + 1) % L
    rate = spec.p if move_type == 1 else spec.q
    r = np.array([float(rate(int(c[b]), int(c[d]))) for c in state.configs])
    top = r.max()
    fired = r > u * top if top > 0 else np.zeros(state.n, dtype=bool)
    prev = state.discrepancies() if state.pair is not None else None
    for k in np.flatnonzero(fired):
        state.configs[k, b] -= move_type
        state.configs[k, d] += move_type
        state.bond_currents[k, b] += move_type
    if fired.any():
        state.n_events += 1
    if state.pair is not None and fired.any():
        il, ih = state.pair
        rel = (int(fired[ih]) - int(fired[il])) * move_type
        if rel != 0:
            c_new = state.discrepancies()
            if prev[b] < 0 or prev[d] < 0 or (c_new[b] < 0) or (c_new[d] < 0):
                raise NoDiscrepancy("designated pair is not ordered at the event bond")
            for m, (X, a, bb) in list(state.tracked.items()):
                if rel == 1:
                    state.tracked[m] = list(_track_right(m, X, a, bb, L, b, int(c_new[d])))
                else:
                    state.tracked[m] = list(_track_left(m, X, a, bb, L, b, int(c_new[b])))
    return fired


# ------------------------------------------------------ initial conditions


def _rng(seed, rng):
    return rng if rng is not None else np.random.default_rng(seed)


@dataclass
class DiscrepancyPair:
    """``omega`` and ``omega^- = omega - delta_Q`` with a single discrepancy at ``Q``."""

    omega: np.ndarray
    Q: int
    time: float
    rng: np.random.Generator
    initial_omega: np.ndarray = field(default=None, repr=False)
    n_events: int = 0

    def __post_init__(self):
        self.omega = np.ascontiguousarray(self.omega, dtype=np.int64)
        if self.initial_omega is None:
            self.initial_omega = self.omega.copy()

    @property
    def L(self) -> int:
        return len(self.omega)

    @property
    def lower(self) -> np.ndarray:
        low = self.omega.copy()
        low[self.Q % self.L] -= 1
        return low

    def as_coupled(self) -> CoupledState:
        """Two-process view ``(omega^-, omega)`` with label 0 tracked."""
        configs = np.stack([self.lower, self.omega])
        return CoupledState(configs, np.zeros_like(configs), self.time, self.rng, (0, 1),
                            {0: [self.Q, 0, 0]})


def make_discrepancy_pair(spec: RateSpec, rho: float, L: int, seed=None,
                          rng: Optional[np.random.Generator] = None) -> DiscrepancyPair:
    """``omega^-`` has i.i.d. ``mu^rho`` marginals off the origin and the seed
    law ``hat mu^rho`` at the origin; ``omega = omega^- + delta_0``."""
    if L < 4:
        raise ValueError("need L >= 4")
    rng = _rng(seed, rng)
    m = measure_at_density(spec, rho)
    seed_m = seed_measure(spec, rho)
    occ = m.sample(rng, L).astype(np.int64)
    occ[0] = int(seed_m.sample(rng)) + 1
    return DiscrepancyPair(occ, 0, 0.0, rng)


def _profile(p, L) -> np.ndarray:
    """Density profile as an array over ring indices (site ``i`` at ``i mod L``)."""
    if callable(p):
        arr = np.empty(L)
        for i in range(-(L // 2), L - L // 2):
            arr[i % L] = p(i)
        return arr
    arr = np.asarray(p, dtype=float)
    if arr.ndim == 0:
        return np.full(L, float(arr))
    if arr.shape != (L,):
        raise ValueError("density profile must be a scalar, a callable or an array of length L")
    return arr


def make_two_density_pair(spec: RateSpec, lambda_profile, rho_profile, L: int, seed=None,
                          rng: Optional[np.random.Generator] = None, track: Sequence[int] = (0,)) -> CoupledState:
    """Ordered pair ``eta <= omega`` with ``eta_0 < omega_0``.

    Off the origin ``(eta_i, omega_i)`` is the weak quantile coupling of
    ``mu^{lambda_i}`` and ``mu^{rho_i}``; at the origin the strict coupling of
    ``hat mu^{lambda_0}`` and ``hat mu^{rho_0} + 1``.  Label 0 is the lowest
    discrepancy label at site 0; labels in ``track`` are followed.
    """
    rng = _rng(seed, rng)
    lam = _profile(lambda_profile, L)
    rho = _profile(rho_profile, L)
    if np.any(lam > rho):
        raise ValueError("need lambda_i <= rho_i at every site")
    u = rng.random(L)
    eta = np.empty(L, dtype=np.int64)
    omega = np.empty(L, dtype=np.int64)
    keys = np.stack([lam, rho], axis=1)
    for key in np.unique(keys[1:], axis=0):
        idx = 1 + np.flatnonzero(np.all(keys[1:] == key, axis=1))
        cpl = monotone_couple(measure_at_density(spec, float(key[0])), measure_at_density(spec, float(key[1])))
        eta[idx], omega[idx] = cpl.sample_from_uniform(u[idx])
    strict = monotone_couple(seed_measure(spec, lam[0]), shifted(seed_measure(spec, rho[0]), 1), "strict")
    y, z = strict.sample_from_uniform(u[0])
    eta[0], omega[0] = int(y), int(z)
    configs = np.stack([eta, omega])
    c0 = int(omega[0] - eta[0])
    tracked = {}
    for m in track:
        tracked[int(m)] = _initial_track(int(m), configs[1] - configs[0], L, c0)
    return CoupledState(configs, np.zeros_like(configs), 0.0, rng, (0, 1), tracked)


def _initial_track(m: int, c: np.ndarray, L: int, c0: int) -> list:
    """``[X, a, b]`` for label ``m`` when label 0 is the lowest at site 0."""
    if 0 <= m < c0:
        return [0, 0, c0 - 1]
    if m >= c0:
        seen = c0
        for site in range(1, L // 2):
            k = int(c[site % L])
            if seen + k > m:
                return [site, seen, seen + k - 1]
            seen += k
    else:
        seen = 0
        for site in range(-1, -(L // 2), -1):
            k = int(c[site % L])
            if seen - k <= m:
                return [site, seen - k, seen - 1]
            seen -= k
    raise ValueError(f"label {m} is not within half a ring of the origin")


# ------------------------------------------------------------------ runs


@dataclass
class QTrajectory:
    times: np.ndarray
    Q: np.ndarray
    max_abs_Q: int
    n_events: int


def q_limit(spec: RateSpec, L: int, horizon: float, guard_factor: float = DEFAULT_GUARD_FACTOR) -> int:
    """Bound on |Q| keeping the discrepancy clear of the antipodal cut."""
    lim = moving_limit(spec, L, horizon, guard_factor)
    if lim <= 0:
        raise GuardViolation(f"ring of L={L} leaves no room for a moving discrepancy up to t={horizon}")
    return lim


def track_Q(pair: DiscrepancyPair, spec: RateSpec, t_end: float, obs_times: Sequence[float] = (),
            guard: bool = True, guard_factor: float = DEFAULT_GUARD_FACTOR) -> QTrajectory:
    """Evolve the pair in place to ``t_end`` and record ``Q`` at ``obs_times``
    (``t_end`` is always the last entry)."""
    horizon = t_end - pair.time
    R = simulation_bound(spec)
    if guard:
        check_guard(spec, pair.L, horizon, 0, guard_factor)
        limit = q_limit(spec, pair.L, horizon, guard_factor)
    else:
        limit = pair.L // 2
    times = np.asarray(sorted(set(float(t) for t in obs_times) | {float(t_end)}))
    if times[0] < pair.time:
        raise ValueError("observation times precede the pair's clock")
    p_tab, q_tab, lo, hi = rate_tables(spec, int(pair.omega.min()) - 1, int(pair.omega.max()))
    obs_Q = np.zeros(len(times), dtype=np.int64)
    status, Q, n_ev, qmax = K.pair_thin(pair.omega, int(pair.Q), p_tab, q_tab, lo, hi, R, float(pair.time),
                                        times, obs_Q, int(limit), pair.rng)
    raise_status(status, f"discrepancy pair, model {spec.name}")
    pair.Q = int(Q)
    pair.time = float(t_end)
    pair.n_events += int(n_ev)
    return QTrajectory(times, obs_Q, int(qmax), int(n_ev))


@dataclass
class CoupledRun:
    times: np.ndarray
    bonds: np.ndarray
    currents: np.ndarray  # [time, process, bond]
    label_positions: np.ndarray  # [time, tracked label]
    labels: tuple


def run_coupled(state: CoupledState, spec: RateSpec, t_end: float, obs_times: Sequence[float] = (),
                obs_bonds: Sequence[int] = (), check_order: Optional[bool] = None, guard: bool = True,
                i_max: int = 0, guard_factor: float = DEFAULT_GUARD_FACTOR) -> CoupledRun:
    """Evolve ``state`` in place under the basic coupling (uniformised clocks)."""
    horizon = t_end - state.time
    R = simulation_bound(spec)
    if guard:
        check_guard(spec, state.L, horizon, i_max, guard_factor)
        x_limit = max(1, moving_limit(spec, state.L, horizon, guard_factor))
    else:
        x_limit = state.L * 1_000_000
    if check_order is None:
        check_order = state.ordered()
    times = np.asarray(sorted(set(float(t) for t in obs_times) | {float(t_end)}))
    bonds = np.asarray(obs_bonds, dtype=np.int64) % state.L
    p_tab, q_tab, lo, hi = rate_tables(spec, int(state.configs.min()), int(state.configs.max()))
    labels = tuple(sorted(state.tracked))
    lab_m = np.array(labels, dtype=np.int64)
    lab_X = np.array([state.tracked[m][0] for m in labels], dtype=np.int64)
    lab_a = np.array([state.tracked[m][1] for m in labels], dtype=np.int64)
    lab_b = np.array([state.tracked[m][2] for m in labels], dtype=np.int64)
    il, ih = state.pair if state.pair is not None else (-1, -1)
    obs_cur = np.zeros((len(times), state.n, len(bonds)), dtype=np.int64)
    obs_X = np.zeros((len(times), len(labels)), dtype=np.int64)
    status, n_ev = K.coupled_thin(state.configs, state.bond_currents, p_tab, q_tab, lo, hi, R, float(state.time),
                                  times, bonds, obs_cur, il, ih, lab_m, lab_X, lab_a, lab_b, obs_X,
                                  int(x_limit), bool(check_order), state.rng)
    raise_status(status, f"coupled run, model {spec.name}")
    for j, m in enumerate(labels):
        state.tracked[m] = [int(lab_X[j]), int(lab_a[j]), int(lab_b[j])]
    state.time = float(t_end)
    state.n_events += int(n_ev)
    return CoupledRun(times, bonds, obs_cur, obs_X, labels)


def height_difference(state: CoupledState, sites: Sequence[int], currents_upper: np.ndarray,
                      currents_lower: np.ndarray) -> np.ndarray:
    """``h^upper_i - h^lower_i`` at ``sites`` from currents observed there."""
    il, ih = state.pair
    h_up = initial_heights(state.initial_configs[ih], sites) + currents_upper
    h_lo = initial_heights(state.initial_configs[il], sites) + currents_lower
    return h_up - h_lo
