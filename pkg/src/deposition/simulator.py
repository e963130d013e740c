"""Exact continuous-time simulation of one deposition process on a ring.

Site ``i`` of the infinite lattice is represented by ring index ``i mod L``;
bond ``i`` joins sites ``i`` and ``i + 1``.  ``bond_current[i]`` counts net
depositions across bond ``i`` (``+1`` per deposition, ``-1`` per removal),
so the height of column ``i`` is ``h_i(t) = h_i(0) + J_i(t)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import poisson

from . import _kernels as K
from .measures import measure_at_density
from .rates import RateSpec

__all__ = [
    "SimulationError",
    "GuardViolation",
    "CapBreach",
    "RingState",
    "EventLog",
    "replicate_rng",
    "init_stationary",
    "run",
    "height",
    "heights_from_currents",
    "required_L",
    "check_guard",
    "simulation_bound",
    "rate_tables",
    "write_event_log",
    "DEFAULT_GUARD_FACTOR",
    "GUARD_EPS",
    "front_distance",
    "moving_limit",
]

DEFAULT_GUARD_FACTOR = 1.0
GUARD_EPS = 1e-12


class SimulationError(RuntimeError):
    """A kernel reported an inconsistency (see the message for the cause)."""


class GuardViolation(SimulationError):
    """The ring is too small for the requested horizon and observation window."""


class CapBreach(SimulationError):
    """An occupancy left the tabulated range of an unbounded model."""


def raise_status(status: int, context: str = ""):
    if status == K.OK:
        return
    msg = f"{K.STATUS.get(status, 'unknown status')}" + (f" ({context})" if context else "")
    if status == K.CAP_BREACH:
        raise CapBreach(msg)
    if status == K.GUARD:
        raise GuardViolation(msg)
    raise SimulationError(msg)


def replicate_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for replicate ``index`` of an experiment."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))))


@dataclass
class EventLog:
    time: np.ndarray
    bond: np.ndarray
    direction: np.ndarray

    def __len__(self):
        return len(self.time)


@dataclass
class RingState:
    """Occupancies, cumulative bond currents and the clock of one replicate."""

    occ: np.ndarray
    bond_current: np.ndarray
    time: float
    rng: np.random.Generator
    initial_occ: np.ndarray = field(default=None, repr=False)
    event_log: Optional[EventLog] = field(default=None, repr=False)
    n_events: int = 0

    def __post_init__(self):
        self.occ = np.ascontiguousarray(self.occ, dtype=np.int64)
        self.bond_current = np.ascontiguousarray(self.bond_current, dtype=np.int64)
        if self.initial_occ is None:
            self.initial_occ = self.occ.copy()

    @property
    def L(self) -> int:
        return len(self.occ)

    def copy(self) -> "RingState":
        return RingState(self.occ.copy(), self.bond_current.copy(), self.time, self.rng,
                         self.initial_occ.copy(), self.event_log, self.n_events)


def init_stationary(spec: RateSpec, rho: float, L: int, seed=None, rng: Optional[np.random.Generator] = None) -> RingState:
    """I.i.d. occupancies from the density-``rho`` stationary marginal."""
    if L < 4:
        raise ValueError("need L >= 4")
    if rng is None:
        rng = np.random.default_rng(seed)
    m = measure_at_density(spec, rho)
    occ = m.sample(rng, L).astype(np.int64)
    return RingState(occ, np.zeros(L, dtype=np.int64), 0.0, rng)


def rate_tables(spec: RateSpec, occ_lo: int = None, occ_hi: int = None):
    """Rate tables covering the simulation range and any occupancies present."""
    lo, hi = spec.sim_bounds(occ_lo, occ_hi)
    p_tab, q_tab = spec.tables(lo, hi)
    return p_tab, q_tab, lo, hi


def simulation_bound(spec: RateSpec) -> float:
    """The uniformisation rate / propagation speed used by the guard."""
    R = spec.rate_upper_bound
    if not math.isfinite(R):
        raise GuardViolation(f"model {spec.name!r} has unbounded rates; supply rate_upper_bound")
    return float(R)


def front_distance(spec: RateSpec, horizon: float, eps: float = GUARD_EPS) -> int:
    """Distance a disagreement can travel within ``horizon`` except with
    probability ``eps``.

    A disagreement between two copies sharing clocks advances by one site
    only when the clock of the bond ahead of it rings, so its displacement is
    dominated by a Poisson variable of mean ``R * horizon``.
    """
    mu = simulation_bound(spec) * max(float(horizon), 0.0)
    if mu == 0:
        return 1
    return int(poisson.isf(eps, mu)) + 1


def required_L(spec: RateSpec, horizon: float, i_max: int = 0, guard_factor: float = DEFAULT_GUARD_FACTOR) -> int:
    """Smallest ring whose antipodal cut cannot influence sites ``|i| <= i_max``.

    ``L / 2 >= i_max + guard_factor * d`` with ``d`` from :func:`front_distance`.
    """
    d = math.ceil(guard_factor * front_distance(spec, horizon))
    return max(4, 2 * (abs(int(i_max)) + d) + 2)


def check_guard(spec: RateSpec, L: int, horizon: float, i_max: int = 0,
                guard_factor: float = DEFAULT_GUARD_FACTOR):
    need = required_L(spec, horizon, i_max, guard_factor)
    if L < need:
        raise GuardViolation(
            f"ring of L={L} too small: need L >= {need} for horizon {horizon} and |i| <= {i_max}"
        )


def moving_limit(spec: RateSpec, L: int, horizon: float, guard_factor: float = DEFAULT_GUARD_FACTOR) -> int:
    """Largest |position| a tracked discrepancy may reach before information
    from the antipodal cut could have influenced it."""
    return int(L // 2 - math.ceil(guard_factor * front_distance(spec, horizon)))


def run(state: RingState, spec: RateSpec, t_end: float, observers: Iterable[Callable] = (),
        method: str = "tree", obs_times: Sequence[float] = (), obs_bonds: Sequence[int] = (),
        guard: bool = True, i_max: int = 0, guard_factor: float = DEFAULT_GUARD_FACTOR,
        log_events: bool = False, log_capacity: Optional[int] = None):
    """Advance ``state`` to ``t_end`` in place and return ``(state, obs_cur)``.

    ``method`` is ``"tree"`` (Gillespie direct method, exact event times,
    supports event logs and observers) or ``"thinning"`` (uniformised clocks
    at the rate bound; the fastest choice for bounded rates).  ``obs_cur[k, j]`` is the current through
    ``obs_bonds[j]`` at ``obs_times[k]``.  Observers are called as
    ``observer(time, bond, direction, state)`` for every event, replayed from
    the event log after the run.
    """
    if t_end < state.time:
        raise ValueError("t_end precedes the current time")
    observers = list(observers)
    if observers:
        log_events = True
    if log_events and method != "tree":
        raise ValueError("event logs and observers need method='tree'")
    if guard:
        check_guard(spec, state.L, t_end - state.time, i_max, guard_factor)
    elif method == "thinning":
        simulation_bound(spec)
    p_tab, q_tab, lo, hi = rate_tables(spec, int(state.occ.min()), int(state.occ.max()))
    ot = np.asarray(sorted(obs_times), dtype=float)
    if ot.size and (ot[0] < state.time or ot[-1] > t_end):
        raise ValueError("observation times must lie in [state.time, t_end]")
    ob = np.asarray(obs_bonds, dtype=np.int64) % state.L
    obs_cur = np.zeros((len(ot), len(ob)), dtype=np.int64)
    start_occ = state.occ.copy()
    if method == "tree":
        if log_events:
            cap = log_capacity
            if cap is None:
                R = spec.rate_upper_bound if math.isfinite(spec.rate_upper_bound) else spec.table_bound(lo, hi)
                mean = R * state.L * (t_end - state.time)
                cap = int(mean + 10 * math.sqrt(mean) + 1000)
            lt = np.zeros(cap)
            lb = np.zeros(cap, dtype=np.int64)
            ld = np.zeros(cap, dtype=np.int64)
        else:
            lt = np.zeros(0)
            lb = np.zeros(0, dtype=np.int64)
            ld = np.zeros(0, dtype=np.int64)
        status, n_ev = K.single_tree(state.occ, state.bond_current, p_tab, q_tab, lo, hi, float(state.time),
                                     float(t_end), ot, ob, obs_cur, lt, lb, ld, state.rng)
        raise_status(status, f"model {spec.name}")
        if log_events:
            log = EventLog(lt[:n_ev].copy(), lb[:n_ev].copy(), ld[:n_ev].copy())
            state.event_log = log
    elif method == "thinning":
        R = simulation_bound(spec)
        ot_full = np.append(ot, float(t_end)) if (not ot.size or ot[-1] < t_end) else ot
        oc_full = np.zeros((len(ot_full), len(ob)), dtype=np.int64)
        status, n_ev = K.single_thin(state.occ, state.bond_current, p_tab, q_tab, lo, hi, R,
                                     float(state.time), ot_full, ob, oc_full, state.rng)
        raise_status(status, f"model {spec.name}")
        obs_cur = oc_full[: len(ot)]
    else:
        raise ValueError(f"unknown method {method!r}")
    state.time = float(t_end)
    state.n_events += int(n_ev)
    if observers:
        replay = RingState(start_occ, np.zeros(state.L, dtype=np.int64), 0.0, state.rng)
        for tt, b, dr in zip(state.event_log.time, state.event_log.bond, state.event_log.direction):
            b = int(b)
            d = (b + 1) % state.L
            replay.occ[b] -= dr
            replay.occ[d] += dr
            replay.bond_current[b] += dr
            replay.time = float(tt)
            for obs in observers:
                obs(float(tt), b, int(dr), replay)
    return state, obs_cur


def initial_heights(occ0: np.ndarray, sites: Sequence[int]) -> np.ndarray:
    """``h_i(0)`` with ``h_0(0) = 0`` and ``omega_j = h_{j-1} - h_j``."""
    L = len(occ0)
    out = np.zeros(len(sites), dtype=np.int64)
    for k, i in enumerate(sites):
        i = int(i)
        if abs(i) >= L / 2:
            raise IndexError(f"site {i} outside the safe window |i| < L/2 = {L / 2}")
        if i > 0:
            out[k] = -int(occ0[1: i + 1].sum())
        elif i < 0:
            out[k] = int(np.take(occ0, np.arange(i + 1, 1), mode="wrap").sum())
    return out


def height(state: RingState, i: int) -> int:
    """Column height ``h_i(t) = h_i(0) + J_i(t)``."""
    h0 = initial_heights(state.initial_occ, [i])[0]
    return int(h0 + state.bond_current[int(i) % state.L])


def heights_from_currents(occ0: np.ndarray, sites: Sequence[int], currents: np.ndarray) -> np.ndarray:
    """Heights at ``sites`` given currents observed there (last axis = sites)."""
    return initial_heights(occ0, sites) + np.asarray(currents)


def write_event_log(log: EventLog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "bond", "direction"])
        for t, b, d in zip(log.time, log.bond, log.direction):
            w.writerow([repr(float(t)), int(b), int(d)])
