"""Label walkers for totally asymmetric zero range processes with concave rates.

On top of an ordered coupled pair ``eta <= omega`` with labelled
``omega - eta`` particles, two labels ``y <= z`` are driven so that
``omega^- = omega - delta_{X_y}`` and ``eta^+ = eta + delta_{X_z}`` are again
basic-coupling partners of ``omega`` and ``eta``.  After every background
move touching the site of ``X_y`` (or ``X_z``) the walker re-picks a label
from the interval ``[a, b]`` of labels sharing its site:

* ``y -> a`` with probability ``(f(w-1) - f(e)) / (f(w) - f(e))``, else ``b``;
* ``z -> b-1`` with probability ``(f(w) - f(e+1)) / (f(w) - f(e))``, else ``b``;
* jointly, when both sit at one site after the move, one uniform picks
  ``(a, b-1)``, ``(a, b)`` or ``(b, b)`` with the probabilities listed in
  :func:`joint_probabilities`,

where ``w`` and ``e`` are the post-move occupancies of ``omega`` and ``eta``
at that site.  Degenerate denominators (``f(w) = f(e)``) select ``a`` (for
``y``), ``b`` (for ``z``) and ``(a, b)`` jointly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels as K
from .coupling import CoupledState, coupled_event, make_two_density_pair
from .measures import DiscreteMeasure
from .rates import JumpRate, RateSpec
from .simulator import (GuardViolation, SimulationError, moving_limit, raise_status, rate_tables,
                        simulation_bound)

__all__ = [
    "NegativeProbability",
    "LabelPair",
    "PartitionView",
    "GeometricNu",
    "ConstructionRun",
    "y_probability",
    "z_probability",
    "joint_probabilities",
    "refresh_y",
    "refresh_z",
    "refresh_joint",
    "drive",
    "four_process_view",
    "geometric_bound_nu",
    "initial_label_pair",
    "run_construction",
    "step_construction",
    "write_trajectory",
]


class NegativeProbability(ArithmeticError):
    """A refresh probability fell outside [0, 1] (f not concave and nondecreasing)."""


def _diff(f, lo: int, hi: int):
    """``f(hi) - f(lo)``, summed from increments when ``f`` provides them."""
    if isinstance(f, JumpRate):
        return f.diff(lo, hi)
    return f(hi) - f(lo)


def _check(p, name):
    if p < 0 or p > 1:
        if abs(float(p)) > 1e-12 and abs(float(p) - 1) > 1e-12:
            raise NegativeProbability(f"{name} = {p} outside [0, 1]")
    return p


def y_probability(f, omega: int, eta: int):
    """Probability that ``y`` takes the lowest label ``a``."""
    if omega <= eta:
        raise ValueError("need omega > eta at the walker's site")
    D = _diff(f, eta, omega)
    if D == 0:
        return 1
    return _check(_diff(f, eta, omega - 1) / D, "P(y = a)")


def z_probability(f, omega: int, eta: int):
    """Probability that ``z`` takes ``b - 1``."""
    if omega <= eta:
        raise ValueError("need omega > eta at the walker's site")
    D = _diff(f, eta, omega)
    if D == 0:
        return 0
    return _check(_diff(f, eta + 1, omega) / D, "P(z = b - 1)")


def joint_probabilities(f, omega: int, eta: int):
    """Probabilities of ``(a, b-1)``, ``(a, b)`` and ``(b, b)`` for a shared refresh."""
    if omega <= eta:
        raise ValueError("need omega > eta at the walkers' site")
    D = _diff(f, eta, omega)
    if D == 0:
        return 0, 1, 0
    p1 = _diff(f, eta + 1, omega) / D
    p3 = _diff(f, omega - 1, omega) / D
    p2 = (_diff(f, eta, eta + 1) - _diff(f, omega - 1, omega)) / D
    return _check(p1, "P(a, b-1)"), _check(p2, "P(a, b)"), _check(p3, "P(b, b)")


def refresh_y(f, omega_at_site: int, eta_at_site: int, a: int, b: int, u: float) -> int:
    return a if u < y_probability(f, omega_at_site, eta_at_site) else b


def refresh_z(f, omega_at_site: int, eta_at_site: int, a: int, b: int, u: float) -> int:
    return b - 1 if u < z_probability(f, omega_at_site, eta_at_site) else b


def refresh_joint(f, omega: int, eta: int, a: int, b: int, u: float) -> tuple[int, int]:
    p1, p2, _ = joint_probabilities(f, omega, eta)
    if u < p1:
        return a, b - 1
    if u < p1 + p2:
        return a, b
    return b, b


# ------------------------------------------------------------- data types


@dataclass
class LabelPair:
    """Walkers ``y <= z`` with their carriers' positions and label intervals."""

    y: int
    z: int
    Xy: int
    ay: int
    by: int
    Xz: int
    az: int
    bz: int

    @property
    def Q(self) -> int:
        return self.Xy

    @property
    def Q_eta(self) -> int:
        return self.Xz

    def as_array(self) -> np.ndarray:
        return np.array([self.y, self.Xy, self.ay, self.by, self.z, self.Xz, self.az, self.bz], dtype=np.int64)

    @classmethod
    def from_array(cls, s) -> "LabelPair":
        y, Xy, ay, by, z, Xz, az, bz = (int(v) for v in s)
        return cls(y, z, Xy, ay, by, Xz, az, bz)

    def check(self):
        if self.y > self.z:
            raise SimulationError(f"y={self.y} > z={self.z}")
        if not (self.ay <= self.y <= self.by and self.az <= self.z <= self.bz):
            raise SimulationError("walker outside its label interval")


@dataclass(frozen=True)
class PartitionView:
    """Label intervals ``M_i = [lo, hi]`` per (unwrapped) site; empty sites omitted."""

    intervals: dict

    @classmethod
    def from_state(cls, state: CoupledState, anchor: Optional[int] = None) -> "PartitionView":
        labels = state.labels(anchor)
        out: dict[int, list[int]] = {}
        for m, x in labels.as_dict().items():
            out.setdefault(x, [m, m])
            out[x][1] = m
        return cls({k: tuple(v) for k, v in out.items()})

    def interval(self, site: int) -> Optional[tuple[int, int]]:
        return self.intervals.get(site)

    def size(self, site: int) -> int:
        iv = self.intervals.get(site)
        return 0 if iv is None else iv[1] - iv[0] + 1


@dataclass(frozen=True)
class GeometricNu:
    """``nu(m) = (1 - r) r^m`` on ``m >= 0``."""

    r: float

    def pmf(self, m: int) -> float:
        return (1 - self.r) * self.r ** m if m >= 0 else 0.0

    def tail(self, m: int) -> float:
        """``nu{>= m}``."""
        return self.r ** m if m > 0 else 1.0

    def cdf(self, m: int) -> float:
        return 1.0 - self.tail(m + 1)

    def truncated(self, m_max: int) -> DiscreteMeasure:
        pmf = np.array([self.pmf(m) for m in range(m_max + 1)])
        pmf[-1] += self.tail(m_max + 1)
        return DiscreteMeasure(0, pmf)


def geometric_bound_nu(r: float) -> GeometricNu:
    if not 0 <= r < 1:
        raise ValueError("need 0 <= r < 1")
    return GeometricNu(float(r))


# ------------------------------------------------------------ dynamics


def _require_tazrp(spec: RateSpec):
    if not spec.name.startswith("zrp") or spec.params.get("q", 0) != 0:
        raise ValueError("the label-walker construction needs a totally asymmetric zero range model")
    hi = min(spec.occupancy_cap or 60, 60)
    incs = [spec.f.increment(z) for z in range(1, hi + 1)]
    if any(b > a * (1 + 1e-12) + 1e-300 for a, b in zip(incs, incs[1:])):
        raise ValueError("the label-walker construction needs a concave jump rate f")


def initial_label_pair(state: CoupledState) -> LabelPair:
    """``y = z = 0`` with label 0 the lowest at site 0."""
    X, a, b = state.tracked.get(0, [0, 0, int(state.discrepancies()[0]) - 1])
    return LabelPair(0, 0, X, a, b, X, a, b)


def drive(background: CoupledState, pair: LabelPair, f, bond: int, rel: int, touched: bool,
          rng: np.random.Generator) -> LabelPair:
    """Update the walkers after a background move across ``bond`` that has
    already been applied to ``background``.

    ``rel = +1`` if an ``omega - eta`` particle moved right, ``-1`` if one
    moved left, ``0`` otherwise; ``touched`` is whether any configuration
    changed (both end sites of the bond then count as changed).
    """
    L = background.L
    s = int(bond) % L
    d = (s + 1) % L
    c = background.discrepancies()
    touch_y = touched and (pair.Xy % L in (s, d))
    touch_z = touched and (pair.Xz % L in (s, d))
    new = LabelPair(**vars(pair))
    if rel == 1:
        new.Xy, new.ay, new.by = K.label_right.py_func(pair.y, pair.Xy, pair.ay, pair.by, L, s, int(c[d]))
        new.Xz, new.az, new.bz = K.label_right.py_func(pair.z, pair.Xz, pair.az, pair.bz, L, s, int(c[d]))
    elif rel == -1:
        new.Xy, new.ay, new.by = K.label_left.py_func(pair.y, pair.Xy, pair.ay, pair.by, L, s, int(c[s]))
        new.Xz, new.az, new.bz = K.label_left.py_func(pair.z, pair.Xz, pair.az, pair.bz, L, s, int(c[s]))
    if not (touch_y or touch_z):
        return new
    eta, omega = background.configs[background.pair[0]], background.configs[background.pair[1]]
    if new.Xy == new.Xz:
        i = new.Xy % L
        new.y, new.z = refresh_joint(f, int(omega[i]), int(eta[i]), new.ay, new.by, rng.random())
    else:
        if touch_y:
            i = new.Xy % L
            new.y = refresh_y(f, int(omega[i]), int(eta[i]), new.ay, new.by, rng.random())
        if touch_z:
            i = new.Xz % L
            new.z = refresh_z(f, int(omega[i]), int(eta[i]), new.az, new.bz, rng.random())
    new.check()
    return new


def step_construction(background: CoupledState, pair: LabelPair, spec: RateSpec,
                      rng: np.random.Generator) -> tuple[LabelPair, float]:
    """One uniformised clock ring of the whole construction (pure Python).

    Returns the new pair and the elapsed time.
    """
    L = background.L
    R = simulation_bound(spec)
    dt = rng.exponential() / (L * R)
    x = rng.random() * L
    bond = min(int(x), L - 1)
    v = (x - bond) * R
    il, ih = background.pair
    pw = spec.p(int(background.configs[ih, bond]), int(background.configs[ih, (bond + 1) % L]))
    pe = spec.p(int(background.configs[il, bond]), int(background.configs[il, (bond + 1) % L]))
    top = max(pw, pe)
    if top == 0 or v >= top:
        return pair, dt
    fired = coupled_event(background, spec, bond, 1, v / top)
    rel = int(fired[ih]) - int(fired[il])
    return drive(background, pair, spec.f, bond, rel, bool(fired.any()), rng), dt


def four_process_view(background: CoupledState, pair: LabelPair):
    """``(eta, eta^+, omega^-, omega)`` with ``eta^+ = eta + delta_{X_z}`` and
    ``omega^- = omega - delta_{X_y}``."""
    L = background.L
    eta = background.configs[background.pair[0]].copy()
    omega = background.configs[background.pair[1]].copy()
    eta_plus = eta.copy()
    eta_plus[pair.Xz % L] += 1
    omega_minus = omega.copy()
    omega_minus[pair.Xy % L] -= 1
    return eta, eta_plus, omega_minus, omega


def f_difference_table(f: JumpRate, lo: int, hi: int) -> np.ndarray:
    """``fd[i, j] = f(lo + j) - f(lo + i)`` from cumulative sums of increments."""
    inc = np.array([0.0] + [f.increment(k) for k in range(lo + 1, hi + 1)])
    cum = np.cumsum(inc)
    return cum[None, :] - cum[:, None]


@dataclass
class ConstructionRun:
    times: np.ndarray
    Xy: np.ndarray
    Xz: np.ndarray
    y: np.ndarray
    z: np.ndarray
    n_events: int
    n_refresh: int
    min_probability: float
    pair: LabelPair
    log: Optional[np.ndarray] = None
    background: Optional[CoupledState] = field(default=None, repr=False)


def run_construction(spec: RateSpec, rho: float, lam: float, L: int, t_end: float,
                     obs_times: Sequence[float] = (), seed=None, rng: Optional[np.random.Generator] = None,
                     origin_lambda: Optional[float] = None, log_capacity: int = 0,
                     background: Optional[CoupledState] = None) -> ConstructionRun:
    """Build the pair ``eta <= omega`` (densities ``lam`` and ``rho``) and run
    the walkers to ``t_end``.

    ``origin_lambda`` sets the lower density used at the origin; the default
    ``rho`` makes the origin hold exactly one ``omega - eta`` particle, so the
    walkers start from the unique label there.
    """
    _require_tazrp(spec)
    if rng is None:
        rng = np.random.default_rng(seed)
    if background is None:
        lam0 = rho if origin_lambda is None else origin_lambda

        def lam_profile(i):
            return lam0 if i == 0 else lam

        background = make_two_density_pair(spec, lam_profile, rho, L, rng=rng)
    pair = initial_label_pair(background)
    R = simulation_bound(spec)
    x_limit = moving_limit(spec, L, t_end - background.time)
    if x_limit <= 0:
        raise GuardViolation(f"ring of L={L} leaves no room for the walkers up to t={t_end}")
    times = np.asarray(sorted(set(float(t) for t in obs_times) | {float(t_end)}))
    eta, omega = background.configs[0], background.configs[1]
    p_tab, _, lo, hi = rate_tables(spec, int(eta.min()), int(omega.max()))
    fd = f_difference_table(spec.f, lo, hi)
    state = pair.as_array()
    obs = np.zeros((len(times), 4), dtype=np.int64)
    log = np.zeros((log_capacity, 5))
    status, n_ev, n_ref, pmin, n_log = K.micro_thin(omega, eta, p_tab, lo, hi, R, fd, float(background.time),
                                                    times, state, obs, int(x_limit), log, rng)
    raise_status(status, "label-walker construction")
    background.time = float(t_end)
    return ConstructionRun(times, obs[:, 0], obs[:, 1], obs[:, 2], obs[:, 3], int(n_ev), int(n_ref),
                           float(pmin), LabelPair.from_array(state), log[:n_log] if log_capacity else None,
                           background)


def write_trajectory(run: ConstructionRun, path):
    """CSV dump ``time, y, z, X_y, X_z`` of every logged refresh."""
    if run.log is None:
        raise ValueError("run has no trajectory log; pass log_capacity > 0")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "y", "z", "X_y", "X_z"])
        for t, y, z, xy, xz in run.log:
            w.writerow([repr(float(t)), int(y), int(z), int(xy), int(xz)])
