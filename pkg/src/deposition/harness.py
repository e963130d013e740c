"""Experiment orchestration, estimators, hypothesis tests and the command line.

Every replicate draws from its own random stream
(``SeedSequence(master_seed, spawn_key=(index,))``) and results are
assembled in replicate order, so statistics do not depend on the number of
worker processes (``DEPOSITION_WORKERS``).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache, partial
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .coupling import make_discrepancy_pair, track_Q
from .flux import ConvergenceGuardError, char_speed, evaluate
from .measures import ThetaOutOfRange, TruncationError, measure_at_density, variance
from .microconcavity import four_process_view, geometric_bound_nu, run_construction, write_trajectory
from .rates import InvalidParameter, check_increment_ratio, model_from_descriptor, validate
from .simulator import (GuardViolation, SimulationError, init_stationary, initial_heights, replicate_rng,
                        required_L, run)

__all__ = [
    "ConfigError",
    "InsufficientPoints",
    "DegenerateInput",
    "ExperimentConfig",
    "MomentEstimate",
    "ScalingFit",
    "CLTResult",
    "LLNReport",
    "DominationResult",
    "IdentityReport",
    "jackknife",
    "resolve_L",
    "q_headroom",
    "run_replicates",
    "sample_Q",
    "sample_heights",
    "sample_construction",
    "estimate_Q_moments",
    "moment_ratio",
    "fit_scaling",
    "clt_statistics",
    "clt_check",
    "lln_check",
    "domination_test",
    "identity_check",
    "run_cli",
    "main",
]

DEFAULT_ALPHA = 1e-3
WORKERS_ENV = "DEPOSITION_WORKERS"
RESULT_FIELDS = ["experiment_id", "model", "rho", "t", "observable", "value", "std_error", "n"]


class ConfigError(ValueError):
    """Malformed experiment configuration."""


class InsufficientPoints(ValueError):
    """Too few (or too narrowly spread) points for a scaling fit."""


class DegenerateInput(ValueError):
    """The requested statistic is undefined for this input (e.g. ``D = 0``)."""


# ------------------------------------------------------------ configuration


@dataclass
class ExperimentConfig:
    """One experiment; serialised as a flat JSON object with these keys."""

    model: dict
    rho: float
    t_list: list
    replicates: int
    master_seed: int = 0
    L: object = "auto"
    V_override: Optional[float] = None
    lam: Optional[float] = None
    guard_factor: float = 1.0
    experiment_id: str = "experiment"
    output_csv: Optional[str] = None
    output_summary: Optional[str] = None

    def __post_init__(self):
        if not isinstance(self.model, dict) or "model" not in self.model:
            raise ConfigError("'model' must be an object with a 'model' name and optional 'params'")
        self.model = {"model": self.model["model"], "params": dict(self.model.get("params", {}))}
        try:
            self.rho = float(self.rho)
            self.t_list = [float(t) for t in self.t_list]
            self.replicates = int(self.replicates)
            self.master_seed = int(self.master_seed)
            self.guard_factor = float(self.guard_factor)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad field type: {exc}") from None
        if not self.t_list or any(t < 0 for t in self.t_list):
            raise ConfigError("t_list must be a nonempty list of nonnegative times")
        if any(b <= a for a, b in zip(self.t_list, self.t_list[1:])):
            raise ConfigError("t_list must be strictly increasing")
        if self.replicates < 2:
            raise ConfigError("replicates must be at least 2")
        if self.L != "auto":
            if isinstance(self.L, bool) or not isinstance(self.L, (int, np.integer)) or self.L < 4:
                raise ConfigError("L must be an integer >= 4 or \"auto\"")
            self.L = int(self.L)
        if self.guard_factor <= 0:
            raise ConfigError("guard_factor must be positive")

    @property
    def descriptor(self) -> str:
        return json.dumps(self.model, sort_keys=True)

    @property
    def spec(self):
        return _spec(self.descriptor)

    @property
    def model_label(self) -> str:
        params = ",".join(f"{k}={v}" for k, v in sorted(self.model["params"].items()))
        return f"{self.model['model']}({params})"

    @property
    def t_max(self) -> float:
        return self.t_list[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in cls.__dataclass_fields__.values()}
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        missing = {"model", "rho", "t_list", "replicates"} - set(d)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@lru_cache(maxsize=32)
def _spec(descriptor: str):
    return model_from_descriptor(json.loads(descriptor))


def q_headroom(V: float, t: float) -> int:
    """Room reserved for a moving discrepancy: drift plus a generous multiple
    of the ``t^(2/3)`` fluctuation scale.  The kernels still abort if the
    discrepancy leaves the safe window."""
    return int(math.ceil(abs(V) * t + 8 * max(t, 1.0) ** (2 / 3))) + 10


def resolve_L(config: ExperimentConfig, i_max: int = 0) -> int:
    """The ring size: ``config.L`` (checked against the guard) or the smallest guarded ring."""
    need = required_L(config.spec, config.t_max, i_max, config.guard_factor)
    if config.L == "auto":
        return need
    if config.L < need:
        raise GuardViolation(f"L={config.L} is below the guarded size {need} for t={config.t_max}, |i| <= {i_max}")
    return config.L


# --------------------------------------------------------------- replicates


def _workers(workers: Optional[int]) -> int:
    if workers is not None:
        return max(1, int(workers))
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer") from None


def run_replicates(func: Callable, n: int, args: tuple, workers: Optional[int] = None) -> np.ndarray:
    """Evaluate ``func(*args, indices)`` over chunks of replicate indices and
    stack the per-replicate rows in index order."""
    w = _workers(workers)
    chunks = np.array_split(np.arange(n), max(1, min(n, 4 * w)))
    if w == 1:
        parts = [func(*args, c) for c in chunks]
    else:
        with ProcessPoolExecutor(w) as ex:
            parts = list(ex.map(partial(func, *args), chunks))
    return np.concatenate(parts, axis=0)


def _q_chunk(descriptor, rho, L, times, guard_factor, seed, indices):
    spec = _spec(descriptor)
    times = np.asarray(times, dtype=float)
    pos = times[times > 0]
    out = np.zeros((len(indices), len(times)), dtype=np.int64)
    for k, idx in enumerate(indices):
        rng = replicate_rng(seed, int(idx))
        pair = make_discrepancy_pair(spec, rho, L, rng=rng)
        if pos.size:
            traj = track_Q(pair, spec, float(pos[-1]), pos, guard=True, guard_factor=guard_factor)
            out[k, times > 0] = traj.Q
    return out


def _height_chunk(descriptor, rho, L, times, sites, i_max, guard_factor, seed, indices):
    spec = _spec(descriptor)
    times = np.asarray(times, dtype=float)
    sites = np.asarray(sites, dtype=np.int64)
    bonds = np.unique(sites)
    out = np.zeros((len(indices), len(times)), dtype=np.int64)
    for k, idx in enumerate(indices):
        rng = replicate_rng(seed, int(idx))
        state = init_stationary(spec, rho, L, rng=rng)
        h0 = dict(zip(bonds.tolist(), initial_heights(state.occ, bonds)))
        pos = times[times > 0]
        cur = np.zeros((len(times), len(bonds)), dtype=np.int64)
        if pos.size:
            _, c = run(state, spec, float(pos[-1]), method="thinning", obs_times=pos, obs_bonds=bonds,
                       i_max=i_max, guard_factor=guard_factor)
            cur[times > 0] = c
        col = {b: j for j, b in enumerate(bonds.tolist())}
        for j, i in enumerate(sites.tolist()):
            out[k, j] = h0[i] + cur[j, col[i]]
    return out


def _micro_chunk(descriptor, rho, lam, L, t, seed, indices):
    spec = _spec(descriptor)
    out = np.zeros((len(indices), 8))
    for k, idx in enumerate(indices):
        r = run_construction(spec, rho, lam, L, t, rng=replicate_rng(seed, int(idx)))
        eta, eta_p, om_m, om = four_process_view(r.background, r.pair)
        ok = bool(np.all(eta <= eta_p) and np.all(eta_p <= om) and np.all(eta <= om_m) and np.all(om_m <= om))
        out[k] = (r.Xy[-1], r.Xz[-1], r.y[-1], r.z[-1], r.n_refresh, r.min_probability, ok, r.n_events)
    return out


def sample_Q(config: ExperimentConfig, workers: Optional[int] = None, L: Optional[int] = None) -> np.ndarray:
    """``Q(t)`` per replicate (rows) and time in ``config.t_list`` (columns)."""
    V = char_speed(config.spec, config.rho)
    L = L or resolve_L(config, q_headroom(V, config.t_max))
    return run_replicates(_q_chunk, config.replicates,
                          (config.descriptor, config.rho, L, tuple(config.t_list), config.guard_factor,
                           config.master_seed), workers)


def sample_heights(config: ExperimentConfig, sites: Sequence[int], workers: Optional[int] = None,
                   L: Optional[int] = None) -> np.ndarray:
    """Stationary heights ``h_{sites[k]}(t_k)`` per replicate (rows)."""
    sites = [int(s) for s in sites]
    if len(sites) != len(config.t_list):
        raise ConfigError("need one observation site per time")
    i_max = max(abs(s) for s in sites)
    L = L or resolve_L(config, i_max)
    return run_replicates(_height_chunk, config.replicates,
                          (config.descriptor, config.rho, L, tuple(config.t_list), tuple(sites), i_max,
                           config.guard_factor, config.master_seed), workers)


def sample_construction(config: ExperimentConfig, workers: Optional[int] = None,
                        L: Optional[int] = None) -> dict:
    """Label-walker runs to ``t_max``: final ``Q``, ``Q^eta``, ``y``, ``z`` and diagnostics."""
    if config.lam is None:
        raise ConfigError("the label-walker construction needs 'lam'")
    V = char_speed(config.spec, config.rho)
    L = L or resolve_L(config, q_headroom(V, config.t_max))
    arr = run_replicates(_micro_chunk, config.replicates,
                         (config.descriptor, config.rho, config.lam, L, config.t_max, config.master_seed), workers)
    return {
        "Q": arr[:, 0].astype(np.int64),
        "Q_eta": arr[:, 1].astype(np.int64),
        "y": arr[:, 2].astype(np.int64),
        "z": arr[:, 3].astype(np.int64),
        "n_refresh": int(arr[:, 4].sum()),
        "min_probability": float(arr[:, 5].min()),
        "four_process_ok": bool(arr[:, 6].all()),
        "n_events": int(arr[:, 7].sum()),
        "L": L,
    }


# ---------------------------------------------------------------- estimators


def jackknife(x: np.ndarray, stat: Callable = np.mean, groups: int = 200) -> tuple[float, float]:
    """Estimate and delete-a-group jackknife standard error of ``stat``.

    ``x`` has replicates along axis 0; ``groups`` contiguous blocks are left
    out in turn (one replicate per block when ``n <= groups``).
    """
    x = np.asarray(x)
    n = x.shape[0]
    if n < 2:
        raise ValueError("jackknife needs at least two replicates")
    est = float(stat(x))
    g = min(n, groups)
    blocks = np.array_split(np.arange(n), g)
    loo = np.array([stat(np.delete(x, b, axis=0)) for b in blocks], dtype=float)
    se = math.sqrt((g - 1) / g * float(np.sum((loo - loo.mean()) ** 2)))
    return est, se


@dataclass(frozen=True)
class MomentEstimate:
    t: float
    m: float
    value: float
    std_error: float
    n: int

    def __post_init__(self):
        if self.value < 0 or self.std_error < 0:
            raise ValueError("moment estimates and their errors are nonnegative")


def _centred(Q: np.ndarray, V: float, t: float) -> np.ndarray:
    return np.abs(Q - math.floor(V * t)).astype(float)


def estimate_Q_moments(config: ExperimentConfig, m_list: Sequence[float], samples: Optional[np.ndarray] = None,
                       workers: Optional[int] = None) -> list[MomentEstimate]:
    """``E|Q(t) - floor(V t)|^m`` per ``t`` in the config and ``m`` in ``m_list``."""
    V = char_speed(config.spec, config.rho)
    if samples is None:
        samples = sample_Q(config, workers)
    out = []
    for j, t in enumerate(config.t_list):
        d = _centred(samples[:, j], V, t)
        for m in m_list:
            est, se = jackknife(d ** m)
            out.append(MomentEstimate(t, m, est, se, len(d)))
    return out


def moment_ratio(samples: np.ndarray, t_list: Sequence[float], V: float, t_lo: float, t_hi: float,
                 m: float = 2) -> tuple[float, float]:
    """``E|Q(t_hi) - floor(V t_hi)|^m / E|Q(t_lo) - floor(V t_lo)|^m`` with a
    jackknife error over paired replicates."""
    t_list = list(t_list)
    a = _centred(samples[:, t_list.index(t_lo)], V, t_lo) ** m
    b = _centred(samples[:, t_list.index(t_hi)], V, t_hi) ** m
    pair = np.stack([a, b], axis=1)
    return jackknife(pair, lambda x: x[:, 1].mean() / x[:, 0].mean())


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    intercept: float
    slope_CI: tuple
    n_points: int
    r_squared: float


def fit_scaling(estimates: Sequence, level: float = 0.95) -> ScalingFit:
    """Least-squares line through ``(log t, log value)``.

    Accepts :class:`MomentEstimate` objects or ``(t, value)`` pairs; needs at
    least four points spanning at least one decade in ``t``.
    """
    pts = [(e.t, e.value) if isinstance(e, MomentEstimate) else (float(e[0]), float(e[1])) for e in estimates]
    pts = [(t, v) for t, v in pts if t > 0]
    if len(pts) < 4:
        raise InsufficientPoints(f"need >= 4 points with t > 0, got {len(pts)}")
    t = np.array([p[0] for p in pts])
    v = np.array([p[1] for p in pts])
    if np.any(v <= 0):
        raise InsufficientPoints("log-log fit needs positive values")
    if t.max() / t.min() < 10 * (1 - 1e-12):
        raise InsufficientPoints("points must span at least one decade in t")
    res = stats.linregress(np.log(t), np.log(v))
    q = stats.t.ppf(0.5 + level / 2, len(t) - 2)
    half = q * res.stderr
    return ScalingFit(float(res.slope), float(res.intercept), (float(res.slope - half), float(res.slope + half)),
                      len(t), float(res.rvalue ** 2))


# ------------------------------------------------------------- statistics


@dataclass(frozen=True)
class CLTResult:
    t: float
    site: int
    D: float
    variance_per_t: float
    variance_ratio: float
    variance_ratio_se: float
    ks_distance: float
    ks_pvalue: float
    n: int


def clt_statistics(heights: np.ndarray, t: float, D: float, rng: np.random.Generator) -> tuple:
    """Variance ratio ``Var(h)/(t D)`` (jackknife error) and the KS distance of
    the standardised heights to the normal law.

    Integer heights are spread by an independent ``Uniform(-1/2, 1/2)``
    continuity correction before standardising, so the KS distance measures
    the shape of the law rather than its lattice.
    """
    if D <= 0:
        raise DegenerateInput("D must be positive")
    h = np.asarray(heights, dtype=float)
    ratio, se = jackknife(h, lambda x: np.var(x, ddof=1) / (t * D))
    spread = h + rng.uniform(-0.5, 0.5, size=h.shape)
    zs = (spread - spread.mean()) / spread.std(ddof=1)
    ks = stats.kstest(zs, "norm")
    return ratio, se, float(ks.statistic), float(ks.pvalue)


def clt_check(config: ExperimentConfig, heights: Optional[np.ndarray] = None,
              workers: Optional[int] = None) -> CLTResult:
    """Off-characteristic Gaussian fluctuations of ``h_{floor(V t)}(t)`` at ``t = t_max``."""
    if config.V_override is None:
        raise ConfigError("clt_check needs V_override")
    spec = config.spec
    V = float(config.V_override)
    Vr = char_speed(spec, config.rho)
    D = variance(measure_at_density(spec, config.rho)) * abs(Vr - V)
    if abs(V - Vr) < 1e-9 or D <= 0:
        raise DegenerateInput(f"V = {V} equals the characteristic speed {Vr}: D = 0")
    t = config.t_max
    site = math.floor(V * t)
    if heights is None:
        cfg = ExperimentConfig(**{**config.to_dict(), "t_list": [t]})
        heights = sample_heights(cfg, [site], workers)[:, 0]
    rng = replicate_rng(config.master_seed, config.replicates)  # first stream past the replicates
    ratio, se, ks, p = clt_statistics(heights, t, D, rng)
    return CLTResult(t, site, D, ratio * D, ratio, se, ks, p, len(heights))


@dataclass(frozen=True)
class LLNReport:
    V: float
    rows: list  # (t, mean Q/t, SE, |mean - V|, sd of Q/t)
    within_4se: bool
    sd_decreasing: bool
    deviation_decreasing: bool

    @property
    def passed(self) -> bool:
        return self.within_4se and self.sd_decreasing


def lln_check(config: ExperimentConfig, samples: Optional[np.ndarray] = None,
              workers: Optional[int] = None) -> LLNReport:
    """``Q(t)/t`` against ``V`` over the time grid.

    ``within_4se`` refers to the last time; ``sd_decreasing`` requires the
    spread of ``Q(t)/t`` to shrink strictly along the grid, and
    ``deviation_decreasing`` flags whether ``|mean Q/t - V|`` does too.
    """
    V = char_speed(config.spec, config.rho)
    if samples is None:
        samples = sample_Q(config, workers)
    rows = []
    for j, t in enumerate(config.t_list):
        if t <= 0:
            continue
        r = samples[:, j] / t
        m, se = jackknife(r)
        rows.append((t, m, se, abs(m - V), float(r.std(ddof=1))))
    if not rows:
        raise ConfigError("lln_check needs positive times")
    sd = [r[4] for r in rows]
    dev = [r[3] for r in rows]
    last = rows[-1]
    return LLNReport(V, rows, last[3] < 4 * last[2], all(b < a for a, b in zip(sd, sd[1:])),
                     all(b <= a for a, b in zip(dev, dev[1:])))


@dataclass(frozen=True)
class DominationResult:
    passed: bool
    epsilon: float
    margin_y: float
    margin_z: float
    worst_level_y: Optional[int]
    worst_level_z: Optional[int]
    n: int


def _tail_margin(samples: np.ndarray, r: float, eps: float):
    s = np.sort(np.asarray(samples, dtype=np.int64))
    n = len(s)
    top = int(s.max())
    margin, worst = math.inf, None
    for m in range(0, max(top, 0) + 2):
        emp = (n - np.searchsorted(s, m, side="left")) / n
        ref = r ** m if m > 0 else 1.0
        gap = ref + eps - emp
        if gap < margin:
            margin, worst = gap, m
    return float(margin), worst


def domination_test(y_samples, z_samples=None, r: float = math.exp(-1), alpha: float = DEFAULT_ALPHA
                    ) -> DominationResult:
    """DKW check of ``y <=_d nu`` and ``-z <=_d nu`` with ``nu{>= m} = r^m``.

    Passes when, at every level ``m >= 0`` up to the sample maximum, the
    empirical tail stays below ``r^m + sqrt(log(2/alpha) / (2n))``.
    """
    y = np.asarray(y_samples)
    n = len(y)
    if n < 1000 or (z_samples is not None and len(z_samples) < 1000):
        raise ValueError("domination_test needs at least 1000 samples")
    geometric_bound_nu(r)
    eps = math.sqrt(math.log(2 / alpha) / (2 * n))
    my, wy = _tail_margin(y, r, eps)
    if z_samples is not None:
        mz, wz = _tail_margin(-np.asarray(z_samples), r, math.sqrt(math.log(2 / alpha) / (2 * len(z_samples))))
    else:
        mz, wz = math.inf, None
    return DominationResult(my >= 0 and mz >= 0, eps, my, mz, wy, wz, n)


@dataclass(frozen=True)
class IdentityReport:
    t: float
    V: float
    mean_Q: float
    mean_Q_se: float
    mean_z: float
    var_h: float
    var_h_se: float
    var_omega: float
    abs_Q: float
    abs_Q_se: float

    @property
    def predicted_var_h(self) -> float:
        return self.var_omega * self.abs_Q

    @property
    def predicted_var_h_se(self) -> float:
        return self.var_omega * self.abs_Q_se

    @property
    def relative_gap(self) -> float:
        return abs(self.var_h - self.predicted_var_h) / self.predicted_var_h

    @property
    def ci_overlap(self) -> bool:
        z = stats.norm.ppf(0.975)
        lo1, hi1 = self.var_h - z * self.var_h_se, self.var_h + z * self.var_h_se
        lo2, hi2 = self.predicted_var_h - z * self.predicted_var_h_se, self.predicted_var_h + z * self.predicted_var_h_se
        return lo1 <= hi2 and lo2 <= hi1

    @property
    def mean_ok(self) -> bool:
        return abs(self.mean_z) < 4

    @property
    def variance_ok(self) -> bool:
        return self.ci_overlap and self.relative_gap < 0.05


def identity_check(config: ExperimentConfig, q_samples: Optional[np.ndarray] = None,
                   h_samples: Optional[np.ndarray] = None, workers: Optional[int] = None) -> IdentityReport:
    """``E Q(t) = V t`` and ``Var h_0(t) = Var(omega) E|Q(t)|`` at ``t = t_max``.

    ``Q`` comes from discrepancy pairs, ``h_0`` from independent stationary runs.
    """
    spec = config.spec
    t = config.t_max
    cfg = ExperimentConfig(**{**config.to_dict(), "t_list": [t]})
    if q_samples is None:
        q_samples = sample_Q(cfg, workers)[:, 0]
    if h_samples is None:
        cfg_h = ExperimentConfig(**{**cfg.to_dict(), "master_seed": config.master_seed + 1})
        h_samples = sample_heights(cfg_h, [0], workers)[:, 0]
    V = char_speed(spec, config.rho)
    q = np.asarray(q_samples, dtype=float)
    h = np.asarray(h_samples, dtype=float)
    mq, se_q = jackknife(q)
    vh, se_vh = jackknife(h, lambda x: np.var(x, ddof=1))
    aq, se_aq = jackknife(np.abs(q))
    return IdentityReport(t, V, mq, se_q, (mq - V * t) / se_q, vh, se_vh,
                          variance(measure_at_density(spec, config.rho)), aq, se_aq)


# ----------------------------------------------------------------------- CLI


_MODEL_OPTS = [("--p", float), ("--q", float), ("--beta", float), ("--vartheta", float), ("--slope", float),
               ("--c", float), ("--a", float), ("--cap", int), ("--rate-upper-bound", float)]

_DEFAULTS = {
    "identities": dict(model={"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}, rho=1.0, t_list=[20.0],
                       replicates=2000),
    "scaling": dict(model={"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}, rho=1.0,
                    t_list=[16.0, 32.0, 64.0, 128.0, 256.0], replicates=500),
    "lln": dict(model={"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}, rho=1.0,
                t_list=[16.0, 32.0, 64.0, 128.0], replicates=500),
    "clt": dict(model={"model": "asep", "params": {"p": 1.0}}, rho=0.5, V_override=0.5, t_list=[64.0],
                replicates=2000),
    "microconcavity": dict(model={"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}, rho=1.0, lam=0.5,
                           L=200, t_list=[10.0], replicates=2000),
    "dump-trajectory": dict(model={"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}, rho=1.0, lam=0.5,
                            L=200, t_list=[10.0], replicates=2),
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deposition", description="Attractive deposition process experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    cmds = {
        "validate": "check a model's rate conditions",
        "flux": "flux H, speed V and curvature H'' on a density grid",
        "stationarity": "exact stationarity residual on a small ring",
        "identities": "check E Q(t) = V t and Var h_0(t) = Var(omega) E|Q(t)|",
        "scaling": "moments of |Q(t) - floor(V t)| and their log-log slopes",
        "clt": "off-characteristic Gaussian height fluctuations",
        "lln": "law of large numbers for Q(t)/t",
        "microconcavity": "label-walker invariants, domination and marginal law",
        "dump-trajectory": "CSV trajectory of the label walkers",
    }
    for name, help_ in cmds.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--model", help="asep | pap-exclusion | zrp | zrp-const | bricklayers")
        p.add_argument("--f", help="jump-rate family for zrp: geom-exp | const | linear")
        for opt, typ in _MODEL_OPTS:
            p.add_argument(opt, type=typ)
        p.add_argument("--rho", type=float)
        p.add_argument("--seed", type=int, help="overrides the config's master_seed")
        p.add_argument("--out-csv", help="results CSV path")
        p.add_argument("--out-json", help="summary JSON path")
        p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        if name == "flux":
            p.add_argument("--rho-grid", default="0.5:2.0:0.5", help="start:stop:step (inclusive)")
        if name in ("stationarity",):
            p.add_argument("--L", type=int, default=5)
            p.add_argument("--window", type=int, default=None, help="upper occupancy for infinite state spaces")
        if name not in ("validate", "flux", "stationarity"):
            p.add_argument("--t", type=float, nargs="+")
            p.add_argument("--replicates", type=int)
            p.add_argument("--L", default=None)
            p.add_argument("--V", type=float)
            p.add_argument("--lam", type=float)
            p.add_argument("--id", dest="experiment_id")
        if name == "dump-trajectory":
            p.add_argument("--out", required=True, help="trajectory CSV path")
    return ap


def _model_from_args(args, fallback: Optional[dict] = None) -> dict:
    if args.model is None:
        if fallback is None:
            raise ConfigError("no model given (use --model or --config)")
        model = {"model": fallback["model"], "params": dict(fallback.get("params", {}))}
    else:
        model = {"model": args.model, "params": {}}
    params = model["params"]
    if args.f is not None:
        params["f"] = args.f
    for opt, _ in _MODEL_OPTS:
        key = opt[2:].replace("-", "_")
        val = getattr(args, key)
        if val is not None:
            params[key] = val
    return model


def _config_from_args(args) -> ExperimentConfig:
    base = dict(_DEFAULTS.get(args.command, {}))
    if args.config:
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config must be a JSON object")
    base["model"] = _model_from_args(args, base.get("model"))
    overrides = {"rho": args.rho, "t_list": args.t, "replicates": args.replicates, "V_override": args.V,
                 "lam": args.lam, "master_seed": args.seed, "experiment_id": args.experiment_id,
                 "output_csv": args.out_csv, "output_summary": args.out_json}
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    if args.L is not None:
        base["L"] = args.L if args.L == "auto" else _int(args.L, "L")
    return ExperimentConfig.from_dict(base)


def _int(v, name):
    try:
        return int(v)
    except ValueError:
        raise ConfigError(f"{name} must be an integer or 'auto'") from None


def _write_csv(path, rows):
    if path is None:
        w = csv.writer(sys.stdout)
        w.writerow(RESULT_FIELDS)
        w.writerows(rows)
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        w.writerows(rows)


def _summary(command: str, experiment_id: str, tests: dict, alpha: float, n_stat: int) -> dict:
    passed = all(v["passed"] for v in tests.values())
    return {
        "experiment_id": experiment_id,
        "command": command,
        "alpha_per_test": alpha,
        "n_statistical_tests": n_stat,
        "family_alpha": 1 - (1 - alpha) ** n_stat if n_stat else 0.0,
        "passed": passed,
        "tests": tests,
    }


def _emit(args, summary: dict, rows: list, csv_path=None, json_path=None) -> int:
    _write_csv(csv_path, rows)
    text = json.dumps(summary, indent=2, default=float)
    if json_path:
        with open(json_path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text, file=sys.stderr)
    for name, res in summary["tests"].items():
        print(f"{'PASS' if res['passed'] else 'FAIL'} {name}", file=sys.stderr)
    if summary["passed"]:
        return 0
    return 2


def _grid(spec: str) -> list[float]:
    try:
        a, b, s = (float(x) for x in spec.split(":"))
    except ValueError:
        raise ConfigError("--rho-grid must be start:stop:step") from None
    if s <= 0 or b < a:
        raise ConfigError("--rho-grid needs step > 0 and stop >= start")
    n = int(math.floor((b - a) / s + 1e-9))
    return [round(a + k * s, 12) for k in range(n + 1)]


def _cmd_validate(args):
    model = _model_from_args(args)
    spec = model_from_descriptor(model)
    rep = validate(spec)
    tests = {"rate_conditions": {"passed": rep.ok, "violations": [str(v) for v in rep.violations]}}
    if spec.name.startswith("zrp"):
        chk = check_increment_ratio(spec.f)
        tests["increment_ratio"] = {"passed": True, "holds": chk.holds, "r": chk.r, "detail": chk.detail}
    label = json.dumps(model, sort_keys=True)
    return _emit(args, _summary("validate", label, tests, args.alpha, 0), [], args.out_csv, args.out_json)


def _cmd_flux(args):
    model = _model_from_args(args)
    spec = model_from_descriptor(model)
    rows = []
    for rho in _grid(args.rho_grid):
        ev = evaluate(spec, rho)
        label = model["model"]
        rows += [["flux", label, rho, "", "H", ev.H, 0.0, ""], ["flux", label, rho, "", "V", ev.V, 0.0, ""],
                 ["flux", label, rho, "", "H2", ev.H2, ev.H2_error, ""]]
    return _emit(args, _summary("flux", "flux", {"evaluated": {"passed": True, "n_rho": len(rows) // 3}},
                                args.alpha, 0), rows, args.out_csv, args.out_json)


def _cmd_stationarity(args):
    from .oracle import build_chain, stationarity_residual, truncation_bound
    model = _model_from_args(args)
    spec = model_from_descriptor(model)
    rho = 0.5 if args.rho is None else args.rho
    m = measure_at_density(spec, rho)
    window = None
    if not (spec.space.finite_min and spec.space.finite_max):
        window = (int(spec.space.omega_min) if spec.space.finite_min else -(args.window or 6), args.window or 12)
    chain = build_chain(spec, args.L, window)
    res = stationarity_residual(chain, m)
    bound = truncation_bound(chain, m) if chain.truncated else 1e-12
    tests = {"stationarity": {"passed": res <= bound, "residual": res, "bound": bound, "states": chain.n_states}}
    rows = [["stationarity", model["model"], rho, 0, "residual", res, 0.0, chain.n_states]]
    return _emit(args, _summary("stationarity", "stationarity", tests, args.alpha, 0), rows,
                 args.out_csv, args.out_json)


def _cmd_identities(args):
    cfg = _config_from_args(args)
    rep = identity_check(cfg)
    lab, eid = cfg.model_label, cfg.experiment_id
    n = cfg.replicates
    rows = [[eid, lab, cfg.rho, rep.t, "mean_Q", rep.mean_Q, rep.mean_Q_se, n],
            [eid, lab, cfg.rho, rep.t, "V_t", rep.V * rep.t, 0.0, n],
            [eid, lab, cfg.rho, rep.t, "var_h0", rep.var_h, rep.var_h_se, n],
            [eid, lab, cfg.rho, rep.t, "var_omega_times_abs_Q", rep.predicted_var_h, rep.predicted_var_h_se, n]]
    tests = {"mean_Q_equals_Vt": {"passed": rep.mean_ok, "z": rep.mean_z},
             "variance_identity": {"passed": rep.variance_ok, "relative_gap": rep.relative_gap,
                                   "ci_overlap": rep.ci_overlap}}
    return _emit(args, _summary("identities", eid, tests, args.alpha, 2), rows, cfg.output_csv, cfg.output_summary)


def _cmd_scaling(args):
    cfg = _config_from_args(args)
    samples = sample_Q(cfg)
    est = estimate_Q_moments(cfg, [1, 2], samples)
    lab, eid = cfg.model_label, cfg.experiment_id
    rows = [[eid, lab, cfg.rho, e.t, f"abs_moment_{e.m:g}", e.value, e.std_error, e.n] for e in est]
    tests = {}
    first = [e for e in est if e.m == 1]
    try:
        fit = fit_scaling(first)
        rows.append([eid, lab, cfg.rho, "", "slope_m1", fit.slope, (fit.slope_CI[1] - fit.slope_CI[0]) / 3.92,
                     fit.n_points])
        tests["slope_window"] = {"passed": 0.55 <= fit.slope <= 0.80, "slope": fit.slope, "ci": fit.slope_CI}
    except InsufficientPoints as exc:
        tests["slope_window"] = {"passed": False, "error": str(exc)}
    V = char_speed(cfg.spec, cfg.rho)
    quads = [(a, b) for a in cfg.t_list for b in cfg.t_list if a > 0 and abs(b - 4 * a) < 1e-9]
    if quads:
        a, b = quads[-1]
        ratio, se = moment_ratio(samples, cfg.t_list, V, a, b)
        rows.append([eid, lab, cfg.rho, b, f"second_moment_ratio_{a:g}", ratio, se, cfg.replicates])
        tests["superdiffusive_ratio"] = {"passed": ratio > 4.5, "ratio": ratio, "se": se, "t": [a, b]}
    return _emit(args, _summary("scaling", eid, tests, args.alpha, 0), rows, cfg.output_csv, cfg.output_summary)


def _cmd_clt(args):
    cfg = _config_from_args(args)
    res = clt_check(cfg)
    lab, eid = cfg.model_label, cfg.experiment_id
    rows = [[eid, lab, cfg.rho, res.t, "var_h_over_t", res.variance_per_t, res.variance_ratio_se * res.D, res.n],
            [eid, lab, cfg.rho, res.t, "D", res.D, 0.0, res.n],
            [eid, lab, cfg.rho, res.t, "ks_distance", res.ks_distance, 0.0, res.n]]
    tests = {"variance_within_15pct": {"passed": abs(res.variance_ratio - 1) < 0.15, "ratio": res.variance_ratio},
             "ks_distance_below_0.02": {"passed": res.ks_distance < 0.02, "ks": res.ks_distance}}
    return _emit(args, _summary("clt", eid, tests, args.alpha, 0), rows, cfg.output_csv, cfg.output_summary)


def _cmd_lln(args):
    cfg = _config_from_args(args)
    rep = lln_check(cfg)
    lab, eid = cfg.model_label, cfg.experiment_id
    rows = [[eid, lab, cfg.rho, t, "mean_Q_over_t", m, se, cfg.replicates] for t, m, se, _, _ in rep.rows]
    rows += [[eid, lab, cfg.rho, t, "sd_Q_over_t", sd, 0.0, cfg.replicates] for t, _, _, _, sd in rep.rows]
    tests = {"mean_within_4se": {"passed": rep.within_4se, "V": rep.V},
             "spread_decreasing": {"passed": rep.sd_decreasing},
             "deviation_monotone": {"passed": True, "monotone": rep.deviation_decreasing}}
    return _emit(args, _summary("lln", eid, tests, args.alpha, 1), rows, cfg.output_csv, cfg.output_summary)


def _cmd_microconcavity(args):
    cfg = _config_from_args(args)
    res = sample_construction(cfg)
    spec = cfg.spec
    r = check_increment_ratio(spec.f).r
    dom = domination_test(res["y"], res["z"], r, args.alpha)
    direct = sample_Q(ExperimentConfig(**{**cfg.to_dict(), "t_list": [cfg.t_max],
                                          "master_seed": cfg.master_seed + 1}), L=res["L"])[:, 0]
    ks = stats.ks_2samp(res["Q"], direct)
    lab, eid = cfg.model_label, cfg.experiment_id
    n = cfg.replicates
    rows = [[eid, lab, cfg.rho, cfg.t_max, "mean_Q_construction", float(np.mean(res["Q"])), 0.0, n],
            [eid, lab, cfg.rho, cfg.t_max, "mean_Q_direct", float(np.mean(direct)), 0.0, n],
            [eid, lab, cfg.rho, cfg.t_max, "ks_Q", float(ks.statistic), 0.0, n]]
    tests = {"invariants": {"passed": res["four_process_ok"] and bool(np.all(res["Q"] <= res["Q_eta"])),
                            "refreshes": res["n_refresh"], "min_probability": res["min_probability"]},
             "domination": {"passed": dom.passed, "margin_y": dom.margin_y, "margin_z": dom.margin_z, "r": r},
             "marginal_law": {"passed": ks.pvalue > 0.01, "ks": float(ks.statistic), "pvalue": float(ks.pvalue)}}
    return _emit(args, _summary("microconcavity", eid, tests, args.alpha, 2), rows, cfg.output_csv,
                 cfg.output_summary)


def _cmd_dump(args):
    cfg = _config_from_args(args)
    if cfg.lam is None:
        raise ConfigError("dump-trajectory needs --lam")
    spec = cfg.spec
    V = char_speed(spec, cfg.rho)
    L = resolve_L(cfg, q_headroom(V, cfg.t_max))
    run = run_construction(spec, cfg.rho, cfg.lam, L, cfg.t_max, rng=replicate_rng(cfg.master_seed, 0),
                           log_capacity=1_000_000)
    write_trajectory(run, args.out)
    tests = {"trajectory": {"passed": True, "rows": int(len(run.log)), "path": args.out}}
    return _emit(args, _summary("dump-trajectory", cfg.experiment_id, tests, args.alpha, 0), [], cfg.output_csv,
                 cfg.output_summary)


_COMMANDS = {
    "validate": _cmd_validate,
    "flux": _cmd_flux,
    "stationarity": _cmd_stationarity,
    "identities": _cmd_identities,
    "scaling": _cmd_scaling,
    "clt": _cmd_clt,
    "lln": _cmd_lln,
    "microconcavity": _cmd_microconcavity,
    "dump-trajectory": _cmd_dump,
}


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point: 0 when every check passes, 2 when a check fails, 1 on error."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: malformed config: {exc}", file=sys.stderr)
    except InvalidParameter as exc:
        print(f"error: invalid model parameter: {exc}", file=sys.stderr)
    except GuardViolation as exc:
        print(f"error: wraparound guard: {exc}", file=sys.stderr)
    except (ThetaOutOfRange, TruncationError, ConvergenceGuardError) as exc:
        print(f"error: measure convergence: {exc}", file=sys.stderr)
    except DegenerateInput as exc:
        print(f"error: degenerate input: {exc}", file=sys.stderr)
    except SimulationError as exc:
        print(f"error: simulation: {exc}", file=sys.stderr)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 1


def main() -> int:
    return run_cli(sys.argv[1:])
