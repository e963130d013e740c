"""Stationary product marginals, seeding measures and monotone couplings.

The single-site stationary law at fugacity ``theta`` is
``mu(z) = exp(theta z) / f(z)! / Z(theta)`` with ``f(0)! = 1``,
``f(z)! = f(1)...f(z)`` for ``z > 0`` and ``1 / (f(z+1)...f(0))`` for
``z < 0``.  Everything here works on a truncated support whose excluded mass
is bounded rigorously through the geometric decay of successive weight ratios
(``f`` is nondecreasing, so the ratios only shrink further out).
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .rates import RateSpec

__all__ = [
    "ThetaOutOfRange",
    "TruncationError",
    "DominationViolated",
    "DiscreteMeasure",
    "TiltedMeasure",
    "SeedMeasure",
    "MonotoneCoupling",
    "Dominance",
    "tilted",
    "density_of_theta",
    "theta_of_density",
    "measure_at_density",
    "variance",
    "cov_with_omega",
    "expectation",
    "seed_measure",
    "shifted",
    "monotone_couple",
    "dominance_check",
]

DEFAULT_TOL = 1e-12
_MAX_SUPPORT = 200_000


class ThetaOutOfRange(ValueError):
    """The state sum diverges at the requested fugacity."""


class TruncationError(RuntimeError):
    """The tail bound cannot be brought below the requested tolerance."""


class DominationViolated(ValueError):
    def __init__(self, msg, witness):
        super().__init__(msg)
        self.witness = witness


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Probability masses ``pmf[k]`` at the integers ``lo + k``."""

    lo: int
    pmf: np.ndarray

    @property
    def hi(self) -> int:
        return self.lo + len(self.pmf) - 1

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.lo, self.hi + 1)

    def __call__(self, z: int) -> float:
        k = int(z) - self.lo
        return float(self.pmf[k]) if 0 <= k < len(self.pmf) else 0.0

    @functools.cached_property
    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.pmf)
        c /= c[-1]
        return c

    def cdf_at(self, x: int) -> float:
        k = int(x) - self.lo
        if k < 0:
            return 0.0
        if k >= len(self.pmf):
            return 1.0
        return float(self.cdf[k])

    def mean(self) -> float:
        return float(np.dot(self.support, self.pmf))

    def expect(self, phi: Callable) -> float:
        vals = np.array([phi(int(z)) for z in self.support], dtype=float)
        return float(np.dot(vals, self.pmf))

    def quantile(self, u):
        """Inverse CDF; vectorised over ``u`` in ``[0, 1)``."""
        k = np.searchsorted(self.cdf, u, side="right")
        return self.lo + np.minimum(k, len(self.pmf) - 1)

    def sample(self, rng: np.random.Generator, size=None):
        return self.quantile(rng.random(size))

    def to_json(self) -> str:
        return json.dumps({"lo": self.lo, "pmf": self.pmf.tolist()})


@dataclass(frozen=True, eq=False)
class TiltedMeasure(DiscreteMeasure):
    theta: float = 0.0
    log_Z: float = 0.0
    tail_mass_bound: float = 0.0
    theta_lo: float = -math.inf
    theta_hi: float = math.inf

    @property
    def support_lo(self) -> int:
        return self.lo

    @property
    def support_hi(self) -> int:
        return self.hi

    def to_json(self) -> str:
        return json.dumps({"theta": self.theta, "log_Z": self.log_Z, "support": [self.lo, self.hi],
                           "tail_mass_bound": self.tail_mass_bound, "pmf": self.pmf.tolist()})


@dataclass(frozen=True, eq=False)
class SeedMeasure(DiscreteMeasure):
    rho: float = 0.0
    shift: int = 0
    renormalization: float = 0.0


def _log_f(spec: RateSpec, z: int) -> float:
    v = spec.f(z)
    if not v > 0:
        raise ValueError(f"f({z}) = {v} is not positive")
    return math.log(v)


def tilted(spec: RateSpec, theta: float, tol: float = DEFAULT_TOL) -> TiltedMeasure:
    """Truncated ``mu^theta`` with excluded mass at most ``tol``."""
    t_lo, t_hi = spec.theta_lo, spec.theta_hi
    if not (t_lo < theta < t_hi):
        raise ThetaOutOfRange(f"theta={theta} outside ({t_lo}, {t_hi}); the state sum diverges")
    if tol <= 0:
        raise ValueError("tol must be positive")
    space = spec.space
    half = tol / 2

    # log weights walking outward from 0; log w(z+1) - log w(z) = theta - log f(z+1)
    up = [0.0]
    s_lower = 1.0  # running lower bound on Z / w(0), refined below
    z = 0
    tail_hi = 0.0
    while True:
        if space.finite_max and z >= space.omega_max:
            break
        step = theta - _log_f(spec, z + 1)
        nxt = up[-1] + step
        up.append(nxt)
        z += 1
        s_lower += math.exp(nxt - 0.0) if nxt < 700 else math.inf
        if step < 0:
            r = math.exp(theta - _log_f(spec, z + 1)) if not (space.finite_max and z >= space.omega_max) else 0.0
            if r < 1:
                bound = math.exp(nxt) * r / (1 - r)
                # second-moment weight keeps variances accurate, not just masses
                weight = 2.0 * (z + 1.0 / (1 - r)) ** 2
                if bound * weight <= half * s_lower:
                    tail_hi = bound
                    break
        if len(up) > _MAX_SUPPORT:
            raise TruncationError(f"upper tail at theta={theta} not summable to tol={tol}")
    down = [0.0]
    z = 0
    tail_lo = 0.0
    while True:
        if space.finite_min and z <= space.omega_min:
            break
        # log w(z-1) - log w(z) = log f(z) - theta
        step = _log_f(spec, z) - theta if z > space.omega_min else -math.inf
        nxt = down[-1] + step
        down.append(nxt)
        z -= 1
        s_lower += math.exp(nxt)
        if step < 0:
            if space.finite_min and z <= space.omega_min:
                break
            r = math.exp(_log_f(spec, z) - theta)
            if r < 1:
                bound = math.exp(nxt) * r / (1 - r)
                weight = 2.0 * (-z + 1.0 / (1 - r)) ** 2
                if bound * weight <= half * s_lower:
                    tail_lo = bound
                    break
        if len(down) > _MAX_SUPPORT:
            raise TruncationError(f"lower tail at theta={theta} not summable to tol={tol}")

    logw = np.array(down[:0:-1] + up)
    lo = -(len(down) - 1)
    m = logw.max()
    w = np.exp(logw - m)
    total = w.sum()
    pmf = w / total
    log_Z = m + math.log(total)
    tail = (tail_hi + tail_lo) / (total * math.exp(m))
    return TiltedMeasure(lo=lo, pmf=pmf, theta=theta, log_Z=log_Z, tail_mass_bound=tail,
                         theta_lo=spec.theta_lo, theta_hi=spec.theta_hi)


def density_of_theta(m: TiltedMeasure) -> float:
    return m.mean()


def variance(m: DiscreteMeasure) -> float:
    s = m.support.astype(float)
    mu = float(np.dot(s, m.pmf))
    return float(np.dot((s - mu) ** 2, m.pmf))


def expectation(m: DiscreteMeasure, phi: Callable[[int], float]) -> float:
    return m.expect(phi)


def cov_with_omega(m: DiscreteMeasure, phi: Callable[[int], float]) -> float:
    """``Cov(phi(omega), omega)``, the theta-derivative of ``E phi``."""
    s = m.support.astype(float)
    vals = np.array([phi(int(z)) for z in m.support], dtype=float)
    mu = float(np.dot(s, m.pmf))
    return float(np.dot(vals * (s - mu), m.pmf))


@functools.lru_cache(maxsize=4096)
def _theta_of_density_cached(spec: RateSpec, rho: float, tol: float) -> float:
    space = spec.space
    if not (space.omega_min < rho < space.omega_max):
        raise ThetaOutOfRange(f"density {rho} outside ({space.omega_min}, {space.omega_max})")
    t_lo, t_hi = spec.theta_lo, spec.theta_hi

    def g(theta):
        return density_of_theta(tilted(spec, theta)) - rho

    # bracket by expanding steps away from a feasible start
    def inside(t):
        return t_lo < t < t_hi

    a = 0.0 if inside(0.0) else (t_hi - 1.0 if math.isfinite(t_hi) else t_lo + 1.0)
    ga = g(a)
    step = 1.0
    if ga < 0:
        lo_t, b = a, None
        while b is None:
            cand = lo_t + step
            if not inside(cand):
                cand = lo_t + (t_hi - lo_t) / 2
            if g(cand) >= 0:
                b = cand
            else:
                lo_t = cand
                step *= 2
            if math.isfinite(t_hi) and t_hi - lo_t < 1e-15:
                raise ThetaOutOfRange(f"density {rho} not reachable below theta_hi={t_hi}")
        a, b = lo_t, b
    else:
        hi_t, a_ = a, None
        while a_ is None:
            cand = hi_t - step
            if not inside(cand):
                cand = hi_t - (hi_t - t_lo) / 2
            if g(cand) <= 0:
                a_ = cand
            else:
                hi_t = cand
                step *= 2
            if math.isfinite(t_lo) and hi_t - t_lo < 1e-15:
                raise ThetaOutOfRange(f"density {rho} not reachable above theta_lo={t_lo}")
        a, b = a_, hi_t
    while b - a > 1e-6:
        mid = 0.5 * (a + b)
        if g(mid) < 0:
            a = mid
        else:
            b = mid
    theta = 0.5 * (a + b)
    best, best_resid = theta, math.inf
    for _ in range(60):
        m = tilted(spec, theta)
        resid = density_of_theta(m) - rho
        if abs(resid) < best_resid:
            best, best_resid = theta, abs(resid)
        if resid == 0.0 or best_resid < 1e-3 * tol:
            break
        if resid < 0:
            a = theta
        else:
            b = theta
        new = theta - resid / variance(m)
        if not (a < new < b):
            new = 0.5 * (a + b)
        if new == theta:
            break
        theta = new
    if best_resid >= tol:
        raise ThetaOutOfRange(f"theta(rho={rho}) did not converge (residual {best_resid:.3g})")
    return best
    return theta


def theta_of_density(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> float:
    """Invert ``rho(theta)``: bracketing bisection, then a Newton polish using
    the variance as derivative."""
    return _theta_of_density_cached(spec, float(rho), float(tol))


@functools.lru_cache(maxsize=4096)
def _measure_cached(spec: RateSpec, rho: float, tol: float) -> TiltedMeasure:
    return tilted(spec, theta_of_density(spec, rho), tol)


def measure_at_density(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> TiltedMeasure:
    return _measure_cached(spec, float(rho), float(tol))


def seed_measure(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> SeedMeasure:
    """The size-biased tail law ``hat mu(y) = Var^{-1} sum_{z > y} (z - rho) mu(z)``.

    Terms with ``y >= rho`` use the upper tail directly; below ``rho`` the
    equivalent ``-sum_{z <= y}`` form avoids cancellation.  When
    ``omega_min = -inf`` the result is renormalised and the correction
    recorded in ``renormalization``.
    """
    m = measure_at_density(spec, rho, tol)
    s = m.support.astype(float)
    c = (s - rho) * m.pmf
    var = variance(m)
    upper = np.cumsum(c[::-1])[::-1]  # sum_{z >= y}
    strict_upper = np.append(upper[1:], 0.0)  # sum_{z > y}
    lower = np.cumsum(c)  # sum_{z <= y}
    raw = np.where(s >= rho, strict_upper, -lower) / var
    raw = np.maximum(raw, 0.0)
    if spec.space.finite_max:
        raw[s >= spec.space.omega_max] = 0.0
    total = raw.sum()
    if abs(total - 1) > max(1e-6, 1e3 * tol) and spec.space.finite_min:
        raise TruncationError(f"seed measure mass {total} deviates from 1")
    # trim zero mass at the top so that omega + 1 stays inside the table
    last = len(raw) - 1
    while last > 0 and raw[last] == 0.0:
        last -= 1
    pmf = raw[: last + 1] / total
    return SeedMeasure(lo=m.lo, pmf=pmf, rho=rho, shift=0, renormalization=float(total - 1))


def shifted(m: DiscreteMeasure, by: int = 1) -> DiscreteMeasure:
    """The law of ``X + by``."""
    if isinstance(m, SeedMeasure):
        return SeedMeasure(lo=m.lo + by, pmf=m.pmf, rho=m.rho, shift=m.shift + by,
                           renormalization=m.renormalization)
    return DiscreteMeasure(lo=m.lo + by, pmf=m.pmf)


@dataclass(frozen=True)
class Dominance:
    dominated: bool
    witness: Optional[int] = None
    gap: float = 0.0

    def __bool__(self):
        return self.dominated


def dominance_check(m1: DiscreteMeasure, m2: DiscreteMeasure, atol: float = 1e-12) -> Dominance:
    """Exact CDF comparison: is ``m1 <=_st m2``, i.e. ``F1(x) >= F2(x)`` everywhere?"""
    lo = min(m1.lo, m2.lo)
    hi = max(m1.hi, m2.hi)
    worst, where = 0.0, None
    for x in range(lo, hi + 1):
        gap = m2.cdf_at(x) - m1.cdf_at(x)
        if gap > atol and where is None:
            where = x
        worst = max(worst, gap)
    return Dominance(where is None, where, worst)


@dataclass(frozen=True, eq=False)
class MonotoneCoupling:
    """Comonotone (common-quantile) coupling of two ordered laws."""

    lower: DiscreteMeasure
    upper: DiscreteMeasure
    strict: bool = False

    def sample_from_uniform(self, u):
        return self.lower.quantile(u), self.upper.quantile(u)

    def sample(self, rng: np.random.Generator, size=None):
        return self.sample_from_uniform(rng.random(size))

    def joint_pmf(self) -> dict[tuple[int, int], float]:
        """Exact joint masses from merging both CDF breakpoint sets."""
        cuts = np.union1d(self.lower.cdf, self.upper.cdf)
        cuts = cuts[(cuts > 0)]
        out: dict[tuple[int, int], float] = {}
        prev = 0.0
        for c in cuts:
            if c <= prev:
                continue
            mid = 0.5 * (prev + c)
            y, z = self.sample_from_uniform(np.array([mid]))
            key = (int(y[0]), int(z[0]))
            out[key] = out.get(key, 0.0) + float(c - prev)
            prev = float(c)
        return out


def monotone_couple(lower: DiscreteMeasure, upper: DiscreteMeasure, strictness: str = "weak",
                    atol: float = 1e-12) -> MonotoneCoupling:
    """Quantile coupling with ``y <= z`` (weak) or ``y < z`` (strict) almost surely.

    In strict mode ``upper`` is the already shifted law (``hat mu^rho + 1``)
    and domination of ``lower`` by ``upper - 1`` is required.
    """
    if strictness not in ("weak", "strict"):
        raise ValueError(f"strictness must be 'weak' or 'strict', got {strictness!r}")
    strict = strictness == "strict"
    target = shifted(upper, -1) if strict else upper
    dom = dominance_check(lower, target, atol)
    if not dom.dominated:
        raise DominationViolated(f"lower not dominated; CDFs cross at {dom.witness} by {dom.gap:.3g}",
                                 dom.witness)
    return MonotoneCoupling(lower, upper, strict)
