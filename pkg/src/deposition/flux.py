"""Hydrodynamic flux, characteristic speed and flux curvature.

All expectations are exact double sums over the truncated single-site support
of the stationary marginal (the two-site law is a product), so the values
carry no sampling noise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .measures import DEFAULT_TOL, TiltedMeasure, measure_at_density, variance
from .rates import RateSpec

__all__ = [
    "ConvergenceGuardError",
    "StepDegenerate",
    "FluxEvaluation",
    "flux_H",
    "char_speed",
    "flux_H2",
    "flux_H2_with_error",
    "rankine_hugoniot",
    "evaluate",
]


class ConvergenceGuardError(RuntimeError):
    """The truncated two-site sum cannot be certified to the requested tolerance."""


class StepDegenerate(ValueError):
    """The finite-difference stencil leaves the open density interval."""


@dataclass(frozen=True)
class FluxEvaluation:
    rho: float
    H: float
    V: float
    H2: float
    H2_error: float
    method_meta: dict = field(default_factory=dict)


def _two_site(spec: RateSpec, m: TiltedMeasure):
    """Net rate table ``g = p - q`` on the support and the product weights."""
    pt, qt = spec.tables(m.lo, m.hi)
    g = pt - qt
    w = np.outer(m.pmf, m.pmf)
    return g, w


def _guard(spec: RateSpec, m: TiltedMeasure, g: np.ndarray, tol: float):
    # the excluded two-site mass is at most twice the single-site tail; the
    # rates on the excluded region are bounded by the model's rate bound or,
    # for unbounded rates, by the largest tabulated rate (rates grow at most
    # polynomially, so the excluded contribution is smaller still)
    bound = spec.rate_upper_bound if math.isfinite(spec.rate_upper_bound) else float(np.abs(g).max())
    err = 2 * m.tail_mass_bound * max(bound, 1.0)
    if err > max(tol, 1e-10):
        raise ConvergenceGuardError(f"two-site truncation error {err:.3g} exceeds tol {tol:.3g}")
    return err


def flux_H(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> float:
    """``H(rho) = E[p(w0, w1) - q(w0, w1)]`` under the density-``rho`` product law."""
    m = measure_at_density(spec, rho, tol)
    g, w = _two_site(spec, m)
    _guard(spec, m, g, tol)
    return float((g * w).sum())


def char_speed(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> float:
    """``V = H'(rho) = Cov(g(w0, w1), w0 + w1) / Var(w)``."""
    m = measure_at_density(spec, rho, tol)
    g, w = _two_site(spec, m)
    _guard(spec, m, g, tol)
    s = m.support.astype(float)
    mu = float(np.dot(s, m.pmf))
    centred = (s - mu)[:, None] + (s - mu)[None, :]
    return float((g * centred * w).sum()) / variance(m)


def _step(spec: RateSpec, rho: float) -> float:
    h = max(1e-4, 1e-3 * abs(rho))
    lo, hi = spec.space.omega_min, spec.space.omega_max
    if not (lo < rho - h and rho + h < hi):
        raise StepDegenerate(f"rho={rho} within {h:g} of the density boundary ({lo}, {hi})")
    return h


def flux_H2_with_error(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> tuple[float, float, float]:
    """``H''`` from a Richardson-extrapolated central difference of ``V``.

    Returns ``(value, error_estimate, step)``; the error estimate is the
    Richardson correction ``|D(h/2) - D(h)| / 3`` plus the roundoff floor.
    """
    h = _step(spec, rho)

    def d(step):
        return (char_speed(spec, rho + step, tol) - char_speed(spec, rho - step, tol)) / (2 * step)

    d1, d2 = d(h), d(h / 2)
    value = (4 * d2 - d1) / 3
    roundoff = 4 * np.finfo(float).eps * max(1.0, abs(char_speed(spec, rho, tol))) / (h / 2)
    return value, abs(d2 - d1) / 3 + roundoff + 1e3 * tol / h, h


def flux_H2(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> float:
    return flux_H2_with_error(spec, rho, tol)[0]


def rankine_hugoniot(spec: RateSpec, lam: float, rho: float, tol: float = DEFAULT_TOL) -> float:
    """Shock speed ``(H(rho) - H(lam)) / (rho - lam)``."""
    if lam == rho:
        raise ValueError("Rankine-Hugoniot speed needs lam != rho")
    return (flux_H(spec, rho, tol) - flux_H(spec, lam, tol)) / (rho - lam)


def evaluate(spec: RateSpec, rho: float, tol: float = DEFAULT_TOL) -> FluxEvaluation:
    m = measure_at_density(spec, rho, tol)
    h2, err, h = flux_H2_with_error(spec, rho, tol)
    return FluxEvaluation(
        rho=rho,
        H=flux_H(spec, rho, tol),
        V=char_speed(spec, rho, tol),
        H2=h2,
        H2_error=err,
        method_meta={"support": [m.lo, m.hi], "tail_mass_bound": m.tail_mass_bound, "step": h,
                     "tol": tol},
    )
