"""Rate functions for the attractive deposition family and its built-in models.

A model is described by the single-site state space ``I`` (bounded by
``omega_min <= 0`` and ``omega_max >= 1``, either possibly infinite), the
deposition / removal rates ``p(y, z)`` and ``q(y, z)`` on a bond whose left
and right sites hold ``y`` and ``z``, and the factorisation
``p(y, z) = s_p(y, z+1) f(y)``, ``q(y, z) = s_q(y+1, z) f(z)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = [
    "StateSpace",
    "JumpRate",
    "RateSpec",
    "Violation",
    "ValidationReport",
    "InvalidParameter",
    "validate",
    "builtin",
    "model_from_descriptor",
    "check_increment_ratio",
    "jump_rate",
    "DEFAULT_WINDOW",
    "DEFAULT_CAP",
]

INF = math.inf
DEFAULT_WINDOW = 12
DEFAULT_CAP = 60
_RTOL = 1e-12


class InvalidParameter(ValueError):
    """Raised when model parameters violate a structural constraint."""


@dataclass(frozen=True)
class StateSpace:
    omega_min: float
    omega_max: float

    def __post_init__(self):
        if not (self.omega_min <= 0 and self.omega_max >= 1):
            raise InvalidParameter(
                f"need omega_min <= 0 < 1 <= omega_max, got [{self.omega_min}, {self.omega_max}]"
            )
        for v in (self.omega_min, self.omega_max):
            if math.isfinite(v) and v != int(v):
                raise InvalidParameter(f"finite bounds must be integers, got {v}")

    @property
    def finite_min(self) -> bool:
        return math.isfinite(self.omega_min)

    @property
    def finite_max(self) -> bool:
        return math.isfinite(self.omega_max)

    @property
    def finite(self) -> bool:
        return self.finite_min and self.finite_max

    def __contains__(self, z) -> bool:
        return self.omega_min <= z <= self.omega_max

    def window(self, half_width: int = DEFAULT_WINDOW) -> tuple[int, int]:
        """Integer occupancies ``[max(omega_min, -w), min(omega_max, w)]``."""
        lo = int(max(self.omega_min, -half_width))
        hi = int(min(self.omega_max, half_width))
        return lo, hi


@dataclass(frozen=True, eq=False)
class JumpRate:
    """A nondecreasing function ``f`` on ``I`` with known limits.

    ``increment(z)`` returns ``f(z) - f(z-1)`` without the cancellation that
    plagues the plain difference once ``f`` saturates.
    """

    fn: Callable[[int], float]
    name: str = "custom"
    limit_hi: float = INF
    limit_lo: float = 0.0
    inc: Optional[Callable[[int], float]] = None
    params: dict = field(default_factory=dict)

    def __call__(self, z: int) -> float:
        return self.fn(int(z))

    def increment(self, z: int) -> float:
        if self.inc is not None:
            return self.inc(int(z))
        return self.fn(int(z)) - self.fn(int(z) - 1)

    def diff(self, lo: int, hi: int) -> float:
        """``f(hi) - f(lo)`` summed from increments when ``hi - lo`` is small."""
        if hi == lo:
            return 0.0
        if hi < lo:
            return -self.diff(hi, lo)
        if self.inc is None or hi - lo > 64:
            return self.fn(hi) - self.fn(lo)
        return math.fsum(self.inc(k) for k in range(lo + 1, hi + 1))


def _geom_exp(beta: float, vartheta: float = 1.0) -> JumpRate:
    if beta <= 0 or vartheta < 1:
        raise InvalidParameter("geom-exp needs beta > 0 and vartheta >= 1")

    def fn(z):
        return -math.expm1(-beta * z**vartheta) if z > 0 else 0.0

    def inc(z):
        if z <= 0:
            return 0.0
        a = beta * (z - 1) ** vartheta
        return math.exp(-a) * -math.expm1(-(beta * z**vartheta - a))

    return JumpRate(fn, "geom-exp", 1.0, 0.0, inc, {"beta": beta, "vartheta": vartheta})


def _const() -> JumpRate:
    return JumpRate(lambda z: 1.0 if z > 0 else 0.0, "const", 1.0, 0.0,
                    lambda z: 1.0 if z == 1 else 0.0)


def _linear(slope: float = 1.0) -> JumpRate:
    if slope <= 0:
        raise InvalidParameter("linear f needs a positive slope")
    return JumpRate(lambda z: slope * z if z > 0 else 0.0, "linear", INF, 0.0,
                    lambda z: slope if z > 0 else 0.0, {"slope": slope})


def _table(values, rule: str = "constant-after", ratio: Optional[float] = None) -> JumpRate:
    """``f`` from an explicit table ``f(0..n)`` and an asymptotic rule.

    ``constant-after`` keeps ``f(n)`` for ``z > n``; ``geometric-increment``
    continues the last increment with ratio ``ratio`` (default: the ratio of
    the final two increments).
    """
    vals = [float(v) for v in values]
    if len(vals) < 2 or vals[0] != 0.0 or vals[1] <= 0:
        raise InvalidParameter("table must start f(0)=0 < f(1)")
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise InvalidParameter("table f must be nondecreasing")
    n = len(vals) - 1
    if rule == "constant-after":
        limit = vals[-1]

        def inc(z):
            return vals[z] - vals[z - 1] if 1 <= z <= n else 0.0
    elif rule == "geometric-increment":
        last = vals[-1] - vals[-2]
        if ratio is None:
            if n < 2 or vals[-2] - vals[-3] <= 0:
                raise InvalidParameter("geometric-increment needs a ratio or two positive increments")
            ratio = last / (vals[-2] - vals[-3])
        if not 0 <= ratio < 1:
            raise InvalidParameter("geometric-increment ratio must lie in [0, 1)")
        limit = vals[-1] + last * ratio / (1 - ratio)

        def inc(z):
            if z <= 0:
                return 0.0
            if z <= n:
                return vals[z] - vals[z - 1]
            return last * ratio ** (z - n)
    else:
        raise InvalidParameter(f"unknown asymptotic rule {rule!r}")

    def fn(z):
        if z <= 0:
            return 0.0
        if z <= n:
            return vals[z]
        if rule == "constant-after":
            return vals[-1]
        return limit - last * ratio ** (z - n + 1) / (1 - ratio)

    return JumpRate(fn, "table", limit, 0.0, inc, {"table": vals, "rule": rule, "ratio": ratio})


def jump_rate(name: str, **params) -> JumpRate:
    """Named jump-rate families for zero range models."""
    if name == "geom-exp":
        return _geom_exp(float(params.get("beta", 1.0)), float(params.get("vartheta", 1.0)))
    if name == "const":
        return _const()
    if name == "linear":
        return _linear(float(params.get("slope", 1.0)))
    if name == "table":
        return _table(params["table"], params.get("rule", "constant-after"), params.get("ratio"))
    raise InvalidParameter(f"unknown jump rate family {name!r}")


@dataclass(frozen=True, eq=False)
class RateSpec:
    """Immutable model definition.

    ``rate_upper_bound`` is ``sup (p + q)`` over ``I x I`` (``inf`` when the
    rates are unbounded); ``occupancy_cap`` bounds ``|omega_i|`` in
    simulations of models with infinite ``I``.
    """

    name: str
    space: StateSpace
    p: Callable[[int, int], float]
    q: Callable[[int, int], float]
    f: JumpRate
    s_p: Callable[[int, int], float]
    s_q: Callable[[int, int], float]
    asymmetry: str
    rate_upper_bound: float
    occupancy_cap: Optional[int] = None
    params: dict = field(default_factory=dict)
    _tables: dict = field(default_factory=dict, repr=False)

    @property
    def theta_hi(self) -> float:
        if self.space.finite_max:
            return INF
        lim = self.f.limit_hi
        return math.log(lim) if math.isfinite(lim) else INF

    @property
    def theta_lo(self) -> float:
        if self.space.finite_min:
            return -INF
        lim = self.f.limit_lo
        return math.log(lim) if lim > 0 else -INF

    @property
    def totally_asymmetric(self) -> bool:
        return self.asymmetry != "both"

    def sim_bounds(self, need_lo: Optional[int] = None, need_hi: Optional[int] = None) -> tuple[int, int]:
        """Occupancy range covered by simulation rate tables."""
        cap = self.occupancy_cap if self.occupancy_cap is not None else DEFAULT_CAP
        lo = int(self.space.omega_min) if self.space.finite_min else -cap
        hi = int(self.space.omega_max) if self.space.finite_max else cap
        if need_lo is not None and need_lo < lo:
            lo = need_lo
        if need_hi is not None and need_hi > hi:
            hi = need_hi
        return lo, hi

    def tables(self, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
        """Memoised ``p`` and ``q`` as ``(hi-lo+1)^2`` float arrays indexed ``[y-lo, z-lo]``."""
        key = (lo, hi)
        if key not in self._tables:
            n = hi - lo + 1
            pt = np.zeros((n, n))
            qt = np.zeros((n, n))
            for y in range(lo, hi + 1):
                for z in range(lo, hi + 1):
                    pt[y - lo, z - lo] = float(self.p(y, z))
                    qt[y - lo, z - lo] = float(self.q(y, z))
            pt.setflags(write=False)
            qt.setflags(write=False)
            self._tables[key] = (pt, qt)
        return self._tables[key]

    def table_bound(self, lo: int, hi: int) -> float:
        pt, qt = self.tables(lo, hi)
        return float(pt.max() + qt.max())


# ---------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    condition: str
    witness: tuple
    detail: str = ""


@dataclass
class ValidationReport:
    window: tuple[int, int]
    violations: list[Violation] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def conditions(self) -> set[str]:
        return {v.condition for v in self.violations}


def _close(a, b) -> bool:
    return math.isclose(a, b, rel_tol=_RTOL, abs_tol=1e-300)


def _le(a, b) -> bool:
    return a <= b or _close(a, b)


def validate(spec: RateSpec, check_range: Optional[int] = None) -> ValidationReport:
    """Check boundary vanishing, attractivity, the three-cycle identity and the
    factorisation on a finite occupancy window; every failure is reported with
    its witness."""
    space = spec.space
    lo, hi = space.window(DEFAULT_WINDOW if check_range is None else check_range)
    rep = ValidationReport((lo, hi))
    if not space.finite:
        rep.notes.append(f"infinite state space validated on window [{lo}, {hi}] only")
    occ = range(lo, hi + 1)
    p, q, f = spec.p, spec.q, spec.f

    # boundary vanishing and the positivity alternative
    for y in occ:
        for z in occ:
            if space.finite_min and y == space.omega_min and p(y, z) != 0:
                rep.violations.append(Violation("boundary", (y, z), "p(omega_min, .) != 0"))
            if space.finite_max and z == space.omega_max and p(y, z) != 0:
                rep.violations.append(Violation("boundary", (y, z), "p(., omega_max) != 0"))
            if space.finite_max and y == space.omega_max and q(y, z) != 0:
                rep.violations.append(Violation("boundary", (y, z), "q(omega_max, .) != 0"))
            if space.finite_min and z == space.omega_min and q(y, z) != 0:
                rep.violations.append(Violation("boundary", (y, z), "q(., omega_min) != 0"))
            if p(y, z) < 0 or q(y, z) < 0:
                rep.violations.append(Violation("boundary", (y, z), "negative rate"))
    if spec.asymmetry == "p-only" and any(q(y, z) != 0 for y in occ for z in occ):
        rep.violations.append(Violation("boundary", (), "declared p-only but q is not identically zero"))
    if spec.asymmetry == "q-only" and any(p(y, z) != 0 for y in occ for z in occ):
        rep.violations.append(Violation("boundary", (), "declared q-only but p is not identically zero"))

    # attractivity, all four directions
    for y in occ:
        for z in range(lo, hi):
            if not _le(p(z, y), p(z + 1, y)):
                rep.violations.append(Violation("attractivity", (y, z), "p(z+1, y) < p(z, y)"))
            if not _le(p(y, z + 1), p(y, z)):
                rep.violations.append(Violation("attractivity", (y, z), "p(y, z+1) > p(y, z)"))
            if not _le(q(z + 1, y), q(z, y)):
                rep.violations.append(Violation("attractivity", (y, z), "q(z+1, y) > q(z, y)"))
            if not _le(q(y, z), q(y, z + 1)):
                rep.violations.append(Violation("attractivity", (y, z), "q(y, z+1) < q(y, z)"))

    # three-cycle identity
    for x, y, z in itertools.product(occ, repeat=3):
        lhs = p(x, y) + p(y, z) + p(z, x) + q(x, y) + q(y, z) + q(z, x)
        rhs = p(x, z) + p(z, y) + p(y, x) + q(x, z) + q(z, y) + q(y, x)
        if not math.isclose(lhs, rhs, rel_tol=1e-10, abs_tol=1e-12):
            rep.violations.append(Violation("three-cycle", (x, y, z), f"{lhs!r} != {rhs!r}"))

    # factorisation and the conditions on f, s_p, s_q
    def sp(y, z):
        return 0.0 if (y > space.omega_max or z > space.omega_max) else spec.s_p(y, z)

    def sq(y, z):
        return 0.0 if (y > space.omega_max or z > space.omega_max) else spec.s_q(y, z)

    for y in occ:
        for z in occ:
            if not _close(p(y, z), sp(y, z + 1) * f(y)):
                rep.violations.append(Violation("factorization", (y, z), "p != s_p(y, z+1) f(y)"))
            if not _close(q(y, z), sq(y + 1, z) * f(z)):
                rep.violations.append(Violation("factorization", (y, z), "q != s_q(y+1, z) f(z)"))
            if not _close(spec.s_p(y, z), spec.s_p(z, y)) or not _close(spec.s_q(y, z), spec.s_q(z, y)):
                rep.violations.append(Violation("factorization", (y, z), "s_p or s_q not symmetric"))
    if space.finite_min and f(int(space.omega_min)) != 0:
        rep.violations.append(Violation("factorization", (int(space.omega_min),), "f(omega_min) != 0"))
    for z in occ:
        if z > space.omega_min and not f(z) > 0:
            rep.violations.append(Violation("factorization", (z,), "f(z) <= 0 above omega_min"))
        if z < hi and f(z + 1) < f(z):
            rep.violations.append(Violation("factorization", (z,), "f decreasing"))
    return rep


# ------------------------------------------------------------------ built-ins


def _asep(p=1.0, q=None) -> RateSpec:
    if q is None:
        q = 1 - p
    if not (0 <= p <= 1 and 0 <= q <= 1):
        raise InvalidParameter("ASEP needs p, q in [0, 1]")
    if p == q:
        raise InvalidParameter("ASEP needs p != q (symmetric processes are out of scope)")
    f = JumpRate(lambda z: 1 if z == 1 else 0, "asep", INF, 0.0, None)
    return RateSpec(
        name="asep",
        space=StateSpace(0, 1),
        p=lambda y, z: p * (y == 1 and z == 0),
        q=lambda y, z: q * (y == 0 and z == 1),
        f=f,
        s_p=lambda y, z: p * (y == 1 and z == 1),
        s_q=lambda y, z: q * (y == 1 and z == 1),
        asymmetry="p-only" if q == 0 else ("q-only" if p == 0 else "both"),
        rate_upper_bound=float(max(p, q)),
        params={"p": p, "q": q},
    )


def _pap(p=1.0, c=0.5, a=1.0, q=None) -> RateSpec:
    if q is None:
        q = 1 - p
    if not (c > 0 and a > 0 and c <= a / 2):
        raise InvalidParameter("particle-antiparticle exclusion needs 0 < c <= a/2")
    if not (0 <= p <= 1 and 0 <= q <= 1) or p == q:
        raise InvalidParameter("need p, q in [0, 1] with p != q")
    fvals = {-1: 0, 0: c, 1: a}
    f = JumpRate(lambda z: fvals.get(z, 0), "pap", INF, 0.0, None)
    sp_tab = {(0, 1): p, (1, 0): p, (0, 0): p * a / (2 * c), (1, 1): p / 2}
    sq_tab = {(0, 1): q, (1, 0): q, (0, 0): q * a / (2 * c), (1, 1): q / 2}
    p_tab = {(0, 0): p * c, (0, -1): p * a / 2, (1, 0): p * a / 2, (1, -1): p * a}
    q_tab = {(0, 0): q * c, (-1, 0): q * a / 2, (0, 1): q * a / 2, (-1, 1): q * a}
    return RateSpec(
        name="pap-exclusion",
        space=StateSpace(-1, 1),
        p=lambda y, z: p_tab.get((y, z), 0),
        q=lambda y, z: q_tab.get((y, z), 0),
        f=f,
        s_p=lambda y, z: sp_tab.get((y, z), 0),
        s_q=lambda y, z: sq_tab.get((y, z), 0),
        asymmetry="p-only" if q == 0 else ("q-only" if p == 0 else "both"),
        rate_upper_bound=float(max(p_tab.get(k, 0) + q_tab.get(k, 0) for k in set(p_tab) | set(q_tab))),
        params={"p": p, "q": q, "c": c, "a": a},
    )


def _zrp(f: JumpRate, p=1.0, q=None, cap=DEFAULT_CAP, name="zrp") -> RateSpec:
    if q is None:
        q = 1 - p
    if not (0 <= p <= 1 and 0 <= q <= 1) or p == q:
        raise InvalidParameter("need p, q in [0, 1] with p != q")
    if f(0) != 0 or not f(1) > 0:
        raise InvalidParameter("zero range f needs f(0) = 0 < f(1)")
    bound = (p + q) * f.limit_hi
    return RateSpec(
        name=name,
        space=StateSpace(0, INF),
        p=lambda y, z: p * f(y),
        q=lambda y, z: q * f(z),
        f=f,
        s_p=lambda y, z: p,
        s_q=lambda y, z: q,
        asymmetry="p-only" if q == 0 else ("q-only" if p == 0 else "both"),
        rate_upper_bound=float(bound),
        occupancy_cap=cap,
        params={"p": p, "q": q, "f": f.name, **f.params},
    )


def _bricklayers(beta=1.0, p=1.0, q=None, rate_upper_bound=INF, cap=DEFAULT_CAP) -> RateSpec:
    """Bricklayers with ``f(z) = exp(beta (z - 1/2))``, which satisfies
    ``f(z) f(1-z) = 1``."""
    if q is None:
        q = 1 - p
    if beta <= 0:
        raise InvalidParameter("bricklayers needs beta > 0")
    if not (0 <= p <= 1 and 0 <= q <= 1) or p == q:
        raise InvalidParameter("need p, q in [0, 1] with p != q")

    def fn(z):
        return math.exp(beta * (z - 0.5))

    f = JumpRate(fn, "bricklayers-exp", INF, 0.0, None, {"beta": beta})
    return RateSpec(
        name="bricklayers",
        space=StateSpace(-INF, INF),
        p=lambda y, z: p * fn(y) + p * fn(-z),
        q=lambda y, z: q * fn(-y) + q * fn(z),
        f=f,
        s_p=lambda y, z: p + p / (fn(y) * fn(z)),
        s_q=lambda y, z: q + q / (fn(y) * fn(z)),
        asymmetry="p-only" if q == 0 else ("q-only" if p == 0 else "both"),
        rate_upper_bound=float(rate_upper_bound),
        occupancy_cap=cap,
        params={"p": p, "q": q, "beta": beta},
    )


def builtin(name: str, **params) -> RateSpec:
    """Construct a built-in model.

    ``asep`` (p, q), ``pap-exclusion`` (p, c, a), ``zrp`` (f family name plus
    its parameters, p), ``zrp-const`` (p) and ``bricklayers`` (beta, p,
    rate_upper_bound, cap).
    """
    params = dict(params)
    if name == "asep":
        return _asep(params.pop("p", 1.0), params.pop("q", None))
    if name == "pap-exclusion":
        return _pap(params.pop("p", 1.0), params.pop("c", 0.5), params.pop("a", 1.0), params.pop("q", None))
    if name == "zrp-const":
        return _zrp(_const(), params.pop("p", 1.0), params.pop("q", None),
                    params.pop("cap", DEFAULT_CAP), name="zrp-const")
    if name == "zrp":
        p = params.pop("p", 1.0)
        q = params.pop("q", None)
        cap = params.pop("cap", DEFAULT_CAP)
        f = params.pop("f", "geom-exp")
        if not isinstance(f, JumpRate):
            if callable(f):
                f = JumpRate(f, "custom", params.pop("f_limit", INF))
            else:
                f = jump_rate(f, **params)
        return _zrp(f, p, q, cap)
    if name == "bricklayers":
        return _bricklayers(params.pop("beta", 1.0), params.pop("p", 1.0), params.pop("q", None),
                            params.pop("rate_upper_bound", INF), params.pop("cap", DEFAULT_CAP))
    raise InvalidParameter(f"unknown model {name!r}")


def model_from_descriptor(desc: dict) -> RateSpec:
    """Build from ``{"model": ..., "params": {...}}`` as used in experiment configs."""
    if "model" not in desc:
        raise InvalidParameter("model descriptor lacks 'model'")
    params = dict(desc.get("params", {}))
    return builtin(desc["model"], **params)


# ------------------------------------------------------- exponential slope test


@dataclass(frozen=True)
class SlopeCheck:
    holds: bool
    r: float
    detail: str = ""


def check_increment_ratio(f: JumpRate | Callable[[int], float], z_window: int = 30) -> SlopeCheck:
    """Check ``f(0) = 0 < f(1)``, monotonicity and an increment ratio bound
    ``(f(z+1) - f(z)) / (f(z) - f(z-1)) <= r < 1`` on ``1 <= z <= z_window``.

    Returns the smallest ``r`` consistent with the window (0 when every ratio
    is vacuous or zero, as for a rate that is constant above 1).
    """
    if z_window < 2:
        raise InvalidParameter("z_window must be at least 2")
    if not isinstance(f, JumpRate):
        f = JumpRate(f)
    if f(0) != 0 or not f(1) > 0:
        return SlopeCheck(False, float("nan"), "need f(0) = 0 < f(1)")
    incs = [f.increment(z) for z in range(1, z_window + 2)]
    if any(d < 0 for d in incs):
        return SlopeCheck(False, float("nan"), "f not nondecreasing")
    r = 0.0
    for z in range(1, z_window + 1):
        den, num = incs[z - 1], incs[z]
        if den > 0:
            r = max(r, num / den)
        elif num > 0:
            return SlopeCheck(False, INF, f"increment grows from zero at z={z}")
    if r >= 1:
        return SlopeCheck(False, r, "increment ratio not below 1")
    return SlopeCheck(True, r)
