"""Exact small-instance computations used as ground truth.

* :func:`build_chain` enumerates ring configurations and assembles the
  generator of the deposition dynamics as a sparse matrix;
* :func:`stationarity_residual` evaluates ``pi G`` for product weights
  (optionally in exact rational arithmetic);
* :func:`transient_law` propagates a law over the chain;
* :func:`brute_force_refresh_dominance` computes the exact law of a
  geometrically distributed label after one walker refresh and checks its
  stochastic domination.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.stats import poisson

from .measures import DiscreteMeasure
from .microconcavity import y_probability, z_probability
from .rates import RateSpec

__all__ = [
    "StateSpaceTooLarge",
    "ExactChain",
    "DominanceReport",
    "build_chain",
    "count_states",
    "product_weights",
    "stationarity_residual",
    "truncation_bound",
    "transient_law",
    "brute_force_refresh_dominance",
    "MAX_STATES",
    "DENSE_THRESHOLD",
]

MAX_STATES = 10 ** 6
DENSE_THRESHOLD = 5000


class StateSpaceTooLarge(ValueError):
    """The enumerated state space would exceed :data:`MAX_STATES`."""


@dataclass
class ExactChain:
    """Ring configurations and the generator of the deposition dynamics.

    ``transitions`` lists ``(from, to, rate)`` triples with the rates exactly
    as returned by the model (``Fraction`` rates survive for rational
    arithmetic); ``generator`` is the float CSR matrix with zero row sums.
    ``truncated_rate[s]`` is the total rate of transitions from state ``s``
    that would leave the occupancy window (dropped from the generator).
    """

    spec: RateSpec
    L: int
    window: tuple[int, int]
    total: Optional[int]
    states: np.ndarray
    index: dict
    transitions: list
    generator: sp.csr_matrix
    truncated_rate: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def truncated(self) -> bool:
        return bool(np.any(self.truncated_rate > 0))

    @property
    def max_exit_rate(self) -> float:
        return float(-self.generator.diagonal().min()) if self.n_states else 0.0

    def state_index(self, occ: Sequence[int]) -> int:
        return self.index[tuple(int(v) for v in occ)]


def count_states(L: int, window: tuple[int, int], total: Optional[int] = None) -> int:
    """Number of ring configurations with occupancies in ``window`` (and sum ``total``)."""
    lo, hi = window
    w = hi - lo + 1
    if total is None:
        return w ** L
    # compositions of total - L*lo into L parts in [0, w-1]
    target = total - L * lo
    if target < 0:
        return 0
    ways = [1] + [0] * target
    for _ in range(L):
        new = [0] * (target + 1)
        run = 0
        for s in range(target + 1):
            run += ways[s]
            if s - w >= 0:
                run -= ways[s - w]
            new[s] = run
        ways = new
    return ways[target]


def build_chain(spec: RateSpec, L: int, occ_window: Optional[tuple[int, int]] = None,
                total: Optional[int] = None, max_states: int = MAX_STATES) -> ExactChain:
    """Enumerate the ring of ``L`` sites and build the generator.

    ``occ_window`` defaults to the state space ``I`` when it is finite.  Bond
    ``i`` joins sites ``i`` and ``i + 1 mod L``; a deposition moves one unit
    of occupancy from ``i`` to ``i + 1`` at rate ``p``, a removal the reverse
    at rate ``q``.
    """
    space = spec.space
    if occ_window is None:
        if not (space.finite_min and space.finite_max):
            raise ValueError("models with infinite state space need an explicit occ_window")
        occ_window = (int(space.omega_min), int(space.omega_max))
    lo, hi = int(occ_window[0]), int(occ_window[1])
    if lo > hi or L < 2:
        raise ValueError("need L >= 2 and a nonempty window")
    if lo < space.omega_min or hi > space.omega_max:
        raise ValueError("occupancy window exceeds the model's state space")
    n = count_states(L, (lo, hi), total)
    if n > max_states:
        raise StateSpaceTooLarge(f"{n} states exceed the limit {max_states}")
    rng_vals = range(lo, hi + 1)
    states = [s for s in itertools.product(rng_vals, repeat=L) if total is None or sum(s) == total]
    index = {s: k for k, s in enumerate(states)}
    transitions = []
    truncated = np.zeros(len(states))
    for k, s in enumerate(states):
        for i in range(L):
            j = (i + 1) % L
            y, z = s[i], s[j]
            for rate_fn, dy in ((spec.p, -1), (spec.q, 1)):
                r = rate_fn(y, z)
                if r == 0:
                    continue
                t = list(s)
                t[i] += dy
                t[j] -= dy
                if not (lo <= t[i] <= hi and lo <= t[j] <= hi):
                    truncated[k] += float(r)
                    continue
                transitions.append((k, index[tuple(t)], r))
    N = len(states)
    if transitions:
        rows, cols, vals = zip(*transitions)
        off = sp.coo_matrix((np.array(vals, dtype=float), (rows, cols)), shape=(N, N)).tocsr()
    else:
        off = sp.csr_matrix((N, N))
    off.sum_duplicates()
    exit_rate = np.asarray(off.sum(axis=1)).ravel()
    G = (off - sp.diags(exit_rate)).tocsr()
    return ExactChain(spec, L, (lo, hi), total, np.array(states, dtype=np.int64).reshape(N, L), index,
                      transitions, G, truncated)


def product_weights(chain: ExactChain, marginal, exact: bool = False):
    """Unnormalised product weights ``prod_i m(x_i)`` on the chain's states.

    ``marginal`` is a :class:`DiscreteMeasure`, a mapping ``z -> mass`` or a
    callable.  With ``exact=True`` the masses are kept as given (use
    ``Fraction`` masses for rational arithmetic) and a list is returned.
    """
    if isinstance(marginal, dict):
        m = lambda z: marginal.get(int(z), 0)
    else:
        m = marginal
    if exact:
        out = []
        for s in chain.states:
            w = Fraction(1)
            for v in s:
                w *= m(int(v))
            out.append(w)
        return out
    table = {z: float(m(z)) for z in range(chain.window[0], chain.window[1] + 1)}
    return np.array([math.prod(table[int(v)] for v in s) for s in chain.states])


def stationarity_residual(chain: ExactChain, product_measure, exact: bool = False):
    """``max_x |(pi G)(x)|`` for the product weights of ``product_measure``.

    ``product_measure`` is a single-site marginal (see :func:`product_weights`)
    or an explicit weight vector over the chain's states.  With ``exact=True``
    the computation uses the exact transition rates and masses (pass
    ``Fraction`` values to obtain a rational residual, exactly 0 for a
    stationary product measure).
    """
    if isinstance(product_measure, (np.ndarray, list)) and len(product_measure) == chain.n_states:
        pi = product_measure
    else:
        pi = product_weights(chain, product_measure, exact)
    if exact:
        acc = [Fraction(0)] * chain.n_states
        for a, b, r in chain.transitions:
            flow = Fraction(pi[a]) * Fraction(r)
            acc[a] -= flow
            acc[b] += flow
        return max(abs(v) for v in acc)
    pi = np.asarray(pi, dtype=float)
    res = chain.generator.T @ pi
    return float(np.abs(res).max())


def truncation_bound(chain: ExactChain, marginal: DiscreteMeasure) -> float:
    """Upper bound on the residual created by truncating at the window's top.

    The affected states carry a site at the window maximum (outflow lost) or
    receive flow from a state with a site one above it (inflow lost); each has
    at most ``2L`` such transitions of rate at most the model bound, and the
    product weight of a state is at most any single factor.
    """
    hi = chain.window[1]
    R = chain.spec.rate_upper_bound
    if not math.isfinite(R):
        R = max(chain.max_exit_rate, 1.0)
    return 2 * chain.L * R * max(marginal(hi), marginal(hi + 1))


def transient_law(chain: ExactChain, initial, t: float, method: str = "auto") -> np.ndarray:
    """Law of the chain at time ``t`` started from ``initial``.

    ``initial`` is a probability vector over states or a single configuration.
    ``method`` is ``"dense"`` (matrix exponential by scaling and squaring),
    ``"uniformization"`` (Poisson-weighted powers of ``I + G / Lambda`` with
    ``Lambda = 1.1 * max exit rate``) or ``"auto"`` (dense below
    :data:`DENSE_THRESHOLD` states).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    N = chain.n_states
    init = np.asarray(initial, dtype=float)
    if init.shape != (N,):
        if init.ndim == 1 and init.shape[0] == chain.L:
            vec = np.zeros(N)
            vec[chain.state_index(init.astype(int))] = 1.0
            init = vec
        else:
            raise ValueError("initial must be a law over states or one configuration")
    if abs(init.sum() - 1) > 1e-12 or np.any(init < 0):
        raise ValueError("initial law must be a probability vector")
    if t == 0:
        return init.copy()
    if method == "auto":
        method = "dense" if N < DENSE_THRESHOLD else "uniformization"
    if method == "dense":
        law = init @ scipy.linalg.expm(chain.generator.toarray() * t)
    elif method == "uniformization":
        lam = 1.1 * chain.max_exit_rate
        if lam == 0:
            return init.copy()
        P = (sp.identity(N, format="csr") + chain.generator / lam).T.tocsr()
        mean = lam * t
        k_max = int(poisson.isf(1e-16, mean)) + 1
        weights = poisson.pmf(np.arange(k_max + 1), mean)
        v = init.copy()
        law = weights[0] * v
        for k in range(1, k_max + 1):
            v = P @ v
            law = law + weights[k] * v
        law = law / weights.sum()
    else:
        raise ValueError(f"unknown method {method!r}")
    law = np.clip(law, 0.0, None)
    return law / law.sum()


# ---------------------------------------------------------- refresh oracle


@dataclass(frozen=True)
class DominanceReport:
    """Outcome of an exact dominance check.

    ``margin`` is ``min_m (nu{>= m} - nu*{>= m})``; ``witness`` is the first
    level where the transformed tail exceeds the reference tail (or ``None``).
    """

    holds: bool
    margin: float
    witness: Optional[int]
    transformed: dict

    def __bool__(self):
        return self.holds


def _nu(r, m):
    if m < 0:
        return 0.0
    return (1 - r) * r ** m


def brute_force_refresh_dominance(f, a: int, b: int, eta: int, omega: int, r: float,
                                  mode: str = "y", atol: float = 1e-12) -> DominanceReport:
    """Exact check that one refresh keeps a geometric label law dominated.

    ``mode="y"``: ``Y ~ nu`` (``nu(m) = (1-r) r^m``, ``m >= 0``); values in
    ``[a, b]`` are replaced by ``a`` or ``b`` with the walker-``y``
    probabilities; checks ``P(Y* >= m) <= nu{>= m}`` for all ``m``.
    ``mode="z"``: ``Z ~ -nu``; values in ``[a, b]`` become ``b - 1`` or ``b``
    with the walker-``z`` probabilities; checks ``P(-Z* >= m) <= nu{>= m}``.
    """
    if omega - eta != b - a + 1:
        raise ValueError("need omega - eta = b - a + 1")
    if mode not in ("y", "z"):
        raise ValueError("mode must be 'y' or 'z'")
    sign = 1 if mode == "y" else -1
    # labels with mass: sign * label >= 0; the operation touches [a, b] only
    lo = min(a, b - 1, 0) if mode == "z" else min(a, 0)
    hi = max(b, 0)
    pts = range(lo - 1, hi + 2)
    law = {v: _nu(r, sign * v) for v in pts}
    inside = sum(law[v] for v in range(a, b + 1))
    new = {v: (0.0 if a <= v <= b else law[v]) for v in pts}
    if mode == "y":
        pa = float(y_probability(f, omega, eta))
        new[a] += pa * inside
        new[b] += (1 - pa) * inside
    else:
        pb = float(z_probability(f, omega, eta))
        new[b - 1] += pb * inside
        new[b] += (1 - pb) * inside
    # tails of sign * label; levels beyond the touched range agree exactly
    levels = range(0, max(abs(lo), abs(hi)) + 3)
    margin = math.inf
    witness = None
    for m in levels:
        t_new = sum(w for v, w in new.items() if sign * v >= m)
        t_ref = sum(w for v, w in law.items() if sign * v >= m)
        gap = t_ref - t_new
        if gap < margin:
            margin = gap
        if gap < -atol and witness is None:
            witness = m
    return DominanceReport(witness is None, float(margin), witness, new)
