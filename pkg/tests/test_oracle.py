import math
from fractions import Fraction

import numpy as np
import pytest

from deposition.measures import measure_at_density
from deposition.oracle import (StateSpaceTooLarge, brute_force_refresh_dominance, build_chain, count_states,
                               product_weights, stationarity_residual, transient_law, truncation_bound)
from deposition.rates import builtin, jump_rate

ASEP = builtin("asep", p=0.7)


def test_asep_three_sites():
    chain = build_chain(ASEP, 3)
    assert chain.n_states == 8
    out_degree = np.diff(chain.generator.indptr) - 1  # minus the diagonal
    assert out_degree.max() <= 3
    assert not chain.truncated


def test_fixed_total_enumeration():
    chain = build_chain(builtin("zrp-const"), 2, occ_window=(0, 3), total=2)
    assert chain.n_states == 3
    assert count_states(2, (0, 3), 2) == 3
    assert count_states(3, (0, 1)) == 8
    assert count_states(4, (0, 2), 20) == 0


@pytest.mark.parametrize("name", ["asep", "pap-exclusion"])
@pytest.mark.parametrize("L", [3, 4, 5])
def test_generator_rows_and_product_stationarity(builtins, name, L):
    spec, grid = builtins[name]
    chain = build_chain(spec, L)
    G = chain.generator.toarray()
    np.testing.assert_allclose(G.sum(axis=1), 0.0, atol=1e-14)
    assert np.all(G - np.diag(np.diag(G)) >= 0)
    for rho in grid[1:4]:
        assert stationarity_residual(chain, measure_at_density(spec, rho)) < 1e-12


def test_rational_residual_is_exactly_zero():
    spec = builtin("asep", p=Fraction(7, 10))
    chain = build_chain(spec, 5)
    for rho in (Fraction(3, 10), Fraction(3, 5)):
        res = stationarity_residual(chain, {0: 1 - rho, 1: rho}, exact=True)
        assert res == 0


def test_non_product_measure_is_not_stationary():
    chain = build_chain(ASEP, 5)
    w = product_weights(chain, measure_at_density(ASEP, 0.3))
    w[3] *= 1.5
    w /= w.sum()
    assert stationarity_residual(chain, w) > 1e-3


def test_truncated_zero_range_residual_below_tail_bound():
    spec = builtin("zrp-const")
    chain = build_chain(spec, 4, occ_window=(0, 12))
    assert chain.truncated
    m = measure_at_density(spec, 1.0)
    res = stationarity_residual(chain, m)
    assert 0 < res <= truncation_bound(chain, m)


def test_infinite_space_needs_window():
    with pytest.raises(ValueError):
        build_chain(builtin("zrp-const"), 3)
    with pytest.raises(ValueError):
        build_chain(ASEP, 3, occ_window=(0, 2))


def test_state_space_guard():
    with pytest.raises(StateSpaceTooLarge):
        build_chain(builtin("zrp-const"), 8, occ_window=(0, 9))
    with pytest.raises(StateSpaceTooLarge):
        build_chain(ASEP, 6, max_states=10)


def test_transient_law_basics():
    chain = build_chain(ASEP, 4)
    start = np.array([1, 1, 0, 0])
    law0 = transient_law(chain, start, 0.0)
    assert law0[chain.state_index(start)] == 1.0
    dense = transient_law(chain, start, 1.3, method="dense")
    unif = transient_law(chain, start, 1.3, method="uniformization")
    np.testing.assert_allclose(dense, unif, atol=1e-12)
    assert dense.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        transient_law(chain, start, -1.0)
    with pytest.raises(ValueError):
        transient_law(chain, np.ones(chain.n_states), 1.0)


def test_transient_law_converges_to_stationary():
    chain = build_chain(builtin("zrp", f="geom-exp", beta=1.0), 3, occ_window=(0, 4), total=4)
    law = transient_law(chain, np.array([4, 0, 0]), 200.0)
    assert stationarity_residual(chain, law) < 1e-10
    # the fixed-total stationary law is the conditioned product measure
    w = product_weights(chain, measure_at_density(builtin("zrp", f="geom-exp", beta=1.0), 1.0))
    np.testing.assert_allclose(law, w / w.sum(), atol=1e-10)


def test_transient_law_preserves_product_marginals():
    chain = build_chain(ASEP, 4)
    m = measure_at_density(ASEP, 0.3)
    w = product_weights(chain, m)
    law = transient_law(chain, w / w.sum(), 2.0)
    for site in range(4):
        assert law[chain.states[:, site] == 1].sum() == pytest.approx(0.3, abs=1e-12)


def test_refresh_dominance_examples():
    f = jump_rate("geom-exp", beta=1.0)
    r = math.exp(-1)
    for mode in ("y", "z"):
        rep = brute_force_refresh_dominance(f, 0, 1, 0, 2, r, mode)
        assert rep and rep.witness is None and rep.margin >= -1e-12
        assert sum(rep.transformed.values()) == pytest.approx(sum(
            (1 - r) * r ** abs(v) for v in rep.transformed if (v >= 0 if mode == "y" else v <= 0)))
    same = brute_force_refresh_dominance(f, 3, 3, 1, 2, r)
    assert same.holds


def test_refresh_dominance_negative_control():
    rep = brute_force_refresh_dominance(jump_rate("linear"), 0, 1, 0, 2, 0.5)
    assert not rep
    assert rep.witness == 1


def test_refresh_dominance_argument_checks():
    f = jump_rate("geom-exp", beta=1.0)
    with pytest.raises(ValueError):
        brute_force_refresh_dominance(f, 0, 2, 0, 2, 0.3)
    with pytest.raises(ValueError):
        brute_force_refresh_dominance(f, 0, 1, 0, 2, 0.3, mode="w")
