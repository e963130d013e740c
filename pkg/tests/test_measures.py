import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deposition.measures import (DominationViolated, ThetaOutOfRange, cov_with_omega,
                                 density_of_theta, dominance_check, measure_at_density,
                                 monotone_couple, seed_measure, shifted, theta_of_density, tilted,
                                 variance)
from deposition.rates import builtin

NAMES = ["asep", "pap-exclusion", "zrp", "zrp-const", "bricklayers"]


def test_asep_symmetric_point():
    spec = builtin("asep")
    m = tilted(spec, 0.0)
    np.testing.assert_allclose(m.pmf, [0.5, 0.5], atol=1e-15)
    assert density_of_theta(m) == pytest.approx(0.5, abs=1e-15)
    assert theta_of_density(spec, 0.5) == pytest.approx(0.0, abs=1e-12)
    assert variance(m) == pytest.approx(0.25, abs=1e-15)


@pytest.mark.parametrize("rho", [0.1, 0.37, 0.9])
def test_asep_logit(rho):
    assert theta_of_density(builtin("asep"), rho) == pytest.approx(math.log(rho / (1 - rho)), abs=1e-10)


@pytest.mark.parametrize("theta", [-2.0, -0.7, -0.05])
def test_constant_zrp_is_geometric(theta):
    spec = builtin("zrp-const")
    m = tilted(spec, theta)
    z = m.support
    np.testing.assert_allclose(m.pmf, (1 - math.exp(theta)) * np.exp(theta * z), rtol=1e-9, atol=1e-14)
    assert m.tail_mass_bound <= 1e-12
    assert density_of_theta(m) == pytest.approx(math.exp(theta) / (1 - math.exp(theta)), rel=1e-9)


def test_constant_zrp_theta_out_of_range():
    with pytest.raises(ThetaOutOfRange):
        tilted(builtin("zrp-const"), 0.1)


def test_constant_zrp_unit_density():
    spec = builtin("zrp-const")
    assert theta_of_density(spec, 1.0) == pytest.approx(math.log(0.5), abs=1e-10)
    assert variance(measure_at_density(spec, 1.0)) == pytest.approx(2.0, rel=1e-9)


def test_bricklayers_centered_at_zero():
    spec = builtin("bricklayers", beta=2.0, rate_upper_bound=1e4)
    m = tilted(spec, 0.0)
    assert density_of_theta(m) == pytest.approx(0.0, abs=1e-12)
    for z in range(1, 5):
        assert m(z) == pytest.approx(m(-z), rel=1e-10)


@pytest.mark.parametrize("name", NAMES)
def test_round_trip(builtins, name):
    spec, grid = builtins[name]
    for rho in grid:
        theta = theta_of_density(spec, rho)
        assert abs(density_of_theta(tilted(spec, theta)) - rho) < 1e-10
        assert theta_of_density(spec, density_of_theta(tilted(spec, theta))) == pytest.approx(theta, abs=1e-10)


def _fd(fun, x, h=1e-5):
    return (fun(x + h) - fun(x - h)) / (2 * h)


@pytest.mark.parametrize("name", NAMES)
def test_variance_is_density_derivative(builtins, name):
    spec, grid = builtins[name]
    for rho in grid:
        theta = theta_of_density(spec, rho)
        fd = _fd(lambda t: density_of_theta(tilted(spec, t)), theta)
        assert fd == pytest.approx(variance(tilted(spec, theta)), rel=1e-6)


@pytest.mark.parametrize("name", NAMES)
def test_covariance_is_expectation_derivative(builtins, name):
    spec, grid = builtins[name]
    for phi in (lambda w: w, lambda w: w * w, lambda w: spec.f(w)):
        for rho in grid[1:4]:
            theta = theta_of_density(spec, rho)
            fd = _fd(lambda t: tilted(spec, t).expect(phi), theta)
            assert fd == pytest.approx(cov_with_omega(tilted(spec, theta), phi), rel=1e-6, abs=1e-9)


def test_covariance_examples():
    spec = builtin("asep")
    m = measure_at_density(spec, 0.3)
    assert cov_with_omega(m, lambda w: 4.0) == pytest.approx(0.0, abs=1e-15)
    assert cov_with_omega(m, lambda w: w) == pytest.approx(variance(m))
    assert cov_with_omega(m, spec.f) == pytest.approx(0.21, abs=1e-12)


@pytest.mark.parametrize("rho", [0.2, 0.5, 0.8])
def test_asep_seed_is_point_mass(rho):
    s = seed_measure(builtin("asep"), rho)
    assert s(0) == pytest.approx(1.0)
    assert s(1) == 0.0


@pytest.mark.parametrize("name", ["zrp", "zrp-const", "asep"])
def test_seed_normalisation(builtins, name):
    spec, grid = builtins[name]
    for rho in grid:
        s = seed_measure(spec, rho)
        assert abs(s.renormalization) < 1e-10
        assert np.all(s.pmf >= 0)
        z = s.support
        # nonincreasing above the density
        tail = s.pmf[z >= rho]
        assert np.all(np.diff(tail) <= 1e-15)


def test_seed_finite_top_has_room():
    spec = builtin("pap-exclusion", c=0.3)
    s = seed_measure(spec, 0.2)
    assert s(1) == 0.0
    assert s.pmf.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("name", NAMES)
def test_dominance_in_density(builtins, name):
    spec, grid = builtins[name]
    for i, lam in enumerate(grid):
        for rho in grid[i + 1:]:
            assert dominance_check(measure_at_density(spec, lam), measure_at_density(spec, rho))
            assert dominance_check(seed_measure(spec, lam), seed_measure(spec, rho))
        m = measure_at_density(spec, lam)
        rep = dominance_check(m, m)
        assert rep.dominated and rep.witness is None


def test_reverse_dominance_reports_witness():
    spec = builtin("zrp-const")
    rep = dominance_check(measure_at_density(spec, 2.0), measure_at_density(spec, 1.0))
    assert not rep.dominated
    assert rep.witness == 0


def test_coupling_identical_is_diagonal():
    m = measure_at_density(builtin("zrp-const"), 1.0)
    c = monotone_couple(m, m)
    y, z = c.sample(np.random.default_rng(1), 1000)
    np.testing.assert_array_equal(y, z)


def test_coupling_asep_bernoulli():
    spec = builtin("asep")
    c = monotone_couple(measure_at_density(spec, 0.2), measure_at_density(spec, 0.5))
    joint = c.joint_pmf()
    assert set(joint) <= {(0, 0), (0, 1), (1, 1)}
    assert joint[(0, 1)] == pytest.approx(0.3, abs=1e-12)


def test_coupling_strict_seed_asep():
    spec = builtin("asep")
    c = monotone_couple(seed_measure(spec, 0.2), shifted(seed_measure(spec, 0.5)), "strict")
    assert c.joint_pmf() == pytest.approx({(0, 1): 1.0})


def test_coupling_rejects_wrong_order():
    spec = builtin("asep")
    with pytest.raises(DominationViolated) as err:
        monotone_couple(measure_at_density(spec, 0.5), measure_at_density(spec, 0.2))
    assert err.value.witness == 0
    with pytest.raises(ValueError):
        monotone_couple(measure_at_density(spec, 0.2), measure_at_density(spec, 0.5), "sideways")


def test_measure_json():
    import json
    m = measure_at_density(builtin("asep"), 0.5)
    d = json.loads(m.to_json())
    assert d["support"] == [0, 1]


_ZRP = builtin("zrp", f="geom-exp", beta=1.0)


@settings(max_examples=40, deadline=None)
@given(lam=st.floats(0.05, 3.0), gap=st.floats(0.01, 2.0), seed=st.integers(0, 2**31))
def test_strict_coupling_orders_samples(lam, gap, seed):
    rho = lam + gap
    c = monotone_couple(seed_measure(_ZRP, lam), shifted(seed_measure(_ZRP, rho)), "strict")
    y, z = c.sample(np.random.default_rng(seed), 200)
    assert np.all(y < z)


@settings(max_examples=40, deadline=None)
@given(lam=st.floats(0.05, 3.0), gap=st.floats(0.0, 2.0), seed=st.integers(0, 2**31))
def test_weak_coupling_orders_samples(lam, gap, seed):
    c = monotone_couple(measure_at_density(_ZRP, lam), measure_at_density(_ZRP, lam + gap))
    y, z = c.sample(np.random.default_rng(seed), 200)
    assert np.all(y <= z)


@settings(max_examples=40, deadline=None)
@given(rho=st.floats(0.01, 0.99))
def test_asep_round_trip_property(rho):
    spec = builtin("asep")
    assert density_of_theta(tilted(spec, theta_of_density(spec, rho))) == pytest.approx(rho, abs=1e-10)
