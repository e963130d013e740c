import math
from fractions import Fraction

import numpy as np
import pytest

from deposition.rates import (InvalidParameter, JumpRate, RateSpec, StateSpace, builtin,
                              check_increment_ratio, jump_rate, model_from_descriptor, validate)


@pytest.mark.parametrize("name", ["asep", "pap-exclusion", "zrp", "zrp-const", "bricklayers"])
def test_builtins_validate_clean(builtins, name):
    spec, _ = builtins[name]
    report = validate(spec)
    assert report.ok, report.violations[:3]


def test_infinite_space_report_notes_window():
    report = validate(builtin("zrp-const"), check_range=6)
    assert report.ok
    assert report.window == (0, 6)
    assert any("window" in n for n in report.notes)


def test_asymmetric_asep_validates_with_both_directions():
    assert validate(builtin("asep", p=0.7)).ok


def test_attractivity_violation_has_witness():
    base = builtin("zrp-const")
    # a deposition rate that decreases in the left occupancy between 2 and 3
    bad_f = JumpRate(lambda z: {0: 0.0, 1: 1.0, 2: 2.0}.get(z, 1.5) if z >= 0 else 0.0, "bad")
    spec = RateSpec(
        name="bad", space=StateSpace(0, math.inf),
        p=lambda y, z: bad_f(y), q=lambda y, z: 0.0, f=bad_f,
        s_p=lambda y, z: 1.0, s_q=lambda y, z: 0.0,
        asymmetry="p-only", rate_upper_bound=2.0, occupancy_cap=base.occupancy_cap,
    )
    report = validate(spec, check_range=5)
    assert "attractivity" in report.conditions()
    witnesses = [v.witness for v in report.violations if v.condition == "attractivity"]
    # witness (y, z) means p(z+1, y) < p(z, y): here z = 2
    assert any(w[1] == 2 for w in witnesses)


def test_boundary_violation_detected():
    # removal from a full site at the upper boundary is forbidden
    spec = RateSpec(
        name="bnd", space=StateSpace(0, 1),
        p=lambda y, z: 1.0 * (y == 1 and z == 0),
        q=lambda y, z: 0.5 * (y == 0 and z == 1) + 0.1 * (y == 1 and z == 1),
        f=JumpRate(lambda z: float(z == 1)), s_p=lambda y, z: float(y == 1 and z == 1),
        s_q=lambda y, z: 0.5 * (y == 1 and z == 1), asymmetry="both", rate_upper_bound=1.0,
    )
    report = validate(spec)
    assert "boundary" in report.conditions()
    assert any(v.witness == (1, 1) for v in report.violations if v.condition == "boundary")


def test_three_cycle_violation_detected():
    f = jump_rate("linear")
    spec = RateSpec(
        name="cyc", space=StateSpace(0, math.inf),
        p=lambda y, z: f(y) / (1 + z), q=lambda y, z: 0.0, f=f,
        s_p=lambda y, z: 1.0, s_q=lambda y, z: 0.0, asymmetry="p-only", rate_upper_bound=math.inf,
    )
    report = validate(spec, check_range=4)
    assert "three-cycle" in report.conditions()
    assert "attractivity" not in report.conditions()


def test_asep_total_asymmetry_rates():
    spec = builtin("asep", p=1.0)
    for y in (0, 1):
        for z in (0, 1):
            assert spec.p(y, z) == (1.0 if (y, z) == (1, 0) else 0.0)
            assert spec.q(y, z) == 0
    assert spec.asymmetry == "p-only"
    assert spec.totally_asymmetric


def test_asep_rational_parameters_stay_exact():
    spec = builtin("asep", p=Fraction(7, 10))
    assert spec.p(1, 0) == Fraction(7, 10)
    assert spec.q(0, 1) == Fraction(3, 10)


def test_constant_tazrp_rates():
    spec = builtin("zrp-const")
    for z in range(6):
        assert spec.f(z) == (1 if z > 0 else 0)
        for y in range(6):
            assert spec.p(y, z) == spec.f(y)
            assert spec.q(y, z) == 0


def test_bricklayers_reflection():
    spec = builtin("bricklayers", beta=2.0, rate_upper_bound=1e4)
    assert spec.f(1) == pytest.approx(math.e, rel=1e-15)
    assert spec.f(0) == pytest.approx(1 / spec.f(1), rel=1e-15)
    for z in range(-5, 6):
        assert spec.f(z) * spec.f(1 - z) == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("kwargs", [
    dict(name="asep", p=1.2),
    dict(name="asep", p=0.5),
    dict(name="pap-exclusion", c=0.8, a=1.0),
    dict(name="bricklayers", beta=-1.0),
    dict(name="nonexistent"),
])
def test_invalid_parameters(kwargs):
    name = kwargs.pop("name")
    with pytest.raises(InvalidParameter):
        builtin(name, **kwargs)


def test_zrp_requires_f_zero_at_zero():
    with pytest.raises(InvalidParameter):
        builtin("zrp", f=lambda z: 1.0)


@pytest.mark.parametrize("name", ["asep", "pap-exclusion", "zrp", "zrp-const", "bricklayers"])
def test_factorization_and_symmetry(builtins, name):
    spec, _ = builtins[name]
    lo, hi = spec.space.window(8)
    for y in range(lo, hi + 1):
        for z in range(lo, hi + 1):
            assert spec.s_p(y, z) == pytest.approx(spec.s_p(z, y), rel=1e-14)
            assert spec.s_q(y, z) == pytest.approx(spec.s_q(z, y), rel=1e-14)
            if z + 1 <= hi:
                assert spec.p(y, z) == pytest.approx(spec.s_p(y, z + 1) * spec.f(y), rel=1e-14, abs=1e-300)
            if y + 1 <= hi:
                assert spec.q(y, z) == pytest.approx(spec.s_q(y + 1, z) * spec.f(z), rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("name", ["asep", "pap-exclusion", "zrp", "zrp-const"])
def test_rates_below_upper_bound(builtins, name):
    spec, _ = builtins[name]
    assert math.isfinite(spec.rate_upper_bound)
    lo, hi = spec.space.window(15)
    for y in range(lo, hi + 1):
        for z in range(lo, hi + 1):
            assert spec.p(y, z) + spec.q(y, z) <= spec.rate_upper_bound + 1e-15


@pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
def test_increment_ratio_geometric(beta):
    res = check_increment_ratio(jump_rate("geom-exp", beta=beta))
    assert res.holds
    assert res.r == pytest.approx(math.exp(-beta), rel=1e-9)


def test_increment_ratio_constant():
    res = check_increment_ratio(jump_rate("const"))
    assert res.holds
    assert res.r == 0.0


def test_increment_ratio_linear_fails():
    res = check_increment_ratio(jump_rate("linear"))
    assert not res.holds
    assert res.r == pytest.approx(1.0)


def test_increment_ratio_window_too_small():
    with pytest.raises(InvalidParameter):
        check_increment_ratio(jump_rate("const"), z_window=1)


def test_table_rate_rules():
    f = jump_rate("table", table=[0, 1, 1.5], rule="geometric-increment", ratio=0.5)
    assert f(3) == pytest.approx(1.75)
    assert f(4) == pytest.approx(1.875)
    assert f.limit_hi == pytest.approx(2.0)
    g = jump_rate("table", table=[0, 1, 1.5])
    assert g(10) == 1.5


def test_descriptor_round_trip():
    spec = model_from_descriptor({"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}})
    assert spec.f(1) == pytest.approx(1 - math.exp(-1))
    with pytest.raises(InvalidParameter):
        model_from_descriptor({"params": {}})


def test_rate_tables_match_functions():
    spec = builtin("zrp", f="geom-exp", beta=1.0)
    pt, qt = spec.tables(0, 10)
    np.testing.assert_array_equal(pt[:, 0], [spec.f(y) for y in range(11)])
    assert not qt.any()
