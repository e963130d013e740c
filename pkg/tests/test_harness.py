import math

import numpy as np
import pytest

from deposition.flux import char_speed
from deposition.harness import (ConfigError, DegenerateInput, ExperimentConfig, InsufficientPoints,
                                MomentEstimate, clt_check, clt_statistics, domination_test,
                                estimate_Q_moments, fit_scaling, identity_check, jackknife, lln_check,
                                moment_ratio, q_headroom, resolve_L, sample_construction, sample_heights,
                                sample_Q)
from deposition.simulator import GuardViolation

ZRP_MODEL = {"model": "zrp", "params": {"f": "geom-exp", "beta": 1.0}}


def small_config(**kw):
    base = dict(model=ZRP_MODEL, rho=1.0, t_list=[2.0, 5.0], replicates=200, master_seed=3)
    base.update(kw)
    return ExperimentConfig(**base)


# ------------------------------------------------------------------ config


@pytest.mark.parametrize("bad", [
    dict(t_list=[5.0, 2.0]),
    dict(t_list=[]),
    dict(t_list=[-1.0]),
    dict(replicates=1),
    dict(L=3),
    dict(L="big"),
    dict(guard_factor=0.0),
    dict(model={"params": {}}),
    dict(rho="dense"),
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        small_config(**bad)


def test_config_json_round_trip(tmp_path):
    cfg = small_config(V_override=0.3, experiment_id="x")
    path = tmp_path / "cfg.json"
    cfg.to_json(path)
    back = ExperimentConfig.from_json(path)
    assert back == cfg
    assert back.spec is cfg.spec  # cached by descriptor
    assert cfg.model_label == "zrp(beta=1.0,f=geom-exp)"


def test_config_from_dict_errors(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": ZRP_MODEL, "rho": 1.0, "t_list": [1.0], "replicates": 5, "extra": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"model": ZRP_MODEL, "rho": 1.0})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict([1, 2])
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json(path)


def test_resolve_L_and_headroom():
    cfg = small_config(t_list=[10.0])
    assert resolve_L(cfg) == 2 * 40 + 2
    assert resolve_L(cfg, i_max=5) == 2 * 45 + 2
    assert resolve_L(small_config(t_list=[10.0], L=500)) == 500
    with pytest.raises(GuardViolation):
        resolve_L(small_config(t_list=[10.0], L=50))
    V = char_speed(cfg.spec, 1.0)
    assert q_headroom(V, 1024) == math.ceil(V * 1024 + 8 * 1024 ** (2 / 3)) + 10
    assert q_headroom(0.0, 0.0) == 18


# -------------------------------------------------------------- estimators


def test_jackknife_mean_matches_standard_error():
    x = np.random.default_rng(0).normal(size=500)
    est, se = jackknife(x, groups=500)
    assert est == pytest.approx(x.mean())
    assert se == pytest.approx(x.std(ddof=1) / np.sqrt(500), rel=1e-10)
    est_g, se_g = jackknife(x)
    assert se_g == pytest.approx(se, rel=0.2)
    assert jackknife(np.zeros(10)) == (0.0, 0.0)
    with pytest.raises(ValueError):
        jackknife(np.ones(1))


def test_fit_scaling_exact_power_laws():
    ts = [64, 128, 256, 512, 1024]
    fit = fit_scaling([(t, 3.0 * t ** (2 / 3)) for t in ts])
    assert fit.slope == pytest.approx(2 / 3, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(3.0), abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.slope_CI[0] <= fit.slope <= fit.slope_CI[1]
    diffusive = fit_scaling([MomentEstimate(t, 1, 0.5 * t, 0.01, 100) for t in ts])
    assert diffusive.slope == pytest.approx(1.0, abs=1e-12)


def test_fit_scaling_needs_enough_points():
    with pytest.raises(InsufficientPoints):
        fit_scaling([(1, 1), (10, 2), (100, 3)])
    with pytest.raises(InsufficientPoints):
        fit_scaling([(10, 1), (20, 2), (40, 3), (80, 4)])
    with pytest.raises(InsufficientPoints):
        fit_scaling([(1, 1), (10, 0), (100, 3), (1000, 4)])


def test_moment_estimates_at_time_zero():
    cfg = small_config(t_list=[0.0, 2.0], replicates=50)
    est = estimate_Q_moments(cfg, [1, 2])
    zero = [e for e in est if e.t == 0.0]
    assert [e.value for e in zero] == [0.0, 0.0]
    assert all(e.n == 50 for e in est)


def test_moment_ratio_synthetic():
    rng = np.random.default_rng(1)
    n = 4000
    a = rng.normal(0, 1, n)
    samples = np.stack([np.round(10 * a), np.round(20 * a)], axis=1)
    ratio, se = moment_ratio(samples, [1.0, 4.0], 0.0, 1.0, 4.0)
    assert ratio == pytest.approx(4.0, rel=0.02)
    assert se < 0.05


def test_clt_statistics_synthetic():
    rng = np.random.default_rng(2)
    t, n = 100.0, 20_000
    heights = rng.binomial(int(t), 0.5, size=n)  # variance 25 = t * 0.25
    ratio, se, ks, p = clt_statistics(heights, t, 0.25, rng)
    assert abs(ratio - 1) < 4 * se
    assert ks < 0.015
    with pytest.raises(DegenerateInput):
        clt_statistics(heights, t, 0.0, rng)


def test_clt_rejects_characteristic_direction():
    cfg = ExperimentConfig(model={"model": "asep", "params": {"p": 1.0}}, rho=0.5, t_list=[10.0],
                           replicates=10, V_override=0.0)
    with pytest.raises(DegenerateInput):
        clt_check(cfg)
    with pytest.raises(ConfigError):
        clt_check(ExperimentConfig(model={"model": "asep", "params": {"p": 1.0}}, rho=0.5, t_list=[10.0],
                                   replicates=10))


def test_clt_diffusion_constant_asep():
    cfg = ExperimentConfig(model={"model": "asep", "params": {"p": 1.0}}, rho=0.5, t_list=[16.0],
                           replicates=400, V_override=0.5)
    res = clt_check(cfg)
    assert res.D == pytest.approx(0.125)
    assert res.site == 8
    assert abs(res.variance_ratio - 1) < 0.35


def test_lln_synthetic_and_real():
    rng = np.random.default_rng(4)
    ts = [16.0, 64.0, 256.0, 1024.0]
    cfg = small_config(t_list=ts, replicates=2000)
    V = char_speed(cfg.spec, 1.0)
    samples = np.stack([np.floor(V * t + t ** (2 / 3) * rng.normal(size=2000)) for t in ts], axis=1)
    rep = lln_check(cfg, samples)
    assert rep.passed
    devs = np.array([r[4] for r in rep.rows])
    np.testing.assert_allclose(devs[1:] / devs[:-1], 4 ** (-1 / 3), rtol=0.1)
    asep = ExperimentConfig(model={"model": "asep", "params": {"p": 1.0}}, rho=0.5, t_list=[4.0, 8.0, 16.0],
                            replicates=300)
    rep = lln_check(asep)
    assert rep.V == pytest.approx(0.0, abs=1e-14)
    assert rep.within_4se


def test_domination_fixtures():
    r = math.exp(-1)
    zeros = np.zeros(2000, dtype=int)
    assert domination_test(zeros, zeros, r).passed
    rng = np.random.default_rng(5)
    nu = rng.geometric(1 - r, size=5000) - 1
    res = domination_test(nu, -nu, r)
    assert res.passed and res.margin_y > 0
    heavy = rng.geometric(1 - 0.6, size=20_000) - 1
    res = domination_test(heavy, None, r)
    assert not res.passed
    assert res.worst_level_y >= 1
    with pytest.raises(ValueError):
        domination_test(zeros[:10], None, r)
    with pytest.raises(ValueError):
        domination_test(zeros, None, 1.5)


# ---------------------------------------------------------- reproducibility


def test_seed_determinism_and_worker_invariance():
    cfg = small_config(replicates=40)
    a = sample_Q(cfg, workers=1)
    b = sample_Q(cfg, workers=1)
    c = sample_Q(cfg, workers=2)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, c)
    assert a.shape == (40, 2)
    d = sample_Q(small_config(replicates=40, master_seed=4), workers=1)
    assert not np.array_equal(a, d)


def test_worker_count_from_environment(monkeypatch):
    cfg = small_config(replicates=12)
    monkeypatch.setenv("DEPOSITION_WORKERS", "2")
    np.testing.assert_array_equal(sample_Q(cfg), sample_Q(cfg, workers=1))
    monkeypatch.setenv("DEPOSITION_WORKERS", "many")
    with pytest.raises(ConfigError):
        sample_Q(cfg)


def test_ring_size_doubling_consistency():
    cfg = small_config(t_list=[5.0], replicates=1500)
    V = char_speed(cfg.spec, 1.0)
    L = resolve_L(cfg, q_headroom(V, 5.0))
    q1 = sample_Q(cfg, L=L)[:, 0]
    q2 = sample_Q(small_config(t_list=[5.0], replicates=1500, master_seed=99), L=2 * L)[:, 0]
    se = np.sqrt(q1.var(ddof=1) / len(q1) + q2.var(ddof=1) / len(q2))
    assert abs(q1.mean() - q2.mean()) < 1.96 * 2 * se


def test_heights_need_one_site_per_time():
    with pytest.raises(ConfigError):
        sample_heights(small_config(), [0])


def test_identity_check_small():
    cfg = small_config(t_list=[5.0], replicates=1500)
    rep = identity_check(cfg)
    assert rep.mean_ok
    assert rep.var_omega == pytest.approx(1.561025523793536, rel=1e-10)
    assert rep.ci_overlap


def test_sample_construction_small():
    cfg = small_config(t_list=[10.0], replicates=50, lam=0.5, L=200)
    res = sample_construction(cfg)
    assert res["four_process_ok"]
    assert np.all(res["y"] <= res["z"]) and np.all(res["Q"] <= res["Q_eta"])
    assert 0.0 <= res["min_probability"] <= 1.0
    with pytest.raises(ConfigError):
        sample_construction(small_config(t_list=[10.0], replicates=5))
