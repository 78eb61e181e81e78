import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from shftrack.admissible_region import RegionThresholds, build_region, in_box
from shftrack.mcmc import (ConfigurationError, LogPosterior, _third_index, default_kappa,
                           demc_propose, draws_to_mee, gamma_for, log_posterior_eval, mh_step,
                           run_chains, split_rhat, write_trace)
from shftrack.shf import HeuristicKde, ManeuverRecord

from synth import case


def gauss_lp(cov):
    Ci = np.linalg.inv(cov)
    return lambda x: -0.5 * np.einsum("ij,jk,ik->i", x, Ci, x)


@pytest.fixture(scope="module")
def region_case():
    pre, attr, truth, dv = case("EW", np.random.default_rng(5))
    return attr, build_region(pre, attr, RegionThresholds())


def test_default_kappa():
    assert default_kappa(2e-3) * 2e-3 == pytest.approx(math.log(10))


def test_gamma_schedule():
    assert gamma_for(0) == pytest.approx(2.38 / math.sqrt(12))
    assert gamma_for(10) == 1.0
    assert gamma_for(11, gamma_scale=0.5) == pytest.approx(0.5 * 2.38 / math.sqrt(12))


@given(st.integers(4, 30), st.integers(0, 2**32 - 1))
def test_third_index_distinct(n, seed):
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    r1 = (idx + rng.integers(1, n, n)) % n
    r2 = _third_index(idx, r1, rng, n)
    assert np.all(r1 != idx) and np.all(r2 != idx) and np.all(r2 != r1)
    assert np.all((0 <= r2) & (r2 < n))


def test_demc_propose_is_difference_move():
    rng = np.random.default_rng(0)
    x = np.zeros((5, 2))
    x[:, 0] = np.arange(5)
    p = demc_propose(x, 0, 1.0, rng, widths=np.zeros(2))
    # with zero jitter the move is an integer difference of two other chains
    assert p[1] == 0 and p[0] == round(p[0]) and p[0] != 0
    with pytest.raises(ValueError):
        demc_propose(x[:3], 0, 1.0, rng, widths=np.ones(2))


def test_split_rhat():
    rng = np.random.default_rng(1)
    iid = rng.normal(size=(8, 2000, 3))
    assert np.all(np.abs(split_rhat(iid) - 1) < 0.01)
    shifted = iid + np.arange(8)[:, None, None]
    assert np.all(split_rhat(shifted) > 1.5)


def test_mh_step_edge_cases():
    rng = np.random.default_rng(2)
    never = lambda x: np.full(len(x), -np.inf)
    flat = lambda x: np.zeros(len(x))
    for _ in range(50):
        x, lx, ok = mh_step(np.zeros(2), 0.0, np.eye(2), never, rng)
        assert not ok and np.all(x == 0)
        assert mh_step(np.zeros(2), 0.0, np.eye(2), flat, rng)[2]


def test_mh_step_targets_gaussian():
    rng = np.random.default_rng(2)
    lp = gauss_lp(np.eye(2))
    x, lx = np.zeros(2), 0.0
    out = np.empty((100000, 2))
    for i in range(len(out)):
        x, lx, _ = mh_step(x, lx, np.eye(2) * 5.0, lp, rng)
        out[i] = x
    assert np.abs(out.mean(0)).max() < 0.02
    np.testing.assert_allclose(np.cov(out.T), np.eye(2), atol=0.05)


def test_demc_identical_chains_give_jitter_only():
    rng = np.random.default_rng(4)
    x = np.ones((6, 3))
    p = demc_propose(x, 2, 1.0, rng, widths=np.full(3, 10.0))
    assert np.all(np.abs(p - 1) < 1e-3) and np.any(p != 1)


def test_flat_target_draws_uniform():
    from scipy.stats import kstest
    b = np.array([[0.0, 1.0], [-2.0, 3.0], [5.0, 6.0]])
    r = run_chains(lambda x: np.zeros(len(x)), b, n_chains=8, n_generations=2000, rng_seed=9,
                   n_draws=1000)
    for j in range(3):
        u = (r.draws[:, j] - b[j, 0]) / (b[j, 1] - b[j, 0])
        assert kstest(u, "uniform").pvalue > 0.01


def test_run_chains_validation():
    lp = gauss_lp(np.eye(2))
    b = np.array([[-1.0, 1.0]] * 2)
    with pytest.raises(ValueError):
        run_chains(lp, b, n_generations=50)
    with pytest.raises(ValueError):
        run_chains(lp, b, n_chains=3)
    with pytest.raises(RuntimeError):
        run_chains(lambda x: np.full(len(x), -np.inf), b, n_generations=100, max_init_tries=3)


def test_run_chains_box_and_determinism(tmp_path):
    lp = gauss_lp(np.diag([1.0, 4.0, 0.25]))
    b = np.array([[-1.0, 2.0], [-3.0, 1.0], [0.0, 1.0]])
    a = run_chains(lp, b, n_chains=8, n_generations=300, rng_seed=3, n_draws=500, keep_trace=True)
    c = run_chains(lp, b, n_chains=8, n_generations=300, rng_seed=3, n_draws=500)
    assert np.array_equal(a.draws, c.draws)
    assert a.draws.shape == (500, 3)
    assert np.all(in_box(b, a.draws))
    assert 0 < a.acceptance < 1 and not a.low_acceptance
    path = tmp_path / "trace.csv"
    write_trace(path, a)
    rows = np.genfromtxt(path, delimiter=",", names=True)
    assert len(rows) == 300 * 8
    with pytest.raises(ValueError):
        write_trace(path, c)


def test_log_posterior_modes(region_case):
    attr, region = region_case
    with pytest.raises(ConfigurationError):
        LogPosterior("nonsense", attr, region)
    with pytest.raises(ConfigurationError):
        LogPosterior("control", attr, region, kappa=-1.0)
    with pytest.raises(ConfigurationError):
        LogPosterior("heuristic", attr, region, kde=HeuristicKde())
    lp = LogPosterior("control", attr, region)
    assert lp.kappa == pytest.approx(default_kappa(region.p_adm))
    center = region.bounds.mean(axis=1)
    outside = region.bounds[:, 1] + 1.0
    assert np.isfinite(log_posterior_eval(lp, center))
    assert log_posterior_eval(lp, outside) == -np.inf
    # with kappa = 0 the control posterior is the attributable likelihood alone
    lp0 = LogPosterior("control", attr, region, kappa=0.0)
    assert log_posterior_eval(lp0, center) == pytest.approx(float(lp0.loglik(center)[0]))


def test_control_density_difference_is_kappa_dp(region_case):
    attr, region = region_case
    from shftrack.admissible_region import control_cost
    lp = LogPosterior("control", attr, region, kappa=500.0)
    a = region.bounds.mean(axis=1)
    b = a.copy()
    b[4] += 0.2 * (region.bounds[4, 1] - region.bounds[4, 0])
    P = control_cost(region.pre_orbit, attr, region.tof, np.stack([a, b]))
    diff = log_posterior_eval(lp, b) - log_posterior_eval(lp, a)
    assert diff == pytest.approx(-500.0 * (P[1] - P[0]), rel=1e-9, abs=1e-9)


def test_heuristic_posterior_uses_kde(region_case):
    attr, region = region_case
    center = region.bounds.mean(axis=1)
    lp_any = LogPosterior("control", attr, region)
    xi = lp_any.xi(center[None])[0]
    rec = ManeuverRecord(xi, np.diag([1.0, 1e-8, 1e-8]), 0.0, 0.0, 0.0, 0)
    kde = HeuristicKde([rec])
    lp = LogPosterior("heuristic", attr, region, kde=kde, kappa_h=2.0)
    expected = float(lp.loglik(center)[0]) + math.log(2.0 * float(kde.eval(xi)))
    assert log_posterior_eval(lp, center) == pytest.approx(expected)


def test_draws_to_mee(region_case):
    attr, region = region_case
    pts = region.bounds.mean(axis=1)[None]
    states = draws_to_mee(pts, attr, attr.epoch, B=0.7)
    assert len(states) == 1 and states[0].srp_coeff == 0.7 and states[0].epoch == attr.epoch
