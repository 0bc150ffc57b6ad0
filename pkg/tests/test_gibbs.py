import dataclasses

import numpy as np
import pytest
from helpers import mean_se, toy_dataset
from scipy import stats

from hosprates import gibbs, pg
from hosprates.data import build_design
from hosprates.models import ModelSpec
from hosprates.pg import RngStream


@pytest.fixture(scope="module")
def toy_cc():
    ds = toy_dataset(n_per=(3, 2, 4), seed=1)
    spec = ModelSpec.preset("CC")
    return ds, spec, build_design(ds, spec)


def make_state(bundle, alpha=None, beta=None, **hyper):
    base = {"mu_alpha": -1.0, "g": 1.0, "sigma2_alpha": 0.25, "sigma2_beta": 1.0}
    base.update(hyper)
    return gibbs.ParamState(
        alpha=np.zeros(bundle.H) if alpha is None else np.asarray(alpha, float),
        beta=np.zeros(bundle.d) if beta is None else np.asarray(beta, float),
        hyper=base)


# ---------------------------------------------------------------------------
# omega

def test_omega_mean_at_null_parameters(toy_cc):
    _, spec, bundle = toy_cc
    state = make_state(bundle)
    rng = RngStream(5, 0)
    draws = np.concatenate([gibbs.update_omega(state, bundle, rng)
                            for _ in range(12_000)])
    m, se = mean_se(draws)
    assert abs(m - 0.25) < 3 * se


def test_omega_reproducible(toy_cc):
    _, spec, bundle = toy_cc
    state = make_state(bundle, alpha=[0.2, -0.1, 0.5], beta=[0.3, -0.2])
    a = gibbs.update_omega(state, bundle, RngStream(9, 1))
    b = gibbs.update_omega(state, bundle, RngStream(9, 1))
    assert np.array_equal(a, b)


def test_omega_sign_symmetric_linear_predictor(toy_cc):
    _, spec, bundle = toy_cc
    s_pos = make_state(bundle, alpha=[5.0] * 3)
    s_neg = make_state(bundle, alpha=[-5.0] * 3)
    a = gibbs.update_omega(s_pos, bundle, RngStream(4, 2))
    b = gibbs.update_omega(s_neg, bundle, RngStream(4, 2))
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# alpha

def test_alpha_cold_start_is_prior_draw():
    ds = toy_dataset(n_per=(4, 0, 3), seed=2)
    spec = ModelSpec.preset("CC")
    bundle = build_design(ds, spec)
    state = make_state(bundle, mu_alpha=-1.3, sigma2_alpha=0.49)
    state.omega = np.full(bundle.N, 0.2)
    rng = RngStream(21, 0)
    draws = np.array([gibbs.update_alpha(state, bundle, spec, rng)[1]
                      for _ in range(40_000)])
    m, se = mean_se(draws)
    assert abs(m - (-1.3)) < 3 * se
    assert draws.var(ddof=1) == pytest.approx(0.49, rel=0.05)


def test_alpha_small_omega_limit():
    ds = toy_dataset(n_per=(3,), volumes=(50,), seed=3, outcomes=[1, 1, 0])
    spec = ModelSpec.preset("CC")
    bundle = build_design(ds, spec)
    mu, s2 = -0.8, 0.3
    state = make_state(bundle, mu_alpha=mu, sigma2_alpha=s2, beta=[0.4, -0.1])
    state.omega = np.full(bundle.N, 1e-8)
    rng = RngStream(11, 0)
    draws = np.array([gibbs.update_alpha(state, bundle, spec, rng)[0]
                      for _ in range(40_000)])
    # as omega -> 0 the conditional tends to N(mu + s2*sum(y - 1/2), s2)
    expected = mu + s2 * (1 + 1 + 0 - 1.5)
    m, se = mean_se(draws)
    assert abs(m - expected) < 3 * se
    assert draws.var(ddof=1) == pytest.approx(s2, rel=0.05)


def test_alpha_conditional_law(toy_cc):
    ds, spec, bundle = toy_cc
    gen = np.random.default_rng(17)
    omega = gen.uniform(0.05, 0.4, bundle.N)
    beta = np.array([0.3, -0.4])
    state = make_state(bundle, beta=beta, mu_alpha=-1.1, sigma2_alpha=0.2)
    state.omega = omega
    # analytic conditional moments, assembled independently of the update code
    xb = bundle.X @ beta
    v = np.empty(bundle.H)
    m = np.empty(bundle.H)
    for h in range(bundle.H):
        own = bundle.hosp_idx == h
        prec = 1 / 0.2 + omega[own].sum()
        v[h] = 1 / prec
        y = bundle.y[own]
        m[h] = v[h] * (-1.1 / 0.2 + (y - 0.5).sum() - (omega[own] * xb[own]).sum())
    rng = RngStream(23, 0)
    draws = np.array([gibbs.update_alpha(state, bundle, spec, rng)
                      for _ in range(60_000)])
    for h in range(bundle.H):
        mm, se = mean_se(draws[:, h])
        assert abs(mm - m[h]) < 3.5 * se
        assert draws[:, h].var(ddof=1) == pytest.approx(v[h], rel=0.05)


# ---------------------------------------------------------------------------
# beta

def test_beta_prior_draw_with_no_patients(toy_cc):
    _, spec, bundle = toy_cc
    empty = dataclasses.replace(
        bundle, X=np.zeros((0, bundle.d)), y=np.zeros(0), age=np.zeros(0),
        hosp_idx=np.zeros(0, dtype=np.int64), patient_ids=(),
        n_h=np.zeros(bundle.H, dtype=np.int64), ybar=0.0)
    state = make_state(empty, sigma2_beta=0.64)
    state.omega = np.zeros(0)
    rng = RngStream(31, 0)
    draws = np.array([gibbs.update_beta(state, empty, spec, rng)
                      for _ in range(40_000)])
    assert abs(draws.mean()) < 0.02
    assert draws.var(ddof=1) == pytest.approx(0.64, rel=0.05)


def test_beta_ridge_regression_form():
    # one covariate, unit weights: the conditional is the ridge posterior
    ds = toy_dataset(n_per=(5,), volumes=(80,), d=1, seed=6)
    spec = ModelSpec.preset("CC")
    bundle = build_design(ds, spec)
    alpha = np.array([-0.9])
    s2b = 2.0
    state = make_state(bundle, alpha=alpha, sigma2_beta=s2b)
    state.omega = np.ones(bundle.N)
    x = bundle.X[:, 0]
    prec = x @ x + 1 / s2b
    mean = (x @ (bundle.y - 0.5 - alpha[bundle.hosp_idx])) / prec
    rng = RngStream(37, 0)
    draws = np.array([gibbs.update_beta(state, bundle, spec, rng)[0]
                      for _ in range(50_000)])
    mm, se = mean_se(draws)
    assert abs(mm - mean) < 3 * se
    assert draws.var(ddof=1) == pytest.approx(1 / prec, rel=0.05)


# ---------------------------------------------------------------------------
# hyper blocks

def test_mu_alpha_flat_prior_limit(toy_cc):
    _, spec, bundle = toy_cc
    c = 0.7
    state = make_state(bundle, alpha=[c] * 3, g=1e12)
    state.omega = np.full(bundle.N, 0.2)
    rng = RngStream(41, 0)
    draws = [gibbs.update_hyper(state, bundle, spec, rng)[0]["mu_alpha"]
             for _ in range(20_000)]
    m, se = mean_se(draws)
    assert abs(m - c) < 3 * se


def test_sigma2_alpha_conditional_is_inverse_gamma():
    # four effects split symmetrically around zero: the scale reduces to
    # 1 + sum(alpha^2)/2 and the shape to 1 + H/2 for any g
    ds = toy_dataset(n_per=(1, 1, 1, 1), volumes=(10, 20, 30, 40), seed=7)
    spec = ModelSpec.preset("CC")
    bundle = build_design(ds, spec)
    state = make_state(bundle, alpha=[-1.0, -1.0, 1.0, 1.0], mu_alpha=0.0, g=2.5)
    state.omega = np.full(bundle.N, 0.2)
    rng = RngStream(43, 0)
    draws = np.array([gibbs.update_hyper(state, bundle, spec, rng)[0]["sigma2_alpha"]
                      for _ in range(60_000)])
    # IG(3, 3): mean 3/2, matched against scipy's parameterization
    ig = stats.invgamma(3, scale=3)
    m, se = mean_se(draws)
    assert abs(m - ig.mean()) < 3 * se
    assert abs(m - 1.5) < 3 * se
    ks = stats.ks_1samp(draws[::10], ig.cdf)
    assert ks.pvalue > 0.01


def test_sigma2_beta_conditional(toy_cc):
    _, spec, bundle = toy_cc
    beta = np.array([0.6, -0.8])
    state = make_state(bundle, beta=beta)
    state.omega = np.full(bundle.N, 0.2)
    rng = RngStream(47, 0)
    draws = np.array([gibbs.update_hyper(state, bundle, spec, rng)[0]["sigma2_beta"]
                      for _ in range(60_000)])
    ig = stats.invgamma(1 + 1, scale=1 + (beta @ beta) / 2)
    ks = stats.ks_1samp(draws[::10], ig.cdf)
    assert ks.pvalue > 0.01


def test_delta_posterior_covers_truth_given_effects():
    # hypers-only Gibbs on fixed effects drawn from a known log-linear law
    gen = np.random.default_rng(53)
    h = 500
    volume = np.round(np.exp(gen.normal(np.log(200), 0.8, h))).astype(int)
    delta_true, s2_true = -0.002, 0.06
    alpha = -1.5 + np.sqrt(s2_true * np.exp(delta_true * volume)) * gen.standard_normal(h)

    ds = toy_dataset(n_per=tuple([1] * h), volumes=tuple(volume), seed=8)
    spec = ModelSpec.preset("SL")
    bundle = build_design(ds, spec)
    state = make_state(bundle, alpha=alpha,
                       gamma_S=np.full(bundle.basis.k, -1.5), g_S=1.0,
                       delta=0.0, g_delta=1.0, sigma2_alpha=0.05)
    state.omega = np.full(bundle.N, 0.2)
    rng = RngStream(59, 0)
    step = 0.1
    kept = []
    for it in range(4000):
        hyper, accepted = gibbs.update_hyper(state, bundle, spec, rng, delta_step=step)
        state.hyper = hyper
        if it < 1000 and accepted is not None:
            step *= np.exp(2.0 / (it + 20.0) ** 0.6 * ((1.0 if accepted else 0.0) - 0.44))
        if it >= 1000:
            kept.append(hyper["delta"])
    lo, hi = np.quantile(kept, [0.025, 0.975])
    assert lo < delta_true < hi


# ---------------------------------------------------------------------------
# chain plumbing

def test_chain_determinism(toy_cc):
    ds, spec, _ = toy_cc
    cfg = gibbs.ChainConfig(iterations=60, burnin=20, thin=2, seed=13, n_chains=1)
    s1 = gibbs.run_chain(spec, ds, cfg)
    s2 = gibbs.run_chain(spec, ds, cfg)
    assert np.array_equal(s1.alpha, s2.alpha)
    assert np.array_equal(s1.beta, s2.beta)
    for k in s1.hyper:
        assert np.array_equal(s1.hyper[k], s2.hyper[k])
    s3 = gibbs.run_chain(spec, ds, cfg, stream_id=1)
    assert not np.array_equal(s1.alpha, s3.alpha)


def test_retained_draw_count(toy_cc):
    ds, spec, _ = toy_cc
    cfg = gibbs.ChainConfig(iterations=100, burnin=40, thin=5, seed=1, n_chains=1)
    s = gibbs.run_chain(spec, ds, cfg)
    assert s.S == (100 - 40) // 5


def test_config_validation():
    with pytest.raises(ValueError):
        gibbs.ChainConfig(iterations=10, burnin=10)
    with pytest.raises(ValueError):
        gibbs.ChainConfig(thin=0)


def test_pool_and_round_trip(tmp_path, toy_cc):
    ds, spec, _ = toy_cc
    cfg = gibbs.ChainConfig(iterations=80, burnin=20, thin=3, seed=2, n_chains=2)
    chains = gibbs.run_chains(spec, ds, cfg)
    pooled = gibbs.pool_samples(chains)
    assert pooled.S == sum(c.S for c in chains)
    assert pooled.meta["stream_ids"] == [0, 1]
    sp, mp = tmp_path / "s.csv", tmp_path / "m.json"
    gibbs.save_samples(pooled, sp, mp)
    again = gibbs.load_samples(sp, mp)
    assert np.array_equal(again.alpha, pooled.alpha)
    assert np.array_equal(again.beta, pooled.beta)
    for k in pooled.hyper:
        assert np.array_equal(again.hyper[k], pooled.hyper[k])


def test_threaded_chains_match_sequential(toy_cc):
    ds, spec, _ = toy_cc
    cfg = gibbs.ChainConfig(iterations=60, burnin=20, thin=2, seed=3, n_chains=2)
    seq = gibbs.run_chains(spec, ds, cfg, threads=1)
    par = gibbs.run_chains(spec, ds, cfg, threads=2)
    for a, b in zip(seq, par):
        assert np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.beta, b.beta)


def test_spline_fit_runs_on_toy():
    ds = toy_dataset(n_per=tuple([3] * 30),
                     volumes=tuple(10 + 13 * i for i in range(30)), seed=9)
    spec = ModelSpec.from_config({"mean": {"kind": "spline"},
                                  "variance": {"kind": "loglinear"},
                                  "spline": {"degree": 2, "knots": 4}})
    cfg = gibbs.ChainConfig(iterations=80, burnin=30, thin=2, seed=5, n_chains=1)
    s = gibbs.run_chain(spec, ds, cfg)
    assert s.hyper["gamma_S"].shape == ((80 - 30) // 2, 7)
    assert np.all(np.isfinite(s.hyper["delta"]))
