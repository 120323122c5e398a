import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp, norm

from gliomacal.tmcmc import (
    Evaluator,
    Generation,
    Target,
    TmcmcConfig,
    TmcmcError,
    importance_weights,
    next_exponent,
    resample_and_move,
    run,
    weighted_covariance,
)


def box_target(loglik, dim, lo=-10.0, hi=10.0):
    return Target(
        lambda z: 0.0 if np.all((z >= lo) & (z <= hi)) else -math.inf,
        loglik,
        lambda rng, n: rng.uniform(lo, hi, size=(n, dim)),
    )


def gaussian_loglik(z):
    return float(-0.5 * z @ z)


def cov_of(dp, L):
    w = np.exp(dp * (np.asarray(L) - max(L)))
    return w.std() / w.mean()


def test_exponent_equal_loglik():
    assert next_exponent(np.full(10, -3.0), 0.2, 1.0) == 1.0


def test_exponent_two_points():
    # CoV(1, r) = (1 - r) / (1 + r) with r = exp(-dp); target c gives dp = ln((1 + c) / (1 - c))
    p = next_exponent([0.0, -2.0], 0.0, 0.5)
    assert p == pytest.approx(math.log(3) / 2, abs=1e-9)
    # (1 - r)/(1 + r) < 1 for every dp, so target 1 is never reached and p jumps to 1
    assert next_exponent([0.0, -1.0], 0.0, 1.0) == 1.0


def test_exponent_outlier_matches_dense_scan():
    L = np.zeros(200)
    L[0] = 50.0
    p = next_exponent(L, 0.0, 1.0)
    grid = np.linspace(0, 1, 200001)
    scan = grid[np.argmax([cov_of(g, L) > 1.0 for g in grid]) - 1]
    assert 0 < p < 0.2
    assert p == pytest.approx(scan, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 0), min_size=3, max_size=40), st.floats(0, 0.9))
def test_exponent_properties(L, p_prev):
    p = next_exponent(L, p_prev, 1.0)
    assert p_prev < p <= 1.0
    if p < 1.0:
        assert cov_of(p - p_prev, L) == pytest.approx(1.0, abs=1e-5)


def test_exponent_ignores_nonfinite():
    L = np.array([0.0, -2.0, -np.inf, np.nan])
    assert next_exponent(L, 0.0, 0.5) == pytest.approx(next_exponent(L[:2], 0.0, 0.5))


def test_importance_weights_normalised(rng):
    L = rng.normal(-1000, 30, size=500)
    L[3] = -np.inf
    w, log_mean = importance_weights(L, 0.1)
    assert abs(w.sum() - 1) < 1e-12 and w[3] == 0
    direct = math.log(np.mean(np.exp(0.1 * np.where(np.isfinite(L), L, -np.inf))))
    assert log_mean == pytest.approx(direct, rel=1e-12)


def _gen(samples, weights, p=0.0):
    n = len(samples)
    return Generation(
        np.asarray(samples, float), np.zeros(n), np.zeros(n), p, np.asarray(weights, float),
        0.01 * np.eye(np.asarray(samples).shape[1]),
    )


def test_resample_all_weight_on_one(rng):
    target = box_target(gaussian_loglik, 2)
    gen = _gen(rng.uniform(-1, 1, (50, 2)), np.eye(50)[7])
    out = resample_and_move(gen, target, TmcmcConfig(n_samples=100, chain_steps=0), rng)
    assert np.all(out.samples == gen.samples[7])


def test_prior_moves_always_accepted(rng):
    target = box_target(gaussian_loglik, 2)
    gen = _gen(rng.uniform(-1, 1, (400, 2)), np.full(400, 1 / 400))
    out = resample_and_move(gen, target, TmcmcConfig(n_samples=400, chain_steps=1), rng)
    assert out.acceptance == 1.0


def test_acceptance_rates():
    # beta2 = 0.04 gives a proposal std of 0.2 sigma, so in 2D acceptance sits near 0.9
    res = run(box_target(gaussian_loglik, 2), TmcmcConfig(n_samples=1000, rng_seed=3))
    assert all(0.1 < g["acceptance"] < 0.95 for g in res.trace)
    res = run(box_target(gaussian_loglik, 2), TmcmcConfig(n_samples=1000, beta2=0.2, chain_steps=2, rng_seed=3))
    assert all(0.1 < g["acceptance"] < 0.9 for g in res.trace)


def test_trace_invariants():
    res = run(box_target(gaussian_loglik, 3), TmcmcConfig(n_samples=500, chain_steps=2, beta2=0.2, rng_seed=1))
    ps = [g["p"] for g in res.trace]
    assert np.all(np.diff(ps) > 0) and ps[-1] == 1.0
    assert res.samples.shape == (500, 3)
    assert np.all(np.isfinite(res.loglik))


def test_conjugate_evidence():
    """1D: N(0, 1) likelihood on a U(-5, 5) prior, evidence = (Phi(5) - Phi(-5)) / 10."""
    target = box_target(lambda z: float(norm.logpdf(z[0])), 1, -5.0, 5.0)
    exact = math.log((norm.cdf(5) - norm.cdf(-5)) / 10)
    res = run(target, TmcmcConfig(n_samples=2000, chain_steps=3, beta2=0.3, rng_seed=5))
    assert abs(res.log_evidence - exact) < 0.2


def test_gaussian_mixture_both_modes():
    def mix(z):
        a = -0.5 * np.sum((z - 4) ** 2) / 0.25
        b = -0.5 * np.sum((z + 4) ** 2) / 0.25
        return float(np.logaddexp(a, b))

    res = run(box_target(mix, 2), TmcmcConfig(n_samples=2000, chain_steps=3, beta2=0.2, rng_seed=2))
    frac = np.mean(res.samples[:, 0] > 0)
    assert 0.1 < frac < 0.9
    assert np.all(np.abs(np.abs(res.samples[:, 0]) - 4) < 2.5)


def test_likelihood_shift():
    c = 123.4
    cfg = TmcmcConfig(n_samples=800, chain_steps=2, beta2=0.3, rng_seed=9)
    a = run(box_target(gaussian_loglik, 2), cfg)
    b = run(box_target(lambda z: gaussian_loglik(z) + c, 2), cfg)
    assert b.log_evidence - a.log_evidence == pytest.approx(c, abs=1e-6)
    assert ks_2samp(a.samples[:, 0], b.samples[:, 0]).pvalue > 0.01


def test_single_jump_importance_sampling():
    """chain_steps=0 with a huge CoV target is self-normalised importance sampling."""
    target = box_target(lambda z: float(-0.5 * (z[0] - 1.0) ** 2), 1, -5.0, 5.0)
    is_run = run(target, TmcmcConfig(n_samples=4000, cov_target=1e12, chain_steps=0, rng_seed=4))
    assert len(is_run.trace) == 1
    Z, w = is_run.last_importance
    is_mean = float(w @ Z[:, 0])
    long = run(target, TmcmcConfig(n_samples=4000, chain_steps=3, beta2=0.3, rng_seed=4))
    se = math.sqrt(1 / 4000 * 2) * 3
    assert abs(is_mean - long.samples[:, 0].mean()) < se
    assert is_mean == pytest.approx(1.0, abs=0.1)


def test_max_generations_error():
    target = box_target(lambda z: float(-1e6 * z @ z), 2)
    with pytest.raises(TmcmcError) as err:
        run(target, TmcmcConfig(n_samples=200, max_generations=2))
    assert len(err.value.trace) == 2


def test_determinism():
    cfg = TmcmcConfig(n_samples=300, chain_steps=2, rng_seed=17)
    a = run(box_target(gaussian_loglik, 2), cfg)
    b = run(box_target(gaussian_loglik, 2), cfg)
    assert np.array_equal(a.samples, b.samples) and a.log_evidence == b.log_evidence


def test_nonfinite_likelihoods_tolerated():
    def ll(z):
        return float("nan") if z[0] > 8 else gaussian_loglik(z)

    res = run(box_target(ll, 2), TmcmcConfig(n_samples=400, chain_steps=2, rng_seed=0))
    assert np.all(res.samples[:, 0] <= 8)


def test_evaluator_memo_and_order():
    calls = []

    def f(z):
        calls.append(tuple(z))
        return float(z.sum())

    ev = Evaluator(f)
    Z = np.array([[1.0, 2.0], [3.0, 4.0], [1.0, 2.0]])
    assert ev(Z).tolist() == [3.0, 7.0, 3.0]
    assert ev(Z[::-1]).tolist() == [3.0, 7.0, 3.0]
    assert len(calls) == 2 and ev.n_calls == 2


def test_evaluator_pool_matches_serial():
    Z = np.random.default_rng(0).normal(size=(40, 3))
    with Evaluator(gaussian_loglik, workers=2) as ev:
        pooled = ev(Z)
    assert np.array_equal(pooled, Evaluator(gaussian_loglik)(Z))


def test_weighted_covariance(rng):
    X = rng.normal(size=(300, 3))
    w = np.full(300, 1 / 300)
    np.testing.assert_allclose(weighted_covariance(X, w), np.cov(X.T, bias=True), atol=1e-12)


@pytest.mark.parametrize("bad", [dict(n_samples=10), dict(beta2=0.0), dict(cov_target=-1.0), dict(chain_steps=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TmcmcConfig(**bad)
