import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pact import autodiff as ad
from pact.stochastic import (EstimatorState, RngStream, TruncatedGeometricPrior, VarianceProbe, bernoulli,
                             expected_iterations, expected_log_prior, halting_pmf, log10_variance,
                             prior_log_pmf, reinforce_surrogate, sample_bernoulli, sample_relaxed_bernoulli,
                             stick_break, variance_probe)
from helpers import check_grads, numeric_grad
from oracles import (concrete_threshold_rate, enumerate_expected_log_prior, enumerate_pmf,
                     exact_objective_gradient, objective_value, reinforce_vs_enumeration,
                     saturation_violation_rate)

probs = st.floats(0.0, 1.0)
halting_vectors = st.lists(probs, min_size=0, max_size=6).map(lambda h: h + [1.0])


def test_rng_stream_is_keyed_by_seed_and_stream():
    a = RngStream(5, 1, 2).uniform(4)
    np.testing.assert_array_equal(a, RngStream(5, 1, 2).uniform(4))
    assert not np.array_equal(a, RngStream(5, 1, 3).uniform(4))
    assert not np.array_equal(a, RngStream(6, 1, 2).uniform(4))
    np.testing.assert_array_equal(RngStream(5, 1).child(2).uniform(4), a)


def test_sample_bernoulli():
    rng = RngStream(0, 1)
    assert all(sample_bernoulli(1.0, rng) == 1 for _ in range(50))
    assert all(sample_bernoulli(0.0, rng) == 0 for _ in range(50))
    with pytest.raises(ValueError):
        sample_bernoulli(1.5, rng)
    assert abs(bernoulli(np.full(100_000, 0.7), rng).mean() - 0.7) < 0.01


def test_relaxed_sampler_by_hand():
    for lam in (0.3, 2 / 3, 1.7):
        assert sample_relaxed_bernoulli(0.5, lam, noise=0.5).item() == pytest.approx(0.5, abs=1e-15)
    assert sample_relaxed_bernoulli(0.8, 2 / 3, noise=0.5).item() == pytest.approx(8 / 9, abs=1e-12)
    with pytest.raises(ValueError):
        sample_relaxed_bernoulli(0.5, 0.0, noise=0.5)


def test_relaxed_sampler_threshold_rate():
    assert abs(concrete_threshold_rate(0.8, 2 / 3, 100_000) - 0.8) < 0.01


def test_relaxed_sampler_is_differentiable_in_h():
    h = ad.parameter(np.array([0.2, 0.55, 0.9]))
    noise = np.array([0.3, 0.6, 0.95])
    assert check_grads(lambda: sample_relaxed_bernoulli(h, 0.5, noise=noise).sum(), [h]) <= 0.0


@pytest.mark.parametrize("h", [1e-6, 1 - 1e-6])
@pytest.mark.parametrize("lam", [0.4, 2 / 3, 0.8])
def test_saturation_limit(h, lam):
    # the gap |v - round(h)| can exceed 1e-3 only with the analytic probability
    rate = saturation_violation_rate(h, lam)
    assert rate < 3e-4
    v = sample_relaxed_bernoulli(np.full(200_000, h), lam, RngStream(3, int(lam * 10)))
    bad = np.abs(v.value - round(h)) >= 1e-3
    expected = rate * bad.size
    assert abs(bad.sum() - expected) <= 5 * math.sqrt(expected) + 3


def test_stick_break_examples():
    np.testing.assert_array_equal(stick_break([1.0, 0.3, 1.0]).value, [1.0, 0.0, 0.0])
    np.testing.assert_allclose(stick_break([0.5, 0.5, 1.0]).value, [0.5, 0.25, 0.25])
    np.testing.assert_array_equal(stick_break([0.0, 0.0, 1.0]).value, [0.0, 0.0, 1.0])
    with pytest.raises(ValueError):
        stick_break([0.5, 0.5, 0.9])
    with pytest.raises(ValueError):
        stick_break([1.5, 1.0])


@settings(max_examples=200, deadline=None)
@given(halting_vectors)
def test_stick_break_sums_to_one(gates):
    w = stick_break(gates).value
    assert abs(w.sum() - 1.0) < 1e-12
    assert (w >= 0).all()


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from([0.0, 1.0]), max_size=6).map(lambda h: h + [1.0]))
def test_stick_break_one_hot_for_binary_gates(gates):
    w = stick_break(gates).value
    assert sorted(w.tolist())[-1] == 1.0 and (w != 0).sum() == 1
    assert int(np.argmax(w)) == gates.index(1.0)


def test_halting_pmf_examples():
    np.testing.assert_allclose(halting_pmf([0.5, 0.5, 1.0]).value, [0.5, 0.25, 0.25])
    np.testing.assert_array_equal(halting_pmf([1.0, 0.2, 0.7, 1.0]).value, [1.0, 0.0, 0.0, 0.0])
    with pytest.raises(ValueError):
        halting_pmf([0.5, 0.5])


@settings(max_examples=150, deadline=None)
@given(halting_vectors)
def test_halting_pmf_matches_enumeration(h):
    pmf = halting_pmf(h).value
    np.testing.assert_allclose(pmf, enumerate_pmf(h), atol=1e-12)
    assert abs(pmf.sum() - 1.0) < 1e-12
    n = expected_iterations(h).item()
    assert abs(n - (np.arange(1, len(h) + 1) * enumerate_pmf(h)).sum()) < 1e-12


def test_halting_pmf_matches_sampled_halting():
    h = np.array([0.3, 0.45, 0.6, 1.0])
    n = 100_000
    gates = bernoulli(np.broadcast_to(h, (n, 4)), RngStream(1, 5))
    gates[:, -1] = 1.0
    z = stick_break(gates).value.argmax(axis=1)
    emp = np.bincount(z, minlength=4) / n
    assert 0.5 * np.abs(emp - halting_pmf(h).value).sum() < 0.01


def test_expected_iterations():
    assert expected_iterations([0.5, 0.5, 1.0]).item() == pytest.approx(1.75, abs=1e-15)
    assert expected_iterations([1.0, 0.4, 1.0]).item() == 1.0
    h1 = np.array([0.5])
    fd = numeric_grad(lambda: expected_iterations([h1[0], 0.5, 1.0]).item(), h1)
    hp = ad.parameter(np.array([0.5, 0.5, 1.0]))
    with ad.new_tape():
        expected_iterations(hp).backward()
    assert abs(hp.adjoint[0] - fd[0]) < 1e-6
    np.testing.assert_allclose(hp.adjoint[:2], [-1.5, -0.5], atol=1e-12)


def test_prior_examples():
    np.testing.assert_allclose(TruncatedGeometricPrior(math.log(2), 2).pmf(), [2 / 3, 1 / 3], atol=1e-15)
    for tau in (0.01, 1.0, 7.0):
        np.testing.assert_allclose(TruncatedGeometricPrior(tau, 1).pmf(), [1.0], atol=1e-14)
    prior = TruncatedGeometricPrior(0.3, 4)
    with pytest.raises(ValueError):
        prior_log_pmf(prior, 0)
    with pytest.raises(ValueError):
        prior_log_pmf(prior, 5)
    with pytest.raises(ValueError):
        TruncatedGeometricPrior(0.0, 3)


@settings(max_examples=150, deadline=None)
@given(st.floats(1e-3, 5.0), st.integers(1, 30))
def test_prior_normalized_and_decreasing(tau, L):
    prior = TruncatedGeometricPrior(tau, L)
    pmf = np.array([math.exp(prior_log_pmf(prior, z)) for z in range(1, L + 1)])
    assert abs(pmf.sum() - 1.0) < 1e-12
    assert (np.diff(pmf) < 0).all()


def test_expected_log_prior_single_outcome():
    prior = TruncatedGeometricPrior(math.log(2), 3)
    got = expected_log_prior(prior, [1.0, 0.5, 1.0]).item()
    assert got == pytest.approx(prior.log_normalizer - math.log(2), abs=1e-14)


@settings(max_examples=120, deadline=None)
@given(st.lists(probs, min_size=1, max_size=5), st.floats(1e-3, 3.0))
def test_expected_log_prior_matches_enumeration(head, tau):
    h = head + [1.0]
    prior = TruncatedGeometricPrior(tau, len(h))
    assert abs(expected_log_prior(prior, h).item() - enumerate_expected_log_prior(tau, len(h), h)) < 1e-10


def test_expected_log_prior_gradient():
    prior = TruncatedGeometricPrior(0.4, 4)
    a = ad.parameter(np.array([-0.3, 0.8, 0.1]))

    def f():
        h = ad.stack([ad.sigmoid(a[0]), ad.sigmoid(a[1]), ad.sigmoid(a[2]), ad.Tensor(1.0)])
        return expected_log_prior(prior, h)
    assert check_grads(f, [a]) <= 0.0


def test_estimator_state_baseline_update():
    s = EstimatorState("reinforce")
    assert s.baseline == 0.0
    s.update(2.0)
    assert s.baseline == pytest.approx(0.02)
    s.update(2.0)
    assert s.baseline == pytest.approx(0.99 * 0.02 + 0.02)
    with pytest.raises(ValueError):
        EstimatorState("other")


def test_exact_gradient_oracle_agrees_with_finite_differences():
    rewards, logits, tau = np.array([1.0, 2.5, -0.7]), np.array([-0.4, 0.3]), 0.05
    fd = numeric_grad(lambda: objective_value(rewards, logits, tau), logits)
    np.testing.assert_allclose(exact_objective_gradient(rewards, logits, tau), fd, rtol=1e-7, atol=1e-10)


def test_reinforce_mean_within_three_standard_errors():
    mean, se, exact = reinforce_vs_enumeration(20_000, seed=4)
    assert (np.abs(mean - exact) <= 3 * se).all(), (mean, exact, se)


def test_reinforce_reward_equal_to_baseline_has_no_score_term():
    # f(z) = c everywhere: only the penalty path remains, with no sampling noise
    mean, se, exact = reinforce_vs_enumeration(2_000, rewards=(0.5, 0.5, 0.5), baseline=0.5, tau=0.0)
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(exact, 0.0, atol=1e-15)


def test_reinforce_penalty_only_gradient_is_exact():
    tau = 0.3
    mean, se, _ = reinforce_vs_enumeration(500, rewards=(0.0, 0.0, 0.0), baseline=0.0, tau=tau)
    a = ad.parameter(np.array([-0.4, 0.3]))
    with ad.new_tape():
        h = ad.sigmoid(a)
        (-tau * expected_iterations(ad.stack([h[0], h[1], ad.Tensor(1.0)]))).backward()
    np.testing.assert_allclose(mean, a.adjoint, atol=1e-15)
    assert (se < 1e-15).all()


def test_reinforce_surrogate_value():
    state = EstimatorState("reinforce", baseline=1.0)
    ll, lq = ad.Tensor([2.0, 0.0]), ad.Tensor([-0.5, -1.0])
    # -(mean(ll + (ll - c) lq - pen))
    assert reinforce_surrogate(ll, lq, 0.25, state).item() == pytest.approx(-(1.0 + (-0.5 + 1.0) / 2 - 0.25))


def test_variance_probe():
    assert log10_variance(np.ones((4, 3))) == -math.inf
    assert log10_variance([[0.0], [2.0]]) == pytest.approx(math.log10(2.0))
    assert math.log10(2.0) == pytest.approx(0.30103, abs=1e-5)
    with pytest.raises(ValueError):
        VarianceProbe(1)
    out = variance_probe([np.zeros(2), np.full(2, 2.0), np.zeros(2)], window=2)
    assert out[0] is None
    assert out[1] == pytest.approx(math.log10(2.0)) and out[2] == pytest.approx(math.log10(2.0))
