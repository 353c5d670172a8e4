import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irmarl.ir_core import DomainError
from irmarl.quadratic import (
    ARMS,
    QuadraticConfig,
    feature_count,
    feature_grad,
    features,
    fit_critic,
    run_actor,
    run_arm,
    sample_data,
)


def test_sample_count_follows_noise_coupling():
    assert QuadraticConfig(N=8, sigma=1.0).sample_count() == 80
    assert QuadraticConfig(N=8, sigma=0.0, M=7).sample_count() == 7
    with pytest.raises(DomainError):
        QuadraticConfig(N=8, sigma=0.0)
    with pytest.raises(DomainError):
        QuadraticConfig(N=1)


@pytest.mark.parametrize("N", [4, 8, 16])
def test_matched_budget_keeps_ratio(N):
    cfg = QuadraticConfig.matched_budget(N)
    assert cfg.sample_count() == feature_count("joint", N)
    assert cfg.sigma * N / cfg.sample_count() == pytest.approx(0.1)


@pytest.mark.parametrize("arm", ARMS)
def test_feature_count_matches_matrix(arm):
    a = np.random.default_rng(0).uniform(-1, 1, (3, 6))
    assert features(arm, 2, a).shape == (3, feature_count(arm, 6))


@settings(max_examples=30, deadline=None)
@given(arm=st.sampled_from(ARMS), i=st.integers(0, 4), seed=st.integers(0, 10**6))
def test_feature_grad_matches_finite_differences(arm, i, seed):
    a = np.random.default_rng(seed).uniform(-1, 1, 5)
    h = 1e-6
    up, down = a.copy(), a.copy()
    up[i] += h
    down[i] -= h
    fd = (features(arm, i, up[None])[0] - features(arm, i, down[None])[0]) / (2 * h)
    assert np.allclose(feature_grad(arm, i, a), fd, atol=1e-6)


def test_noiseless_two_ir_recovers_coefficients_and_equilibrium():
    N = 4
    cfg = QuadraticConfig(N=N, sigma=0.0, M=200)
    data = sample_data(cfg, np.random.default_rng(1))
    critic, actions, gaps = run_arm("2-IR", cfg, data, np.random.default_rng(2))
    for i in range(N):
        coef = critic.coef[i]
        # [1, a_i, a_i^2, a_j..., a_i a_j...]
        assert np.allclose(coef[[0, 1]], 0.0, atol=1e-6)
        assert np.allclose(coef[3:3 + N - 1], 0.0, atol=1e-6)
        assert np.allclose(coef[2], 1 / np.sqrt(N), atol=1e-6)
        assert np.allclose(coef[3 + N - 1:], 1 / np.sqrt(N), atol=1e-6)
    assert gaps[-1] <= 0.05


def test_one_ir_has_no_cross_terms_and_loses_to_two_ir():
    cfg = QuadraticConfig(N=4, sigma=0.0, M=200)
    one, two = [], []
    for seed in range(5):
        data = sample_data(cfg, np.random.default_rng(seed))
        critic, _, g1 = run_arm("1-IR", cfg, data, np.random.default_rng(100 + seed))
        assert all(len(c) == 3 for c in critic.coef)
        one.append(g1[-1])
        two.append(run_arm("2-IR", cfg, data, np.random.default_rng(100 + seed))[2][-1])
    assert np.mean(one) > np.mean(two)


def test_infinite_behavior_cloning_pins_zero_action():
    cfg = QuadraticConfig(N=2, sigma=1.0, bc_weight=np.inf, steps=10)
    critic = fit_critic("2-IR", *sample_data(cfg, np.random.default_rng(0)))
    actions, gaps = run_actor(critic, cfg, np.random.default_rng(0))
    assert np.all(actions == 0)
    assert gaps[-1] == pytest.approx(1.0)


def test_actions_stay_in_box_and_gap_trace_length():
    cfg = QuadraticConfig(N=6, sigma=1.0, steps=25, lr=1.0)
    data = sample_data(cfg, np.random.default_rng(3))
    for arm in ARMS:
        _, actions, gaps = run_arm(arm, cfg, data, np.random.default_rng(4))
        assert np.all(np.abs(actions) <= 1)
        assert len(gaps) == 26
        assert min(gaps) >= -1e-12


def test_underdetermined_joint_fit_is_finite():
    cfg = QuadraticConfig(N=8, sigma=0.0, M=10)
    critic = fit_critic("joint", *sample_data(cfg, np.random.default_rng(0)))
    assert all(np.all(np.isfinite(c)) for c in critic.coef)


def test_unknown_arm_rejected():
    with pytest.raises(DomainError):
        features("3-IR", 0, np.zeros((1, 3)))
