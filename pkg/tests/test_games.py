import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from irmarl.games import (
    ContractError,
    DecoupledMarkovGame,
    MixturePolicy,
    NoiseSpec,
    ProductPolicy,
    SizeError,
    exact_value_bruteforce,
    exact_value_factored,
    game_from_dict,
    game_to_dict,
    local_visitation,
    permute_agents,
    policy_from_dict,
    policy_to_dict,
    random_game,
    sample_episode,
    sample_episodes,
    visitation,
)
from irmarl.ir_core import DomainError, IRFunction, random_ir_function, reorder_slots, dense_table


def random_policy(rng, game):
    return ProductPolicy([rng.dirichlet(np.ones(A), size=(game.H, game.C, S))
                          for S, A in zip(game.state_sizes, game.action_sizes)])


def matching_game(noise="none"):
    match = IRFunction(2, (2,), 2, {(0,): np.eye(2)})
    return DecoupledMarkovGame.contextual([1.0], [2, 2], [match, match], noise=NoiseSpec(noise))


def test_matching_reward_uniform_policies():
    game = matching_game()
    pol = ProductPolicy.uniform(game)
    np.testing.assert_allclose(exact_value_factored(game, pol), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(exact_value_bruteforce(game, pol), [0.5, 0.5], atol=1e-15)


def test_zero_reward_gives_zero(rng):
    game = random_game(rng, 3, 2, 2, 2, 2, 2)
    zeros = [[IRFunction.zeros(game.x_size(i), game.y_sizes(i)) for _ in range(game.H)] for i in range(game.N)]
    pol = random_policy(rng, game)
    assert np.all(exact_value_factored(game, pol, zeros) == 0)
    assert np.all(exact_value_bruteforce(game, pol, zeros) == 0)


def test_visitation_single_step():
    P = np.ones((1, 1, 2, 3, 2)) / 2
    pi = np.array([[[[0.2, 0.3, 0.5], [1 / 3, 1 / 3, 1 / 3]]]])
    d = visitation(P, pi, 0)
    np.testing.assert_allclose(d[0, 0, 0], [0.2, 0.3, 0.5])
    assert np.all(d[0, 0, 1] == 0)


def test_visitation_deterministic_chain():
    P = np.zeros((2, 1, 2, 2, 2))
    P[..., 1] = 1.0
    pi = np.full((2, 1, 2, 2), 0.5)
    d = visitation(P, pi, 0)
    np.testing.assert_allclose(d[1, 0].sum(axis=-1), [0.0, 1.0])


def test_visitation_uniform_transition():
    P = np.full((2, 1, 2, 2, 2), 0.5)
    pi = np.full((2, 1, 2, 2), 0.5)
    d = visitation(P, pi, 1)
    np.testing.assert_allclose(d[1, 0].sum(axis=-1), [0.5, 0.5])


@st.composite
def small_games(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    N = draw(st.integers(1, 3))
    H = draw(st.integers(1, 3))
    C = draw(st.integers(1, 2))
    S = draw(st.lists(st.integers(1, 3), min_size=N, max_size=N))
    A = draw(st.lists(st.integers(1, 3), min_size=N, max_size=N))
    K = draw(st.integers(1, 3))
    game = random_game(rng, N, H, C, S, A, K)
    return game, random_policy(rng, game)


@settings(max_examples=60, deadline=None)
@given(small_games())
def test_visitation_conserves_mass(inst):
    game, pol = inst
    for i in range(game.N):
        d = local_visitation(game, pol, i)
        np.testing.assert_allclose(d.sum(axis=(2, 3)), 1.0, atol=1e-10)
        assert np.all(d >= 0)


@settings(max_examples=60, deadline=None)
@given(small_games())
def test_factored_matches_bruteforce(inst):
    game, pol = inst
    np.testing.assert_allclose(exact_value_factored(game, pol), exact_value_bruteforce(game, pol), atol=1e-9)


def test_factored_matches_bruteforce_general_rewards(rng):
    # rewards outside [0, 1] and of full rank exercise every sub-function path
    game = random_game(rng, 3, 2, 2, [2, 3, 2], [3, 2, 2], 3)
    rewards = [[random_ir_function(rng, game.x_size(i), game.y_sizes(i), 3) for _ in range(game.H)]
               for i in range(game.N)]
    pol = random_policy(rng, game)
    np.testing.assert_allclose(exact_value_factored(game, pol, rewards),
                               exact_value_bruteforce(game, pol, rewards), atol=1e-9)


def test_mixture_of_identical_components(rng):
    game = random_game(rng, 2, 2, 2, 2, 2, 2)
    pol = random_policy(rng, game)
    mix = MixturePolicy((pol, pol))
    np.testing.assert_allclose(exact_value_bruteforce(game, mix), exact_value_bruteforce(game, pol), atol=1e-14)
    np.testing.assert_allclose(exact_value_factored(game, mix), exact_value_factored(game, pol), atol=1e-14)


def test_mixture_is_component_average(rng):
    game = random_game(rng, 2, 2, 1, 2, 2, 2)
    p1, p2 = random_policy(rng, game), random_policy(rng, game)
    expected = (exact_value_factored(game, p1) + exact_value_factored(game, p2)) / 2
    np.testing.assert_allclose(exact_value_factored(game, MixturePolicy((p1, p2))), expected, atol=1e-14)


def test_factored_rejects_non_product():
    game = matching_game()
    with pytest.raises(ContractError):
        exact_value_factored(game, MixturePolicy(("not a policy",)))


def test_bruteforce_size_guard(rng):
    game = random_game(rng, 3, 2, 1, 3, 3, 2)
    with pytest.raises(SizeError):
        exact_value_bruteforce(game, ProductPolicy.uniform(game), max_states=100)


def test_deterministic_episode_is_unique_path():
    P = np.zeros((2, 1, 2, 2, 2))
    P[:, 0, :, 0, 0] = 1.0
    P[:, 0, :, 1, 1] = 1.0
    r = [IRFunction(4, (4,), 2, {(): np.arange(4.0) / 10, (0,): np.zeros((4, 4))}) for _ in range(2)]
    game = DecoupledMarkovGame([1.0], [2, 2], [2, 2], [0, 0], [P, P], [r, r])
    acts = [np.array([[[1, 0]], [[0, 0]]]), np.array([[[0, 0]], [[1, 1]]])]
    pol = ProductPolicy.deterministic(game, acts)
    ep = sample_episode(game, pol, np.random.default_rng(0))
    np.testing.assert_array_equal(ep["states"], [[0, 0], [1, 0]])
    np.testing.assert_array_equal(ep["actions"], [[1, 0], [0, 1]])
    # x = s * 2 + a ; step 0: agent 0 x=1, agent 1 x=0 ; step 1: agent 0 x=2, agent 1 x=1
    np.testing.assert_allclose(ep["rewards"], [[0.1, 0.0], [0.2, 0.1]])
    np.testing.assert_allclose(exact_value_bruteforce(game, pol), ep["rewards"].sum(axis=0))


def test_contextual_episode_shape():
    game = matching_game()
    ep = sample_episode(game, ProductPolicy.uniform(game), np.random.default_rng(1))
    assert ep["actions"].shape == (1, 2) and ep["rewards"].shape == (1, 2)


def test_monte_carlo_mean_matches_exact(rng):
    game = random_game(rng, 3, 2, 2, 2, 2, 2, noise=NoiseSpec("bernoulli"))
    pol = random_policy(rng, game)
    n = 100_000
    returns = sample_episodes(game, pol, n, np.random.default_rng(7)).returns()
    se = returns.std(axis=0) / np.sqrt(n)
    exact = exact_value_factored(game, pol)
    assert np.all(np.abs(returns.mean(axis=0) - exact) <= 5 * se)


def test_policy_shape_mismatch_raises(rng):
    game = random_game(rng, 2, 2, 1, 2, 2, 2)
    bad = ProductPolicy([np.full((2, 1, 2, 3), 1 / 3), np.full((2, 1, 2, 2), 0.5)])
    with pytest.raises(DomainError):
        sample_episode(game, bad, rng)


def test_transition_rows_validated():
    P = np.full((1, 1, 1, 2, 1), 0.9)
    with pytest.raises(DomainError):
        DecoupledMarkovGame([1.0], [1], [2], [0], [P], [[IRFunction.zeros(2, ())]])


def test_reward_range_validated():
    f = IRFunction(1, (), 1, {(): np.array([1.5])})
    with pytest.raises(DomainError):
        DecoupledMarkovGame.contextual([1.0], [1], [f])
    DecoupledMarkovGame.contextual([1.0], [1], [f], reward_range=(-2.0, 2.0))


def test_declared_rank_enforced(rng):
    f = random_ir_function(rng, 2, (2, 2), 3)
    with pytest.raises(DomainError):
        DecoupledMarkovGame.contextual([1.0], [2, 2, 2], [f, f, f], rank=2, reward_range=(-1e3, 1e3))


def test_bernoulli_noise_rejects_out_of_range_mean():
    from irmarl.games import NoiseError
    with pytest.raises(NoiseError):
        NoiseSpec("bernoulli").observe(np.array([1.5]), np.random.default_rng(0))


def test_relabeling_permutes_values(rng):
    game = random_game(rng, 3, 2, 2, [2, 3, 2], [2, 2, 3], 3)
    pol = random_policy(rng, game)
    perm = [2, 0, 1]
    permuted = permute_agents(game, perm)
    ppol = ProductPolicy([pol.tables[o] for o in perm])
    np.testing.assert_allclose(exact_value_factored(permuted, ppol), exact_value_factored(game, pol)[perm],
                               atol=1e-12)


def test_reorder_slots_matches_dense(rng):
    f = random_ir_function(rng, 2, (2, 3, 4), 3)
    g = reorder_slots(f, [2, 0, 1])
    expected = np.transpose(dense_table(f), (0, 3, 1, 2))
    np.testing.assert_allclose(dense_table(g), expected, atol=1e-12)


def test_game_and_policy_json_round_trip(rng):
    game = random_game(rng, 2, 2, 2, 2, 3, 2)
    again = game_from_dict(game_to_dict(game))
    assert again.digest() == game.digest()
    pol = random_policy(rng, game)
    back = policy_from_dict(policy_to_dict(pol))
    np.testing.assert_allclose(exact_value_factored(again, back), exact_value_factored(game, pol), atol=1e-14)


def test_unknown_schema_version_rejected(rng):
    doc = game_to_dict(random_game(rng, 2, 1, 1, 1, 2, 2))
    doc["schema_version"] = 99
    with pytest.raises(DomainError):
        game_from_dict(doc)
