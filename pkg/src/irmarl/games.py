"""Finite Markov games with decoupled per-agent transitions.

Indexing conventions used everywhere in the package:

* agent ``i``'s reward at step ``h`` is an :class:`~irmarl.ir_core.IRFunction`
  whose ``x`` slot is the flat index of ``(c, s_i, a_i)`` and whose ``y`` slots
  are the flat ``(s_j, a_j)`` pairs of the other agents in increasing ``j``;
* transitions of agent ``i`` are an array ``(H, C, S_i, A_i, S_i)``;
* a product policy stores ``pi_i`` as an array ``(H, C, S_i, A_i)``.

A contextual game is the special case ``H = 1`` with a single dummy state per
agent.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .ir_core import (
    DomainError,
    IRFunction,
    dense_table,
    evaluate_batch,
    expect_over_slots,
    ir_from_dict,
    ir_to_dict,
    reorder_slots,
)

PROB_TOL = 1e-12
SCHEMA_VERSION = 1


class NoiseError(ValueError):
    pass


class ContractError(ValueError):
    pass


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSpec:
    """Observation noise around the mean reward.

    ``kind`` is ``"none"``, ``"bernoulli"`` (observation in {0, 1} with the
    mean as success probability) or ``"uniform"`` (mean plus
    ``Uniform(-sigma, sigma)``).
    """

    kind: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "bernoulli", "uniform"):
            raise NoiseError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise NoiseError("sigma must be >= 0")

    def observe(self, mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(mean, dtype=float)
        if self.kind == "none":
            return mean.copy()
        if self.kind == "bernoulli":
            if np.any(mean < -1e-12) or np.any(mean > 1 + 1e-12):
                raise NoiseError("bernoulli noise needs mean rewards in [0, 1]")
            return (rng.random(mean.shape) < mean).astype(float)
        return mean + rng.uniform(-self.sigma, self.sigma, mean.shape)

    def spread(self) -> float:
        """Half-width of the observation range around the mean (for concentration checks)."""
        return {"none": 0.0, "bernoulli": 1.0, "uniform": self.sigma}[self.kind]


def _check_rows(arr: np.ndarray, what: str):
    if np.any(arr < -PROB_TOL) or np.any(np.abs(arr.sum(axis=-1) - 1.0) > PROB_TOL):
        raise DomainError(f"{what} rows must be probability vectors")


def others(i: int, n_agents: int) -> list[int]:
    return [j for j in range(n_agents) if j != i]


@dataclass(frozen=True, eq=False)
class DecoupledMarkovGame:
    rho: np.ndarray
    state_sizes: tuple
    action_sizes: tuple
    init_states: tuple
    transitions: tuple
    rewards: tuple
    reward_range: tuple = (0.0, 1.0)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    rank: int | None = None

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        if rho.ndim != 1:
            raise DomainError("rho must be a vector")
        _check_rows(rho, "rho")
        object.__setattr__(self, "rho", rho)
        for name in ("state_sizes", "action_sizes", "init_states"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        N = len(self.state_sizes)
        if len(self.action_sizes) != N or len(self.init_states) != N:
            raise DomainError("per-agent size lists disagree on N")
        trans = tuple(np.array(P, dtype=float) for P in self.transitions)
        if len(trans) != N:
            raise DomainError("need one transition array per agent")
        H = trans[0].shape[0]
        C = rho.shape[0]
        for i, P in enumerate(trans):
            S, A = self.state_sizes[i], self.action_sizes[i]
            if P.shape != (H, C, S, A, S):
                raise DomainError(f"transitions[{i}] has shape {P.shape}, expected {(H, C, S, A, S)}")
            _check_rows(P, f"transitions[{i}]")
            if not 0 <= self.init_states[i] < S:
                raise DomainError(f"init state of agent {i} out of range")
            P.setflags(write=False)
        object.__setattr__(self, "transitions", trans)
        rewards = tuple(tuple(r) for r in self.rewards)
        if len(rewards) != N or any(len(r) != H for r in rewards):
            raise DomainError("need an H-long reward list per agent")
        for i in range(N):
            for h, f in enumerate(rewards[i]):
                if f.x_size != self.x_size(i) or f.y_sizes != self.y_sizes(i):
                    raise DomainError(f"reward ({i}, {h}) domains do not match the game")
                if self.rank is not None and f.rank > self.rank:
                    raise DomainError(f"reward ({i}, {h}) rank {f.rank} exceeds {self.rank}")
        object.__setattr__(self, "rewards", rewards)
        lo, hi = (float(v) for v in self.reward_range)
        if hi < lo:
            raise DomainError("reward_range must satisfy lo <= hi")
        object.__setattr__(self, "reward_range", (lo, hi))
        self._check_reward_range()

    def _check_reward_range(self):
        lo, hi = self.reward_range
        for i in range(self.N):
            for f in self.rewards[i]:
                flo, fhi = f.value_bounds()
                if flo >= lo - 1e-9 and fhi <= hi + 1e-9:
                    continue
                try:
                    table = dense_table(f, max_cells=10**6)
                except DomainError:
                    continue
                if table.min() < lo - 1e-9 or table.max() > hi + 1e-9:
                    raise DomainError(f"reward of agent {i} leaves declared range {self.reward_range}")

    @classmethod
    def contextual(cls, rho, action_sizes, rewards, **kwargs):
        """Contextual game: ``H = 1`` and one dummy local state per agent.

        ``rewards[i]`` is a single IRFunction with ``x = (c, a_i)`` and ``y_j = a_j``.
        """
        rho = np.asarray(rho, dtype=float)
        N = len(action_sizes)
        trans = [np.ones((1, len(rho), 1, A, 1)) for A in action_sizes]
        return cls(rho, (1,) * N, tuple(action_sizes), (0,) * N, trans,
                   [[r] for r in rewards], **kwargs)

    @property
    def N(self) -> int:
        return len(self.state_sizes)

    @property
    def H(self) -> int:
        return self.transitions[0].shape[0]

    @property
    def C(self) -> int:
        return self.rho.shape[0]

    @property
    def is_contextual(self) -> bool:
        return self.H == 1 and all(s == 1 for s in self.state_sizes)

    def x_size(self, i: int) -> int:
        return self.C * self.state_sizes[i] * self.action_sizes[i]

    def y_sizes(self, i: int) -> tuple[int, ...]:
        return tuple(self.state_sizes[j] * self.action_sizes[j] for j in others(i, self.N))

    def reward_width(self) -> float:
        lo, hi = self.reward_range
        return hi - lo

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(game_to_dict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class ProductPolicy:
    """``tables[i][h, c, s, a] = pi_{i,h}(a | c, s)``."""

    tables: tuple

    def __post_init__(self):
        tabs = tuple(np.array(t, dtype=float) for t in self.tables)
        for i, t in enumerate(tabs):
            if t.ndim != 4:
                raise DomainError(f"policy table {i} must be (H, C, S, A)")
            _check_rows(t, f"policy of agent {i}")
            t.setflags(write=False)
        object.__setattr__(self, "tables", tabs)

    @property
    def N(self) -> int:
        return len(self.tables)

    def check_game(self, game: DecoupledMarkovGame):
        for i, t in enumerate(self.tables):
            expected = (game.H, game.C, game.state_sizes[i], game.action_sizes[i])
            if t.shape != expected:
                raise DomainError(f"policy of agent {i} has shape {t.shape}, expected {expected}")
        if self.N != game.N:
            raise DomainError("policy agent count does not match game")

    def replace(self, i: int, table) -> "ProductPolicy":
        tabs = list(self.tables)
        tabs[i] = table
        return ProductPolicy(tabs)

    @classmethod
    def uniform(cls, game: DecoupledMarkovGame) -> "ProductPolicy":
        return cls([np.full((game.H, game.C, S, A), 1.0 / A)
                    for S, A in zip(game.state_sizes, game.action_sizes)])

    @classmethod
    def deterministic(cls, game: DecoupledMarkovGame, actions) -> "ProductPolicy":
        """``actions[i]`` is an int array ``(H, C, S_i)`` of chosen actions."""
        tabs = []
        for i, act in enumerate(actions):
            act = np.asarray(act, dtype=np.intp)
            tabs.append(np.eye(game.action_sizes[i])[act])
        return cls(tabs)


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """Uniform mixture over product policies: draw one component per episode."""

    components: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise DomainError("a mixture needs at least one component")
        object.__setattr__(self, "components", comps)

    @property
    def T(self) -> int:
        return len(self.components)


def as_mixture(policy) -> MixturePolicy:
    return policy if isinstance(policy, MixturePolicy) else MixturePolicy((policy,))


def visitation(trans_i: np.ndarray, pi_i: np.ndarray, init_state: int) -> np.ndarray:
    """Local state-action visitation ``d_h(s, a | c)``, shape ``(H, C, S, A)``."""
    H, C, S, A, _ = trans_i.shape
    d = np.zeros((H, C, S, A))
    ds = np.zeros((C, S))
    ds[:, init_state] = 1.0
    for h in range(H):
        d[h] = ds[:, :, None] * pi_i[h]
        ds = np.einsum("csa,csat->ct", d[h], trans_i[h])
    return d


def local_visitation(game: DecoupledMarkovGame, policy: ProductPolicy, i: int) -> np.ndarray:
    return visitation(game.transitions[i], policy.tables[i], game.init_states[i])


def other_slot_dists(state_sizes, action_sizes, visits, i: int, h: int) -> list[np.ndarray]:
    """Per-slot ``y`` distributions of agent ``i``'s reward at step ``h``.

    ``visits[j]`` is agent ``j``'s visitation ``(H, C, S_j, A_j)``; the row for
    ``x = (c, s_i, a_i)`` is ``d_{j,h}(. | c)`` flattened over ``(s_j, a_j)``.
    """
    N = len(state_sizes)
    reps = state_sizes[i] * action_sizes[i]
    out = []
    for j in others(i, N):
        dj = visits[j][h].reshape(visits[j].shape[1], -1)
        out.append(np.repeat(dj, reps, axis=0))
    return out


def expected_local_reward(f: IRFunction, state_sizes, action_sizes, visits, i: int, h: int, C: int) -> np.ndarray:
    """``E_{(s_j, a_j) ~ d_{j,h}(.|c), j != i}[f(c, s_i, a_i, .)]``, shape ``(C, S_i, A_i)``."""
    dists = other_slot_dists(state_sizes, action_sizes, visits, i, h)
    return expect_over_slots(f, dists).reshape(C, state_sizes[i], action_sizes[i])


def _product_values(game: DecoupledMarkovGame, policy: ProductPolicy, rewards, agents) -> np.ndarray:
    visits = [local_visitation(game, policy, j) for j in range(game.N)]
    values = np.zeros(len(agents))
    for k, i in enumerate(agents):
        for h in range(game.H):
            r = expected_local_reward(rewards[i][h], game.state_sizes, game.action_sizes, visits, i, h, game.C)
            values[k] += np.einsum("c,csa,csa->", game.rho, visits[i][h], r)
    return values


def exact_value_factored(game: DecoupledMarkovGame, policy, rewards=None, agents=None) -> np.ndarray:
    """Per-agent ``E_rho[V_{i,1}]`` using factored IR expectations.

    Mixtures are evaluated as the average over their components.
    """
    rewards = game.rewards if rewards is None else rewards
    agents = list(range(game.N)) if agents is None else list(agents)
    mix = as_mixture(policy)
    total = np.zeros(len(agents))
    for comp in mix.components:
        if not isinstance(comp, ProductPolicy):
            raise ContractError("factored evaluation needs product-policy components")
        comp.check_game(game)
        total += _product_values(game, comp, rewards, agents)
    return total / mix.T


def _joint_reward_tensor(game, f: IRFunction, i: int, c: int) -> np.ndarray:
    """Reward of agent ``i`` at every joint (s, a), axes (s_1..s_N, a_1..a_N)."""
    N = game.N
    shape = game.state_sizes + game.action_sizes
    idx = np.indices(shape).reshape(2 * N, -1)
    s, a = idx[:N], idx[N:]
    x = (c * game.state_sizes[i] + s[i]) * game.action_sizes[i] + a[i]
    y = np.stack([s[j] * game.action_sizes[j] + a[j] for j in others(i, N)], axis=1) if N > 1 \
        else np.zeros((idx.shape[1], 0), dtype=np.intp)
    return evaluate_batch(f, x, y).reshape(shape)


def exact_value_bruteforce(game: DecoupledMarkovGame, policy, rewards=None, max_states: int = 10**7) -> np.ndarray:
    """Per-agent values by propagating the full joint state-action distribution."""
    rewards = game.rewards if rewards is None else rewards
    N = game.N
    joint = int(np.prod(game.state_sizes + game.action_sizes, dtype=np.int64))
    if joint * game.C * game.H > max_states:
        raise SizeError(f"joint trajectory space {joint * game.C * game.H} exceeds {max_states}")
    mix = as_mixture(policy)
    values = np.zeros(N)
    s_ax = list(range(N))
    a_ax = list(range(N, 2 * N))
    for comp in mix.components:
        comp.check_game(game)
        for c in range(game.C):
            ds = np.zeros(game.state_sizes)
            ds[tuple(game.init_states)] = 1.0
            for h in range(game.H):
                dsa = ds.reshape(ds.shape + (1,) * N)
                for i in range(N):
                    shape = [1] * (2 * N)
                    shape[i] = game.state_sizes[i]
                    shape[N + i] = game.action_sizes[i]
                    dsa = dsa * comp.tables[i][h, c].reshape(shape)
                for i in range(N):
                    R = _joint_reward_tensor(game, rewards[i][h], i, c)
                    values[i] += game.rho[c] * float((dsa * R).sum())
                operands = [dsa, s_ax + a_ax]
                for i in range(N):
                    operands += [game.transitions[i][h, c], [s_ax[i], a_ax[i], 2 * N + i]]
                ds = np.einsum(*operands, [2 * N + i for i in range(N)], optimize=True)
    return values / mix.T


def sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` (shape ``(n, K)``)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf <= u[:, None]).sum(axis=-1), probs.shape[-1] - 1)


@dataclass
class Episodes:
    contexts: np.ndarray  # (n,)
    states: np.ndarray  # (n, H, N)
    actions: np.ndarray  # (n, H, N)
    rewards: np.ndarray  # (n, H, N) observed rewards
    mean_rewards: np.ndarray  # (n, H, N)

    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)


def sample_episodes(game: DecoupledMarkovGame, policy: ProductPolicy, n: int, rng: np.random.Generator,
                    noise: NoiseSpec | None = None) -> Episodes:
    policy.check_game(game)
    noise = game.noise if noise is None else noise
    N, H = game.N, game.H
    c = sample_rows(np.broadcast_to(game.rho, (n, game.C)), rng)
    s = np.tile(np.array(game.init_states), (n, 1))
    states = np.zeros((n, H, N), dtype=np.intp)
    actions = np.zeros((n, H, N), dtype=np.intp)
    means = np.zeros((n, H, N))
    for h in range(H):
        states[:, h] = s
        a = np.stack([sample_rows(policy.tables[i][h, c, s[:, i]], rng) for i in range(N)], axis=1) \
            if N else np.zeros((n, 0), dtype=np.intp)
        actions[:, h] = a
        for i in range(N):
            x = (c * game.state_sizes[i] + s[:, i]) * game.action_sizes[i] + a[:, i]
            y = np.stack([s[:, j] * game.action_sizes[j] + a[:, j] for j in others(i, N)], axis=1) \
                if N > 1 else np.zeros((n, 0), dtype=np.intp)
            means[:, h, i] = evaluate_batch(game.rewards[i][h], x, y)
        s = np.stack([sample_rows(game.transitions[i][h, c, s[:, i], a[:, i]], rng) for i in range(N)], axis=1)
    observed = noise.observe(means, rng)
    return Episodes(c, states, actions, observed, means)


def sample_episode(game: DecoupledMarkovGame, policy: ProductPolicy, rng: np.random.Generator) -> dict:
    """One trajectory ``{"c", "states", "actions", "rewards"}``; the last three are (H, N)."""
    ep = sample_episodes(game, policy, 1, rng)
    return {"c": int(ep.contexts[0]), "states": ep.states[0], "actions": ep.actions[0],
            "rewards": ep.rewards[0]}


def permute_agents(game: DecoupledMarkovGame, perm) -> DecoupledMarkovGame:
    """Game where new agent ``k`` is old agent ``perm[k]``."""
    perm = list(perm)
    N = game.N
    if sorted(perm) != list(range(N)):
        raise DomainError("perm must be a permutation of the agents")
    rewards = []
    for k in range(N):
        old = perm[k]
        old_others = others(old, N)
        new_to_old = [old_others.index(perm[m]) for m in others(k, N)]
        rewards.append([reorder_slots(f, new_to_old) for f in game.rewards[old]])
    return DecoupledMarkovGame(
        game.rho, [game.state_sizes[o] for o in perm], [game.action_sizes[o] for o in perm],
        [game.init_states[o] for o in perm], [game.transitions[o] for o in perm], rewards,
        game.reward_range, game.noise, game.rank)


def random_game(rng: np.random.Generator, N: int, H: int, C: int, S, A, K: int,
                noise: NoiseSpec | None = None, rank_tables: int | None = None,
                transition_concentration: float = 1.0) -> DecoupledMarkovGame:
    """Random game with ``K``-IR rewards in ``[0, 1]``.

    Every table is drawn from ``Uniform(0, 1)`` and divided by the number of
    tables, so each reward lies in ``[0, 1]``.
    """
    S = [S] * N if np.isscalar(S) else list(S)
    A = [A] * N if np.isscalar(A) else list(A)
    trans = [rng.dirichlet(np.full(S[i], transition_concentration), size=(H, C, S[i], A[i])) for i in range(N)]
    init = [int(rng.integers(0, S[i])) for i in range(N)]
    rewards = []
    for i in range(N):
        y_sizes = tuple(S[j] * A[j] for j in others(i, N))
        keys = [k for r in range(min(K - 1, N - 1) + 1) for k in combinations(range(N - 1), r)]
        per_step = []
        for _ in range(H):
            shell = IRFunction(C * S[i] * A[i], y_sizes, K)
            per_step.append(IRFunction(shell.x_size, y_sizes, K,
                                       {k: rng.random(shell.table_shape(k)) / len(keys) for k in keys}))
        rewards.append(per_step)
    return DecoupledMarkovGame(rng.dirichlet(np.ones(C)), S, A, init, trans, rewards,
                               noise=noise or NoiseSpec("bernoulli"), rank=K)


def game_to_dict(game: DecoupledMarkovGame) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "rho": game.rho.tolist(),
        "state_sizes": list(game.state_sizes),
        "action_sizes": list(game.action_sizes),
        "init_states": list(game.init_states),
        "transitions": [P.ravel().tolist() for P in game.transitions],
        "horizon": game.H,
        "rewards": [[ir_to_dict(f) for f in per_agent] for per_agent in game.rewards],
        "reward_range": list(game.reward_range),
        "noise": {"kind": game.noise.kind, "sigma": game.noise.sigma},
        "rank": game.rank,
    }


def game_from_dict(doc: dict) -> DecoupledMarkovGame:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise DomainError(f"unsupported game schema version {doc.get('schema_version')!r}")
    try:
        H, C = int(doc["horizon"]), len(doc["rho"])
        S, A = doc["state_sizes"], doc["action_sizes"]
        trans = [np.asarray(flat, dtype=float).reshape(H, C, S[i], A[i], S[i])
                 for i, flat in enumerate(doc["transitions"])]
        rewards = [[ir_from_dict(f) for f in per_agent] for per_agent in doc["rewards"]]
        return DecoupledMarkovGame(doc["rho"], S, A, doc["init_states"], trans, rewards,
                                   tuple(doc["reward_range"]), NoiseSpec(**doc["noise"]), doc.get("rank"))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"malformed game document: {exc}") from exc


def save_game(game: DecoupledMarkovGame, path):
    with open(path, "w") as fh:
        json.dump(game_to_dict(game), fh)


def load_game(path) -> DecoupledMarkovGame:
    with open(path) as fh:
        return game_from_dict(json.load(fh))


def policy_to_dict(policy) -> dict:
    mix = as_mixture(policy)
    return {
        "schema_version": SCHEMA_VERSION,
        "components": [[{"shape": list(t.shape), "values": t.ravel().tolist()} for t in comp.tables]
                       for comp in mix.components],
    }


def policy_from_dict(doc: dict) -> MixturePolicy:
    try:
        comps = [ProductPolicy([np.asarray(t["values"], dtype=float).reshape(t["shape"]) for t in comp])
                 for comp in doc["components"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed policy document: {exc}") from exc
    return MixturePolicy(comps)
