"""Decentralized regularized actor-critic on a learned model.

Each iteration evaluates every agent's critic against the other agents'
current visitation in the learned model, then moves every local policy row
with the chi-square regularized mirror-descent step. The output is the
uniform mixture of the iterates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .games import (
    DecoupledMarkovGame,
    MixturePolicy,
    ProductPolicy,
    expected_local_reward,
    others,
    sample_rows,
    visitation,
)
from .ir_core import DomainError, evaluate_batch, expect_over_slots
from .mirror_descent import ParameterError, UpdateParams, regularized_update
from .model_learning import LearnedModel
from .offline_data import BehaviorPolicy

__all__ = [
    "DracParams",
    "DracResult",
    "cell_chi_square",
    "critic_exact",
    "critic_monte_carlo",
    "run_contextual_game",
    "run_drac",
    "theoretical_hyperparams",
]


@dataclass(frozen=True)
class DracParams:
    T: int
    lam: float
    eta: float
    critic: str = "exact"
    M_sim: int = 1000
    seed: int = 0
    B: float | None = None

    def __post_init__(self):
        if self.T < 1:
            raise ParameterError("T must be >= 1")
        if self.critic not in ("exact", "monte-carlo"):
            raise ParameterError(f"unknown critic mode {self.critic!r}")
        if self.critic == "monte-carlo" and self.M_sim < 1:
            raise ParameterError("M_sim must be >= 1")
        UpdateParams(self.lam, self.eta)


@dataclass
class DracResult:
    mixture: MixturePolicy
    trace: list = field(default_factory=list)
    B: float = 1.0


def _learned(model) -> DecoupledMarkovGame:
    return model.as_game() if isinstance(model, LearnedModel) else model


def critic_exact(model, policy: ProductPolicy, i: int) -> np.ndarray:
    """``Q[h, c, s_i, a_i]`` of agent ``i`` in the learned model, others following ``policy``."""
    game = _learned(model)
    visits = [visitation(game.transitions[j], policy.tables[j], game.init_states[j]) for j in range(game.N)]
    S, A = game.state_sizes[i], game.action_sizes[i]
    Q = np.zeros((game.H, game.C, S, A))
    V_next = np.zeros((game.C, S))
    for h in reversed(range(game.H)):
        r = expected_local_reward(game.rewards[i][h], game.state_sizes, game.action_sizes, visits, i, h, game.C)
        Q[h] = r + np.einsum("csat,ct->csa", game.transitions[i][h], V_next)
        V_next = np.einsum("csa,csa->cs", policy.tables[i][h], Q[h])
    return Q


def critic_monte_carlo(model, policy: ProductPolicy, i: int, h: int, behavior: BehaviorPolicy, M_sim: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rollout estimate of ``Q[h]`` for agent ``i`` and the mask of visited cells.

    Every rollout draws ``c`` from the model's context law and runs all agents
    under ``policy`` up to step ``h``. Agent ``i`` is then reset to
    ``s ~ sigma_{i,h}(.|c)`` and plays ``a ~ (nu + pi)/2``. The rollout continues
    under ``policy`` to the horizon. The tabular least-squares fit is the
    per-cell mean return. Unvisited cells are 0.
    """
    game = _learned(model)
    N, H = game.N, game.H
    sigma = behavior.resolve(game)
    nu = behavior.policy.tables[i]
    c = sample_rows(np.broadcast_to(game.rho, (M_sim, game.C)), rng)
    s = np.tile(np.array(game.init_states), (M_sim, 1))
    for k in range(h):
        a = np.stack([sample_rows(policy.tables[j][k, c, s[:, j]], rng) for j in range(N)], axis=1)
        s = np.stack([sample_rows(game.transitions[j][k, c, s[:, j], a[:, j]], rng) for j in range(N)], axis=1)
    s[:, i] = sample_rows(sigma[i][h, c], rng)
    s_i0 = s[:, i].copy()
    a_i0 = sample_rows(0.5 * nu[h, c, s_i0] + 0.5 * policy.tables[i][h, c, s_i0], rng)
    q = np.zeros(M_sim)
    for k in range(h, H):
        a = np.stack([sample_rows(policy.tables[j][k, c, s[:, j]], rng) for j in range(N)], axis=1)
        if k == h:
            a[:, i] = a_i0
        x = (c * game.state_sizes[i] + s[:, i]) * game.action_sizes[i] + a[:, i]
        cols = [s[:, j] * game.action_sizes[j] + a[:, j] for j in others(i, N)]
        y = np.stack(cols, axis=1) if cols else np.zeros((M_sim, 0), dtype=np.intp)
        q += evaluate_batch(game.rewards[i][k], x, y)
        s = np.stack([sample_rows(game.transitions[j][k, c, s[:, j], a[:, j]], rng) for j in range(N)], axis=1)
    shape = (game.C, game.state_sizes[i], game.action_sizes[i])
    flat = np.ravel_multi_index((c, s_i0, a_i0), shape)
    size = int(np.prod(shape))
    sums = np.bincount(flat, weights=q, minlength=size)
    counts = np.bincount(flat, minlength=size)
    est = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return est.reshape(shape), (counts > 0).reshape(shape)


def cell_chi_square(p: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Row-wise chi-square divergence over the last axis."""
    safe = np.where(nu > 0, nu, 1.0)
    return np.where(nu > 0, (p - nu) ** 2 / safe, 0.0).sum(-1)


def _range_bound(game: DecoupledMarkovGame) -> float:
    width = 0.0
    for per_agent in game.rewards:
        for f in per_agent:
            width = max(width, sum(float(t.max() - t.min()) for t in f.tables.values()))
    return game.H * width


def run_drac(model, behavior: BehaviorPolicy, params: DracParams) -> DracResult:
    """Run ``T`` iterations from ``pi^1 = nu``; returns the mixture of ``pi^1..pi^T`` and a trace.

    Critics are also evaluated at ``t = T`` so every trace row is complete.
    Gains are the critic rows; ``B`` (default ``H`` times a bound on the learned
    reward's spread) only enters the recorded drift bound.
    """
    game = _learned(model)
    nu = behavior.policy
    nu.check_game(game)
    B = params.B if params.B is not None else max(_range_bound(game), 1e-12)
    upd = UpdateParams(params.lam, params.eta, B)
    current = nu
    iterates, trace = [], []
    seeds = np.random.SeedSequence(params.seed)
    for t in range(1, params.T + 1):
        iterates.append(current)
        rows = {}
        for i in range(game.N):
            chi = cell_chi_square(current.tables[i], nu.tables[i])
            for h in range(game.H):
                rows[i, h] = {"t": t, "i": i, "h": h, "max_chi2": float(chi[h].max()),
                              "bound": B * (t - 1) / params.lam if params.lam > 0 else math.inf,
                              "mean_Q": math.nan, "cell_count": 0}
        trace.extend(rows.values())
        if params.critic == "exact":
            Qs = [critic_exact(game, current, i) for i in range(game.N)]
            seen = [np.ones(Q.shape, dtype=bool) for Q in Qs]
        else:
            rngs = iter([np.random.default_rng(s) for s in seeds.spawn(game.N * game.H)])
            est = [[critic_monte_carlo(game, current, i, h, behavior, params.M_sim, next(rngs))
                    for h in range(game.H)] for i in range(game.N)]
            Qs = [np.stack([e[0] for e in per]) for per in est]
            seen = [np.stack([e[1] for e in per]) for per in est]
        new = []
        for i in range(game.N):
            for h in range(game.H):
                rows[i, h]["mean_Q"] = float(Qs[i][h].mean())
                # (c, s) cells whose critic row is backed by a computed value
                rows[i, h]["cell_count"] = int(seen[i][h].any(-1).sum())
        if t == params.T:
            break
        for i in range(game.N):
            try:
                new.append(regularized_update(Qs[i], current.tables[i], nu.tables[i], upd))
            except ValueError as exc:
                raise type(exc)(f"agent {i}: {exc}") from exc
        current = ProductPolicy(new)
    return DracResult(MixturePolicy(tuple(iterates)), trace, B)


def run_contextual_game(rho, rewards, nu: list, params: DracParams) -> MixturePolicy:
    """Standalone contextual-game procedure.

    ``rewards[i]`` is agent ``i``'s learned reward on ``x = (c, a_i)``;
    ``nu[i]`` has shape ``(C, A_i)``. Each round every agent moves along its
    expected reward against the others' current mixed actions.
    """
    N = len(rewards)
    C = len(rho)
    upd = UpdateParams(params.lam, params.eta)
    pis = [np.asarray(v, dtype=float) for v in nu]
    iterates = []
    for t in range(params.T):
        iterates.append([p.copy() for p in pis])
        if t == params.T - 1:
            break
        gains = []
        for i in range(N):
            A_i = pis[i].shape[1]
            dists = [np.repeat(pis[j], A_i, axis=0) for j in others(i, N)]
            gains.append(expect_over_slots(rewards[i], dists).reshape(C, A_i))
        pis = [regularized_update(gains[i], pis[i], nu[i], upd) for i in range(N)]
    return MixturePolicy(tuple(ProductPolicy([p[None, :, None, :] for p in it]) for it in iterates))


def _ceil(x: float) -> int:
    return int(math.ceil(x - 1e-9))


def theoretical_hyperparams(setting: str, K: int, N: int, H: int = 1, eps: float = 0.01,
                            C_S: float = 1.0) -> tuple[int, float, float]:
    """Schedule ``(T, eta, lam)`` balancing regularization bias against regret.

    ``setting`` is ``"CG"`` (contextual game, target gap ``eps``) or ``"MG"``
    (Markov game, ``eps`` is the reward/transition estimation error).
    """
    if min(K, N, H, eps, C_S) <= 0:
        raise DomainError("all inputs must be positive")
    n2 = 2.0 * N**2
    if setting == "CG":
        T = n2 ** (-(2 * K - 2) / (3 * K - 1)) * eps ** (-2 / (3 * K - 1))
        lam = n2 ** ((K - 1) / (3 * K - 1)) * eps ** (1 / (3 * K - 1))
        return _ceil(T), lam, lam
    if setting == "MG":
        lam = C_S ** (K / (3 * K + 2)) * H ** (3 * K / (3 * K + 2)) * n2 ** ((K - 1) / (3 * K + 2)) \
            * eps ** (1 / (3 * K + 2))
        return _ceil(H**2 / lam**2), lam / H**2, lam
    raise DomainError(f"unknown setting {setting!r}")
