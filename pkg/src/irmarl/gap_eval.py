"""Exact equilibrium-gap certification in the true game."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .games import (
    DecoupledMarkovGame,
    ProductPolicy,
    as_mixture,
    exact_value_factored,
    expected_local_reward,
    local_visitation,
)
from .ir_core import DomainError

__all__ = ["GapReport", "averaged_local_reward", "best_response", "gap", "quadratic_gap"]

MIXTURE_CONVENTION = (
    "one deviation per agent, scored against the average over mixture components "
    "of the other agents' component policies"
)


@dataclass
class GapReport:
    best_values: np.ndarray
    policy_values: np.ndarray
    gaps: np.ndarray
    deviations: list
    meta: dict = field(default_factory=lambda: {"mixture_convention": MIXTURE_CONVENTION})

    @property
    def max_gap(self) -> float:
        return float(self.gaps.max())

    def to_dict(self) -> dict:
        return {
            "best_values": self.best_values.tolist(),
            "policy_values": self.policy_values.tolist(),
            "gaps": self.gaps.tolist(),
            "max_gap": self.max_gap,
            "deviations": [d.tolist() for d in self.deviations],
            "meta": self.meta,
        }


def averaged_local_reward(game: DecoupledMarkovGame, policy, i: int) -> np.ndarray:
    """``r_tilde[h, c, s_i, a_i]``: agent ``i``'s reward averaged over the others and the components."""
    mix = as_mixture(policy)
    out = np.zeros((game.H, game.C, game.state_sizes[i], game.action_sizes[i]))
    for comp in mix.components:
        comp.check_game(game)
        visits = [local_visitation(game, comp, j) for j in range(game.N)]
        for h in range(game.H):
            out[h] += expected_local_reward(game.rewards[i][h], game.state_sizes, game.action_sizes,
                                            visits, i, h, game.C)
    return out / mix.T


def best_response(game: DecoupledMarkovGame, policy, i: int) -> tuple[np.ndarray, float]:
    """Optimal deterministic deviation ``actions[h, c, s]`` of agent ``i`` and its value."""
    r = averaged_local_reward(game, policy, i)
    P = game.transitions[i]
    V = np.zeros((game.C, game.state_sizes[i]))
    actions = np.zeros((game.H, game.C, game.state_sizes[i]), dtype=np.intp)
    for h in reversed(range(game.H)):
        Q = r[h] + np.einsum("csat,ct->csa", P[h], V)
        actions[h] = Q.argmax(-1)
        V = Q.max(-1)
    value = float(game.rho @ V[:, game.init_states[i]])
    return actions, value


def gap(game: DecoupledMarkovGame, policy) -> GapReport:
    """Per-agent best-response value minus the policy's value (components averaged)."""
    mix = as_mixture(policy)
    values = exact_value_factored(game, mix)
    best, devs = np.zeros(game.N), []
    for i in range(game.N):
        actions, best[i] = best_response(game, mix, i)
        devs.append(actions)
    return GapReport(best, values, best - values, devs)


def quadratic_gap(actions) -> float:
    """Gap of deterministic actions in the quadratic game.

    Agent ``i`` deviating to ``a`` earns ``a * (a + sum_{j != i} pi_j)``, which is
    convex in ``a`` and so peaks at ``a = +-1``; the current payoff is
    ``pi_i * sum_j pi_j``.
    """
    pi = np.asarray(actions, dtype=float)
    if pi.ndim != 1 or np.any(np.abs(pi) > 1):
        raise DomainError("actions must be a vector in [-1, 1]")
    total = pi.sum()
    rest = total - pi
    best = np.maximum(1 + rest, 1 - rest)
    return float((best - pi * total).max())
