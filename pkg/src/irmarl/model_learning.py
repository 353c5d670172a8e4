"""Offline model fitting: least-squares IR rewards and tabular MLE transitions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import lsqr

from .games import DecoupledMarkovGame, NoiseSpec, ProductPolicy, game_from_dict, game_to_dict, others
from .ir_core import (
    BaseDistribution,
    DomainError,
    IRFunction,
    combine,
    evaluate_batch,
    expected_square,
    standardize,
)
from .offline_data import BehaviorPolicy, OfflineDataset, generate_dataset

__all__ = [
    "IRClassSpec",
    "LearnedModel",
    "SingularDesignError",
    "behavior_base",
    "empirical_base",
    "fit_model",
    "fit_reward_lsr",
    "fit_transition_mle",
    "loglog_slope",
    "rate_audit_lsr",
    "rate_audit_mle",
    "reward_inputs",
]

DENSE_LIMIT = 2 * 10**7


class SingularDesignError(ValueError):
    pass


@dataclass(frozen=True)
class IRClassSpec:
    """Linear class of rank-``K`` IR functions.

    ``subsets`` restricts the sub-function tables (default: every subset of
    the other agents with fewer than ``K`` members).
    """

    K: int
    subsets: tuple | None = None
    ridge: float = 1e-8

    def __post_init__(self):
        if self.K < 1:
            raise DomainError("K must be >= 1")
        if self.ridge < 0:
            raise DomainError("ridge must be >= 0")
        if self.subsets is not None:
            subs = tuple(tuple(sorted(s)) for s in self.subsets)
            if any(len(s) >= self.K for s in subs):
                raise DomainError("subset sizes must be below K")
            object.__setattr__(self, "subsets", subs)

    def keys(self, W: int) -> list[tuple]:
        if self.subsets is not None:
            if any(j >= W for s in self.subsets for j in s):
                raise DomainError("subset refers to a missing slot")
            return sorted(set(self.subsets), key=lambda k: (len(k), k))
        return [k for r in range(min(self.K - 1, W) + 1) for k in combinations(range(W), r)]


def reward_inputs(game: DecoupledMarkovGame, data: OfflineDataset, i: int, h: int):
    """``(x, y)`` index arrays of agent ``i``'s reward for the records at step ``h``."""
    c, s, a = data.c[h], data.s[h], data.a[h]
    x = (c * game.state_sizes[i] + s[:, i]) * game.action_sizes[i] + a[:, i]
    cols = [s[:, j] * game.action_sizes[j] + a[:, j] for j in others(i, game.N)]
    y = np.stack(cols, axis=1) if cols else np.zeros((data.M, 0), dtype=np.intp)
    return x, y


def empirical_base(game: DecoupledMarkovGame, data: OfflineDataset, i: int, h: int,
                   pseudo: float = 0.5) -> BaseDistribution:
    """Empirical law of agent ``i``'s reward inputs at step ``h``, smoothed to be positive.

    Other agents' coordinates are treated as independent given the context,
    matching how the records are drawn.
    """
    x, y = reward_inputs(game, data, i, h)
    px = np.bincount(x, minlength=game.x_size(i)) + pseudo
    rows_per_c = game.state_sizes[i] * game.action_sizes[i]
    dists = []
    for slot, size in enumerate(game.y_sizes(i)):
        counts = np.zeros((game.C, size))
        np.add.at(counts, (data.c[h], y[:, slot]), 1.0)
        counts += pseudo
        dists.append(np.repeat(counts / counts.sum(1, keepdims=True), rows_per_c, axis=0))
    return BaseDistribution(px / px.sum(), tuple(dists))


def behavior_base(game: DecoupledMarkovGame, behavior: BehaviorPolicy, i: int, h: int) -> BaseDistribution:
    """Exact law of agent ``i``'s reward inputs at step ``h`` under the data-generating process."""
    sigma = behavior.resolve(game)
    nu = behavior.policy.tables

    def joint(j):
        return sigma[j][h][:, :, None] * nu[j][h]  # (C, S, A)

    px = (game.rho[:, None, None] * joint(i)).ravel()
    rows_per_c = game.state_sizes[i] * game.action_sizes[i]
    dists = tuple(np.repeat(joint(j).reshape(game.C, -1), rows_per_c, axis=0) for j in others(i, game.N))
    return BaseDistribution(px, dists)


def _design(f_shape: IRFunction, keys, x, y):
    """Sparse one-hot design: one column per table entry of every subset in ``keys``."""
    cols, offset = [], 0
    for key in keys:
        shape = f_shape.table_shape(key)
        flat = np.ravel_multi_index((x,) + tuple(y[:, j] for j in key), shape)
        cols.append(flat + offset)
        offset += int(np.prod(shape))
    n = len(x)
    indices = np.stack(cols, axis=1).ravel()
    indptr = np.arange(0, n * len(keys) + 1, len(keys))
    return sp.csr_matrix((np.ones(n * len(keys)), indices, indptr), shape=(n, offset)), offset


def fit_reward_lsr(game: DecoupledMarkovGame, data: OfflineDataset, spec: IRClassSpec, i: int, h: int,
                   base: BaseDistribution | None = None) -> IRFunction:
    """Least-squares fit of agent ``i``'s step-``h`` reward over the IR class.

    Records with identical inputs are pooled (count weights, mean target) so
    the cost scales with the number of distinct inputs. The result is returned
    in standardized form against ``base`` (default: the smoothed empirical law).
    """
    if data.M == 0:
        raise DomainError("empty dataset")
    shell = IRFunction(game.x_size(i), game.y_sizes(i), spec.K)
    keys = spec.keys(shell.W)
    x, y = reward_inputs(game, data, i, h)
    target = data.r[h, :, i]
    xy = np.column_stack([x, y])
    uniq, inverse, counts = np.unique(xy, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    mean = np.bincount(inverse, weights=target) / counts
    Phi, P = _design(shell, keys, uniq[:, 0], uniq[:, 1:])
    sw = np.sqrt(counts.astype(float))
    A = sp.diags(sw) @ Phi
    b = sw * mean
    if spec.ridge == 0:
        gram = (A.T @ A).toarray() if P <= 5000 else None
        if gram is not None and np.linalg.matrix_rank(gram) < P:
            raise SingularDesignError("design is rank deficient; use ridge > 0")
    else:
        A = sp.vstack([A, np.sqrt(spec.ridge) * sp.identity(P)])
        b = np.concatenate([b, np.zeros(P)])
    if A.shape[0] * P <= DENSE_LIMIT:
        theta = np.linalg.lstsq(A.toarray(), b, rcond=None)[0]
    else:
        theta = lsqr(A.tocsr(), b, atol=1e-14, btol=1e-14, iter_lim=20 * P)[0]
    tables, offset = {}, 0
    for key in keys:
        shape = shell.table_shape(key)
        size = int(np.prod(shape))
        tables[key] = theta[offset:offset + size].reshape(shape)
        offset += size
    f = IRFunction(shell.x_size, shell.y_sizes, spec.K, tables)
    return standardize(f, base if base is not None else empirical_base(game, data, i, h))


def transition_counts(game: DecoupledMarkovGame, data: OfflineDataset, i: int, h: int) -> np.ndarray:
    S, A = game.state_sizes[i], game.action_sizes[i]
    counts = np.zeros((game.C, S, A, S))
    np.add.at(counts, (data.c[h], data.s[h, :, i], data.a[h, :, i], data.sp[h, :, i]), 1.0)
    return counts


def fit_transition_mle(game: DecoupledMarkovGame, data: OfflineDataset, i: int, h: int,
                       alpha: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Add-``alpha`` smoothed empirical conditionals ``(C, S, A, S)`` and the unseen-row mask."""
    if alpha < 0:
        raise DomainError("alpha must be >= 0")
    raw = transition_counts(game, data, i, h)
    unseen = raw.sum(-1) == 0
    counts = raw + alpha
    totals = counts.sum(-1, keepdims=True)
    S = counts.shape[-1]
    P = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / S)
    return P, unseen


@dataclass(eq=False)
class LearnedModel:
    """Fitted rewards ``rewards[i][h]`` and transitions ``transitions[i]`` of shape ``(H, C, S, A, S)``."""

    template: DecoupledMarkovGame
    rewards: list
    transitions: list
    rho: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def as_game(self) -> DecoupledMarkovGame:
        """The learned model packaged as a game (used for planning, never for evaluation)."""
        g = self.template
        bounds = np.array([f.value_bounds() for per_agent in self.rewards for f in per_agent])
        return DecoupledMarkovGame(self.rho, g.state_sizes, g.action_sizes, g.init_states, self.transitions,
                                   self.rewards, reward_range=(bounds[:, 0].min(), bounds[:, 1].max()),
                                   noise=NoiseSpec("none"))

    def reward_bound(self) -> float:
        """Upper bound on ``max r_hat - min r_hat`` from the table spreads."""
        width = 0.0
        for per_agent in self.rewards:
            for f in per_agent:
                width = max(width, sum(float(t.max() - t.min()) for t in f.tables.values()))
        return width

    def to_dict(self) -> dict:
        # only the learned game is stored; the template contributes nothing but its sizes
        return {"learned": game_to_dict(self.as_game()), "diagnostics": self.diagnostics}

    @classmethod
    def from_dict(cls, doc: dict) -> "LearnedModel":
        learned = game_from_dict(doc["learned"])
        return cls(learned, [list(r) for r in learned.rewards], list(learned.transitions), learned.rho,
                   doc.get("diagnostics", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LearnedModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_model(game: DecoupledMarkovGame, data: OfflineDataset, spec: IRClassSpec, alpha: float = 0.1) -> LearnedModel:
    """Fit every agent's rewards and transitions at every step.

    ``game`` supplies only sizes and initial states; its rewards and
    transitions are not read.
    """
    data.check_game(game)
    rewards, trans = [], []
    diag = {"train_mse": [], "unseen_rows": [], "log_likelihood": []}
    for i in range(game.N):
        per_step, P_i, mse_i, unseen_i, ll_i = [], [], [], [], []
        for h in range(game.H):
            f = fit_reward_lsr(game, data, spec, i, h)
            x, y = reward_inputs(game, data, i, h)
            per_step.append(f)
            mse_i.append(float(np.mean((evaluate_batch(f, x, y) - data.r[h, :, i]) ** 2)))
            P, unseen = fit_transition_mle(game, data, i, h, alpha)
            P_i.append(P)
            unseen_i.append(int(unseen.sum()))
            probs = P[data.c[h], data.s[h, :, i], data.a[h, :, i], data.sp[h, :, i]]
            ll_i.append(float(np.log(np.maximum(probs, 1e-300)).sum()))
        rewards.append(per_step)
        trans.append(np.stack(P_i))
        diag["train_mse"].append(mse_i)
        diag["unseen_rows"].append(unseen_i)
        diag["log_likelihood"].append(ll_i)
    rho = np.bincount(data.c.ravel(), minlength=game.C) / data.c.size
    return LearnedModel(game, rewards, trans, rho, diag)


def loglog_slope(Ms, values) -> float:
    return float(np.polyfit(np.log(np.asarray(Ms, dtype=float)), np.log(np.asarray(values, dtype=float)), 1)[0])


def rate_audit_lsr(game: DecoupledMarkovGame, spec: IRClassSpec, M_grid, trials: int, seed: int = 0,
                   behavior: BehaviorPolicy | None = None) -> dict:
    """Mean population MSE of the fitted rewards under the behavior law, per sample size."""
    behavior = behavior or BehaviorPolicy(ProductPolicy.uniform(game))
    bases = [[behavior_base(game, behavior, i, h) for h in range(game.H)] for i in range(game.N)]
    seeds = np.random.SeedSequence(seed).spawn(len(M_grid) * trials)
    mse = []
    for k, M in enumerate(M_grid):
        errs = []
        for t in range(trials):
            s = int(seeds[k * trials + t].generate_state(1)[0])
            data = generate_dataset(game, behavior, int(M), seed=s)
            for i in range(game.N):
                for h in range(game.H):
                    f = fit_reward_lsr(game, data, spec, i, h)
                    errs.append(expected_square(combine(game.rewards[i][h], f), bases[i][h]))
        mse.append(float(np.mean(errs)))
    return {"M": list(M_grid), "mse": mse, "slope": loglog_slope(M_grid, mse)}


def rate_audit_mle(game: DecoupledMarkovGame, M_grid, trials: int, seed: int = 0, alpha: float = 0.0,
                   behavior: BehaviorPolicy | None = None) -> dict:
    """Mean ``E_{(c,s,a)}||P_hat - P||_1^2`` under the behavior law, per sample size."""
    behavior = behavior or BehaviorPolicy(ProductPolicy.uniform(game))
    sigma = behavior.resolve(game)
    weights = [[game.rho[:, None, None] * sigma[i][h][:, :, None] * behavior.policy.tables[i][h]
                for h in range(game.H)] for i in range(game.N)]
    seeds = np.random.SeedSequence(seed).spawn(len(M_grid) * trials)
    err = []
    for k, M in enumerate(M_grid):
        errs = []
        for t in range(trials):
            s = int(seeds[k * trials + t].generate_state(1)[0])
            data = generate_dataset(game, behavior, int(M), seed=s)
            for i in range(game.N):
                for h in range(game.H):
                    P, _ = fit_transition_mle(game, data, i, h, alpha)
                    l1 = np.abs(P - game.transitions[i][h]).sum(-1)
                    errs.append(float((weights[i][h] * l1**2).sum()))
        err.append(float(np.mean(errs)))
    return {"M": list(M_grid), "l1sq": err, "slope": loglog_slope(M_grid, err)}
