"""Continuous-action quadratic game with three critic classes.

Every agent picks ``a_i`` in ``[-1, 1]`` and earns ``a_i * sum_j a_j / sqrt(N)``
plus uniform noise. Rewards are fitted by least squares on exact feature
bases:

* ``1-IR``: ``{1, a_i, a_i^2}`` (cannot see the other agents);
* ``2-IR``: ``{1, a_i, a_i^2} + {a_j, a_i a_j : j != i}`` (realizable);
* ``joint``: ``{1} + {a_j} + {a_j a_k : j <= k}`` (realizable, many parameters).

Each agent then runs deterministic gradient ascent on its fitted critic with an
L2 pull toward the behavior mean action, in the style of TD3+BC.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gap_eval import quadratic_gap
from .ir_core import DomainError

ARMS = ("1-IR", "2-IR", "joint")

__all__ = ["ARMS", "QuadraticConfig", "QuadraticCritic", "feature_count", "fit_critic", "job_seeds", "load_data",
           "run_actor", "run_arm", "run_job", "sample_data", "save_data"]


def feature_count(arm: str, N: int) -> int:
    """Number of least-squares parameters per agent for a critic arm."""
    if arm == "1-IR":
        return 3
    if arm == "2-IR":
        return 3 + 2 * (N - 1)
    if arm == "joint":
        return 1 + N + N * (N + 1) // 2
    raise DomainError(f"unknown critic arm {arm!r}")


@dataclass(frozen=True)
class QuadraticConfig:
    """``M`` defaults to ``sigma * N / ratio`` (ratio 0.1); give it explicitly when ``sigma = 0``."""

    N: int = 8
    sigma: float = 1.0
    M: int | None = None
    ratio: float = 0.1
    steps: int = 200
    lr: float = 0.05
    alpha: float = 5.0
    bc_weight: float = 1.0
    init_scale: float = 0.1

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("N must be >= 2")
        if self.sigma < 0:
            raise DomainError("sigma must be >= 0")
        if self.M is None and self.sigma == 0:
            raise DomainError("zero noise needs an explicit M")
        if self.sample_count() < 1:
            raise DomainError("M must be >= 1")
        if self.steps < 0 or self.lr <= 0 or self.bc_weight < 0:
            raise DomainError("steps >= 0, lr > 0 and bc_weight >= 0 are required")

    @classmethod
    def matched_budget(cls, N: int, ratio: float = 0.1, **kw) -> "QuadraticConfig":
        """Sample budget equal to the joint critic's parameter count, noise set by ``sigma * N / M = ratio``."""
        M = feature_count("joint", N)
        return cls(N=N, sigma=ratio * M / N, M=M, ratio=ratio, **kw)

    def sample_count(self) -> int:
        if self.M is not None:
            return int(self.M)
        return int(round(self.sigma * self.N / self.ratio))


def sample_data(cfg: QuadraticConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Uniform behavior actions ``(M, N)`` and noisy rewards ``(M, N)``."""
    M, N = cfg.sample_count(), cfg.N
    a = rng.uniform(-1, 1, (M, N))
    mean = a * a.sum(1, keepdims=True) / np.sqrt(N)
    return a, mean + rng.uniform(-cfg.sigma, cfg.sigma, (M, N))


def features(arm: str, i: int, a: np.ndarray) -> np.ndarray:
    """Feature matrix of agent ``i``'s critic for joint actions ``a`` of shape ``(n, N)``."""
    ai = a[:, i:i + 1]
    one = np.ones_like(ai)
    if arm == "1-IR":
        return np.hstack([one, ai, ai**2])
    rest = np.delete(a, i, axis=1)
    if arm == "2-IR":
        return np.hstack([one, ai, ai**2, rest, ai * rest])
    if arm == "joint":
        j, k = np.triu_indices(a.shape[1])
        return np.hstack([one, a, a[:, j] * a[:, k]])
    raise DomainError(f"unknown critic arm {arm!r}")


def feature_grad(arm: str, i: int, a: np.ndarray) -> np.ndarray:
    """``d features / d a_i`` at a single joint action ``a`` of shape ``(N,)``."""
    N = a.shape[0]
    ai = a[i]
    if arm == "1-IR":
        return np.array([0.0, 1.0, 2 * ai])
    rest = np.delete(a, i)
    if arm == "2-IR":
        return np.concatenate([[0.0, 1.0, 2 * ai], np.zeros(N - 1), rest])
    j, k = np.triu_indices(N)
    unit = np.eye(N)[i]
    pair = np.where(j == i, a[k], 0.0) + np.where(k == i, a[j], 0.0)
    return np.concatenate([[0.0], unit, pair])


@dataclass
class QuadraticCritic:
    arm: str
    coef: list  # per agent coefficient vector
    scale: np.ndarray  # per agent mean |r_hat| on the data

    def grad(self, a: np.ndarray) -> np.ndarray:
        return np.array([feature_grad(self.arm, i, a) @ self.coef[i] for i in range(len(self.coef))])

    def predict(self, i: int, a: np.ndarray) -> np.ndarray:
        return features(self.arm, i, np.atleast_2d(a)) @ self.coef[i]


def fit_critic(arm: str, actions: np.ndarray, rewards: np.ndarray) -> QuadraticCritic:
    """Least squares (minimum norm when under-determined) per agent."""
    N = actions.shape[1]
    coefs, scale = [], np.zeros(N)
    for i in range(N):
        X = features(arm, i, actions)
        theta = np.linalg.lstsq(X, rewards[:, i], rcond=None)[0]
        coefs.append(theta)
        scale[i] = np.mean(np.abs(X @ theta))
    return QuadraticCritic(arm, coefs, scale)


def run_actor(critic: QuadraticCritic, cfg: QuadraticConfig, rng: np.random.Generator,
              behavior_mean: float = 0.0) -> tuple[np.ndarray, list[float]]:
    """Simultaneous gradient ascent on ``lam_i * r_hat_i - w * (a_i - mean)^2``.

    ``lam_i = alpha / mean|r_hat_i|``. The L2 pull is applied as an exact
    proximal step, so any ``w`` is stable and ``w = inf`` pins the behavior mean.
    Returns final actions and the gap after every step (index 0 is the start).
    """
    N = cfg.N
    if np.isinf(cfg.bc_weight):
        a = np.full(N, behavior_mean)
        return a, [quadratic_gap(a)] * (cfg.steps + 1)
    lam = cfg.alpha / np.maximum(critic.scale, 1e-12)
    a = np.clip(behavior_mean + cfg.init_scale * rng.standard_normal(N), -1, 1)
    gaps = [quadratic_gap(a)]
    pull = 2 * cfg.lr * cfg.bc_weight
    for _ in range(cfg.steps):
        step = a + cfg.lr * lam * critic.grad(a)
        a = np.clip((step + pull * behavior_mean) / (1 + pull), -1, 1)
        gaps.append(quadratic_gap(a))
    return a, gaps


def run_arm(arm: str, cfg: QuadraticConfig, data: tuple[np.ndarray, np.ndarray], rng: np.random.Generator):
    """Fit one critic arm on ``data`` and train the actors; returns ``(critic, actions, gaps)``."""
    critic = fit_critic(arm, *data)
    actions, gaps = run_actor(critic, cfg, rng)
    return critic, actions, gaps


def job_seeds(root: np.random.SeedSequence, N: int, index: int) -> tuple[np.random.SeedSequence, ...]:
    """``(data, actor)`` seed sequences of study job ``(N, index)``, independent of job order."""
    job = np.random.SeedSequence(root.entropy, spawn_key=tuple(root.spawn_key) + (N, index))
    return tuple(job.spawn(2))


def save_data(path, data: tuple[np.ndarray, np.ndarray]):
    a, r = data
    N = a.shape[1]
    header = ",".join([f"a{j}" for j in range(N)] + [f"r{j}" for j in range(N)])
    np.savetxt(path, np.hstack([a, r]), delimiter=",", fmt="%.17g", header=header, comments="")


def load_data(path) -> tuple[np.ndarray, np.ndarray]:
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    N = table.shape[1] // 2
    return table[:, :N], table[:, N:]


def run_job(cfg: QuadraticConfig, root: np.random.SeedSequence, index: int, arms=ARMS, data_path=None) -> dict:
    """One seed of the study: every arm is fitted on the same dataset and starts from the same actions.

    With ``data_path`` the dataset is written there and every arm reads it back.
    Returns ``{arm: gap trace}``.
    """
    data_ss, actor_ss = job_seeds(root, cfg.N, index)
    data = sample_data(cfg, np.random.default_rng(data_ss))
    if data_path is not None:
        save_data(data_path, data)
    out = {}
    for arm in arms:
        arm_data = load_data(data_path) if data_path is not None else data
        out[arm] = run_arm(arm, cfg, arm_data, np.random.default_rng(actor_ss))[2]
    return out
