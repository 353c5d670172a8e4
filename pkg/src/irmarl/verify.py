"""Inequality suites run on frozen-seed instance sets.

Every suite evaluates ``bound - observed`` on each instance and reports the
smallest such slack; a suite passes when the worst slack is non-negative.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .drac import DracParams, run_drac
from .games import NoiseSpec, ProductPolicy, local_visitation, random_game
from .ir_core import (
    DomainError,
    density_ratio_bound,
    random_base,
    random_ir_function,
    shift_bound,
    shift_constant,
    shifted_mse,
    standardize,
    subfunction_errors,
)
from .mirror_descent import UpdateParams, regret_audit
from .model_learning import IRClassSpec, fit_model, rate_audit_lsr, rate_audit_mle
from .offline_data import BehaviorPolicy, generate_dataset

__all__ = ["SUITES", "SuiteResult", "run_suite", "positive_policy", "adversarial_gains"]


@dataclass
class SuiteResult:
    name: str
    checks: int
    worst_slack: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.checks > 0 and self.worst_slack >= 0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.checks} checks, worst slack {self.worst_slack:.3e}"


def positive_policy(rng: np.random.Generator, game, floor: float = 0.1) -> ProductPolicy:
    """Random product policy with every action probability at least ``floor / A_i``."""
    tables = []
    for S, A in zip(game.state_sizes, game.action_sizes):
        p = rng.dirichlet(np.ones(A), size=(game.H, game.C, S))
        tables.append((1 - floor) * p + floor / A)
    return ProductPolicy(tables)


def adversarial_gains(rng: np.random.Generator, T: int, A: int, B: float = 1.0) -> np.ndarray:
    """A ``(T, A)`` gain sequence in ``[0, B]`` drawn from one of several hard families."""
    kind = int(rng.integers(4))
    if kind == 0:  # i.i.d. uniform
        g = rng.uniform(0, 1, (T, A))
    elif kind == 1:  # alternate the winning action every round
        g = np.zeros((T, A))
        g[np.arange(T), np.arange(T) % A] = 1.0
    elif kind == 2:  # one action wins early, another late
        g = np.zeros((T, A))
        cut = int(rng.integers(1, T))
        first, second = rng.choice(A, 2, replace=A < 2)
        g[:cut, first] = 1.0
        g[cut:, second] = 1.0
    else:  # fixed best action plus noise
        g = rng.uniform(0, 0.5, (T, A))
        g[:, int(rng.integers(A))] += 0.5
    return B * g


def _shift(seed: int, n: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, ratios = np.inf, []
    for _ in range(n):
        K, W = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        x_size = int(rng.integers(1, 4))
        y_sizes = tuple(int(v) for v in rng.integers(1, 4, W))
        train = random_base(rng, x_size, y_sizes, floor=0.2)
        target = random_base(rng, x_size, y_sizes, concentration=0.5, floor=0.1)
        f = random_ir_function(rng, x_size, y_sizes, K)
        g = random_ir_function(rng, x_size, y_sizes, K)
        eps = shifted_mse(f, g, train)
        rhs = shift_bound(W, K, density_ratio_bound(train, target), eps, shift_constant(W, K))
        lhs = shifted_mse(f, g, target)
        worst = min(worst, rhs * (1 + 1e-12) + 1e-15 - lhs)  # equality when C_DS = 1 and K = 1
        ratios.append(lhs / rhs)
    return SuiteResult("shift", n, worst, {"max_ratio": max(ratios)})


def _alignment(seed: int, n: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checks = np.inf, 0
    for _ in range(n):
        K, W = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        x_size = int(rng.integers(1, 4))
        y_sizes = tuple(int(v) for v in rng.integers(1, 5, W))
        base = random_base(rng, x_size, y_sizes, floor=0.05)
        f = standardize(random_ir_function(rng, x_size, y_sizes, K), base)
        g = standardize(random_ir_function(rng, x_size, y_sizes, K), base)
        eps = shifted_mse(f, g, base)
        for key, err in subfunction_errors(f, g, base).items():
            worst = min(worst, 2 ** len(key) * eps + 1e-9 - err)
            checks += 1
    return SuiteResult("alignment", checks, worst)


def _drift(seed: int, n: int = 20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checks = np.inf, 0
    for _ in range(n):
        N, H, S, A = (int(v) for v in rng.integers([1, 1, 1, 2], [4, 4, 3, 4]))
        game = random_game(rng, N, H, 2, S, A, min(2, N))
        lam, eta = float(rng.uniform(0.05, 3)), float(rng.uniform(0.05, 3))
        res = run_drac(game, BehaviorPolicy(positive_policy(rng, game)), DracParams(10, lam, eta))
        for row in res.trace:
            worst = min(worst, res.B * (row["t"] - 1) / lam + 1e-9 - row["max_chi2"])
            checks += 1
    return SuiteResult("drift", checks, worst)


def _regret(seed: int, n: int = 100, T: int = 200) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        A = int(rng.integers(2, 6))
        nu = 0.8 * rng.dirichlet(np.ones(A)) + 0.2 / A
        params = UpdateParams(float(rng.uniform(0.01, 2)), float(rng.uniform(0.01, 2)), 1.0)
        gains = adversarial_gains(rng, T, A)
        mu = np.eye(A)[int(gains.sum(0).argmax())]
        lhs, rhs = regret_audit(gains, nu, params, mu)
        worst = min(worst, rhs - lhs)
    return SuiteResult("regret", n, worst)


def _tv(seed: int, n: int = 20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst, checks = np.inf, 0
    for _ in range(n):
        N = int(rng.integers(2, 4))
        game = random_game(rng, N, 3, 2, 2, 2, 1)
        data = generate_dataset(game, BehaviorPolicy(ProductPolicy.uniform(game)), 200, seed=int(rng.integers(2**31)))
        model = fit_model(game, data, IRClassSpec(1), alpha=0.1).as_game()
        pol = positive_policy(rng, game)
        true = [local_visitation(game, pol, j) for j in range(N)]
        learned = [local_visitation(model, pol, j) for j in range(N)]
        for h in range(game.H):
            for c in range(game.C):
                jt, jl = np.ones(1), np.ones(1)
                for j in range(N):
                    jt = np.multiply.outer(jt, true[j][h, c].ravel())
                    jl = np.multiply.outer(jl, learned[j][h, c].ravel())
                budget = 0.0
                for j in range(N):
                    for k in range(h):
                        l1 = np.abs(model.transitions[j][k, c] - game.transitions[j][k, c]).sum(-1)
                        budget += float((true[j][k, c] * l1).sum())
                worst = min(worst, budget + 1e-12 - float(np.abs(jt - jl).sum()))
                checks += 1
    return SuiteResult("tv", checks, worst)


def _rates(seed: int, trials: int = 20, target: float = -0.8) -> SuiteResult:
    rng = np.random.default_rng(seed)
    game = random_game(rng, 2, 1, 1, 2, 2, 2, noise=NoiseSpec("bernoulli"))
    grid = [100, 1000, 10000]
    lsr = rate_audit_lsr(game, IRClassSpec(2), grid, trials=trials, seed=seed)
    mle = rate_audit_mle(game, grid, trials=trials, seed=seed)
    worst = min(target - lsr["slope"], target - mle["slope"])
    return SuiteResult("rates", 2, worst, {"lsr_slope": lsr["slope"], "mle_slope": mle["slope"]})


SUITES = {
    "shift": _shift,
    "alignment": _alignment,
    "drift": _drift,
    "regret": _regret,
    "tv": _tv,
    "rates": _rates,
}


def run_suite(name: str, seed: int = 0) -> list[SuiteResult]:
    """Run one named suite, or every suite for ``"all"``."""
    if name == "all":
        return [SUITES[k](seed) for k in SUITES]
    if name not in SUITES:
        raise DomainError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    return [SUITES[name](seed)]
