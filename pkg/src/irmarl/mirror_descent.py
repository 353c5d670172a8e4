"""Chi-square regularized mirror-descent step on the probability simplex.

The step solves

    min_p  -<g, p> + lam * chi2(p, nu) + (1/eta) * sum_a (p_a - q_a)^2 / nu_a

over the simplex. Stationarity gives ``p_a = max(0, b_a - w_a * tau)`` with a
scalar multiplier ``tau``, which an active-set sweep finds exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .games import ContractError

SIMPLEX_TOL = 1e-12

__all__ = [
    "InfiniteDivergenceError",
    "ParameterError",
    "UpdateParams",
    "bregman",
    "chi_square",
    "kkt_residual",
    "regret_audit",
    "regularized_update",
    "update_objective",
]


class InfiniteDivergenceError(ValueError):
    pass


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class UpdateParams:
    lam: float
    eta: float
    B: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ParameterError("lam must be finite and >= 0")
        if not np.isfinite(self.eta) or self.eta <= 0:
            raise ParameterError("eta must be finite and > 0")
        if not self.B > 0:
            raise ParameterError("B must be > 0")


def chi_square(p, nu) -> float:
    """``sum_a (p_a - nu_a)^2 / nu_a``; infinite mass off the support of ``nu`` raises."""
    p, nu = np.asarray(p, dtype=float), np.asarray(nu, dtype=float)
    off = nu <= 0
    if np.any(p[off] > SIMPLEX_TOL):
        raise InfiniteDivergenceError("p puts mass where nu is zero")
    on = ~off
    return float(np.sum((p[on] - nu[on]) ** 2 / nu[on]))


def bregman(p, q, nu) -> float:
    """``sum_a (p_a - q_a)^2 / nu_a``, the Bregman divergence of ``chi_square(., nu)``."""
    p, q, nu = (np.asarray(v, dtype=float) for v in (p, q, nu))
    if np.any(nu <= 0):
        raise InfiniteDivergenceError("nu must be strictly positive")
    return float(np.sum((p - q) ** 2 / nu))


def update_objective(p, gains, pi_t, nu, params: UpdateParams) -> float:
    p = np.asarray(p, dtype=float)
    return float(-np.dot(gains, p) + params.lam * chi_square(p, nu) + bregman(p, pi_t, nu) / params.eta)


def _solve_batch(gains, pi_t, nu, lam, eta):
    """Vectorised exact solve; all inputs ``(n, A)`` with ``nu > 0`` or masked."""
    alpha = 2.0 * (lam + 1.0 / eta)
    support = nu > 0
    w = np.where(support, nu / alpha, 0.0)
    b = np.where(support, (nu * (gains + 2.0 * lam) + (2.0 / eta) * pi_t) / alpha, 0.0)
    free = support.copy()
    for _ in range(gains.shape[-1] + 1):
        tau = ((b * free).sum(-1) - 1.0) / (w * free).sum(-1)
        p = b - w * tau[:, None]
        drop = free & (p <= 0)
        if not drop.any():
            break
        free &= ~drop
    return np.where(free, np.maximum(p, 0.0), 0.0)


def regularized_update(gains, pi_t, nu, params: UpdateParams) -> np.ndarray:
    """Exact minimiser of the regularized step.

    Accepts a single simplex row or a stack of rows ``(..., A)`` which are solved
    independently. Coordinates where ``nu`` is zero stay at zero.
    """
    gains, pi_t, nu = (np.asarray(v, dtype=float) for v in (gains, pi_t, nu))
    if not np.all(np.isfinite(gains)):
        raise ParameterError("gains must be finite")
    shape = np.broadcast_shapes(gains.shape, pi_t.shape, nu.shape)
    A = shape[-1]
    g, q, v = (np.broadcast_to(x, shape).reshape(-1, A) for x in (gains, pi_t, nu))
    if np.any((v <= 0) & (q > SIMPLEX_TOL)):
        raise InfiniteDivergenceError("previous iterate has mass outside the support of nu")
    p = _solve_batch(g, q, v, params.lam, params.eta)
    return p.reshape(shape)


def kkt_residual(p_next, gains, pi_t, nu, params: UpdateParams) -> float:
    """Largest violation of the first-order optimality inequality over simplex vertices.

    With ``f = chi2(., nu)`` the minimiser satisfies
    ``<-eta g + (1 + eta lam) grad f(p') - grad f(q), v - p'> >= 0`` for every vertex ``v``
    in the support of ``nu``. Returns ``max(0, -min_v <...>)``.
    """
    p_next, gains, pi_t, nu = (np.asarray(v, dtype=float) for v in (p_next, gains, pi_t, nu))
    on = nu > 0
    grad = lambda x: 2.0 * (x[on] - nu[on]) / nu[on]
    d = -params.eta * gains[on] + (1 + params.eta * params.lam) * grad(p_next) - grad(pi_t)
    # <d, e_a - p'> for each vertex a in the support
    vals = d - np.dot(d, p_next[on])
    return float(max(0.0, -vals.min()))


def regret_audit(gain_sequence, nu, params: UpdateParams, comparator) -> tuple[float, float]:
    """Run ``T`` steps from ``nu`` and return both sides of the regret bound.

    ``lhs = sum_t <l^t, mu - p^t> + lam * sum_{t <= T+1} chi2(p^t, nu)`` and
    ``rhs = (T lam + 1/eta) chi2(mu, nu) + eta T B^2 / 4``.
    """
    seq = np.asarray(gain_sequence, dtype=float)
    if seq.ndim != 2:
        raise ParameterError("gain_sequence must be (T, A)")
    if np.any(seq < 0) or np.any(seq > params.B):
        raise ContractError("gains must lie in [0, B]")
    nu = np.asarray(nu, dtype=float)
    mu = np.asarray(comparator, dtype=float)
    T = seq.shape[0]
    p = nu.copy()
    regret = 0.0
    drift = chi_square(p, nu)
    for t in range(T):
        regret += float(np.dot(seq[t], mu - p))
        p = regularized_update(seq[t], p, nu, params)
        drift += chi_square(p, nu)
    lhs = regret + params.lam * drift
    rhs = (T * params.lam + 1.0 / params.eta) * chi_square(mu, nu) + params.eta * T * params.B**2 / 4
    return lhs, rhs
