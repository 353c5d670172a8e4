"""Functions of bounded interaction rank over finite domains.

An :class:`IRFunction` ``f(x, y_1, ..., y_W)`` is stored as a sum of dense
sub-function tables, one per subset ``S`` of the ``y`` slots with
``|S| < rank``.  The table for ``S = (j_1, ..., j_k)`` has shape
``(x_size, y_sizes[j_1], ..., y_sizes[j_k])``.  Slots are 0-based.

The standardized decomposition against a base distribution (``x ~ p``,
``y_j ~ p_j(. | x)`` independently given ``x``) centres every sub-function
with ``k >= 1`` so that its conditional mean in each of its own slots is
zero.  Centred components are orthogonal under the base distribution, which
is what makes the exact error diagnostics below cheap.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np

Subset = tuple[int, ...]

PROB_TOL = 1e-12

__all__ = [
    "DomainError",
    "PreconditionError",
    "InfiniteRatioError",
    "IRFunction",
    "BaseDistribution",
    "evaluate",
    "evaluate_batch",
    "dense_table",
    "combine",
    "standardize",
    "standardization_residual",
    "expect_over_slots",
    "expected_square",
    "subfunction_errors",
    "shift_constant",
    "shifted_mse",
    "density_ratio_bound",
    "shift_bound",
    "random_ir_function",
    "random_base",
    "ir_to_dict",
    "ir_from_dict",
    "ir_dumps",
    "ir_loads",
    "reorder_slots",
]


class DomainError(ValueError):
    """Index or shape does not match the declared domains."""


class PreconditionError(ValueError):
    """An operation precondition on its inputs does not hold."""


class InfiniteRatioError(ValueError):
    """Target distribution puts mass where the training distribution has none."""


def _all_subsets(n_slots: int, rank: int):
    for k in range(min(rank - 1, n_slots) + 1):
        yield from combinations(range(n_slots), k)


@dataclass(frozen=True, eq=False)
class IRFunction:
    x_size: int
    y_sizes: tuple[int, ...]
    rank: int
    tables: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "y_sizes", tuple(int(s) for s in self.y_sizes))
        if self.x_size < 1 or any(s < 1 for s in self.y_sizes):
            raise DomainError("slot sizes must be >= 1")
        if self.rank < 1:
            raise DomainError(f"rank must be >= 1, got {self.rank}")
        frozen = {}
        for key, values in self.tables.items():
            key = tuple(int(j) for j in key)
            if list(key) != sorted(set(key)):
                raise DomainError(f"subset {key} is not strictly increasing")
            if len(key) >= self.rank:
                raise DomainError(f"subset {key} violates rank {self.rank}")
            if key and (key[0] < 0 or key[-1] >= self.W):
                raise DomainError(f"subset {key} out of range for W={self.W}")
            arr = np.array(values, dtype=float)
            expected = self.table_shape(key)
            if arr.shape != expected:
                raise DomainError(f"table {key} has shape {arr.shape}, expected {expected}")
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"table {key} has non-finite entries")
            arr.setflags(write=False)
            frozen[key] = arr
        object.__setattr__(self, "tables", dict(sorted(frozen.items(), key=lambda kv: (len(kv[0]), kv[0]))))

    @property
    def W(self) -> int:
        return len(self.y_sizes)

    def table_shape(self, subset: Subset) -> tuple[int, ...]:
        return (self.x_size,) + tuple(self.y_sizes[j] for j in subset)

    @classmethod
    def zeros(cls, x_size, y_sizes, rank=1):
        return cls(x_size, tuple(y_sizes), rank, {(): np.zeros(x_size)})

    @classmethod
    def constant(cls, value, x_size, y_sizes, rank=1):
        return cls(x_size, tuple(y_sizes), rank, {(): np.full(x_size, float(value))})

    def same_domains(self, other: "IRFunction") -> bool:
        return self.x_size == other.x_size and self.y_sizes == other.y_sizes

    def allclose(self, other: "IRFunction", atol: float = 1e-10) -> bool:
        """Table-wise comparison; missing tables count as zero."""
        if not self.same_domains(other):
            return False
        for key in set(self.tables) | set(other.tables):
            a = self.tables.get(key)
            b = other.tables.get(key)
            a = np.zeros(self.table_shape(key)) if a is None else a
            b = np.zeros(self.table_shape(key)) if b is None else b
            if not np.allclose(a, b, rtol=0.0, atol=atol):
                return False
        return True

    def value_bounds(self) -> tuple[float, float]:
        """Cheap envelope ``lo <= f <= hi`` from per-table extrema."""
        lo = sum(float(t.min()) for t in self.tables.values())
        hi = sum(float(t.max()) for t in self.tables.values())
        return lo, hi


def _check_point(f: IRFunction, x, y):
    if not 0 <= x < f.x_size:
        raise DomainError(f"x={x} outside [0, {f.x_size})")
    if len(y) != f.W:
        raise DomainError(f"expected {f.W} y indices, got {len(y)}")
    for j, (yj, size) in enumerate(zip(y, f.y_sizes)):
        if not 0 <= yj < size:
            raise DomainError(f"y[{j}]={yj} outside [0, {size})")


def evaluate(f: IRFunction, x: int, y) -> float:
    y = tuple(int(v) for v in y)
    _check_point(f, int(x), y)
    return float(sum(t[(x,) + tuple(y[j] for j in key)] for key, t in f.tables.items()))


def evaluate_batch(f: IRFunction, x, y) -> np.ndarray:
    """Vectorised :func:`evaluate` for ``x`` of shape (n,) and ``y`` of shape (n, W)."""
    x = np.asarray(x, dtype=np.intp)
    y = np.asarray(y, dtype=np.intp).reshape(len(x), f.W)
    if x.size and (x.min() < 0 or x.max() >= f.x_size):
        raise DomainError("x index out of domain")
    for j, size in enumerate(f.y_sizes):
        if y.shape[0] and (y[:, j].min() < 0 or y[:, j].max() >= size):
            raise DomainError(f"y[{j}] index out of domain")
    out = np.zeros(len(x))
    for key, t in f.tables.items():
        out += t[(x,) + tuple(y[:, j] for j in key)]
    return out


def dense_table(f: IRFunction, max_cells: int = 10**7) -> np.ndarray:
    """Materialise ``f`` on the full product domain, shape ``(x_size, *y_sizes)``."""
    cells = f.x_size * int(np.prod(f.y_sizes, dtype=np.int64))
    if cells > max_cells:
        raise DomainError(f"dense table would have {cells} cells")
    out = np.zeros((f.x_size,) + f.y_sizes)
    for key, t in f.tables.items():
        shape = (f.x_size,) + tuple(f.y_sizes[j] if j in key else 1 for j in range(f.W))
        out = out + t.reshape(shape)
    return out


def combine(f: IRFunction, g: IRFunction, a: float = 1.0, b: float = -1.0) -> IRFunction:
    """``a * f + b * g`` as an IRFunction of rank ``max(f.rank, g.rank)``."""
    if not f.same_domains(g):
        raise DomainError("domain mismatch")
    tables = {}
    for key in set(f.tables) | set(g.tables):
        acc = np.zeros(f.table_shape(key))
        if key in f.tables:
            acc = acc + a * f.tables[key]
        if key in g.tables:
            acc = acc + b * g.tables[key]
        tables[key] = acc
    return IRFunction(f.x_size, f.y_sizes, max(f.rank, g.rank), tables)


@dataclass(frozen=True, eq=False)
class BaseDistribution:
    """``x ~ x_dist`` and, independently given ``x``, ``y_j ~ y_dists[j][x]``."""

    x_dist: np.ndarray
    y_dists: tuple

    def __post_init__(self):
        x = np.array(self.x_dist, dtype=float)
        ys = tuple(np.array(p, dtype=float) for p in self.y_dists)
        if x.ndim != 1 or np.any(x < 0) or abs(x.sum() - 1.0) > PROB_TOL:
            raise DomainError("x_dist must be a probability vector")
        for j, p in enumerate(ys):
            if p.ndim != 2 or p.shape[0] != x.shape[0]:
                raise DomainError(f"y_dists[{j}] must have shape (x_size, |Y_{j}|)")
            if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > PROB_TOL):
                raise DomainError(f"y_dists[{j}] rows must be probability vectors")
        for arr in (x,) + ys:
            arr.setflags(write=False)
        object.__setattr__(self, "x_dist", x)
        object.__setattr__(self, "y_dists", ys)

    @property
    def x_size(self) -> int:
        return self.x_dist.shape[0]

    @property
    def y_sizes(self) -> tuple[int, ...]:
        return tuple(p.shape[1] for p in self.y_dists)

    def matches(self, f: IRFunction) -> bool:
        return self.x_size == f.x_size and self.y_sizes == f.y_sizes


def _average_axis(table: np.ndarray, axis: int, weights: np.ndarray) -> np.ndarray:
    # weights has shape (x_size, n); axis 0 of table is always x
    t = np.moveaxis(table, axis, -1)
    w = weights.reshape((weights.shape[0],) + (1,) * (t.ndim - 2) + (weights.shape[1],))
    return (t * w).sum(axis=-1)


def _expand(table: np.ndarray, sub: Subset, sup: Subset) -> np.ndarray:
    shape = (table.shape[0],) + tuple(table.shape[1 + sub.index(j)] if j in sub else 1 for j in sup)
    return table.reshape(shape)


def _centre_tables(f: IRFunction, y_dists) -> dict:
    """Standardized sub-function tables via alternating-sign conditional means."""
    out: dict = {}
    for top, g in f.tables.items():
        means = {top: g}
        for r in range(len(top) - 1, -1, -1):
            for sub in combinations(top, r):
                j = next(s for s in top if s not in sub)
                parent = tuple(sorted(sub + (j,)))
                means[sub] = _average_axis(means[parent], 1 + parent.index(j), y_dists[j])
        for r in range(len(top) + 1):
            for s in combinations(top, r):
                comp = np.zeros(f.table_shape(s))
                for q in range(r + 1):
                    for u in combinations(s, q):
                        comp = comp + (-1) ** (r - q) * _expand(means[u], u, s)
                out[s] = out[s] + comp if s in out else comp
    if () not in out:
        out[()] = np.zeros(f.x_size)
    return out


def standardize(f: IRFunction, base: BaseDistribution) -> IRFunction:
    """Standardized IR decomposition of ``f`` against ``base``."""
    if not base.matches(f):
        raise DomainError("base distribution does not match function domains")
    used = {j for key in f.tables for j in key}
    for j in sorted(used):
        if np.any(base.y_dists[j] <= 0):
            raise PreconditionError(
                f"slot {j} has zero-probability coordinates; standardization needs a positive base"
            )
    return IRFunction(f.x_size, f.y_sizes, f.rank, _centre_tables(f, base.y_dists))


def standardization_residual(f: IRFunction, base: BaseDistribution) -> float:
    """Largest |E_{y_j}[g_S]| over tables S, slots j in S, and all other coordinates."""
    worst = 0.0
    for key, t in f.tables.items():
        for pos, j in enumerate(key):
            worst = max(worst, float(np.abs(_average_axis(t, 1 + pos, base.y_dists[j])).max()))
    return worst


def expect_over_slots(f: IRFunction, y_dists) -> np.ndarray:
    """``E[f(x, y)]`` for every ``x`` with ``y_j ~ y_dists[j][x]`` independent."""
    out = np.zeros(f.x_size)
    for key, t in f.tables.items():
        acc = t
        for pos in range(len(key) - 1, -1, -1):
            acc = _average_axis(acc, 1 + pos, y_dists[key[pos]])
        out += acc
    return out


def _table_square_mean(t: np.ndarray, key: Subset, base: BaseDistribution) -> float:
    acc = t**2
    for pos in range(len(key) - 1, -1, -1):
        acc = _average_axis(acc, 1 + pos, base.y_dists[key[pos]])
    return float(base.x_dist @ acc)


def expected_square(f: IRFunction, base: BaseDistribution) -> float:
    """Exact ``E_base[f^2]``; uses orthogonality of the centred components."""
    if not base.matches(f):
        raise DomainError("base distribution does not match function domains")
    centred = _centre_tables(f, base.y_dists)
    return sum(_table_square_mean(t, key, base) for key, t in centred.items())


def subfunction_errors(f_star: IRFunction, f_hat: IRFunction, base: BaseDistribution) -> dict:
    """Per-subset ``E_base[(g_S - g_hat_S)^2]`` between standardized decompositions."""
    if not f_star.same_domains(f_hat) or not base.matches(f_star):
        raise DomainError("domain mismatch")
    g = standardize(f_star, base).tables
    g_hat = standardize(f_hat, base).tables
    out = {}
    for key in sorted(set(g) | set(g_hat), key=lambda k: (len(k), k)):
        shape = f_star.table_shape(key)
        delta = g.get(key, np.zeros(shape)) - g_hat.get(key, np.zeros(shape))
        out[key] = _table_square_mean(delta, key, base)
    return out


def shifted_mse(f_star: IRFunction, f_hat: IRFunction, target: BaseDistribution) -> float:
    """Exact ``E_target[(f_star - f_hat)^2]``."""
    if not f_star.same_domains(f_hat):
        raise DomainError("domain mismatch")
    return expected_square(combine(f_star, f_hat), target)


def density_ratio_bound(train: BaseDistribution, target: BaseDistribution) -> float:
    """Largest density ratio over ``x`` and every per-slot conditional."""
    if train.x_size != target.x_size or train.y_sizes != target.y_sizes:
        raise DomainError("distribution domains differ")

    def ratio(num, den):
        bad = (num > 0) & (den <= 0)
        if np.any(bad):
            raise InfiniteRatioError("target support exceeds training support")
        mask = num > 0
        return float((num[mask] / den[mask]).max()) if np.any(mask) else 0.0

    worst = ratio(target.x_dist, train.x_dist)
    for p_train, p_target in zip(train.y_dists, target.y_dists):
        worst = max(worst, ratio(p_target, p_train))
    return worst


def shift_bound(W: int, K: int, c_ds: float, eps: float, const: float = 1.0) -> float:
    """Right-hand side ``const * (2W)^(2(K-1)) * C_DS^K * eps`` of the shift bound."""
    return const * (2 * W) ** (2 * (K - 1)) * c_ds**K * eps


def shift_constant(W: int, K: int) -> float:
    """Constant that makes the shift bound rigorous for given ``W`` and ``K``.

    Each of the ``n`` centred error components satisfies
    ``E'[D_S^2] <= C_DS^(|S|+1) 2^|S| eps`` and ``(sum of n terms)^2 <= n * sum``.
    """
    n_terms = sum(comb(W, k) for k in range(min(K - 1, W) + 1))
    weight = sum(comb(W, k) * 2**k for k in range(min(K - 1, W) + 1))
    return n_terms * weight / (2 * W) ** (2 * (K - 1))


def random_ir_function(rng: np.random.Generator, x_size: int, y_sizes, rank: int,
                       scale: float = 1.0, subsets=None) -> IRFunction:
    y_sizes = tuple(y_sizes)
    keys = list(subsets) if subsets is not None else list(_all_subsets(len(y_sizes), rank))
    f = IRFunction(x_size, y_sizes, rank)
    tables = {key: scale * rng.standard_normal(f.table_shape(key)) for key in keys}
    return IRFunction(x_size, y_sizes, rank, tables)


def random_base(rng: np.random.Generator, x_size: int, y_sizes, concentration: float = 1.0,
                floor: float = 0.0) -> BaseDistribution:
    """Dirichlet rows mixed with a uniform ``floor`` so every entry is at least ``floor/n``."""

    def rows(n_rows, n):
        p = rng.dirichlet(np.full(n, concentration), size=n_rows)
        p = (1 - floor) * p + floor / n
        return p / p.sum(axis=-1, keepdims=True)

    x = rows(1, x_size)[0]
    return BaseDistribution(x, tuple(rows(x_size, n) for n in y_sizes))


def ir_to_dict(f: IRFunction) -> dict:
    return {
        "rank": f.rank,
        "x_size": f.x_size,
        "y_sizes": list(f.y_sizes),
        "tables": [{"subset": list(k), "values": t.ravel().tolist()} for k, t in f.tables.items()],
    }


def ir_from_dict(doc: dict) -> IRFunction:
    try:
        x_size, y_sizes, rank = int(doc["x_size"]), tuple(doc["y_sizes"]), int(doc["rank"])
        shell = IRFunction(x_size, y_sizes, rank)
        tables = {}
        for entry in doc["tables"]:
            key = tuple(entry["subset"])
            tables[key] = np.asarray(entry["values"], dtype=float).reshape(shell.table_shape(key))
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError(f"malformed IRFunction document: {exc}") from exc
    return IRFunction(x_size, y_sizes, rank, tables)


def ir_dumps(f: IRFunction) -> str:
    return json.dumps(ir_to_dict(f))


def ir_loads(text: str) -> IRFunction:
    return ir_from_dict(json.loads(text))


def reorder_slots(f: IRFunction, new_to_old) -> IRFunction:
    """Relabel ``y`` slots: new slot ``n`` is old slot ``new_to_old[n]``."""
    new_to_old = list(new_to_old)
    if sorted(new_to_old) != list(range(f.W)):
        raise DomainError("new_to_old must be a permutation of the slots")
    old_to_new = {o: n for n, o in enumerate(new_to_old)}
    tables = {}
    for key, t in f.tables.items():
        new_key = tuple(sorted(old_to_new[j] for j in key))
        # axis order of the new table follows new_key; find matching old axes
        axes = [0] + [1 + key.index(new_to_old[n]) for n in new_key]
        tables[new_key] = np.transpose(t, axes)
    return IRFunction(f.x_size, tuple(f.y_sizes[o] for o in new_to_old), f.rank, tables)
