"""Offline datasets: i.i.d. per-step records drawn under a behavior policy."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .games import (
    DecoupledMarkovGame,
    DomainError,
    NoiseError,
    NoiseSpec,
    ProductPolicy,
    _check_rows,
    local_visitation,
    others,
    policy_to_dict,
    sample_rows,
)
from .ir_core import evaluate_batch

__all__ = [
    "BehaviorPolicy",
    "DatasetParseError",
    "NoiseError",
    "NoiseSpec",
    "OfflineDataset",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
]


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BehaviorPolicy:
    """Action policy ``nu`` plus per-step state-sampling laws.

    ``state_dists[i]`` has shape ``(H, C, S_i)``. When omitted it is the local
    state visitation of ``nu_i``.
    """

    policy: ProductPolicy
    state_dists: tuple | None = None

    def resolve(self, game: DecoupledMarkovGame) -> tuple:
        self.policy.check_game(game)
        if self.state_dists is None:
            return tuple(local_visitation(game, self.policy, i).sum(axis=-1) for i in range(game.N))
        dists = tuple(np.asarray(d, dtype=float) for d in self.state_dists)
        for i, d in enumerate(dists):
            if d.shape != (game.H, game.C, game.state_sizes[i]):
                raise DomainError(f"state distribution of agent {i} has shape {d.shape}")
            _check_rows(d, f"state distribution of agent {i}")
        return dists

    def digest(self) -> str:
        doc = policy_to_dict(self.policy)
        if self.state_dists is not None:
            doc["state_dists"] = [np.asarray(d).ravel().tolist() for d in self.state_dists]
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(eq=False)
class OfflineDataset:
    """Arrays ``c (H, M)`` and ``s, a, sp, r (H, M, N)``."""

    c: np.ndarray
    s: np.ndarray
    a: np.ndarray
    sp: np.ndarray
    r: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.intp)
        for name in ("s", "a", "sp"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.intp))
        self.r = np.asarray(self.r, dtype=float)
        if self.c.ndim != 2:
            raise DomainError("c must have shape (H, M)")
        H, M = self.c.shape
        for name in ("s", "a", "sp", "r"):
            arr = getattr(self, name)
            if arr.ndim != 3 or arr.shape[:2] != (H, M):
                raise DomainError(f"{name} must have shape (H, M, N)")

    @property
    def H(self) -> int:
        return self.c.shape[0]

    @property
    def M(self) -> int:
        return self.c.shape[1]

    @property
    def N(self) -> int:
        return self.s.shape[2]

    def check_game(self, game: DecoupledMarkovGame):
        if (self.H, self.N) != (game.H, game.N):
            raise DomainError("dataset horizon or agent count differs from game")
        if self.c.size and (self.c.min() < 0 or self.c.max() >= game.C):
            raise DomainError("context index out of range")
        for i in range(self.N):
            for name, size in (("s", game.state_sizes[i]), ("sp", game.state_sizes[i]), ("a", game.action_sizes[i])):
                col = getattr(self, name)[:, :, i]
                if col.size and (col.min() < 0 or col.max() >= size):
                    raise DomainError(f"{name} index of agent {i} out of range")

    def equals(self, other: "OfflineDataset") -> bool:
        return all(np.array_equal(getattr(self, k), getattr(other, k)) for k in ("c", "s", "a", "sp", "r"))

    def shuffled(self, rng: np.random.Generator) -> "OfflineDataset":
        """Independent permutation of the records at every step."""
        perms = np.stack([rng.permutation(self.M) for _ in range(self.H)])
        take = lambda arr: np.take_along_axis(arr, perms.reshape(perms.shape + (1,) * (arr.ndim - 2)), axis=1)
        return OfflineDataset(take(self.c), take(self.s), take(self.a), take(self.sp), take(self.r), dict(self.meta))


def _draw_records(game, nu, sigma, M, rng):
    N, H = game.N, game.H
    c = np.zeros((H, M), dtype=np.intp)
    s, a, sp = (np.zeros((H, M, N), dtype=np.intp) for _ in range(3))
    mean = np.zeros((H, M, N))
    for h in range(H):
        ch = sample_rows(np.broadcast_to(game.rho, (M, game.C)), rng)
        c[h] = ch
        for i in range(N):
            s[h, :, i] = sample_rows(sigma[i][h, ch], rng)
            a[h, :, i] = sample_rows(nu.tables[i][h, ch, s[h, :, i]], rng)
            sp[h, :, i] = sample_rows(game.transitions[i][h, ch, s[h, :, i], a[h, :, i]], rng)
        for i in range(N):
            x = (ch * game.state_sizes[i] + s[h, :, i]) * game.action_sizes[i] + a[h, :, i]
            y = np.stack([s[h, :, j] * game.action_sizes[j] + a[h, :, j] for j in others(i, N)], axis=1) \
                if N > 1 else np.zeros((M, 0), dtype=np.intp)
            mean[h, :, i] = evaluate_batch(game.rewards[i][h], x, y)
    return c, s, a, sp, game.noise.observe(mean, rng)


def generate_dataset(game: DecoupledMarkovGame, behavior: BehaviorPolicy, M: int, seed: int = 0,
                     shards: int = 1) -> OfflineDataset:
    """Draw ``M`` records per step.

    Shard ``k`` uses the ``k``-th child of ``SeedSequence(seed)`` and the shards
    are concatenated in order, so output depends only on ``(seed, shards)``.
    """
    if M < 1:
        raise DomainError("M must be >= 1")
    if shards < 1:
        raise DomainError("shards must be >= 1")
    sigma = behavior.resolve(game)
    sizes = [M // shards + (k < M % shards) for k in range(shards)]
    children = np.random.SeedSequence(seed).spawn(shards)
    parts = [_draw_records(game, behavior.policy, sigma, m, np.random.default_rng(child))
             for m, child in zip(sizes, children) if m > 0]
    c, s, a, sp, r = (np.concatenate([p[k] for p in parts], axis=1) for k in range(5))
    meta = {"seed": int(seed), "shards": int(shards), "game": game.digest(), "behavior": behavior.digest()}
    return OfflineDataset(c, s, a, sp, r, meta)


def save_dataset(data: OfflineDataset, path):
    """Write a JSONL file: a metadata header line then one record per line."""
    if data.M == 0:
        raise DomainError("refusing to save an empty dataset")
    header = {"format": "irmarl-dataset", "version": 1, "H": data.H, "M": data.M, "N": data.N, "meta": data.meta}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for h in range(data.H):
            for m in range(data.M):
                rec = {"h": h, "c": int(data.c[h, m]), "s": data.s[h, m].tolist(), "a": data.a[h, m].tolist(),
                       "sp": data.sp[h, m].tolist(), "r": data.r[h, m].tolist()}
                fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> OfflineDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetParseError(f"{path}: line 1: empty file")
    try:
        header = json.loads(lines[0])
        H, M, N = int(header["H"]), int(header["M"]), int(header["N"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetParseError(f"{path}: line 1: bad header ({exc})") from exc
    c = np.zeros((H, M), dtype=np.intp)
    s, a, sp = (np.zeros((H, M, N), dtype=np.intp) for _ in range(3))
    r = np.zeros((H, M, N))
    counts = np.zeros(H, dtype=np.intp)
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            h = int(rec["h"])
            if not 0 <= h < H:
                raise ValueError(f"step {h} outside horizon {H}")
            m = counts[h]
            if m >= M:
                raise ValueError(f"too many records for step {h}")
            vals = [rec[k] for k in ("s", "a", "sp", "r")]
            if any(len(v) != N for v in vals):
                raise ValueError(f"expected {N} agents")
            c[h, m] = int(rec["c"])
            s[h, m], a[h, m], sp[h, m], r[h, m] = vals
            counts[h] += 1
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise DatasetParseError(f"{path}: line {lineno}: {exc}") from exc
    if np.any(counts != M):
        raise DatasetParseError(f"{path}: line {len(lines) + 1}: file ends after {counts.tolist()} of {M} records per step")
    return OfflineDataset(c, s, a, sp, r, header.get("meta", {}))
