"""Scored architecture pool with EMA score updates and scheduled shrinking."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .arch import ArchSpec, FeasibilityError, sample_arch


@dataclass
class ScoredArch:
    arch: ArchSpec
    score: float | None = None
    updates: int = 0


@dataclass
class Pool:
    entries: list
    alpha: float = 0.3
    k: int = 1
    T_shr: int = 1
    N_p: int = 1
    rounds_total: int | None = None   # None: no forced final shrink
    rounds_done: int = 0
    literal_ema: bool = False
    removed_log: list = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("pool must be non-empty")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        archs = [e.arch for e in self.entries]
        if len(set(archs)) != len(archs):
            raise ValueError("pool entries must be pairwise distinct")

    @property
    def N_shr(self):
        return shrink_count(self.k, self.N_p, self.T_shr)

    def __len__(self):
        return len(self.entries)

    def to_json(self):
        return json.dumps({
            "alpha": self.alpha,
            "k": self.k,
            "T_shr": self.T_shr,
            "N_p": self.N_p,
            "rounds_total": self.rounds_total,
            "rounds_done": self.rounds_done,
            "entries": [
                {"arch": e.arch.to_text(), "score": e.score, "updates": e.updates}
                for e in self.entries
            ],
        }, indent=2)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        entries = [ScoredArch(ArchSpec.from_text(e["arch"]), e["score"], e["updates"])
                   for e in d["entries"]]
        return cls(entries, d["alpha"], d["k"], d["T_shr"], d["N_p"],
                   d["rounds_total"], d["rounds_done"])


def shrink_count(k: int, N_p: int, T_shr: int) -> int:
    """Removals per shrink round: floor(k (N_p - 1) / T_shr)."""
    if k <= 0 or N_p <= 0 or T_shr <= 0:
        raise ValueError("k, N_p and T_shr must be positive")
    return (k * (N_p - 1)) // T_shr


def init_pool(N_p, graph, target_ratio, band, rng, alpha=0.3, k=1, T_shr=1,
              grid=None, attempt_cap=100_000) -> Pool:
    """Sample N_p distinct in-band architectures, all unscored."""
    if N_p < 1:
        raise ValueError("N_p must be >= 1")
    seen = set()
    entries = []
    attempts = 0
    while len(entries) < N_p:
        if attempts >= attempt_cap:
            raise FeasibilityError(
                f"could not find {N_p} distinct in-band architectures "
                f"({len(entries)} found after {attempt_cap} attempts)")
        arch = sample_arch(graph, target_ratio, band, rng, grid=grid,
                           attempt_cap=attempt_cap)
        attempts += 1
        if arch not in seen:
            seen.add(arch)
            entries.append(ScoredArch(arch))
    return Pool(entries, alpha=alpha, k=k, T_shr=T_shr, N_p=N_p,
                rounds_total=T_shr // k)


def sample_from_pool(pool: Pool, rng):
    """Uniform draw, except unscored entries take priority until none remain."""
    unscored = [i for i, e in enumerate(pool.entries) if e.updates == 0]
    idxs = unscored if unscored else range(len(pool.entries))
    i = idxs[rng.integers(len(idxs))]
    return i, pool.entries[i].arch


def update_score(pool: Pool, index: int, loss: float, alpha=None):
    """First update sets the score; afterwards EMA-blend with ratio alpha."""
    if not math.isfinite(loss):
        raise ValueError(f"non-finite loss {loss}")
    a = pool.alpha if alpha is None else alpha
    e = pool.entries[index]
    if e.updates == 0:
        e.score = float(loss)
    elif pool.literal_ema:
        # the printed update rule, kept for comparison runs
        e.score = (1.0 - a * e.score) + a * float(loss)
    else:
        e.score = (1.0 - a) * e.score + a * float(loss)
    e.updates += 1


def shrink(pool: Pool, n: int, rng=None):
    """Remove up to n highest-scored entries; ties go to the later entry.

    Unscored entries are exempt unless every entry is unscored (then removal
    is uniform-random, needing rng). The pool is never emptied. On the final
    scheduled round everything but the single best survivor is removed.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    pool.rounds_done += 1
    final = pool.rounds_total is not None and pool.rounds_done >= pool.rounds_total
    removed = []

    def pop(idx):
        removed.append(pool.entries.pop(idx))

    if final:
        scored = [i for i, e in enumerate(pool.entries) if e.updates > 0]
        if scored:
            survivor = min(scored, key=lambda i: (pool.entries[i].score, i))
        else:
            survivor = int(rng.integers(len(pool.entries)))
        keep = pool.entries[survivor]
        removed.extend(e for e in pool.entries if e is not keep)
        pool.entries[:] = [keep]
    else:
        budget = min(n, len(pool.entries) - 1)
        for _ in range(budget):
            scored = [i for i, e in enumerate(pool.entries) if e.updates > 0]
            if scored:
                idx = max(scored, key=lambda i: (pool.entries[i].score, i))
            elif rng is not None:
                idx = int(rng.integers(len(pool.entries)))
            else:
                break
            if len(pool.entries) <= 1:
                break
            pop(idx)
    pool.removed_log.append([e.arch.to_text() for e in removed])
    return removed
