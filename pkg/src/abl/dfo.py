"""Classification-based derivative-free search over sparse binary vectors.

A sequential RACOS-style optimizer: keep the best few evaluated vectors as
positives, learn an axis-parallel region around a positive that excludes
every negative, and sample inside it (or uniformly with probability lambda).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from math import comb
from typing import Callable, Sequence

import numpy as np


class InfeasibleConstraint(ValueError):
    pass


class ConstraintViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class SparsityConstraint:
    """At most ``k`` ones inside each block ``[start, stop)``; blocks partition [0, dim)."""

    k: int
    blocks: tuple

    @classmethod
    def single(cls, dim: int, k: int) -> "SparsityConstraint":
        return cls(k, ((0, dim),))

    @classmethod
    def from_lengths(cls, lengths: Sequence[int], k: int) -> "SparsityConstraint":
        blocks, start = [], 0
        for n in lengths:
            blocks.append((start, start + n))
            start += n
        return cls(k, tuple(blocks))

    @property
    def dim(self) -> int:
        return self.blocks[-1][1] if self.blocks else 0

    def validate(self, dim: int) -> None:
        if self.k < 0:
            raise InfeasibleConstraint("k must be >= 0")
        pos = 0
        for a, b in self.blocks:
            if a != pos or b <= a:
                raise ValueError(f"blocks must partition [0, {dim})")
            pos = b
        if pos != dim:
            raise ValueError(f"blocks cover [0, {pos}) but dim is {dim}")

    def feasible(self, bits) -> bool:
        bits = np.asarray(bits)
        return all(int(bits[a:b].sum()) <= self.k for a, b in self.blocks)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from the feasible set (blocks are independent)."""
        out = np.zeros(self.dim, dtype=np.int8)
        for a, b in self.blocks:
            n = b - a
            weights = np.array([comb(n, m) for m in range(min(self.k, n) + 1)], dtype=float)
            m = rng.choice(len(weights), p=weights / weights.sum())
            if m:
                out[a + rng.choice(n, size=m, replace=False)] = 1
        return out

    def repair(self, bits: np.ndarray, rng: np.random.Generator, frozen=None) -> np.ndarray:
        """Clear excess ones uniformly per block, sparing frozen coordinates when possible."""
        bits = bits.copy()
        for a, b in self.blocks:
            ones = np.flatnonzero(bits[a:b]) + a
            excess = len(ones) - self.k
            if excess <= 0:
                continue
            if frozen is not None:
                free = ones[~frozen[ones]]
                fixed = ones[frozen[ones]]
            else:
                free, fixed = ones, ones[:0]
            take = min(excess, len(free))
            if take:
                bits[rng.choice(free, size=take, replace=False)] = 0
            if excess > take:
                bits[rng.choice(fixed, size=excess - take, replace=False)] = 0
        return bits


@dataclass(frozen=True)
class DfoConfig:
    budget: int = 64
    positive_set_size: int = 2
    uncertainty_prob: float = 0.1
    seed: int = 0
    sample_size: int = 8       # negatives kept for region learning
    uncertain_bits: int = 2    # coordinates left free when sampling inside the region

    def __post_init__(self):
        if self.positive_set_size < 1:
            raise ValueError("positive_set_size must be >= 1")
        if self.budget < self.positive_set_size + 1:
            raise ValueError("budget must be >= positive_set_size + 1")
        if not 0.0 <= self.uncertainty_prob <= 1.0:
            raise ValueError("uncertainty_prob must lie in [0, 1]")


@dataclass
class OptimizeResult:
    best: np.ndarray
    value: float
    trace: list  # (eval_index, value, bits)

    def incumbents(self) -> list[float]:
        out, best = [], -np.inf
        for _, v, _ in self.trace:
            best = max(best, v)
            out.append(best)
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eval_index", "value", "bits_hex"])
            for i, v, bits in self.trace:
                w.writerow([i, v, bits_to_hex(bits)])


def bits_to_hex(bits) -> str:
    s = "".join(str(int(b)) for b in bits)
    if not s:
        return "0x0"
    return hex(int(s, 2))


class _Checked:
    """Objective wrapper enforcing the constraint and the evaluation budget."""

    def __init__(self, objective, constraint: SparsityConstraint, budget: int):
        self.objective = objective
        self.constraint = constraint
        self.budget = budget
        self.trace: list = []

    def __call__(self, bits: np.ndarray) -> float:
        if not self.constraint.feasible(bits):
            raise ConstraintViolation(f"infeasible vector {bits_to_hex(bits)}")
        if len(self.trace) >= self.budget:
            raise RuntimeError("evaluation budget exhausted")
        v = float(self.objective(bits))
        self.trace.append((len(self.trace), v, bits.copy()))
        return v

    @property
    def left(self) -> int:
        return self.budget - len(self.trace)


def _check_setup(dim: int, constraint: SparsityConstraint):
    if dim < 1:
        raise ValueError("dim must be >= 1")
    constraint.validate(dim)


def optimize(objective: Callable[[np.ndarray], float], dim: int,
             constraint: SparsityConstraint, cfg: DfoConfig = DfoConfig()) -> OptimizeResult:
    """Maximise ``objective`` over feasible binary vectors within ``cfg.budget`` evaluations."""
    _check_setup(dim, constraint)
    rng = np.random.default_rng(cfg.seed)
    f = _Checked(objective, constraint, cfg.budget)
    seen: set = set()

    def evaluate(bits):
        seen.add(bits.tobytes())
        return f(bits)

    pop = []  # (value, order, bits)
    for _ in range(min(cfg.positive_set_size + 1, cfg.budget)):
        x = constraint.sample(rng)
        pop.append((evaluate(x), len(f.trace), x))
    pop.sort(key=lambda t: (-t[0], t[1]))
    positives = pop[:cfg.positive_set_size]
    negatives = pop[cfg.positive_set_size:]

    while f.left > 0:
        x = None
        for _ in range(10):
            if rng.random() < cfg.uncertainty_prob:
                cand = constraint.sample(rng)
            else:
                cand = _sample_region(positives[rng.integers(len(positives))][2],
                                      [n[2] for n in negatives], constraint, cfg, rng)
            x = cand
            if cand.tobytes() not in seen:
                break
        v = evaluate(x)
        entry = (v, len(f.trace), x)
        worst = positives[-1]
        if v > worst[0]:
            positives = sorted(positives[:-1] + [entry], key=lambda t: (-t[0], t[1]))
            entry = worst
        negatives.append(entry)
        if len(negatives) > cfg.sample_size:
            negatives.pop(0)

    best_idx = max(range(len(f.trace)), key=lambda i: (f.trace[i][1], -i))
    _, value, best = f.trace[best_idx]
    return OptimizeResult(best, value, f.trace)


def _sample_region(pos: np.ndarray, negatives: list, constraint: SparsityConstraint,
                   cfg: DfoConfig, rng: np.random.Generator) -> np.ndarray:
    dim = len(pos)
    frozen = np.zeros(dim, dtype=bool)
    remaining = [n for n in negatives if not np.array_equal(n, pos)]
    while remaining:
        neg = remaining[rng.integers(len(remaining))]
        diff = np.flatnonzero((neg != pos) & ~frozen)
        frozen[rng.choice(diff)] = True
        remaining = [n for n in remaining if np.array_equal(n[frozen], pos[frozen])]
    free = np.flatnonzero(~frozen)
    if len(free) > cfg.uncertain_bits:
        keep_free = rng.choice(free, size=cfg.uncertain_bits, replace=False)
        frozen[:] = True
        frozen[keep_free] = False
    x = pos.copy()
    unfrozen = ~frozen
    x[unfrozen] = rng.integers(0, 2, size=int(unfrozen.sum()))
    return constraint.repair(x, rng, frozen)


def random_search(objective: Callable[[np.ndarray], float], dim: int,
                  constraint: SparsityConstraint, budget: int, seed: int = 0):
    """Uniform feasible sampling; returns (best vector, best value)."""
    _check_setup(dim, constraint)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    f = _Checked(objective, constraint, budget)
    best, best_v = None, -np.inf
    for _ in range(budget):
        x = constraint.sample(rng)
        v = f(x)
        if v > best_v:
            best, best_v = x, v
    return best, best_v
