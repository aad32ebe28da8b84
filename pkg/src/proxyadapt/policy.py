"""Tabular policies, implicit rewards and the policy metrics.

A policy is an ``|X| x |Y|`` row-stochastic array; helpers accept either a
raw array or a :class:`TabularPolicy`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from proxyadapt.errors import DomainError, InvalidInputError

PROB_FLOOR = 1e-300
DEFAULT_REWARD_BOUND = 50.0


@dataclass(frozen=True)
class TabularPolicy:
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=float)
        if t.ndim != 2:
            raise InvalidInputError("policy table must be 2-D")
        if np.any(t < 0) or not np.all(np.isfinite(t)):
            raise InvalidInputError("policy table has negative or non-finite entries")
        if np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidInputError("policy rows must sum to 1")
        object.__setattr__(self, "table", t)

    @property
    def n_prompts(self) -> int:
        return self.table.shape[0]

    @property
    def n_responses(self) -> int:
        return self.table.shape[1]

    def __getitem__(self, x):
        return self.table[x]

    @classmethod
    def uniform(cls, n_prompts: int, n_responses: int) -> "TabularPolicy":
        return cls(np.full((n_prompts, n_responses), 1.0 / n_responses))

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        z = np.asarray(logits, dtype=float)
        return cls(np.exp(z - logsumexp(z, axis=1, keepdims=True)))


@dataclass(frozen=True)
class RewardTable:
    values: np.ndarray
    beta: float
    bound: float = DEFAULT_REWARD_BOUND

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.beta <= 0:
            raise InvalidInputError("beta must be positive")
        if not np.all(np.isfinite(v)):
            raise DomainError("reward table has non-finite entries")
        if np.max(np.abs(v)) > self.bound:
            raise DomainError(f"reward sup-norm {np.max(np.abs(v)):.4g} exceeds bound {self.bound}")
        object.__setattr__(self, "values", v)

    def __getitem__(self, idx):
        return self.values[idx]


def as_table(pi) -> np.ndarray:
    if isinstance(pi, TabularPolicy):
        return pi.table
    if hasattr(pi, "table") and callable(pi.table):
        return pi.table()
    return np.asarray(pi, dtype=float)


def log_ratio(pi, pi_ref, floor: float | None = PROB_FLOOR) -> np.ndarray:
    """``log(pi / pi_ref)`` elementwise; ``floor=None`` disables flooring."""
    p = as_table(pi)
    q = as_table(pi_ref)
    if p.shape != q.shape:
        raise InvalidInputError(f"shape mismatch {p.shape} vs {q.shape}")
    if floor is None:
        if np.any(q <= 0):
            raise DomainError("reference policy must be strictly positive")
        if np.any(p <= 0):
            raise DomainError("policy has a zero where the reference is positive")
        return np.log(p) - np.log(q)
    return np.log(np.maximum(p, floor)) - np.log(np.maximum(q, floor))


def implicit_reward(pi, pi_ref, beta: float, floor: float | None = PROB_FLOOR,
                    bound: float = DEFAULT_REWARD_BOUND) -> RewardTable:
    """Reward under which ``pi`` is the KL-regularised optimum: ``beta*log(pi/pi_ref)``."""
    if beta <= 0:
        raise InvalidInputError("beta must be positive")
    return RewardTable(beta * log_ratio(pi, pi_ref, floor), beta, bound)


def optimal_policy(r: RewardTable, pi_ref) -> TabularPolicy:
    """Closed-form maximiser of ``E[r] - beta*KL(pi || pi_ref)``, row by row."""
    q = as_table(pi_ref)
    if np.any(q <= 0):
        raise DomainError("reference policy must be strictly positive")
    z = np.log(q) + r.values / r.beta
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


def d_r(pi1, pi2, pi_ref, beta: float) -> float:
    """Sup-norm distance between the implicit rewards of two policies.

    ``pi_ref`` cancels in the difference, but it is still validated.
    """
    r1 = beta * log_ratio(pi1, pi_ref)
    r2 = beta * log_ratio(pi2, pi_ref)
    diff = np.abs(r1 - r2)
    if not np.all(np.isfinite(diff)):
        raise DomainError("implicit reward is not finite")
    return float(diff.max())


def d_py(p, q, beta: float) -> float:
    """``max_y |beta * log(p[y] / q[y])|`` with both distributions floored."""
    p = np.maximum(np.asarray(p, dtype=float), PROB_FLOOR)
    q = np.maximum(np.asarray(q, dtype=float), PROB_FLOOR)
    return float(np.max(np.abs(beta * (np.log(p) - np.log(q)))))


def d_simplex(p, q, ord: float = 2) -> float:
    return float(np.linalg.norm(np.asarray(p, float) - np.asarray(q, float), ord=ord))


def sequence_space_size(k: int, l: int) -> int:
    """Number of token sequences of length 1..l over k tokens (exact integer)."""
    if k < 1 or l < 1:
        raise InvalidInputError("k and l must be at least 1")
    if k == 1:
        return l
    return (k ** (l + 1) - k) // (k - 1)
