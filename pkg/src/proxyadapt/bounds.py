"""Covering-number and sample-complexity bounds, evaluated in log-space.

Every ``Omega(.)`` expression is evaluated with implied constant 1, so the
returned numbers are meaningful only up to that constant. Ratios between
bounds that share the constant are unaffected.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from proxyadapt.errors import InvalidInputError

ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
CONSTANT_NOTE = "up to the Omega-constant (taken as 1)"


@dataclass(frozen=True)
class BoundInputs:
    D: int
    D_prime: int
    epsilon: float
    omega: float
    L_phi: float
    theta_opnorm: float
    L_pibar: float
    C: float
    E_prime: float
    E: float = 1.0

    def __post_init__(self):
        if self.D < 1 or self.D_prime < 1:
            raise InvalidInputError("dimensions must be at least 1")
        if not 0.0 < self.omega < 1.0:
            raise InvalidInputError("omega must lie in (0, 1)")
        if self.epsilon <= 0:
            raise InvalidInputError("epsilon must be positive")
        for name in ("L_phi", "theta_opnorm", "L_pibar", "C", "E", "E_prime"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "BoundInputs":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        missing = set(cls.__dataclass_fields__) - set(known) - {"E"}
        if missing:
            raise InvalidInputError(f"missing bound inputs {sorted(missing)}")
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LogBound:
    """A bound stored as its natural log; ``value`` is ``None`` when it overflows."""

    log: float

    @property
    def value(self) -> float | None:
        if self.log > 709.0:
            return None
        return math.exp(self.log)

    def to_dict(self) -> dict:
        return {"log": self.log, "value": self.value, "note": CONSTANT_NOTE}


def covering_number_simplex(D: int, kappa: float, E: float = 1.0, scale: float = 1.0) -> LogBound:
    """``(2 E scale sqrt(D) / kappa)^D``."""
    if kappa <= 0:
        raise InvalidInputError("kappa must be positive")
    return LogBound(D * (math.log(2.0 * E * scale) + 0.5 * math.log(D) - math.log(kappa)))


def composite_covering_bound(D: int, kappa: float, delta: float, L_phi: float, theta_opnorm: float,
                             L_pibar: float, E: float = 1.0) -> tuple[LogBound, float]:
    """Cover of the factorised class at radius ``3 kappa + 3 L_phi |Theta| L_pibar delta``.

    The bound is ``(2E L_phi |Theta| sqrt(D)/kappa)^(D (2E sqrt(D)/delta)^D)``.
    Returns the log-bound and the radius it covers at.
    """
    if kappa <= 0 or delta <= 0:
        raise InvalidInputError("kappa and delta must be positive")
    inner = covering_number_simplex(D, kappa, E, L_phi * theta_opnorm).log / D
    outer = covering_number_simplex(D, delta, E).log
    radius = 3.0 * kappa + 3.0 * L_phi * theta_opnorm * L_pibar * delta
    return LogBound(D * math.exp(outer) * inner), radius


def _log_sample_complexity(D: int, lead: float, log_arg: float, eps: float, omega: float) -> float:
    # n = (D/eps^2) lead^D log(log_arg) - log(omega), returned as log(n)
    tail = -math.log(omega)
    ll = math.log(log_arg)
    if ll <= 0.0:
        n = D / eps ** 2 * lead ** D * ll + tail
        return math.log(n) if n > 0 else float("-inf")
    head = math.log(D) - 2.0 * math.log(eps) + D * math.log(lead) + math.log(ll)
    return float(np.logaddexp(head, math.log(tail)))


def sample_complexity_with_proxy(inp: BoundInputs) -> LogBound:
    """Stage-2 samples needed when the encoder and decoder come from proxy data."""
    c = inp.L_phi * inp.theta_opnorm * inp.E * math.sqrt(inp.D) / inp.epsilon
    return LogBound(_log_sample_complexity(inp.D, 96.0 * c * inp.L_pibar, 96.0 * c,
                                           inp.epsilon, inp.omega))


def sample_complexity_without_proxy(inp: BoundInputs) -> LogBound:
    """Samples needed for a Lipschitz class over a ``D'``-dimensional embedding."""
    c = inp.L_phi * inp.theta_opnorm * inp.L_pibar * inp.E_prime * math.sqrt(inp.D_prime) / inp.epsilon
    return LogBound(_log_sample_complexity(inp.D_prime, 48.0 * c, 48.0 * c, inp.epsilon, inp.omega))


def concentration_bound(cov_log: float, n: int, epsilon: float, C: float, alpha: float) -> float:
    """Log of ``2 Cov exp(-2 (1-alpha)^2 n eps^2 / (4 C^2))``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidInputError("alpha must lie in (0, 1)")
    return math.log(2.0) + cov_log - 2.0 * (1.0 - alpha) ** 2 * n * epsilon ** 2 / (4.0 * C ** 2)


def best_concentration_bound(cov_log: float | Callable[[float], float], n: int, epsilon: float,
                             C: float, grid=ALPHA_GRID) -> tuple[float, float]:
    """Minimise over ``alpha``; ``cov_log`` may depend on ``alpha``. Returns ``(log_bound, alpha)``."""
    best = (float("inf"), float("nan"))
    for a in grid:
        cl = cov_log(a) if callable(cov_log) else cov_log
        val = concentration_bound(cl, n, epsilon, C, a)
        if val < best[0]:
            best = (val, a)
    return best


def evaluate_all(inp: BoundInputs) -> dict:
    """Every bound for ``inp`` as a JSON-ready record."""
    with_p = sample_complexity_with_proxy(inp)
    without_p = sample_complexity_without_proxy(inp)
    cov = covering_number_simplex(inp.D, inp.epsilon / 48.0, inp.E, inp.L_phi * inp.theta_opnorm)
    delta = inp.epsilon / (48.0 * inp.L_phi * inp.theta_opnorm * inp.L_pibar)
    comp, radius = composite_covering_bound(inp.D, inp.epsilon / 48.0, delta, inp.L_phi,
                                            inp.theta_opnorm, inp.L_pibar, inp.E)
    return {
        "inputs": inp.to_dict(),
        "note": CONSTANT_NOTE,
        "sample_complexity_with_proxy": with_p.to_dict(),
        "sample_complexity_without_proxy": without_p.to_dict(),
        "log_ratio_without_over_with": without_p.log - with_p.log,
        "covering_number_simplex": cov.to_dict(),
        "composite_covering": {**comp.to_dict(), "radius": radius, "kappa": inp.epsilon / 48.0,
                               "delta": delta},
    }
