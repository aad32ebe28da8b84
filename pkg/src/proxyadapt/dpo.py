"""DPO loss, analytic gradients and the two-stage trainer.

Every loss here is an expectation over ordered triples ``(x, y_w, y_l)``
represented by a weight array ``W[x, w, l]``: an empirical dataset gives
normalised counts, a data-generating process gives exact probabilities.
Both paths then share one vectorised loss/gradient routine.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from proxyadapt.errors import DomainError, InvalidInputError, TrainingDivergedError
from proxyadapt.factorized import AdapterMap, DecoderParams, FactorizedPolicy
from proxyadapt.geometry import project_to_simplex
from proxyadapt.policy import TabularPolicy, as_table
from proxyadapt.preferences import DataProcess, PreferenceDataset, make_rng, population_pair_weights

COMPONENTS = ("tau", "theta", "decoder", "adapter", "logits")


@dataclass
class TrainConfig:
    beta: float = 1.0
    learning_rate: float = 0.1
    max_steps: int = 1000
    grad_tol: float = 1e-5
    seed: int = 0
    frozen: frozenset = frozenset()
    log_every: int = 0

    def __post_init__(self):
        self.frozen = frozenset(self.frozen)
        if self.grad_tol <= 0:
            raise InvalidInputError("grad_tol must be positive")
        if self.beta <= 0 or self.learning_rate <= 0:
            raise InvalidInputError("beta and learning_rate must be positive")
        unknown = self.frozen - {"tau", "theta", "decoder", "adapter"}
        if unknown:
            raise InvalidInputError(f"unknown frozen components {sorted(unknown)}")


@dataclass
class LossReport:
    loss: float
    grad_norm: float
    steps_taken: int
    converged: bool
    history: list = field(default_factory=list)


class AdaptedPolicy:
    """``fp`` with an adapter inserted before ``Theta``; quacks like a policy table."""

    def __init__(self, fp: FactorizedPolicy, adapter: AdapterMap):
        self.fp = fp
        self.adapter = adapter

    def table(self) -> np.ndarray:
        return self.fp.table(self.adapter)

    def log_table(self) -> np.ndarray:
        return self.fp.log_table(self.adapter)


def _log_table(policy) -> np.ndarray:
    if hasattr(policy, "log_table"):
        return policy.log_table()
    t = as_table(policy)
    with np.errstate(divide="ignore"):
        return np.log(t)


def weights_of(data) -> np.ndarray:
    if isinstance(data, DataProcess):
        return population_pair_weights(data)
    if isinstance(data, PreferenceDataset):
        return data.pair_weights()
    W = np.asarray(data, dtype=float)
    if W.ndim != 3:
        raise InvalidInputError("expected a dataset, a data process or an |X|x|Y|x|Y| weight array")
    return W


def dpo_objective(log_pi: np.ndarray, log_ref: np.ndarray, W: np.ndarray, beta: float):
    """Loss ``E_W[-log sigmoid(h)]`` and its gradient with respect to the logits.

    ``h[x,w,l] = beta*(log pi(w|x)/ref(w|x) - log pi(l|x)/ref(l|x))``. The
    softmax normaliser cancels in ``h``, so ``dh/dz[x,k] = beta*(1[k=w] - 1[k=l])``.
    """
    mask = W > 0
    with np.errstate(invalid="ignore"):
        u = log_pi - log_ref
        h = beta * (u[:, :, None] - u[:, None, :])
    if np.any(~np.isfinite(h[mask])):
        raise DomainError("policy assigns zero probability to an observed response")
    loss = float(np.sum(W[mask] * np.logaddexp(0.0, -h[mask])))
    A = np.where(mask, -W * expit(-np.where(mask, h, 0.0)), 0.0)
    G = beta * (A.sum(axis=2) - A.sum(axis=1))
    return loss, G


def dpo_loss(policy, pi_ref, data: PreferenceDataset, beta: float) -> float:
    if len(data) == 0:
        raise InvalidInputError("empty dataset")
    log_ref = np.log(as_table(pi_ref))
    return dpo_objective(_log_table(policy), log_ref, data.pair_weights(), beta)[0]


def population_dpo_loss(policy, G: DataProcess, beta: float) -> float:
    log_ref = np.log(as_table(G.pi_ref))
    return dpo_objective(_log_table(policy), log_ref, population_pair_weights(G), beta)[0]


def _adapter_forward(fp: FactorizedPolicy, adapter: AdapterMap | None, cls_index=None):
    if adapter is None:
        return fp.tau, None
    if adapter.mode == "table":
        if cls_index is None:
            cls_index = np.array([adapter.lookup(t) for t in fp.tau])
        return adapter.values[cls_index], cls_index
    pre = fp.tau @ adapter.A.T + adapter.a
    return project_to_simplex(pre), pre


def _projection_vjp(pre: np.ndarray, out: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pull ``g`` back through row-wise simplex projection (a.e. Jacobian)."""
    S = out > 0
    cnt = S.sum(axis=1, keepdims=True)
    mean = np.where(S, g, 0.0).sum(axis=1, keepdims=True) / cnt
    return np.where(S, g - mean, 0.0)


def factorized_loss_and_grads(fp: FactorizedPolicy, log_ref: np.ndarray, W: np.ndarray, beta: float,
                              wrt: Iterable[str], adapter: AdapterMap | None = None, cls_index=None):
    """Loss and gradients for the named components of ``fp`` (and ``adapter``)."""
    wrt = tuple(wrt)
    for name in wrt:
        if name not in COMPONENTS or name == "logits":
            raise InvalidInputError(f"unknown component {name!r}")
    if "adapter" in wrt and adapter is None:
        raise InvalidInputError("adapter gradient requested without an adapter")
    P, aux = _adapter_forward(fp, adapter, cls_index)
    lat = P @ fp.theta.T
    logits = lat @ fp.decoder.weight.T + fp.decoder.bias
    loss, G = dpo_objective(log_softmax(logits, axis=1), log_ref, W, beta)
    grads: dict[str, object] = {}
    if "decoder" in wrt:
        grads["decoder"] = (G.T @ lat, G.sum(axis=0))
    if not ({"tau", "theta", "adapter"} & set(wrt)):
        return loss, grads
    dlat = G @ fp.decoder.weight
    if "theta" in wrt:
        grads["theta"] = dlat.T @ P
    dP = dlat @ fp.theta
    if adapter is None:
        if "tau" in wrt:
            grads["tau"] = dP
        return loss, grads
    if adapter.mode == "table":
        if "adapter" in wrt:
            dv = np.zeros_like(adapter.values)
            np.add.at(dv, aux, dP)
            grads["adapter"] = dv
        if "tau" in wrt:
            grads["tau"] = np.zeros_like(fp.tau)
    else:
        dpre = _projection_vjp(aux, P, dP)
        if "adapter" in wrt:
            grads["adapter"] = (dpre.T @ fp.tau, dpre.sum(axis=0))
        if "tau" in wrt:
            grads["tau"] = dpre @ adapter.A
    return loss, grads


def gradient(params, pi_ref, data, beta: float, wrt: str, adapter: AdapterMap | None = None):
    """Exact gradient of the (empirical or population) DPO loss for one component.

    ``params`` is a :class:`FactorizedPolicy` (components ``tau``, ``theta``,
    ``decoder``, ``adapter``) or an ``|X| x |Y|`` logit array (``logits``).
    """
    if wrt not in COMPONENTS:
        raise InvalidInputError(f"unknown component {wrt!r}")
    log_ref = np.log(as_table(pi_ref))
    W = weights_of(data)
    if wrt == "logits":
        if isinstance(params, FactorizedPolicy):
            raise InvalidInputError("'logits' applies to tabular parameters only")
        return dpo_objective(log_softmax(np.asarray(params, float), axis=1), log_ref, W, beta)[1]
    return factorized_loss_and_grads(params, log_ref, W, beta, (wrt,), adapter)[1][wrt]


# --- training --------------------------------------------------------------


def init_factorized(n_prompts: int, n_responses: int, N: int, D: int, seed: int,
                    weight_scale: float = 0.5) -> FactorizedPolicy:
    """Uniform tau rows, Theta columns drawn in the unit ball, small random decoder."""
    rng = make_rng(seed)
    dirs = rng.standard_normal((D + 1, N))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.random(D + 1) ** (1.0 / N)
    theta = (dirs * radii[:, None]).T
    weight = weight_scale * rng.standard_normal((n_responses, N)) / np.sqrt(N)
    tau = np.full((n_prompts, D + 1), 1.0 / (D + 1))
    return FactorizedPolicy(tau, theta, DecoderParams(weight, np.zeros(n_responses)))


def _check_finite(loss: float, step: int):
    if not np.isfinite(loss):
        raise TrainingDivergedError(step)


def _check_params(step: int, *arrays):
    if not all(np.all(np.isfinite(a)) for a in arrays if a is not None):
        raise TrainingDivergedError(step, "parameters became non-finite")


def _record(report_hist: list, cfg: TrainConfig, step: int, loss: float, gn: float):
    if cfg.log_every and step % cfg.log_every == 0:
        report_hist.append((step, loss, gn))


def train_stage1(proxy_data, pi_ref, D: int, cfg: TrainConfig, N: int | None = None,
                 init: FactorizedPolicy | None = None, grads_fn=None):
    """Fit ``(tau, Theta, decoder)`` jointly by projected gradient descent on DPO.

    ``proxy_data`` may be a dataset (empirical loss) or a data process
    (population loss). ``tau`` rows are projected back onto the simplex after
    each step. Returns ``(fp, report)``.
    """
    if D < 1:
        raise InvalidInputError("D must be at least 1")
    W = weights_of(proxy_data)
    if W.sum() <= 0:
        raise InvalidInputError("proxy data is empty")
    ref = as_table(pi_ref)
    log_ref = np.log(ref)
    nx, ny = ref.shape
    fp = init.copy() if init is not None else init_factorized(nx, ny, N or D + 1, D, cfg.seed)
    wrt = tuple(c for c in ("tau", "theta", "decoder") if c not in cfg.frozen)
    grads_fn = grads_fn or factorized_loss_and_grads
    lr = cfg.learning_rate
    hist: list = []
    loss, gn, step = float("nan"), float("inf"), 0
    for step in range(cfg.max_steps + 1):
        _check_params(step, fp.tau, fp.theta, fp.decoder.weight, fp.decoder.bias)
        loss, g = grads_fn(fp, log_ref, W, cfg.beta, wrt)
        _check_finite(loss, step)
        parts = []
        if "tau" in g:
            new_tau = project_to_simplex(fp.tau - lr * g["tau"])
            parts.append((fp.tau - new_tau).ravel() / lr)
        if "theta" in g:
            parts.append(g["theta"].ravel())
        if "decoder" in g:
            parts.extend([g["decoder"][0].ravel(), g["decoder"][1].ravel()])
        gn = float(np.linalg.norm(np.concatenate(parts))) if parts else 0.0
        _record(hist, cfg, step, loss, gn)
        if gn < cfg.grad_tol or step == cfg.max_steps:
            break
        if "tau" in g:
            fp.tau = new_tau
        if "theta" in g:
            fp.theta = fp.theta - lr * g["theta"]
        if "decoder" in g:
            fp.decoder.weight = fp.decoder.weight - lr * g["decoder"][0]
            fp.decoder.bias = fp.decoder.bias - lr * g["decoder"][1]
    return fp, LossReport(loss, gn, step, gn < cfg.grad_tol, hist)


def train_stage2(true_data, fp: FactorizedPolicy, pi_ref, cfg: TrainConfig,
                 adapter: AdapterMap | None = None, level_set_tol: float = 1e-9):
    """Fit only the adapter; ``fp`` is never modified.

    The default adapter is a table over the level-set representatives of
    ``fp.tau`` initialised to the identity. Table entries are projected
    onto the simplex after each step. Returns ``(adapter, report)``.
    """
    from proxyadapt.oracle import build_level_sets

    W = weights_of(true_data)
    if W.sum() <= 0:
        raise InvalidInputError("true data is empty")
    if "adapter" in cfg.frozen:
        raise InvalidInputError("stage 2 trains the adapter; it cannot be frozen")
    log_ref = np.log(as_table(pi_ref))
    if adapter is None:
        ls = build_level_sets(fp, level_set_tol)
        adapter = AdapterMap.identity_table(ls.representatives)
        adapter.tol = level_set_tol
    else:
        adapter = adapter.copy()
    cls_index = None
    if adapter.mode == "table":
        cls_index = np.array([adapter.lookup(t) for t in fp.tau])
    lr = cfg.learning_rate
    hist: list = []
    loss, gn, step = float("nan"), float("inf"), 0
    for step in range(cfg.max_steps + 1):
        _check_params(step, adapter.values, adapter.A, adapter.a)
        loss, g = factorized_loss_and_grads(fp, log_ref, W, cfg.beta, ("adapter",), adapter, cls_index)
        _check_finite(loss, step)
        if adapter.mode == "table":
            new_vals = project_to_simplex(adapter.values - lr * g["adapter"])
            gn = float(np.linalg.norm(adapter.values - new_vals) / lr)
        else:
            gA, ga = g["adapter"]
            gn = float(np.sqrt(np.sum(gA ** 2) + np.sum(ga ** 2)))
        _record(hist, cfg, step, loss, gn)
        if gn < cfg.grad_tol or step == cfg.max_steps:
            break
        if adapter.mode == "table":
            adapter.values = new_vals
        else:
            adapter.A = adapter.A - lr * gA
            adapter.a = adapter.a - lr * ga
    return adapter, LossReport(loss, gn, step, gn < cfg.grad_tol, hist)


def train_tabular(data, pi_ref, cfg: TrainConfig, init_logits=None):
    """Single-stage baseline: one free logit per ``(x, y)``, plain gradient descent."""
    W = weights_of(data)
    ref = as_table(pi_ref)
    log_ref = np.log(ref)
    Z = np.log(ref).copy() if init_logits is None else np.array(init_logits, dtype=float)
    lr = cfg.learning_rate
    hist: list = []
    loss, gn, step = float("nan"), float("inf"), 0
    if W.sum() <= 0:
        return TabularPolicy.from_logits(Z), LossReport(float("nan"), 0.0, 0, True, hist)
    for step in range(cfg.max_steps + 1):
        _check_params(step, Z)
        loss, G = dpo_objective(log_softmax(Z, axis=1), log_ref, W, cfg.beta)
        _check_finite(loss, step)
        gn = float(np.linalg.norm(G))
        _record(hist, cfg, step, loss, gn)
        if gn < cfg.grad_tol or step == cfg.max_steps:
            break
        Z = Z - lr * G
    Z = Z - logsumexp(Z, axis=1, keepdims=True)
    return TabularPolicy.from_logits(Z), LossReport(loss, gn, step, gn < cfg.grad_tol, hist)


def write_training_log(report: LossReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "grad_norm"])
        for step, loss, gn in report.history:
            w.writerow([step, repr(float(loss)), repr(float(gn))])
