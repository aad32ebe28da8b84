"""Factorised policies ``softmax(W . Theta tau(x) + b)`` and simplex adapters."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import nnls
from scipy.special import log_softmax

from proxyadapt.errors import InvalidInputError, UndefinedRepresentativeError
from proxyadapt.geometry import numerical_rank, project_to_simplex, pseudoinverse
from proxyadapt.policy import d_py

CHECKPOINT_VERSION = 1
REP_TOL = 1e-9


@dataclass
class DecoderParams:
    weight: np.ndarray  # |Y| x N
    bias: np.ndarray  # |Y|

    def __post_init__(self):
        self.weight = np.atleast_2d(np.asarray(self.weight, dtype=float))
        self.bias = np.asarray(self.bias, dtype=float).ravel()
        if self.bias.shape[0] != self.weight.shape[0]:
            raise InvalidInputError("bias length must match weight rows")

    @property
    def n_responses(self) -> int:
        return self.weight.shape[0]

    def logits(self, v) -> np.ndarray:
        return np.asarray(v) @ self.weight.T + self.bias

    def log_probs(self, v) -> np.ndarray:
        return log_softmax(self.logits(v), axis=-1)

    def __call__(self, v) -> np.ndarray:
        return np.exp(self.log_probs(v))

    def centered(self) -> tuple[np.ndarray, np.ndarray]:
        """Weight and bias in the zero-sum logit gauge (softmax is shift-invariant)."""
        return (self.weight - self.weight.mean(axis=0, keepdims=True),
                self.bias - self.bias.mean())

    def is_injective(self) -> bool:
        Wc, _ = self.centered()
        return numerical_rank(Wc) == Wc.shape[1]

    def invert(self, p) -> tuple[np.ndarray, float]:
        """Left inverse: latent point(s) ``v`` with ``softmax(W v + b) ~ p``.

        Returns ``(v, residual)`` where the residual is the largest absolute
        log-probability mismatch after re-evaluating the decoder on ``v``.
        """
        P = np.atleast_2d(np.asarray(p, dtype=float))
        logp = np.log(np.maximum(P, 1e-300))
        lc = logp - logp.mean(axis=1, keepdims=True)
        Wc, bc = self.centered()
        V = (lc - bc) @ pseudoinverse(Wc).T
        resid = float(np.max(np.abs(self.log_probs(V) - logp)))
        return (V[0] if np.ndim(p) == 1 else V), resid


def polytope_membership(v, theta) -> tuple[np.ndarray, float]:
    """Barycentric weights ``s`` in the simplex with ``theta @ s ~ v``, and the residual.

    Solved as non-negative least squares with a heavily weighted sum-to-one row;
    the residual is ``max|theta @ s - v|`` after renormalising ``s``.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    v = np.asarray(v, dtype=float).ravel()
    w = 1e4 * max(1.0, float(np.abs(theta).max()))
    A = np.vstack([theta, w * np.ones((1, theta.shape[1]))])
    rhs = np.concatenate([v, [w]])
    s, _ = nnls(A, rhs, maxiter=50 * A.shape[1])
    tot = s.sum()
    if tot <= 0:
        return s, float("inf")
    s = s / tot
    return s, float(np.max(np.abs(theta @ s - v)))


@dataclass
class AdapterMap:
    """Map ``Delta^D -> Delta^D`` either as a lookup table or affine-then-project.

    Table mode holds one output per level-set representative; parametric mode
    computes ``project_to_simplex(A p + a)``.
    """

    mode: str = "table"
    keys: np.ndarray | None = None
    values: np.ndarray | None = None
    A: np.ndarray | None = None
    a: np.ndarray | None = None
    tol: float = REP_TOL

    @classmethod
    def identity_table(cls, reps) -> "AdapterMap":
        reps = np.atleast_2d(np.asarray(reps, dtype=float))
        return cls("table", reps.copy(), reps.copy())

    @classmethod
    def identity_affine(cls, dim: int) -> "AdapterMap":
        return cls("affine", A=np.eye(dim), a=np.zeros(dim))

    @classmethod
    def constant(cls, point, dim: int | None = None) -> "AdapterMap":
        point = np.asarray(point, dtype=float)
        d = point.shape[0]
        return cls("affine", A=np.zeros((d, d)), a=point.copy())

    def copy(self) -> "AdapterMap":
        return replace(self, **{k: (None if getattr(self, k) is None else getattr(self, k).copy())
                                for k in ("keys", "values", "A", "a")})

    def lookup(self, p) -> int:
        p = np.asarray(p, dtype=float)
        dist = np.max(np.abs(self.keys - p), axis=1)
        k = int(np.argmin(dist))
        if dist[k] > self.tol:
            raise UndefinedRepresentativeError(f"no representative within {self.tol} of {p}")
        return k

    def __call__(self, p) -> np.ndarray:
        P = np.asarray(p, dtype=float)
        if self.mode == "table":
            if P.ndim == 1:
                return self.values[self.lookup(P)].copy()
            return np.vstack([self.values[self.lookup(row)] for row in P])
        if self.mode == "affine":
            return project_to_simplex(P @ self.A.T + self.a)
        raise InvalidInputError(f"unknown adapter mode {self.mode!r}")

    @property
    def n_params(self) -> int:
        if self.mode == "table":
            return int(self.values.size)
        return int(self.A.size + self.a.size)

    def to_json(self) -> dict:
        if self.mode == "table":
            return {"mode": "table",
                    "entries": [{"representative": k.tolist(), "adapted": v.tolist()}
                                for k, v in zip(self.keys, self.values)]}
        return {"mode": "affine", "A": self.A.tolist(), "a": self.a.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "AdapterMap":
        if obj["mode"] == "table":
            keys = np.array([e["representative"] for e in obj["entries"]], dtype=float)
            vals = np.array([e["adapted"] for e in obj["entries"]], dtype=float)
            return cls("table", keys, vals)
        return cls("affine", A=np.array(obj["A"], dtype=float), a=np.array(obj["a"], dtype=float))


@dataclass
class FactorizedPolicy:
    tau: np.ndarray  # |X| x (D+1), rows in the simplex
    theta: np.ndarray  # N x (D+1), columns are the vertices of V
    decoder: DecoderParams
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tau = np.atleast_2d(np.asarray(self.tau, dtype=float))
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        if self.tau.shape[1] != self.theta.shape[1]:
            raise InvalidInputError("tau and theta disagree on D+1")
        if self.decoder.weight.shape[1] != self.theta.shape[0]:
            raise InvalidInputError("decoder weight must have N columns")

    @property
    def n_prompts(self) -> int:
        return self.tau.shape[0]

    @property
    def n_responses(self) -> int:
        return self.decoder.n_responses

    @property
    def D(self) -> int:
        return self.tau.shape[1] - 1

    @property
    def N(self) -> int:
        return self.theta.shape[0]

    def latent(self, simplex_points=None) -> np.ndarray:
        P = self.tau if simplex_points is None else np.asarray(simplex_points, dtype=float)
        return P @ self.theta.T

    def log_table(self, adapter: AdapterMap | None = None) -> np.ndarray:
        P = self.tau if adapter is None else adapter(self.tau)
        return self.decoder.log_probs(self.latent(P))

    def table(self, adapter: AdapterMap | None = None) -> np.ndarray:
        return np.exp(self.log_table(adapter))

    def evaluate(self, x: int) -> np.ndarray:
        return self.decoder(self.theta @ self.tau[x])

    def evaluate_with_adapter(self, adapter: AdapterMap, x: int) -> np.ndarray:
        return self.decoder(self.theta @ adapter(self.tau[x]))

    def copy(self) -> "FactorizedPolicy":
        return FactorizedPolicy(self.tau.copy(), self.theta.copy(),
                                DecoderParams(self.decoder.weight.copy(), self.decoder.bias.copy()),
                                dict(self.meta))

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "shape": {"n_prompts": self.n_prompts, "n_responses": self.n_responses,
                      "N": self.N, "D": self.D},
            "tau": self.tau.ravel().tolist(),
            "theta": self.theta.ravel().tolist(),
            "weight": self.decoder.weight.ravel().tolist(),
            "bias": self.decoder.bias.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FactorizedPolicy":
        if "version" not in obj:
            raise InvalidInputError("checkpoint is missing its version field")
        if obj["version"] != CHECKPOINT_VERSION:
            raise InvalidInputError(f"unsupported checkpoint version {obj['version']}")
        sh = obj["shape"]
        nx, ny, N, D = sh["n_prompts"], sh["n_responses"], sh["N"], sh["D"]
        return cls(np.array(obj["tau"], dtype=float).reshape(nx, D + 1),
                   np.array(obj["theta"], dtype=float).reshape(N, D + 1),
                   DecoderParams(np.array(obj["weight"], dtype=float).reshape(ny, N),
                                 np.array(obj["bias"], dtype=float)))


def save_checkpoint(fp: FactorizedPolicy, path) -> None:
    Path(path).write_text(json.dumps(fp.to_json()))


def load_checkpoint(path) -> FactorizedPolicy:
    return FactorizedPolicy.from_json(json.loads(Path(path).read_text()))


def _sample_simplex(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    # normalised exponentials are Dirichlet(1); drawn row by row so that a
    # longer run extends a shorter one with the same seed
    E = rng.standard_exponential(size=(n, dim))
    return E / E.sum(axis=1, keepdims=True)


def decoder_lipschitz_estimate(dec: DecoderParams, theta, samples: int, seed: int,
                               beta: float = 1.0, ord: float = 2) -> tuple[float, float]:
    """Empirical lower bounds on ``(L_phi, L_phi_inv)`` from random pairs in ``V``.

    ``L_phi`` is the largest ``d_PY(phi(v1), phi(v2)) / |v1 - v2|`` seen and
    ``L_phi_inv`` the largest reciprocal ratio. Coincident pairs are skipped.
    """
    if samples < 2:
        raise InvalidInputError("need at least 2 samples")
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    rng = np.random.Generator(np.random.PCG64(seed))
    S = _sample_simplex(rng, 2 * samples, theta.shape[1]).reshape(samples, 2, -1)
    V1 = S[:, 0] @ theta.T
    V2 = S[:, 1] @ theta.T
    L1 = dec.log_probs(V1)
    L2 = dec.log_probs(V2)
    dist_py = beta * np.max(np.abs(L1 - L2), axis=1)
    dist_v = np.linalg.norm(V1 - V2, ord=ord, axis=1)
    ok = dist_v > 1e-12
    if not np.any(ok):
        return 0.0, 0.0
    l_phi = float(np.max(dist_py[ok] / dist_v[ok]))
    ok_inv = ok & (dist_py > 1e-15)
    l_inv = float(np.max(dist_v[ok_inv] / dist_py[ok_inv])) if np.any(ok_inv) else float("inf")
    return l_phi, l_inv


def theta_operator_norm(theta, ord: float = 2) -> float:
    """Operator norm of ``theta`` restricted to differences of simplex points."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    k = theta.shape[1]
    # differences of simplex points span the sum-zero subspace
    Q = np.linalg.qr(np.vstack([np.ones(k), np.eye(k)[:-1]]).T)[0][:, 1:]
    if Q.shape[1] == 0:
        return 0.0
    return float(np.linalg.norm(theta @ Q, ord=2)) if ord == 2 else float(np.linalg.norm(theta, ord=ord))


def decoded_distance(fp: FactorizedPolicy, p, q, beta: float) -> float:
    return d_py(fp.decoder(fp.theta @ p), fp.decoder(fp.theta @ q), beta)
