"""Synthetic ground-truth instances that satisfy the four conditions by construction."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from proxyadapt.conditions import ConditionReport, check_conditions
from proxyadapt.errors import (FixtureInvalidError, GenerationFailedError, InternalConsistencyError,
                               InvalidInputError)
from proxyadapt.factorized import AdapterMap, DecoderParams, FactorizedPolicy, load_checkpoint
from proxyadapt.geometry import numerical_rank
from proxyadapt.oracle import build_level_sets, oracle_adapter, verify_reconstruction
from proxyadapt.policy import RewardTable, implicit_reward, optimal_policy
from proxyadapt.preferences import DataProcess, make_rng

MAX_REDRAWS = 100


@dataclass(frozen=True)
class InstanceConfig:
    n_prompts: int = 24
    n_responses: int = 12
    N: int = 5
    D: int = 2
    level_sets: int = 6
    beta: float = 1.0
    decoder_scale: float = 1.0
    min_rep_separation: float = 0.05
    adapter: str = "random"  # "random" | "identity"
    lipschitz_factor: float = 2.0

    def validate(self):
        if self.level_sets > self.n_prompts or self.level_sets < 1:
            raise InvalidInputError("need 1 <= level_sets <= n_prompts")
        if self.D + 1 > self.n_responses:
            raise InvalidInputError("need D + 1 <= |Y|")
        if self.N > self.n_responses - 1:
            raise InvalidInputError("an injective softmax decoder needs N <= |Y| - 1")
        if self.adapter not in ("random", "identity"):
            raise InvalidInputError(f"unknown adapter kind {self.adapter!r}")


@dataclass
class InstanceBundle:
    config: InstanceConfig
    seed: int
    fp: FactorizedPolicy
    planted_adapter: AdapterMap
    proxy_policy: np.ndarray
    true_policy: np.ndarray
    pi_ref: np.ndarray
    proxy_reward: RewardTable
    true_reward: RewardTable
    prompt_dist: np.ndarray
    partition: list
    certificates: ConditionReport | None = None
    lipschitz_threshold: float | None = None
    tags: dict = field(default_factory=dict)

    @property
    def beta(self) -> float:
        return self.config.beta

    def proxy_process(self) -> DataProcess:
        return DataProcess(self.proxy_reward, self.pi_ref, self.prompt_dist)

    def true_process(self) -> DataProcess:
        return DataProcess(self.true_reward, self.pi_ref, self.prompt_dist)

    def check(self) -> ConditionReport:
        return check_conditions(self.true_policy, self.fp, self.beta,
                                lipschitz_threshold=self.lipschitz_threshold, seed=self.seed)


def _random_partition(rng, n: int, k: int) -> list[list[int]]:
    labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
    rng.shuffle(labels)
    return [sorted(np.flatnonzero(labels == c).tolist()) for c in range(k)]


def _dirichlet_rows(rng, n: int, dim: int) -> np.ndarray:
    E = rng.standard_exponential(size=(n, dim))
    return E / E.sum(axis=1, keepdims=True)


def _min_separation(P: np.ndarray) -> float:
    if P.shape[0] < 2:
        return np.inf
    d = np.max(np.abs(P[:, None, :] - P[None, :, :]), axis=2)
    return float(d[np.triu_indices(P.shape[0], 1)].min())


def _planted_map(rng, reps: np.ndarray, cfg: InstanceConfig) -> np.ndarray:
    """Column-stochastic linear map on the representatives, redrawn until injective on them."""
    if cfg.adapter == "identity":
        return reps.copy()
    k = reps.shape[1]
    for _ in range(MAX_REDRAWS):
        M = _dirichlet_rows(rng, k, k).T  # columns sum to one: maps the simplex into itself
        out = reps @ M.T
        if _min_separation(out) > 0.5 * cfg.min_rep_separation:
            return out
    raise GenerationFailedError("could not draw an adapter that is injective on the representatives")


def _policies(fp: FactorizedPolicy, adapter: AdapterMap, beta: float):
    nx, ny = fp.n_prompts, fp.n_responses
    pi_ref = np.full((nx, ny), 1.0 / ny)
    proxy_r = implicit_reward(fp.table(), pi_ref, beta)
    true_r = implicit_reward(fp.table(adapter), pi_ref, beta)
    return pi_ref, proxy_r, true_r, fp.table(), fp.table(adapter)


def generate_instance(cfg: InstanceConfig | None = None, seed: int = 0, **overrides) -> InstanceBundle:
    """Draw a bundle whose proxy and true policies share planted components.

    Encoder rows are constant on a random partition of the prompts, ``Theta``
    and the decoder have full column rank, and the planted adapter is
    injective on the representatives. Rewards are implicit rewards of the two
    policies, so Bradley-Terry data targets exactly these policies.
    """
    cfg = replace(cfg or InstanceConfig(), **overrides)
    cfg.validate()
    rng = make_rng(seed)
    nx, ny, N, D = cfg.n_prompts, cfg.n_responses, cfg.N, cfg.D
    for _ in range(MAX_REDRAWS):
        partition = _random_partition(rng, nx, cfg.level_sets)
        reps = _dirichlet_rows(rng, cfg.level_sets, D + 1)
        theta = rng.standard_normal((N, D + 1))
        weight = cfg.decoder_scale * rng.standard_normal((ny, N)) / np.sqrt(N)
        bias = 0.5 * rng.standard_normal(ny)
        dec = DecoderParams(weight, bias)
        if _min_separation(reps) < cfg.min_rep_separation:
            continue
        if numerical_rank(dec.centered()[0]) < N:
            continue
        # V's vertices must stay distinct and the latent images of the reps distinct
        if _min_separation(theta.T) < 1e-6 or _min_separation(reps @ theta.T) < 1e-6:
            continue
        break
    else:
        raise GenerationFailedError("could not draw well-separated components")

    tau = np.empty((nx, D + 1))
    for k, mem in enumerate(partition):
        tau[mem] = reps[k]
    fp = FactorizedPolicy(tau, theta, dec)
    adapter = AdapterMap("table", reps.copy(), _planted_map(rng, reps, cfg))
    pi_ref, proxy_r, true_r, proxy, true = _policies(fp, adapter, cfg.beta)
    bundle = InstanceBundle(cfg, seed, fp, adapter, proxy, true, pi_ref, proxy_r, true_r,
                            np.full(nx, 1.0 / nx), partition)
    clean = check_conditions(true, fp, cfg.beta, seed=seed)
    if not clean.overall:
        raise InternalConsistencyError(f"generated instance fails conditions {clean.failed()}")
    L = clean.lipschitz_diff
    bundle.lipschitz_threshold = max(cfg.lipschitz_factor * L, 1e-12) if L else cfg.lipschitz_factor
    bundle.certificates = bundle.check()
    if not bundle.certificates.overall:
        raise InternalConsistencyError("certificate failed after threshold calibration")
    err = verify_reconstruction(true, fp, oracle_adapter(true, fp), cfg.beta)
    if err > 1e-8:
        raise InternalConsistencyError(f"oracle adapter reconstruction error {err:.3g}")
    return bundle


# --- negative fixtures -----------------------------------------------------


def _with_true_policy(bundle: InstanceBundle, true: np.ndarray, tag: str) -> InstanceBundle:
    true_r = implicit_reward(true, bundle.pi_ref, bundle.beta)
    true = optimal_policy(true_r, bundle.pi_ref).table
    out = replace(bundle, true_policy=true, true_reward=true_r, tags={**bundle.tags, "broken": tag})
    out.certificates = out.check()
    return out


def _candidates_1(bundle, rng):
    k = len(bundle.partition)
    pairs = [(a, b) for a in range(k) for b in range(k) if a != b]
    rng.shuffle(pairs)
    for a, b in pairs:
        T = bundle.true_policy.copy()
        T[bundle.partition[a]] = T[bundle.partition[b][0]]
        yield T


def _candidates_2(bundle, rng, eta: float = 1e-3):
    """Push one whole level set slightly off the decoder image (keeps level sets intact)."""
    Wc, _ = bundle.fp.decoder.centered()
    ny = Wc.shape[0]
    # logit directions invisible to the decoder: orthogonal to its columns and to constants
    basis = np.linalg.svd(np.hstack([Wc, np.ones((ny, 1))]), full_matrices=True)[0][:, Wc.shape[1] + 1:]
    order = list(range(len(bundle.partition)))
    rng.shuffle(order)
    for k in order:
        u = basis @ rng.standard_normal(basis.shape[1])
        u /= np.max(np.abs(u))
        T = bundle.true_policy.copy()
        row = T[bundle.partition[k][0]] * np.exp(eta * u)
        T[bundle.partition[k]] = row / row.sum()
        yield T


def _candidates_4(bundle, rng):
    """Move one adapted point to the simplex vertex farthest from its proxy-nearest neighbour."""
    fp = bundle.fp
    reps = bundle.planted_adapter.keys
    vals = bundle.planted_adapter.values
    proxy_rows = fp.decoder(reps @ fp.theta.T)
    k = reps.shape[0]
    dist = np.array([[np.max(np.abs(np.log(proxy_rows[i]) - np.log(proxy_rows[j]))) if i != j else np.inf
                      for j in range(k)] for i in range(k)])
    order = np.argsort(dist.min(axis=1), kind="stable")
    corners = np.eye(fp.D + 1)
    corner_rows = fp.decoder(corners @ fp.theta.T)
    for i in order:
        j = int(np.argmin(dist[i]))
        true_j = fp.decoder(fp.theta @ vals[j])
        far = np.argsort([-np.max(np.abs(np.log(c) - np.log(true_j))) for c in corner_rows], kind="stable")
        for c in far:
            adapter = AdapterMap("table", reps.copy(), vals.copy())
            adapter.values[i] = corners[c]
            yield fp.table(adapter)


def break_condition(bundle: InstanceBundle, which: int, seed: int = 0) -> InstanceBundle:
    """Minimal perturbation of the true policy that violates exactly condition ``which``.

    1: merge two level sets in the true policy only; 2: nudge one level set off
    the decoder image; 4: spike one adapted point so the Lipschitz ratio exceeds
    the bundle's threshold. Candidates are tried in a seeded order and the
    first one that fails only the targeted certificate is returned.
    """
    gens = {1: _candidates_1, 2: _candidates_2, 4: _candidates_4}
    if which not in gens:
        raise InvalidInputError("which must be one of 1, 2, 4")
    rng = make_rng((seed, which))
    for T in gens[which](bundle, rng):
        out = _with_true_policy(bundle, T, f"condition-{which}")
        if out.certificates.failed() == [which]:
            return out
    raise FixtureInvalidError(f"no perturbation breaks only condition {which}; redraw the bundle")


# --- serialisation ---------------------------------------------------------


def _write_rewards(path: Path, bundle: InstanceBundle) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "x", "y", "reward"])
        for name, r in (("proxy", bundle.proxy_reward), ("true", bundle.true_reward)):
            for (x, y), v in np.ndenumerate(r.values):
                w.writerow([name, x, y, repr(float(v))])


def save_bundle(bundle: InstanceBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoint.json").write_text(json.dumps(bundle.fp.to_json()))
    _write_rewards(out / "rewards.csv", bundle)
    (out / "certificates.json").write_text(json.dumps(bundle.certificates.to_json(), indent=1))
    manifest = {
        "seed": bundle.seed,
        "sizes": asdict(bundle.config),
        "beta": bundle.beta,
        "pi_ref": bundle.pi_ref.tolist(),
        "prompt_dist": bundle.prompt_dist.tolist(),
        "partition": bundle.partition,
        "planted_adapter": bundle.planted_adapter.to_json(),
        "lipschitz_threshold": bundle.lipschitz_threshold,
        "tags": bundle.tags,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_bundle(in_dir) -> InstanceBundle:
    d = Path(in_dir)
    man = json.loads((d / "manifest.json").read_text())
    cfg = InstanceConfig(**man["sizes"])
    fp = load_checkpoint(d / "checkpoint.json")
    nx, ny = fp.n_prompts, fp.n_responses
    vals = {"proxy": np.zeros((nx, ny)), "true": np.zeros((nx, ny))}
    with (d / "rewards.csv").open() as fh:
        for row in csv.DictReader(fh):
            vals[row["source"]][int(row["x"]), int(row["y"])] = float(row["reward"])
    pi_ref = np.array(man["pi_ref"], dtype=float)
    proxy_r = RewardTable(vals["proxy"], man["beta"])
    true_r = RewardTable(vals["true"], man["beta"])
    bundle = InstanceBundle(cfg, man["seed"], fp, AdapterMap.from_json(man["planted_adapter"]),
                            optimal_policy(proxy_r, pi_ref).table, optimal_policy(true_r, pi_ref).table,
                            pi_ref, proxy_r, true_r, np.array(man["prompt_dist"], dtype=float),
                            man["partition"], None, man["lipschitz_threshold"], man.get("tags", {}))
    bundle.certificates = bundle.check()
    return bundle
