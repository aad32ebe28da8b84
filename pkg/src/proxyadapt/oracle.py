"""Constructive adapter: psi from the two policies, then centroids of simplex slices.

For each level-set representative ``p`` of the proxy encoder, ``psi(Theta p)``
is the decoder pre-image of the true response distribution. The adapted
point is the centroid of ``Delta^D  intersect  (Theta^+ psi(Theta p) + Ker Theta)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from proxyadapt.errors import ConditionViolation, InternalConsistencyError
from proxyadapt.factorized import AdapterMap, FactorizedPolicy, polytope_membership
from proxyadapt.geometry import polytope_centroid, pseudoinverse, slice_vertices
from proxyadapt.policy import as_table, d_py

LEVEL_SET_TOL = 1e-9
CONDITION_TOL = 1e-6


def group_rows(rows, tol: float = LEVEL_SET_TOL) -> tuple[np.ndarray, list[list[int]]]:
    """Partition row indices by inf-norm equality; first occurrence is the representative."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    reps: list[np.ndarray] = []
    members: list[list[int]] = []
    for i, r in enumerate(rows):
        for k, rep in enumerate(reps):
            if np.max(np.abs(r - rep)) <= tol:
                members[k].append(i)
                break
        else:
            reps.append(r)
            members.append([i])
    return np.vstack(reps), members


@dataclass
class LevelSetIndex:
    representatives: np.ndarray
    members: list[list[int]]

    def __len__(self) -> int:
        return len(self.members)

    def class_of(self) -> np.ndarray:
        out = np.empty(sum(len(m) for m in self.members), dtype=int)
        for k, m in enumerate(self.members):
            out[m] = k
        return out


def build_level_sets(fp: FactorizedPolicy, tol: float = LEVEL_SET_TOL) -> LevelSetIndex:
    reps, members = group_rows(fp.tau, tol)
    return LevelSetIndex(reps, members)


@dataclass
class PsiMap:
    """Latent targets ``psi(Theta p)`` keyed by representative ``p``."""

    representatives: np.ndarray
    targets: np.ndarray

    def __call__(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        k = int(np.argmin(np.max(np.abs(self.representatives - p), axis=1)))
        if np.max(np.abs(self.representatives[k] - p)) > LEVEL_SET_TOL:
            raise KeyError(f"{p} is not a representative")
        return self.targets[k]


def build_psi(true_policy, fp: FactorizedPolicy, ls: LevelSetIndex,
              tol: float = CONDITION_TOL) -> PsiMap:
    """Decoder pre-images of the true policy, one per proxy level set.

    Raises :class:`ConditionViolation` (1) when the true policy is not constant
    on a proxy level set and (2) when a true row is outside ``phi(V)``.
    """
    T = as_table(true_policy)
    targets = []
    for k, mem in enumerate(ls.members):
        rows = T[mem]
        spread = float(np.max(np.abs(rows - rows[0]))) if len(mem) > 1 else 0.0
        if spread > tol:
            raise ConditionViolation(1, f"true policy varies by {spread:.3g} on level set {k}")
        v, resid = fp.decoder.invert(rows[0])
        if resid > tol:
            raise ConditionViolation(2, f"row of level set {k} is not in the decoder image (residual {resid:.3g})")
        _, mem_resid = polytope_membership(v, fp.theta)
        if mem_resid > tol:
            raise ConditionViolation(2, f"pre-image of level set {k} lies outside V (residual {mem_resid:.3g})")
        targets.append(v)
    return PsiMap(ls.representatives.copy(), np.vstack(targets))


def adapter_at(p, psi: PsiMap, theta) -> np.ndarray:
    """Centroid of the simplex slice whose image under ``theta`` is ``psi(theta p)``."""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    target = psi(p)
    return adapter_for_target(target, theta)


def adapter_for_target(target, theta) -> np.ndarray:
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    c = pseudoinverse(theta) @ np.asarray(target, dtype=float)
    sl = slice_vertices(theta, theta @ c)
    if sl.vertices.shape[0] == 0:
        raise InternalConsistencyError("slice is empty although psi should land in V")
    out = polytope_centroid(sl)
    if np.max(np.abs(theta @ out - target)) > 1e-8 * max(1.0, np.abs(target).max()):
        raise InternalConsistencyError("centroid does not reproduce psi")
    return np.clip(out, 0.0, None) / np.clip(out, 0.0, None).sum()


def oracle_adapter(true_policy, fp: FactorizedPolicy, ls: LevelSetIndex | None = None) -> AdapterMap:
    """Table adapter built by the centroid construction on every representative."""
    ls = ls or build_level_sets(fp)
    psi = build_psi(true_policy, fp, ls)
    vals = np.vstack([adapter_for_target(t, fp.theta) for t in psi.targets])
    return AdapterMap("table", ls.representatives.copy(), vals)


def verify_reconstruction(true_policy, fp: FactorizedPolicy, adapter: AdapterMap, beta: float = 1.0) -> float:
    """Largest ``d_PY`` between the true rows and the adapted factorised policy."""
    T = as_table(true_policy)
    A = fp.table(adapter)
    return max(d_py(T[x], A[x], beta) for x in range(T.shape[0]))


def write_adapter_json(adapter: AdapterMap, path) -> None:
    Path(path).write_text(json.dumps(adapter.to_json(), indent=1))
