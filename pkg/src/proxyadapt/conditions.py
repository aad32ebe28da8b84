"""Certificates for the four structural conditions on a (true, proxy) pair."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np

from proxyadapt.errors import ConditionViolation
from proxyadapt.factorized import FactorizedPolicy, decoder_lipschitz_estimate, polytope_membership
from proxyadapt.geometry import numerical_rank
from proxyadapt.oracle import LevelSetIndex, build_level_sets, group_rows
from proxyadapt.policy import as_table, d_py

ROW_TOL = 1e-9
IMAGE_TOL = 1e-6


def _partition_labels(table, tol: float) -> np.ndarray:
    _, members = group_rows(table, tol)
    lab = np.empty(np.asarray(table).shape[0], dtype=int)
    for k, m in enumerate(members):
        lab[m] = k
    return lab


def check_shared_level_sets(p1, p2, tol: float = ROW_TOL) -> tuple[bool, dict | None]:
    """Do ``p1`` and ``p2`` induce the same partition of prompts by row equality?

    On failure the first offending pair is returned together with which
    policy merges it.
    """
    a = _partition_labels(as_table(p1), tol)
    b = _partition_labels(as_table(p2), tol)
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    bad = np.argwhere(np.triu(same_a != same_b, k=1))
    if bad.size == 0:
        return True, None
    x1, x2 = (int(i) for i in bad[0])
    direction = "first-only" if same_a[x1, x2] else "second-only"
    return False, {"pair": [x1, x2], "equal_under": direction, "count": int(bad.shape[0])}


def check_image_inclusion(true_p, fp: FactorizedPolicy, tol: float = IMAGE_TOL) -> tuple[bool, float]:
    """Every true row must decode to a point of ``V`` and re-encode to itself.

    The residual is the worst of the decoder round-trip error (max abs
    log-probability mismatch) and the distance of the pre-image from ``V``.
    """
    T = as_table(true_p)
    V, resid = fp.decoder.invert(T)
    worst = resid
    for v in V:
        worst = max(worst, polytope_membership(v, fp.theta)[1])
    return worst < tol, float(worst)


def exact_image_inclusion(true_p, proxy_p, tol: float = ROW_TOL) -> bool:
    """Literal reading: each true row equals some proxy row."""
    T = as_table(true_p)
    P = as_table(proxy_p)
    return all(np.min(np.max(np.abs(P - t), axis=1)) <= tol for t in T)


def estimate_lipschitz_diff(true_p, fp: FactorizedPolicy, ls: LevelSetIndex | None = None,
                            beta: float = 1.0, tol: float = IMAGE_TOL) -> float:
    """Largest ratio of true to proxy ``d_PY`` distance over representative pairs.

    Requires the true policy to be constant on every proxy level set, otherwise
    the composed map is not a function.
    """
    ls = ls or build_level_sets(fp)
    T = as_table(true_p)
    proxy = fp.table()
    for k, mem in enumerate(ls.members):
        if len(mem) > 1 and np.max(np.abs(T[mem] - T[mem[0]])) > tol:
            raise ConditionViolation(1, f"true policy is not a function of the proxy on level set {k}")
    firsts = [m[0] for m in ls.members]
    best = 0.0
    for i, j in combinations(firsts, 2):
        den = d_py(proxy[i], proxy[j], beta)
        num = d_py(T[i], T[j], beta)
        if den == 0.0:
            if num > 0.0:
                return float("inf")
            continue
        best = max(best, num / den)
    return best


@dataclass
class ConditionReport:
    shared_level_sets: bool
    level_set_violation: dict | None
    image_inclusion: bool
    image_residual: float
    exact_image_inclusion: bool
    encoding: bool
    encoding_constants: dict
    lipschitz_diff: float | None
    lipschitz_threshold: float | None
    lipschitz_ok: bool
    overall: bool = field(init=False)

    def __post_init__(self):
        self.overall = bool(self.shared_level_sets and self.image_inclusion
                            and self.encoding and self.lipschitz_ok)

    def failed(self) -> list[int]:
        flags = {1: self.shared_level_sets, 2: self.image_inclusion,
                 3: self.encoding, 4: self.lipschitz_ok}
        return [k for k, ok in flags.items() if not ok]

    def to_json(self) -> dict:
        d = asdict(self)
        d["failed"] = self.failed()
        for k in ("image_residual", "lipschitz_diff"):
            if d[k] is not None and not np.isfinite(d[k]):
                d[k] = str(d[k])
        return d


def check_encoding(fp: FactorizedPolicy, beta: float = 1.0, samples: int = 2000, seed: int = 0) -> tuple[bool, dict]:
    """Constructive certificate: injective decoder, affinely independent V vertices."""
    injective = fp.decoder.is_injective()
    l_phi, l_inv = decoder_lipschitz_estimate(fp.decoder, fp.theta, samples, seed, beta)
    consts = {"D": fp.D, "N": fp.N, "L_phi": l_phi, "L_phi_inv": l_inv,
              "decoder_rank": numerical_rank(fp.decoder.centered()[0])}
    return bool(injective), consts


def check_conditions(true_p, fp: FactorizedPolicy, beta: float = 1.0, row_tol: float = ROW_TOL,
                     image_tol: float = IMAGE_TOL, lipschitz_threshold: float | None = None,
                     samples: int = 2000, seed: int = 0) -> ConditionReport:
    proxy = fp.table()
    shared, viol = check_shared_level_sets(true_p, proxy, row_tol)
    img_ok, resid = check_image_inclusion(true_p, fp, image_tol)
    enc_ok, consts = check_encoding(fp, beta, samples, seed)
    try:
        L = estimate_lipschitz_diff(true_p, fp, build_level_sets(fp, row_tol), beta, image_tol)
        lip_ok = lipschitz_threshold is None or L <= lipschitz_threshold
    except ConditionViolation:
        L, lip_ok = None, False
    return ConditionReport(shared, viol, img_ok, resid, exact_image_inclusion(true_p, proxy, row_tol),
                           enc_ok, consts, L, lipschitz_threshold, lip_ok)
