"""Learning-curve experiment: two-stage (with proxy) against scratch training.

One cell is one ``(seed, replicate)``. A cell generates its instance, fits
Stage 1 on ``n_proxy`` proxy triples, draws the largest true dataset once and
trains both arms on its prefixes for every grid size. Cells are independent,
so they run in a process pool and are merged in cell order.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from proxyadapt.bounds import BoundInputs, evaluate_all
from proxyadapt.dpo import (AdaptedPolicy, TrainConfig, population_dpo_loss, train_stage1,
                            train_stage2, train_tabular)
from proxyadapt.errors import InvalidInputError, ProxyAdaptError
from proxyadapt.factorized import AdapterMap, theta_operator_norm
from proxyadapt.instances import InstanceConfig, generate_instance
from proxyadapt.policy import TabularPolicy, d_r
from proxyadapt.preferences import sample_preferences

ARMS = ("with-proxy", "scratch")
CSV_COLUMNS = ("seed", "replicate", "arm", "n_true", "dr_error", "pop_loss_gap")

DEFAULT_GRID = (0, 500, 1000, 2000, 5000, 10000, 20000, 50000, 100000, 200000, 500000, 1000000)
STAGE1_DEFAULT = {"learning_rate": 2.0, "max_steps": 5000, "grad_tol": 1e-5}
STAGE2_DEFAULT = {"learning_rate": 2.0, "max_steps": 5000, "grad_tol": 1e-5}
SCRATCH_DEFAULT = {"learning_rate": 20.0, "max_steps": 5000, "grad_tol": 1e-5}
BOUNDS_DEFAULT = {"epsilon": 0.1, "omega": 0.05, "E_prime": 1.0}


@dataclass
class ExperimentConfig:
    n_prompts: int = 24
    n_responses: int = 12
    N: int = 5
    D: int = 2
    level_sets: int = 6
    beta: float = 1.0
    adapter: str = "random"
    seeds: list = field(default_factory=lambda: list(range(10)))
    n_true_grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    n_proxy: int = 20000
    replicates: int = 1
    stage1: dict = field(default_factory=lambda: dict(STAGE1_DEFAULT))
    stage2: dict = field(default_factory=lambda: dict(STAGE2_DEFAULT))
    scratch: dict = field(default_factory=lambda: dict(SCRATCH_DEFAULT))
    bounds: dict = field(default_factory=lambda: dict(BOUNDS_DEFAULT))
    threshold: float = 0.1
    output_dir: str | None = None

    def __post_init__(self):
        self.seeds = [int(s) for s in self.seeds]
        self.n_true_grid = [int(n) for n in self.n_true_grid]
        if not self.n_true_grid:
            raise InvalidInputError("n_true_grid must not be empty")
        if any(b <= a for a, b in zip(self.n_true_grid, self.n_true_grid[1:])) or self.n_true_grid[0] < 0:
            raise InvalidInputError("n_true_grid must be strictly ascending and non-negative")
        if not self.seeds:
            raise InvalidInputError("seeds must not be empty")
        if self.replicates < 1:
            raise InvalidInputError("replicates must be at least 1")
        if self.n_proxy < 1:
            raise InvalidInputError("n_proxy must be positive")
        self.stage1 = {**STAGE1_DEFAULT, **self.stage1}
        self.stage2 = {**STAGE2_DEFAULT, **self.stage2}
        self.scratch = {**SCRATCH_DEFAULT, **self.scratch}
        self.bounds = {**BOUNDS_DEFAULT, **self.bounds}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidInputError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def instance_config(self) -> InstanceConfig:
        return InstanceConfig(n_prompts=self.n_prompts, n_responses=self.n_responses, N=self.N, D=self.D,
                              level_sets=self.level_sets, beta=self.beta, adapter=self.adapter)

    def train_config(self, which: str, seed: int) -> TrainConfig:
        return TrainConfig(beta=self.beta, seed=seed, **getattr(self, which))


@dataclass
class CurvePoint:
    n_true: int
    arm: str
    mean_dr_error: float
    std_dr_error: float | None
    mean_pop_loss_gap: float
    count: int


@dataclass
class CellResult:
    seed: int
    replicate: int
    rows: list
    failures: list
    certificates: dict
    bounds: dict | None


def _adapter_lipschitz(adapter: AdapterMap) -> float:
    best = 0.0
    for i, j in combinations(range(len(adapter.keys)), 2):
        den = np.linalg.norm(adapter.keys[i] - adapter.keys[j])
        if den > 0:
            best = max(best, float(np.linalg.norm(adapter.values[i] - adapter.values[j]) / den))
    return best


def estimated_bound_inputs(bundle, bcfg: dict) -> BoundInputs:
    """Bound inputs with the instance's constants estimated from its certificate."""
    consts = bundle.certificates.encoding_constants
    r = np.abs(bundle.true_reward.values).max()
    return BoundInputs(
        D=bundle.fp.D, D_prime=int(bcfg.get("D_prime", bundle.fp.n_prompts)),
        epsilon=float(bcfg["epsilon"]), omega=float(bcfg["omega"]),
        L_phi=max(consts["L_phi"], 1e-12), theta_opnorm=max(theta_operator_norm(bundle.fp.theta), 1e-12),
        L_pibar=max(_adapter_lipschitz(bundle.planted_adapter), 1e-12),
        # per-sample loss is at most log(1 + exp(2 max|r|))
        C=float(np.logaddexp(0.0, 2.0 * r)), E_prime=float(bcfg["E_prime"]), E=float(bcfg.get("E", 1.0)))


def _errors(policy_table, bundle, G) -> tuple[float, float]:
    err = d_r(policy_table, bundle.true_policy, bundle.pi_ref, bundle.beta)
    gap = population_dpo_loss(policy_table, G, bundle.beta) - population_dpo_loss(bundle.true_policy, G, bundle.beta)
    return err, gap


def run_cell(cfg: ExperimentConfig, seed: int, replicate: int) -> CellResult:
    rows: list = []
    failures: list = []
    bundle = generate_instance(cfg.instance_config(), seed=seed)
    G = bundle.true_process()
    try:
        bounds = evaluate_all(estimated_bound_inputs(bundle, cfg.bounds))
    except ProxyAdaptError as exc:
        bounds = {"error": str(exc)}
    proxy = sample_preferences(bundle.proxy_process(), cfg.n_proxy, seed=(seed, replicate, 1), source="proxy")
    try:
        fp, _ = train_stage1(proxy, bundle.pi_ref, cfg.D, cfg.train_config("stage1", seed), N=cfg.N)
    except ProxyAdaptError as exc:
        fp = None
        failures.append({"arm": "with-proxy", "n_true": None, "error": repr(exc)})
    n_max = cfg.n_true_grid[-1]
    true = sample_preferences(G, n_max, seed=(seed, replicate, 2), source="true") if n_max > 0 else None
    init_logits = np.log(bundle.pi_ref)
    for n in cfg.n_true_grid:
        data = true.head(n) if n > 0 else None
        if fp is not None:
            try:
                if data is None:
                    table = fp.table()
                else:
                    ad, _ = train_stage2(data, fp, bundle.pi_ref, cfg.train_config("stage2", seed))
                    table = AdaptedPolicy(fp, ad).table()
                rows.append((seed, replicate, "with-proxy", n, *_errors(table, bundle, G)))
            except ProxyAdaptError as exc:
                failures.append({"arm": "with-proxy", "n_true": n, "error": repr(exc)})
        try:
            if data is None:
                table = TabularPolicy.from_logits(init_logits).table
            else:
                table = train_tabular(data, bundle.pi_ref, cfg.train_config("scratch", seed), init_logits)[0].table
            rows.append((seed, replicate, "scratch", n, *_errors(table, bundle, G)))
        except ProxyAdaptError as exc:
            failures.append({"arm": "scratch", "n_true": n, "error": repr(exc)})
    return CellResult(seed, replicate, rows, failures, bundle.certificates.to_json(), bounds)


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(cfg: ExperimentConfig, threads: int = 1) -> list[CellResult]:
    """Run every cell; results come back in ``(seed, replicate)`` order regardless of ``threads``."""
    jobs = [(cfg, s, r) for s in cfg.seeds for r in range(cfg.replicates)]
    if threads <= 1 or len(jobs) == 1:
        return [run_cell(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_run_cell_args, jobs))


def aggregate(results: list[CellResult]) -> list[CurvePoint]:
    by_key: dict = {}
    for res in results:
        for _, _, arm, n, err, gap in res.rows:
            by_key.setdefault((arm, n), []).append((err, gap))
    out = []
    for arm in ARMS:
        for n in sorted(k[1] for k in by_key if k[0] == arm):
            vals = np.array(by_key[(arm, n)])
            std = float(np.std(vals[:, 0], ddof=1)) if len(vals) >= 2 else None
            out.append(CurvePoint(n, arm, float(vals[:, 0].mean()), std, float(vals[:, 1].mean()), len(vals)))
    return out


def first_below(rows, arm: str, threshold: float) -> int | None:
    """Smallest ``n_true`` at which ``arm`` has error below ``threshold``."""
    hits = [n for _, _, a, n, err, _ in rows if a == arm and err < threshold]
    return min(hits) if hits else None


def crossover_summary(results: list[CellResult], threshold: float) -> list[dict]:
    out = []
    for res in results:
        a = first_below(res.rows, "with-proxy", threshold)
        b = first_below(res.rows, "scratch", threshold)
        proxy_first = a is not None and (b is None or a < b)
        out.append({"seed": res.seed, "replicate": res.replicate, "with_proxy_first_n": a,
                    "scratch_first_n": b, "with_proxy_strictly_earlier": proxy_first})
    return out


def trend(points: list[CurvePoint], arm: str) -> dict:
    """Spearman correlation of mean error against ``n_true``; nonincreasing means ``rho <= 0``."""
    pts = [p for p in points if p.arm == arm]
    if len(pts) < 3:
        return {"rho": None, "pvalue": None, "nonincreasing": True}
    res = spearmanr([p.n_true for p in pts], [p.mean_dr_error for p in pts])
    rho, pv = float(res.statistic), float(res.pvalue)
    return {"rho": rho, "pvalue": pv, "nonincreasing": bool(rho <= 0.0)}


def curves_csv(results: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for res in results:
        for seed, rep, arm, n, err, gap in res.rows:
            w.writerow([seed, rep, arm, n, repr(float(err)), repr(float(gap))])
    return buf.getvalue()


def _svg(points: list[CurvePoint], threshold: float) -> str:
    W, H, pad = 640, 420, 60
    xs = [math.log10(1 + p.n_true) for p in points]
    ys = [math.log10(max(p.mean_dr_error, 1e-12)) for p in points]
    if not xs:
        xs, ys = [0.0], [0.0]
    x0, x1 = min(xs), max(xs) + 1e-9
    lo = [math.log10(max(p.mean_dr_error - (p.std_dr_error or 0.0) / math.sqrt(p.count), 1e-12)) for p in points]
    hi = [math.log10(max(p.mean_dr_error + (p.std_dr_error or 0.0) / math.sqrt(p.count), 1e-12)) for p in points]
    y0 = min(lo + ys + [math.log10(threshold)])
    y1 = max(hi + ys + [math.log10(threshold)]) + 1e-9

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (W - 2 * pad)

    def sy(y):
        return H - pad - (y - y0) / (y1 - y0) * (H - 2 * pad)

    colors = {"with-proxy": "#1f77b4", "scratch": "#d62728"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 15}" text-anchor="middle">log10(1 + n_true)</text>',
             f'<text x="15" y="{H / 2}" transform="rotate(-90 15 {H / 2})" text-anchor="middle">log10 d_r error</text>']
    for k in range(math.floor(x0), math.ceil(x1) + 1):
        if x0 <= k <= x1:
            parts.append(f'<text x="{sx(k):.1f}" y="{H - pad + 16}" text-anchor="middle">{k}</text>')
    for k in range(math.floor(y0), math.ceil(y1) + 1):
        if y0 <= k <= y1:
            parts.append(f'<text x="{pad - 8}" y="{sy(k) + 4:.1f}" text-anchor="end">{k}</text>')
    ty = sy(math.log10(threshold))
    parts.append(f'<line x1="{pad}" y1="{ty:.1f}" x2="{W - pad}" y2="{ty:.1f}" stroke="gray" stroke-dasharray="4 4"/>')
    for i, arm in enumerate(ARMS):
        idx = [j for j, p in enumerate(points) if p.arm == arm]
        if not idx:
            continue
        band = [(sx(xs[j]), sy(hi[j])) for j in idx] + [(sx(xs[j]), sy(lo[j])) for j in reversed(idx)]
        parts.append('<polygon fill="{}" fill-opacity="0.2" stroke="none" points="{}"/>'.format(
            colors[arm], " ".join(f"{a:.1f},{b:.1f}" for a, b in band)))
        parts.append('<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>'.format(
            colors[arm], " ".join(f"{sx(xs[j]):.1f},{sy(ys[j]):.1f}" for j in idx)))
        parts.append(f'<text x="{W - pad - 100}" y="{pad + 16 * i}" fill="{colors[arm]}">{arm}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(results: list[CellResult], cfg: ExperimentConfig, out_dir) -> dict:
    """Write curves.csv, report.json and curves.svg; returns the report record."""
    if not results or not any(r.rows for r in results):
        raise InvalidInputError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = aggregate(results)
    report = {
        "config": cfg.to_dict(),
        "curves": [asdict(p) for p in points],
        "crossover": crossover_summary(results, cfg.threshold),
        "trend": {arm: trend(points, arm) for arm in ARMS},
        "cells": [{"seed": r.seed, "replicate": r.replicate, "certificates": r.certificates,
                   "bounds": r.bounds, "failures": r.failures} for r in results],
        "failed_cells": sum(len(r.failures) for r in results),
        "notes": ["scratch arm trains an unconstrained tabular policy; the Lipschitz hypothesis class of the "
                  "without-proxy bound is not enforced",
                  "bounds are evaluated with the Omega-constant taken as 1"],
    }
    (out / "curves.csv").write_text(curves_csv(results))
    (out / "report.json").write_text(json.dumps(report, indent=1, default=float))
    (out / "curves.svg").write_text(_svg(points, cfg.threshold))
    return report
