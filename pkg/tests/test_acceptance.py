"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line."""
import math
import os
import subprocess
import sys
import time

import numpy as np
from scipy.special import log_softmax

from conftest import record
from oracles import (brute_force_vertices, central_difference, log_composite, log_concentration,
                     log_cov_simplex, log_n_with_proxy, log_n_without_proxy, rejection_centroid)
from proxyadapt.bounds import (BoundInputs, composite_covering_bound, concentration_bound,
                               covering_number_simplex, sample_complexity_with_proxy,
                               sample_complexity_without_proxy)
from proxyadapt.dpo import dpo_objective, factorized_loss_and_grads, gradient
from proxyadapt.experiment import ExperimentConfig, crossover_summary, run_experiment, aggregate, trend
from proxyadapt.factorized import AdapterMap, DecoderParams, FactorizedPolicy
from proxyadapt.geometry import enumerate_slice_vertices, polytope_centroid
from proxyadapt.instances import break_condition, generate_instance
from proxyadapt.oracle import oracle_adapter, verify_reconstruction
from proxyadapt.policy import RewardTable, d_py, d_r, optimal_policy
from proxyadapt.preferences import DataProcess, population_pair_weights, sample_preferences


def test_criterion_1_reconstruction():
    t0 = time.perf_counter()
    worst = 0.0
    try:
        for seed in range(50):
            b = generate_instance(seed=seed)
            ad = oracle_adapter(b.true_policy, b.fp)
            worst = max(worst, verify_reconstruction(b.true_policy, b.fp, ad, b.beta))
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-8 and elapsed < 60.0
    finally:
        record(1, locals().get("ok", False), f"max d_PY {worst:.2e} over 50 instances, "
                                              f"{time.perf_counter() - t0:.1f}s")
    assert ok


def _bounded_slice(rng):
    while True:
        D = int(rng.integers(2, 6))
        N = int(rng.integers(1, D))
        theta = rng.standard_normal((N, D + 1))
        c = rng.dirichlet(np.ones(D + 1))
        sl = enumerate_slice_vertices(c, theta)
        if sl.intrinsic_dim >= 2:
            return theta, c, sl


def test_criterion_2_geometry():
    rng = np.random.default_rng(2024)
    mismatches = 0
    worst_centroid = 0.0
    try:
        for _ in range(200):
            D = int(rng.integers(1, 6))
            N = int(rng.integers(1, D + 2))
            theta = rng.standard_normal((N, D + 1))
            c = rng.dirichlet(np.ones(D + 1))
            got = enumerate_slice_vertices(c, theta).vertices
            want = brute_force_vertices(theta, theta @ c)
            if got.shape != want.shape or not np.allclose(got, want, atol=1e-9, rtol=0):
                mismatches += 1
        for k in range(20):
            theta, c, sl = _bounded_slice(rng)
            mc, _ = rejection_centroid(theta, theta @ c, sl.vertices, 2 ** 20, seed=k)
            worst_centroid = max(worst_centroid, float(np.max(np.abs(polytope_centroid(sl) - mc))))
        ok = mismatches == 0 and worst_centroid < 1e-3
    finally:
        record(2, locals().get("ok", False), f"{mismatches} vertex mismatches in 200 cases, "
                                              f"max centroid gap {worst_centroid:.1e} on 20 slices")
    assert ok


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _fd_case(i):
    rng = np.random.default_rng(5000 + i)
    nx, ny, N, D = int(rng.integers(2, 5)), int(rng.integers(3, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    fp = FactorizedPolicy(rng.dirichlet(np.ones(D + 1), size=nx), rng.standard_normal((N, D + 1)),
                          DecoderParams(rng.standard_normal((ny, N)), rng.standard_normal(ny)))
    ref = rng.dirichlet(np.ones(ny), size=nx)
    G = DataProcess(RewardTable(rng.standard_normal((nx, ny)), 1.0), ref, rng.dirichlet(np.ones(nx)))
    W = population_pair_weights(G) if i % 2 else sample_preferences(G, 500, seed=i).pair_weights()
    beta = float(rng.uniform(0.2, 3.0))
    lr = np.log(ref)
    kind = ("logits", "tau", "theta", "weight", "bias", "table", "affine")[i % 7]

    def loss(q, ad=None):
        return factorized_loss_and_grads(q, lr, W, beta, (), ad)[0]

    if kind == "logits":
        Z = rng.standard_normal((nx, ny))
        g = dpo_objective(log_softmax(Z, axis=1), lr, W, beta)[1]
        return _rel(g, central_difference(lambda z: dpo_objective(log_softmax(z, axis=1), lr, W, beta)[0], Z))
    if kind in ("tau", "theta"):
        g = factorized_loss_and_grads(fp, lr, W, beta, (kind,))[1][kind]

        def f(v):
            q = fp.copy()
            setattr(q, kind, v)
            return loss(q)

        return _rel(g, central_difference(f, getattr(fp, kind)))
    if kind in ("weight", "bias"):
        gw, gb = factorized_loss_and_grads(fp, lr, W, beta, ("decoder",))[1]["decoder"]

        def f(v):
            q = fp.copy()
            setattr(q.decoder, kind, v)
            return loss(q)

        return _rel(gw if kind == "weight" else gb, central_difference(f, getattr(fp.decoder, kind)))
    if kind == "table":
        keys = np.unique(fp.tau, axis=0)
        ad = AdapterMap("table", keys, rng.dirichlet(np.ones(D + 1), size=len(keys)))
        g = factorized_loss_and_grads(fp, lr, W, beta, ("adapter",), ad)[1]["adapter"]
        return _rel(g, central_difference(lambda v: loss(fp, AdapterMap("table", keys, v)), ad.values))
    A = 0.1 * rng.standard_normal((D + 1, D + 1))
    a = np.full(D + 1, 1.0 / (D + 1))
    gA, ga = factorized_loss_and_grads(fp, lr, W, beta, ("adapter",), AdapterMap("affine", A=A, a=a))[1]["adapter"]
    eA = _rel(gA, central_difference(lambda v: loss(fp, AdapterMap("affine", A=v, a=a)), A))
    ea = _rel(ga, central_difference(lambda v: loss(fp, AdapterMap("affine", A=A, a=v)), a))
    return max(eA, ea)


def test_criterion_3_dpo_gradients():
    worst_fd = 0.0
    worst_opt = 0.0
    try:
        worst_fd = max(_fd_case(i) for i in range(100))
        for seed in range(10):
            b = generate_instance(seed=seed)
            for G, target in ((b.proxy_process(), b.proxy_policy), (b.true_process(), b.true_policy)):
                pi = optimal_policy(G.reward, G.pi_ref)
                worst_opt = max(worst_opt, float(np.linalg.norm(gradient(np.log(pi.table), G.pi_ref, G, b.beta,
                                                                         "logits"))))
            for comp in ("tau", "theta"):
                worst_opt = max(worst_opt, float(np.linalg.norm(gradient(b.fp, b.pi_ref, b.proxy_process(),
                                                                         b.beta, comp))))
        ok = worst_fd < 1e-5 and worst_opt < 1e-8
    finally:
        record(3, locals().get("ok", False), f"max relative FD error {worst_fd:.1e} over 100 configs, "
                                              f"max gradient norm at optimum {worst_opt:.1e}")
    assert ok


def test_criterion_4_bradley_terry():
    rng = np.random.default_rng(4)
    worst_z = 0.0
    try:
        nx, ny = 5, 6
        r = RewardTable(rng.uniform(-2, 2, size=(nx, ny)), 1.0)
        for cell in range(20):
            x = int(rng.integers(nx))
            y1, y2 = (int(v) for v in rng.choice(ny, size=2, replace=False))
            # restrict the process to the cell: p_X on x, pi_ref uniform on {y1, y2}
            ref = np.full((nx, ny), 1e-300)
            ref[:, [y1, y2]] = 0.5
            ref /= ref.sum(axis=1, keepdims=True)
            px = np.zeros(nx)
            px[x] = 1.0
            ds = sample_preferences(DataProcess(r, ref, px), 100000, seed=(4, cell))
            pair = (ds.winners != ds.losers)
            wins = np.sum(pair & (ds.winners == y1))
            m = int(pair.sum())
            p = 1.0 / (1.0 + math.exp(-(r.values[x, y1] - r.values[x, y2])))
            z = abs(wins / m - p) / math.sqrt(p * (1 - p) / m)
            worst_z = max(worst_z, z)
        ok = worst_z < 3.0
    finally:
        record(4, locals().get("ok", False), f"largest deviation {worst_z:.2f} binomial SE over 20 cells")
    assert ok


def test_criterion_5_metric_axioms():
    rng = np.random.default_rng(5)
    violations = 0
    try:
        ref = rng.dirichlet(np.ones(6), size=4)
        for _ in range(1000):
            beta = float(rng.uniform(0.05, 5.0))
            a, b, c = (rng.dirichlet(np.full(6, 0.5), size=4) for _ in range(3))
            dab, dba, dbc, dac = (d_r(a, b, ref, beta), d_r(b, a, ref, beta), d_r(b, c, ref, beta),
                                  d_r(a, c, ref, beta))
            violations += int(d_r(a, a, ref, beta) > 1e-12) + int(abs(dab - dba) > 1e-12)
            violations += int(dac > dab + dbc + 1e-12) + int(dab < 0)
            p, q, s = a[0], b[0], c[0]
            violations += int(d_py(p, p, beta) > 1e-12) + int(abs(d_py(p, q, beta) - d_py(q, p, beta)) > 1e-12)
            violations += int(d_py(p, s, beta) > d_py(p, q, beta) + d_py(q, s, beta) + 1e-12)
        ok = violations == 0
    finally:
        record(5, locals().get("ok", False), f"{violations} violations over 1000 cases per metric")
    assert ok


def test_criterion_6_sample_efficiency():
    t0 = time.perf_counter()
    summary = "not run"
    try:
        cfg = ExperimentConfig(seeds=list(range(10)), n_proxy=20000)
        results = run_experiment(cfg, threads=os.cpu_count() or 1)
        cross = crossover_summary(results, 0.1)
        wins = sum(c["with_proxy_strictly_earlier"] for c in cross)
        points = aggregate(results)
        trends = {arm: trend(points, arm) for arm in ("with-proxy", "scratch")}
        floor = min(p.mean_dr_error for p in points if p.arm == "with-proxy")
        first_b = [c["scratch_first_n"] for c in cross]
        summary = (f"with-proxy first below 0.1 in {wins}/10 seeds; with-proxy best mean d_r {floor:.3f}; "
                   f"scratch first n below 0.1 {first_b}; Spearman rho with-proxy "
                   f"{trends['with-proxy']['rho']:.2f} scratch {trends['scratch']['rho']:.2f}; "
                   f"{time.perf_counter() - t0:.0f}s")
        ok = (wins >= 8 and all(t["nonincreasing"] for t in trends.values())
              and time.perf_counter() - t0 < 1800)
    finally:
        record(6, locals().get("ok", False), summary)
    assert ok


def test_criterion_7_bounds():
    rng = np.random.default_rng(7)
    order_fail = 0
    worst = worst_abs = 0.0
    try:
        for _ in range(100):
            D = int(rng.integers(1, 5))
            E = 1.0 + 2.0 * float(rng.random())
            inp = BoundInputs(D=D, D_prime=int(rng.integers(2 * D, 3 * D + 4)), epsilon=float(rng.uniform(0.05, 1.0)),
                              omega=float(rng.uniform(0.01, 0.5)), L_phi=float(rng.uniform(0.5, 3.0)),
                              theta_opnorm=float(rng.uniform(0.5, 3.0)), L_pibar=float(rng.uniform(0.5, 3.0)),
                              C=float(rng.uniform(0.5, 3.0)), E=E, E_prime=E + 2.0 * float(rng.random()))
            w = sample_complexity_with_proxy(inp).log
            wo = sample_complexity_without_proxy(inp).log
            order_fail += int(not w < wo)
            kappa, delta = inp.epsilon / 48, float(rng.uniform(0.5, 2.0))
            alpha = float(rng.choice([0.1, 0.25, 0.5, 0.75]))
            n = int(rng.integers(10, 500))
            cov = covering_number_simplex(inp.D, kappa, inp.E, inp.L_phi).log
            pairs = [
                (w, log_n_with_proxy(inp.D, inp.epsilon, inp.omega, inp.L_phi, inp.theta_opnorm, inp.L_pibar, inp.E)),
                (wo, log_n_without_proxy(inp.D_prime, inp.epsilon, inp.omega, inp.L_phi, inp.theta_opnorm,
                                         inp.L_pibar, inp.E_prime)),
                (cov, log_cov_simplex(inp.D, kappa, inp.E, inp.L_phi)),
                (composite_covering_bound(inp.D, kappa, delta, inp.L_phi, inp.theta_opnorm, inp.L_pibar, inp.E)[0].log,
                 log_composite(inp.D, kappa, delta, inp.L_phi, inp.theta_opnorm, inp.E)),
                (concentration_bound(cov, n, inp.epsilon, inp.C, alpha),
                 log_concentration(cov, n, inp.epsilon, inp.C, alpha)),
            ]
            # composite logs reach ~1e6, where one float64 step is ~2e-10, so scale by magnitude
            worst = max(worst, max(abs(a - b) / max(1.0, abs(b)) for a, b in pairs))
            worst_abs = max(worst_abs, max(abs(a - b) for a, b in pairs))
        ok = order_fail == 0 and worst < 1e-12
    finally:
        record(7, locals().get("ok", False), f"{order_fail}/100 ordering failures, "
                                              f"max scaled log-space mismatch {worst:.1e}, absolute {worst_abs:.1e}")
    assert ok


def test_criterion_8_condition_checkers():
    failures = []
    try:
        for seed in range(10):
            b = generate_instance(seed=seed)
            if b.certificates.failed():
                failures.append(("clean", seed, b.certificates.failed()))
            for which in (1, 2, 4):
                got = break_condition(b, which, seed=seed).certificates.failed()
                if got != [which]:
                    failures.append((which, seed, got))
        ok = not failures
    finally:
        record(8, locals().get("ok", False), f"10 clean instances and 30 fixtures, {len(failures)} wrong")
    assert ok


def test_criterion_9_determinism(tmp_path):
    outs = []
    try:
        for k in range(2):
            out = tmp_path / f"run{k}"
            res = subprocess.run([sys.executable, "-m", "proxyadapt.cli", "run", "--out", str(out), "--seed", "7"],
                                 capture_output=True, text=True)
            assert res.returncode == 0, res.stderr
            outs.append((out / "curves.csv").read_bytes())
        ok = outs[0] == outs[1] and len(outs[0]) > 0
    finally:
        record(9, locals().get("ok", False), "two `lab run --seed 7` invocations, curves.csv "
                                              + ("identical" if len(outs) == 2 and outs[0] == outs[1] else "differ"))
    assert ok
