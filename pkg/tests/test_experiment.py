import json
from pathlib import Path

import numpy as np
import pytest

from proxyadapt.dpo import TrainConfig, train_stage1
from proxyadapt.errors import InvalidInputError
from proxyadapt.experiment import (ExperimentConfig, aggregate, crossover_summary, curves_csv, emit_report,
                                   first_below, run_cell, run_experiment, trend)
from proxyadapt.instances import generate_instance
from proxyadapt.policy import d_r
from proxyadapt.preferences import sample_preferences

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def tiny():
    return ExperimentConfig.from_json(DATA / "tiny_config.json")


@pytest.fixture(scope="module")
def tiny_results(tiny):
    return run_experiment(tiny)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        ExperimentConfig(n_true_grid=[])
    with pytest.raises(InvalidInputError):
        ExperimentConfig(n_true_grid=[10, 5])
    with pytest.raises(InvalidInputError):
        ExperimentConfig(replicates=0)
    with pytest.raises(InvalidInputError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_golden_curves(tiny_results):
    assert curves_csv(tiny_results) == (DATA / "golden_curves.csv").read_text()


def test_threads_do_not_change_results(tiny, tiny_results):
    assert curves_csv(run_experiment(tiny, threads=2)) == curves_csv(tiny_results)


def test_rows_reproducible_from_seed(tiny, tiny_results):
    again = run_cell(tiny, 1, 0)
    assert again.rows == tiny_results[1].rows


def test_zero_row_semantics(tiny, tiny_results):
    b = generate_instance(tiny.instance_config(), seed=0)
    proxy = sample_preferences(b.proxy_process(), tiny.n_proxy, seed=(0, 0, 1))
    fp, _ = train_stage1(proxy, b.pi_ref, tiny.D, tiny.train_config("stage1", 0), N=tiny.N)
    rows = {(r[2], r[3]): r[4] for r in tiny_results[0].rows}
    # errors are measured against the planted true policy, not the proxy
    assert rows[("with-proxy", 0)] == d_r(fp.table(), b.true_policy, b.pi_ref, b.beta)
    assert rows[("scratch", 0)] == d_r(b.pi_ref, b.true_policy, b.pi_ref, b.beta)


def test_identity_canary():
    # no shift: both arms chase the same target, so the with-proxy arm at n=0
    # is simply the Stage-1 error and more data helps the scratch arm
    cfg = ExperimentConfig(n_prompts=8, n_responses=6, N=3, D=2, level_sets=8, adapter="identity", seeds=[2],
                           n_true_grid=[0, 20000], n_proxy=20000, stage1={"max_steps": 2000},
                           stage2={"max_steps": 2000}, scratch={"max_steps": 2000})
    res = run_cell(cfg, 2, 0)
    rows = {(r[2], r[3]): r[4] for r in res.rows}
    b = generate_instance(cfg.instance_config(), seed=2)
    assert np.array_equal(b.true_policy, b.proxy_policy)
    assert rows[("scratch", 20000)] < rows[("scratch", 0)]
    assert rows[("with-proxy", 20000)] < 2 * rows[("with-proxy", 0)] + 0.1


def test_emit_report(tiny, tiny_results, tmp_path):
    rep = emit_report(tiny_results, tiny, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["curves.csv", "curves.svg", "report.json"]
    obj = json.loads((tmp_path / "report.json").read_text())
    assert obj["config"]["n_proxy"] == tiny.n_proxy
    for cell in obj["cells"]:
        assert cell["certificates"]["overall"] is True
        assert "sample_complexity_with_proxy" in cell["bounds"]
    assert (tmp_path / "curves.svg").read_text().startswith("<svg")
    assert rep["failed_cells"] == 0


def test_emit_report_needs_results(tiny, tmp_path):
    with pytest.raises(InvalidInputError):
        emit_report([], tiny, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_aggregate_statistics(tiny_results):
    pts = aggregate(tiny_results)
    assert len(pts) == 6
    p = next(p for p in pts if p.arm == "scratch" and p.n_true == 2000)
    vals = [r[4] for res in tiny_results for r in res.rows if r[2] == "scratch" and r[3] == 2000]
    assert p.mean_dr_error == pytest.approx(np.mean(vals))
    assert p.std_dr_error == pytest.approx(np.std(vals, ddof=1))


def test_single_replicate_has_no_std(tiny_results):
    pts = aggregate(tiny_results[:1])
    assert all(p.std_dr_error is None for p in pts)


def test_crossover_and_trend_helpers():
    rows = [(0, 0, "with-proxy", 10, 0.5, 0.0), (0, 0, "with-proxy", 100, 0.05, 0.0),
            (0, 0, "scratch", 10, 0.9, 0.0), (0, 0, "scratch", 100, 0.2, 0.0)]
    assert first_below(rows, "with-proxy", 0.1) == 100
    assert first_below(rows, "scratch", 0.1) is None

    class R:
        seed, replicate = 0, 0

    R.rows = rows
    assert crossover_summary([R], 0.1)[0]["with_proxy_strictly_earlier"] is True
    from proxyadapt.experiment import CurvePoint
    pts = [CurvePoint(n, "scratch", 1.0 / (n + 1), None, 0.0, 1) for n in (0, 10, 100)]
    assert trend(pts, "scratch")["nonincreasing"]
