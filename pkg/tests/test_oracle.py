import json

import numpy as np
import pytest

from proxyadapt.errors import ConditionViolation
from proxyadapt.geometry import kernel_basis
from proxyadapt.instances import break_condition
from proxyadapt.oracle import (PsiMap, adapter_at, adapter_for_target, build_level_sets, build_psi, group_rows,
                               oracle_adapter, verify_reconstruction, write_adapter_json)


def test_group_rows():
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1e-12], [0.0, 1.0]])
    reps, members = group_rows(rows)
    assert members == [[0, 2], [1, 3]]
    assert np.array_equal(reps, rows[[0, 1]])


def test_level_sets_of_bundle(bundle):
    ls = build_level_sets(bundle.fp)
    assert len(ls) == bundle.config.level_sets
    assert sorted(map(sorted, ls.members)) == sorted(map(sorted, bundle.partition))
    cls = ls.class_of()
    for k, m in enumerate(ls.members):
        assert np.all(cls[m] == k)


def test_oracle_reconstructs_true_policy(bundle):
    ad = oracle_adapter(bundle.true_policy, bundle.fp)
    assert verify_reconstruction(bundle.true_policy, bundle.fp, ad, bundle.beta) < 1e-8
    assert np.all(ad.values >= 0.0) and np.allclose(ad.values.sum(axis=1), 1.0)


def test_oracle_is_identity_without_shift(bundle):
    # proxy = true: each slice contains its representative, but the centroid
    # need not equal it; reconstruction must still be exact
    ad = oracle_adapter(bundle.proxy_policy, bundle.fp)
    assert verify_reconstruction(bundle.proxy_policy, bundle.fp, ad, bundle.beta) < 1e-8


def test_adapter_at_uses_psi(bundle):
    ls = build_level_sets(bundle.fp)
    psi = build_psi(bundle.true_policy, bundle.fp, ls)
    p = ls.representatives[0]
    out = adapter_at(p, psi, bundle.fp.theta)
    assert np.allclose(bundle.fp.theta @ out, psi(p), atol=1e-8)
    with pytest.raises(KeyError):
        psi(np.full(p.shape, 1.0 / p.size) + 1e-3)


def _split_level_set(bundle):
    ls = build_level_sets(bundle.fp)
    big = next(m for m in ls.members if len(m) > 1)
    other = next(m for m in ls.members if m is not big)
    true = bundle.true_policy.copy()
    true[big[1]] = true[other[0]]
    return true


def test_psi_reports_condition_1(bundle):
    with pytest.raises(ConditionViolation) as exc:
        build_psi(_split_level_set(bundle), bundle.fp, build_level_sets(bundle.fp))
    assert exc.value.condition == 1


def test_psi_reports_condition_2(bundle):
    broken = break_condition(bundle, 2, seed=0)
    with pytest.raises(ConditionViolation) as exc:
        build_psi(broken.true_policy, bundle.fp, build_level_sets(bundle.fp))
    assert exc.value.condition == 2


def test_centroid_adapter_is_continuous_on_a_grid():
    # D = 2 with a one-dimensional kernel: slices are segments whose
    # endpoints move continuously with the target
    theta = np.array([[1.0, -0.5, 0.2]])
    assert kernel_basis(np.vstack([theta, np.ones((1, 3))])).shape[1] == 1
    h = 1.0 / 60
    pts, outs = [], {}
    for i in range(61):
        for j in range(61 - i):
            p = np.array([i * h, j * h, 1.0 - (i + j) * h])
            p = np.clip(p, 0.0, None) / np.clip(p, 0.0, None).sum()
            outs[(i, j)] = adapter_for_target(theta @ p, theta)
            pts.append((i, j))
    worst = 0.0
    for (i, j) in pts:
        for di, dj in ((1, 0), (0, 1)):
            if (i + di, j + dj) in outs:
                worst = max(worst, np.linalg.norm(outs[(i + di, j + dj)] - outs[(i, j)]) / h)
    assert worst < 5.0


def test_write_adapter_json(bundle, tmp_path):
    ad = oracle_adapter(bundle.true_policy, bundle.fp)
    path = tmp_path / "a.json"
    write_adapter_json(ad, path)
    obj = json.loads(path.read_text())
    assert obj["mode"] == "table" and len(obj["entries"]) == bundle.config.level_sets


def test_psi_map_lookup():
    psi = PsiMap(np.eye(2), np.array([[3.0], [4.0]]))
    assert psi(np.array([0.0, 1.0]))[0] == 4.0
