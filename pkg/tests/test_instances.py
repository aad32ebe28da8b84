import numpy as np
import pytest

from proxyadapt.errors import InvalidInputError
from proxyadapt.instances import generate_instance, load_bundle, save_bundle
from proxyadapt.policy import d_r, optimal_policy


def test_default_bundle(bundle):
    cfg = bundle.config
    assert (cfg.n_prompts, cfg.n_responses, cfg.N, cfg.D, cfg.level_sets) == (24, 12, 5, 2, 6)
    assert bundle.certificates.overall
    assert d_r(bundle.true_policy, bundle.proxy_policy, bundle.pi_ref, bundle.beta) > 0


def test_policies_match_factorisation(bundle):
    assert np.array_equal(bundle.proxy_policy, bundle.fp.table())
    assert np.array_equal(bundle.true_policy, bundle.fp.table(bundle.planted_adapter))


def test_rewards_and_policies_consistent(bundle):
    assert np.max(np.abs(optimal_policy(bundle.true_reward, bundle.pi_ref).table - bundle.true_policy)) < 1e-12
    assert np.max(np.abs(optimal_policy(bundle.proxy_reward, bundle.pi_ref).table - bundle.proxy_policy)) < 1e-12


def test_identity_instance_has_no_shift():
    b = generate_instance(seed=4, adapter="identity", level_sets=24)
    assert np.array_equal(b.true_policy, b.proxy_policy)
    assert b.certificates.overall


def test_same_seed_same_bundle(tmp_path):
    a = save_bundle(generate_instance(seed=11), tmp_path / "a")
    b = save_bundle(generate_instance(seed=11), tmp_path / "b")
    for name in ("checkpoint.json", "rewards.csv", "certificates.json", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_bundle_round_trip(bundle, tmp_path):
    save_bundle(bundle, tmp_path)
    back = load_bundle(tmp_path)
    assert np.max(np.abs(back.true_policy - bundle.true_policy)) < 1e-12
    assert back.certificates.overall


def test_invalid_sizes():
    with pytest.raises(InvalidInputError):
        generate_instance(seed=0, level_sets=30)
    with pytest.raises(InvalidInputError):
        generate_instance(seed=0, N=12)
