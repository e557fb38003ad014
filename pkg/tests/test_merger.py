import numpy as np
import pytest

from rebasin.encoder import EncoderConfig, forward, init_toy
from rebasin.merger import (
    MergeError,
    apply_plan,
    interpolate,
    merge,
    merge_metadata,
    random_symmetry,
)
from rebasin.plans import MergeConfigKind, identity_plan, invert_plan

from tests.conftest import tiny_config


def max_forward_diff(w1, w2, battery):
    return float(np.max(np.abs(forward(w1, battery) - forward(w2, battery))))


def test_identity_plan_is_noop(weights_a, toy_cfg):
    out = apply_plan(weights_a, identity_plan(toy_cfg))
    for name in weights_a.tensors:
        np.testing.assert_array_equal(out[name], weights_a[name])


def test_symmetry_preserves_function(weights_a, toy_cfg, battery):
    for seed in range(5):
        permuted = apply_plan(weights_a, random_symmetry(toy_cfg, seed))
        assert max_forward_diff(weights_a, permuted, battery) <= 1e-4


def test_symmetry_preserves_function_grouped_norm(battery):
    # groups span several channels here, exercising the block-respecting path
    cfg = tiny_config()
    weights = init_toy(cfg, 0)
    for seed in range(5):
        permuted = apply_plan(weights, random_symmetry(cfg, seed))
        assert max_forward_diff(weights, permuted, battery[:, :4000]) <= 1e-4


def test_symmetry_actually_changes_tensors(weights_a, toy_cfg):
    permuted = apply_plan(weights_a, random_symmetry(toy_cfg, 11))
    assert any(not np.array_equal(permuted[k], weights_a[k]) for k in weights_a.tensors)


def test_qkv_override_breaks_function(weights_a, toy_cfg, battery):
    # the deliberately non-symmetric slot must NOT be function-preserving
    plan = identity_plan(toy_cfg, MergeConfigKind.CNN_ALL)
    rng = np.random.default_rng(0)
    plan.qkv_perms[0]["q"] = rng.permutation(toy_cfg.model_dim)
    permuted = apply_plan(weights_a, plan)
    assert max_forward_diff(weights_a, permuted, battery) > 1e-2


def test_plan_config_mismatch_rejected(weights_a):
    other = EncoderConfig(((16, 8, 8),), 16, 32, 64, 2, 1)
    with pytest.raises(MergeError):
        apply_plan(weights_a, identity_plan(other))


def test_interpolation_endpoints(weights_a, toy_cfg):
    other = init_toy(toy_cfg, 2)
    at_one = interpolate(weights_a, other, 1.0)
    at_zero = interpolate(weights_a, other, 0.0)
    for name in weights_a.tensors:
        np.testing.assert_array_equal(at_one[name], weights_a[name])
        np.testing.assert_array_equal(at_zero[name], other[name])


def test_interpolation_linearity(weights_a, toy_cfg):
    other = init_toy(toy_cfg, 2)
    for lam in (0.1, 0.5, 0.9):
        merged = interpolate(weights_a, other, lam)
        for name in ("conv.1.weight", "layer.0.ffn.w1.weight"):
            expected = (
                lam * weights_a[name].astype(np.float64)
                + (1 - lam) * other[name].astype(np.float64)
            ).astype(np.float32)
            np.testing.assert_array_equal(merged[name], expected)


def test_interpolation_lambda_symmetry(weights_a, toy_cfg):
    # f64 accumulation then one rounding makes (A,B,l) and (B,A,1-l) agree
    # whenever l and 1-l are both exactly representable
    other = init_toy(toy_cfg, 2)
    ab = interpolate(weights_a, other, 0.25)
    ba = interpolate(other, weights_a, 0.75)
    for name in weights_a.tensors:
        np.testing.assert_array_equal(ab[name], ba[name])


def test_interpolation_validation(weights_a, toy_cfg):
    other = init_toy(toy_cfg, 2)
    with pytest.raises(MergeError):
        interpolate(weights_a, other, 1.5)
    broken = other.copy()
    del broken.tensors["proj.bias"]
    with pytest.raises(MergeError):
        interpolate(weights_a, broken, 0.5)


def test_self_merge_is_identity(weights_a, toy_cfg, battery):
    merged = merge(weights_a, weights_a, identity_plan(toy_cfg), 0.37)
    for name in weights_a.tensors:
        np.testing.assert_array_equal(merged[name], weights_a[name])


def test_merge_without_plan_is_plain_average(weights_a, toy_cfg):
    other = init_toy(toy_cfg, 2)
    merged = merge(weights_a, other, None, 0.5)
    for name in ("proj.weight", "layer.1.attn.q.weight"):
        expected = (
            0.5 * weights_a[name].astype(np.float64) + 0.5 * other[name].astype(np.float64)
        ).astype(np.float32)
        np.testing.assert_array_equal(merged[name], expected)


def test_planted_merge_recovers_a(weights_a, toy_cfg, battery):
    # B is a pure reparameterization of A; merging with the aligning plan
    # must reproduce A exactly at any lambda
    sym = random_symmetry(toy_cfg, 21)
    weights_b = apply_plan(weights_a, sym)
    aligning = invert_plan(sym)
    for lam in (0.0, 0.5, 0.9):
        merged = merge(weights_a, weights_b, aligning, lam)
        for name in weights_a.tensors:
            np.testing.assert_array_equal(merged[name], weights_a[name])


def test_merge_metadata_records_parents(weights_a, toy_cfg):
    other = init_toy(toy_cfg, 2)
    plan = identity_plan(toy_cfg)
    meta = merge_metadata(weights_a, other, plan, 0.9)
    assert set(meta) == {"lambda", "parent_a_digest", "parent_b_digest", "plan_digest"}
    assert float(meta["lambda"]) == 0.9
    assert meta["parent_a_digest"] != meta["parent_b_digest"]


def test_random_symmetry_deterministic(toy_cfg):
    p1 = random_symmetry(toy_cfg, 5)
    p2 = random_symmetry(toy_cfg, 5)
    for a, b in zip(p1.conv_perms, p2.conv_perms):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(p1.ffn_perms, p2.ffn_perms):
        np.testing.assert_array_equal(a, b)
    assert not np.array_equal(random_symmetry(toy_cfg, 6).ffn_perms[0], p1.ffn_perms[0])


def test_random_symmetry_never_populates_qkv(toy_cfg):
    for seed in range(10):
        plan = random_symmetry(toy_cfg, seed)
        assert all(not entry for entry in plan.qkv_perms)


def test_random_symmetry_fixed_point_rate(toy_cfg):
    # a uniform permutation of n elements has 1 fixed point in expectation;
    # over 1000 seeds the mean count sits inside a 3-sigma band around 1
    counts = []
    for seed in range(1000):
        plan = random_symmetry(toy_cfg, seed)
        perm = plan.ffn_perms[0]
        counts.append(int(np.sum(perm == np.arange(len(perm)))))
    mean = np.mean(counts)
    sigma_mean = np.std(counts, ddof=1) / np.sqrt(len(counts))
    assert abs(mean - 1.0) <= 3.0 * max(sigma_mean, 1e-6)


def test_degradation_ordering_smoke(weights_a, toy_cfg, battery):
    # noisy planted case: aligning before merging must beat naive averaging
    from rebasin.evaluate import functional_distance

    rng = np.random.default_rng(40)
    sym = random_symmetry(toy_cfg, 40)
    noisy = apply_plan(weights_a, sym)
    for name, arr in noisy.tensors.items():
        rms = float(np.sqrt(np.mean(arr.astype(np.float64) ** 2)))
        noisy[name] = arr + (0.01 * rms * rng.standard_normal(arr.shape)).astype(np.float32)
    with_plan = merge(weights_a, noisy, invert_plan(sym), 0.5)
    without_plan = merge(weights_a, noisy, None, 0.5)
    mse_with, _ = functional_distance(with_plan, weights_a, battery)
    mse_without, _ = functional_distance(without_plan, weights_a, battery)
    assert mse_with < mse_without
