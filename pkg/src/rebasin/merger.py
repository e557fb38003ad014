"""Apply permutation plans as weight symmetries and interpolate encoders.

Every symmetry slot moves a set of channels together with everything tied
to them: conv output channels carry their bias and (on layer 0) norm
affine parameters and the next layer's input columns; attention moves Q/K/V
row blocks, bias segments and the matching W^O columns; FFN moves W1 rows,
b1 and W2 columns. Applied this way a plan changes the parameterization,
not the function, which is what makes the subsequent linear interpolation
meaningful.

The qkv slot is the deliberate exception: it reorders Q/K/V rows with no
compensating reorder, reproducing the known-degraded "permute everything"
ablation, and is applied after the symmetry slots.
"""

from __future__ import annotations

import numpy as np

from .encoder import EncoderConfig, EncoderWeights
from .plans import MergeConfigKind, PermutationPlan, identity_plan, permute_axis
from .tensor_store import archive_digest


class MergeError(ValueError):
    pass


def apply_plan(weights: EncoderWeights, plan: PermutationPlan) -> EncoderWeights:
    """Return a copy of `weights` with the plan's reorderings applied."""
    if weights.config != plan.config:
        raise MergeError("plan and weights were built for different configs")
    plan.validate()
    weights.validate()
    out = weights.copy()
    cfg = weights.config
    n_conv = len(cfg.conv_layers)

    for l, perm in enumerate(plan.conv_perms):
        out[f"conv.{l}.weight"] = permute_axis(out[f"conv.{l}.weight"], perm, axis=0)
        out[f"conv.{l}.bias"] = permute_axis(out[f"conv.{l}.bias"], perm, axis=0)
        if l == 0:
            out["conv.0.gn.gamma"] = permute_axis(out["conv.0.gn.gamma"], perm, axis=0)
            out["conv.0.gn.beta"] = permute_axis(out["conv.0.gn.beta"], perm, axis=0)
        if l + 1 < n_conv:
            out[f"conv.{l + 1}.weight"] = permute_axis(out[f"conv.{l + 1}.weight"], perm, axis=1)
        else:
            out["proj.ln.gamma"] = permute_axis(out["proj.ln.gamma"], perm, axis=0)
            out["proj.ln.beta"] = permute_axis(out["proj.ln.beta"], perm, axis=0)
            out["proj.weight"] = permute_axis(out["proj.weight"], perm, axis=1)

    for i in range(cfg.num_transformer_layers):
        p = f"layer.{i}"
        flat = plan.attention_flat_perm(i)
        for m in ("q", "k", "v"):
            out[f"{p}.attn.{m}.weight"] = permute_axis(out[f"{p}.attn.{m}.weight"], flat, axis=0)
            out[f"{p}.attn.{m}.bias"] = permute_axis(out[f"{p}.attn.{m}.bias"], flat, axis=0)
        out[f"{p}.attn.out.weight"] = permute_axis(out[f"{p}.attn.out.weight"], flat, axis=1)

        ffn = plan.ffn_perms[i]
        out[f"{p}.ffn.w1.weight"] = permute_axis(out[f"{p}.ffn.w1.weight"], ffn, axis=0)
        out[f"{p}.ffn.w1.bias"] = permute_axis(out[f"{p}.ffn.w1.bias"], ffn, axis=0)
        out[f"{p}.ffn.w2.weight"] = permute_axis(out[f"{p}.ffn.w2.weight"], ffn, axis=1)

        # non-symmetric row overrides, applied on top of the symmetry slots
        for m, perm in sorted(plan.qkv_perms[i].items()):
            out[f"{p}.attn.{m}.weight"] = permute_axis(out[f"{p}.attn.{m}.weight"], perm, axis=0)
            out[f"{p}.attn.{m}.bias"] = permute_axis(out[f"{p}.attn.{m}.bias"], perm, axis=0)
    return out


def interpolate(
    weights_a: EncoderWeights, weights_b: EncoderWeights, lam: float, threads: int = 1
) -> EncoderWeights:
    """Element-wise lam*A + (1-lam)*B, computed in f64 and rounded to f32 once.

    Per-tensor work is independent; `threads` > 1 fans it out for
    checkpoint-scale models.
    """
    if not 0.0 <= lam <= 1.0:
        raise MergeError(f"lambda must be in [0, 1], got {lam}")
    if weights_a.config != weights_b.config:
        raise MergeError("cannot interpolate encoders with different configs")
    if set(weights_a.tensors) != set(weights_b.tensors):
        raise MergeError("tensor name sets differ")

    def blend(name: str) -> tuple[str, np.ndarray]:
        a = weights_a.tensors[name]
        b = weights_b.tensors[name]
        if a.shape != b.shape:
            raise MergeError(f"tensor {name}: shape {a.shape} vs {b.shape}")
        out = (lam * a.astype(np.float64) + (1.0 - lam) * b.astype(np.float64))
        return name, out.astype(np.float32)

    merged = EncoderWeights(weights_a.config)
    names = list(weights_a.tensors)
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            merged.tensors.update(pool.map(blend, names))
    else:
        merged.tensors.update(blend(name) for name in names)
    return merged


def merge(
    weights_a: EncoderWeights,
    weights_b: EncoderWeights,
    plan: PermutationPlan | None,
    lam: float,
    threads: int = 1,
) -> EncoderWeights:
    """Align B with `plan` (identity when None) and interpolate with A."""
    if plan is None:
        plan = identity_plan(weights_a.config)
    aligned = apply_plan(weights_b, plan)
    return interpolate(weights_a, aligned, lam, threads)


def merge_metadata(
    weights_a: EncoderWeights,
    weights_b: EncoderWeights,
    plan: PermutationPlan | None,
    lam: float,
) -> dict[str, str]:
    from .plans import plan_to_archive

    meta = {
        "lambda": repr(float(lam)),
        "parent_a_digest": archive_digest(weights_a.to_archive()),
        "parent_b_digest": archive_digest(weights_b.to_archive()),
    }
    if plan is not None:
        meta["plan_digest"] = archive_digest(plan_to_archive(plan))
    return meta


def random_symmetry(config: EncoderConfig, seed: int) -> PermutationPlan:
    """Uniform random function-preserving plan (never touches the qkv slot).

    Conv layer 0 draws from the group-norm symmetry subgroup: whole norm
    groups are shuffled and channels shuffled within each destination group.
    With one channel per group (the pretrained-checkpoint shape) that is
    every permutation.
    """
    rng = np.random.default_rng(seed)
    c0 = config.conv_layers[0][0]
    groups = config.groupnorm_groups
    size = c0 // groups
    group_perm = rng.permutation(groups)
    conv0 = np.empty(c0, dtype=np.int64)
    within_group = [rng.permutation(size) for _ in range(groups)]
    for g in range(groups):
        dest = group_perm[g]
        conv0[g * size : (g + 1) * size] = dest * size + within_group[dest]

    plan = PermutationPlan(
        config=config,
        kind=MergeConfigKind.CNN_FFN_ATTN,
        conv_perms=[conv0]
        + [rng.permutation(c) for c in config.conv_channels[1:]],
        head_perms=[rng.permutation(config.heads) for _ in range(config.num_transformer_layers)],
        within_head_perms=[
            [rng.permutation(config.head_dim) for _ in range(config.heads)]
            for _ in range(config.num_transformer_layers)
        ],
        ffn_perms=[rng.permutation(config.ffn_dim) for _ in range(config.num_transformer_layers)],
        qkv_perms=[{} for _ in range(config.num_transformer_layers)],
        provenance={"kind": "random_symmetry", "seed": str(seed)},
    )
    plan.validate()
    return plan
