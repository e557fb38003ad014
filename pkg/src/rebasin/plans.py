"""Permutation plans: per-tap channel reorderings for one merge configuration.

Index semantics are scatter-style everywhere: a permutation p moves the
source's channel j to slot p[j] (out[p[j]] = in[j]). Attention uses a
two-level structure, a head-order permutation plus one within-head
permutation per destination head; the same within-head reordering is shared
by Q, K, V rows and the matching W^O columns, which is what keeps dot
products and head recombination intact.

The residual-stream dimension D itself is never permuted; no symmetry of
the network reorders it without touching every layer norm, so plans only
carry conv-channel, head, within-head, FFN-hidden and (for the one
deliberately non-symmetric configuration) Q/K/V row entries.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .encoder import CONFIG_METADATA_KEY, EncoderConfig
from .tensor_store import TensorArchive


class PlanError(ValueError):
    pass


class MergeConfigKind(enum.Enum):
    CNN = "cnn"
    CNN_FF_ONLY = "cnn_ff_only"
    CNN_FFN_ATTN = "cnn_ffn_attn"
    CNN_ALL = "cnn_all"
    FFN_ATTN = "ffn_attn"

    @property
    def wants_cnn(self) -> bool:
        return self is not MergeConfigKind.FFN_ATTN

    @property
    def wants_ffn(self) -> bool:
        return self is not MergeConfigKind.CNN

    @property
    def wants_attention(self) -> bool:
        return self in (MergeConfigKind.CNN_FFN_ATTN, MergeConfigKind.CNN_ALL, MergeConfigKind.FFN_ATTN)

    @property
    def wants_qkv(self) -> bool:
        return self is MergeConfigKind.CNN_ALL


QKV_MATRICES = ("q", "k", "v")


def _as_perm(value, size: int, what: str) -> np.ndarray:
    arr = np.asarray(value)
    if arr.shape != (size,):
        raise PlanError(f"{what}: expected a permutation of length {size}, got shape {arr.shape}")
    perm = arr.astype(np.int64)
    if not np.array_equal(np.sort(perm), np.arange(size)):
        raise PlanError(f"{what}: not a bijection of 0..{size - 1}")
    if arr.dtype.kind == "f" and not np.array_equal(arr, perm):
        raise PlanError(f"{what}: non-integral permutation values")
    return perm


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    return np.argsort(perm, kind="stable")


def permute_axis(arr: np.ndarray, perm: np.ndarray, axis: int) -> np.ndarray:
    """Scatter along `axis`: result slice perm[j] is arr slice j."""
    return np.take(arr, invert_permutation(perm), axis=axis)


@dataclass
class PermutationPlan:
    config: EncoderConfig
    kind: MergeConfigKind
    conv_perms: list[np.ndarray]
    head_perms: list[np.ndarray]
    within_head_perms: list[list[np.ndarray]]  # [layer][destination head]
    ffn_perms: list[np.ndarray]
    qkv_perms: list[dict[str, np.ndarray]]     # [layer], keys among q/k/v; empty unless cnn_all
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        cfg = self.config
        if len(self.conv_perms) != len(cfg.conv_layers):
            raise PlanError("conv_perms count does not match config")
        for l, perm in enumerate(self.conv_perms):
            self.conv_perms[l] = _as_perm(perm, cfg.conv_layers[l][0], f"conv {l}")
        _check_group_blocks(self.conv_perms[0], cfg)
        n_layers = cfg.num_transformer_layers
        for name, seq in (
            ("head_perms", self.head_perms),
            ("within_head_perms", self.within_head_perms),
            ("ffn_perms", self.ffn_perms),
            ("qkv_perms", self.qkv_perms),
        ):
            if len(seq) != n_layers:
                raise PlanError(f"{name} count does not match transformer layers")
        for i in range(n_layers):
            self.head_perms[i] = _as_perm(self.head_perms[i], cfg.heads, f"layer {i} heads")
            if len(self.within_head_perms[i]) != cfg.heads:
                raise PlanError(f"layer {i}: need one within-head permutation per head")
            for k in range(cfg.heads):
                self.within_head_perms[i][k] = _as_perm(
                    self.within_head_perms[i][k], cfg.head_dim, f"layer {i} head {k}"
                )
            self.ffn_perms[i] = _as_perm(self.ffn_perms[i], cfg.ffn_dim, f"layer {i} ffn")
            for m, perm in self.qkv_perms[i].items():
                if m not in QKV_MATRICES:
                    raise PlanError(f"layer {i}: unknown qkv matrix {m!r}")
                self.qkv_perms[i][m] = _as_perm(perm, cfg.model_dim, f"layer {i} {m}")
        if any(self.qkv_perms[i] for i in range(n_layers)) and not self.kind.wants_qkv:
            raise PlanError(f"qkv entries are not valid for kind {self.kind.value}")

    def attention_flat_perm(self, layer: int) -> np.ndarray:
        """Composite D-sized scatter combining head order and within-head moves."""
        d_k = self.config.head_dim
        flat = np.empty(self.config.model_dim, dtype=np.int64)
        head_perm = self.head_perms[layer]
        for j in range(self.config.heads):
            dest = head_perm[j]
            sigma = self.within_head_perms[layer][dest]
            flat[j * d_k : (j + 1) * d_k] = dest * d_k + sigma
        return flat

    def is_identity(self) -> bool:
        for perm in self._all_perms().values():
            if not np.array_equal(perm, np.arange(len(perm))):
                return False
        return True

    def _all_perms(self) -> dict[str, np.ndarray]:
        out = {}
        for l, perm in enumerate(self.conv_perms):
            out[f"conv.{l}.perm"] = perm
        for i in range(self.config.num_transformer_layers):
            out[f"layer.{i}.heads.perm"] = self.head_perms[i]
            for k in range(self.config.heads):
                out[f"layer.{i}.head.{k}.perm"] = self.within_head_perms[i][k]
            out[f"layer.{i}.ffn.perm"] = self.ffn_perms[i]
            for m, perm in sorted(self.qkv_perms[i].items()):
                out[f"layer.{i}.qkv.{m}.perm"] = perm
        return out


def _check_group_blocks(perm: np.ndarray, config: EncoderConfig) -> None:
    """Layer-0 channels may only move within or between whole norm groups."""
    c0 = config.conv_layers[0][0]
    size = c0 // config.groupnorm_groups
    if size == 1:
        return
    for g in range(config.groupnorm_groups):
        dests = perm[g * size : (g + 1) * size] // size
        if len(set(dests.tolist())) != 1:
            raise PlanError(
                f"conv layer 0 permutation splits norm group {g}; "
                "group statistics would change and the map is not a symmetry"
            )


def identity_plan(config: EncoderConfig, kind: MergeConfigKind = MergeConfigKind.CNN_FFN_ATTN) -> PermutationPlan:
    return PermutationPlan(
        config=config,
        kind=kind,
        conv_perms=[np.arange(c) for c in config.conv_channels],
        head_perms=[np.arange(config.heads) for _ in range(config.num_transformer_layers)],
        within_head_perms=[
            [np.arange(config.head_dim) for _ in range(config.heads)]
            for _ in range(config.num_transformer_layers)
        ],
        ffn_perms=[np.arange(config.ffn_dim) for _ in range(config.num_transformer_layers)],
        qkv_perms=[{} for _ in range(config.num_transformer_layers)],
        provenance={"kind": kind.value},
    )


def invert_plan(plan: PermutationPlan) -> PermutationPlan:
    """The plan that undoes `plan` (slot-wise inverse).

    For the hierarchical attention slots: inverted head order is the plain
    inverse, and the inverted within-head entry at destination k is the
    inverse of the original entry at destination head_perm[k].
    """
    cfg = plan.config
    inv = PermutationPlan(
        config=cfg,
        kind=plan.kind,
        conv_perms=[invert_permutation(p) for p in plan.conv_perms],
        head_perms=[invert_permutation(p) for p in plan.head_perms],
        within_head_perms=[
            [
                invert_permutation(plan.within_head_perms[i][plan.head_perms[i][k]])
                for k in range(cfg.heads)
            ]
            for i in range(cfg.num_transformer_layers)
        ],
        ffn_perms=[invert_permutation(p) for p in plan.ffn_perms],
        qkv_perms=[
            {m: invert_permutation(p) for m, p in plan.qkv_perms[i].items()}
            for i in range(cfg.num_transformer_layers)
        ],
        provenance=dict(plan.provenance, inverted="true"),
    )
    return inv


def compose_plans(first: PermutationPlan, second: PermutationPlan) -> PermutationPlan:
    """Plan equivalent to applying `first` then `second`."""
    if first.config != second.config:
        raise PlanError("cannot compose plans for different configs")
    cfg = first.config

    def chain(p1, p2):
        return p2[p1]

    head_perms = []
    within = []
    for i in range(cfg.num_transformer_layers):
        pi1, pi2 = first.head_perms[i], second.head_perms[i]
        head_perms.append(chain(pi1, pi2))
        inv_pi2 = invert_permutation(pi2)
        within.append(
            [
                second.within_head_perms[i][m][first.within_head_perms[i][inv_pi2[m]]]
                for m in range(cfg.heads)
            ]
        )
    qkv = []
    for i in range(cfg.num_transformer_layers):
        keys = set(first.qkv_perms[i]) | set(second.qkv_perms[i])
        ident = np.arange(cfg.model_dim)
        qkv.append(
            {
                m: chain(first.qkv_perms[i].get(m, ident), second.qkv_perms[i].get(m, ident))
                for m in keys
            }
        )
    return PermutationPlan(
        config=cfg,
        kind=first.kind,
        conv_perms=[chain(a, b) for a, b in zip(first.conv_perms, second.conv_perms)],
        head_perms=head_perms,
        within_head_perms=within,
        ffn_perms=[chain(a, b) for a, b in zip(first.ffn_perms, second.ffn_perms)],
        qkv_perms=qkv,
        provenance={"kind": first.kind.value, "composed": "true"},
    )


_PROVENANCE_KEY = "plan_provenance"
_KIND_KEY = "merge_config_kind"


def plan_to_archive(plan: PermutationPlan) -> TensorArchive:
    plan.validate()
    archive = TensorArchive(
        metadata={
            CONFIG_METADATA_KEY: plan.config.to_json(),
            _KIND_KEY: plan.kind.value,
            _PROVENANCE_KEY: json.dumps(plan.provenance, sort_keys=True),
            "within_head_index": "destination",
        }
    )
    for name, perm in plan._all_perms().items():
        archive.add(name, perm.astype(np.float32))
    return archive


def plan_from_archive(archive: TensorArchive) -> PermutationPlan:
    if CONFIG_METADATA_KEY not in archive.metadata or _KIND_KEY not in archive.metadata:
        raise PlanError("archive is not a permutation plan (missing metadata)")
    config = EncoderConfig.from_json(archive.metadata[CONFIG_METADATA_KEY])
    kind = MergeConfigKind(archive.metadata[_KIND_KEY])
    provenance = json.loads(archive.metadata.get(_PROVENANCE_KEY, "{}"))
    plan = identity_plan(config, kind)
    plan.provenance = provenance
    seen = set()
    for name, arr in archive.entries.items():
        parts = name.split(".")
        try:
            if parts[0] == "conv" and parts[2] == "perm":
                plan.conv_perms[int(parts[1])] = _as_perm(arr, len(arr), name)
            elif parts[0] == "layer" and parts[2] == "heads":
                plan.head_perms[int(parts[1])] = _as_perm(arr, len(arr), name)
            elif parts[0] == "layer" and parts[2] == "head":
                plan.within_head_perms[int(parts[1])][int(parts[3])] = _as_perm(arr, len(arr), name)
            elif parts[0] == "layer" and parts[2] == "ffn":
                plan.ffn_perms[int(parts[1])] = _as_perm(arr, len(arr), name)
            elif parts[0] == "layer" and parts[2] == "qkv":
                plan.qkv_perms[int(parts[1])][parts[3]] = _as_perm(arr, len(arr), name)
            else:
                raise PlanError(f"unrecognized plan tensor {name!r}")
        except (IndexError, ValueError) as exc:
            raise PlanError(f"malformed plan tensor {name!r}: {exc}") from exc
        seen.add(name)
    plan.validate()
    return plan
