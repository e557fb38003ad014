#!/usr/bin/env python3
"""Convert pretrained HuBERT/MERT checkpoints into MRG1 encoder archives.

Maps HF-transformers state-dict names onto the merge toolkit's canonical
naming scheme and validates every tensor against the declared architecture
(7 conv layers, D=768, 12 heads, FFN 3072, 12 transformer layers for both
supported checkpoints). Tensors outside the merged scope (positional conv,
masked-prediction embedding, projection heads) are dropped and listed in a
sidecar report so nothing disappears silently.

Usage:
    python export.py --checkpoint pytorch_model.bin --kind hubert_base --out hubert.mrg

Writes hubert.mrg plus hubert.report.json.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent))
from mrg1 import write_mrg1  # noqa: E402

STRIP_PREFIXES = ("hubert.", "mert.", "wav2vec2.", "model.", "module.")

# learned tensors that exist in the checkpoints but are outside the merged
# encoder's scope; everything here is reported, never silently ignored
DROP_MARKERS = (
    "pos_conv_embed",
    "masked_spec_embed",
    "encoder.layer_norm.",
    "label_embs",
    "final_proj",
    "lm_head",
    "quantizer",
    "project_q",
    "project_hid",
)


@dataclass(frozen=True)
class ExportProfile:
    """Declared architecture of one supported checkpoint family."""

    kind: str
    conv_layers: tuple[tuple[int, int, int], ...]
    groupnorm_groups: int
    model_dim: int
    ffn_dim: int
    heads: int
    num_transformer_layers: int
    eps_ln: float = 1e-5

    def config_json(self) -> str:
        return json.dumps(
            {
                "conv_layers": [list(l) for l in self.conv_layers],
                "groupnorm_groups": self.groupnorm_groups,
                "model_dim": self.model_dim,
                "ffn_dim": self.ffn_dim,
                "heads": self.heads,
                "num_transformer_layers": self.num_transformer_layers,
                "eps_ln": self.eps_ln,
            },
            separators=(",", ":"),
        )


_BASE_SHAPE = dict(
    conv_layers=((512, 10, 5), (512, 3, 2), (512, 3, 2), (512, 3, 2),
                 (512, 3, 2), (512, 2, 2), (512, 2, 2)),
    groupnorm_groups=512,
    model_dim=768,
    ffn_dim=3072,
    heads=12,
    num_transformer_layers=12,
)

# the two checkpoints share the HuBERT-Base backbone
PROFILES = {
    "hubert_base": ExportProfile(kind="hubert_base", **_BASE_SHAPE),
    "mert_v0": ExportProfile(kind="mert_v0", **_BASE_SHAPE),
}


class ExportError(RuntimeError):
    pass


@dataclass
class NameMap:
    """Ordered canonical-name -> (source name, shape, optional) rules."""

    rules: list[tuple[str, str, tuple[int, ...], bool]] = field(default_factory=list)

    def add(self, canonical: str, source: str, shape: tuple[int, ...], optional=False):
        self.rules.append((canonical, source, shape, optional))


def build_name_map(profile: ExportProfile) -> NameMap:
    nm = NameMap()
    in_ch = 1
    for i, (out_ch, kernel, _) in enumerate(profile.conv_layers):
        base = f"feature_extractor.conv_layers.{i}"
        nm.add(f"conv.{i}.weight", f"{base}.conv.weight", (out_ch, in_ch, kernel))
        # hubert-base/mert-v0 use conv_bias=False; zeros are synthesized
        nm.add(f"conv.{i}.bias", f"{base}.conv.bias", (out_ch,), optional=True)
        in_ch = out_ch
    c0 = profile.conv_layers[0][0]
    nm.add("conv.0.gn.gamma", "feature_extractor.conv_layers.0.layer_norm.weight", (c0,))
    nm.add("conv.0.gn.beta", "feature_extractor.conv_layers.0.layer_norm.bias", (c0,))
    c_last = profile.conv_layers[-1][0]
    d, d_ff = profile.model_dim, profile.ffn_dim
    nm.add("proj.ln.gamma", "feature_projection.layer_norm.weight", (c_last,))
    nm.add("proj.ln.beta", "feature_projection.layer_norm.bias", (c_last,))
    nm.add("proj.weight", "feature_projection.projection.weight", (d, c_last))
    nm.add("proj.bias", "feature_projection.projection.bias", (d,))
    for i in range(profile.num_transformer_layers):
        src = f"encoder.layers.{i}"
        dst = f"layer.{i}"
        for ours, theirs in (("q", "q_proj"), ("k", "k_proj"), ("v", "v_proj"), ("out", "out_proj")):
            nm.add(f"{dst}.attn.{ours}.weight", f"{src}.attention.{theirs}.weight", (d, d))
            nm.add(f"{dst}.attn.{ours}.bias", f"{src}.attention.{theirs}.bias", (d,))
        nm.add(f"{dst}.attn.ln.gamma", f"{src}.layer_norm.weight", (d,))
        nm.add(f"{dst}.attn.ln.beta", f"{src}.layer_norm.bias", (d,))
        nm.add(f"{dst}.ffn.w1.weight", f"{src}.feed_forward.intermediate_dense.weight", (d_ff, d))
        nm.add(f"{dst}.ffn.w1.bias", f"{src}.feed_forward.intermediate_dense.bias", (d_ff,))
        nm.add(f"{dst}.ffn.w2.weight", f"{src}.feed_forward.output_dense.weight", (d, d_ff))
        nm.add(f"{dst}.ffn.w2.bias", f"{src}.feed_forward.output_dense.bias", (d,))
        nm.add(f"{dst}.final.ln.gamma", f"{src}.final_layer_norm.weight", (d,))
        nm.add(f"{dst}.final.ln.beta", f"{src}.final_layer_norm.bias", (d,))
    return nm


def load_state_dict(path) -> dict[str, np.ndarray]:
    """Load a torch checkpoint (file or HF model directory) as numpy f32."""
    import torch

    path = Path(path)
    if path.is_dir():
        for candidate in ("pytorch_model.bin", "model.pt"):
            if (path / candidate).exists():
                path = path / candidate
                break
        else:
            raise ExportError(f"no pytorch_model.bin found under {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ExportError(f"checkpoint {path} does not contain a state dict")
    out = {}
    for key, value in state.items():
        if not hasattr(value, "numpy"):
            continue  # non-tensor entries (step counters etc.)
        out[str(key)] = value.detach().to(torch.float32).numpy()
    if not out:
        raise ExportError(f"checkpoint {path} holds no tensors")
    return out


def strip_prefix(name: str) -> str:
    for prefix in STRIP_PREFIXES:
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def export(checkpoint, kind: str, out, profile: ExportProfile | None = None) -> dict:
    """Write the canonical MRG1 archive plus a sidecar mapping report."""
    if profile is None:
        if kind not in PROFILES:
            raise ExportError(f"unknown kind {kind!r}; expected one of {sorted(PROFILES)}")
        profile = PROFILES[kind]
    source = load_state_dict(checkpoint)
    by_stripped: dict[str, str] = {}
    for name in source:
        stripped = strip_prefix(name)
        if stripped in by_stripped:
            raise ExportError(f"prefix stripping collides: {name} vs {by_stripped[stripped]}")
        by_stripped[stripped] = name

    name_map = build_name_map(profile)
    tensors: dict[str, np.ndarray] = {}
    mapped: dict[str, str] = {}
    synthesized: list[str] = []
    for canonical, src_name, shape, optional in name_map.rules:
        if src_name not in by_stripped:
            if optional:
                tensors[canonical] = np.zeros(shape, dtype=np.float32)
                synthesized.append(canonical)
                continue
            raise ExportError(f"checkpoint lacks required tensor {src_name!r} ({canonical})")
        original = by_stripped[src_name]
        arr = source[original]
        if tuple(arr.shape) != shape:
            raise ExportError(
                f"{original}: shape {tuple(arr.shape)} does not match declared {shape}"
            )
        tensors[canonical] = arr
        mapped[canonical] = original

    used = set(mapped.values())
    dropped = sorted(name for name in source if name not in used)
    unexpected = [
        name for name in dropped
        if not any(marker in strip_prefix(name) for marker in DROP_MARKERS)
    ]

    out = Path(out)
    write_mrg1(
        out,
        tensors,
        {
            "encoder_config": profile.config_json(),
            "export_kind": profile.kind,
            "source_checkpoint": str(checkpoint),
        },
    )
    report = {
        "kind": profile.kind,
        "checkpoint": str(checkpoint),
        "archive": str(out),
        "mapped": mapped,
        "synthesized": synthesized,
        "dropped": dropped,
        "unexpected_dropped": unexpected,
        "counts": {
            "source_tensors": len(source),
            "mapped": len(mapped),
            "dropped": len(dropped),
            "synthesized": len(synthesized),
        },
    }
    report_path = out.parent / (out.name.rsplit(".", 1)[0] + ".report.json")
    report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", required=True,
                        help="torch state dict file or HF model directory")
    parser.add_argument("--kind", required=True,
                        choices=sorted(PROFILES), help="checkpoint family")
    parser.add_argument("--out", required=True, help="output .mrg path")
    parser.add_argument("--config-json",
                        help="override the declared architecture (testing/desk scale)")
    args = parser.parse_args(argv)
    profile = None
    if args.config_json:
        obj = json.loads(Path(args.config_json).read_text())
        profile = ExportProfile(
            kind=args.kind,
            conv_layers=tuple(tuple(l) for l in obj["conv_layers"]),
            groupnorm_groups=obj["groupnorm_groups"],
            model_dim=obj["model_dim"],
            ffn_dim=obj["ffn_dim"],
            heads=obj["heads"],
            num_transformer_layers=obj["num_transformer_layers"],
            eps_ln=obj.get("eps_ln", 1e-5),
        )
    try:
        report = export(args.checkpoint, args.kind, args.out, profile)
    except ExportError as exc:
        print(f"error:export: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"error:io: {exc}", file=sys.stderr)
        return 1
    counts = report["counts"]
    print(json.dumps({"out": report["archive"], "counts": counts}, indent=2))
    if report["unexpected_dropped"]:
        print(
            f"warning: {len(report['unexpected_dropped'])} dropped tensors outside "
            "the known drop list; see the report",
            file=sys.stderr,
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
