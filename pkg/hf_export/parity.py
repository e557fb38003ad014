#!/usr/bin/env python3
"""Cross-implementation parity harness (measurement only, no thresholds).

Runs the same clips through the source-framework encoder (HF transformers,
torch) and through the merge toolkit's encoder loaded from an exported
archive, and records how far the outputs sit apart. Two numbers matter:

  raw       difference against the full HF forward; includes the known
            fidelity gap from dropping the positional conv and the
            pre-transformer layer norm during export
  bypassed  difference with those dropped modules disabled on the HF side;
            isolates the numerical agreement of the shared computation

Requires the merge toolkit (`rebasin`) plus torch/transformers, so this is
a development harness, not part of the export path. Run manually against
real checkpoints and keep the JSON next to the archive.

Usage:
    python parity.py --checkpoint pytorch_model.bin --archive hubert.mrg \
        --out hubert.parity.json
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def fixed_clips(n_clips: int, samples: int, seed: int = 20240101) -> np.ndarray:
    """Deterministic battery: octave-spaced harmonic mixes plus soft noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(samples) / 16000.0
    clips = []
    for i in range(n_clips):
        f0 = 110.0 * (2.0 ** (i % 5))
        clip = sum(np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 6.28)) / k for k in (1, 2, 3))
        clip = clip + 0.1 * rng.standard_normal(samples)
        clips.append(0.9 * clip / np.max(np.abs(clip)))
    return np.stack(clips).astype(np.float32)


def hf_forward(checkpoint, config_json: dict, clips: np.ndarray, bypass_dropped: bool):
    import torch
    from transformers import HubertConfig, HubertModel

    conv = config_json["conv_layers"]
    cfg = HubertConfig(
        conv_dim=[c for c, _, _ in conv],
        conv_kernel=[k for _, k, _ in conv],
        conv_stride=[s for _, _, s in conv],
        num_feat_extract_layers=len(conv),
        hidden_size=config_json["model_dim"],
        num_attention_heads=config_json["heads"],
        intermediate_size=config_json["ffn_dim"],
        num_hidden_layers=config_json["num_transformer_layers"],
        feat_extract_norm="group",
        conv_bias=False,
        do_stable_layer_norm=False,
        hidden_act="gelu",
        feat_extract_activation="gelu",
        layer_norm_eps=config_json.get("eps_ln", 1e-5),
    )
    model = HubertModel(cfg)
    from export import load_state_dict, strip_prefix

    state = {strip_prefix(k): torch.from_numpy(v) for k, v in load_state_dict(checkpoint).items()}
    missing, unexpected = model.load_state_dict(state, strict=False)
    model.eval()
    if bypass_dropped:
        class _Zero(torch.nn.Module):
            def forward(self, x):
                return torch.zeros_like(x)

        model.encoder.pos_conv_embed = _Zero()
        model.encoder.layer_norm = torch.nn.Identity()
    with torch.no_grad():
        out = model(torch.from_numpy(clips)).last_hidden_state.numpy()
    return out, [str(m) for m in missing], [str(u) for u in unexpected]


def toolkit_forward(archive_path, clips: np.ndarray) -> np.ndarray:
    from rebasin.encoder import EncoderWeights, forward
    from rebasin.tensor_store import load_archive

    weights = EncoderWeights.from_archive(load_archive(archive_path))
    return forward(weights, clips)


def measure(checkpoint, archive_path, n_clips=3, seconds=1.0) -> dict:
    from rebasin.tensor_store import load_archive

    config_json = json.loads(load_archive(archive_path).metadata["encoder_config"])
    clips = fixed_clips(n_clips, int(seconds * 16000))
    ours = toolkit_forward(archive_path, clips)
    result = {"clips": n_clips, "samples": clips.shape[1], "frames": int(ours.shape[1])}
    for label, bypass in (("raw", False), ("bypassed", True)):
        theirs, missing, _ = hf_forward(checkpoint, config_json, clips, bypass)
        frames = min(ours.shape[1], theirs.shape[1])
        diff = ours[:, :frames].astype(np.float64) - theirs[:, :frames].astype(np.float64)
        result[label] = {
            "max_abs": float(np.max(np.abs(diff))),
            "mse": float(np.mean(diff * diff)),
            "ref_std": float(theirs.std()),
        }
    result["hf_missing_keys"] = missing
    return result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", required=True)
    parser.add_argument("--archive", required=True, help="exported .mrg file")
    parser.add_argument("--clips", type=int, default=3)
    parser.add_argument("--seconds", type=float, default=1.0)
    parser.add_argument("--out", help="write the parity JSON here")
    args = parser.parse_args(argv)
    result = measure(args.checkpoint, args.archive, args.clips, args.seconds)
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


if __name__ == "__main__":
    sys.path.insert(0, str(Path(__file__).resolve().parent))
    sys.exit(main())
