"""Deterministic HuBERT/MERT-shaped reference encoder in plain numpy.

Architecture: a strided Conv1D frontend (group norm + GELU on layer 0,
GELU elsewhere), a layer-norm + linear projection to the model dimension,
then post-layer-norm transformer blocks (bidirectional attention, no
masking, no positional embedding). The forward pass is pure and exposes
named activation taps so alignment statistics can be collected from a
single unmodified pass per model.

Weight convention: linear layers compute y = x W^T + b with W shaped
[out, in]. Head i of W^Q/K/V occupies row block [i*d_k, (i+1)*d_k);
head i of W^O occupies the same-index column block.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .tensor_store import TensorArchive


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of one encoder; both merge parents must share it."""

    conv_layers: tuple[tuple[int, int, int], ...]  # (out_channels, kernel, stride)
    groupnorm_groups: int
    model_dim: int
    ffn_dim: int
    heads: int
    num_transformer_layers: int
    eps_ln: float = 1e-5

    def __post_init__(self):
        object.__setattr__(
            self, "conv_layers", tuple(tuple(int(x) for x in layer) for layer in self.conv_layers)
        )
        if not self.conv_layers:
            raise ConfigError("at least one conv layer is required")
        for i, layer in enumerate(self.conv_layers):
            if len(layer) != 3 or any(v < 1 for v in layer):
                raise ConfigError(f"conv layer {i} must be (out_channels>=1, kernel>=1, stride>=1)")
        for name in ("groupnorm_groups", "model_dim", "ffn_dim", "heads", "num_transformer_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.conv_layers[0][0] % self.groupnorm_groups != 0:
            raise ConfigError("groupnorm_groups must divide the first conv layer's channels")
        if self.model_dim % self.heads != 0:
            raise ConfigError("model_dim must be divisible by heads")
        if self.ffn_dim < self.model_dim:
            raise ConfigError("ffn_dim must be >= model_dim")
        if self.eps_ln <= 0:
            raise ConfigError("eps_ln must be positive")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def conv_channels(self) -> list[int]:
        return [c for c, _, _ in self.conv_layers]

    def min_input_samples(self) -> int:
        t = 1
        for _, kernel, stride in reversed(self.conv_layers):
            t = (t - 1) * stride + kernel
        return t

    def num_frames(self, samples: int) -> int:
        t = samples
        for _, kernel, stride in self.conv_layers:
            if t < kernel:
                raise ConfigError(f"input of {samples} samples is shorter than the receptive field")
            t = (t - kernel) // stride + 1
        return t

    def to_json(self) -> str:
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

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        obj = json.loads(text)
        return cls(
            conv_layers=tuple(tuple(l) for l in obj["conv_layers"]),
            groupnorm_groups=obj["groupnorm_groups"],
            model_dim=obj["model_dim"],
            ffn_dim=obj["ffn_dim"],
            heads=obj["heads"],
            num_transformer_layers=obj["num_transformer_layers"],
            eps_ln=obj.get("eps_ln", 1e-5),
        )


def toy_config() -> EncoderConfig:
    """Desk-scale default: 320x downsampling frontend, 2 transformer layers."""
    return EncoderConfig(
        conv_layers=((32, 10, 10), (48, 8, 8), (64, 4, 4)),
        groupnorm_groups=32,
        model_dim=64,
        ffn_dim=128,
        heads=4,
        num_transformer_layers=2,
    )


CONFIG_METADATA_KEY = "encoder_config"


def canonical_tensor_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical archive name -> shape for one encoder."""
    shapes: dict[str, tuple[int, ...]] = {}
    in_ch = 1
    for i, (out_ch, kernel, _) in enumerate(config.conv_layers):
        shapes[f"conv.{i}.weight"] = (out_ch, in_ch, kernel)
        shapes[f"conv.{i}.bias"] = (out_ch,)
        in_ch = out_ch
    c0 = config.conv_layers[0][0]
    shapes["conv.0.gn.gamma"] = (c0,)
    shapes["conv.0.gn.beta"] = (c0,)
    c_last = config.conv_layers[-1][0]
    d = config.model_dim
    shapes["proj.ln.gamma"] = (c_last,)
    shapes["proj.ln.beta"] = (c_last,)
    shapes["proj.weight"] = (d, c_last)
    shapes["proj.bias"] = (d,)
    for i in range(config.num_transformer_layers):
        p = f"layer.{i}"
        for m in ("q", "k", "v", "out"):
            shapes[f"{p}.attn.{m}.weight"] = (d, d)
            shapes[f"{p}.attn.{m}.bias"] = (d,)
        shapes[f"{p}.attn.ln.gamma"] = (d,)
        shapes[f"{p}.attn.ln.beta"] = (d,)
        shapes[f"{p}.ffn.w1.weight"] = (config.ffn_dim, d)
        shapes[f"{p}.ffn.w1.bias"] = (config.ffn_dim,)
        shapes[f"{p}.ffn.w2.weight"] = (d, config.ffn_dim)
        shapes[f"{p}.ffn.w2.bias"] = (d,)
        shapes[f"{p}.final.ln.gamma"] = (d,)
        shapes[f"{p}.final.ln.beta"] = (d,)
    return shapes


class WeightsError(ValueError):
    pass


@dataclass
class EncoderWeights:
    """One encoder's tensors, keyed by canonical name."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = np.asarray(value, dtype=np.float32)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def validate(self) -> None:
        expected = canonical_tensor_shapes(self.config)
        missing = sorted(set(expected) - set(self.tensors))
        if missing:
            raise WeightsError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        extra = sorted(set(self.tensors) - set(expected))
        if extra:
            raise WeightsError(f"unexpected tensors: {extra[:5]}{'...' if len(extra) > 5 else ''}")
        for name, shape in expected.items():
            got = tuple(self.tensors[name].shape)
            if got != shape:
                raise WeightsError(f"tensor {name}: shape {got}, expected {shape}")
            if not np.isfinite(self.tensors[name]).all():
                raise WeightsError(f"tensor {name} contains non-finite values")

    def to_archive(self, extra_metadata: dict[str, str] | None = None) -> TensorArchive:
        self.validate()
        archive = TensorArchive(metadata={CONFIG_METADATA_KEY: self.config.to_json()})
        if extra_metadata:
            archive.metadata.update(extra_metadata)
        for name, arr in self.tensors.items():
            archive.add(name, arr)
        return archive

    @classmethod
    def from_archive(cls, archive: TensorArchive) -> "EncoderWeights":
        if CONFIG_METADATA_KEY not in archive.metadata:
            raise WeightsError(f"archive metadata lacks {CONFIG_METADATA_KEY!r}")
        config = EncoderConfig.from_json(archive.metadata[CONFIG_METADATA_KEY])
        weights = cls(config, {k: v.copy() for k, v in archive.entries.items()})
        weights.validate()
        return weights


def init_toy(config: EncoderConfig, seed: int) -> EncoderWeights:
    """Seeded fan-in-scaled uniform weights; gains 1, shifts and biases 0."""
    rng = np.random.default_rng(seed)
    weights = EncoderWeights(config)
    for name, shape in canonical_tensor_shapes(config).items():
        if name.endswith(".gamma"):
            arr = np.ones(shape, dtype=np.float32)
        elif name.endswith((".beta", ".bias")):
            arr = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        weights.tensors[name] = arr
    return weights


class TapKind(enum.Enum):
    CONV_OUT = "conv_out"              # [B, C_l, T_l], raw Conv1D output
    CONV_GN_OUT = "conv_gn_out"        # [B, C_0, T_0], after group norm (layer 0 only)
    HEAD_OUT = "head_out"              # [B, T, d_k], per-head attention output pre-W^O
    FFN_HIDDEN = "ffn_hidden"          # [B, T, D_ff], post-GELU
    Q_OUT = "q_out"                    # [B, T, D]
    K_OUT = "k_out"                    # [B, T, D]
    V_OUT = "v_out"                    # [B, T, D]


@dataclass(frozen=True)
class TapPoint:
    kind: TapKind
    layer: int
    head: int | None = None

    def __str__(self) -> str:
        if self.kind is TapKind.HEAD_OUT:
            return f"{self.kind.value}.{self.layer}.{self.head}"
        return f"{self.kind.value}.{self.layer}"

    def validate(self, config: EncoderConfig) -> None:
        if self.kind in (TapKind.CONV_OUT, TapKind.CONV_GN_OUT):
            if not 0 <= self.layer < len(config.conv_layers):
                raise ConfigError(f"conv tap layer {self.layer} out of range")
            if self.kind is TapKind.CONV_GN_OUT and self.layer != 0:
                raise ConfigError("group norm tap only exists at conv layer 0")
        else:
            if not 0 <= self.layer < config.num_transformer_layers:
                raise ConfigError(f"transformer tap layer {self.layer} out of range")
            if self.kind is TapKind.HEAD_OUT:
                if self.head is None or not 0 <= self.head < config.heads:
                    raise ConfigError(f"head index {self.head} out of range")


def gelu(x: np.ndarray) -> np.ndarray:
    # exact Gaussian-CDF form
    return (0.5 * x * (1.0 + erf(x / np.float32(math.sqrt(2.0))))).astype(x.dtype)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return ((x - mean) / np.sqrt(var + eps)) * gamma + beta


def group_norm(x: np.ndarray, groups: int, gamma: np.ndarray, beta: np.ndarray, eps: float) -> np.ndarray:
    """Per-(sample, group) normalization of a [B, C, T] tensor + channel affine."""
    b, c, t = x.shape
    g = x.reshape(b, groups, c // groups, t)
    mean = g.mean(axis=(2, 3), keepdims=True)
    var = g.var(axis=(2, 3), keepdims=True)
    normed = ((g - mean) / np.sqrt(var + eps)).reshape(b, c, t)
    return normed * gamma[None, :, None] + beta[None, :, None]


def conv1d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Valid (no padding) strided conv of [B, C_in, T] with [C_out, C_in, K]."""
    b, c_in, t = x.shape
    c_out, _, k = weight.shape
    if t < k:
        raise ConfigError(f"input length {t} shorter than kernel {k}")
    windows = np.lib.stride_tricks.sliding_window_view(x, k, axis=2)[:, :, ::stride, :]
    t_out = windows.shape[2]
    flat = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(b, t_out, c_in * k)
    out = flat @ weight.reshape(c_out, c_in * k).T + bias
    return out.transpose(0, 2, 1)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def multi_head_attention(
    x: np.ndarray,
    wq: np.ndarray, bq: np.ndarray,
    wk: np.ndarray, bk: np.ndarray,
    wv: np.ndarray, bv: np.ndarray,
    wo: np.ndarray, bo: np.ndarray,
    heads: int,
    return_internals: bool = False,
):
    """Full bidirectional multi-head attention on [B, T, D].

    Returns the sublayer output, or (output, internals) where internals
    holds q/k/v projections, per-head outputs and attention probabilities.
    """
    b, t, d = x.shape
    d_k = d // heads
    q = x @ wq.T + bq
    k = x @ wk.T + bk
    v = x @ wv.T + bv

    def split(m):
        return m.reshape(b, t, heads, d_k).transpose(0, 2, 1, 3)  # [B, h, T, d_k]

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) / np.float32(math.sqrt(d_k))
    probs = softmax(scores, axis=-1)
    head_out = probs @ vh  # [B, h, T, d_k]
    concat = head_out.transpose(0, 2, 1, 3).reshape(b, t, d)
    out = concat @ wo.T + bo
    if return_internals:
        return out, {"q": q, "k": k, "v": v, "head_out": head_out, "probs": probs}
    return out


def forward_with_taps(
    weights: EncoderWeights,
    batch: np.ndarray,
    taps: set[TapPoint] | frozenset[TapPoint] = frozenset(),
) -> tuple[np.ndarray, dict[TapPoint, np.ndarray]]:
    """Run the encoder on [B, samples]; returns ([B, T, D], captured taps).

    Taps are copies of activations from this single unmodified pass; capture
    never alters the computation.
    """
    config = weights.config
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 2:
        raise ConfigError(f"batch must be [B, samples], got shape {batch.shape}")
    if batch.shape[1] < config.min_input_samples():
        raise ConfigError(
            f"input of {batch.shape[1]} samples is below the receptive field "
            f"({config.min_input_samples()})"
        )
    for tap in taps:
        tap.validate(config)
    captured: dict[TapPoint, np.ndarray] = {}

    def grab(tap: TapPoint, value: np.ndarray) -> None:
        if tap in taps:
            captured[tap] = value.copy()

    x = batch[:, None, :]  # [B, 1, T]
    for i, (_, _, stride) in enumerate(config.conv_layers):
        x = conv1d(x, weights[f"conv.{i}.weight"], weights[f"conv.{i}.bias"], stride)
        grab(TapPoint(TapKind.CONV_OUT, i), x)
        if i == 0:
            x = group_norm(
                x,
                config.groupnorm_groups,
                weights["conv.0.gn.gamma"],
                weights["conv.0.gn.beta"],
                config.eps_ln,
            )
            grab(TapPoint(TapKind.CONV_GN_OUT, 0), x)
        x = gelu(x)

    x = x.transpose(0, 2, 1)  # [B, T, C_last]
    x = layer_norm(x, weights["proj.ln.gamma"], weights["proj.ln.beta"], config.eps_ln)
    x = x @ weights["proj.weight"].T + weights["proj.bias"]

    d_k = config.head_dim
    for i in range(config.num_transformer_layers):
        p = f"layer.{i}"
        want_heads = any(
            t.kind in (TapKind.HEAD_OUT, TapKind.Q_OUT, TapKind.K_OUT, TapKind.V_OUT)
            and t.layer == i
            for t in taps
        )
        attn = multi_head_attention(
            x,
            weights[f"{p}.attn.q.weight"], weights[f"{p}.attn.q.bias"],
            weights[f"{p}.attn.k.weight"], weights[f"{p}.attn.k.bias"],
            weights[f"{p}.attn.v.weight"], weights[f"{p}.attn.v.bias"],
            weights[f"{p}.attn.out.weight"], weights[f"{p}.attn.out.bias"],
            config.heads,
            return_internals=want_heads,
        )
        if want_heads:
            attn, internals = attn
            grab(TapPoint(TapKind.Q_OUT, i), internals["q"])
            grab(TapPoint(TapKind.K_OUT, i), internals["k"])
            grab(TapPoint(TapKind.V_OUT, i), internals["v"])
            for h in range(config.heads):
                grab(TapPoint(TapKind.HEAD_OUT, i, h), internals["head_out"][:, h])
        x = layer_norm(
            x + attn, weights[f"{p}.attn.ln.gamma"], weights[f"{p}.attn.ln.beta"], config.eps_ln
        )
        hidden = gelu(x @ weights[f"{p}.ffn.w1.weight"].T + weights[f"{p}.ffn.w1.bias"])
        grab(TapPoint(TapKind.FFN_HIDDEN, i), hidden)
        ffn = hidden @ weights[f"{p}.ffn.w2.weight"].T + weights[f"{p}.ffn.w2.bias"]
        x = layer_norm(
            x + ffn, weights[f"{p}.final.ln.gamma"], weights[f"{p}.final.ln.beta"], config.eps_ln
        )
    return x, captured


def forward(weights: EncoderWeights, batch: np.ndarray) -> np.ndarray:
    features, _ = forward_with_taps(weights, batch)
    return features
