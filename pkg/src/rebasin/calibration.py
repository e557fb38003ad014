"""Deterministic calibration batches: synthetic signals or raw audio files.

Every clip is a pure function of (spec.seed, clip index), so two runs of
the same spec produce byte-identical batches and the planner's statistics
are reproducible. The shipped default mixes noise-band/chirp "speech-like"
clips with harmonic-stack "music-like" clips, standing in for the mixed
speech+music calibration sets used at full scale.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

PEAK = 0.9


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    kind: str                      # sine_mix | band_noise | chirp | raw_file
    count: int
    params: dict = field(default_factory=dict)

    KINDS = ("sine_mix", "band_noise", "chirp", "raw_file")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise CalibrationError(f"unknown source kind {self.kind!r}")
        if self.count < 1:
            raise CalibrationError("source count must be >= 1")


@dataclass(frozen=True)
class CalibrationSpec:
    sources: tuple[SourceSpec, ...]
    sample_rate: int = 16000
    clip_len: int = 16000
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        if not self.sources:
            raise CalibrationError("at least one source is required")
        if self.clip_len < 1 or self.batch_size < 1 or self.sample_rate < 1:
            raise CalibrationError("clip_len, batch_size and sample_rate must be >= 1")

    @property
    def total_clips(self) -> int:
        return sum(s.count for s in self.sources)

    def to_json(self) -> str:
        return json.dumps(
            {
                "sources": [
                    {"kind": s.kind, "count": s.count, "params": s.params} for s in self.sources
                ],
                "sample_rate": self.sample_rate,
                "clip_len": self.clip_len,
                "batch_size": self.batch_size,
                "seed": self.seed,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationSpec":
        obj = json.loads(text)
        return cls(
            sources=tuple(
                SourceSpec(s["kind"], s["count"], s.get("params", {})) for s in obj["sources"]
            ),
            sample_rate=obj.get("sample_rate", 16000),
            clip_len=obj.get("clip_len", 16000),
            batch_size=obj.get("batch_size", 16),
            seed=obj.get("seed", 0),
        )


def default_calibration_spec(seed: int = 7) -> CalibrationSpec:
    """128 one-second clips: 64 speech-like (low noise bands + chirps), 64 music-like."""
    return CalibrationSpec(
        sources=(
            SourceSpec("band_noise", 32, {"f_min": 80.0, "f_max": 1200.0}),
            SourceSpec("chirp", 32, {"f_min": 100.0, "f_max": 4000.0}),
            SourceSpec("sine_mix", 64, {"f_min": 60.0, "f_max": 2000.0, "harmonic": True}),
        ),
        sample_rate=16000,
        clip_len=16000,
        batch_size=16,
        seed=seed,
    )


def default_battery_spec(clips: int = 32, seed: int = 1234) -> CalibrationSpec:
    """Small mixed battery for functional-distance evaluations."""
    third = max(1, clips // 3)
    return CalibrationSpec(
        sources=(
            SourceSpec("band_noise", third, {"f_min": 80.0, "f_max": 2000.0}),
            SourceSpec("chirp", third, {"f_min": 100.0, "f_max": 4000.0}),
            SourceSpec("sine_mix", clips - 2 * third, {"f_min": 60.0, "f_max": 2000.0}),
        ),
        seed=seed,
    )


def _normalize(clip: np.ndarray) -> np.ndarray:
    peak = np.max(np.abs(clip))
    if peak > 0:
        clip = clip * (PEAK / peak)
    return clip.astype(np.float32)


def _expanded_descriptors(spec: CalibrationSpec) -> list[tuple[int, SourceSpec, int]]:
    """(global index, source, index within source) in declaration order.

    The global index seeds the clip's RNG, so clip content is independent of
    the shuffled emission order used by batches().
    """
    out = []
    idx = 0
    for source in spec.sources:
        for within in range(source.count):
            out.append((idx, source, within))
            idx += 1
    return out


def gen_synthetic(spec: CalibrationSpec, index: int) -> np.ndarray:
    """Deterministic synthetic clip for global clip `index`; peak 0.9."""
    descriptors = _expanded_descriptors(spec)
    if not 0 <= index < len(descriptors):
        raise CalibrationError(f"clip index {index} out of range")
    _, source, _ = descriptors[index]
    if source.kind == "raw_file":
        raise CalibrationError("gen_synthetic cannot render raw_file sources")
    rng = np.random.default_rng([spec.seed, index])
    n = spec.clip_len
    t = np.arange(n, dtype=np.float64) / spec.sample_rate
    nyquist = spec.sample_rate / 2.0
    f_min = float(source.params.get("f_min", 60.0))
    f_max = min(float(source.params.get("f_max", 4000.0)), nyquist * 0.95)

    if source.kind == "sine_mix":
        n_parts = int(rng.integers(1, 6))
        clip = np.zeros(n)
        if source.params.get("harmonic"):
            f0 = rng.uniform(f_min, f_max / max(n_parts, 1))
            freqs = f0 * np.arange(1, n_parts + 1)
        else:
            freqs = rng.uniform(f_min, f_max, size=n_parts)
        amps = rng.uniform(0.3, 1.0, size=n_parts)
        phases = rng.uniform(0, 2 * np.pi, size=n_parts)
        for f, a, ph in zip(freqs, amps, phases):
            clip += a * np.sin(2 * np.pi * f * t + ph)
    elif source.kind == "band_noise":
        # white noise bandpassed to a random octave [f_lo, 2*f_lo] via FFT masking
        f_lo = np.exp(rng.uniform(np.log(f_min), np.log(max(f_max / 2.0, f_min * 1.001))))
        noise = rng.standard_normal(n)
        spectrum = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, d=1.0 / spec.sample_rate)
        mask = (freqs >= f_lo) & (freqs <= 2.0 * f_lo)
        if not mask.any():
            mask[np.argmin(np.abs(freqs - f_lo))] = True
        clip = np.fft.irfft(spectrum * mask, n=n)
    elif source.kind == "chirp":
        f0 = rng.uniform(f_min, f_max)
        f1 = rng.uniform(f_min, f_max)
        dur = n / spec.sample_rate
        clip = np.sin(2 * np.pi * (f0 * t + (f1 - f0) / (2 * dur) * t * t))
    else:  # pragma: no cover
        raise CalibrationError(f"unhandled kind {source.kind!r}")
    return _normalize(clip)


def load_raw_audio(path, expected_rate: int | None = None) -> np.ndarray:
    """Load `.f32` (headerless little-endian) or PCM16 mono WAV into [-1, 1].

    No resampling: when `expected_rate` is given, a WAV with a different
    declared rate is rejected.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        with wave.open(str(path), "rb") as wav:
            if wav.getnchannels() != 1:
                raise CalibrationError(f"{path}: only mono WAV is supported")
            if wav.getsampwidth() != 2:
                raise CalibrationError(f"{path}: only PCM16 WAV is supported")
            if expected_rate is not None and wav.getframerate() != expected_rate:
                raise CalibrationError(
                    f"{path}: declared rate {wav.getframerate()} differs from "
                    f"{expected_rate} and resampling is not supported"
                )
            frames = wav.readframes(wav.getnframes())
        pcm = np.frombuffer(frames, dtype="<i2")
        return (pcm.astype(np.float32) / 32768.0).astype(np.float32)
    data = path.read_bytes()
    if len(data) % 4 != 0:
        raise CalibrationError(f"{path}: truncated f32 data ({len(data)} bytes)")
    clip = np.frombuffer(data, dtype="<f4").astype(np.float32)
    return np.clip(clip, -1.0, 1.0)


def save_raw_audio(clip: np.ndarray, path) -> None:
    Path(path).write_bytes(np.asarray(clip, dtype="<f4").tobytes())


def write_wav_pcm16(clip: np.ndarray, path, sample_rate: int) -> None:
    pcm = np.clip(np.asarray(clip) * 32768.0, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(sample_rate)
        wav.writeframes(pcm.tobytes())


def _fit_length(clip: np.ndarray, clip_len: int) -> np.ndarray:
    if len(clip) >= clip_len:
        return clip[:clip_len]
    return np.pad(clip, (0, clip_len - len(clip)))


def _clip_for_descriptor(
    spec: CalibrationSpec, index: int, source: SourceSpec, within: int
) -> np.ndarray:
    if source.kind == "raw_file":
        paths = source.params.get("paths")
        if not paths:
            raise CalibrationError("raw_file source needs params['paths']")
        if within >= len(paths):
            raise CalibrationError("raw_file count exceeds number of paths")
        clip = load_raw_audio(paths[within], expected_rate=spec.sample_rate)
        return _fit_length(clip, spec.clip_len).astype(np.float32)
    return gen_synthetic(spec, index)


def clip_order(spec: CalibrationSpec) -> list[int]:
    """Seeded shuffle of clip indices; fixes the emission order of batches()."""
    order = np.arange(spec.total_clips)
    np.random.default_rng(spec.seed).shuffle(order)
    return [int(i) for i in order]


def batches(spec: CalibrationSpec) -> Iterator[np.ndarray]:
    """Yield [batch_size, clip_len] float32 batches; the last may be partial."""
    descriptors = _expanded_descriptors(spec)
    order = clip_order(spec)
    pending: list[np.ndarray] = []
    for idx in order:
        _, source, within = descriptors[idx]
        pending.append(_clip_for_descriptor(spec, idx, source, within))
        if len(pending) == spec.batch_size:
            yield np.stack(pending)
            pending = []
    if pending:
        yield np.stack(pending)


def all_clips(spec: CalibrationSpec) -> np.ndarray:
    return np.concatenate([b for b in batches(spec)], axis=0)
