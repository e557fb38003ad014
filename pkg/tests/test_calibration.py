import numpy as np
import pytest

from rebasin.calibration import (
    CalibrationError,
    CalibrationSpec,
    SourceSpec,
    all_clips,
    batches,
    default_calibration_spec,
    gen_synthetic,
    load_raw_audio,
    save_raw_audio,
    write_wav_pcm16,
)


def spec_of(kind, count=6, params=None, **kw):
    return CalibrationSpec(sources=(SourceSpec(kind, count, params or {}),), **kw)


def test_spec_json_round_trip():
    spec = default_calibration_spec()
    assert CalibrationSpec.from_json(spec.to_json()) == spec


def test_unknown_kind_rejected():
    with pytest.raises(CalibrationError):
        SourceSpec("square_wave", 3)


def test_gen_synthetic_deterministic():
    spec = spec_of("sine_mix", seed=11)
    np.testing.assert_array_equal(gen_synthetic(spec, 2), gen_synthetic(spec, 2))
    assert not np.array_equal(gen_synthetic(spec, 2), gen_synthetic(spec, 3))


@pytest.mark.parametrize("kind", ["sine_mix", "band_noise", "chirp"])
def test_peak_normalization(kind):
    spec = spec_of(kind, count=8, seed=3)
    for i in range(8):
        clip = gen_synthetic(spec, i)
        assert len(clip) == spec.clip_len
        assert abs(np.max(np.abs(clip)) - 0.9) <= 1e-6


def test_band_noise_centroid_inside_band():
    # oracle: FFT of each clip; the drawn octave carries essentially all the
    # energy (float32 rounding adds ~1e-7-relative broadband noise, so band
    # membership is judged on energy, not on exact zeros)
    spec = spec_of("band_noise", count=12, params={"f_min": 100.0, "f_max": 3000.0}, seed=21)
    for i in range(12):
        clip = gen_synthetic(spec, i).astype(np.float64)
        power = np.abs(np.fft.rfft(clip)) ** 2
        freqs = np.fft.rfftfreq(len(clip), 1.0 / spec.sample_rate)
        centroid = (freqs * power).sum() / power.sum()
        active = freqs[power > 1e-6 * power.max()]
        f_lo, f_hi = active.min(), active.max()
        assert f_hi <= 2.02 * f_lo, "active bins span more than one octave"
        assert f_lo <= centroid <= f_hi
        assert 95.0 <= f_lo and f_hi <= 3100.0  # f_lo drawn in [100, 1500], band = [f_lo, 2 f_lo]
        in_band = power[(freqs >= f_lo) & (freqs <= f_hi)].sum()
        assert in_band >= 0.999 * power.sum()


def test_raw_f32_round_trip(tmp_path):
    spec = spec_of("chirp", seed=9)
    clip = gen_synthetic(spec, 0)
    path = tmp_path / "clip.f32"
    save_raw_audio(clip, path)
    np.testing.assert_array_equal(load_raw_audio(path), clip)


def test_pcm16_scaling(tmp_path):
    import wave

    path = tmp_path / "ref.wav"
    pcm = np.array([16384, -32768, 0, 32767], dtype="<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(pcm.tobytes())
    clip = load_raw_audio(path)
    np.testing.assert_allclose(clip, [0.5, -1.0, 0.0, 32767 / 32768], atol=0)


def test_wav_writer_reader_round_trip(tmp_path):
    clip = gen_synthetic(spec_of("sine_mix", seed=2), 0)
    path = tmp_path / "clip.wav"
    write_wav_pcm16(clip, path, 16000)
    restored = load_raw_audio(path)
    assert len(restored) == len(clip)
    np.testing.assert_allclose(restored, clip, atol=1.0 / 32768)


def test_wav_stereo_rejected(tmp_path):
    import wave

    path = tmp_path / "stereo.wav"
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(2)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(b"\x00" * 32)
    with pytest.raises(CalibrationError, match="mono"):
        load_raw_audio(path)


def test_truncated_f32_rejected(tmp_path):
    path = tmp_path / "bad.f32"
    path.write_bytes(b"\x00" * 6)
    with pytest.raises(CalibrationError, match="truncated"):
        load_raw_audio(path)


def test_batch_sizes():
    spec = spec_of("sine_mix", count=10, batch_size=4, clip_len=400, seed=0)
    sizes = [len(b) for b in batches(spec)]
    assert sizes == [4, 4, 2]


def test_batches_deterministic():
    spec = default_calibration_spec()
    b1 = list(batches(spec))
    b2 = list(batches(spec))
    assert len(b1) == len(b2)
    for x, y in zip(b1, b2):
        assert x.tobytes() == y.tobytes()


def test_mixed_sources_interleave_reproducibly():
    spec = CalibrationSpec(
        sources=(SourceSpec("sine_mix", 5), SourceSpec("chirp", 5)),
        clip_len=500,
        batch_size=10,
        seed=4,
    )
    from rebasin.calibration import clip_order

    order = clip_order(spec)
    assert sorted(order) == list(range(10))
    assert order != list(range(10)), "seeded shuffle should interleave the kinds"
    assert order == clip_order(spec)
    batch = next(iter(batches(spec)))
    for row, idx in zip(batch, order):
        np.testing.assert_array_equal(row, gen_synthetic(spec, idx))


def test_total_clips_and_amplitude_bound():
    spec = default_calibration_spec()
    clips = all_clips(spec)
    assert clips.shape == (spec.total_clips, spec.clip_len)
    assert np.abs(clips).max() <= 1.0


def test_raw_file_source(tmp_path):
    gen = spec_of("sine_mix", count=3, clip_len=700, seed=1)
    paths = []
    for i in range(3):
        p = tmp_path / f"c{i}.f32"
        save_raw_audio(gen_synthetic(gen, i), p)
        paths.append(str(p))
    spec = CalibrationSpec(
        sources=(SourceSpec("raw_file", 3, {"paths": paths}),),
        clip_len=1000,  # longer than the files: zero-padded
        batch_size=2,
        seed=1,
    )
    clips = all_clips(spec)
    assert clips.shape == (3, 1000)
    assert np.array_equal(clips[:, 700:], np.zeros((3, 300), dtype=np.float32))


def test_raw_file_missing_path():
    spec = CalibrationSpec(
        sources=(SourceSpec("raw_file", 1, {"paths": ["/nonexistent/x.f32"]}),),
        clip_len=100,
    )
    with pytest.raises(FileNotFoundError):
        all_clips(spec)


def test_wav_rate_mismatch_rejected(tmp_path):
    clip = gen_synthetic(spec_of("sine_mix", seed=8), 0)
    path = tmp_path / "wrong_rate.wav"
    write_wav_pcm16(clip, path, 8000)
    with pytest.raises(CalibrationError, match="rate"):
        load_raw_audio(path, expected_rate=16000)
    spec = CalibrationSpec(
        sources=(SourceSpec("raw_file", 1, {"paths": [str(path)]}),),
        sample_rate=16000,
        clip_len=1000,
    )
    with pytest.raises(CalibrationError, match="resampling"):
        all_clips(spec)
