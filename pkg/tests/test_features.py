"""Front-end: framing arithmetic, fbank vs direct-DFT oracle, CMVN, stacking."""

import math

import numpy as np
import pytest

from did.errors import InputError
from did.features import (
    AudioBuffer,
    FeatureMatrix,
    FrontendConfig,
    ManifestEntry,
    cmvn,
    fbank,
    frame_count,
    load_features,
    mel_filterbank,
    read_manifest,
    read_wav,
    save_features,
    stack_downsample,
    write_manifest,
    write_wav,
)

SR = 16000


def tone(freq, seconds=1.0, sr=SR, amp=0.5):
    t = np.arange(round(seconds * sr)) / sr
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr)


class TestFbank:
    def test_one_second_gives_98_frames(self):
        feats = fbank(tone(440.0, 1.0), FrontendConfig())
        assert feats.num_frames == 98  # 1 + (16000 - 400) // 160
        assert feats.feature_dim == 80

    def test_frame_count_formula_sweep(self):
        # every audio length from one frame up to one frame + 5000 samples
        frame_len, shift = 400, 160
        for extra in range(0, 5001, 83):
            n = frame_len + extra
            feats = fbank(AudioBuffer(np.random.default_rng(0).standard_normal(n) * 0.1, SR),
                          FrontendConfig())
            assert feats.num_frames == 1 + (n - frame_len) // shift
            assert feats.num_frames == frame_count(n, frame_len, shift)

    def test_too_short_audio_rejected(self):
        with pytest.raises(InputError):
            fbank(AudioBuffer(np.zeros(399), SR), FrontendConfig())

    def test_silence_rows_identical(self):
        feats = fbank(AudioBuffer(np.zeros(SR), SR), FrontendConfig())
        assert np.allclose(feats.frames, feats.frames[0], atol=1e-12)

    def test_tone_energy_lands_in_matching_mel_bins(self):
        feats = fbank(tone(1000.0), FrontendConfig())
        fb = mel_filterbank(80, 512, SR)
        bin_hz = np.arange(257) * SR / 512
        # filters whose support spans 1 kHz
        spanning = [m for m in range(80)
                    if fb[m, np.argmin(np.abs(bin_hz - 1000.0))] > 0]
        hottest = int(np.argmax(feats.frames[5]))
        assert hottest in spanning

    def test_frame_zero_matches_direct_dft_oracle(self):
        """Independent oracle: naive DFT + re-derived triangular filterbank."""
        audio = tone(1000.0, 0.05)
        cfg = FrontendConfig()
        feats = fbank(audio, cfg)

        frame = audio.samples[:400] * np.hamming(400)
        n_fft = 512
        n = np.arange(n_fft)
        padded = np.zeros(n_fft)
        padded[:400] = frame
        power = np.empty(n_fft // 2 + 1)
        for k in range(n_fft // 2 + 1):
            power[k] = abs(np.sum(padded * np.exp(-2j * np.pi * k * n / n_fft))) ** 2

        def mel(f):
            return 2595.0 * math.log10(1.0 + f / 700.0)

        def imel(m):
            return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

        edges = [imel(mel(20.0) + i * (mel(SR / 2) - mel(20.0)) / 81) for i in range(82)]
        bin_hz = np.arange(n_fft // 2 + 1) * SR / n_fft
        expected = np.empty(80)
        for m in range(80):
            lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
            w = np.minimum((bin_hz - lo) / (c - lo), (hi - bin_hz) / (hi - c))
            expected[m] = math.log(max(np.sum(power * np.clip(w, 0.0, None)), 1e-10))

        assert np.max(np.abs(feats.frames[0] - expected)) < 1e-8


class TestCmvn:
    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(1)
        feats = FeatureMatrix(rng.standard_normal((50, 8)) * 3 + 5)
        out = cmvn(feats)
        assert np.max(np.abs(out.frames.mean(axis=0))) <= 1e-6
        assert np.max(np.abs(out.frames.var(axis=0) - 1.0)) <= 1e-6

    def test_idempotent(self):
        rng = np.random.default_rng(2)
        once = cmvn(FeatureMatrix(rng.standard_normal((30, 4))))
        twice = cmvn(once)
        assert np.max(np.abs(twice.frames - once.frames)) <= 1e-6

    def test_two_frame_population_variance(self):
        out = cmvn(FeatureMatrix([[0.0], [2.0]]))
        assert np.allclose(out.frames, [[-1.0], [1.0]])

    def test_constant_dimension_floored_not_raised(self):
        out = cmvn(FeatureMatrix([[3.0, 1.0], [3.0, 2.0]]))
        assert np.allclose(out.frames[:, 0], 0.0)

    def test_single_frame_rejected(self):
        with pytest.raises(InputError):
            cmvn(FeatureMatrix([[1.0, 2.0]]))


class TestStackDownsample:
    def test_paper_shape_12_frames(self):
        feats = FeatureMatrix(np.arange(12 * 80, dtype=float).reshape(12, 80))
        out = stack_downsample(feats, m=4, n_ds=3)
        assert out.frames.shape == (4, 320)

    def test_identity_factors(self):
        feats = FeatureMatrix(np.random.default_rng(3).standard_normal((9, 5)))
        out = stack_downsample(feats, m=1, n_ds=1)
        assert np.array_equal(out.frames, feats.frames)

    def test_tail_repeats_last_frame(self):
        feats = FeatureMatrix(np.arange(5, dtype=float).reshape(5, 1))
        out = stack_downsample(feats, m=4, n_ds=3)
        assert out.frames.shape == (2, 4)
        assert out.frames[0].tolist() == [0.0, 1.0, 2.0, 3.0]
        assert out.frames[1].tolist() == [3.0, 4.0, 4.0, 4.0]  # inputs [3,4,4,4]

    def test_length_formula_sweep(self):
        for t in range(1, 101):
            feats = FeatureMatrix(np.arange(t * 2, dtype=float).reshape(t, 2))
            out = stack_downsample(feats, m=4, n_ds=3)
            assert out.num_frames == math.ceil(t / 3)
            assert out.feature_dim == 8

    def test_pure_rearrangement(self):
        rng = np.random.default_rng(4)
        feats = FeatureMatrix(rng.standard_normal((17, 3)))
        out = stack_downsample(feats, m=4, n_ds=3)
        cells = set(feats.frames.reshape(-1).tolist())
        assert all(v in cells for v in out.frames.reshape(-1).tolist())


class TestIo:
    def test_wav_round_trip(self, tmp_path):
        audio = tone(250.0, 0.2)
        path = tmp_path / "t.wav"
        write_wav(path, audio)
        back = read_wav(path)
        assert back.sample_rate == SR
        assert back.samples.size == audio.samples.size
        assert np.max(np.abs(back.samples - audio.samples)) < 1.0 / 32000

    def test_stereo_rejected(self, tmp_path):
        import wave as wave_mod
        path = tmp_path / "stereo.wav"
        with wave_mod.open(str(path), "wb") as fh:
            fh.setnchannels(2)
            fh.setsampwidth(2)
            fh.setframerate(SR)
            fh.writeframes(b"\x00\x00" * 200)
        with pytest.raises(InputError, match="mono"):
            read_wav(path)

    def test_feature_file_round_trip(self, tmp_path):
        feats = FeatureMatrix(np.random.default_rng(5).standard_normal((7, 80)).astype(np.float32),
                              frame_shift_ms=10)
        path = tmp_path / "u.feat"
        save_features(path, feats)
        back = load_features(path)
        assert back.frames.shape == (7, 80)
        assert back.frame_shift_ms == 10
        assert np.allclose(back.frames, feats.frames, atol=1e-6)

    def test_feature_file_header(self, tmp_path):
        path = tmp_path / "u.feat"
        save_features(path, FeatureMatrix(np.zeros((3, 2))))
        raw = path.read_bytes()
        assert raw[:4] == b"FEAT"
        assert int.from_bytes(raw[4:6], "little") == 1
        assert int.from_bytes(raw[6:14], "little") == 3
        assert int.from_bytes(raw[14:22], "little") == 2
        assert int.from_bytes(raw[22:24], "little") == 10
        assert len(raw) == 24 + 3 * 2 * 4

    def test_manifest_round_trip(self, tmp_path):
        entries = [ManifestEntry("u1", "a/b.wav", "class0", 3.2),
                   ManifestEntry("u2", "a/c.wav", "class1", 21.07)]
        path = tmp_path / "m.tsv"
        write_manifest(path, entries)
        back = read_manifest(path)
        assert [e.utt_id for e in back] == ["u1", "u2"]
        assert back[1].duration == pytest.approx(21.07)

    def test_malformed_manifest_names_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("u1\ta.wav\tclass0\t1.0\nu2\tb.wav\n")
        with pytest.raises(InputError, match="bad.tsv:2"):
            read_manifest(path)
