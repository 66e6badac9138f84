"""Acoustic front-end: log-mel filterbank features, CMVN, frame stacking.

Conventions are fixed so outputs are bit-reproducible: Hamming window,
power spectrum over a 512-point FFT (larger power of two if a frame
exceeds 512 samples), mel scale 2595*log10(1 + f/700) spanning 20 Hz to
Nyquist, log floor 1e-10, population variance in CMVN. No pre-emphasis,
no dither.
"""

from __future__ import annotations

import math
import os
import struct
import wave
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

LOG_FLOOR = 1e-10
MEL_LOW_HZ = 20.0
CMVN_VAR_FLOOR = 1e-8


@dataclass
class AudioBuffer:
    """Mono PCM audio as floats in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError("audio must be a non-empty 1-D signal")
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FrontendConfig:
    n_mels: int = 80
    frame_length_ms: int = 25
    frame_shift_ms: int = 10
    stack_factor: int = 4        # frames concatenated per output frame
    downsample_factor: int = 3   # keep every n-th stacked frame
    cmvn: bool = True

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError(f"n_mels must be >= 1, got {self.n_mels}")
        if self.stack_factor < 1 or self.downsample_factor < 1:
            raise ConfigError(
                f"stack_factor/downsample_factor must be >= 1, got "
                f"{self.stack_factor}/{self.downsample_factor}")
        if self.frame_length_ms <= 0 or self.frame_shift_ms <= 0:
            raise ConfigError("frame length/shift must be positive")

    @property
    def stacked_dim(self) -> int:
        return self.n_mels * self.stack_factor


@dataclass
class FeatureMatrix:
    """Per-utterance time x dimension features plus frame metadata."""

    frames: np.ndarray
    frame_length_ms: int = 25
    frame_shift_ms: int = 10

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InputError(f"features must be a T x D matrix with T >= 1, "
                             f"got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.frames.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, PCM 16-bit LE, mono; anything else is rejected)
# ---------------------------------------------------------------------------

def read_wav(path) -> AudioBuffer:
    if not os.path.exists(path):
        raise InputError(f"wav file not found: {path}")
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getcomptype() != "NONE":
                raise InputError(f"{path}: compressed WAV not supported")
            if fh.getsampwidth() != 2:
                raise InputError(f"{path}: expected 16-bit PCM, got "
                                 f"{8 * fh.getsampwidth()}-bit")
            if fh.getnchannels() != 1:
                raise InputError(f"{path}: expected mono, got "
                                 f"{fh.getnchannels()} channels (not mixing down)")
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise InputError(f"{path}: not a readable RIFF WAV ({exc})") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, rate)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(audio.sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Filterbank features
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   low_hz: float = MEL_LOW_HZ, high_hz: float | None = None) -> np.ndarray:
    """Triangular mel filters as an (n_mels, n_fft//2 + 1) weight matrix."""
    high_hz = sample_rate / 2.0 if high_hz is None else high_hz
    edges_mel = np.linspace(hz_to_mel(low_hz), hz_to_mel(high_hz), n_mels + 2)
    edges_hz = mel_to_hz(edges_mel)
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    fb = np.zeros((n_mels, bin_hz.size))
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return fb


def frame_count(num_samples: int, frame_len: int, frame_shift: int) -> int:
    if num_samples < frame_len:
        return 0
    return 1 + (num_samples - frame_len) // frame_shift


def fbank(audio: AudioBuffer, cfg: FrontendConfig) -> FeatureMatrix:
    """Log mel-filterbank energies of Hamming-windowed frames."""
    frame_len = round(audio.sample_rate * cfg.frame_length_ms / 1000)
    frame_shift = round(audio.sample_rate * cfg.frame_shift_ms / 1000)
    n = frame_count(audio.samples.size, frame_len, frame_shift)
    if n < 1:
        raise InputError(
            f"audio of {audio.samples.size} samples is shorter than one "
            f"{frame_len}-sample frame")
    stride = audio.samples.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        audio.samples, shape=(n, frame_len),
        strides=(frame_shift * stride, stride), writeable=False)
    windowed = frames * np.hamming(frame_len)
    n_fft = 512
    while n_fft < frame_len:
        n_fft *= 2
    power = np.abs(np.fft.rfft(windowed, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, audio.sample_rate)
    energies = power @ fb.T
    logmel = np.log(np.maximum(energies, LOG_FLOOR))
    return FeatureMatrix(logmel, cfg.frame_length_ms, cfg.frame_shift_ms)


def cmvn(feats: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance, per-dimension mean/variance normalization.

    Population variance, floored at 1e-8 so constant dimensions normalize
    to zero instead of raising.
    """
    if feats.num_frames < 2:
        raise InputError(f"cmvn needs at least 2 frames, got {feats.num_frames}")
    m = feats.frames.mean(axis=0)
    var = feats.frames.var(axis=0)
    out = (feats.frames - m) / np.sqrt(np.maximum(var, CMVN_VAR_FLOOR))
    return FeatureMatrix(out, feats.frame_length_ms, feats.frame_shift_ms)


def stack_downsample(feats: FeatureMatrix, m: int, n_ds: int) -> FeatureMatrix:
    """Concatenate ``m`` consecutive frames starting at every ``n_ds``-th frame.

    Window positions past the end repeat the final frame, so the output is
    always ceil(T / n_ds) frames of m*D dims and a pure rearrangement of
    input cells.
    """
    if m < 1 or n_ds < 1:
        raise InputError(f"stack/downsample factors must be >= 1, got {m}/{n_ds}")
    t = feats.num_frames
    out_t = -(-t // n_ds)
    idx = np.minimum(np.arange(out_t)[:, None] * n_ds + np.arange(m)[None, :], t - 1)
    out = feats.frames[idx].reshape(out_t, m * feats.feature_dim)
    return FeatureMatrix(out,
                         feats.frame_length_ms + (m - 1) * feats.frame_shift_ms,
                         feats.frame_shift_ms * n_ds)


def extract_features(audio: AudioBuffer, cfg: FrontendConfig) -> FeatureMatrix:
    """fbank + optional CMVN; stacking happens model-side."""
    feats = fbank(audio, cfg)
    if cfg.cmvn:
        feats = cmvn(feats)
    return feats


# ---------------------------------------------------------------------------
# Feature files: "FEAT" | version u16 | T u64 | D u64 | shift_ms u16 | f32 LE
# ---------------------------------------------------------------------------

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1


def save_features(path, feats: FeatureMatrix) -> None:
    data = np.ascontiguousarray(feats.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEAT_MAGIC)
        fh.write(struct.pack("<HQQH", FEAT_VERSION, data.shape[0], data.shape[1],
                             feats.frame_shift_ms))
        fh.write(data.tobytes())


def load_features(path) -> FeatureMatrix:
    if not os.path.exists(path):
        raise InputError(f"feature file not found: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FEAT_MAGIC:
            raise InputError(f"{path}: bad feature-file magic {magic!r}")
        version, t, d, shift = struct.unpack("<HQQH", fh.read(20))
        if version != FEAT_VERSION:
            raise InputError(f"{path}: unsupported feature-file version {version}")
        payload = fh.read(4 * t * d)
    if len(payload) != 4 * t * d:
        raise InputError(f"{path}: truncated feature payload")
    frames = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, d)
    return FeatureMatrix(frames, frame_shift_ms=shift)


# ---------------------------------------------------------------------------
# Manifests: TSV of (utt_id, path, label, duration_seconds)
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    utt_id: str
    path: str
    label: str
    duration: float


def read_manifest(path) -> list[ManifestEntry]:
    if not os.path.exists(path):
        raise InputError(f"manifest not found: {path}")
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise InputError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
            try:
                duration = float(parts[3])
            except ValueError:
                raise InputError(
                    f"{path}:{lineno}: bad duration {parts[3]!r}") from None
            entries.append(ManifestEntry(parts[0], parts[1], parts[2], duration))
    if not entries:
        raise InputError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(f"{e.utt_id}\t{e.path}\t{e.label}\t{e.duration:.3f}\n")
    os.replace(tmp, path)
