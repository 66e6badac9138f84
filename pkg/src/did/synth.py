"""Synthetic labeled corpus whose classes differ only in long-range temporal
structure.

Each class signature assigns, per carrier tone, a repeat-or-flip relation
between amplitude states ``lag_frames`` apart: the audio is a sum of
constant-frequency carriers whose per-block amplitude is high or low, the
block bit sequence is balanced and random over one lag period, and block j
copies (or inverts) block ``j - lag``. Marginal bit statistics are uniform
and exactly balanced per utterance for every class, so any window shorter
than the lag is distributed (nearly) identically across classes; only the
lag-L joint identifies the label. A class index c inverts carrier b iff
bit b of c is set.

Sinusoid carriers keep the construction analytically checkable: the package
ships a no-learning lag-correlation classifier (which must succeed) and a
window-limited nearest-class-mean classifier (which must stay near chance).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .features import (
    AudioBuffer,
    FrontendConfig,
    ManifestEntry,
    fbank,
    mel_to_hz,
    hz_to_mel,
    read_manifest,
    read_wav,
    write_manifest,
    write_wav,
)

SPLITS = ("train", "dev", "test")
TONE_AMP = 0.055
AMP_RATIO = math.sqrt(2.0)  # high/low amplitude, a 4x power contrast


@dataclass
class SynthSpec:
    """Corpus layout: ``utts_per_band`` maps each split to utterances per
    class per duration band, either one count for all bands or a per-band
    tuple (training skews short: short utterances give the most optimizer
    updates per second)."""

    num_classes: int = 4
    utts_per_band: dict = field(
        default_factory=lambda: {"train": (120, 6, 3), "dev": (8, 4, 4),
                                 "test": (12, 6, 6)})
    duration_bands: tuple = ((2.5, 4.5), (6.0, 10.0), (21.0, 24.0))
    sample_rate: int = 16000
    lag_frames: int = 50       # L, in 10 ms feature frames
    block_frames: int = 5      # constant-amplitude block length, in frames
    tones_per_band: int = 8    # comb size; combs interleave across the spectrum
    snr_db: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.lag_frames % self.block_frames != 0:
            raise ConfigError(
                f"lag_frames {self.lag_frames} must be a multiple of "
                f"block_frames {self.block_frames}")
        if self.tones_per_band < 1:
            raise ConfigError(
                f"tones_per_band must be >= 1, got {self.tones_per_band}")
        if set(self.utts_per_band) != set(SPLITS):
            raise ConfigError(f"utts_per_band must cover {SPLITS}")
        buckets = set()
        for lo, hi in self.duration_bands:
            if lo > hi or lo <= 0:
                raise ConfigError(f"bad duration band ({lo}, {hi})")
            buckets.add("short" if hi < 5 else ("long" if lo > 20 else "medium"))
        if buckets != {"short", "medium", "long"}:
            raise ConfigError("duration bands must cover short/medium/long buckets")

    def band_counts(self, split: str) -> tuple:
        value = self.utts_per_band[split]
        if isinstance(value, int):
            return tuple([value] * len(self.duration_bands))
        counts = tuple(value)
        if len(counts) != len(self.duration_bands):
            raise ConfigError(
                f"utts_per_band[{split!r}] needs one count per duration band")
        return counts

    @property
    def num_bands(self) -> int:
        return max(1, math.ceil(math.log2(self.num_classes)))

    @property
    def lag_blocks(self) -> int:
        return self.lag_frames // self.block_frames

    @property
    def duration_step(self) -> float:
        """Durations are multiples of one lag period, so utterances contain
        whole periods only and carry no partial-period imbalance."""
        return self.lag_frames * 0.010

    def band_tones(self, band: int) -> np.ndarray:
        """Carrier comb for one band: slots spaced uniformly on the mel
        scale from 500 Hz to 6500 Hz, interleaved between bands so the
        bands occupy disjoint filterbank bins."""
        slots = self.num_bands * self.tones_per_band
        mels = np.linspace(hz_to_mel(500.0), hz_to_mel(6500.0), slots)
        return mel_to_hz(mels[band::self.num_bands])

    def sample_duration(self, rng: np.random.Generator, band: int) -> float:
        lo, hi = self.duration_bands[band]
        k_lo = math.ceil(lo / self.duration_step - 1e-9)
        k_hi = math.floor(hi / self.duration_step + 1e-9)
        if k_lo > k_hi:
            raise ConfigError(
                f"duration band ({lo}, {hi}) contains no multiple of "
                f"{self.duration_step}s")
        return int(rng.integers(k_lo, k_hi + 1)) * self.duration_step


def _period_pattern(rng: np.random.Generator, length: int) -> np.ndarray:
    """Random balanced binary sequence: every utterance's high/low duty
    cycle is exactly 50% (whole periods only), so no class can leak its
    label through marginal level statistics."""
    ones = length // 2 + (int(rng.integers(0, 2)) if length % 2 else 0)
    bits = np.zeros(length, dtype=np.int64)
    bits[rng.permutation(length)[:ones]] = 1
    return bits


def synthesize_utterance(rng: np.random.Generator, duration_s: float,
                         class_idx: int, spec: SynthSpec) -> np.ndarray:
    sr = spec.sample_rate
    n = round(duration_s * sr)
    block_len = spec.block_frames * round(sr * 0.010)
    n_blocks = -(-n // block_len)
    amp_hi, amp_lo = TONE_AMP * AMP_RATIO, TONE_AMP / AMP_RATIO
    signal = np.zeros(n)
    t = np.arange(n) / sr
    for b in range(spec.num_bands):
        flip = (class_idx >> b) & 1
        head = min(spec.lag_blocks, n_blocks)
        bits = np.empty(n_blocks, dtype=np.int64)
        bits[:head] = _period_pattern(rng, head)
        for j in range(head, n_blocks):
            bits[j] = bits[j - spec.lag_blocks] ^ flip
        amp = np.repeat(np.where(bits == 1, amp_hi, amp_lo), block_len)[:n]
        # 20 ms raised-cosine smoothing of level changes keeps the AM
        # sidebands inside each carrier's own mel bin; hard steps would click
        # broadband energy into quiet bins at a rate that varies by utterance.
        ramp = np.hanning(round(sr * 0.020))
        ramp /= ramp.sum()
        amp = np.convolve(np.pad(amp, (len(ramp) // 2,), mode="edge"),
                          ramp, mode="same")[len(ramp) // 2:len(ramp) // 2 + n]
        carriers = np.zeros(n)
        for freq in spec.band_tones(b):
            carriers += np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2 * np.pi))
        signal += amp * carriers
    # E[amp^2]/2 per carrier with balanced high/low blocks
    p_signal = (spec.num_bands * spec.tones_per_band
                * (amp_hi ** 2 + amp_lo ** 2) / 4.0)
    noise_std = math.sqrt(p_signal / 10.0 ** (spec.snr_db / 10.0))
    signal += rng.normal(0.0, noise_std, size=n)
    return np.clip(signal, -0.999, 0.999)


def generate(spec: SynthSpec, out_dir, verify: bool = True) -> dict[str, str]:
    """Write WAVs plus one manifest per split; returns split -> manifest path.

    Every utterance gets its own counter-derived rng, so regeneration with
    the same spec is byte-identical file by file.
    """
    wav_dir = os.path.join(out_dir, "wav")
    os.makedirs(wav_dir, exist_ok=True)
    manifests = {}
    for si, split in enumerate(SPLITS):
        entries = []
        counts = spec.band_counts(split)
        for c in range(spec.num_classes):
            for bi in range(len(spec.duration_bands)):
                for u in range(counts[bi]):
                    rng = np.random.default_rng([spec.seed, si, c, bi, u])
                    duration = spec.sample_duration(rng, bi)
                    samples = synthesize_utterance(rng, duration, c, spec)
                    utt_id = f"{split}_c{c}_d{bi}_{u:03d}"
                    wav_path = os.path.join(wav_dir, f"{utt_id}.wav")
                    write_wav(wav_path, AudioBuffer(samples, spec.sample_rate))
                    entries.append(ManifestEntry(
                        utt_id, wav_path, f"class{c}",
                        samples.size / spec.sample_rate))
        entries.sort(key=lambda e: e.utt_id)
        manifest_path = os.path.join(out_dir, f"{split}.tsv")
        write_manifest(manifest_path, entries)
        manifests[split] = manifest_path
    if verify:
        check_local_statistics(manifests["train"], spec)
    return manifests


def check_local_statistics(manifest_path, spec: SynthSpec,
                           tolerance: float = 0.1) -> float:
    """Per-class mean fbank vectors must agree across classes (the label
    signal must not live in marginal statistics). Returns the worst
    pairwise deviation; raises if it exceeds ``tolerance``."""
    cfg = FrontendConfig(cmvn=False)
    sums, counts = {}, {}
    for entry in read_manifest(manifest_path):
        feats = fbank(read_wav(entry.path), cfg)
        sums[entry.label] = sums.get(entry.label, 0.0) + feats.frames.sum(axis=0)
        counts[entry.label] = counts.get(entry.label, 0) + feats.num_frames
    means = {label: sums[label] / counts[label] for label in sums}
    labels = sorted(means)
    worst = 0.0
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            worst = max(worst, float(np.max(np.abs(means[a] - means[b]))))
    if worst > tolerance:
        raise NumericError(
            f"class-mean fbank vectors differ by {worst:.3f} > {tolerance}; "
            "local statistics leak the label")
    return worst


# ---------------------------------------------------------------------------
# Analytic oracles over the generated corpus (no learning involved)
# ---------------------------------------------------------------------------

def tone_mel_bins(spec: SynthSpec, n_mels: int = 80, n_fft: int = 512) -> list:
    """Nearest mel-filter indices for each band's carrier comb."""
    edges = mel_to_hz(np.linspace(hz_to_mel(20.0),
                                  hz_to_mel(spec.sample_rate / 2.0), n_mels + 2))
    centers = edges[1:-1]
    return [sorted({int(np.argmin(np.abs(centers - f)))
                    for f in spec.band_tones(b)})
            for b in range(spec.num_bands)]


def classify_by_lag_correlation(frames: np.ndarray, spec: SynthSpec,
                                bins: list | None = None) -> int:
    """Sign of the lag-L autocorrelation of each band's comb-averaged
    log energy."""
    bins = bins if bins is not None else tone_mel_bins(spec)
    lag = spec.lag_frames
    if frames.shape[0] <= lag + 1:
        raise InputError(
            f"utterance of {frames.shape[0]} frames too short for lag {lag}")
    label = 0
    for b, band_bins in enumerate(bins):
        energy = frames[:, band_bins].mean(axis=1)
        x, y = energy[:-lag], energy[lag:]
        r = float(np.corrcoef(x, y)[0, 1])
        if r < 0.0:
            label |= 1 << b
    return label


def lag_classifier_accuracy(manifest_path, spec: SynthSpec) -> float:
    cfg = FrontendConfig(cmvn=False)
    bins = tone_mel_bins(spec)
    entries = read_manifest(manifest_path)
    hits = 0
    for entry in entries:
        frames = fbank(read_wav(entry.path), cfg).frames
        predicted = classify_by_lag_correlation(frames, spec, bins)
        hits += int(f"class{predicted}" == entry.label)
    return hits / len(entries)


def _window_descriptor(frames: np.ndarray, window: int) -> np.ndarray:
    t = frames.shape[0] // window * window
    if t == 0:
        raise InputError(f"utterance shorter than the {window}-frame window")
    chunks = frames[:t].reshape(-1, window * frames.shape[1])
    return chunks.mean(axis=0)


def window_limited_accuracy(train_manifest, test_manifest, spec: SynthSpec,
                            window: int = 13) -> float:
    """Nearest-class-mean over descriptors that only see `window`-frame
    contexts; near chance when the label lives beyond the window."""
    cfg = FrontendConfig(cmvn=False)

    def load(manifest):
        pairs = []
        for entry in read_manifest(manifest):
            frames = fbank(read_wav(entry.path), cfg).frames
            pairs.append((_window_descriptor(frames, window), entry.label))
        return pairs

    train = load(train_manifest)
    labels = sorted({label for _, label in train})
    means = {label: np.mean([d for d, l in train if l == label], axis=0)
             for label in labels}
    hits, total = 0, 0
    for descriptor, label in load(test_manifest):
        distances = {l: float(np.linalg.norm(descriptor - m))
                     for l, m in means.items()}
        predicted = min(sorted(distances), key=distances.get)
        hits += int(predicted == label)
        total += 1
    return hits / total
