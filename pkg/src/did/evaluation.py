"""Scoring currency and reporting: score matrices, score-level fusion,
duration-bucketed accuracy with confusion matrices, the attention/convolution
operation-count model, and a wall-clock RTF benchmark of downsampling.

Buckets: short is duration < 5 s, medium is 5 s <= duration <= 20 s
(both boundaries inclusive), long is duration > 20 s.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ContractError, InputError

ROW_SUM_TOL = 1e-6
BUCKETS = ("short", "medium", "long")


@dataclass
class ScoreMatrix:
    """Per-utterance post-softmax class posteriors with durations/labels."""

    utt_ids: list[str]
    scores: np.ndarray          # U x C, rows sum to 1
    durations: np.ndarray       # seconds, > 0
    labels: np.ndarray | None   # int class indices, or None when unscored
    class_names: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.durations = np.asarray(self.durations, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
        u, c = self.scores.shape
        if len(self.utt_ids) != u or self.durations.shape != (u,):
            raise InputError("score matrix fields disagree on utterance count")
        if len(self.class_names) != c:
            raise InputError(f"{c} score columns but {len(self.class_names)} class names")
        if len(set(self.utt_ids)) != u:
            raise InputError("duplicate utterance ids in score matrix")
        if (self.durations <= 0).any():
            raise InputError("durations must be positive")
        bad = np.abs(self.scores.sum(axis=1) - 1.0) > ROW_SUM_TOL
        if bad.any():
            raise InputError(
                f"score rows must sum to 1 within {ROW_SUM_TOL}: first bad row "
                f"{self.utt_ids[int(np.argmax(bad))]!r}")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]


def bucket_of(duration: float) -> str:
    if duration < 5.0:
        return "short"
    if duration <= 20.0:
        return "medium"
    return "long"


def fuse(a: ScoreMatrix, b: ScoreMatrix) -> ScoreMatrix:
    """Elementwise mean of rows aligned by utterance id."""
    if a.num_classes != b.num_classes:
        raise AlignmentError(
            f"class count mismatch: {a.num_classes} vs {b.num_classes}")
    if set(a.utt_ids) != set(b.utt_ids):
        diff = sorted(set(a.utt_ids) ^ set(b.utt_ids))
        raise AlignmentError(f"utterance sets differ; symmetric difference: {diff}")
    index_b = {u: i for i, u in enumerate(b.utt_ids)}
    order = np.array([index_b[u] for u in a.utt_ids])
    fused = (a.scores + b.scores[order]) / 2.0
    labels = a.labels if a.labels is not None else (
        b.labels[order] if b.labels is not None else None)
    if a.labels is not None and b.labels is not None and \
            not np.array_equal(a.labels, b.labels[order]):
        raise AlignmentError("labels disagree between the two score files")
    return ScoreMatrix(list(a.utt_ids), fused, a.durations.copy(), labels,
                       list(a.class_names))


@dataclass
class EvalReport:
    overall: float
    buckets: dict            # name -> {"count": int, "accuracy": float}
    per_class: list          # [{"class": str, "count": int, "accuracy": float}]
    confusion: np.ndarray    # C x C row-normalized percentages (rows = truth)
    class_names: list[str]

    def to_json(self) -> str:
        payload = {
            "overall": self.overall,
            "buckets": self.buckets,
            "per_class": self.per_class,
            "confusion": [[round(v, 4) for v in row] for row in self.confusion.tolist()],
            "classes": self.class_names,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = ["Accuracy by duration"]
        header = f"{'bucket':<10}{'count':>8}{'accuracy':>12}"
        lines.append(header)
        lines.append("-" * len(header))
        for name in BUCKETS:
            b = self.buckets[name]
            acc = f"{100 * b['accuracy']:.2f}%" if b["count"] else "-"
            lines.append(f"{name:<10}{b['count']:>8}{acc:>12}")
        total = sum(self.buckets[n]["count"] for n in BUCKETS)
        lines.append(f"{'overall':<10}{total:>8}{100 * self.overall:>11.2f}%")
        lines.append("")
        lines.append("Per-class accuracy and confusion (% of true-class rows)")
        name_w = max(6, max(len(c) for c in self.class_names) + 1)
        head = f"{'class':<{name_w}}{'count':>7}{'acc':>9}  " + \
               " ".join(f"{c:>8}" for c in self.class_names)
        lines.append(head)
        lines.append("-" * len(head))
        for i, entry in enumerate(self.per_class):
            acc = f"{100 * entry['accuracy']:.2f}%" if entry["count"] else "-"
            row = " ".join(f"{v:>8.2f}" for v in self.confusion[i])
            lines.append(f"{entry['class']:<{name_w}}{entry['count']:>7}{acc:>9}  {row}")
        return "\n".join(lines) + "\n"


def evaluate(scores: ScoreMatrix) -> EvalReport:
    """Argmax decisions (ties to the lowest class index) tallied overall,
    per duration bucket, and per class."""
    if scores.labels is None:
        raise ContractError("evaluate needs labels on the score matrix")
    preds = np.argmax(scores.scores, axis=1)  # first max wins ties
    truth = scores.labels
    c = scores.num_classes
    correct = preds == truth

    buckets = {}
    for name in BUCKETS:
        mask = np.array([bucket_of(d) == name for d in scores.durations])
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else 0.0
        buckets[name] = {"count": count, "accuracy": acc}

    per_class = []
    confusion = np.zeros((c, c))
    for k in range(c):
        mask = truth == k
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else 0.0
        per_class.append({"class": scores.class_names[k], "count": count,
                          "accuracy": acc})
        if count:
            row = np.bincount(preds[mask], minlength=c)
            confusion[k] = 100.0 * row / count

    return EvalReport(overall=float(correct.mean()), buckets=buckets,
                      per_class=per_class, confusion=confusion,
                      class_names=list(scores.class_names))


# ---------------------------------------------------------------------------
# Score files: "#classes:" header, then utt_id, duration, label|-, scores
# ---------------------------------------------------------------------------

def save_scores(path, scores: ScoreMatrix) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("#classes: " + ",".join(scores.class_names) + "\n")
        for i, utt in enumerate(scores.utt_ids):
            label = (scores.class_names[scores.labels[i]]
                     if scores.labels is not None else "-")
            row = "\t".join(f"{v:.8f}" for v in scores.scores[i])
            fh.write(f"{utt}\t{scores.durations[i]:.3f}\t{label}\t{row}\n")
    os.replace(tmp, path)


def load_scores(path) -> ScoreMatrix:
    if not os.path.exists(path):
        raise InputError(f"score file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith("#classes: "):
            raise InputError(f"{path}: missing '#classes:' header")
        class_names = header[len("#classes: "):].split(",")
        utt_ids, rows, durations, labels = [], [], [], []
        any_label = False
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3 + len(class_names):
                raise InputError(
                    f"{path}:{lineno}: expected {3 + len(class_names)} fields, "
                    f"got {len(parts)}")
            utt_ids.append(parts[0])
            durations.append(float(parts[1]))
            if parts[2] == "-":
                labels.append(-1)
            else:
                if parts[2] not in class_names:
                    raise InputError(f"{path}:{lineno}: unknown label {parts[2]!r}")
                labels.append(class_names.index(parts[2]))
                any_label = True
            rows.append([float(v) for v in parts[3:]])
    if not utt_ids:
        raise InputError(f"{path}: no score rows")
    label_arr = np.array(labels) if any_label else None
    if label_arr is not None and (label_arr < 0).any():
        raise InputError(f"{path}: mixture of labeled and unlabeled rows")
    return ScoreMatrix(utt_ids, np.array(rows), np.array(durations), label_arr,
                       class_names)


# ---------------------------------------------------------------------------
# Complexity model (leading-term operation counts) and RTF benchmark
# ---------------------------------------------------------------------------

@dataclass
class ComplexityParams:
    n: int  # sequence length
    d: int  # representation dimension
    k: int = 1  # convolution kernel size

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.k < 1:
            raise ContractError(f"complexity params must be positive, got {self}")


def op_count(layer_type: str, p: ComplexityParams) -> int:
    """Leading-term op count per layer: n^2*d for self-attention,
    k*n*d^2 for convolution."""
    kind = layer_type.lower().replace("_", "-")
    if kind == "self-attention":
        return p.n * p.n * p.d
    if kind in ("convolution", "convolutional"):
        return p.k * p.n * p.d * p.d
    raise ContractError(f"unknown layer type {layer_type!r}")


def measure_rtf(model, frontend_cfg, audio, with_downsampling: bool,
                repeats: int = 5) -> dict:
    """Median wall time of front-end + forward over `repeats` runs."""
    from .features import extract_features, stack_downsample

    times = []
    for _ in range(repeats):
        started = time.perf_counter()
        feats = extract_features(audio, frontend_cfg)
        if with_downsampling:
            feats = stack_downsample(feats, frontend_cfg.stack_factor,
                                     frontend_cfg.downsample_factor)
        model.forward(feats.frames)
        times.append(time.perf_counter() - started)
    wall = float(np.median(times))
    return {"wall_seconds": wall, "rtf": wall / audio.duration}


def rtf_benchmark(transformer_cfg, frontend_cfg, utterance_seconds: float,
                  repeats: int = 5, seed: int = 0) -> dict:
    """Time the pipeline with downsampling on vs off on one synthetic input.

    The "off" mode feeds unstacked frames, so its model takes n_mels-dim
    inputs; weights are freshly initialized in both modes (timing only).
    """
    from dataclasses import replace

    from .features import AudioBuffer
    from .models import TransformerConfig, TransformerModel

    rng = np.random.default_rng(seed)
    sr = 16000
    audio = AudioBuffer(rng.uniform(-0.5, 0.5, size=round(utterance_seconds * sr)), sr)

    on_cfg = replace(transformer_cfg,
                     input_dim=frontend_cfg.n_mels * frontend_cfg.stack_factor)
    off_cfg = replace(transformer_cfg, input_dim=frontend_cfg.n_mels)
    on = measure_rtf(TransformerModel(on_cfg, rng), frontend_cfg, audio,
                     with_downsampling=True, repeats=repeats)
    off = measure_rtf(TransformerModel(off_cfg, rng), frontend_cfg, audio,
                      with_downsampling=False, repeats=repeats)
    return {
        "utterance_seconds": utterance_seconds,
        "repeats": repeats,
        "downsampling_on": on,
        "downsampling_off": off,
        "speedup": off["wall_seconds"] / on["wall_seconds"],
    }
