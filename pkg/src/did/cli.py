"""Command-line entry point: generate, featurize, train, score, fuse,
evaluate, benchmark, gradcheck.

Every command is deterministic under --seed; per-module generators derive
from it via counter-based streams. Errors print one machine-parseable line
``did: error [E<code>]: <message>`` and exit with the code.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .config import (
    STREAM_BENCHMARK,
    STREAM_MODEL_INIT,
    STREAM_TRAIN_SHUFFLE,
    default_config,
    derive_rng,
    dump_config,
    iter_keys,
    load_config,
)
from .errors import ConfigError, DidError, InputError, MissingFileError
from .evaluation import (
    ComplexityParams,
    ScoreMatrix,
    evaluate,
    fuse,
    load_scores,
    op_count,
    rtf_benchmark,
    save_scores,
)
from .features import (
    extract_features,
    load_features,
    read_manifest,
    read_wav,
    save_features,
    stack_downsample,
    write_manifest,
)
from .features import ManifestEntry
from .models import CnnModel, TransformerModel, load_model, save_checkpoint
from .synth import SynthSpec, generate
from .training import TrainConfig, fit, predict_scores

log = logging.getLogger("did")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("DID_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="sectioned key=value config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1,
                        help="per-utterance parallelism for featurize/score")
    parser.add_argument("--dump-config", default=None, metavar="PATH",
                        help="write the effective config and continue")
    for section, key in iter_keys():
        parser.add_argument(f"--{section}.{key}", dest=f"cfg::{section}.{key}",
                            default=None, metavar="V", help=argparse.SUPPRESS)


def _effective_config(args):
    overrides = {name.split("::", 1)[1]: value
                 for name, value in vars(args).items()
                 if name.startswith("cfg::") and value is not None}
    cfg = load_config(args.config, overrides)
    if args.dump_config:
        _atomic_write(args.dump_config, dump_config(cfg))
    return cfg


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _require(path, what: str):
    if not os.path.exists(path):
        raise MissingFileError(f"{what} not found: {path}")
    return path


def _label_indexer(entries):
    names = sorted({e.label for e in entries})
    index = {name: i for i, name in enumerate(names)}
    return names, index


def _load_corpus(manifest_path, model_kind: str, cfg, class_index=None):
    """Featurized manifest -> [(feats, label_idx)], applying stacking for
    the transformer. Feature files hold post-CMVN unstacked frames."""
    entries = read_manifest(_require(manifest_path, "manifest"))
    if class_index is None:
        _, class_index = _label_indexer(entries)
    corpus = []
    for e in entries:
        feats = load_features(_require(e.path, "feature file"))
        if model_kind == "transformer":
            feats = stack_downsample(feats, cfg.frontend.stack_factor,
                                     cfg.frontend.downsample_factor)
        if e.label not in class_index:
            raise InputError(f"{manifest_path}: label {e.label!r} not in the "
                             f"training label set")
        corpus.append((feats.frames, class_index[e.label]))
    return entries, corpus


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    _effective_config(args)
    spec = SynthSpec(
        num_classes=args.classes,
        utts_per_band={"train": args.train_utts, "dev": args.dev_utts,
                       "test": args.test_utts},
        lag_frames=args.lag_frames,
        seed=args.seed,
    )
    manifests = generate(spec, args.out, verify=not args.skip_checks)
    for split, path in manifests.items():
        log.info("wrote %s manifest: %s", split, path)
    print(json.dumps({"manifests": manifests}, indent=2, sort_keys=True))
    return 0


def cmd_featurize(args) -> int:
    cfg = _effective_config(args)
    entries = read_manifest(_require(args.manifest, "manifest"))
    os.makedirs(args.out_dir, exist_ok=True)

    def one(entry):
        feats = extract_features(read_wav(_require(entry.path, "wav file")),
                                 cfg.frontend)
        out_path = os.path.join(args.out_dir, f"{entry.utt_id}.feat")
        save_features(out_path, feats)
        return ManifestEntry(entry.utt_id, out_path, entry.label, entry.duration)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            out_entries = list(pool.map(one, entries))
    else:
        out_entries = [one(e) for e in entries]
    out_manifest = args.out_manifest or os.path.join(args.out_dir, "features.tsv")
    write_manifest(out_manifest, out_entries)
    log.info("featurized %d utterances -> %s", len(out_entries), out_manifest)
    print(out_manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _effective_config(args)
    train_entries = read_manifest(_require(args.train_manifest, "train manifest"))
    class_names, class_index = _label_indexer(train_entries)
    if args.model == "transformer":
        from dataclasses import replace
        model_cfg = replace(cfg.transformer, num_classes=len(class_names))
        model = TransformerModel(model_cfg, derive_rng(args.seed, STREAM_MODEL_INIT))
    else:
        from dataclasses import replace
        model_cfg = replace(cfg.cnn, num_classes=len(class_names))
        model = CnnModel(model_cfg, derive_rng(args.seed, STREAM_MODEL_INIT))
    _, train_corpus = _load_corpus(args.train_manifest, args.model, cfg, class_index)
    dev_corpus = None
    if args.dev_manifest:
        _, dev_corpus = _load_corpus(args.dev_manifest, args.model, cfg, class_index)
    os.makedirs(args.out_dir, exist_ok=True)
    history = fit(model, args.model, train_corpus, dev_corpus, cfg.train,
                  derive_rng(args.seed, STREAM_TRAIN_SHUFFLE),
                  out_dir=args.out_dir,
                  log_path=os.path.join(args.out_dir, "train.log"),
                  class_names=class_names)
    final = history[-1]
    log.info("trained %d epochs: final train_acc %.3f dev_acc %.3f",
             len(history), final["train_acc"], final["dev_acc"])
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_score(args) -> int:
    cfg = _effective_config(args)
    kind, model, class_names = load_model(_require(args.checkpoint, "checkpoint"))
    if class_names is None:
        raise InputError(f"{args.checkpoint}: checkpoint carries no class names")
    entries = read_manifest(_require(args.manifest, "manifest"))

    def one(entry):
        feats = load_features(_require(entry.path, "feature file"))
        if kind == "transformer":
            feats = stack_downsample(feats, cfg.frontend.stack_factor,
                                     cfg.frontend.downsample_factor)
        return predict_scores(model, feats.frames)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(one, entries))
    else:
        rows = [one(e) for e in entries]
    known = set(class_names)
    labels = [class_names.index(e.label) if e.label in known else -1
              for e in entries]
    label_arr = np.array(labels) if all(l >= 0 for l in labels) else None
    scores = ScoreMatrix([e.utt_id for e in entries], np.stack(rows),
                         np.array([e.duration for e in entries]),
                         label_arr, class_names)
    save_scores(args.out, scores)
    log.info("scored %d utterances -> %s", len(entries), args.out)
    print(args.out)
    return 0


def cmd_fuse(args) -> int:
    _effective_config(args)
    fused = fuse(load_scores(_require(args.score_file_a, "score file")),
                 load_scores(_require(args.score_file_b, "score file")))
    save_scores(args.out, fused)
    print(args.out)
    return 0


def cmd_evaluate(args) -> int:
    _effective_config(args)
    report = evaluate(load_scores(_require(args.scores, "score file")))
    if args.out_json:
        _atomic_write(args.out_json, report.to_json() + "\n")
    if args.out_text:
        _atomic_write(args.out_text, report.to_text())
    print(report.to_text())
    return 0


def cmd_benchmark(args) -> int:
    cfg = _effective_config(args)
    transformer_cfg = cfg.transformer
    if args.checkpoint:
        kind, model, _ = load_model(_require(args.checkpoint, "checkpoint"))
        if kind != "transformer":
            raise InputError("benchmark needs a transformer checkpoint")
        transformer_cfg = model.cfg
    duration = args.duration or cfg.eval.rtf_duration_seconds
    needed = int(duration * 100) + 16
    if transformer_cfg.max_len < needed:
        from dataclasses import replace
        transformer_cfg = replace(transformer_cfg, max_len=needed)
    report = rtf_benchmark(transformer_cfg, cfg.frontend, duration,
                           repeats=args.repeats or cfg.eval.rtf_repeats,
                           seed=derive_rng(args.seed, STREAM_BENCHMARK)
                           .integers(0, 2 ** 31))
    n = int(duration * 100)
    ds = cfg.frontend.downsample_factor
    report["attention_op_ratio"] = (
        op_count("self-attention", ComplexityParams(n, transformer_cfg.d_model))
        / op_count("self-attention",
                   ComplexityParams(-(-n // ds), transformer_cfg.d_model)))
    report["primary_mode"] = ("downsampling_on" if args.downsampling == "on"
                              else "downsampling_off")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    _effective_config(args)
    from .gradcheck import run_model_suite, run_op_suite
    results = run_op_suite() if args.scope == "ops" else run_model_suite()
    tolerance = 1e-6 if args.scope == "ops" else 1e-3
    failed = 0
    for name, err in results.items():
        ok = err <= tolerance
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name}: max_rel_err={err:.3e} "
              f"(tol {tolerance:.0e})")
    if failed:
        print(f"did: gradcheck: {failed} of {len(results)} checks failed",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="did",
        description="Dialect identification pipeline: synthetic corpus, fbank "
                    "front-end, transformer/CNN classifiers, fusion, evaluation.")
    parser.add_argument("--version", action="version", version=f"did {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic labeled corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train-utts", type=int, default=4,
                   help="utterances per class per duration band")
    p.add_argument("--dev-utts", type=int, default=2)
    p.add_argument("--test-utts", type=int, default=3)
    p.add_argument("--lag-frames", type=int, default=50)
    p.add_argument("--skip-checks", action="store_true",
                   help="skip the post-generation local-statistics check")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("featurize", help="extract normalized fbank features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--out-manifest", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--model", choices=("transformer", "cnn"), required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", default=None)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="write softmax scores for a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fuse", help="average two aligned score files")
    p.add_argument("score_file_a")
    p.add_argument("score_file_b")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate", help="accuracy/confusion report from scores")
    p.add_argument("--scores", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-text", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="RTF with downsampling on vs off")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds")
    p.add_argument("--downsampling", choices=("on", "off"), default="on")
    p.add_argument("--repeats", type=int, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=("ops", "model"), default="ops")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DidError as exc:
        print(f"did: error [E{exc.exit_code:02d}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"did: error [E03]: missing file: {exc}", file=sys.stderr)
        return MissingFileError.exit_code


if __name__ == "__main__":
    sys.exit(main())
