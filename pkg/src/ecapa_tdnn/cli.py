"""Command-line entry point: ``ecapa-tdnn <subcommand>``.

Subcommands: synth, train, extract, score, eval, paramcount, gradcheck, ablate.
Every stage reads the previous stage's files; failures exit non-zero with a
one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import features as ft
from . import gradcheck as gc
from . import scoring
from . import synth
from .archive import load_archive, save_archive
from .config import RunConfig, finish_manifest, run_manifest
from .model import VARIANTS, ECAPA, ModelConfig, build, load_checkpoint, param_table, save_checkpoint
from .train import classification_accuracy, fit

log = logging.getLogger("ecapa_tdnn")

EMBEDDINGS_KIND = "ecapa-embeddings"


# ---------------------------------------------------------------------------
# stages

def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def wav_features(path) -> np.ndarray:
    samples, rate = ft.read_wav(path)
    return ft.mfcc(samples, rate)


def load_training_corpus(corpus_dir, workers: int = 1):
    """Features and integer labels for ``train.scp``; returns (corpus, speaker list)."""
    corpus_dir = Path(corpus_dir)
    utt2spk = synth.read_utt2spk(corpus_dir / "utt2spk")
    entries = synth.read_scp(corpus_dir / "train.scp")
    speakers = sorted({utt2spk[u] for u, _ in entries})
    index = {s: i for i, s in enumerate(speakers)}
    feats = _map(lambda e: wav_features(e[1]), entries, workers)
    return [(f, index[utt2spk[u]]) for f, (u, _) in zip(feats, entries)], speakers


def train_run(cfg: RunConfig, corpus_dir, out_dir, workers: int = 1) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = run_manifest(cfg.to_dict(), {"base": cfg.seed})
    corpus, speakers = load_training_corpus(corpus_dir, workers)
    model = build(cfg.model_config(), len(speakers), seed=cfg.seed)
    tcfg = cfg.train_config()
    result = fit(model, corpus, tcfg, seed=cfg.seed, checkpoint_dir=out_dir / "checkpoints")
    result.write_csv(out_dir / "loss_trace.csv")
    acc = classification_accuracy(model, corpus)
    save_checkpoint(model, out_dir / "checkpoint", {"speakers": speakers, "run_manifest": manifest})
    report = {"train_accuracy": acc, "final_loss": result.trace[-1]["loss"], "iterations": tcfg.iterations,
              "num_speakers": len(speakers), "num_utterances": len(corpus)}
    (out_dir / "train_report.json").write_text(json.dumps(report, indent=2))
    finish_manifest(manifest, out_dir)
    return report


def extract_embeddings(model: ECAPA, entries, workers: int = 1) -> dict[str, np.ndarray]:
    def one(entry):
        return entry[0], model.embed(ft.cms(wav_features(entry[1])))
    return dict(_map(one, entries, workers))


def extract_run(checkpoint, wav_list, out_dir, workers: int = 1) -> Path:
    model = load_checkpoint(checkpoint)
    entries = synth.read_scp(wav_list)
    manifest = run_manifest({"checkpoint": str(checkpoint), "wav_list": str(wav_list)}, {})
    embs = extract_embeddings(model, entries, workers)
    finish_manifest(manifest)
    return save_archive(out_dir, embs, {"run_manifest": manifest, "embed_dim": model.config.embed_dim},
                        kind=EMBEDDINGS_KIND)


def cohort_from_archive(archive, utt2spk_path, top_n: int = 1000, selection: str = "top_n") -> scoring.Cohort:
    embs, _ = load_archive(archive, kind=EMBEDDINGS_KIND)
    utt2spk = synth.read_utt2spk(utt2spk_path)
    grouped: dict[str, list] = {}
    for u, e in embs.items():
        if u not in utt2spk:
            raise KeyError(f"cohort utterance {u!r} has no speaker in {utt2spk_path}")
        grouped.setdefault(utt2spk[u], []).append(e)
    return scoring.build_cohort({s: np.stack(v) for s, v in sorted(grouped.items())}, top_n, selection)


def score_run(embeddings, trials_path, out_path, cohort: scoring.Cohort | None = None) -> Path:
    embs, _ = load_archive(embeddings, kind=EMBEDDINGS_KIND)
    rows = scoring.score_trials(embs, scoring.read_trials(trials_path), cohort)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    scoring.write_scores(out_path, rows)
    manifest = run_manifest({"embeddings": str(embeddings), "trials": str(trials_path),
                             "cohort_size": None if cohort is None else len(cohort.vectors),
                             "top_n": None if cohort is None else cohort.n}, {})
    Path(str(out_path) + ".manifest.json").write_text(json.dumps(finish_manifest(manifest), indent=2))
    return out_path


def metrics(scores, labels, dcf: scoring.DCFConfig = scoring.DCFConfig()) -> dict:
    rate, thr = scoring.eer(scores, labels, return_threshold=True)
    cost, cthr = scoring.min_dcf(scores, labels, dcf, return_threshold=True)
    return {"eer_percent": 100.0 * rate, "eer_threshold": thr, "min_dcf": cost, "min_dcf_threshold": cthr}


def eval_report(scores_path, trials_path) -> dict:
    scores = scoring.read_scores(scores_path)
    trials = scoring.read_trials(trials_path)
    missing = [(e, t) for _, e, t in trials if (e, t) not in scores]
    if missing:
        raise KeyError(f"{len(missing)} trials have no score, e.g. {missing[0]}")
    labels = [lab for lab, _, _ in trials]
    raw = [scores[(e, t)][0] for _, e, t in trials]
    norm = [scores[(e, t)][1] for _, e, t in trials]
    return {"targets": int(sum(labels)), "nontargets": len(labels) - int(sum(labels)),
            "raw": metrics(raw, labels), "normalized": metrics(norm, labels)}


def format_report(report: dict) -> str:
    lines = [f"{'Scoring':<18}{'EER(%)':>10}{'MinDCF':>10}"]
    for key, name in (("raw", "cosine"), ("normalized", "adaptive s-norm")):
        m = report[key]
        lines.append(f"{name:<18}{m['eer_percent']:>10.2f}{m['min_dcf']:>10.4f}")
    lines.append(f"trials: {report['targets']} target / {report['nontargets']} nontarget")
    return "\n".join(lines)


def paramcount_rows(config: ModelConfig, num_speakers: int = 1) -> list[tuple[str, int]]:
    return param_table(build(config, num_speakers, dtype=np.float32), "extractor")


def pipeline(cfg: RunConfig, corpus_dir, out_dir, workers: int = 1, top_n: int = 1000) -> dict:
    """train -> extract (train + test lists) -> score -> eval, all through files."""
    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    train_report = train_run(cfg, corpus_dir, out_dir / "train", workers)
    ckpt = out_dir / "train" / "checkpoint"
    extract_run(ckpt, corpus_dir / "test.scp", out_dir / "emb_test", workers)
    extract_run(ckpt, corpus_dir / "train.scp", out_dir / "emb_train", workers)
    cohort = cohort_from_archive(out_dir / "emb_train", corpus_dir / "utt2spk", top_n)
    score_run(out_dir / "emb_test", corpus_dir / "trials", out_dir / "scores.txt", cohort)
    report = eval_report(out_dir / "scores.txt", corpus_dir / "trials")
    report["train"] = train_report
    (out_dir / "metrics.json").write_text(json.dumps(report, indent=2))
    return report


# ---------------------------------------------------------------------------
# argument handling

def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in ("preset", "channels", "variant"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    overrides = {k: getattr(args, k, None) for k in ("iterations", "batch_size")}
    cfg.train = {**cfg.train, **{k: v for k, v in overrides.items() if v is not None}}
    return cfg


def cmd_synth(args) -> int:
    spec = synth.SynthCorpusSpec(num_speakers=args.speakers, utts_per_speaker=args.utts,
                                 heldout_per_speaker=args.heldout, duration=args.duration,
                                 snr_db=args.snr, seed=args.seed or 0)
    manifest = run_manifest(dataclasses.asdict(spec), {"base": spec.seed})
    out = synth.write_corpus(spec, _require_out(args), manifest)
    finish_manifest(manifest, out)
    print(f"wrote {spec.num_speakers * spec.utts_per_speaker} utterances to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    corpus = args.corpus or cfg.corpus
    if not corpus:
        raise ValueError("no corpus given (use --corpus or the config's 'corpus' key)")
    report = train_run(cfg, corpus, _require_out(args), args.workers)
    print(json.dumps(report))
    return 0


def cmd_extract(args) -> int:
    out = extract_run(args.checkpoint, args.wav_list, _require_out(args), args.workers)
    print(f"wrote embeddings to {out}")
    return 0


def cmd_score(args) -> int:
    cohort = None
    if args.cohort:
        if not args.utt2spk:
            raise ValueError("--cohort needs --utt2spk")
        cohort = cohort_from_archive(args.cohort, args.utt2spk, args.top_n, args.cohort_selection)
    out = score_run(args.embeddings, args.trials, _require_out(args), cohort)
    print(f"wrote scores to {out}")
    return 0


def cmd_eval(args) -> int:
    report = eval_report(args.scores, args.trials)
    print(format_report(report))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2))
    return 0


def cmd_paramcount(args) -> int:
    if args.preset is None and not args.config:
        args.preset = "reference"
    cfg = _run_config(args).model_config()
    rows = paramcount_rows(cfg)
    width = max(len(n) for n, _ in rows)
    for name, n in rows:
        print(f"{name:<{width}}  {n:>12,d}")
    print(f"{'total':<{width}}  {sum(n for _, n in rows):>12,d}")
    return 0


def cmd_gradcheck(args) -> int:
    variants = list(VARIANTS) if args.variant == "all" else [args.variant]
    reports = gc.layer_reports(seed=args.seed or 0, channels=args.channels, frames=args.frames)
    for v in variants:
        reports += [dataclasses.replace(r, layer=f"{v or 'default'}:{r.layer}")
                    for r in gc.model_reports(gc.tiny_config(args.channels, v), seed=args.seed or 0,
                                              frames=args.frames)]
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.layer:<48} max_rel_err={r.max_rel_error:.2e}"
              f"  probes={r.probed} kink_skips={r.skipped}")
    ok = all(r.passed for r in reports)
    print("gradcheck:", "all layers pass" if ok else "FAILED")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    out = Path(_require_out(args))
    variants = args.variants.split(",") if args.variants else ["default", *VARIANTS]
    rows = []
    for v in variants:
        cfg = _run_config(args)
        cfg.variant = None if v == "default" else v
        report = pipeline(cfg, args.corpus, out / v, args.workers)
        params = sum(n for _, n in paramcount_rows(cfg.model_config()))
        rows.append({"system": v, "params": params,
                     "eer_percent": report["raw"]["eer_percent"], "min_dcf": report["raw"]["min_dcf"],
                     "snorm_eer_percent": report["normalized"]["eer_percent"],
                     "snorm_min_dcf": report["normalized"]["min_dcf"]})
        log.info("ablation %s: %s", v, rows[-1])
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print((out / "ablation.csv").read_text(), end="")
    return 0


def _require_out(args):
    if not args.out:
        raise ValueError("this command needs --out")
    return args.out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--preset", choices=["desk", "reference"])
    model_opts.add_argument("--channels", type=int)
    model_opts.add_argument("--variant", choices=VARIANTS)

    parser = argparse.ArgumentParser(prog="ecapa-tdnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic-speaker corpus")
    p.add_argument("--speakers", type=int, default=32)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--heldout", type=int, default=4, help="held-out utterances per speaker (trials)")
    p.add_argument("--duration", type=float, default=3.0)
    p.add_argument("--snr", type=float, default=15.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, model_opts], help="train an embedding extractor")
    p.add_argument("--corpus")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="embed every WAV in a list")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--wav-list", required=True, help="lines 'utt_id path' or 'path'")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("score", parents=[common], help="cosine + adaptive s-norm trial scoring")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--cohort", help="embedding archive of cohort (training) utterances")
    p.add_argument("--utt2spk")
    p.add_argument("--top-n", type=int, default=1000)
    p.add_argument("--cohort-selection", choices=["top_n", "all"], default="top_n")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common], help="EER and MinDCF of a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("paramcount", parents=[common, model_opts], help="per-layer parameter table")
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient report")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--frames", type=int, default=12)
    p.add_argument("--variant", default=None, help="ablation variant, or 'all'")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common], help="train/evaluate every ablation variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variants", help="comma-separated subset, e.g. default,B1,C2")
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--channels", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - surfaced as a machine-readable line
        if args.verbose:
            log.exception("command failed")
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
