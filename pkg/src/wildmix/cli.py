"""Command-line entry point: ``wildmix <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import gradsuite
from .audio_io import CorpusSpec, gen_synthetic_corpus, load_corpus_dir
from .errors import WildmixError
from .forge import SubdatasetId, build_subdataset, scan_policy, write_subdataset
from .stt import ABLATIONS, ABLATION_VARIANTS
from .train import (
    Checkpoint,
    TrainConfig,
    ablate,
    desk_profile,
    evaluate,
    format_table,
    load_set,
    load_subdataset_dir,
    make_manifest,
    paper_profile,
    separate,
    train,
)

log = logging.getLogger("wildmix")


def _corpus(args, sample_rate: int, length: float):
    if args.corpus:
        return load_corpus_dir(args.corpus)
    spec = CorpusSpec(n_classes=args.classes, n_per_class=args.per_class,
                      fold_sizes=tuple(args.fold_sizes), duration_range=tuple(args.durations),
                      sample_rate=sample_rate,
                      mixture_length=length)
    return gen_synthetic_corpus(spec, args.corpus_seed)


def _config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.load(args.config)
    elif getattr(args, "profile", "desk") == "paper":
        cfg = paper_profile()
    else:
        cfg = desk_profile()
    changes = {"seed": args.seed, "deterministic": args.deterministic or cfg.deterministic}
    for name in ("lr", "batch_size", "max_steps", "eval_every"):
        value = getattr(args, name, None)
        if value is not None:
            changes[name] = value
    stt = {}
    if getattr(args, "ablation", None):
        stt["ablation"] = args.ablation
    if getattr(args, "dropout", None) is not None:
        stt["dropout"] = args.dropout
    if stt:
        changes["stt"] = cfg.stt.replace(**stt).to_dict()
    return cfg.replace(**changes)


def cmd_synth(args) -> int:
    sid = SubdatasetId(args.policy, args.s, args.fold)
    corpus = _corpus(args, args.sample_rate, args.length)
    manifest, records = build_subdataset(corpus, sid, args.count, args.seed, args.length,
                                         args.epsilon, args.truncate)
    bad = scan_policy(manifest)
    if bad:
        log.error("policy violations in records %s", bad[:10])
        return 1
    base = write_subdataset(args.out, manifest, records)
    print(json.dumps({"path": str(base), "records": len(manifest),
                      "clamped": sum(r.clamp_count for r in manifest.records)}))
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg.sample_rate, cfg.duration)

    def report(step, result):
        print(json.dumps({"step": step, "val_loss": result.loss, "baseline": result.baseline}),
              flush=True)

    best, runlog = train(cfg, corpus, out_dir=args.out, on_eval=report)
    print(json.dumps({"checkpoint": str(Path(args.out) / "best.ckpt"), "step": best.step,
                      "val_loss": best.val_loss}))
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    cfg = ckpt.train
    if args.data:
        data = load_subdataset_dir(args.data, cfg.stft_params, cfg.sample_rate)
    else:
        cfg = cfg.replace(seed=args.seed)
        corpus = _corpus(args, cfg.sample_rate, cfg.duration)
        data = load_set(cfg, corpus, make_manifest(cfg, corpus, args.fold))
    result = evaluate(ckpt, data)
    print(json.dumps({"loss": result.loss, "baseline": result.baseline, "count": result.count}))
    return 0


def cmd_separate(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    for path in separate(ckpt, args.input, args.out, args.s):
        print(path)
    return 0


def cmd_gradcheck(args) -> int:
    model_seeds = gradsuite.smooth_seeds(args.model_seeds, start=args.seed)
    ok = True
    results = gradsuite.run_suite(range(args.seed, args.seed + args.op_seeds), model_seeds,
                                  args.coords)
    for r in results:
        ok &= r.passed
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4} {r.name:32} {r.max_rel_error:.3e} (tol {r.tolerance:.0e})")
    return 0 if ok else 1


def cmd_ablate(args) -> int:
    cfg = _config(args)
    corpus = _corpus(args, cfg.sample_rate, cfg.duration)
    train_set = load_set(cfg, corpus, make_manifest(cfg, corpus, "tr"))
    val_set = load_set(cfg, corpus, make_manifest(cfg, corpus, "vl"))
    rows = ablate(cfg, train_set, val_set, args.variants, args.steps)
    print(format_table(rows))
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wildmix", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--deterministic", action="store_true",
                        help="drop wall-clock fields so repeated runs log identically")

    corpus = argparse.ArgumentParser(add_help=False)
    corpus.add_argument("--corpus", help="corpus directory <class_id>/<fold>/*.wav")
    corpus.add_argument("--corpus-seed", type=int, default=0)
    corpus.add_argument("--classes", type=int, default=25)
    corpus.add_argument("--per-class", type=int, default=60)
    corpus.add_argument("--fold-sizes", type=int, nargs=3, default=(40, 10, 10))
    corpus.add_argument("--durations", type=float, nargs=2, default=(0.25, 1.0),
                        metavar=("MIN", "MAX"), help="clip duration range in seconds")

    run = argparse.ArgumentParser(add_help=False)
    run.add_argument("--config", help="JSON training config")
    run.add_argument("--profile", choices=("desk", "paper"), default="desk")
    run.add_argument("--lr", type=float)
    run.add_argument("--batch-size", type=int)
    run.add_argument("--max-steps", type=int)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--dropout", type=float)

    p = sub.add_parser("synth", parents=[common, corpus], help="build one subdataset on disk")
    p.add_argument("--policy", choices=("Interclass", "Intraclass", "Hybrid"), default="Hybrid")
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--fold", choices=("tr", "vl", "te"), default="tr")
    p.add_argument("--count", type=int)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--length", type=float, default=1.0)
    p.add_argument("--epsilon", type=float, default=0.05)
    p.add_argument("--truncate", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, corpus, run], help="train an STT")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, corpus], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="subdataset directory written by synth")
    p.add_argument("--fold", choices=("tr", "vl", "te"), default="te")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("separate", parents=[common], help="separate a wav file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--s", type=int)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--op-seeds", type=int, default=3)
    p.add_argument("--model-seeds", type=int, default=1)
    p.add_argument("--coords", type=int, default=10, help="coordinates sampled per model tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common, corpus, run], help="train the ablation variants")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS, default=list(ABLATION_VARIANTS))
    p.add_argument("--out", help="write rows as JSON")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WildmixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
