"""Command-line entry point: ``poftlab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import data as D
from .harness.config import ConfigError, RunConfig, apply_overrides, load_config, parse_override_args


def _add_set(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a setting, e.g. optimizer.lr=1e-3 (repeatable)")


def cmd_synth(args) -> int:
    corpus = D.generate_synthetic_corpus(args.tasks, args.size + args.eval_size, args.seed)
    if args.eval_size:
        train, held = D.split_corpus(corpus, args.eval_size, args.seed)
        D.save_jsonl(held, args.eval_out or Path(args.out).with_suffix(".eval.jsonl"))
        corpus = train
    D.save_jsonl(corpus, args.out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return 0


def _parse_rates(text: str | None) -> dict | None:
    if not text:
        return None
    ins, dele, sub = (float(v) for v in text.split(","))
    return {"ins": ins, "del": dele, "sub": sub}


def cmd_noise(args) -> int:
    clean = D.load_jsonl(args.input)
    n = args.count if args.count is not None else int(round(args.fraction * len(clean)))
    noise = D.make_noise(clean, n, args.mismatch, _parse_rates(args.rates), args.seed)
    out = noise if args.noise_only else D.blend(clean, noise, args.seed + 1)
    D.save_jsonl(out, args.out)
    print(f"wrote {len(out)} examples ({len(noise)} noise) to {args.out}")
    return 0


def cmd_filter(args) -> int:
    from .scores import ScoreCache, aggregate_scores

    corpus = D.load_jsonl(args.input)
    if args.external:
        aggs = D.external_aggregates(corpus, args.external)
    else:
        cache = ScoreCache.load(args.scores)
        models = args.models.split(",") if args.models else [m for m in cache.metadata["models"]]
        aggs = aggregate_scores(cache, models, args.strategy, corpus.ids())
    kept = D.filter_by_percentile(corpus, aggs, args.keep)
    D.save_jsonl(kept, args.out)
    if args.audit:
        D.write_filter_audit(corpus, aggs, kept, args.audit)
    print(f"kept {len(kept)} of {len(corpus)} examples")
    return 0


def cmd_regen(args) -> int:
    from .model import load_model

    teacher = load_model(args.model, frozen=True)
    out = D.regenerate_responses(teacher, D.load_jsonl(args.input), args.temperature, args.max_tokens, args.seed)
    D.save_jsonl(out, args.out)
    print(f"wrote {len(out)} regenerated examples to {args.out}")
    return 0


def cmd_score(args) -> int:
    from .model import load_model
    from .scores import aggregate_scores, score_dataset, score_histogram, write_histogram_csv

    models = [load_model(m, frozen=True) for m in args.models]
    corpus = D.load_jsonl(args.input)
    cache = score_dataset(models, corpus, args.batch_size, path=args.cache)
    print(f"cache {args.cache}: {len(cache)} entries")
    if args.histogram:
        ids = [m.name for m in models]
        aggs = aggregate_scores(cache, ids, args.strategy, corpus.ids(), skip_errors=True)
        series = {}
        for label in D.LABELS:
            vals = [aggs[ex.id].value for ex in corpus if ex.label == label and ex.id in aggs]
            if vals:
                series[label] = vals
        everything = [v for vals in series.values() for v in vals]
        rng = (min(everything), max(everything) if max(everything) > min(everything) else min(everything) + 1)
        write_histogram_csv(args.histogram, {k: score_histogram(v, args.bins, rng) for k, v in series.items()})
    return 0


def _run_config(args) -> RunConfig:
    overrides = parse_override_args(args.overrides)
    if args.config:
        return load_config(args.config, overrides)
    return apply_overrides(RunConfig(), overrides)


def cmd_train(args) -> int:
    from .harness.train import train

    cfg = _run_config(args)
    res = train(cfg)
    last = res.metrics.records[-1]
    print(f"{cfg.name}: {len(res.metrics.records)} epochs, final train_loss={last.train_loss:.4f}, "
          f"eval_nll={last.eval_nll}")
    return 0


def cmd_eval(args) -> int:
    from .harness.train import evaluate
    from .model import load_model

    model = load_model(args.model, frozen=True)
    train_ids = D.load_jsonl(args.train).ids() if args.train else None
    result = evaluate(model, D.load_jsonl(args.input), train_ids, args.max_tokens,
                      exact_match=not args.no_exact_match)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    from .harness.presets import PRESETS, run_experiment

    if args.list:
        for name in sorted(PRESETS):
            print(name)
        return 0
    if not args.preset or not args.out:
        raise ConfigError("experiment needs a preset name and --out")
    out = run_experiment(args.preset, args.out, parse_override_args(args.overrides))
    print(f"report written to {out}")
    return 0


def cmd_report(args) -> int:
    from .harness.report import emit_report

    path = emit_report(args.runs, args.out, args.baseline)
    print(f"wrote {path}")
    return 0


def cmd_build_assets(args) -> int:
    from .harness.presets import build_assets

    out = build_assets(args.out)
    print(f"assets written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poftlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic task corpus")
    p.add_argument("--tasks", default=",".join(D.TASKS))
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--eval-size", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("noise", help="add mismatched-response noise to a clean corpus")
    p.add_argument("--input", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--fraction", type=float, default=0.2, help="noise examples per clean example")
    g.add_argument("--count", type=int)
    p.add_argument("--mismatch", type=float, default=1.0)
    p.add_argument("--rates", help="ins,del,sub character rates (default 0.05,0.05,0.05)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise)

    p = sub.add_parser("filter", help="keep the top fraction of a corpus by aggregate score")
    p.add_argument("--input", required=True)
    p.add_argument("--scores", help="score cache (JSONL)")
    p.add_argument("--models", help="comma-separated model ids (default: all in the cache header)")
    p.add_argument("--external", help="use an external_scores column instead of the cache")
    p.add_argument("--strategy", default="avg", choices=("avg", "min", "max"))
    p.add_argument("--keep", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audit", help="write an id/score/kept CSV")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("regen", help="replace responses with a frozen teacher's generations")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--max-tokens", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_regen)

    p = sub.add_parser("score", help="score a corpus with frozen reference models")
    p.add_argument("--models", nargs="+", required=True, help="model directories")
    p.add_argument("--input", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--histogram", help="write a per-label histogram CSV of aggregate scores")
    p.add_argument("--strategy", default="avg", choices=("avg", "min", "max"))
    p.add_argument("--bins", type=int, default=30)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("train", help="train one run from a config file")
    p.add_argument("--config")
    _add_set(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out NLL and exact match of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--train", help="training corpus to check disjointness against")
    p.add_argument("--max-tokens", type=int, default=0)
    p.add_argument("--no-exact-match", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("experiment", help="run an experiment preset")
    p.add_argument("preset", nargs="?")
    p.add_argument("--out")
    p.add_argument("--list", action="store_true", help="list presets")
    _add_set(p)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="summarize finished runs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--baseline")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("build-assets", help="pre-train the reference and base models")
    p.add_argument("--out", help="output directory (default: the package's asset directory)")
    p.set_defaults(func=cmd_build_assets)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, RuntimeError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
