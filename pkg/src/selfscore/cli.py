"""Command-line entry point: ``selfscore <subcommand> ...``.

Exit status is 0 on success, 2 on configuration or usage errors and 1 on
runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ConfigError, SelfScoreError

log = logging.getLogger("selfscore")


def _overrides(args, extra: dict | None = None) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        out[key.strip()] = value.strip()
    for k, v in (extra or {}).items():
        if v is not None:
            out[k] = str(v)
    return out


def _config(args, extra=None):
    from .pipeline import load_config

    return load_config(args.config, _overrides(args, extra))


def _add_config(p, required=True):
    p.add_argument("--config", required=required, help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")


def _split(pipeline_cfg, split):
    from .ingest import load_manifest, split_filter

    return split_filter(load_manifest(pipeline_cfg.manifest), split)


def _handle(cfg, delta_dir):
    from .backend.base import load_delta
    from .pipeline import build_backend

    base = build_backend(cfg)
    return base, base.apply_delta(load_delta(delta_dir) if delta_dir else None)


def cmd_ingest(args) -> int:
    from .ingest import load_manifest, save_manifest
    from .pipeline import write_toy_workspace

    if args.make_toy:
        cfg_path = write_toy_workspace(args.make_toy, n=args.n, seed=args.seed, iterations=args.iterations)
        print(f"toy workspace written; config at {cfg_path}")
        return 0
    if not args.manifest:
        raise ConfigError("ingest needs --manifest or --make-toy")
    manifest = load_manifest(args.manifest, format=args.format)
    if args.out:
        save_manifest(manifest, args.out)
    print(json.dumps({"name": manifest.name, "counts": manifest.counts}, sort_keys=True))
    return 0


def cmd_gen_data(args) -> int:
    from ._util import child_rng
    from .backend.base import GenerationParams, delta_archive_checksum
    from .codec import fit_binning
    from .preference import build_dataset

    cfg = _config(args)
    train = _split(cfg, "train")
    base, handle = _handle(cfg, args.delta)
    out = Path(args.out)
    stats = build_dataset(
        handle, train, fit_binning([r.raw_score for r in train]), child_rng(cfg.seed, "generate", args.iteration),
        cfg.score_fraction, out / "score.jsonl",
        consistency_path=out / "consistency.jsonl" if args.consistency else None,
        consistency_fraction=cfg.consistency_fraction_of_score, min_distance=cfg.min_distance,
        params=GenerationParams(max_new_tokens=cfg.max_new_tokens), max_retries=cfg.max_retries,
        generator_id=delta_archive_checksum(args.delta) if args.delta else f"base:{base.weights.base_id}")
    print(json.dumps(stats.__dict__, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .backend.base import load_delta
    from .dpo import save_checkpoint, train_adapter
    from .pipeline import build_backend

    cfg = _config(args)
    tc = cfg.score_train if args.stage == "score" else cfg.consistency_train
    tc = tc.for_iteration(args.iteration)
    if args.mode:
        tc = replace(tc, mode=args.mode)
    base = build_backend(cfg)
    init = load_delta(args.init_delta) if args.init_delta else None
    delta, report = train_adapter(base, args.data, cfg.adapter, tc, init_delta=init,
                                  iteration=args.iteration, specialist=args.stage)
    save_checkpoint(args.out, delta, tc, report)
    print(json.dumps({"steps": report.steps, "final_mean_loss": report.final_mean_loss,
                      "pair_accuracy": report.pair_accuracy, "checksum": delta.checksum()}))
    return 0


def cmd_merge(args) -> int:
    from .merging import MergeConfig, merge_archives

    inputs = [s for s in args.inputs.split(",") if s]
    try:
        weights = tuple(float(w) for w in args.weights.split(",")) if args.weights else (1.0,) * len(inputs)
        config = MergeConfig(weights=weights, density=args.density, sign_method=args.sign)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if len(inputs) < 2 or len(weights) != len(inputs):
        raise ConfigError("merge needs at least two --inputs and one weight per input")
    merge_archives(inputs, args.out, config)
    print(f"merged archive written to {args.out}")
    return 0


def cmd_fit_decode(args) -> int:
    from .codec import fit_binning, fit_reference_values, save_codec
    from .evaluation import predict_distributions

    cfg = _config(args)
    train = _split(cfg, "train")
    records = _split(cfg, args.split)
    _, handle = _handle(cfg, args.delta)
    P = predict_distributions(handle, records)
    ref = fit_reference_values(P, [r.raw_score for r in records])
    save_codec(args.out, fit_binning([r.raw_score for r in train]), ref, source=f"{args.split}-lstsq")
    print(json.dumps({"s_bar": list(ref.s_bar)}))
    return 0


def cmd_evaluate(args) -> int:
    from .codec import load_codec
    from .evaluation import evaluate_scoring, judge_batch, metrics_report, write_metrics, write_predictions
    from .pipeline import build_judge

    cfg = _config(args)
    scheme, ref, _ = load_codec(args.codec)
    _, handle = _handle(cfg, args.delta)
    result = evaluate_scoring(handle, _split(cfg, args.split), scheme, ref)
    out = Path(args.out)
    write_predictions(out / "predictions.jsonl", result.records)
    judge = build_judge(cfg)
    summary = judge_batch(judge, result.records, cfg.judge_sample_cap, seed=cfg.seed) if judge else None
    report = metrics_report(result.metrics, summary)
    write_metrics(out / "metrics.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_judge(args) -> int:
    from .evaluation import judge_batch, read_predictions
    from .backend.toy import ToyJudge
    from .evaluation import StubProvider

    providers = {"toy": ToyJudge, "stub": StubProvider}
    if args.provider not in providers:
        raise ConfigError(f"unknown provider {args.provider!r}")
    summary = judge_batch(providers[args.provider](), read_predictions(args.predictions),
                          args.sample_cap, seed=args.seed)
    doc = {"cons": summary.cons, "use": summary.use, "gen": summary.gen, "n": summary.n,
           "judge_failures": summary.failures}
    if args.out:
        from ._util import write_json
        write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .pipeline import Pipeline, config_to_ini, format_table

    cfg = _config(args, {"pipeline.iterations": args.iterations, "pipeline.out": args.out})
    pipe = Pipeline(cfg)
    if args.dry_run:
        print(config_to_ini(cfg))
        for step in pipe.plan():
            print(step)
        return 0
    _, rows = pipe.run_full()
    print(format_table(rows), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfscore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a manifest, or write a toy workspace")
    p.add_argument("--manifest")
    p.add_argument("--format", choices=("jsonl", "csv"))
    p.add_argument("--out", help="write the normalized manifest here")
    p.add_argument("--make-toy", metavar="DIR", help="write a synthetic task, features and toy.cfg")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=2)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("gen-data", help="generate preference pairs from the train split")
    _add_config(p)
    p.add_argument("--delta", help="delta archive carried by the generator")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--consistency", action="store_true", help="also derive consistency pairs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one adapter")
    _add_config(p)
    p.add_argument("--data", required=True)
    p.add_argument("--init-delta")
    p.add_argument("--stage", choices=("score", "consistency"), default="score")
    p.add_argument("--mode", choices=("dpo", "sft_score", "sft_score_and_text"))
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="TIES-merge delta archives")
    p.add_argument("--inputs", required=True, help="comma-separated archive directories")
    p.add_argument("--density", type=float, default=0.5)
    p.add_argument("--weights", default=None, help="comma-separated, default all ones")
    p.add_argument("--sign", choices=("frequency", "mass"), default="frequency")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("fit-decode", help="fit per-bin reference values on a split")
    _add_config(p)
    p.add_argument("--delta")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_decode)

    p = sub.add_parser("evaluate", help="score a split with a fitted decoder")
    _add_config(p)
    p.add_argument("--delta")
    p.add_argument("--codec", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("judge", help="judge a prediction dump")
    p.add_argument("--predictions", required=True)
    p.add_argument("--provider", default="toy")
    p.add_argument("--sample-cap", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_judge)

    p = sub.add_parser("run", help="run the full iterative loop")
    _add_config(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and plan")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (SelfScoreError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
