"""Command-line entry points: generate | extract | zeroshot | dapt | eval | serve.

Every subcommand takes --config FILE. Pipeline commands read the pipeline
config schema (see PipelineConfig); generate reads a small schema of its own:
{"out_dir", "seed", "n_pos", "n_neg", "dims"? [nz, ny, nx]}.

Montage size and filter threshold are restricted to their documented value
sets unless --unsafe-config is passed. --seed overrides the config seed.
Extract logs per-study failures and keeps going; any failure makes the
process exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .pipeline import PipelineConfig, config_from_json, run_dapt, run_eval, run_extract, run_zeroshot


def _load_pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    config = config_from_json(args.config)
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if not getattr(args, "unsafe_config", False):
        config.validate_restricted()
    return config


def cmd_generate(args: argparse.Namespace) -> int:
    from .phantom import StudySetConfig, generate_study_set

    raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    out_dir = raw["out_dir"]
    seed = args.seed if args.seed is not None else raw["seed"]
    kwargs = {}
    if "dims" in raw:
        kwargs["dims"] = tuple(raw["dims"])
    manifest = generate_study_set(out_dir, seed, raw["n_pos"], raw["n_neg"],
                                  StudySetConfig(**kwargs))
    counts = {}
    for rec in manifest.records:
        counts[rec.split] = counts.get(rec.split, 0) + 1
    print(f"generated {len(manifest.records)} studies under {out_dir} "
          f"(splits: {json.dumps(counts, sort_keys=True)})")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    summary = run_extract(config, force=args.force)
    print(f"extract mode={summary.mode} digest={summary.digest}: "
          f"{len(summary.ok)} written, {len(summary.skipped)} up to date, "
          f"{len(summary.failed)} failed")
    for study_id, why in sorted(summary.failed.items()):
        print(f"  FAILED {study_id}: {why}", file=sys.stderr)
    return 1 if summary.failed else 0


def cmd_zeroshot(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    report = run_zeroshot(config, split=args.split)
    for disease, block in report["diseases"].items():
        metrics = block["metrics"]
        if "note" in metrics and "auroc" not in metrics:
            print(f"{disease}: {metrics['note']} (n={metrics['n']})")
        else:
            print(f"{disease}: n={metrics['n']} auroc={metrics['auroc']:.4f} "
                  f"auprc={metrics['auprc']:.4f} "
                  f"f1@{metrics['f1_threshold']}={metrics['f1']:.4f}")
    return 0


def cmd_dapt(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    summary = run_dapt(config)
    print(f"dapt digest={summary['config_digest']}: best lr={summary['best_lr']:.2e} "
          f"best step={summary['best_step']} val loss={summary['best_val_loss']:.4f} "
          f"({summary['n_checkpoints']} checkpoints, "
          f"{len(summary['excluded'])} studies excluded)")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_pipeline_config(args)
    report = run_eval(config, use_ensemble=not args.single)
    print(f"eval split={report['split']} ensemble={report['ensemble_size']}")
    for disease, block in report["diseases"].items():
        for arm in ("baseline", "adapted"):
            metrics = block[arm]["metrics"]
            if "auroc" in metrics:
                print(f"  {disease} [{arm}]: auroc={metrics['auroc']:.4f} "
                      f"auprc={metrics['auprc']:.4f} "
                      f"f1@{metrics['f1_threshold']}={metrics['f1']:.4f}")
            else:
                print(f"  {disease} [{arm}]: {metrics.get('note', 'metrics unavailable')}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    from .server import build_app

    config = _load_pipeline_config(args)
    app = build_app(config)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mzs",
                                     description="patch-montage pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--unsafe-config", action="store_true",
                       help="allow montage sizes / thresholds outside the documented sets")

    p = sub.add_parser("generate", help="synthesize a labeled phantom study set")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="build montages for every study")
    common(p)
    p.add_argument("--force", action="store_true",
                   help="rebuild even when digests match")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("zeroshot", help="score montages with prompt pairs")
    common(p)
    p.add_argument("--split", default=None,
                   help="manifest split to score (default: all studies)")
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("dapt", help="train projection heads on (montage, text) pairs")
    common(p)
    p.set_defaults(func=cmd_dapt)

    p = sub.add_parser("eval", help="baseline vs adapted classification metrics")
    common(p)
    p.add_argument("--single", action="store_true",
                   help="use only the best checkpoint instead of the ensemble")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("serve", help="reader-study HTTP service")
    common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
