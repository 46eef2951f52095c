"""Command-line entry point: ``medistill <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from medistill.errors import ConfigurationError, MedistillError

logger = logging.getLogger("medistill")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    parser.add_argument("--mode", choices=("verify", "train"), default=None,
                        help="numeric mode: verify = float64, train = float32")
    parser.add_argument("--out", default=None, help="output directory")


def _load_manifest(args, task: str):
    from medistill.manifest import parse_config

    manifest = parse_config(args.config)
    update = {"task": task}
    if args.seed is not None:
        update["seed"] = args.seed
    if args.mode is not None:
        update["mode"] = args.mode
    return manifest.model_copy(update=update)


def _out_dir(args, default: str) -> str:
    return args.out or default


def _progress(record: dict) -> None:
    shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in record.items()}
    print(json.dumps(shown), flush=True)


def cmd_count(args) -> int:
    from medistill.accounting import ENCODER_TABLE_FLOPS, cost_report, measure_inference
    from medistill.config import variant_config

    if args.config:
        from medistill.manifest import parse_config
        config = parse_config(args.config).model
    else:
        config = variant_config(args.vision, args.text)
    kwargs = dict(ENCODER_TABLE_FLOPS) if args.encoder_table else {"convention": args.convention}
    resolution = args.resolution or config.vision.image_size
    report = cost_report(config, resolution, args.text_len, **kwargs)
    if args.measure:
        from medistill.autodiff import numeric_mode
        from medistill.model import MEDModel

        with numeric_mode(args.mode or "train"):
            model = MEDModel.initialize(config, args.seed or 0)
            report.wallclock_ms, report.hardware = measure_inference(model, repetitions=args.repetitions)
    print(report.table())
    print(report.to_json())
    if args.out:
        from medistill.checkpoint import atomic_write_text
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "cost.json"), report.to_json())
        atomic_write_text(os.path.join(args.out, "cost_table.txt"), report.table() + "\n")
    return 0


def cmd_pretrain(args) -> int:
    from medistill.trainer import pretrain_teacher

    manifest = _load_manifest(args, "pretrain-teacher")
    out = _out_dir(args, "runs/teacher")
    result = pretrain_teacher(manifest, out, progress=_progress)
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return 0


def cmd_proxy(args) -> int:
    from medistill.trainer import proxy_unimodal_pretrain

    manifest = _load_manifest(args, "proxy-pretrain")
    if args.kind:
        manifest = manifest.model_copy(update={"proxy": manifest.proxy.model_copy(update={"kind": args.kind})})
    out = _out_dir(args, f"runs/proxy-{manifest.proxy.kind}")
    result = proxy_unimodal_pretrain(manifest, out)
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return 0


def cmd_distill(args) -> int:
    from medistill.trainer import distill_student

    manifest = _load_manifest(args, "distill")
    if args.teacher:
        manifest = manifest.model_copy(update={"teacher_checkpoint": args.teacher})
    out = _out_dir(args, "runs/student")
    result = distill_student(manifest, out_dir=out, progress=_progress)
    print(json.dumps(result.metrics, indent=2, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from medistill.trainer import run_ablation_grid

    manifest = _load_manifest(args, "ablate")
    out = _out_dir(args, "runs/ablation")
    result = run_ablation_grid(manifest, out, progress=_progress)
    print(result.to_csv(), end="")
    failed = sum(1 for r in result.rows if r["status"] != "ok")
    if failed:
        print(f"{failed} grid cell(s) failed; see results.csv", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    from medistill.autodiff import numeric_mode
    from medistill.checkpoint import atomic_write_text, load_checkpoint
    from medistill.manifest import manifest_from_dict
    from medistill.trainer import evaluate, load_dataset

    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.kind != "med":
        raise ConfigurationError(f"{args.checkpoint} is a {ckpt.kind!r} checkpoint; eval needs a full model")
    manifest = manifest_from_dict(ckpt.manifest)
    if args.mode:
        manifest = manifest.model_copy(update={"mode": args.mode})
    with numeric_mode(manifest.mode):
        from medistill.autodiff import get_dtype
        model = ckpt.build_model().astype(get_dtype())
        _, eval_split = load_dataset(manifest.data)
        metrics = evaluate(model, eval_split, manifest)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write_text(os.path.join(args.out, "eval.json"), text)
    return 0


def cmd_report(args) -> int:
    from medistill.report import emit_report

    out = _out_dir(args, "runs/report")
    for path in emit_report(args.runs, out, args.grid_csv):
        print(path)
    with open(os.path.join(out, "summary.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medistill", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="parameter/FLOP accounting (optionally measured latency)")
    _common(p)
    p.add_argument("--config", help="run configuration whose model section is counted")
    p.add_argument("--vision", default="base", choices=("base", "middle", "small", "tiny"))
    p.add_argument("--text", default="base", choices=("base", "middle", "small", "tiny"))
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--text-len", type=int, default=30)
    p.add_argument("--convention", choices=("flop", "mac"), default="flop")
    p.add_argument("--encoder-table", action="store_true",
                   help="MACs of weight matmuls only (the reference encoder table's convention)")
    p.add_argument("--measure", action="store_true", help="also time a local forward pass")
    p.add_argument("--repetitions", type=int, default=5)
    p.set_defaults(func=cmd_count)

    for name, func, helptext in (("pretrain-teacher", cmd_pretrain, "pre-train a MED model with ITC+ITM+LM"),
                                 ("proxy-pretrain", cmd_proxy, "unimodal proxy pre-training"),
                                 ("distill", cmd_distill, "distill a student from a teacher checkpoint"),
                                 ("ablate", cmd_ablate, "run an ablation grid")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="JSON run configuration")
        _common(p)
        if name == "proxy-pretrain":
            p.add_argument("--kind", choices=("vision", "text"), default=None)
        if name == "distill":
            p.add_argument("--teacher", default=None, help="teacher checkpoint (overrides the manifest)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its run's held-out split")
    p.add_argument("checkpoint")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="cost tables and retention summary for finished runs")
    p.add_argument("runs", nargs="+", help="run directories; the first is the reference (teacher)")
    p.add_argument("--grid-csv", default=None)
    _common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MedistillError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
