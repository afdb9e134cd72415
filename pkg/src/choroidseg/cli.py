"""Command-line entry points: dataset synthesis, training, evaluation, reporting.

Every failure path exits nonzero with a single `error: ...` line on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import config as config_mod
from . import report as report_mod
from . import synthdata, trainer
from .dataio import load_dataset
from .errors import ChoroidSegError
from .metrics import MetricReport


def cmd_synth(args) -> int:
    spec = synthdata.load_spec(args.spec)
    manifest = synthdata.generate_dataset(spec, args.count, args.out, domain=args.domain)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config)
    cfg = trainer.validate_config(cfg)
    run_dir = Path(args.runs_root) / (
        config_mod.config_hash(cfg) + "-" + time.strftime("%Y%m%d-%H%M%S")
    )
    run_dir.mkdir(parents=True, exist_ok=True)
    config_mod.save_config(cfg, run_dir / "config.ini")
    print(f"run dir: {run_dir}")
    result = trainer.train(cfg, run_dir, resume_from=args.resume)
    if result.best is not None:
        print(f"best val IOU {100.0 * result.best['iou']:.2f}% "
              f"(AUSDE {result.best['ausde']:.2f} px) at step {result.best['step']}")
    print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data, "target", labels_visible=True)
    generator, cfg = trainer.load_generator(args.checkpoint)
    rep = trainer.evaluate(generator, dataset, cfg.input_size, cfg.eval_batch_size)
    if args.oracle_report:
        rep = rep.with_gap(MetricReport.load(args.oracle_report))
    print(f"images evaluated: {rep.n_images}  columns skipped: {rep.columns_skipped}")
    line = f"IOU {100.0 * rep.iou:.2f}%  AUSDE {rep.ausde:.2f} px"
    if rep.gap_iou is not None:
        line += f"  GAP_iou {100.0 * rep.gap_iou:.2f}  GAP_ausde {rep.gap_ausde:.2f}"
    print(line)
    if args.out:
        rep.save(args.out)
        print(f"report written: {args.out}")
    if args.overlay:
        overlay_dir = Path(args.overlay_dir or Path(args.checkpoint).parent / "overlays")
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for i, sample_id, pred in trainer.predict_masks(
            generator, dataset, cfg.input_size, cfg.eval_batch_size
        ):
            report_mod.render_overlay(
                dataset.image(i), dataset.mask(i), pred,
                overlay_dir / f"{sample_id}.png", title=sample_id,
            )
        print(f"overlays written: {overlay_dir}")
    return 0


def cmd_report(args) -> int:
    runs = [report_mod.load_run(d) for d in args.run_dirs]
    oracle = report_mod.load_run(args.oracle) if args.oracle else None
    rows = report_mod.comparison_rows(runs, oracle)
    print(report_mod.format_table(rows))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_mod.write_table_tsv(rows, out_dir / "report.tsv")
    report_mod.render_metric_comparison(rows, out_dir / "report_metrics.png")
    for run in runs:
        report_mod.render_loss_curves(run.run_dir, out_dir / f"losses_{run.mode}_{run.run_dir.name}.png")
    print(f"report files written to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="choroidseg",
        description="Domain-adaptive band segmentation: synthesize data, train, evaluate, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset from a domain spec")
    p_synth.add_argument("--spec", required=True, help="domain spec JSON file")
    p_synth.add_argument("--count", required=True, type=int, help="number of samples")
    p_synth.add_argument("--out", required=True, help="output dataset directory")
    p_synth.add_argument("--domain", default="source", choices=("source", "target"))
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train from a run config file")
    p_train.add_argument("--config", required=True, help="INI run config")
    p_train.add_argument("--runs-root", default="runs", help="parent directory for run dirs")
    p_train.add_argument("--resume", default=None, help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a labeled dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory with masks")
    p_eval.add_argument("--oracle-report", default=None, help="oracle MetricReport JSON for GAP columns")
    p_eval.add_argument("--overlay", action="store_true", help="write per-image boundary overlays")
    p_eval.add_argument("--overlay-dir", default=None)
    p_eval.add_argument("--out", default=None, help="write the MetricReport JSON here")
    p_eval.set_defaults(func=cmd_eval)

    p_report = sub.add_parser("report", help="compare finished runs in a table and figures")
    p_report.add_argument("run_dirs", nargs="+", help="run directories with eval reports")
    p_report.add_argument("--oracle", default=None, help="run directory providing GAP reference")
    p_report.add_argument("--out", default=".", help="directory for table/figure files")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ChoroidSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
