"""Command-line entry point: ``mdcs <subcommand> [--config F] [--seed N] [--out DIR] [--format F]``.

Every subcommand prints its table to stdout and writes the same table, plus
any PNG figures, into ``--out``. Wall-clock time goes to ``timing.txt`` so
reports stay byte-identical across runs.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from mdcs import dataops, metrics, netcore
from mdcs.runner import experiments, reporting, training
from mdcs.runner.config import ConfigError, parse_config

log = logging.getLogger("mdcs")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",") if v.strip()]


def _lambda_points(text: str) -> list:
    """``"0;1;2"`` gives three single-expert points, ``"0,1,2;-0.5,1,2.5"`` two triples."""
    points = []
    for chunk in text.split(";"):
        vals = _floats(chunk)
        if vals:
            points.append(vals[0] if len(vals) == 1 else tuple(vals))
    return points


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="flat 'key = value' config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", type=Path, default=Path("mdcs-out"), help="output directory")
    p.add_argument("--format", choices=reporting.FORMATS, default="text")
    p.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdcs", description="Multi-expert long-tailed training and diagnostics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic train/test sets as CSV")
    _common(p)

    p = sub.add_parser("train", help="train and write a checkpoint plus the training log")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes the prediction dump and report")
    _common(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="defaults to OUT/model.ckpt")

    p = sub.add_parser("variance", help="bootstrap model-variance protocol")
    _common(p)
    p.add_argument("--m", type=int, default=10, help="number of bootstrap-trained models")
    p.add_argument("--paired", action="store_true", help="run with and without consistency distillation")

    p = sub.add_parser("sweep-lambda", help="accuracy per shot group against lambda")
    _common(p)
    p.add_argument("--values", default="0;1;2", help="';'-separated points, each a lambda or comma list")
    p.add_argument("--triples", action="store_true", help="sweep the standard three-expert lambda rows")
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("sweep-alpha", help="accuracy against the distillation weight")
    _common(p)
    p.add_argument("--values", default="0,0.2,0.4,0.6,0.8,1.0")
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("sweep-experts", help="accuracy against the number of experts")
    _common(p)
    p.add_argument("--values", default="1,2,3,4,5")
    p.add_argument("--seeds", type=int, default=1)

    p = sub.add_parser("report", help="rebuild the report from a prediction dump")
    _common(p)
    p.add_argument("--dump", type=Path, default=None, help="defaults to OUT/dump.csv")
    return parser


def _emit(args, name: str, text: str) -> Path:
    path = args.out / f"{name}.{reporting.EXTENSIONS[args.format]}"
    path.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return path


def _plot(args, fn, *fargs) -> None:
    if args.no_plots:
        return
    from mdcs.runner import plotting

    getattr(plotting, fn)(*fargs)


def cmd_gen_data(args, cfg) -> None:
    train_set, test_set = training.build_datasets(cfg)
    dataops.write_dataset_csv(train_set, args.out / "train.csv")
    dataops.write_dataset_csv(test_set, args.out / "test.csv")
    split = training.shot_split_for(cfg, train_set)
    rows = [{"set": name, "n": d.n, "dim": d.dim, "classes": d.num_classes,
             "counts": [float(c) for c in d.counts]} for name, d in (("train", train_set), ("test", test_set))]
    text = reporting.render_table(rows, ["set", "n", "dim", "classes", "counts"], args.format)
    if args.format == "text":
        text += "\nShot split: " + " ".join(s.value for s in split.assignment) + "\n"
    _emit(args, "datasets", text)


def cmd_train(args, cfg) -> None:
    train_set, _ = training.build_datasets(cfg)
    result = training.train(cfg, train_set)
    netcore.save_checkpoint(result.model, args.out / "model.ckpt", result.state, result.epochs_done)
    training.write_train_log(result.log, args.out / "train_log.csv")
    last = result.log[-1] if result.log else {"epoch": -1, "total": float("nan")}
    rows = [{"epochs": result.epochs_done, "final_total_loss": last["total"],
             "checkpoint": str(args.out / "model.ckpt")}]
    _emit(args, "train", reporting.render_table(rows, ["epochs", "final_total_loss", "checkpoint"], args.format))
    _plot(args, "training_figure", result.log, args.out / "training.png")


def cmd_eval(args, cfg) -> None:
    ckpt = args.checkpoint or args.out / "model.ckpt"
    model, _, _ = netcore.load_checkpoint(ckpt)
    train_set, test_set = training.build_datasets(cfg)
    split = training.shot_split_for(cfg, train_set)
    report, dump = experiments.evaluate(model, cfg, test_set, split)
    metrics.write_dump_csv(dump, args.out / "dump.csv")
    _emit(args, "report", reporting.render(report, args.format))
    _plot(args, "report_figure", report, args.out / "report.png")


def cmd_report(args, cfg) -> None:
    dump = metrics.read_dump_csv(args.dump or args.out / "dump.csv")
    train_set, _ = training.build_datasets(cfg)
    split = training.shot_split_for(cfg, train_set)
    report = reporting.build_report(dump, split, cfg.to_text(), cfg.lambdas)
    _emit(args, "report", reporting.render(report, args.format))
    _plot(args, "report_figure", report, args.out / "report.png")


def cmd_variance(args, cfg) -> None:
    block = experiments.variance_protocol(cfg, args.m, paired=args.paired)
    _emit(args, "variance", reporting.render_variance(block, args.format))
    _plot(args, "variance_figure", block, args.out / "variance.png")


def _sweep(args, cfg, kind: str, rows: list) -> None:
    text = reporting.render_table(rows, experiments.SWEEP_COLUMNS[kind], args.format)
    if args.format == "text":
        text += "\n" + reporting.CONFIG_HEADING + "\n" + cfg.to_text()
    _emit(args, f"sweep_{kind}", text)
    _plot(args, "sweep_figure", rows, experiments.SWEEP_COLUMNS[kind][0], args.out / f"sweep_{kind}.png")


def cmd_sweep_lambda(args, cfg) -> None:
    points = list(experiments.LAMBDA_TRIPLES) if args.triples else _lambda_points(args.values)
    _sweep(args, cfg, "lambda", experiments.lambda_sweep(cfg, points, args.seeds))


def cmd_sweep_alpha(args, cfg) -> None:
    _sweep(args, cfg, "alpha", experiments.alpha_sweep(cfg, _floats(args.values), args.seeds))


def cmd_sweep_experts(args, cfg) -> None:
    counts = [int(v) for v in _floats(args.values)]
    _sweep(args, cfg, "experts", experiments.expert_count_sweep(cfg, counts, args.seeds))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "variance": cmd_variance,
    "sweep-lambda": cmd_sweep_lambda,
    "sweep-alpha": cmd_sweep_alpha,
    "sweep-experts": cmd_sweep_experts,
    "report": cmd_report,
}


def _is_numeric(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (netcore.NumericError, FloatingPointError)):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        cfg = parse_config(args.config, seed=args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except Exception as exc:
        if _is_numeric(exc):
            print(f"mdcs: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ConfigError, dataops.DatasetError, metrics.DumpError, netcore.ShapeError,
                            OSError, ValueError)):
            print(f"mdcs: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise
    elapsed = time.perf_counter() - start
    (args.out / "timing.txt").write_text(f"{args.command} {elapsed:.3f}s\n", encoding="utf-8")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
