"""Command line entry point: ``boxood <subcommand>``.

Exit codes: 0 success, 1 other failure, 2 config error, 3 generator or
embedder transport error, 4 training error, 5 evaluation error. Failures
print one JSON object with ``stage``, ``code`` and ``message`` on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

from .config import ConfigError, load_config, validate
from .dataset import DatasetError
from .transport import ContractError, TransportError

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_TRANSPORT, EXIT_TRAIN, EXIT_EVAL = 0, 1, 2, 3, 4, 5


class StageFailure(Exception):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(message)
        self.stage, self.code, self.message = stage, code, message


def _fail(stage: str, exc: BaseException) -> StageFailure:
    from .detector import TrainingError
    from .metrics import MetricsError
    from .pipeline import EvaluationError

    if isinstance(exc, (ConfigError, DatasetError, FileNotFoundError)) and stage != "evaluate":
        code = EXIT_CONFIG
    elif isinstance(exc, (TransportError, ContractError)):
        code = EXIT_TRANSPORT
    elif isinstance(exc, TrainingError) or stage == "train":
        code = EXIT_TRAIN
    elif isinstance(exc, (EvaluationError, MetricsError)) or stage == "evaluate":
        code = EXIT_EVAL
    else:
        code = EXIT_OTHER
    return StageFailure(stage, code, f"{type(exc).__name__}: {exc}")


def _config(args):
    try:
        cfg = load_config(args.config)
        validate(cfg, stages=(args.command,))
        return cfg
    except ConfigError as exc:
        raise StageFailure(args.command, EXIT_CONFIG, f"ConfigError: {exc}") from exc


def cmd_prompts(args) -> int:
    from .prompts import TEMPLATE_RESOURCE, load_templates

    if args.raw:
        sys.stdout.write(
            resources.files("boxood.resources").joinpath(TEMPLATE_RESOURCE).read_text("utf-8"))
        return EXIT_OK
    for t in load_templates():
        print(f"{t.index:2d}  {t.text}")
    return EXIT_OK


def cmd_convert_voc(args) -> int:
    from .dataset import convert_voc

    sets = []
    for item in args.set:
        year, _, split = item.partition(":")
        if not split:
            raise StageFailure("convert-voc", EXIT_CONFIG, f"--set expects YEAR_DIR:SPLIT, got {item!r}")
        sets.append((year, split))
    try:
        ds = convert_voc(args.voc_root, sets, args.out, include_difficult=args.include_difficult)
    except (OSError, ValueError) as exc:
        raise _fail("convert-voc", exc) from exc
    n_cat, n_img, n_ann = ds.counts()
    print(json.dumps({"categories": n_cat, "images": n_img, "annotations": n_ann, "out": args.out}))
    return EXIT_OK


def cmd_make_shapes(args) -> int:
    from .shapes import make_desk_fixture

    paths = make_desk_fixture(args.out, seed=args.seed, n_train=args.n_train,
                              n_test=args.n_test, n_ood=args.n_ood)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=2))
    return EXIT_OK


def cmd_synthesize(args) -> int:
    from .pipeline import synthesize

    cfg = _config(args)
    try:
        summaries = synthesize(cfg)
    except Exception as exc:
        raise _fail("synthesize", exc) from exc
    print(json.dumps({"run_id": cfg.run_id, "variants": summaries}, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.full_scale:
        text = resources.files("boxood.resources").joinpath(
            "full_scale_faster_rcnn.yaml").read_text("utf-8")
        if args.full_scale == "-":
            sys.stdout.write(text)
        else:
            Path(args.full_scale).write_text(text)
            print(f"full-scale configuration written to {args.full_scale} (not executed)")
        return EXIT_OK
    if not args.config:
        raise StageFailure("train", EXIT_CONFIG, "ConfigError: --config is required")
    from .pipeline import train

    cfg = _config(args)
    try:
        results = train(cfg)
    except Exception as exc:
        raise _fail("train", exc) from exc
    print(json.dumps({"run_id": cfg.run_id, "variants": results}, indent=2))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .metrics import markdown_table
    from .pipeline import evaluate

    cfg = _config(args)
    try:
        reports = evaluate(cfg, checkpoint=args.checkpoint)
    except Exception as exc:
        raise _fail("evaluate", exc) from exc
    print(markdown_table(reports), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import collect_reports, write_report

    if args.run_dir:
        run = Path(args.run_dir)
    else:
        run = _config(args).run_dir()
    reports = collect_reports(run)
    if not reports:
        raise StageFailure("report", EXIT_EVAL, f"no evaluation reports under {run}")
    print(write_report(run, reports, include_reference=not args.no_reference), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boxood", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prompts", help="list the generic outlier prompt templates")
    p.add_argument("--raw", action="store_true", help="print the template resource byte-for-byte")
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("convert-voc", help="convert Pascal VOC XML to COCO-style JSON")
    p.add_argument("voc_root")
    p.add_argument("--set", action="append", default=[], metavar="YEAR_DIR:SPLIT",
                   help="e.g. VOC2007:trainval (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--include-difficult", action="store_true")
    p.set_defaults(func=cmd_convert_voc)

    p = sub.add_parser("make-shapes", help="write the synthetic shapes fixture")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=150)
    p.add_argument("--n-ood", type=int, default=150)
    p.set_defaults(func=cmd_make_shapes)

    for name, func, helptext in (
        ("synthesize", cmd_synthesize, "generate the OOD dataset(s)"),
        ("train", cmd_train, "train detector and OOD head"),
        ("evaluate", cmd_evaluate, "compute AUROC, FPR95 and mAP"),
        ("report", cmd_report, "aggregate evaluation reports into a table"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", "-c", required=name not in ("train", "report"))
        p.set_defaults(func=func)
        if name == "train":
            p.add_argument("--full-scale", metavar="PATH", nargs="?", const="-",
                           help="emit the GPU-scale configuration (to PATH or stdout) and exit")
        if name == "evaluate":
            p.add_argument("--checkpoint", help="evaluate this checkpoint instead of the run's")
        if name == "report":
            p.add_argument("--run-dir", help="run directory (instead of --config)")
            p.add_argument("--no-reference", action="store_true",
                           help="omit the published comparison rows")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and not (args.config or args.run_dir):
        parser.error("report needs --config or --run-dir")
    try:
        return args.func(args)
    except StageFailure as exc:
        print(json.dumps({"stage": exc.stage, "code": exc.code, "message": exc.message}),
              file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
