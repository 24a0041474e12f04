"""Command-line entry point (``drt``).

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..data import SuiteSpec, generate_suite
from ..dynamic import DynamicConv2d, count_flops
from ..errors import ConfigError, DataError, NumericError
from ..models import layer_reduction, load_checkpoint
from .analysis import degradation_study, export_coefficients
from .config import load_config
from .plots import plot_coefficients, plot_degradation, plot_training_curves
from .training import evaluate, self_train, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("drt")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def cmd_gen_data(args) -> int:
    files = generate_suite(SuiteSpec.from_dict(_read_json(args.spec)), args.out)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["domain", "split", "path"])
    for name, pair in files.items():
        for split in ("train", "eval"):
            w.writerow([name, split, pair[split]])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    result = train(cfg, out_dir=out)
    plot_training_curves(result.history, result.metrics_path.with_suffix(".png"),
                         title=f"{cfg.mode.value} / {cfg.alignment.value}")
    last = result.history[-1]
    print(f"checkpoint,{result.checkpoint_path}")
    print(f"metrics,{result.metrics_path}")
    print(f"target_acc,{last.target_acc!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    print(f"accuracy,{evaluate(args.checkpoint, args.data)!r}")
    return EXIT_OK


def cmd_self_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "self_train"
    result = self_train(args.checkpoint, cfg, out_dir=out)
    print(f"checkpoint,{result.checkpoint_path}")
    if result.history:
        print(f"target_acc,{result.history[-1].target_acc!r}")
    return EXIT_OK


def cmd_export(args) -> int:
    model = load_checkpoint(args.checkpoint)
    table = export_coefficients(model, args.data, include_lambda=args.include_lambda)
    path = table.write_csv(args.out)
    plot_coefficients(table.values, table.domain_tags, Path(path).with_suffix(".png"))
    print(f"rows,{len(table.sample_ids)}")
    print(f"columns,{len(table.columns)}")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    arch = cfg.architecture(cfg.classes or 10)
    size = args.size or arch.image_size
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["layer", "cin", "cout", "height", "width", "static_flops", "overhead_flops", "ratio"])
    cin, h = arch.in_channels, size
    total_s = total_o = 0
    for i, cout in enumerate(arch.channels):
        layer = DynamicConv2d(cin, cout, arch.kernel_size, mode=arch.mode, K=arch.K,
                              reduction=layer_reduction(cin, arch.reduction), layout=arch.layout)
        s, o = count_flops(layer, h, h)
        w.writerow([i, cin, cout, h, h, s, o, repr(o / s)])
        total_s, total_o = total_s + s, total_o + o
        h = (h - arch.kernel_size + 1) // 2
        cin = cout
    w.writerow(["total", "", "", "", "", total_s, total_o, repr(total_o / total_s)])
    return EXIT_OK


def cmd_degradation(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(args.config).parent / "degradation"
    report = degradation_study(cfg, out_dir=out)
    plot_degradation(report, out / "degradation.png")
    csv.writer(sys.stdout, lineterminator="\n").writerows(report.rows())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drt", description="Dynamic residual transfer toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render a synthetic multi-domain suite")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("self-train")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_self_train)

    s = sub.add_parser("export-coefficients")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, help="dataset file or directory of .msd files")
    s.add_argument("--out", required=True)
    s.add_argument("--include-lambda", action="store_true")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("flops")
    s.add_argument("--config", required=True)
    s.add_argument("--size", type=int, help="input height/width (default: model image size)")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("degradation-study")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_degradation)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
