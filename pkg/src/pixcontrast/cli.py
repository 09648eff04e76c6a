"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad arguments or config), 2
runtime failure.
"""
import argparse
import itertools
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import gradcheck
from .config import apply_overrides, dump_config, load_config, parse_overrides
from .core import ConfigError, InvalidSpec, PixContrastError
from .metrics import ConfusionMatrix, miou
from .model import PixelNet, predict
from .trainer import PRESETS, ablate, ablation_csv, load_dataset, train

log = logging.getLogger("pixcontrast")

CONFIG_HELP = (
    "Config resolution: built-in defaults, then --config file values, then "
    "--override key=value pairs in the order given. Files hold one "
    "'key = value' per line, '#' starts a comment, nested keys are dotted "
    "(sampling.strategy = semi_hard). Unknown keys are errors."
)


class _ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ValidationError(f"{self.prog}: {message}")


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable, applied after --config")


def build_parser():
    parser = _Parser(prog="pixcontrast", description=__doc__.splitlines()[0], epilog=CONFIG_HELP)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-images", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--size", type=int, default=32, help="image height and width")
    g.add_argument("--noise", type=float, default=data_mod.SynthSpec.noise_sigma)
    g.add_argument("--feature-dim", type=int, default=8)
    g.add_argument("--layout", choices=data_mod.LAYOUTS, default="voronoi")
    g.add_argument("--ignore-border", action="store_true", help="paint the 1-pixel border IGNORE")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one configuration", epilog=CONFIG_HELP)
    _add_config_args(t)
    t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="evaluate a saved model on a dataset split")
    _add_config_args(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--out")

    a = sub.add_parser("ablate", help="run an ablation grid", epilog=CONFIG_HELP)
    _add_config_args(a)
    a.add_argument("--preset", choices=sorted(PRESETS), help="rows of one of the ablation tables")
    a.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                   help="grid axis; repeatable, cells are the cartesian product")
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    a.add_argument("--out", required=True)

    c = sub.add_parser("check-grad", help="finite-difference check of all parameter gradients")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    return parser


def _grid(args):
    if args.preset and args.grid:
        raise _ValidationError("use either --preset or --grid, not both")
    if args.preset:
        return PRESETS[args.preset]
    axes = []
    for item in args.grid:
        if "=" not in item:
            raise _ValidationError(f"grid axis {item!r} is not KEY=V1,V2")
        key, values = item.split("=", 1)
        axes.append([(key.strip(), v.strip()) for v in values.split(",") if v.strip()])
    cells = []
    for combo in itertools.product(*axes) if axes else []:
        cells.append((",".join(f"{k}={v}" for k, v in combo), dict(combo)))
    return cells


def cmd_gen_data(args):
    spec = data_mod.SynthSpec(num_images=args.num_images, height=args.size, width=args.size,
                              num_classes=args.classes, feature_dim=args.feature_dim, noise_sigma=args.noise,
                              layout=args.layout, seed=args.seed, ignore_border=args.ignore_border)
    try:
        dataset = data_mod.generate(spec)
    except InvalidSpec as exc:
        raise _ValidationError(str(exc)) from None
    data_mod.save(dataset, args.out)
    print(f"wrote {len(dataset)} images ({len(dataset.indices('train'))} train) to {args.out}")


def cmd_train(args):
    cfg = load_config(args.config, args.override)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    dataset = load_dataset(cfg)
    report = train(dataset, cfg, out_dir=args.out)
    summary = {"final_miou": report.final_miou, "final_iou": [float(x) for x in report.final_iou],
               "intra": report.final_structure.intra, "inter": report.final_structure.inter,
               "wall_clock_s": report.wall_clock}
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"final mIoU {report.final_miou:.4f}  intra {summary['intra']:.4f}  inter {summary['inter']:.4f}"
          f"  ({report.wall_clock:.1f}s)")


def cmd_eval(args):
    cfg = load_config(args.config, args.override)
    dataset = load_dataset(cfg)
    net = PixelNet.load(args.checkpoint)
    if net.in_dim != dataset.feature_dim or net.num_classes != dataset.num_classes:
        raise _ValidationError("checkpoint does not match the dataset's feature or class count")
    cm = ConfusionMatrix(dataset.num_classes)
    for i in dataset.indices(args.split):
        pred, _ = predict(net, dataset.features[i])
        cm.update(dataset.labels[i], pred)
    mean, iou = miou(cm)
    print(f"{args.split} mIoU {mean:.4f}")
    for c, v in enumerate(iou):
        print(f"  class {c}: {v:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w") as fh:
            fh.write("split,miou," + ",".join(f"iou_{c}" for c in range(len(iou))) + "\n")
            fh.write(f"{args.split},{mean!r}," + ",".join(repr(float(v)) for v in iou) + "\n")


def cmd_ablate(args):
    cfg = load_config(args.config, args.override)
    grid = _grid(args)
    for _, overrides in grid:
        apply_overrides(cfg, {k: str(v) for k, v in overrides.items()})  # fail fast on bad keys
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "resolved.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    dataset = load_dataset(cfg)
    start = time.perf_counter()
    table = ablate(dataset, cfg, grid, seeds=args.seeds, jobs=args.jobs)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(ablation_csv(table))
    for row in table:
        print(f"{row['cell']:<28} mIoU {row['mean_miou']:.4f}  intra {row['mean_intra']:.4f}"
              f"  inter {row['mean_inter']:.4f}")
    print(f"{len(table)} cells x {len(args.seeds)} seeds in {time.perf_counter() - start:.1f}s")


def cmd_check_grad(args):
    start = time.perf_counter()
    worst, _ = gradcheck.run(args.seeds)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} over {args.seeds} seeds ({time.perf_counter() - start:.1f}s): "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "check-grad": cmd_check_grad}


def run(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = COMMANDS[args.command](args)
        return code or 0
    except (_ValidationError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PixContrastError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
