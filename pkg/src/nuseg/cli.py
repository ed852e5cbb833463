"""Command-line entry point.

Subcommands: gen-data, train, infer, eval, roc, report. Every command is
deterministic given its flags and input files; seeds are the only entropy
source. Exit codes: 0 success, 1 runtime failure, 2 usage error (including
a named config file that does not exist). Summary output goes to stdout as
stable `key=value` lines.
"""

import argparse
import os
import sys

import numpy as np

from .data import DatasetTemplate, gen_dataset, load_dataset, load_pgm, save_pgm
from .io import save_tensor
from .metrics import compute_report, roc, write_report_csv, write_roc_csv, write_roc_svg
from .model import build_model, infer, parse_model_config
from .prng import Prng
from .tensor import Tensor
from .train import (TrainConfig, evaluate_dataset, open_checkpoint,
                    parse_train_config, train_loop)

__all__ = ["main"]


class UsageError(Exception):
    """Operator mistake (bad flag value, missing config file): exit code 2."""


def _read_config(path, what: str) -> str:
    if not os.path.isfile(path):
        raise UsageError(f"{what} file not found: {path}")
    with open(path) as fh:
        return fh.read()


def _load_scores(params, dataset) -> tuple:
    scores = [infer(params, s.image).data[0, 0] for s in dataset]
    gts = [s.mask.data[0, 0] for s in dataset]
    return scores, gts


def cmd_gen_data(args) -> int:
    template = DatasetTemplate(width=args.size, height=args.size,
                               max_targets=args.max_targets)
    gen_dataset(args.out, args.n, template, args.seed)
    print(f"out={args.out}")
    print(f"n={args.n}")
    print(f"size={args.size}")
    print(f"seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    model_cfg = (parse_model_config(_read_config(args.model_cfg, "model config"))
                 if args.model_cfg else parse_model_config(""))
    train_cfg = (parse_train_config(_read_config(args.train_cfg, "train config"))
                 if args.train_cfg else TrainConfig())
    dataset = load_dataset(args.data)
    params = build_model(model_cfg, Prng(train_cfg.seed))
    curve = args.curve or args.out + ".curve.csv"
    result = train_loop(params, dataset, train_cfg, ckpt_path=args.out,
                        curve_path=curve, ckpt_every=args.ckpt_every)
    rows = result["rows"]
    print(f"steps={len(rows)}")
    if rows:
        print(f"final_loss={rows[-1][1]!r}")
        print(f"final_iou={rows[-1][2]!r}")
    print(f"ckpt={args.out}")
    print(f"curve={curve}")
    return 0


def cmd_infer(args) -> int:
    params, _ = open_checkpoint(args.ckpt)
    img = load_pgm(args.image)
    x = Tensor(np.repeat(img[None, None], 3, axis=1))
    prob = infer(params, x)
    save_tensor(args.out, prob.data)
    pgm_path = args.out + ".pgm"
    save_pgm(pgm_path, prob.data[0, 0])
    print(f"out={args.out}")
    print(f"pgm={pgm_path}")
    print(f"min={float(prob.data.min())!r}")
    print(f"max={float(prob.data.max())!r}")
    return 0


def cmd_eval(args) -> int:
    params, _ = open_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    result = evaluate_dataset(params, dataset, args.thr)
    if args.out:
        report = compute_report(result["scores"], result["gts"], thr=args.thr)
        write_report_csv(report, args.out)
        print(f"report={args.out}")
    print(f"n={len(dataset)}")
    print(f"thr={args.thr!r}")
    print(f"iou={result['iou']!r}")
    print(f"niou={result['niou']!r}")
    return 0


def cmd_roc(args) -> int:
    params, _ = open_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    scores, gts = _load_scores(params, dataset)
    curve = roc(scores, gts, args.n_thr, args.fpr_mode)
    write_roc_csv(curve, args.out)
    print(f"roc={args.out}")
    if args.svg:
        write_roc_svg(curve, args.svg)
        print(f"svg={args.svg}")
    print(f"n_thresholds={curve.thresholds.size}")
    print(f"fpr_mode={curve.fpr_mode}")
    print(f"auc={curve.auc!r}")
    return 0


def cmd_report(args) -> int:
    params, _ = open_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    scores, gts = _load_scores(params, dataset)
    report = compute_report(scores, gts, thr=args.thr, n_thresholds=args.n_thr,
                            fpr_mode=args.fpr_mode)
    os.makedirs(args.out_dir, exist_ok=True)
    report_path = os.path.join(args.out_dir, "report.csv")
    roc_path = os.path.join(args.out_dir, "roc.csv")
    svg_path = os.path.join(args.out_dir, "roc.svg")
    write_report_csv(report, report_path)
    write_roc_csv(report.roc, roc_path)
    write_roc_svg(report.roc, svg_path)
    print(f"report={report_path}")
    print(f"roc={roc_path}")
    print(f"svg={svg_path}")
    print(f"iou={report.iou!r}")
    print(f"niou={report.niou!r}")
    print(f"auc={report.roc.auc!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nuseg",
        description="Small-object segmentation: data generation, training, "
                    "inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("gen-data", formatter_class=fmt,
                       help="write a synthetic dataset of image/mask PGM pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, default=8, help="number of samples")
    p.add_argument("--size", type=int, default=64, help="square image size in px")
    p.add_argument("--seed", type=int, default=0, help="dataset seed")
    p.add_argument("--max-targets", type=int, default=2, help="targets per scene cap")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", formatter_class=fmt,
                       help="train a model on a dataset directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--model-cfg", default=None, help="model config file (default: tiny preset)")
    p.add_argument("--train-cfg", default=None, help="train config file (default settings)")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--curve", default=None, help="loss curve CSV path (default: <out>.curve.csv)")
    p.add_argument("--ckpt-every", type=int, default=0,
                   help="also checkpoint every N epochs (0 = only at end)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", formatter_class=fmt,
                       help="run a checkpoint on one image")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="input PGM image")
    p.add_argument("--out", required=True, help="probability map output (tensor file)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", formatter_class=fmt,
                       help="fixed-threshold IoU/nIoU over a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--thr", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--out", default=None, help="also write metric,value CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("roc", formatter_class=fmt,
                       help="threshold sweep over a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--n-thr", type=int, default=33, help="number of thresholds")
    p.add_argument("--fpr-mode", choices=("standard", "paper_literal"),
                   default="standard", help="false-positive-rate definition")
    p.add_argument("--out", default="roc.csv", help="thr,fpr,tpr CSV path")
    p.add_argument("--svg", default=None, help="also write an SVG plot here")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("report", formatter_class=fmt,
                       help="full evaluation: report.csv + roc.csv + roc.svg")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--thr", type=float, default=0.5, help="binarization threshold")
    p.add_argument("--n-thr", type=int, default=33, help="number of ROC thresholds")
    p.add_argument("--fpr-mode", choices=("standard", "paper_literal"),
                   default="standard", help="false-positive-rate definition")
    p.add_argument("--out-dir", required=True, help="directory for the three files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
