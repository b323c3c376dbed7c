"""Command-line entry point.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 checkpoint or scale mismatch, 1 diverged training.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import model as M
from . import training as T
from .data import DatasetError, load_folder
from .imaging import ColorspaceError, read_png, write_png
from .tensor import ShapeError

log = logging.getLogger("dafr")

OK, USAGE, DATA, ARTIFACT = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _write_manifest(path, command, args, seed=None, plan=None, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if plan is not None:
        manifest["plan"] = T.plan_dict(plan)
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _load_model(path):
    try:
        return M.load_checkpoint(path)[0]
    except OSError as exc:
        raise CliError(ARTIFACT, f"cannot read checkpoint {path}: {exc}") from exc
    except M.CheckpointError as exc:
        raise CliError(ARTIFACT, str(exc)) from exc


def _plan(args, phase):
    try:
        plan = T.load_plan(args.config) if args.config else T.TrainPlan()
    except OSError as exc:
        raise CliError(USAGE, f"cannot read plan {args.config}: {exc}") from exc
    changes = {"phase": phase, "dataset": None if args.synthetic else args.dataset}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.epochs is not None:
        changes["max_epochs"] = args.epochs
    if args.max_iterations is not None:
        changes["max_iterations"] = args.max_iterations
    return replace(plan, **changes).validate()


def _save_run(args, command, plan, net, report):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(net, out / "model.ckpt", seed=plan.seed, step=len(report))
    report.write_csv(out / "report.csv")
    _write_manifest(out / "manifest.json", command, args, plan.seed, plan,
                    {"iterations": len(report), "outputs": ["model.ckpt", "report.csv"]})
    last = report.records[-1].loss if report.records else float("nan")
    print(f"{command}: {len(report)} iterations, final loss {last:.6g}; wrote {out}")


def cmd_train_step1(args):
    plan = _plan(args, T.STEP1)
    net, report = T.train_step1(plan)
    _save_run(args, "train-step1", plan, net, report)
    return OK


def cmd_train_step2(args):
    plan = _plan(args, T.STEP2)
    pretrained = _load_model(args.pretrained) if args.pretrained else None
    if pretrained is not None and pretrained.kind != M.RESIDUAL:
        raise CliError(ARTIFACT, f"{args.pretrained} is not a residual network")
    net, report = T.train_step2(plan, pretrained)
    _save_run(args, "train-step2", plan, net, report)
    return OK


def cmd_finetune_scale(args):
    plan = _plan(args, T.FINETUNE)
    base = _load_model(args.model)
    if base.kind != M.DAFR:
        raise CliError(ARTIFACT, f"{args.model} is not a DAFR model")
    net, report = T.finetune_scale(base, args.scale, plan)
    _save_run(args, "finetune-scale", plan, net, report)
    return OK


def cmd_sr(args):
    net = _load_model(args.model)
    if net.kind != M.DAFR:
        raise CliError(ARTIFACT, f"{args.model} is not a DAFR model")
    if args.scale is not None and args.scale != net.scale:
        raise CliError(ARTIFACT, f"model upscales by {net.scale}, not {args.scale}")
    try:
        img = read_png(args.input)
    except (OSError, ValueError) as exc:
        raise CliError(DATA, f"cannot read {args.input}: {exc}") from exc
    out = T.super_resolve(net, img)
    output = Path(args.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    write_png(out, output)
    _write_manifest(output.with_name(output.stem + ".manifest.json"), "sr", args,
                    extra={"scale": net.scale, "outputs": [output.name]})
    print(f"{args.input} {img.width}x{img.height} -> {output} {out.width}x{out.height}")
    return OK


def cmd_eval(args):
    net = None if args.bicubic else _load_model(args.model)
    S = args.scale
    if S is None:
        if net is None or net.kind != M.DAFR:
            raise CliError(USAGE, "--scale is required unless a DAFR model is given")
        S = net.scale
    if S < 2:
        raise CliError(USAGE, f"--scale must be >= 2, got {S}")
    if net is not None and net.kind == M.DAFR and net.scale != S:
        raise CliError(ARTIFACT, f"model upscales by {net.scale}, not {S}")
    try:
        images, names = load_folder(args.dataset)
    except DatasetError as exc:
        raise CliError(DATA, str(exc)) from exc
    if not images:
        raise CliError(DATA, f"no readable images in {args.dataset}")
    shave = S if args.shave is None else args.shave
    fmt = repr if args.precise else "{:.2f}".format
    scores = []
    for name, img in zip(names, images):
        scores.append(T.image_psnrs(net, [img], S, shave)[0])
        print(f"{name}\t{fmt(scores[-1])}")
    print(f"average\t{fmt(sum(scores) / len(scores))}")
    return OK


def cmd_param_count(args):
    if min(args.n, args.m, args.c) < 1:
        raise CliError(USAGE, "--n, --m and --c must be positive")
    print(f"paper: {M.param_count_paper(args.n, args.m)}")
    exact = M.param_count_exact(M.build_dafr(M.NetworkConfig(n=args.n, m=args.m, c=args.c), 0))
    for key, value in exact.items():
        if key != "paper":
            print(f"{key}: {value}")
    return OK


def _train_flags(p, needs_out=True):
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--dataset", help="folder of HR training images")
    source.add_argument("--synthetic", action="store_true", help="use the seeded synthetic set")
    p.add_argument("--config", help="plan file ([plan], [network], [optim], [loss] sections)")
    p.add_argument("--out", required=needs_out, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="epoch cap")
    p.add_argument("--max-iterations", type=int)


def build_parser():
    parser = argparse.ArgumentParser(prog="dafr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-step1", help="train the residual network from scratch")
    _train_flags(p)
    p.set_defaults(func=cmd_train_step1)

    p = sub.add_parser("train-step2", help="train a DAFR model from a step-1 network")
    _train_flags(p)
    p.add_argument("--pretrained", help="step-1 checkpoint; random stack when omitted")
    p.set_defaults(func=cmd_train_step2)

    p = sub.add_parser("finetune-scale", help="move a DAFR model to another scale factor")
    _train_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.set_defaults(func=cmd_finetune_scale)

    p = sub.add_parser("sr", help="upscale one image")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, help="expected factor; must match the model")
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="Y-channel PSNR over a folder of HR images")
    what = p.add_mutually_exclusive_group(required=True)
    what.add_argument("--model")
    what.add_argument("--bicubic", action="store_true")
    p.add_argument("--dataset", required=True)
    p.add_argument("--scale", type=int)
    p.add_argument("--shave", type=int, help="border pixels ignored (default: the scale)")
    p.add_argument("--precise", action="store_true", help="print full precision")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("param-count", help="parameter counts for a configuration")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--c", type=int, default=1)
    p.set_defaults(func=cmd_param_count)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s", stream=sys.stderr,
    )
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except M.CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ARTIFACT
    except (DatasetError, ShapeError, ColorspaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA
    except (M.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA
    except FloatingPointError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
