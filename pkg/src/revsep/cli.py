"""Command-line interface: ``revsep <command> [options]``.

Commands: gen-data, train, eval, solve, refine, degrade.  Any command also
accepts ``--config FILE`` holding flat ``key = value`` lines (keys are the
long option names without dashes, ``-`` or ``_`` alike); explicit flags
override the file.  Exit status is 0 on success, 2 on usage errors and 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from revsep.data import (DEGRADATIONS, DegradationSpec, SceneDataset, build_dataset, degrade, load_png, quantize,
                         read_dataset, read_manifest, save_png, scene_specs, write_dataset)
from revsep.metrics import METRIC_KEYS

BOOL_WORDS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


class UsageError(Exception):
    pass


def _probability(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="revsep", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="key=value defaults for this command")
        return p

    p = command("gen-data", "generate a synthetic concealed-object dataset")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--n", type=_positive_int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--concealment", type=_probability, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=0, help="index of the first scene (for disjoint splits)")
    p.add_argument("--degrade", choices=DEGRADATIONS, default="none", metavar="KIND")
    p.add_argument("--severity", type=_probability, default=0.0)

    p = command("train", "train the unfolding network on a dataset directory")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--val", metavar="DIR", help="validation dataset logged each epoch")
    p.add_argument("--log", metavar="CSV", help="per-epoch log (default: next to the checkpoint)")
    p.add_argument("--k", type=_positive_int, default=3)
    p.add_argument("--fine-stages", default="last", help="'last', 'none' or comma-separated stage numbers")
    p.add_argument("--degradation-mode", action="store_true")
    p.add_argument("--blco", action="store_true", help="degradation mode with feature exchange")
    p.add_argument("--epochs", type=_positive_int, default=200)
    p.add_argument("--batch-size", type=_positive_int, default=8)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--feat-channels", type=_positive_int, default=32)
    p.add_argument("--variant", default="PM", choices=("PM", "CM1", "CM2", "CM3", "CM4", "CM5"))
    p.add_argument("--seed", type=int, default=0)

    p = command("eval", "evaluate a checkpoint and write metric reports")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--report", required=True, metavar="JSON")
    p.add_argument("--csv", metavar="CSV", help="per-image rows (default: report path with .csv)")
    p.add_argument("--masks-dir", metavar="DIR")
    p.add_argument("--no-refine", action="store_true", help="skip FINE at inference")
    p.add_argument("--seed", type=int, default=0)

    p = command("solve", "separate one image with the classical solver")
    p.add_argument("--image", required=True, metavar="PNG")
    p.add_argument("--out", required=True, metavar="PNG")
    p.add_argument("--variant", default="PM", choices=("PM", "CM1", "CM2", "CM3", "CM4", "CM5"))
    p.add_argument("--max-iters", type=_positive_int, default=100)
    p.add_argument("--prox", default="median3", choices=("median3", "identity"))
    p.add_argument("--background", metavar="PNG", help="also write the estimated background")

    p = command("refine", "refine external coarse masks with a trained network")
    p.add_argument("--coarse-dir", required=True, metavar="DIR")
    p.add_argument("--images", required=True, metavar="DIR", help="image PNGs or a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=0)

    p = command("degrade", "apply a degradation to a dataset or a directory of PNGs")
    p.add_argument("--in", dest="src", required=True, metavar="DIR")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--kind", required=True, choices=DEGRADATIONS)
    p.add_argument("--severity", required=True, type=_probability)
    p.add_argument("--seed", type=int, default=0)
    return parser


# --------------------------------------------------------------------------- config files

def read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _scan(argv, commands):
    """Locate the subcommand and the ``--config`` value without full parsing."""
    command = next((a for a in argv if a in commands), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def _apply_config(parser, argv):
    """Parse ``argv`` with defaults taken from ``--config`` when one is given."""
    argv = list(sys.argv[1:] if argv is None else argv)
    choices = parser._subparsers._group_actions[0].choices
    command, path = _scan(argv, choices)
    if command is None or path is None:
        return parser.parse_args(argv)
    subparser = choices[command]
    actions = {a.dest: a for a in subparser._actions}
    try:
        values = read_config(path)
    except OSError as exc:
        subparser.error(f"cannot read config: {exc}")
    except UsageError as exc:
        subparser.error(str(exc))
    defaults = {}
    for key, value in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            subparser.error(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in BOOL_WORDS:
                subparser.error(f"config key {key!r} expects a boolean")
            defaults[key] = BOOL_WORDS[value.lower()]
            continue
        try:
            converted = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            subparser.error(f"config key {key!r}: {exc}")
        if action.choices is not None and converted not in action.choices:
            subparser.error(f"config key {key!r}: invalid choice {value!r}")
        defaults[key] = converted
        action.required = False
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


# --------------------------------------------------------------------------- commands

def _png_names(directory):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"no such directory: {directory}")
    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(".png"))
    if not names:
        raise FileNotFoundError(f"no PNG files in {directory}")
    return names


def cmd_gen_data(args):
    deg = None
    if args.degrade != "none":
        deg = DegradationSpec(args.degrade, args.severity, args.seed)
    specs = scene_specs(args.n, args.seed, args.start, args.size, args.concealment)
    ids = [f"{args.start + i:04d}" for i in range(args.n)]
    write_dataset(args.out, quantize(build_dataset(specs, deg, ids)))
    print(f"wrote {args.n} scenes to {args.out}")


def _fine_stages(text, K):
    text = text.strip().lower()
    if text == "last":
        return (K,)
    if text in ("none", ""):
        return ()
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise UsageError(f"--fine-stages: expected 'last', 'none' or stage numbers, got {text!r}")


def cmd_train(args):
    from revsep.losses import LossWeightsConfig
    from revsep.network import NetworkConfig
    from revsep.training import train

    fine = _fine_stages(args.fine_stages, args.k)
    ds = read_dataset(args.data)
    val = read_dataset(args.val) if args.val else None
    net_cfg = NetworkConfig(
        K=args.k, fine_stages=fine, image_size=ds.images.shape[1],
        degradation_mode=args.degradation_mode or args.blco, feature_exchange=args.blco,
        feat_channels=args.feat_channels, model_variant=args.variant,
    )
    loss_cfg = LossWeightsConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs)
    log_path = args.log or os.path.splitext(args.out)[0] + ".log.csv"
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    res = train(ds, net_cfg, loss_cfg, seed=args.seed, val=val, log_path=log_path, ckpt_path=args.out)
    last = res.log[-1]
    print(f"trained {args.epochs} epoch(s); final loss {last['total_loss']:.4f}; checkpoint {args.out}")


def _write_masks(directory, ids, masks):
    os.makedirs(directory, exist_ok=True)
    for item_id, m in zip(ids, masks):
        save_png(os.path.join(directory, f"{item_id}.png"), m, rgb=False)


def cmd_eval(args):
    from revsep.network import load_checkpoint
    from revsep.training import evaluate

    ds = read_dataset(args.data)
    net, _ = load_checkpoint(args.ckpt)
    report, rows, preds = evaluate(net, ds, seed=args.seed, refine=not args.no_refine)
    out = dict(report.as_dict(), n_images=len(ds))
    os.makedirs(os.path.dirname(os.path.abspath(args.report)), exist_ok=True)
    with open(args.report, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = args.csv or os.path.splitext(args.report)[0] + ".csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("image_id",) + METRIC_KEYS)
        for item_id, row in sorted(zip(ds.ids, rows)):
            writer.writerow([item_id] + [repr(float(row[k])) for k in METRIC_KEYS])
    if args.masks_dir:
        _write_masks(args.masks_dir, ds.ids, preds)
    print(" ".join(f"{k}={out[k]:.4f}" for k in METRIC_KEYS))


def cmd_solve(args):
    from revsep.solver import SolverConfig, solve

    image = load_png(args.image, rgb=True)
    res = solve(image, SolverConfig(max_iters=args.max_iters, prox_variant=args.prox, model_variant=args.variant))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    save_png(args.out, res.S, rgb=False)
    if args.background:
        save_png(args.background, res.B, rgb=True)
    print(f"{res.n_iter} iteration(s); mask written to {args.out}")


def _image_dir(path):
    sub = os.path.join(path, "images")
    return sub if os.path.isdir(sub) else path


def cmd_refine(args):
    from revsep.network import load_checkpoint

    img_dir = _image_dir(args.images)
    names = _png_names(args.coarse_dir)
    missing = [n for n in names if not os.path.exists(os.path.join(img_dir, n))]
    if missing:
        raise FileNotFoundError(f"no image for coarse mask(s) {', '.join(missing[:3])} in {img_dir}")
    images = np.stack([load_png(os.path.join(img_dir, n), rgb=True) for n in names])
    coarse = np.stack([load_png(os.path.join(args.coarse_dir, n), rgb=False) for n in names])
    net, _ = load_checkpoint(args.ckpt)
    refined = net.predict(images, seed=args.seed, refine=True, init_masks=coarse)[:, -1]
    _write_masks(args.out, [os.path.splitext(n)[0] for n in names], refined)
    print(f"refined {len(names)} mask(s) into {args.out}")


def cmd_degrade(args):
    spec = DegradationSpec(args.kind, args.severity, args.seed)
    if os.path.exists(os.path.join(args.src, "manifest.json")):
        meta = read_manifest(args.src)
        ds = read_dataset(args.src)
        images = np.stack([degrade(img, DegradationSpec(spec.kind, spec.severity, spec.seed * 1000003 + i))
                           for i, img in enumerate(ds.clean)])
        out = SceneDataset(images, ds.masks, ds.edges, ds.clean, meta["ids"], meta["specs"], spec)
        write_dataset(args.out, quantize(out))
        print(f"degraded {len(ds)} scene(s) into {args.out}")
        return
    names = _png_names(args.src)
    os.makedirs(args.out, exist_ok=True)
    for i, name in enumerate(names):
        img = load_png(os.path.join(args.src, name), rgb=True)
        item = DegradationSpec(spec.kind, spec.severity, spec.seed * 1000003 + i)
        save_png(os.path.join(args.out, name), degrade(img, item), rgb=True)
    print(f"degraded {len(names)} image(s) into {args.out}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "solve": cmd_solve,
    "refine": cmd_refine,
    "degrade": cmd_degrade,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"revsep: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"revsep: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
