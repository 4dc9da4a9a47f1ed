"""Command-line entry point: ``stcnet <subcommand> [options] [--section.key value ...]``.

Failures print one line ``error: <category>: <message>`` to stderr. Usage
errors exit 2; other failures exit 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gradsuite
from .arch import ArchConfig, build, param_count, preset, shape_check
from .checkpoint import Checkpoint, load_checkpoint, model_tensors, restore_model, save_checkpoint
from .config import RunConfig, parse_config, parse_overrides
from .data import AugmentPolicy, generate, pixel_sum_histogram, read_dataset, write_dataset
from .errors import ConfigError, STCError, ShapeError
from .oracle import recount_parameters
from .runtime import thread_limit
from .train import (Trainer, TrainingDiverged, evaluate_clips, run_experiment, stride_ablation_spec, _fmt_row)
from .transfer import run_transfer


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CxTxHxW, got {text!r}") from None
    if len(dims) != 4:
        raise argparse.ArgumentTypeError(f"expected CxTxHxW, got {text!r}")
    return dims


def build_parser() -> _Parser:
    p = _Parser(prog="stcnet", description="STC networks for video classification on synthetic data.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, run_dir):
        sp.add_argument("--config", help="INI run configuration")
        sp.add_argument("--run-dir", default=run_dir, help="output directory (default %(default)s)")

    t = sub.add_parser("train", help="train from scratch or sweep an ablation axis")
    common(t, "runs/train")
    t.add_argument("--ablation", help="depth | temporal-depth | branch-mode | stride | family")
    t.add_argument("--epochs", type=int, help="override optim.max_epochs")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--checkpoint-every", type=int, default=1)

    tr = sub.add_parser("transfer", help="2D -> 3D supervision transfer")
    common(tr, "runs/transfer")
    tr.add_argument("--steps", type=int, help="override transfer.steps")

    e = sub.add_parser("eval", help="video-level evaluation of a checkpoint")
    common(e, "runs/eval")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="val", choices=("train", "val"))

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--target", default="all", choices=("all", *gradsuite.TARGETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-4)

    pr = sub.add_parser("params", help="parameter counts and shape report")
    pr.add_argument("--arch", default="stc-resnet-101")
    pr.add_argument("--input", type=_dims, help="CxTxHxW (default: the preset input)")

    d = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(d, "runs/data")
    d.add_argument("--out", help="dataset directory (default: <run-dir>)")
    return p


def _config(args, extra: Sequence[str], forced: Optional[dict] = None) -> RunConfig:
    overrides = parse_overrides(extra)
    for section, values in (forced or {}).items():
        overrides.setdefault(section, {}).update(values)
    return parse_config(args.config, overrides)


def _dataset(cfg: RunConfig, stride_sweep: bool = False):
    path = cfg.get("data", "dataset")
    if path:
        return read_dataset(path)
    spec = cfg.synth()
    return generate(stride_ablation_spec(spec) if stride_sweep else spec)


def _policy(cfg: RunConfig, dataset) -> AugmentPolicy:
    d = cfg.sections["data"]
    mean = dataset.channel_mean("train") if d["mean_subtract"] else None
    return AugmentPolicy(crop=d["crop"], five_crop=d["five_crop"], flip_p=d["flip_p"], mean=mean)


def cmd_train(args, extra) -> int:
    forced = {}
    if args.ablation:
        forced.setdefault("ablation", {})["axis"] = args.ablation
    if args.epochs:
        forced.setdefault("optim", {})["max_epochs"] = str(args.epochs)
    cfg = _config(args, extra, forced)
    run_dir = Path(args.run_dir)
    cfg.echo(run_dir)
    axis = cfg.ablation_axis
    dataset = _dataset(cfg, stride_sweep=axis == "stride")
    if axis:
        rows, _ = run_experiment(cfg.arch(), cfg.optim(), dataset, axis, run_dir, cfg.seed, log=print)
        for r in rows:
            print(f"{axis}={r['setting']}: train_acc {r['train_acc']:.4f} val_acc {r['val_acc']:.4f} "
                  f"shuffled_val_acc {r['shuffled_val_acc']:.4f} ({r['epochs']} epochs)")
        print(f"wrote {run_dir / f'ablation-{axis}.csv'}")
        return 0
    model = build(cfg.arch(), cfg.seed)
    d = cfg.sections["data"]
    trainer = Trainer(model, cfg.optim(), dataset, cfg.seed, clip_len=d["clip_len"], stride=d["stride"],
                      policy=_policy(cfg, dataset), allow_free_stride=d["allow_free_stride"])
    if args.resume:
        trainer.resume(args.resume)
        print(f"resumed at epoch {trainer.epoch}")
    try:
        record = trainer.fit(checkpoint_path=run_dir / "checkpoint.stcn", checkpoint_every=args.checkpoint_every,
                             on_epoch=lambda r: print(_fmt_row(r), flush=True))
    except TrainingDiverged as exc:
        exc.record.write(run_dir)
        raise
    record.write(run_dir)
    s = record.summary()
    print(f"final train_acc {s['final']['train_acc']:.4f} val_acc {s['final']['val_acc']:.4f} "
          f"after {s['epochs']} epochs")
    return 0


def cmd_transfer(args, extra) -> int:
    forced = {"transfer": {"steps": str(args.steps)}} if args.steps else None
    cfg = _config(args, extra, forced)
    run_dir = Path(args.run_dir)
    cfg.echo(run_dir)
    dataset = _dataset(cfg)
    result = run_transfer(cfg.transfer(), dataset, cfg.seed, run_dir, log=print)
    tensors, groups = {}, {}
    for prefix, module, group in (("student.", result.student, "student"), ("head.", result.head, "head"),
                                  ("teacher.", result.teacher, "teacher")):
        t, _ = model_tensors(module, prefix, group)
        tensors.update(t)
        groups.update({k: group for k in t})
    config = cfg.transfer().to_dict()
    save_checkpoint(Checkpoint(tensors, groups, config, extra={"summary": result.summary()}),
                    run_dir / "transfer.stcn")
    (run_dir / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    s = result.summary()
    print(f"held-out matching accuracy {s['heldout_accuracy']:.4f}; teacher unchanged: {s['teacher_unchanged']}")
    print(f"linear probe: transferred {s['probe_transferred']:.4f} random {s['probe_random']:.4f}")
    return 0


def cmd_eval(args, extra) -> int:
    cfg = _config(args, extra)
    ckpt = load_checkpoint(args.checkpoint)
    arch = ArchConfig(**ckpt.config)
    model = build(arch)
    restore_model(model, ckpt.tensors)
    dataset = _dataset(cfg)
    clips = dataset.split(args.split)
    clip_len = ckpt.extra.get("clip_len") or arch.input_dims[1]
    stride = ckpt.extra.get("stride", 1)
    loss, acc = evaluate_clips(model, clips, clip_len, stride, allow_free_stride=True)
    print(f"{args.split}: {len(clips)} videos, loss {loss:.4f}, accuracy {acc:.4f}")
    return 0


def cmd_gradcheck(args, extra) -> int:
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    results = gradsuite.run(args.target, args.seed)
    worst = max(results, key=lambda r: r.max_rel_error)
    for r in results:
        print(f"{r.name:<40} size {r.size:>5}  max rel err {r.max_rel_error:.3e}  "
              f"{'PASS' if r.passed(args.tol) else 'FAIL'}")
    ok = worst.max_rel_error < args.tol
    print(f"max rel error {worst.max_rel_error:.3e} ({worst.name}) {'PASS' if ok else 'FAIL'} at {args.tol:g}")
    if not ok:
        print(f"error: numeric: gradient check failed for {worst.name}", file=sys.stderr)
        return 1
    return 0


def cmd_params(args, extra) -> int:
    overrides = parse_overrides(extra).get("arch", {})
    if set(parse_overrides(extra)) - {"arch"}:
        raise ConfigError("params accepts only --arch.* overrides")
    cfg = parse_config(overrides={"arch": {"preset": args.arch, **overrides}}).arch()
    if args.input:
        cfg = cfg.replace(input_dims=args.input)
    graph = build(cfg)
    counts = param_count(graph)
    recount = recount_parameters(graph)
    report = shape_check(graph)
    print(f"arch {cfg.name}  family {cfg.family}  blocks {cfg.blocks}  cardinality {cfg.cardinality}  "
          f"reduction {cfg.reduction}")
    print(f"input (C,T,H,W) {cfg.input_dims}")
    print(f"parameters: total {counts.total}  backbone {counts.backbone_total}  stc {counts.stc_total}")
    print(f"independent recount {recount} ({'match' if recount == counts.total else 'MISMATCH'})")
    print(report.format())
    if recount != counts.total:
        raise ShapeError(f"registry count {counts.total} != recount {recount}")
    if not report.ok:
        raise ShapeError("; ".join(report.mismatches))
    return 0


def cmd_gen_data(args, extra) -> int:
    cfg = _config(args, extra)
    out = Path(args.out or args.run_dir)
    dataset = generate(cfg.synth())
    write_dataset(dataset, out)
    cfg.echo(out)
    print(f"wrote {len(dataset.clips)} clips ({len(dataset.train)} train / {len(dataset.val)} val) to {out}")
    print(f"pixel-sum histogram {pixel_sum_histogram(dataset)}")
    return 0


COMMANDS = {"train": cmd_train, "transfer": cmd_transfer, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "params": cmd_params, "gen-data": cmd_gen_data}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        bad = [a for a in extra if a.startswith("-") and not (a.startswith("--") and "." in a.split("=")[0])]
        if bad:
            raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
        with thread_limit():
            return COMMANDS[args.command](args, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except STCError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
