"""Command-line entry point.

    eegsal synth --n 64 --seed 7 --out ds/
    eegsal train1 --data ds/ --preset desk --out runs/s1
    eegsal train2 --data ds/ --stage1 runs/s1/stage1.ckpt --preset desk --out runs/s2
    eegsal generate --data ds/ --stage1 runs/s1/stage1.ckpt --stage2 runs/s2/stage2.ckpt \\
        --with-saliency --out runs/guided
    eegsal evaluate --data ds/ --recon guided=runs/guided/recon --recon eeg=runs/eeg/recon --out runs/eval
    eegsal saliency-predict --images some/pngs --out maps/

Every command writes ``config.json`` into its ``--out`` directory holding the
fully resolved arguments; ``--config config.json`` replays it (explicit flags
still win). Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import SyntheticSpec, generate_synthetic, load_dataset, load_image, save_dataset, save_image, split
from .errors import ConfigurationError, EegSalError
from .evaluation import (
    comparison_table,
    default_extractors,
    evaluate_run,
    read_features,
    write_grid,
)
from .lora import LoRAConfig
from .pipeline import desk_model_config
from .saliency import spectral_residual
from .training import (
    PretrainConfig,
    StageConfig,
    pipeline_from_checkpoint,
    run_stage1,
    run_stage2,
    synthetic_base,
)

log = logging.getLogger("eegsal")

CONFIG_NAME = "config.json"

# flag dest -> StageConfig field
STAGE_FLAGS = {
    "steps": "total_steps",
    "lr": "lr_max",
    "batch_size": "batch_size",
    "grad_accum": "grad_accum",
    "eta_min": "eta_min",
    "t0": "T0",
    "precision": "precision",
    "weight_decay": "weight_decay",
    "cond_dropout": "cond_dropout",
    "checkpoint_every": "checkpoint_every",
    "seed": "seed",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser):
    p.add_argument("--out", help="output directory (all artifacts go here)")
    p.add_argument("--config", help="replay a config.json written by an earlier run")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")


def _stage_args(p: argparse.ArgumentParser):
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--preset", choices=("published", "desk"), default="published",
                   help="hyperparameter defaults: published values or CPU-sized (default: published)")
    p.add_argument("--steps", type=int, help="optimization steps")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--grad-accum", type=int)
    p.add_argument("--eta-min", type=float, help="cosine floor")
    p.add_argument("--t0", type=int, help="warm-restart period in steps")
    p.add_argument("--precision", choices=("full", "half"))
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--cond-dropout", type=float)
    p.add_argument("--checkpoint-every", type=int, help="periodic checkpoints (0 = final only)")
    p.add_argument("--seed", type=int, help="training RNG seed")
    p.add_argument("--resume", help="continue from a checkpoint written by this stage")
    p.add_argument("--dry-run", action="store_true", help="write the resolved config.json and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegsal", description="EEG-to-image reconstruction with saliency guidance")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic paired dataset")
    _common(p)
    p.add_argument("--n", type=int, default=64, help="number of records")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--samples", type=int, default=250)
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--noise", type=float, default=0.5, help="EEG noise level")
    p.add_argument("--test-fraction", type=float, default=0.25, help="0 tags every record as train")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train1", help="stage 1: adapters + EEG encoder on a frozen base")
    _common(p)
    _stage_args(p)
    p.add_argument("--base", help="base checkpoint (default: pre-train one on a disjoint synthetic set)")
    p.add_argument("--lora-rank", type=int, default=8)
    p.add_argument("--lora-alpha", type=float, default=8.0)
    p.add_argument("--lora-seed", type=int, default=0)
    p.add_argument("--pretrain-records", type=int, default=64)
    p.add_argument("--pretrain-data-seed", type=int, default=100)
    p.add_argument("--pretrain-ae-steps", type=int, default=PretrainConfig.ae_steps)
    p.add_argument("--pretrain-unet-steps", type=int, default=PretrainConfig.unet_steps)
    p.add_argument("--init-seed", type=int, default=0, help="base network initialization seed")

    p = sub.add_parser("train2", help="stage 2: saliency control branch")
    _common(p)
    _stage_args(p)
    p.add_argument("--stage1", help="stage-1 checkpoint")
    p.add_argument("--control-seed", type=int, default=0)

    p = sub.add_parser("generate", help="reconstruct images from EEG")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--stage1", help="stage-1 checkpoint")
    p.add_argument("--stage2", help="stage-2 (control) checkpoint")
    arm = p.add_mutually_exclusive_group()
    arm.add_argument("--with-saliency", dest="arm", action="store_const", const="saliency")
    arm.add_argument("--eeg-only", dest="arm", action="store_const", const="eeg")
    p.add_argument("--fresh-control", action="store_true",
                   help="use an untrained control branch instead of --stage2")
    p.add_argument("--saliency-source", choices=("dataset", "fallback"), default="dataset",
                   help="conditioning maps: stored maps or spectral residual of the stimulus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=50, help="DDIM steps")
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("evaluate", help="score reconstruction directories")
    _common(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--recon", action="append", default=[], metavar="[NAME=]DIR",
                   help="directory of {id}.png reconstructions; repeat for several arms")
    p.add_argument("--gt-saliency", choices=("dataset", "fallback"), default="dataset")
    p.add_argument("--features", help="precomputed feature root (features/{extractor}/{id}.f32)")
    p.add_argument("--distance", choices=("correlation", "cosine"), default="correlation")
    p.add_argument("--eval-size", type=int, default=64)
    p.add_argument("--grid-rows", type=int, default=8)

    p = sub.add_parser("saliency-predict", help="spectral-residual saliency for a directory of images")
    _common(p)
    p.add_argument("--images", help="directory of PNG images")
    return parser


# ---------------------------------------------------------------------------
# config echo
# ---------------------------------------------------------------------------


def _dests(sub: argparse.ArgumentParser) -> set:
    return {a.dest for a in sub._actions if a.dest not in ("help", "config")}


def _subparser(parser, command) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        raise UsageError("a command is required")
    if args.config:
        sub = _subparser(parser, args.command)
        try:
            echo = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if echo.get("command") != args.command:
            raise UsageError(f"{args.config} is a {echo.get('command')!r} config, not {args.command!r}")
        stored = echo.get("args", {})
        unknown = set(stored) - _dests(sub)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        sub.set_defaults(**stored)
        args = parser.parse_args(argv)
    return args


def _write_echo(out: Path, args: argparse.Namespace, extra: dict = None):
    data = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose", "dry_run")}
    data.update(extra or {})
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps({"command": args.command, "args": data}, indent=2, sort_keys=True)
    (out / CONFIG_NAME).write_text(text + "\n")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, [])]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _stage_config(args, stage: int) -> StageConfig:
    overrides = {field: getattr(args, dest) for dest, field in STAGE_FLAGS.items() if getattr(args, dest) is not None}
    make = StageConfig.desk if args.preset == "desk" else StageConfig.published
    cfg = make(stage, **overrides)
    cfg.validate()
    # echo the resolved values so the file documents (and replays) the exact run
    for dest, field in STAGE_FLAGS.items():
        setattr(args, dest, getattr(cfg, field))
    return cfg


def _subset(ds, which):
    if which == "all":
        return ds
    sub = ds.subset(which)
    if len(sub) == 0:
        raise ConfigurationError(f"dataset has no {which!r} records")
    return sub


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require(args, "out")
    if not 0.0 <= args.test_fraction < 1.0:
        raise UsageError("--test-fraction must be in [0, 1)")
    spec = SyntheticSpec(n_records=args.n, n_classes=args.classes, channels=args.channels,
                         samples=args.samples, height=args.size, width=args.size, noise_level=args.noise)
    try:
        spec.validate()
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    ds = generate_synthetic(spec, args.seed)
    if args.test_fraction > 0:
        ds = split(ds, args.test_fraction, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    _write_echo(out, args)
    n_test = ds.splits.count("test")
    print(f"wrote {len(ds)} records ({len(ds) - n_test} train / {n_test} test), "
          f"EEG {ds.channels}x{ds.samples}, images {ds.height}x{ds.width} -> {out}")
    return 0


def _dry_run(args, out: Path) -> int:
    _write_echo(out, args)
    print((out / CONFIG_NAME).read_text(), end="")
    return 0


def cmd_train1(args) -> int:
    _require(args, "out")
    cfg = _stage_config(args, 1)
    out = Path(args.out)
    if args.dry_run:
        return _dry_run(args, out)
    _require(args, "data")
    ds = load_dataset(args.data)
    if ds.height != ds.width:
        raise ConfigurationError("only square images are supported")
    train = _subset(ds, "train")
    if args.base:
        base = load_checkpoint(args.base)
        pipe = pipeline_from_checkpoint(base)
    else:
        mcfg = desk_model_config(ds.channels, ds.samples, ds.height)
        mcfg = replace(mcfg, lora=LoRAConfig(rank=args.lora_rank, alpha=args.lora_alpha))
        pcfg = PretrainConfig(ae_steps=args.pretrain_ae_steps, unet_steps=args.pretrain_unet_steps)
        log.info("pre-training a base model on %d disjoint synthetic records", args.pretrain_records)
        pipe, base = synthetic_base(mcfg, pcfg, args.pretrain_records, args.pretrain_data_seed, args.init_seed)
        save_checkpoint(base, out / "base.ckpt")
    if pipe.config.lora.rank != args.lora_rank or pipe.config.lora.alpha != args.lora_alpha:
        pipe.config = replace(pipe.config, lora=LoRAConfig(rank=args.lora_rank, alpha=args.lora_alpha))
    resume = load_checkpoint(args.resume, base=base) if args.resume else None
    if resume is None:
        pipe.inject_lora(args.lora_seed)
    _write_echo(out, args)
    ckpt = run_stage1(pipe, train, cfg, resume=resume, out_dir=out, base_hash=base.hash, lora_seed=args.lora_seed)
    trace = ckpt.meta["loss_trace"]
    print(f"stage 1: {len(trace)} steps, final loss {trace[-1][1]:.5f} -> {out / 'stage1.ckpt'}")
    return 0


def cmd_train2(args) -> int:
    _require(args, "out")
    cfg = _stage_config(args, 2)
    out = Path(args.out)
    if args.dry_run:
        return _dry_run(args, out)
    _require(args, "data", "stage1")
    ds = load_dataset(args.data)
    train = _subset(ds, "train")
    stage1 = load_checkpoint(args.stage1)
    pipe = pipeline_from_checkpoint(stage1)
    resume = load_checkpoint(args.resume, base=stage1) if args.resume else None
    _write_echo(out, args)
    ckpt = run_stage2(pipe, train, stage1, cfg, resume=resume, out_dir=out, control_seed=args.control_seed)
    trace = ckpt.meta["loss_trace"]
    print(f"stage 2: {len(trace)} steps, final loss {trace[-1][1]:.5f} -> {out / 'stage2.ckpt'}")
    return 0


def cmd_generate(args) -> int:
    _require(args, "data", "out", "stage1")
    if args.arm is None:
        raise UsageError("choose one of --with-saliency / --eeg-only")
    if args.arm == "saliency" and not (args.stage2 or args.fresh_control):
        raise UsageError("--with-saliency needs a control branch: pass --stage2 (or --fresh-control)")
    if args.stage2 and args.fresh_control:
        raise UsageError("--stage2 and --fresh-control are mutually exclusive")
    out = Path(args.out)
    ds = _subset(load_dataset(args.data), args.split)
    stage1 = load_checkpoint(args.stage1)
    control = load_checkpoint(args.stage2, base=stage1) if args.stage2 else None
    pipe = pipeline_from_checkpoint(stage1, control=control)
    if args.fresh_control:
        pipe.init_control(0)
    _write_echo(out, args)
    recon = out / "recon"
    recon.mkdir(parents=True, exist_ok=True)
    eeg = ds.eeg()
    if args.saliency_source == "dataset":
        maps = ds.saliency_maps()
    else:
        maps = np.stack([spectral_residual(img).data for img in ds.images()])
    ids = ds.ids
    for b, start in enumerate(range(0, len(ids), args.batch_size)):
        sl = slice(start, start + args.batch_size)
        sal = maps[sl] if args.arm == "saliency" else None
        imgs = pipe.generate(eeg[sl], sal, seed=args.seed + b, n_steps=args.steps, guidance_scale=args.guidance)
        for sid, img in zip(ids[sl], imgs):
            save_image(recon / f"{sid}.png", img)
    print(f"wrote {len(ids)} reconstructions ({args.arm} arm) -> {recon}")
    return 0


def _parse_recon(spec: str) -> tuple:
    name, sep, path = spec.partition("=")
    if not sep:
        path = name
        name = Path(path.rstrip("/")).parent.name or Path(path).name
    return name, Path(path)


def cmd_evaluate(args) -> int:
    _require(args, "data", "out", "recon")
    out = Path(args.out)
    ds = _subset(load_dataset(args.data), args.split)
    ids = ds.ids
    gts = list(ds.images())
    arms = [_parse_recon(s) for s in args.recon]
    names = [n for n, _ in arms]
    if len(set(names)) != len(names):
        raise UsageError(f"duplicate arm names: {names}")
    extractors = default_extractors()
    _write_echo(out, args)
    reports, recon_sets = {}, {}
    for name, path in arms:
        recons = [load_image(path / f"{sid}.png") if (path / f"{sid}.png").is_file() else None for sid in ids]
        precomputed = None
        if args.features:
            # layout: {features}/gt/features/{extractor}/{id}.f32 and {features}/{arm}/features/...
            precomputed = {}
            keep = [i for i, r in enumerate(recons) if r is not None]
            for ex in extractors:
                arm_root, gt_root = Path(args.features) / name, Path(args.features) / "gt"
                if not keep or not (arm_root / "features" / ex.name).is_dir():
                    continue
                got = read_features(arm_root, ex.name, [ids[i] for i in keep])
                rf = np.zeros((len(ids), got.shape[1]), dtype=got.dtype)
                rf[keep] = got
                precomputed[ex.name] = (rf, read_features(gt_root, ex.name, ids))
        report = evaluate_run(recons, gts, gt_saliency_source=args.gt_saliency, extractors=extractors, ids=ids,
                              gt_maps=list(ds.saliency_maps()), precomputed=precomputed, distance=args.distance,
                              eval_size=args.eval_size)
        report.save(out / f"report_{name}.json")
        reports[name] = report
        recon_sets[name] = recons
        if report.missing:
            print(f"{name}: {len(report.missing)} missing samples: {', '.join(report.missing)}")
    table = comparison_table(reports)
    (out / "comparison.md").write_text(table)
    print(table, end="")
    rows = []
    for i in range(min(args.grid_rows, len(ids))):
        row = [gts[i]]
        for name in names:
            r = recon_sets[name][i]
            row.append(r if r is not None else np.full_like(gts[i], 0.5))
        row.append(ds.records[i].saliency)
        first = recon_sets[names[0]][i]
        row.append(spectral_residual(first).data if first is not None else np.zeros(gts[i].shape[1:]))
        rows.append(row)
    write_grid(out / "grid.png", rows, size=args.eval_size)
    return 0


def cmd_saliency_predict(args) -> int:
    _require(args, "images", "out")
    src = Path(args.images)
    files = sorted(src.glob("*.png"))
    if not files:
        raise ConfigurationError(f"no PNG images in {src}")
    out = Path(args.out)
    _write_echo(out, args)
    for f in files:
        m = spectral_residual(load_image(f))
        save_image(out / f.name, m.data)
    print(f"wrote {len(files)} saliency maps -> {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train1": cmd_train1,
    "train2": cmd_train2,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "saliency-predict": cmd_saliency_predict,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"eegsal: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _subparser(build_parser(), args.command).print_usage(sys.stderr)
        print(f"eegsal {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"eegsal {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (EegSalError, OSError) as exc:
        print(f"eegsal {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
