"""Command line surface: reproducible experiment recipes over the package
modules. Every command validates its config, runs one pipeline, and writes a
run manifest recording the resolved options, config hash, seeds and produced
artifacts, so any run can be replayed from the manifest alone.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .core import (ConfigError, DatasetManifest, ExperimentConfig, LabelSpace,
                   ManifestError, ManifestRecord, config_with, load_config,
                   load_manifest, save_manifest)
from .trainer import DivergenceError

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


def _add_common(p: argparse.ArgumentParser, config_required: bool = True):
    p.add_argument("--config", required=config_required, help="experiment config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override rng_seed")


_OVERRIDE_FLAGS = [
    ("--resize-size", "resize_size", int),
    ("--low-res-equalize", "low_res_equalize", int),
    ("--patch-size", "patch_size", int),
    ("--patches-per-image", "patches_per_image", int),
    ("--temperature", "temperature", float),
    ("--learning-rate", "learning_rate", float),
    ("--lr-decay-factor", "lr_decay_factor", float),
    ("--lr-decay-interval", "lr_decay_interval", int),
    ("--per-class-batch", "per_class_batch", int),
    ("--max-epochs", "max_epochs", int),
    ("--checkpoint-epoch", "checkpoint_epoch", int),
]


def _add_config_overrides(p: argparse.ArgumentParser):
    for flag, _, typ in _OVERRIDE_FLAGS:
        p.add_argument(flag, type=typ, default=None)


def _resolved_config(args) -> ExperimentConfig:
    overrides = {key: getattr(args, key) for _, key, _ in _OVERRIDE_FLAGS
                 if getattr(args, key, None) is not None}
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    return load_config(args.config, overrides)


def _config_base(args) -> Path:
    return Path(args.config).resolve().parent


def _load_config_manifest(config: ExperimentConfig, which: str, base: Path):
    path = getattr(config, which)
    if not path:
        raise ConfigError(f"config does not set {which}")
    p = Path(path)
    if not p.is_absolute():
        p = base / p
    return load_manifest(p), p.parent


def write_run_manifest(out_dir: Path, command: str, options: dict,
                       config: ExperimentConfig | None, artifacts: list) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entry = {
        "command": command,
        "version": __version__,
        "options": {k: (str(v) if isinstance(v, Path) else v) for k, v in options.items()},
        "artifacts": [str(a) for a in artifacts],
    }
    if config is not None:
        cfg = asdict(config)
        cfg["class_names"] = list(cfg["class_names"])
        entry["config"] = cfg
        entry["config_sha256"] = hashlib.sha256(
            json.dumps(cfg, sort_keys=True).encode()).hexdigest()
        entry["rng_seed"] = config.rng_seed
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(entry, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_gen_zoo(args) -> int:
    from .zoo import builtin_specs, make_zoo_dataset
    specs = builtin_specs(args.resolution)
    if args.arch:
        wanted = [a.strip() for a in args.arch.split(",")]
        byname = {s.name: s for s in specs}
        missing = [a for a in wanted if a not in byname]
        if missing:
            raise ConfigError(f"unknown architectures: {','.join(missing)}")
        specs = [byname[a] for a in wanted]
    out = Path(args.out)
    manifest = make_zoo_dataset(specs, args.seeds, args.n, out)
    write_run_manifest(out, "gen-zoo",
                       {"seeds": args.seeds, "n": args.n, "resolution": args.resolution,
                        "arch": args.arch},
                       None, [out / "manifest.csv", out / "zoo.txt"])
    print(f"zoo dataset: {len(manifest)} records in {out}")
    return 0


def _naturals_manifest(args) -> tuple[DatasetManifest, Path]:
    if args.manifest:
        p = Path(args.manifest)
        return load_manifest(p), p.parent
    if not args.naturals:
        raise ConfigError("gen-transforms needs --naturals DIR or --manifest FILE")
    root = Path(args.naturals)
    paths = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in IMAGE_EXTS) if root.is_dir() else []
    if not paths:
        raise ManifestError(f"no images found in {root}")
    records = tuple(ManifestRecord(p.name, "natural", "none", "none", 0,
                                   "naturals", "train") for p in paths)
    return DatasetManifest(records), root


def cmd_gen_transforms(args) -> int:
    from .transforms import build_bank, export_bank_table, generate_pretrain_dataset, reduced_bank
    naturals, base = _naturals_manifest(args)
    bank = build_bank()
    if args.subset:
        bank = reduced_bank(bank, args.subset)
    out = Path(args.out)
    manifest = generate_pretrain_dataset(naturals, bank, out, args.per_class,
                                         args.seed or 0, manifest_base=base)
    (out / "bank.tsv").write_text(export_bank_table(bank))
    write_run_manifest(out, "gen-transforms",
                       {"per_class": args.per_class, "subset": args.subset,
                        "seed": args.seed or 0},
                       None, [out / "manifest.csv", out / "bank.tsv"])
    print(f"transform dataset: {len(manifest)} records over {len(bank)} classes in {out}")
    return 0


def _transform_label_space(manifest: DatasetManifest) -> tuple[str, ...]:
    names = sorted({r.class_label for r in manifest}, key=int)
    return tuple(names)


def cmd_pretrain(args) -> int:
    from .trainer import TrainRun, pretrain_transforms, run_step
    config = _resolved_config(args)
    data_path = Path(args.data)
    manifest = load_manifest(data_path)
    class_names = _transform_label_space(manifest)
    config = config_with(config, class_names=class_names)
    out = Path(args.out)
    if len(class_names) == 170:
        ckpt = pretrain_transforms(config, manifest, out, manifest_base=data_path.parent)
    elif args.allow_reduced:
        run = TrainRun(config=config, step="transform_pretrain", train_manifest=manifest,
                       out_dir=out, manifest_base=data_path.parent, pretrain_enabled=False)
        ckpt = run_step(run)
    else:
        raise ConfigError(f"transform dataset has {len(class_names)} classes, not 170 "
                          "(pass --allow-reduced for desk-scale runs)")
    write_run_manifest(out, "pretrain", {"data": args.data,
                                         "allow_reduced": args.allow_reduced},
                       config, [ckpt, out / "iterations.csv", out / "epochs.csv"])
    print(f"pretrained checkpoint: {ckpt}")
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainRun, run_step
    config = _resolved_config(args)
    base = _config_base(args)
    train_m, train_base = _load_config_manifest(config, "train_manifest", base)
    val_m = None
    val_base = None
    if config.val_manifest:
        val_m, val_base = _load_config_manifest(config, "val_manifest", base)
        if val_base != train_base:
            raise ConfigError("train and val manifests must share a directory")
    hook = None
    if args.attack_augment:
        from .evaluation import attack_augment_hook
        hook = attack_augment_hook(config.rng_seed)
    out = Path(args.out)
    run = TrainRun(config=config, step="architecture_train", train_manifest=train_m,
                   out_dir=out, manifest_base=train_base, val_manifest=val_m,
                   init_checkpoint=args.init, pretrain_enabled=not args.no_pretrain,
                   pcl_enabled=not args.no_pcl, augment_hook=hook)
    ckpt = run_step(run)
    write_run_manifest(out, "train",
                       {"init": args.init, "no_pretrain": args.no_pretrain,
                        "no_pcl": args.no_pcl, "attack_augment": args.attack_augment,
                        "tag": run.tag()},
                       config, [ckpt, out / "iterations.csv", out / "epochs.csv"])
    print(f"run {run.tag()}: final checkpoint {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate, save_suite_summary
    from .model import load_checkpoint
    from .trainer import plan_from_config
    config = _resolved_config(args)
    net, labels, _ = load_checkpoint(args.checkpoint)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path, labels)
    report = evaluate(net, manifest, labels, plan_from_config(config),
                      manifest_base=manifest_path.parent, split_name=args.split_name)
    out = Path(args.out)
    summary = save_suite_summary({args.split_name: report}, out)
    write_run_manifest(out, "eval",
                       {"checkpoint": args.checkpoint, "manifest": args.manifest,
                        "split_name": args.split_name},
                       config, [summary])
    print(f"{args.split_name}: accuracy {report.accuracy:.4f} macro_f1 {report.macro_f1:.4f}")
    return 0


def cmd_cross_test(args) -> int:
    from .evaluation import build_zoo_suite, cross_test_suite, save_suite_summary
    from .model import load_checkpoint
    from .trainer import plan_from_config
    config = _resolved_config(args)
    net, labels, _ = load_checkpoint(args.checkpoint)
    manifest_path = Path(args.zoo_manifest)
    manifest = load_manifest(manifest_path)
    suite = build_zoo_suite(manifest)
    reports = cross_test_suite(net, suite, labels, plan_from_config(config),
                               manifest_base=manifest_path.parent)
    out = Path(args.out)
    summary = save_suite_summary(reports, out)
    write_run_manifest(out, "cross-test",
                       {"checkpoint": args.checkpoint, "zoo_manifest": args.zoo_manifest},
                       config, [summary])
    for name, rep in sorted(reports.items()):
        print(f"{name}: accuracy {rep.accuracy:.4f} macro_f1 {rep.macro_f1:.4f}")
    return 0


def cmd_patch_study(args) -> int:
    from .evaluation import patch_position_study
    config = _resolved_config(args)
    manifest_path = Path(args.zoo_manifest)
    manifest = load_manifest(manifest_path)
    out = Path(args.out)
    accs = patch_position_study(
        args.task, args.train_position, config, manifest, manifest_path.parent,
        out, init_checkpoint=args.init, pcl=not args.no_pcl,
        train_per_class=args.train_per_class, test_per_class=args.test_per_class,
        weight_arch=args.weight_arch)
    csv_path = out / f"{args.task}_pos{args.train_position:02d}_accuracies.csv"
    write_run_manifest(out, "patch-study",
                       {"task": args.task, "train_position": args.train_position,
                        "init": args.init, "no_pcl": args.no_pcl,
                        "train_per_class": args.train_per_class,
                        "test_per_class": args.test_per_class,
                        "weight_arch": args.weight_arch,
                        "zoo_manifest": args.zoo_manifest},
                       config, [csv_path])
    print("position accuracies: " + " ".join(f"{a:.3f}" for a in accs))
    return 0


def cmd_attack_eval(args) -> int:
    from .evaluation import (default_attack, robustness_eval, save_suite_summary,
                             zero_strength_attack)
    from .model import load_checkpoint
    from .trainer import plan_from_config
    config = _resolved_config(args)
    net, labels, _ = load_checkpoint(args.checkpoint)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path, labels)
    kinds = [k.strip() for k in args.attacks.split(",") if k.strip()]
    make = zero_strength_attack if args.zero_strength else default_attack
    specs = [make(k, args.attack_seed) for k in kinds]
    reports = robustness_eval(net, manifest, labels, specs, plan_from_config(config),
                              manifest_base=manifest_path.parent)
    out = Path(args.out)
    summary = save_suite_summary(reports, out)
    write_run_manifest(out, "attack-eval",
                       {"checkpoint": args.checkpoint, "manifest": args.manifest,
                        "attacks": args.attacks, "attack_seed": args.attack_seed,
                        "zero_strength": args.zero_strength},
                       config, [summary])
    for kind, rep in reports.items():
        print(f"{kind}: accuracy {rep.accuracy:.4f}")
    return 0


def cmd_visualize(args) -> int:
    from .viz import FigureRequest, emit_figure
    inputs = {}
    for item in args.input or []:
        if "=" not in item:
            raise ConfigError(f"--input must be key=value, got {item!r}")
        key, val = item.split("=", 1)
        inputs[key] = val
    req = FigureRequest(kind=args.kind, inputs=inputs, out_path=Path(args.out),
                        seed=args.seed or 0)
    path = emit_figure(req)
    write_run_manifest(path.parent, "visualize",
                       {"kind": args.kind, "inputs": inputs, "seed": args.seed or 0},
                       None, [path])
    print(f"figure written: {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archtrace",
                                     description="architecture attribution laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-zoo", help="sample the generator zoo to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1, help="weight seeds per architecture")
    p.add_argument("--n", type=int, default=100, help="images per model")
    p.add_argument("--resolution", type=int, default=64, choices=(64, 128))
    p.add_argument("--arch", default=None, help="comma list of architecture names")
    p.set_defaults(fn=cmd_gen_zoo)

    p = sub.add_parser("gen-transforms", help="emit the transformation pretraining set")
    p.add_argument("--naturals", default=None, help="folder of natural images")
    p.add_argument("--manifest", default=None, help="or an existing manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=2, dest="per_class")
    p.add_argument("--subset", type=int, default=None, help="reduced bank size")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_transforms)

    p = sub.add_parser("pretrain", help="step 1: transformation classification")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--data", required=True, help="transform dataset manifest")
    p.add_argument("--allow-reduced", action="store_true")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="step 2: architecture classification")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--init", default=None, help="step-1 checkpoint")
    p.add_argument("--no-pretrain", action="store_true", dest="no_pretrain")
    p.add_argument("--no-pcl", action="store_true", dest="no_pcl")
    p.add_argument("--attack-augment", action="store_true", dest="attack_augment")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one manifest")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split-name", default="test", dest="split_name")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cross-test", help="closed-set and cross-seed evaluation")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--zoo-manifest", required=True, dest="zoo_manifest")
    p.set_defaults(fn=cmd_cross_test)

    p = sub.add_parser("patch-study", help="train on one grid position, test on all")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--task", required=True, choices=("architecture", "weight"))
    p.add_argument("--train-position", type=int, required=True, dest="train_position")
    p.add_argument("--zoo-manifest", required=True, dest="zoo_manifest")
    p.add_argument("--init", default=None)
    p.add_argument("--no-pcl", action="store_true", dest="no_pcl")
    p.add_argument("--train-per-class", type=int, default=200, dest="train_per_class")
    p.add_argument("--test-per-class", type=int, default=100, dest="test_per_class")
    p.add_argument("--weight-arch", default="ProGAN", dest="weight_arch")
    p.set_defaults(fn=cmd_patch_study)

    p = sub.add_parser("attack-eval", help="robustness evaluation under attacks")
    _add_common(p)
    _add_config_overrides(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--attacks", default="noise,blur,crop,jpeg,relight,combination")
    p.add_argument("--attack-seed", type=int, default=0, dest="attack_seed")
    p.add_argument("--zero-strength", action="store_true", dest="zero_strength")
    p.set_defaults(fn=cmd_attack_eval)

    p = sub.add_parser("visualize", help="emit a figure from persisted artifacts")
    p.add_argument("--kind", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", action="append", help="key=value, repeatable")
    p.set_defaults(fn=cmd_visualize)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
