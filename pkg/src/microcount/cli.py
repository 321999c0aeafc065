"""Command-line entry point: ``microcount <subcommand> [options]``.

Every subcommand takes an optional strict JSON config (``--config``); flags
override config keys. Outputs go to a run-stamped directory under
``--out-root`` (or exactly ``--run-dir``) together with the resolved config.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .adapters import ADAPTERS, AdapterError, NormalizationStats, compute_dataset_stats, expand
from .data import load_arrays, split_manifest
from .evaluator import EvalResult, emit_report, evaluate, markdown_table
from .io import DatasetManifest
from .models import (FAMILIES, REPORTED, BackboneConfig, build_backbone, estimate_flops, estimate_parameters,
                     get_preset, toy_config)
from .synthgen import MAX_COUNT, SceneConfig, UniformCounts, count_statistics, generate_dataset
from .tensor import load_checkpoint
from .trainer import TrainConfig, train

DATA_ROOT_ENV = "MICROCOUNT_DATA_ROOT"
CONFIG_NAME = "config.json"


class CLIError(Exception):
    pass


def _scene_defaults():
    d = SceneConfig().to_dict()
    d.pop("seed")          # driven by --seed
    return d


def _train_defaults():
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


PAYLOADS = {
    "generate": lambda: {"n_images": 100, "scene": _scene_defaults(), "count_min": 0, "count_max": MAX_COUNT,
                         "workers": 1},
    "adapt": lambda: {"layout": None, "source": None, "patch": None, "augment": False, "min_separation": 5.0},
    "stats": lambda: {"manifest": None},
    "train": lambda: {"model": None, "input_size": None, "manifest": None, "val_manifest": None,
                      "val_fraction": 0.2, "train": _train_defaults()},
    "eval": lambda: {"checkpoint": None, "manifest": None, "stats": None, "name": None, "dataset": None,
                     "variant": "", "batch_size": 32, "rounded": False},
    "bench": lambda: {"presets": list(REPORTED), "input_size": 384, "manifest": None, "train_epochs": 0,
                      "val_fraction": 0.2, "flops_per_mac": 1.0, "batch_size": 32},
    "flops": lambda: {"preset": None, "input_size": None, "flops_per_mac": 1.0},
}


# -- config resolution ---------------------------------------------------------

def _merge(base: dict, update: dict, where: str) -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise CLIError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _set(cfg: dict, dotted: str, value) -> None:
    *parents, leaf = dotted.split(".")
    for p in parents:
        cfg = cfg[p]
    cfg[leaf] = value


def resolve_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {"command": args.command, "seed": 0, "data_root": os.environ.get(DATA_ROOT_ENV) or None,
           "out_root": "runs", **PAYLOADS[args.command]()}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CLIError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CLIError(f"{args.config}: top level must be an object")
        if loaded.get("command", args.command) != args.command:
            raise CLIError(f"{args.config}: config is for {loaded['command']!r}, not {args.command!r}")
        cfg = _merge(cfg, loaded, args.config)
    for dest, value in vars(args).items():
        if dest in ("command", "config", "dry_run", "run_dir"):
            continue
        _set(cfg, dest, value)
    return cfg


def _input(cfg: dict, key: str, value=None) -> Path:
    """Resolve a required input path against the data root and check it exists."""
    value = cfg[key] if value is None else value
    if value is None:
        raise CLIError(f"{key} is required")
    path = Path(value)
    if not path.is_absolute() and cfg["data_root"]:
        path = Path(cfg["data_root"]) / path
    if not path.exists():
        raise CLIError(f"{key}: {path} does not exist")
    return path


def _manifest(cfg: dict, key: str, value=None) -> DatasetManifest:
    manifest = DatasetManifest.load(_input(cfg, key, value))
    if len(manifest) == 0:
        raise CLIError(f"{key}: manifest is empty")
    return manifest


def run_directory(cfg: dict, explicit=None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S")
        digest = hashlib.sha1(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:8]
        path = Path(cfg["out_root"]) / f"{cfg['command']}-{stamp}-{digest}"
        base, i = path, 1
        while path.exists():
            path, i = base.with_name(f"{base.name}-{i}"), i + 1
    path.mkdir(parents=True, exist_ok=True)
    (path / CONFIG_NAME).write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def model_config(spec, input_size=None) -> BackboneConfig:
    """A preset name, ``toy-<family>``, or a full config mapping."""
    if spec is None:
        raise CLIError("model is required")
    if isinstance(spec, dict):
        cfg = BackboneConfig.from_dict(spec)
    elif spec.startswith("toy-") and spec[4:] in FAMILIES:
        cfg = toy_config(spec[4:], input_size=input_size or 32)
    else:
        cfg = get_preset(spec)
    if input_size is not None and input_size != cfg.input_size:
        cfg = cfg.replace(input_size=input_size)
    return cfg


# -- subcommands ---------------------------------------------------------------
# each plan_* validates the resolved config and returns the action to run

def plan_generate(cfg):
    if cfg["n_images"] < 0:
        raise CLIError("n_images must be >= 0")
    scene = SceneConfig.from_dict({**cfg["scene"], "seed": cfg["seed"]})
    if scene.background != "synthetic":
        scene = scene.replace(background=str(_input(cfg, "scene.background", scene.background)))
    scene.validate()
    counts = UniformCounts(cfg["count_min"], cfg["count_max"])

    def run(out: Path):
        manifest = generate_dataset(cfg["n_images"], scene, out, counts, master_seed=cfg["seed"],
                                    workers=cfg["workers"])
        stats = count_statistics(manifest)
        _write_json(out / "count_stats.json", stats)
        print(f"manifest: {out / 'manifest.jsonl'}")
        print(_stats_line(stats))
    return run


def _stats_line(stats: dict) -> str:
    ave = "-" if stats["ave"] is None else f"{stats['ave']:.1f}"
    return f"images={stats['images']} min={stats['min']} ave={ave} max={stats['max']} total={stats['total']}"


def _dataset_stats(manifest: DatasetManifest) -> dict:
    out = {"counts": count_statistics(manifest)}
    try:
        out["normalization"] = compute_dataset_stats(manifest).to_dict()
    except AdapterError as exc:
        out["normalization"] = None
        out["normalization_error"] = str(exc)
    return out


def plan_adapt(cfg):
    layout = cfg["layout"]
    if layout not in ADAPTERS:
        raise CLIError(f"layout must be one of {sorted(ADAPTERS)}, got {layout!r}")
    source = _input(cfg, "source")
    patch = cfg["patch"]
    if patch is not None and (len(patch) != 2 or min(patch) < 1):
        raise CLIError("patch must be two positive integers (rows cols)")

    def run(out: Path):
        kw = {"min_separation": cfg["min_separation"]} if layout == "fnc" else {}
        manifest = ADAPTERS[layout](source, out, **kw)
        manifest = expand(manifest, out, tuple(patch) if patch else None, cfg["augment"])
        path = manifest.save()
        stats = _dataset_stats(manifest)
        _write_json(out / "stats.json", stats)
        print(f"manifest: {path}")
        print(_stats_line(stats["counts"]))
    return run


def plan_stats(cfg):
    manifest = _manifest(cfg, "manifest")

    def run(out: Path):
        stats = _dataset_stats(manifest)
        _write_json(out / "stats.json", stats)
        print(_stats_line(stats["counts"]))
        if stats["normalization"]:
            n = stats["normalization"]
            print("mean=" + ",".join(f"{v:.4f}" for v in n["mean"]) + " std=" + ",".join(f"{v:.4f}" for v in n["std"]))
    return run


def _epoch_line(row: dict) -> None:
    print(f"epoch {row['epoch']:4d}  train {row['train_loss']:.4f}  val {row['val_loss']:.4f}  "
          f"mae {row['val_mae']:.4f}  lr {row['lr']:.3g}", flush=True)


def plan_train(cfg):
    mcfg = model_config(cfg["model"], cfg["input_size"])
    tcfg = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
    tcfg.validate()
    manifest = _manifest(cfg, "manifest")
    if cfg["val_manifest"] is not None:
        train_m, val_m = manifest, _manifest(cfg, "val_manifest")
    else:
        train_m, val_m = split_manifest(manifest, cfg["val_fraction"], cfg["seed"])

    def run(out: Path):
        model = build_backbone(mcfg, seed=cfg["seed"])
        report, stats = train(model, train_m, val_m, tcfg, out_dir=out, log=_epoch_line)
        _write_json(out / "stats.json", stats.to_dict())
        print(f"stopped: {report.stop_reason} after {len(report.epochs)} epochs; best epoch {report.best_epoch}, "
              f"val mae {report.final_val_mae:.4f} (initial {report.initial_val_mae:.4f})")
        print(f"checkpoint: {report.checkpoint}")
    return run


def plan_eval(cfg):
    ckpt = _input(cfg, "checkpoint")
    manifest = _manifest(cfg, "manifest")
    tensors, meta = load_checkpoint(ckpt)
    if "model" not in meta:
        raise CLIError(f"{ckpt}: checkpoint carries no model config")
    mcfg = BackboneConfig.from_dict(meta["model"])
    if cfg["stats"] is not None:
        stats = NormalizationStats.from_dict(json.loads(_input(cfg, "stats").read_text()))
    elif "stats" in meta:
        stats = NormalizationStats.from_dict(meta["stats"])
    else:
        raise CLIError(f"{ckpt}: no normalisation statistics; pass --stats")
    name = cfg["name"] or mcfg.name or mcfg.family
    dataset = cfg["dataset"] or Path(manifest.root).name

    def run(out: Path):
        model = build_backbone(mcfg, seed=cfg["seed"])
        model.load_state_dict(tensors)
        x, y, skipped = load_arrays(manifest, stats, mcfg.input_size, skip_unreadable=True)
        for image, reason in skipped:
            print(f"skipped {image}: {reason}", file=sys.stderr)
        result = evaluate(model, x, y, cfg["batch_size"], name, cfg["variant"], dataset, cfg["seed"], skipped)
        paths = emit_report([result], out, cfg["rounded"])
        print(markdown_table([result]), end="")
        print(f"results: {paths['csv']}")
    return run


def plan_bench(cfg):
    configs = [(name, model_config(name, cfg["input_size"])) for name in cfg["presets"]]
    manifest = _manifest(cfg, "manifest") if cfg["manifest"] is not None else None
    tcfg = TrainConfig(max_epochs=max(cfg["train_epochs"], 1), seed=cfg["seed"])

    def run(out: Path):
        results = []
        if manifest is not None:
            train_m, val_m = split_manifest(manifest, cfg["val_fraction"], cfg["seed"])
            stats = compute_dataset_stats(train_m)
        for name, mcfg in configs:
            flops = estimate_flops(mcfg, flops_per_mac=cfg["flops_per_mac"])
            if manifest is None:
                results.append(EvalResult(name, "", "untrained", math.nan, math.nan, flops,
                                          estimate_parameters(mcfg), math.nan, cfg["seed"]))
                continue
            model = build_backbone(mcfg, seed=cfg["seed"])
            if cfg["train_epochs"] > 0:
                train(model, train_m, val_m, tcfg, out_dir=out / name, stats=stats)
            x, y, skipped = load_arrays(val_m, stats, mcfg.input_size, skip_unreadable=True)
            r = evaluate(model, x, y, cfg["batch_size"], name, "", Path(manifest.root).name, cfg["seed"], skipped)
            r.flops = flops
            results.append(r)
            print(f"{name}: mae {r.mae:.4f} rmse {r.rmse:.4f}", flush=True)
        paths = emit_report(results, out)
        print(paths["markdown"].read_text(), end="")
        print(f"results: {paths['csv']}")
    return run


def plan_flops(cfg):
    if cfg["preset"] is None:
        raise CLIError("preset is required")
    mcfg = model_config(cfg["preset"], cfg["input_size"])

    def run(out=None):
        params = estimate_parameters(mcfg)
        flops = estimate_flops(mcfg, flops_per_mac=cfg["flops_per_mac"])
        s = mcfg.input_size
        print(f"{cfg['preset']}: params {params / 1e6:.2f}e6  FLOPs {flops / 1e8:.2f}e8 at 3x{s}x{s}")
        if cfg["preset"] in REPORTED:
            _, _, p, f = REPORTED[cfg["preset"]]
            print(f"reported: params {p:.2f}e6  FLOPs {f:.2f}e8")
    return run


PLANS = {"generate": plan_generate, "adapt": plan_adapt, "stats": plan_stats, "train": plan_train,
         "eval": plan_eval, "bench": plan_bench, "flops": plan_flops}
NO_OUTPUT = {"flops"}


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override its keys")
    common.add_argument("--seed", type=int, default=S, help="global seed (default 0)")
    common.add_argument("--data-root", dest="data_root", default=S,
                        help=f"base for relative input paths (default ${DATA_ROOT_ENV})")
    common.add_argument("--out-root", dest="out_root", default=S, help="parent of run directories (default runs)")
    common.add_argument("--run-dir", dest="run_dir", help="exact output directory instead of a stamped one")
    common.add_argument("--dry-run", dest="dry_run", action="store_true", help="print the resolved config and exit")

    parser = argparse.ArgumentParser(prog="microcount", description="Weakly-supervised microorganism counting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="render a synthetic dataset")
    p.add_argument("-n", "--n-images", dest="n_images", type=int, default=S)
    p.add_argument("--width", dest="scene.width", type=int, default=S)
    p.add_argument("--height", dest="scene.height", type=int, default=S)
    p.add_argument("--background", dest="scene.background", default=S, help="'synthetic' or a plate directory")
    p.add_argument("--count-min", dest="count_min", type=int, default=S)
    p.add_argument("--count-max", dest="count_max", type=int, default=S)
    p.add_argument("--workers", type=int, default=S)

    p = sub.add_parser("adapt", parents=[common], help="convert a dataset to a count manifest",
                       epilog="layouts: fnc = images/ + masks/; vgg = *cell.png + *dots.png; "
                              "cancer = images/ + counts.csv; synthetic = generator output")
    p.add_argument("layout", nargs="?", default=S, choices=sorted(ADAPTERS))
    p.add_argument("source", nargs="?", default=S)
    p.add_argument("--patch", nargs=2, type=int, metavar=("ROWS", "COLS"), default=S)
    p.add_argument("--augment", action="store_true", default=S)
    p.add_argument("--min-separation", dest="min_separation", type=float, default=S)

    p = sub.add_parser("stats", parents=[common], help="count and pixel statistics of a manifest")
    p.add_argument("manifest", nargs="?", default=S)

    p = sub.add_parser("train", parents=[common], help="train a model on a manifest")
    p.add_argument("--model", default=S, help="preset name or toy-<family>")
    p.add_argument("--manifest", default=S)
    p.add_argument("--val-manifest", dest="val_manifest", default=S)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=S)
    p.add_argument("--input-size", dest="input_size", type=int, default=S)
    p.add_argument("--epochs", dest="train.max_epochs", type=int, default=S)
    p.add_argument("--batch-size", dest="train.batch_size", type=int, default=S)
    p.add_argument("--lr", dest="train.base_lr", type=float, default=S)
    p.add_argument("--warmup-steps", dest="train.warmup_steps", type=int, default=S)
    p.add_argument("--loss", dest="train.loss", choices=("l1", "mse"), default=S)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", default=S)
    p.add_argument("--manifest", default=S)
    p.add_argument("--stats", default=S, help="normalisation stats JSON (default: from the checkpoint)")
    p.add_argument("--name", default=S)
    p.add_argument("--dataset", default=S)
    p.add_argument("--variant", default=S)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=S)
    p.add_argument("--rounded", action="store_true", default=S, help="add a rounded-count MAE column")

    p = sub.add_parser("bench", parents=[common], help="compare presets in one table")
    p.add_argument("--presets", nargs="+", default=S)
    p.add_argument("--input-size", dest="input_size", type=int, default=S)
    p.add_argument("--manifest", default=S, help="evaluate (and optionally train) on this manifest")
    p.add_argument("--train-epochs", dest="train_epochs", type=int, default=S)
    p.add_argument("--flops-per-mac", dest="flops_per_mac", type=float, default=S)

    p = sub.add_parser("flops", parents=[common], help="parameter count and FLOPs of a preset")
    p.add_argument("preset", nargs="?", default=S)
    p.add_argument("--input-size", dest="input_size", type=int, default=S)
    p.add_argument("--flops-per-mac", dest="flops_per_mac", type=float, default=S)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        action = PLANS[args.command](cfg)
        if args.dry_run:
            print(json.dumps(cfg, indent=1, sort_keys=True))
            return 0
        out = None if args.command in NO_OUTPUT else run_directory(cfg, args.run_dir)
        action(out)
    except (CLIError, ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"microcount {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
