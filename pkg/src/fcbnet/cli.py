"""Command-line entry point: ``fcbnet analyze | data prepare | train | eval | predict | sweep``."""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import analysis, plotting
from .config import ConfigError, FcbNetConfig, TrainConfig

log = logging.getLogger("fcbnet")

def _number(text: str) -> int | float:
    v = float(text)
    return int(v) if v.is_integer() else v


SWEEP_AXES = {
    "alpha": ("model.fcb.alpha_init", float),
    "ratio": ("model.fcb.bottleneck_ratio", _number),
    "kernel": ("model.fcb.dw_kernel", int),
    "fpn_dim": ("model.decoder.feature_dim", int),
    "refine_depth": ("model.decoder.refine_depth", int),
    "variant": ("model.backbone.variant", str),
    "channels": ("model.backbone.in_channels", int),
    "use_fcb": ("model.use_fcb", lambda s: yaml.safe_load(s) is True),
}
DATA_DEFAULTS = {"manifest": None, "out_dir": "runs/fcbnet"}


class CliError(Exception):
    pass


# --- config document ---------------------------------------------------------

def default_document() -> dict[str, Any]:
    return {
        "model": FcbNetConfig().to_dict(),
        "train": dataclasses.asdict(TrainConfig()),
        "data": dict(DATA_DEFAULTS),
    }


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _merge(base: dict[str, Any], update: dict[str, Any], path: str = "") -> None:
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[k], v, where + ".")
        else:
            base[k] = v


def set_key(doc: dict[str, Any], dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_document(path: str | None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    doc = default_document()
    if path:
        p = Path(path)
        if not p.is_file():
            raise CliError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {p} must hold a mapping")
        _merge(doc, loaded)
    for item in overrides:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        set_key(doc, key.strip(), yaml.safe_load(raw))
    return doc


def model_config(doc: dict[str, Any]) -> FcbNetConfig:
    cfg = FcbNetConfig.from_dict(doc["model"])
    cfg.validate()
    return cfg


def train_config(doc: dict[str, Any]) -> TrainConfig:
    cfg = TrainConfig.from_dict(doc["train"])
    cfg.validate()
    return cfg


def config_help() -> str:
    lines = ["config keys (YAML document or --set KEY=VALUE) and defaults:"]
    for k, v in _flatten(default_document()).items():
        lines.append(f"  {k} = {json.dumps(v)}")
    return "\n".join(lines)


# --- helpers -----------------------------------------------------------------

def parse_size(text: str) -> tuple[int, int]:
    """``"512x512"`` -> (H, W)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise CliError(f"--input expects HxW, got {text!r}") from None
    return h, w


def millions(n: int) -> str:
    return f"{n / 1e6:.3f} M"


def _emit_rows(rows: list[dict], fmt: str, out) -> None:
    if fmt == "json":
        json.dump(rows, out, indent=2)
        out.write("\n")
        return
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), delimiter="\t" if fmt == "tsv" else ",", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    out.write(buf.getvalue())


def _apply_model_flags(doc: dict[str, Any], args) -> None:
    if getattr(args, "variant", None):
        doc["model"]["backbone"]["variant"] = args.variant
    if getattr(args, "channels", None):
        doc["model"]["backbone"]["in_channels"] = args.channels
    if getattr(args, "weights", None):
        doc["model"]["backbone"]["weights_source"] = args.weights
    if getattr(args, "no_fcb", False):
        doc["model"]["use_fcb"] = False


# --- subcommands -------------------------------------------------------------

def cmd_analyze(args, out) -> int:
    doc = load_document(args.config, args.set)
    _apply_model_flags(doc, args)
    cfg = model_config(doc)
    h, w = parse_size(args.input)
    params = analysis.count_params(cfg)
    flops = analysis.count_flops(cfg, h, w, args.convention)
    rows = analysis.cost_table(cfg, h, w, args.convention)
    result: dict[str, Any] = {
        "variant": cfg.backbone.variant,
        "input": [cfg.backbone.in_channels, h, w],
        "params": params.to_dict(),
        "flops": flops.to_dict(),
        "rows": rows,
    }
    if args.instantiate:
        from .model import build_fcbnet, param_report

        model = build_fcbnet(cfg)
        measured = param_report(model)
        result["instantiated"] = {
            "params": measured.to_dict(),
            "flops": analysis.measure_flops(model, h, w).to_dict(),
        }
        if measured.total != params.total or measured.trainable != params.trainable:
            raise CliError("instantiated parameter counts disagree with the closed-form counts")
    if args.benchmark:
        from .model import build_fcbnet

        model = build_fcbnet(cfg)
        stats = analysis.benchmark_latency(model, (cfg.backbone.in_channels, h, w), warmup=args.warmup, iters=args.iters)
        result["latency"] = stats.to_dict()
    if args.figure_dir:
        fig = plotting.plot_cost_breakdown(
            [r for r in rows if r["name"] != "backbone"],
            Path(args.figure_dir) / f"cost_{cfg.backbone.variant}_{h}x{w}.png",
            title=f"FCBNet-{cfg.backbone.variant} at {h}x{w}",
        )
        result["figure"] = str(fig)

    if args.json:
        json.dump(result, out, indent=2)
        out.write("\n")
        return 0
    _emit_rows(rows, "tsv", out)
    out.write(f"# variant: {cfg.backbone.variant}  input: {cfg.backbone.in_channels}x{h}x{w}\n")
    out.write(f"# total params: {millions(params.total)} (without classifier {millions(params.total_without_classifier)})\n")
    out.write(f"# trainable params: {millions(params.trainable)}\n")
    out.write(f"# trainable reduction: {100 * params.reduction:.1f}%\n")
    out.write(f"# GFLOPs ({flops.convention}): {flops.gflops:.3f}\n")
    if "latency" in result:
        lat = result["latency"]
        out.write(f"# latency (s/image): mean {lat['mean']:.4f} median {lat['median']:.4f} p95 {lat['p95']:.4f}\n")
    if "figure" in result:
        out.write(f"# figure: {result['figure']}\n")
    return 0


def cmd_data_prepare(args, out) -> int:
    from .data import ChannelSet, prepare_tile

    ratios = tuple(float(v) for v in args.ratios.split(","))
    labels = [int(v) for v in args.weed_labels.split(",")]
    manifest = prepare_tile(
        args.tile,
        args.mask,
        args.out,
        patch=args.patch,
        stride=args.stride,
        weed_labels=labels,
        ratios=ratios,
        seed=args.seed,
        channel_set=ChannelSet(args.channel_set) if args.channel_set else None,
        rgb_stats=args.rgb_stats,
    )
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    summary = {
        "manifest": str(Path(args.out) / "manifest.jsonl"),
        "patches": len(manifest.records),
        "splits": counts,
        "channel_set": manifest.channel_set.name,
    }
    if args.json:
        json.dump(summary, out, indent=2)
        out.write("\n")
    else:
        out.write(f"wrote {summary['patches']} patches ({counts['train']}/{counts['val']}/{counts['test']}) to {args.out}\n")
        out.write(f"manifest: {summary['manifest']}\n")
    return 0


def _data_meta(manifest) -> dict[str, Any]:
    return {
        "data": {
            "channel_set": manifest.channel_set.name,
            "stats": dataclasses.asdict(manifest.stats) if manifest.stats else None,
        }
    }


def _train_one(doc: dict[str, Any], manifest_path: str, out_dir: Path, max_steps=None, resume=None, out=None):
    from .data import DatasetManifest
    from .model import build_fcbnet
    from .training import fit

    mcfg, tcfg = model_config(doc), train_config(doc)
    manifest = DatasetManifest.load(manifest_path)
    if manifest.channel_set.count != mcfg.backbone.in_channels:
        raise CliError(
            f"manifest channel set {manifest.channel_set.name} has {manifest.channel_set.count} bands "
            f"but model.backbone.in_channels is {mcfg.backbone.in_channels}"
        )
    model = build_fcbnet(mcfg, seed=tcfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))

    def echo(rec):
        if out is not None:
            out.write(json.dumps(dataclasses.asdict(rec)) + "\n")
            out.flush()

    history = fit(
        model, manifest, tcfg, out_dir=out_dir, max_steps=max_steps, resume=resume,
        on_epoch=echo, extra_meta=_data_meta(manifest),
    )
    return model, manifest, history


def cmd_train(args, out) -> int:
    doc = load_document(args.config, args.set)
    _apply_model_flags(doc, args)
    if args.manifest:
        doc["data"]["manifest"] = args.manifest
    if args.out:
        doc["data"]["out_dir"] = args.out
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "max_lr"), ("seed", "seed")):
        if getattr(args, flag) is not None:
            doc["train"][key] = getattr(args, flag)
    if not doc["data"]["manifest"]:
        raise CliError("train needs a manifest (--manifest or data.manifest)")
    out_dir = Path(doc["data"]["out_dir"])
    _, _, history = _train_one(doc, doc["data"]["manifest"], out_dir, args.max_steps, args.resume, out)
    fig = plotting.plot_history([dataclasses.asdict(e) for e in history.epochs], out_dir / "history.png")
    log.info("history figure: %s", fig)
    out.write(f"# best val mIoU: {history.best_miou}  (epoch {history.best_epoch})\n")
    out.write(f"# checkpoints: {out_dir / 'best'}.*, {out_dir / 'last'}.*\n")
    return 0


def cmd_eval(args, out) -> int:
    from .data import DatasetManifest
    from .training import evaluate, load_model

    model, _ = load_model(args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    report = evaluate(model, manifest, args.split, latency=not args.no_latency)
    report["split"] = args.split
    report["checkpoint"] = str(args.checkpoint)
    if args.json:
        json.dump(report, out, indent=2)
        out.write("\n")
        return 0
    for name, v in report["iou"].items():
        out.write(f"IoU[{name}]\t{v:.4f}\n")
    out.write(f"mIoU\t{report['miou']:.4f}\n")
    if "latency" in report:
        out.write(f"latency_mean_s\t{report['latency']['mean']:.4f}\n")
    return 0


def cmd_predict(args, out) -> int:
    from .data import ChannelSet, ChannelStats, SampleRecord, stack_and_normalize, write_raster
    from .training import load_model, predict_labels

    model, meta = load_model(args.checkpoint)
    data = meta.get("data") or {}
    n = model.backbone.in_channels
    channel_set = ChannelSet(data["channel_set"]) if data.get("channel_set") else ChannelSet.for_count(n)
    stats = ChannelStats(**data["stats"]) if data.get("stats") else None
    x = stack_and_normalize(SampleRecord(list(args.image), args.image[0]), channel_set, stats)
    labels = predict_labels(model, x.unsqueeze(0))[0].numpy().astype(np.uint8)
    if not args.labels:
        labels = np.where(labels > 0, 255, 0).astype(np.uint8)
    write_raster(args.out, labels)
    out.write(f"wrote {args.out} ({labels.shape[0]}x{labels.shape[1]}, weed fraction {(labels > 0).mean():.4f})\n")
    return 0


def cmd_sweep(args, out) -> int:
    name, _, values = args.axis.partition("=")
    if name not in SWEEP_AXES or not values:
        raise CliError(f"--axis expects NAME=v1,v2,... with NAME in {', '.join(SWEEP_AXES)}")
    key, cast = SWEEP_AXES[name]
    base = load_document(args.config, args.set)
    _apply_model_flags(base, args)
    h, w = parse_size(args.input)
    rows = []
    for raw in values.split(","):
        doc = copy.deepcopy(base)
        value = cast(raw)
        set_key(doc, key, value)
        cfg = model_config(doc)
        params = analysis.count_params(cfg)
        flops = analysis.count_flops(cfg, h, w, args.convention)
        row: dict[str, Any] = {
            name: value,
            "total_params_m": round(params.total / 1e6, 3),
            "trainable_params_m": round(params.trainable / 1e6, 3),
            "gflops": round(flops.gflops, 3),
            "total_params": params.total,
            "trainable_params": params.trainable,
            "flops": flops.total_flops,
        }
        if args.manifest:
            from .training import evaluate

            run_dir = Path(args.runs_dir) / f"{name}_{raw}"
            model, manifest, _ = _train_one(doc, args.manifest, run_dir, args.max_steps)
            split = args.split if manifest.split(args.split) else "train"
            rep = evaluate(model, manifest, split)
            ious = list(rep["iou"].values())
            row.update({"iou_bg": ious[0], "iou_w": ious[-1], "miou": rep["miou"], "latency_s": rep["latency"]["mean"]})
        rows.append(row)
    _emit_rows(rows, args.format, out)
    if args.figure_dir:
        fig = plotting.plot_sweep(rows, name, Path(args.figure_dir) / f"sweep_{name}.png")
        if args.format != "json":
            out.write(f"# figure: {fig}\n")
    return 0


# --- parser ------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config document")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key, e.g. model.fcb.alpha_init=0.05")
    p.add_argument("--variant", choices=["tiny", "small", "base", "large"], help="ConvNeXt variant (default: base)")
    p.add_argument("--channels", type=int, help="input bands: 3 RGB, 4 RGB-NIR, 5 RGB-NIR-RE (default: 3)")
    p.add_argument("--weights", help="safetensors ConvNeXt weights for the backbone")
    p.add_argument("--no-fcb", action="store_true", help="wire stage outputs straight to the decoder")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="fcbnet", description=__doc__, formatter_class=fmt, epilog=config_help())
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter / FLOP report", formatter_class=fmt, epilog=config_help())
    _add_model_flags(p)
    p.add_argument("--input", default="512x512", help="input size HxW (default: 512x512)")
    p.add_argument("--convention", default=analysis.CONV_MAC_ONLY, choices=analysis.CONVENTIONS, help="FLOP convention (default: conv_mac_only)")
    p.add_argument("--json", action="store_true", help="emit a JSON document")
    p.add_argument("--instantiate", action="store_true", help="also build the model and cross-check counts")
    p.add_argument("--benchmark", action="store_true", help="also measure batch-1 latency")
    p.add_argument("--warmup", type=int, default=3, help="latency warm-up runs (default: 3)")
    p.add_argument("--iters", type=int, default=10, help="latency timed runs (default: 10)")
    p.add_argument("--figure-dir", help="write a cost breakdown PNG here")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("data", help="dataset preparation")
    dsub = p.add_subparsers(dest="data_command", required=True)
    p = dsub.add_parser("prepare", help="patch a tile into {split}/{images,masks}/ plus a manifest")
    p.add_argument("--tile", nargs="+", required=True, help="band file(s) of one co-registered tile, stacked in order")
    p.add_argument("--mask", required=True, help="label raster for the tile")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--patch", type=int, default=512, help="patch size (default: 512)")
    p.add_argument("--stride", type=int, default=512, help="patch stride (default: 512)")
    p.add_argument("--weed-labels", default="1", help="comma-separated labels mapped to weed (default: 1)")
    p.add_argument("--ratios", default="0.8,0.1,0.1", help="train,val,test shares (default: 0.8,0.1,0.1)")
    p.add_argument("--seed", type=int, default=0, help="split shuffle seed (default: 0)")
    p.add_argument("--channel-set", choices=["RGB", "RGB-NIR", "RGB-NIR-RE"], help="bands to keep (default: all, up to 5)")
    p.add_argument("--rgb-stats", default="dataset", choices=["dataset", "imagenet"], help="RGB normalisation source (default: dataset)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_data_prepare)

    p = sub.add_parser("train", help="train on a manifest", formatter_class=fmt, epilog=config_help())
    _add_model_flags(p)
    p.add_argument("--manifest", help="manifest.jsonl (default: data.manifest)")
    p.add_argument("--out", help="run directory (default: data.out_dir = runs/fcbnet)")
    p.add_argument("--epochs", type=int, help="default: train.epochs = 100")
    p.add_argument("--batch-size", type=int, help="default: train.batch_size = 64")
    p.add_argument("--lr", type=float, help="peak learning rate (default: train.max_lr = 0.001)")
    p.add_argument("--seed", type=int, help="default: train.seed = 0")
    p.add_argument("--max-steps", type=int, help="truncate the schedule (smoke runs)")
    p.add_argument("--resume", help="checkpoint stem to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem (or its .safetensors/.json)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"], help="default: test")
    p.add_argument("--no-latency", action="store_true", help="skip the latency measurement")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write a segmentation mask for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", nargs="+", required=True, help="band file(s), stacked in order")
    p.add_argument("--out", required=True, help="output mask path (8-bit)")
    p.add_argument("--labels", action="store_true", help="write class indices instead of 0/255")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("sweep", help="ablation table over one axis", formatter_class=fmt, epilog=config_help())
    _add_model_flags(p)
    p.add_argument("--axis", required=True, help=f"NAME=v1,v2,...; NAME in {', '.join(SWEEP_AXES)}")
    p.add_argument("--input", default="512x512", help="input size HxW for FLOPs (default: 512x512)")
    p.add_argument("--convention", default=analysis.CONV_MAC_ONLY, choices=analysis.CONVENTIONS)
    p.add_argument("--format", default="csv", choices=["csv", "tsv", "json"], help="default: csv")
    p.add_argument("--figure-dir", help="write a sweep PNG here")
    p.add_argument("--manifest", help="also train and evaluate every setting on this manifest")
    p.add_argument("--runs-dir", default="runs/sweep", help="per-setting run directories (default: runs/sweep)")
    p.add_argument("--split", default="test", help="evaluation split when training (default: test)")
    p.add_argument("--max-steps", type=int, help="truncate each training schedule")
    p.set_defaults(func=cmd_sweep)
    return parser


def run(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, out)
    except (CliError, ConfigError, ValueError, FileNotFoundError, RuntimeError) as e:
        print(f"fcbnet: error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
