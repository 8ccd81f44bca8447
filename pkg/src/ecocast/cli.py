"""Batch command-line entry point: dataset generation, phase-1 preparation,
text/image rendering, training, evaluation, and the sensors-out / OOD /
ablation protocols. Every run writes a resolved-config manifest under --out."""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import train_eval as TE
from .dataset import (Dataset, DatasetError, FeatureSchema, ShiftSpec,
                      generate_synthetic, load_csv, split_temporal, write_csv)
from .encoders import EncoderConfig, EncoderError
from .fusion import ABLATION_VARIANTS, FusionConfig, FusionError, apply_variant
from .model import Model, ModelConfig, ModelError, prepare_sample, prepare_samples
from .raster import RasterConfig, RasterError, rasterize, write_pgm
from .smoe import SmoeConfig, SmoeError
from .tensor import Tensor
from .textual import (DATASET_DESCRIPTIONS, TASK_DESCRIPTIONS, TextError,
                      build_domain_instruction, build_layout, build_vocabulary,
                      linearize, render_semantic, save_vocabulary)
from .train_eval import MaskSpec, TrainConfig, TrainError

USER_ERRORS = (DatasetError, TextError, RasterError, EncoderError, SmoeError,
               FusionError, ModelError, TrainError, OSError)


class ConfigError(ValueError):
    pass


# every config key with its default; values are parsed by the default's type
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.csv": "",
    "synthetic.seed": 7,
    "synthetic.n_regions": 4,
    "synthetic.total_days": 800,
    "synthetic.missing_rate": 0.2,
    "synthetic.shift_features": "",
    "synthetic.shift_day": 0,
    "synthetic.shift_delta": 0.0,
    "split.train_fraction": 0.5,
    "ood.train_regions": 3,
    "window.beta": 30,
    "raster.cell_w": 64,
    "raster.cell_h": 64,
    "text.d_model": 64,
    "text.n_layers": 2,
    "text.n_heads": 4,
    "text.ffn_hidden": 256,
    "text.max_seq_len": 256,
    "vision.d_model": 64,
    "vision.n_layers": 2,
    "vision.n_heads": 4,
    "vision.ffn_hidden": 256,
    "vision.patch_size": 8,
    "smoe.n_experts": 4,
    "smoe.top_k": 2,
    "smoe.expert_hidden": 256,
    "fusion.decoder_layers": 2,
    "fusion.decoder_d": 64,
    "fusion.decoder_heads": 4,
    "fusion.eta1": 1.0,
    "fusion.eta2": 0.5,
    "fusion.max_positions": 258,
    "train.lr": 1e-3,
    "train.weight_decay": 0.01,
    "train.batch_size": 16,
    "train.epochs": 1,
    "train.p_mask": 0.15,
    "train.grad_clip_norm": 1.0,
    "ablation.variant": "full",
    "mask.mode": "fixed",
    "mask.features": ",".join(TE.FIXED_SENSOR_ORDER),
    "mask.n": 4,
    "mask.seed": 0,
    "desc.dataset": "synthetic",
    "desc.task": "synthetic",
}


def _parse_value(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_run_config(config_path: str | None, overrides: list[str]) -> dict:
    """Resolve the flat key=value config; every offending key is reported."""
    values = dict(DEFAULTS)
    pairs: list[tuple[str, str, str]] = []
    if config_path:
        with open(config_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                key, eq, raw = line.partition("=")
                pairs.append((key.strip(), raw.strip() if eq else None,
                              f"{config_path}:{lineno}"))
    for item in overrides:
        key, eq, raw = item.partition("=")
        pairs.append((key.strip(), raw.strip() if eq else None, "--set"))
    problems = []
    for key, raw, where in pairs:
        if raw is None:
            problems.append(f"{where}: {key!r} is not a key=value entry")
            continue
        if key not in DEFAULTS:
            problems.append(f"{where}: unknown key {key!r}")
            continue
        try:
            values[key] = _parse_value(key, raw)
        except ValueError:
            problems.append(f"{where}: bad value {raw!r} for {key!r} "
                            f"(expected {type(DEFAULTS[key]).__name__})")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return values


def _description(table: dict[str, str], value: str) -> str:
    return table.get(value, value)


def build_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        text=EncoderConfig(d_model=cfg["text.d_model"], n_layers=cfg["text.n_layers"],
                           n_heads=cfg["text.n_heads"], ffn_hidden=cfg["text.ffn_hidden"],
                           max_seq_len=cfg["text.max_seq_len"]),
        vision=EncoderConfig(d_model=cfg["vision.d_model"], n_layers=cfg["vision.n_layers"],
                             n_heads=cfg["vision.n_heads"], ffn_hidden=cfg["vision.ffn_hidden"],
                             max_seq_len=cfg["text.max_seq_len"],
                             patch_size=cfg["vision.patch_size"]),
        smoe=SmoeConfig(n_experts=cfg["smoe.n_experts"], top_k=cfg["smoe.top_k"],
                        expert_hidden=cfg["smoe.expert_hidden"]),
        fusion=apply_variant(
            FusionConfig(decoder_layers=cfg["fusion.decoder_layers"],
                         decoder_d=cfg["fusion.decoder_d"],
                         decoder_heads=cfg["fusion.decoder_heads"],
                         eta1=cfg["fusion.eta1"], eta2=cfg["fusion.eta2"],
                         max_positions=cfg["fusion.max_positions"]),
            cfg["ablation.variant"]),
        raster=RasterConfig(cell_w=cfg["raster.cell_w"], cell_h=cfg["raster.cell_h"]),
        beta=cfg["window.beta"],
        dataset_desc=_description(DATASET_DESCRIPTIONS, cfg["desc.dataset"]),
        task_desc=_description(TASK_DESCRIPTIONS, cfg["desc.task"]))


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"],
                       batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"],
                       seed=cfg["seed"], p_mask=cfg["train.p_mask"],
                       grad_clip_norm=cfg["train.grad_clip_norm"])


def load_or_generate(cfg: dict) -> Dataset:
    if cfg["data.csv"]:
        return load_csv(cfg["data.csv"], FeatureSchema())
    shift = None
    if cfg["synthetic.shift_features"]:
        names = tuple(n.strip() for n in cfg["synthetic.shift_features"].split(","))
        shift = ShiftSpec(names, cfg["synthetic.shift_day"], cfg["synthetic.shift_delta"])
    return generate_synthetic(cfg["synthetic.seed"], cfg["synthetic.n_regions"],
                              cfg["synthetic.total_days"],
                              cfg["synthetic.missing_rate"], shift)


def make_vocab(ds: Dataset, mc: ModelConfig):
    return build_vocabulary(ds.schema, ds.regions, mc.dataset_desc, mc.task_desc)


def write_manifest(out_dir: str, cfg: dict, extra: dict | None = None) -> None:
    lines = {f"config.{k}": repr(v) for k, v in cfg.items()}
    if extra:
        lines.update({k: str(v) for k, v in extra.items()})
    blob = "".join(f"{k}={lines[k]}\n" for k in sorted(lines))
    lines["manifest_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    with open(os.path.join(out_dir, "run_manifest.txt"), "w", encoding="utf-8") as fh:
        for k in sorted(lines):
            fh.write(f"{k}={lines[k]}\n")


def read_run_manifest(out_dir: str) -> dict[str, str]:
    out = {}
    with open(os.path.join(out_dir, "run_manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("=")
            out[key] = value
    return out


def _mask_spec(cfg: dict) -> MaskSpec:
    features = tuple(n.strip() for n in cfg["mask.features"].split(",") if n.strip())
    return MaskSpec(mode=cfg["mask.mode"], hidden_features=features,
                    n=cfg["mask.n"], seed=cfg["mask.seed"])


def _trained_model(cfg: dict, out_dir: str, ds_train: Dataset,
                   checkpoint: str | None):
    mc = build_model_config(cfg)
    vocab = make_vocab(ds_train, mc)
    model = Model(mc, vocab, ds_train.schema, cfg["seed"])
    if checkpoint:
        TE.load_checkpoint(checkpoint, model)
        return model, None
    tc = build_train_config(cfg)
    samples = prepare_samples(ds_train, vocab, mc,
                              cache_dir=os.path.join(out_dir, "cache"))
    result = TE.train(ds_train, model, tc, samples=samples)
    return model, result


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_synthetic(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    path = os.path.join(out_dir, "dataset.csv")
    write_csv(ds, path)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash(),
                                  "records": len(ds.records)})
    print(f"wrote {path} ({len(ds.records)} records, {len(ds.regions)} regions)")
    return 0


def cmd_prepare(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    train_ds, test_ds = split_temporal(ds, cfg["split.train_fraction"])
    mc = build_model_config(cfg)
    vocab = make_vocab(ds, mc)
    save_vocabulary(vocab, os.path.join(out_dir, "vocab.tsv"))
    cache = os.path.join(out_dir, "cache")
    n_train = len(prepare_samples(train_ds, vocab, mc, cache_dir=cache))
    n_test = len(prepare_samples(test_ds, vocab, mc, cache_dir=cache))
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash(),
                                  "train_samples": n_train, "test_samples": n_test})
    print(f"prepared {n_train} train and {n_test} test samples; vocab size {len(vocab)}")
    return 0


def cmd_render_text(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    rec = ds.get(args.region, args.day)
    if rec is None:
        raise DatasetError(f"no record at ({args.region}, {args.day})")
    text = render_semantic(linearize(rec, ds.schema), rec.region_id, rec.day_index)
    from .dataset import assemble_window
    bundle = assemble_window(ds, args.region, args.day, cfg["window.beta"])
    window = [r.target for r in reversed(bundle.image_window) if r.target is not None]
    mc = build_model_config(cfg)
    instruction = build_domain_instruction(mc.dataset_desc, mc.task_desc, window)
    path = os.path.join(out_dir, f"text_{args.region}_{args.day}.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n" + instruction + "\n")
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash()})
    print(text)
    print(instruction)
    return 0


def cmd_render_image(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    from .dataset import assemble_window
    bundle = assemble_window(ds, args.region, args.day, cfg["window.beta"])
    img = rasterize(bundle, ds.norm_stats, RasterConfig(cfg["raster.cell_w"],
                                                        cfg["raster.cell_h"]))
    path = os.path.join(out_dir, f"trend_{args.region}_{args.day}.pgm")
    write_pgm(img, path)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash()})
    print(f"wrote {path} ({img.width}x{img.height})")
    return 0


def cmd_train(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    train_ds, test_ds = split_temporal(ds, cfg["split.train_fraction"])
    model, result = _trained_model(cfg, out_dir, train_ds, None)
    ckpt = os.path.join(out_dir, "checkpoint")
    TE.save_checkpoint(ckpt, model, build_train_config(cfg),
                       epoch=cfg["train.epochs"])
    rows = [{"epoch": log.epoch, "mean_loss": log.mean_loss,
             "n_li_pairs": log.n_li_pairs,
             "n_artificial_masks": log.n_artificial_masks}
            for log in result.epochs]
    TE.write_metrics_jsonl(os.path.join(out_dir, "train_log.jsonl"), rows)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash(),
                                  "frozen_hash": model.frozen_hash()})
    print(f"trained {cfg['train.epochs']} epochs; checkpoint at {ckpt}")
    return 0


def cmd_evaluate(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    train_ds, test_ds = split_temporal(ds, cfg["split.train_fraction"])
    model, _ = _trained_model(cfg, out_dir, train_ds, args.checkpoint)
    samples = prepare_samples(test_ds, model.vocab, model.cfg,
                              cache_dir=os.path.join(out_dir, "cache"))
    m = TE.evaluate(test_ds, model, samples=samples)
    rows = [TE.metrics_row("standard", cfg["ablation.variant"], m["rmse"],
                           m["mae"], cfg["seed"])]
    TE.write_metrics_jsonl(os.path.join(out_dir, "metrics.jsonl"), rows)
    with open(os.path.join(out_dir, "per_region.json"), "w", encoding="utf-8") as fh:
        json.dump(m["per_region"], fh, sort_keys=True, indent=1)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash()})
    print(f"rmse {m['rmse']:.6f} mae {m['mae']:.6f} over {m['n']} targets")
    return 0


def cmd_sensors_out(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    train_ds, test_ds = split_temporal(ds, cfg["split.train_fraction"])
    model, _ = _trained_model(cfg, out_dir, train_ds, args.checkpoint)
    spec = _mask_spec(cfg)
    rows = TE.leave_sensors_out(test_ds, model, spec)
    out_rows = [TE.metrics_row(f"sensors_out_{spec.mode}", cfg["ablation.variant"],
                               r["rmse"], r["mae"], cfg["seed"],
                               missing_count=r["missing_count"])
                for r in rows]
    TE.write_metrics_jsonl(os.path.join(out_dir, "metrics.jsonl"), out_rows)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash(),
                                  "hidden_order": json.dumps(rows[-1]["hidden"])})
    for r in rows:
        print(f"missing {r['missing_count']}: rmse {r['rmse']:.6f} "
              f"(+{100 * r['rmse_increase_ratio']:.1f}%)")
    return 0


def cmd_ood(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    mc = build_model_config(cfg)
    vocab = make_vocab(ds, mc)
    result = TE.ood_protocol(ds, cfg["ood.train_regions"], mc,
                             build_train_config(cfg), vocab)
    rows = [TE.metrics_row("ood", cfg["ablation.variant"], result["rmse"],
                           result["mae"], cfg["seed"])]
    TE.write_metrics_jsonl(os.path.join(out_dir, "metrics.jsonl"), rows)
    write_manifest(out_dir, cfg, {
        "dataset_hash": ds.content_hash(),
        "ood_train_regions": json.dumps(result["train_regions"]),
        "ood_test_regions": json.dumps(result["test_regions"])})
    print(f"ood rmse {result['rmse']:.6f} mae {result['mae']:.6f} "
          f"(train {result['train_regions']}, test {result['test_regions']})")
    return 0


def cmd_ablate_all(cfg, out_dir, args):
    ds = load_or_generate(cfg)
    train_ds, test_ds = split_temporal(ds, cfg["split.train_fraction"])
    mc = build_model_config(cfg)
    vocab = make_vocab(ds, mc)
    tc = build_train_config(cfg)
    cache = os.path.join(out_dir, "cache")
    rows = []
    for variant in ABLATION_VARIANTS:
        r = TE.run_ablation(variant, train_ds, test_ds, mc, tc, vocab)
        rows.append(TE.metrics_row("ablation", variant, r["rmse"], r["mae"],
                                   cfg["seed"]))
        print(f"{variant:12s} rmse {r['rmse']:.6f} mae {r['mae']:.6f}")
    TE.write_metrics_jsonl(os.path.join(out_dir, "metrics.jsonl"), rows)
    write_manifest(out_dir, cfg, {"dataset_hash": ds.content_hash()})
    return 0


COMMANDS = {
    "generate-synthetic": cmd_generate_synthetic,
    "prepare": cmd_prepare,
    "render-text": cmd_render_text,
    "render-image": cmd_render_image,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sensors-out": cmd_sensors_out,
    "ood": cmd_ood,
    "ablate-all": cmd_ablate_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ecocast",
        description="Spatial-temporal environmental prediction pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--out", default="out", help="output directory")
        if name in ("render-text", "render-image"):
            p.add_argument("--region", required=True)
            p.add_argument("--day", type=int, required=True)
        if name in ("evaluate", "sensors-out"):
            p.add_argument("--checkpoint", default=None,
                           help="load parameters instead of training")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config, args.set)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out, args)
    except (ConfigError, *USER_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
