"""Two-phase training (transform, then minibatch optimization), AdamW with
global-norm clipping, RMSE/MAE evaluation, the leave-sensors-out and OOD
protocols, ablation harness, and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import fusion as FU
from . import smoe as SM
from . import tensor as T
from .dataset import Dataset, denormalize, mask_features, split_ood_regions
from .model import Model, ModelConfig, anchor_keys, prepare_samples
from .tensor import Tensor
from .textual import save_vocabulary, load_vocabulary

FIXED_SENSOR_ORDER = ("rainfall", "average cloud cover fraction",
                      "groundwater temperature", "subsurface temperature")


class TrainError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3          # desk-scale default; 1e-5 suits full-size backbones
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    p_mask: float = 0.15
    grad_clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise TrainError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.p_mask < 1.0:
            raise TrainError(f"p_mask must be in [0, 1), got {self.p_mask}")
        if self.batch_size < 1 or self.epochs < 0:
            raise TrainError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class MaskSpec:
    mode: str = "fixed"  # fixed | random
    hidden_features: tuple[str, ...] = FIXED_SENSOR_ORDER
    n: int = 4
    seed: int = 0


@dataclass
class EpochLog:
    epoch: int
    batch_losses: list[float]
    n_li_pairs: int
    n_artificial_masks: int

    @property
    def mean_loss(self) -> float:
        return float(np.mean(self.batch_losses)) if self.batch_losses else float("nan")


@dataclass
class TrainResult:
    epochs: list[EpochLog] = field(default_factory=list)


class AdamW:
    """Decoupled weight decay with bias-corrected adaptive moments; gradients
    are clipped to a global norm before the update."""

    def __init__(self, named_params, cfg: TrainConfig):
        self.items = sorted(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = {path: np.zeros_like(p.data) for path, p in self.items}
        self.v = {path: np.zeros_like(p.data) for path, p in self.items}

    def _grads(self):
        return [(path, p, p.grad if p.grad is not None else np.zeros_like(p.data))
                for path, p in self.items]

    def step(self) -> float:
        cfg = self.cfg
        grads = self._grads()
        total = float(np.sqrt(sum(float((g * g).sum()) for _, _, g in grads)))
        scale = 1.0
        if cfg.grad_clip_norm > 0 and total > cfg.grad_clip_norm:
            scale = cfg.grad_clip_norm / (total + 1e-12)
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for path, p, g in grads:
            g = g * scale
            m = self.m[path] = b1 * self.m[path] + (1.0 - b1) * g
            v = self.v[path] = b2 * self.v[path] + (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
            p.data = p.data - cfg.lr * (update + cfg.weight_decay * p.data)
        return total

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None


# ---------------------------------------------------------------------------
# training


def _pick_artificial(rec_present, p_mask: float, rng: np.random.Generator) -> set[int]:
    if p_mask <= 0.0:
        return set()
    draws = rng.random(len(rec_present))
    return {k for k, present in enumerate(rec_present)
            if present and draws[k] < p_mask}


def train(ds_train: Dataset, model: Model, cfg: TrainConfig,
          samples=None) -> TrainResult:
    """Phase 1 precomputes token layouts, trend images, and instructions for
    every anchor; phase 2 runs shuffled minibatches of the joint objective."""
    fz = model.cfg.fusion
    if fz.eta1 <= 0.0 and (fz.eta2 <= 0.0 or fz.imp_off):
        raise TrainError("loss has no active term: eta1 and eta2 are both off")
    if samples is None:
        samples = prepare_samples(ds_train, model.vocab, model.cfg)
    if not samples:
        raise TrainError("training split has no records with targets")
    mask_in_training = not fz.text_off and cfg.p_mask > 0.0
    shuffle_rng = np.random.default_rng([cfg.seed, 21])
    mask_rng = np.random.default_rng([cfg.seed, 22])
    gate_rng = np.random.default_rng([cfg.seed, 23])
    opt = AdamW(model.trainable_items(), cfg)
    result = TrainResult()
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(samples))
        log = EpochLog(epoch, [], 0, 0)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            preds, targets = [], []
            imputed_rows, teacher_rows = [], []
            step_cache: dict = {}
            for idx in batch:
                s = samples[int(idx)]
                artificial: set[int] = set()
                if mask_in_training:
                    artificial = _pick_artificial(s.current_layout.feature_present,
                                                  cfg.p_mask, mask_rng)
                log.n_artificial_masks += len(artificial)
                pred, pairs = model.forward_sample(
                    s, train=True, gate_rng=gate_rng, artificial=artificial,
                    cache=step_cache)
                preds.append(pred)
                targets.append(s.target_norm)
                for imp, teach in pairs:
                    imputed_rows.append(imp)
                    teacher_rows.append(teach)
            loss_r = FU.prediction_loss(preds, targets)
            loss_i = None
            if imputed_rows:
                loss_i = SM.imputation_loss(T.concat(imputed_rows, axis=0),
                                            T.concat(teacher_rows, axis=0))
                log.n_li_pairs += len(imputed_rows)
            loss = FU.total_loss(loss_r, loss_i, fz)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainError(f"non-finite loss {value} at epoch {epoch}, "
                                 f"batch starting {start}")
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            log.batch_losses.append(value)
        result.epochs.append(log)
    opt.zero_grad()
    return result


# ---------------------------------------------------------------------------
# evaluation and protocols


def evaluate(ds_test: Dataset, model: Model, samples=None) -> dict:
    """RMSE / MAE in raw target units over observed targets, with a per-region
    breakdown; gating noise is disabled."""
    if samples is None:
        samples = prepare_samples(ds_test, model.vocab, model.cfg)
    if not samples:
        raise TrainError("evaluation split has no records with targets")
    cache: dict = {}
    per_region: dict[str, list[tuple[float, float]]] = {}
    pairs = []
    for s in samples:
        pred = model.predict_raw(s, ds_test.norm_stats, cache=cache)
        pairs.append((pred, s.target_raw))
        per_region.setdefault(s.region, []).append((pred, s.target_raw))

    def metrics(items):
        err = np.array([p - t for p, t in items])
        return {"rmse": float(np.sqrt(np.mean(err ** 2))),
                "mae": float(np.mean(np.abs(err))),
                "n": len(items)}

    out = metrics(pairs)
    out["per_region"] = {r: metrics(v) for r, v in sorted(per_region.items())}
    return out


def sensor_sequence(model: Model, spec: MaskSpec) -> list[str]:
    names = model.schema.names
    if spec.mode == "fixed":
        seq = list(spec.hidden_features)
    elif spec.mode == "random":
        if not 0 < spec.n < model.schema.k:
            raise TrainError(f"random mask count n={spec.n} outside (0, {model.schema.k})")
        rng = np.random.default_rng([spec.seed, 31])
        seq = [names[i] for i in rng.permutation(model.schema.k)[:spec.n]]
    else:
        raise TrainError(f"unknown mask mode {spec.mode!r}")
    for name in seq:
        model.schema.index_of(name)  # unknown-feature error
    return seq


def leave_sensors_out(ds_test: Dataset, model: Model, spec: MaskSpec) -> list[dict]:
    """Hide sensors incrementally (1..n) in test copies only; report metrics per
    missing count plus the RMSE increase ratio relative to one hidden sensor."""
    seq = sensor_sequence(model, spec)
    rows = []
    for count in range(1, len(seq) + 1):
        hidden = seq[:count]
        masked = mask_features(ds_test, hidden)
        m = evaluate(masked, model)
        rows.append({"missing_count": count, "hidden": list(hidden),
                     "rmse": m["rmse"], "mae": m["mae"], "n": m["n"]})
    base = rows[0]["rmse"]
    for row in rows:
        row["rmse_increase_ratio"] = (row["rmse"] - base) / base if base > 0 else 0.0
    return rows


def run_ablation(variant: str, ds_train: Dataset, ds_test: Dataset,
                 model_cfg: ModelConfig, train_cfg: TrainConfig, vocab) -> dict:
    """Train and evaluate one configured variant; returns a comparison row."""
    fz = FU.apply_variant(model_cfg.fusion, variant)
    cfg = ModelConfig(text=model_cfg.text, vision=model_cfg.vision,
                      smoe=model_cfg.smoe, fusion=fz, raster=model_cfg.raster,
                      beta=model_cfg.beta, dataset_desc=model_cfg.dataset_desc,
                      task_desc=model_cfg.task_desc)
    model = Model(cfg, vocab, ds_train.schema, train_cfg.seed)
    train(ds_train, model, train_cfg)
    m = evaluate(ds_test, model)
    return {"variant": variant, "rmse": m["rmse"], "mae": m["mae"], "n": m["n"],
            "model": model}


def ood_protocol(ds: Dataset, n_train_regions: int, model_cfg: ModelConfig,
                 train_cfg: TrainConfig, vocab) -> dict:
    train_ds, test_ds = split_ood_regions(ds, n_train_regions)
    model = Model(model_cfg, vocab, ds.schema, train_cfg.seed)
    train(train_ds, model, train_cfg)
    m = evaluate(test_ds, model)
    return {"train_regions": list(train_ds.regions),
            "test_regions": list(test_ds.regions),
            "rmse": m["rmse"], "mae": m["mae"], "n": m["n"], "model": model}


# ---------------------------------------------------------------------------
# checkpoints and metrics files


def _flatten_config(model: Model, train_cfg: TrainConfig | None) -> dict[str, str]:
    out: dict[str, str] = {}
    cfg = model.cfg
    for section, obj in (("text", cfg.text), ("vision", cfg.vision),
                         ("smoe", cfg.smoe), ("fusion", cfg.fusion),
                         ("raster", cfg.raster)):
        for k, v in sorted(vars(obj).items()):
            out[f"config.{section}.{k}"] = repr(v)
    out["config.beta"] = repr(cfg.beta)
    out["config.dataset_desc"] = json.dumps(cfg.dataset_desc)
    out["config.task_desc"] = json.dumps(cfg.task_desc)
    if train_cfg is not None:
        for k, v in sorted(vars(train_cfg).items()):
            out[f"train.{k}"] = repr(v)
    return out


def schema_hash(schema) -> str:
    return hashlib.sha256("\x1f".join(schema.names).encode()).hexdigest()


def save_checkpoint(path, model: Model, train_cfg: TrainConfig | None = None,
                    epoch: int = 0, rng_state: dict | None = None) -> None:
    """Directory container: manifest (key=value), vocab file, and one
    little-endian float64 raw file per trainable parameter."""
    os.makedirs(path, exist_ok=True)
    manifest = {"schema_hash": schema_hash(model.schema),
                "epoch": str(int(epoch)),
                "seed": str(model.seed),
                "frozen_seed": str(model.seed),
                "rng_state": json.dumps(rng_state) if rng_state else ""}
    manifest.update(_flatten_config(model, train_cfg))
    for p, tensor in model.trainable_items():
        manifest[f"shape.{p}"] = ",".join(str(d) for d in tensor.shape)
        with open(os.path.join(path, f"{p}.bin"), "wb") as fh:
            fh.write(tensor.data.astype("<f8").tobytes())
    with open(os.path.join(path, "manifest.txt"), "w", encoding="utf-8") as fh:
        for k in sorted(manifest):
            fh.write(f"{k}={manifest[k]}\n")
    save_vocabulary(model.vocab, os.path.join(path, "vocab.tsv"))


def read_manifest(path) -> dict[str, str]:
    out = {}
    with open(os.path.join(path, "manifest.txt"), encoding="utf-8") as fh:
        for line in fh:
            key, _, value = line.rstrip("\n").partition("=")
            out[key] = value
    return out


def load_checkpoint(path, model: Model) -> dict[str, str]:
    """Load parameters into an already-constructed model of matching shape."""
    manifest = read_manifest(path)
    if manifest.get("schema_hash") != schema_hash(model.schema):
        raise TrainError("checkpoint schema does not match the model's schema")
    for p, tensor in model.trainable_items():
        want = manifest.get(f"shape.{p}")
        if want is None:
            raise TrainError(f"checkpoint lacks parameter {p}")
        shape = tuple(int(x) for x in want.split(",")) if want else ()
        if shape != tensor.shape:
            raise TrainError(f"shape mismatch for {p}: checkpoint {shape}, model {tensor.shape}")
        with open(os.path.join(path, f"{p}.bin"), "rb") as fh:
            arr = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
        tensor.data = arr.astype(np.float64).copy()
        tensor.grad = None
    return manifest


def checkpoint_vocab(path):
    return load_vocabulary(os.path.join(path, "vocab.tsv"))


def metrics_row(protocol: str, variant: str, rmse: float, mae: float, seed: int,
                missing_count: int | None = None) -> dict:
    return {"protocol": protocol, "variant": variant,
            "missing_count": missing_count, "rmse": rmse, "mae": mae,
            "seed": seed}


def write_metrics_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
