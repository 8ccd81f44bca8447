"""Full pipeline assembly: phase-1 data transformation (token layouts, trend
images, domain instructions) and the per-record forward pass from raw history
windows to a scalar prediction plus imputation supervision pairs."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace

import numpy as np

from . import fusion as FU
from . import smoe as SM
from . import tensor as T
from .dataset import Dataset, FeatureSchema, Record, assemble_window, denormalize
from .encoders import (EncoderConfig, SemanticEncoding, encode_granularities,
                       encode_image, encode_text, init_text_encoder,
                       init_vision_encoder)
from .raster import RasterConfig, TrendImage, grid_shape, rasterize
from .smoe import ExpertBank, SmoeConfig
from .tensor import Tensor
from .textual import (MASK_ID, SemanticLayout, TokenSeq, Vocabulary,
                      apply_artificial_masks, build_domain_instruction,
                      build_layout, tokenize)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    text: EncoderConfig = EncoderConfig()
    vision: EncoderConfig = EncoderConfig()
    smoe: SmoeConfig = SmoeConfig()
    fusion: FU.FusionConfig = FU.FusionConfig()
    raster: RasterConfig = RasterConfig()
    beta: int = 30
    dataset_desc: str = ""
    task_desc: str = ""

    def image_shape(self, schema: FeatureSchema) -> tuple[int, int]:
        rows, cols = grid_shape(schema.k + 1)
        return rows * self.raster.cell_h, cols * self.raster.cell_w


@dataclass
class AnchorSample:
    """Phase-1 artifacts for one prediction anchor (region, day)."""
    region: str
    day: int
    target_raw: float
    target_norm: float
    current_layout: SemanticLayout
    weekly_layouts: tuple[SemanticLayout, ...]
    yearly_layouts: tuple[SemanticLayout, ...]
    image: np.ndarray  # uint8 {0,1} pixels
    instruction: TokenSeq


class Model:
    """Parameter container plus forward logic for the full prediction path."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, schema: FeatureSchema,
                 seed: int):
        cfg.fusion.decoder_encoder_config()  # validates decoder dims early
        self.cfg = cfg
        self.vocab = vocab
        self.schema = schema
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng([self.seed, 11])
        fz = cfg.fusion
        self.bank: ExpertBank | None = None
        if not fz.text_off:
            init_text_encoder(self.params, rng, "text", cfg.text, len(vocab))
            if fz.smoe_linear:
                SM.init_linear_imputer(self.params, rng, "smoe", cfg.text.d_model)
            elif not fz.imp_off:
                self.bank = SM.init_expert_bank(self.params, rng, "smoe",
                                                cfg.text.d_model, cfg.smoe)
        if not fz.image_off:
            img_h, img_w = cfg.image_shape(schema)
            init_vision_encoder(self.params, rng, "vis", cfg.vision, img_h, img_w)
        u_dim = cfg.text.d_model if fz.mtg_off else 3 * cfg.text.d_model
        FU.init_fusion(self.params, rng, fz, u_dim, cfg.vision.d_model, len(vocab))
        self.frozen = FU.init_frozen_decoder(fz, self.seed)

    # -- parameter bookkeeping

    def trainable_items(self):
        return sorted(self.params.items())

    def zero_grad(self):
        for _, p in self.trainable_items():
            p.grad = None

    def frozen_hash(self) -> str:
        return FU.frozen_hash(self.frozen)

    # -- encodings

    def _smoe_cfg(self, train: bool) -> SmoeConfig:
        if train:
            return self.cfg.smoe
        return replace(self.cfg.smoe, noise_enabled=False)

    def _substitute(self, enc: SemanticEncoding, train: bool,
                    rng: np.random.Generator | None) -> SemanticEncoding:
        fz = self.cfg.fusion
        if fz.imp_off or not enc.mask_positions:
            return enc
        if fz.smoe_linear:
            return SM.substitute_masks(
                enc, None, None,
                impute_fn=lambda row: SM.impute_linear(row, self.params, "smoe"))
        return SM.substitute_masks(enc, self.bank, self._smoe_cfg(train), rng)

    def encode_seq(self, seq: TokenSeq, train: bool,
                   rng: np.random.Generator | None) -> SemanticEncoding:
        enc = encode_text(seq, self.params, self.cfg.text, prefix="text")
        return self._substitute(enc, train, rng)

    def _pooled_for_layout(self, layout: SemanticLayout, train: bool,
                           rng: np.random.Generator | None,
                           cache: dict | None) -> Tensor:
        seq = layout.token_seq()
        if cache is not None and seq.ids in cache:
            return cache[seq.ids]
        pooled = self.encode_seq(seq, train, rng).pooled
        if cache is not None:
            cache[seq.ids] = pooled
        return pooled

    def forward_sample(self, sample: AnchorSample, *, train: bool,
                       gate_rng: np.random.Generator | None = None,
                       artificial: set[int] | None = None,
                       cache: dict | None = None):
        """Prediction for one anchor.

        Returns (pred, li_pairs) with pred a [1] tensor in normalized target
        units and li_pairs a list of (imputed_row, teacher_row) tensors for the
        artificially masked features of the current record.
        """
        fz = self.cfg.fusion
        u = None
        li_pairs: list[tuple[Tensor, Tensor]] = []
        if not fz.text_off:
            if train and artificial:
                seq, meta = apply_artificial_masks(sample.current_layout, artificial)
                supervise = not fz.imp_off and fz.eta2 > 0.0
                if supervise:
                    with T.no_grad():
                        teacher_enc = encode_text(sample.current_layout.token_seq(),
                                                  self.params, self.cfg.text,
                                                  prefix="text")
                enc = self._substitute(
                    encode_text(seq, self.params, self.cfg.text, prefix="text"),
                    train, gate_rng)
                if supervise:
                    for h, (_, span) in enumerate(meta):
                        if span is None:
                            continue
                        start, end = span
                        teacher_row = Tensor(
                            teacher_enc.token_states.data[start:end].mean(axis=0,
                                                                          keepdims=True))
                        li_pairs.append((T.take_rows(enc.mask_states, [h]), teacher_row))
                current_pooled = enc.pooled
            else:
                current_pooled = self._pooled_for_layout(sample.current_layout,
                                                         train, gate_rng, cache)
            if fz.mtg_off:
                u = current_pooled
            else:
                weekly = [self._pooled_for_layout(l, train, gate_rng, cache)
                          for l in sample.weekly_layouts]
                yearly = [self._pooled_for_layout(l, train, gate_rng, cache)
                          for l in sample.yearly_layouts]
                u = encode_granularities(current_pooled, weekly, yearly)
        o = None
        if not fz.image_off:
            o = encode_image(sample.image.astype(np.float64), self.params,
                             self.cfg.vision, prefix="vis").pooled
        q = FU.fuse(FU.FusionInput(u, o, sample.instruction), self.params,
                    self.frozen, fz)
        return FU.predict(q, self.params), li_pairs

    def predict_raw(self, sample: AnchorSample, stats, cache: dict | None = None) -> float:
        with T.no_grad():
            pred, _ = self.forward_sample(sample, train=False, cache=cache)
        return denormalize(pred.item(), stats.target)


# ---------------------------------------------------------------------------
# phase-1 transformation


def prepare_sample(ds: Dataset, region: str, day: int, vocab: Vocabulary,
                   cfg: ModelConfig, layout_cache: dict | None = None) -> AnchorSample:
    rec = ds.get(region, day)
    if rec is None or rec.target is None:
        raise ModelError(f"({region}, {day}) is not a prediction anchor")
    bundle = assemble_window(ds, region, day, cfg.beta)
    cache = layout_cache if layout_cache is not None else {}

    def layout_of(r: Record) -> SemanticLayout:
        key = (r.region_id, r.day_index, r.feature_present, r.features)
        if key not in cache:
            cache[key] = build_layout(r, ds.schema, vocab, cfg.text.max_seq_len)
        return cache[key]

    img = rasterize(bundle, ds.norm_stats, cfg.raster)
    window_chrono = list(reversed(bundle.image_window))
    target_window = [r.target for r in window_chrono if r.target is not None]
    instruction = tokenize(
        build_domain_instruction(cfg.dataset_desc, cfg.task_desc, target_window),
        vocab, cfg.fusion.max_positions - 2)
    stats = ds.norm_stats.target
    return AnchorSample(
        region=region, day=day,
        target_raw=rec.target,
        target_norm=(rec.target - stats.mean) / stats.std,
        current_layout=layout_of(rec),
        weekly_layouts=tuple(layout_of(r) for r in bundle.weekly),
        yearly_layouts=tuple(layout_of(r) for r in bundle.yearly),
        image=img.pixels.astype(np.uint8),
        instruction=instruction)


def anchor_keys(ds: Dataset) -> list[tuple[str, int]]:
    """All (region, day) pairs with an observed target, sorted."""
    return sorted((r.region_id, r.day_index)
                  for r in ds.records.values() if r.target is not None)


def prepare_samples(ds: Dataset, vocab: Vocabulary, cfg: ModelConfig,
                    keys=None, cache_dir=None) -> list[AnchorSample]:
    """Phase-1 transformation for every anchor; with cache_dir set, results are
    persisted to (and reloaded from) a file keyed by dataset and config."""
    if keys is None and cache_dir is not None:
        key = _cache_key(ds, vocab, cfg)
        path = os.path.join(cache_dir, f"samples-{key}.npz")
        if os.path.exists(path):
            return load_samples(path)
    keys_list = anchor_keys(ds) if keys is None else list(keys)
    layout_cache: dict = {}
    samples = [prepare_sample(ds, region, day, vocab, cfg, layout_cache)
               for region, day in keys_list]
    if keys is None and cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        save_samples(path, samples)
    return samples


# ---------------------------------------------------------------------------
# phase-1 artifact cache


def _cache_key(ds: Dataset, vocab: Vocabulary, cfg: ModelConfig) -> str:
    h = hashlib.sha256()
    h.update(ds.content_hash().encode())
    h.update("\x1f".join(vocab.id_to_token).encode())
    h.update(repr((cfg.beta, cfg.raster, cfg.text.max_seq_len,
                   cfg.fusion.max_positions, cfg.dataset_desc,
                   cfg.task_desc)).encode())
    return h.hexdigest()[:16]


def _pack_seqs(seqs) -> tuple[np.ndarray, np.ndarray]:
    offsets = np.zeros(len(seqs) + 1, dtype=np.int64)
    for i, s in enumerate(seqs):
        offsets[i + 1] = offsets[i] + len(s)
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64,
                       count=int(offsets[-1]))
    return flat, offsets


def _unpack_seq(flat, offsets, i) -> tuple[int, ...]:
    return tuple(int(v) for v in flat[offsets[i]:offsets[i + 1]])


def save_samples(path, samples: list[AnchorSample]) -> None:
    layouts: dict[SemanticLayout, int] = {}

    def layout_idx(l: SemanticLayout) -> int:
        if l not in layouts:
            layouts[l] = len(layouts)
        return layouts[l]

    refs = np.array([[layout_idx(l) for l in
                      (s.current_layout, *s.weekly_layouts, *s.yearly_layouts)]
                     for s in samples], dtype=np.int64)
    ordered = sorted(layouts, key=layouts.get)
    ids_flat, ids_off = _pack_seqs([l.ids for l in ordered])
    # feature slot per layout: (pos, -1) for a mask slot, (start, end) for a span
    slots = np.array([[(slot, -1) if not l.feature_present[k] else slot
                       for k, slot in enumerate(l.feature_slots)]
                      for l in ordered], dtype=np.int64)
    present = np.array([l.feature_present for l in ordered], dtype=bool)
    instr_flat, instr_off = _pack_seqs([s.instruction.ids for s in samples])
    images = np.stack([s.image for s in samples]).astype(np.uint8)
    np.savez_compressed(
        path,
        regions=np.array([s.region for s in samples]),
        days=np.array([s.day for s in samples], dtype=np.int64),
        target_raw=np.array([s.target_raw for s in samples]),
        target_norm=np.array([s.target_norm for s in samples]),
        refs=refs, ids_flat=ids_flat, ids_off=ids_off,
        slots=slots, present=present,
        instr_flat=instr_flat, instr_off=instr_off,
        images=np.packbits(images, axis=None),
        image_shape=np.array(images.shape, dtype=np.int64))


def load_samples(path) -> list[AnchorSample]:
    z = np.load(path, allow_pickle=False)
    n_layouts = len(z["ids_off"]) - 1
    layouts = []
    for i in range(n_layouts):
        ids = _unpack_seq(z["ids_flat"], z["ids_off"], i)
        slots = tuple((int(a), int(b)) if b >= 0 else int(a)
                      for a, b in z["slots"][i])
        layouts.append(SemanticLayout(ids, slots, tuple(bool(p) for p in z["present"][i])))
    shape = tuple(int(d) for d in z["image_shape"])
    images = np.unpackbits(z["images"], count=int(np.prod(shape))).reshape(shape)
    samples = []
    for i in range(len(z["days"])):
        ref = z["refs"][i]
        instr_ids = _unpack_seq(z["instr_flat"], z["instr_off"], i)
        samples.append(AnchorSample(
            region=str(z["regions"][i]), day=int(z["days"][i]),
            target_raw=float(z["target_raw"][i]),
            target_norm=float(z["target_norm"][i]),
            current_layout=layouts[ref[0]],
            weekly_layouts=tuple(layouts[j] for j in ref[1:8]),
            yearly_layouts=tuple(layouts[j] for j in ref[8:20]),
            image=images[i].astype(np.uint8),
            instruction=TokenSeq(instr_ids, tuple(
                p for p, t in enumerate(instr_ids) if t == MASK_ID))))
    return samples
