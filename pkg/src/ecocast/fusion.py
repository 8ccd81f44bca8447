"""Multimodal fusion: trainable projections feed [U | O | instruction tokens]
through a frozen causal decoder; a linear head reads the final hidden state.
Also the prediction / imputation / total loss combinators."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import (EncoderConfig, causal_attention_mask, init_blocks,
                       init_embedding, init_linear, mean_of, run_blocks)
from .tensor import Tensor
from .textual import TokenSeq

ABLATION_VARIANTS = ("full", "text_off", "image_off", "llm_off", "imp_off",
                     "smoe_linear", "mtg_off")


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    decoder_layers: int = 2
    decoder_d: int = 64
    decoder_heads: int = 4
    eta1: float = 1.0
    eta2: float = 0.5
    max_positions: int = 258
    text_off: bool = False
    image_off: bool = False
    llm_off: bool = False
    imp_off: bool = False
    smoe_linear: bool = False
    mtg_off: bool = False

    def __post_init__(self):
        if self.eta1 < 0 or self.eta2 < 0:
            raise FusionError("loss coefficients must be nonnegative")
        if self.text_off and self.image_off:
            raise FusionError("at most one of text_off/image_off may be set")

    def decoder_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(d_model=self.decoder_d, n_layers=self.decoder_layers,
                             n_heads=self.decoder_heads, ffn_hidden=4 * self.decoder_d,
                             max_seq_len=self.max_positions)


def apply_variant(cfg: FusionConfig, variant: str) -> FusionConfig:
    if variant not in ABLATION_VARIANTS:
        raise FusionError(f"unknown variant {variant!r}, expected one of {ABLATION_VARIANTS}")
    if variant == "full":
        return cfg
    return FusionConfig(**{**cfg.__dict__, variant: True})


@dataclass
class FusionInput:
    u: Tensor | None            # [3*d_model] or [d_model] (mtg_off); None when text_off
    o: Tensor | None            # [d_model]; None when image_off
    instruction: TokenSeq


# ---------------------------------------------------------------------------
# parameters


def init_fusion(params: dict[str, Tensor], rng: np.random.Generator,
                cfg: FusionConfig, u_dim: int, o_dim: int, vocab_size: int) -> None:
    """Trainable adapters: input projections, instruction embeddings, head."""
    n_inputs = 1  # pooled instruction embeddings always enter
    if not cfg.text_off:
        init_linear(params, rng, "fusion.proj_u", u_dim, cfg.decoder_d)
        n_inputs += 1
    if not cfg.image_off:
        init_linear(params, rng, "fusion.proj_o", o_dim, cfg.decoder_d)
        n_inputs += 1
    init_embedding(params, rng, "fusion.instr_emb", vocab_size, cfg.decoder_d)
    init_linear(params, rng, "fusion.head", cfg.decoder_d, 1)
    if cfg.llm_off:
        init_linear(params, rng, "fusion.lin", n_inputs * cfg.decoder_d, cfg.decoder_d)


def init_frozen_decoder(cfg: FusionConfig, frozen_seed: int) -> dict[str, Tensor]:
    """Decoder internals drawn once from the run seed; never updated."""
    if cfg.llm_off:
        return {}
    rng = np.random.default_rng([int(frozen_seed), 777])
    frozen: dict[str, Tensor] = {}
    init_embedding(frozen, rng, "dec.pos_emb", cfg.max_positions,
                   cfg.decoder_d, trainable=False)
    init_blocks(frozen, rng, "dec", cfg.decoder_encoder_config(), trainable=False)
    return frozen


def frozen_hash(frozen: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for path in sorted(frozen):
        h.update(path.encode())
        h.update(frozen[path].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# forward


def _project(x: Tensor, params: dict[str, Tensor], path: str) -> Tensor:
    row = T.reshape(x, (1, x.shape[0]))
    return T.add(T.matmul(row, params[f"{path}.w"]), params[f"{path}.b"])


def fuse(fin: FusionInput, params: dict[str, Tensor], frozen: dict[str, Tensor],
         cfg: FusionConfig) -> Tensor:
    """Final-position hidden state of the frozen causal decoder (or, with
    llm_off, a single trainable linear over the concatenated inputs)."""
    rows = []
    if not cfg.text_off:
        if fin.u is None:
            raise FusionError("fusion input lacks U but text_off is not set")
        rows.append(_project(fin.u, params, "fusion.proj_u"))
    if not cfg.image_off:
        if fin.o is None:
            raise FusionError("fusion input lacks O but image_off is not set")
        rows.append(_project(fin.o, params, "fusion.proj_o"))
    instr = T.embedding_lookup(params["fusion.instr_emb"], fin.instruction.ids)
    if cfg.llm_off:
        pooled_instr = T.reshape(T.tmean(instr, axis=0), (1, cfg.decoder_d))
        flat = T.concat(rows + [pooled_instr], axis=1)
        out = T.add(T.matmul(flat, params["fusion.lin.w"]), params["fusion.lin.b"])
        return T.reshape(out, (cfg.decoder_d,))
    x = T.concat(rows + [instr], axis=0)
    n = x.shape[0]
    if n > cfg.max_positions:
        raise FusionError(f"decoder sequence of {n} exceeds max_positions={cfg.max_positions}")
    x = T.add(x, T.take_rows(frozen["dec.pos_emb"], range(n)))
    x = run_blocks(x, frozen, "dec", cfg.decoder_encoder_config(),
                   add_mask=causal_attention_mask(n))
    return T.reshape(T.take_rows(x, [n - 1]), (cfg.decoder_d,))


def fuse_batch(u: Tensor | None, o: Tensor | None, instructions: list[TokenSeq],
               params: dict[str, Tensor], frozen: dict[str, Tensor],
               cfg: FusionConfig) -> Tensor:
    """Batched fuse: u [n, u_dim], o [n, d], one instruction per sample ->
    Q [n, decoder_d]. Instructions are right-padded; with the causal mask the
    hidden state at each sample's last real token is unaffected by padding."""
    from .textual import PAD_ID
    n = len(instructions)
    rows = []
    if not cfg.text_off:
        if u is None:
            raise FusionError("fusion input lacks U but text_off is not set")
        pu = T.add(T.matmul(u, params["fusion.proj_u.w"]), params["fusion.proj_u.b"])
        rows.append(T.reshape(pu, (n, 1, cfg.decoder_d)))
    if not cfg.image_off:
        if o is None:
            raise FusionError("fusion input lacks O but image_off is not set")
        po = T.add(T.matmul(o, params["fusion.proj_o.w"]), params["fusion.proj_o.b"])
        rows.append(T.reshape(po, (n, 1, cfg.decoder_d)))
    lens = [len(s.ids) for s in instructions]
    li_max = max(lens)
    ids = np.full((n, li_max), PAD_ID, dtype=np.int64)
    for i, s in enumerate(instructions):
        ids[i, :lens[i]] = s.ids
    emb = T.embedding_lookup(params["fusion.instr_emb"], ids.reshape(-1))
    emb = T.reshape(emb, (n, li_max, cfg.decoder_d))
    if cfg.llm_off:
        weights = np.zeros((n, 1, li_max))
        for i, ln in enumerate(lens):
            weights[i, 0, :ln] = 1.0 / ln
        pooled_instr = T.reshape(T.matmul(Tensor(weights), emb), (n, 1, cfg.decoder_d))
        flat = T.reshape(T.concat(rows + [pooled_instr], axis=1),
                         (n, (len(rows) + 1) * cfg.decoder_d))
        return T.add(T.matmul(flat, params["fusion.lin.w"]), params["fusion.lin.b"])
    x = T.concat(rows + [emb], axis=1)
    total = x.shape[1]
    if total > cfg.max_positions:
        raise FusionError(f"decoder sequence of {total} exceeds max_positions={cfg.max_positions}")
    x = T.add(x, T.take_rows(frozen["dec.pos_emb"], range(total)))
    x = run_blocks(x, frozen, "dec", cfg.decoder_encoder_config(),
                   add_mask=causal_attention_mask(total))
    last = [i * total + len(rows) + lens[i] - 1 for i in range(n)]
    return T.take_rows(T.reshape(x, (n * total, cfg.decoder_d)), last)


def predict(q: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Linear head on Q; scalar prediction in normalized target units."""
    out = T.add(T.matmul(T.reshape(q, (1, q.shape[0])), params["fusion.head.w"]),
                params["fusion.head.b"])
    return T.reshape(out, (1,))


def predict_batch(q: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Linear head over a batch of Q rows: [n, decoder_d] -> [n]."""
    out = T.add(T.matmul(q, params["fusion.head.w"]), params["fusion.head.b"])
    return T.reshape(out, (q.shape[0],))


def prediction_loss(preds, targets) -> Tensor:
    """Root mean squared error over aligned observed pairs."""
    if isinstance(preds, (list, tuple)):
        if not preds:
            raise FusionError("prediction loss needs at least one pair")
        preds = T.concat(list(preds), axis=0)
    if preds.shape[0] == 0:
        raise FusionError("prediction loss needs at least one pair")
    t = np.asarray(list(targets), dtype=np.float64)
    if t.shape != preds.shape:
        raise FusionError(f"preds {preds.shape} vs targets {t.shape}")
    diff = T.sub(preds, Tensor(t))
    return T.sqrt(T.tmean(T.mul(diff, diff)))


def total_loss(lr: Tensor, li: Tensor | None, cfg: FusionConfig) -> Tensor:
    """eta1 * L_r + eta2 * L_i; the imputation term drops under imp_off."""
    out = T.mul(lr, cfg.eta1)
    if li is not None and not cfg.imp_off and cfg.eta2 > 0:
        out = T.add(out, T.mul(li, cfg.eta2))
    return out
