"""Small trainable transformer encoders: one for semantic token sequences and
one for trend-image patches, plus multi-granularity pooling of history
encodings. The same block stack is reused by the fusion decoder (causal)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import SENTINEL, Tensor
from .textual import PAD_ID, TokenSeq


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ffn_hidden: int = 256
    max_seq_len: int = 256
    patch_size: int = 8  # vision only

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise EncoderError(f"d_model={self.d_model} not divisible by "
                               f"n_heads={self.n_heads}")


@dataclass
class SemanticEncoding:
    token_states: Tensor       # [L, d]
    mask_states: Tensor | None  # [H, d], None when H == 0
    pooled: Tensor             # [d], mean over non-pad tokens
    mask_positions: tuple[int, ...]
    pool_weights: np.ndarray   # [L], non-pad averaging weights


@dataclass
class VisualEncoding:
    patch_states: Tensor  # [P, d]
    pooled: Tensor        # [d]


# ---------------------------------------------------------------------------
# parameter initialization


def init_linear(params: dict, rng: np.random.Generator, path: str,
                n_in: int, n_out: int, trainable: bool = True) -> None:
    w = rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))
    params[f"{path}.w"] = Tensor(w, requires_grad=trainable)
    params[f"{path}.b"] = Tensor(np.zeros(n_out), requires_grad=trainable)


def init_layer_norm(params: dict, path: str, n: int, trainable: bool = True) -> None:
    params[f"{path}.g"] = Tensor(np.ones(n), requires_grad=trainable)
    params[f"{path}.b"] = Tensor(np.zeros(n), requires_grad=trainable)


def init_embedding(params: dict, rng: np.random.Generator, path: str,
                   rows: int, d: int, trainable: bool = True) -> None:
    params[path] = Tensor(rng.normal(0.0, 0.02, size=(rows, d)), requires_grad=trainable)


def init_blocks(params: dict, rng: np.random.Generator, prefix: str,
                cfg: EncoderConfig, trainable: bool = True) -> None:
    d, f = cfg.d_model, cfg.ffn_hidden
    for i in range(cfg.n_layers):
        p = f"{prefix}.l{i}"
        for name in ("q", "k", "v", "o"):
            init_linear(params, rng, f"{p}.{name}", d, d, trainable)
        init_layer_norm(params, f"{p}.ln1", d, trainable)
        init_linear(params, rng, f"{p}.ff1", d, f, trainable)
        init_linear(params, rng, f"{p}.ff2", f, d, trainable)
        init_layer_norm(params, f"{p}.ln2", d, trainable)


def init_text_encoder(params: dict, rng: np.random.Generator, prefix: str,
                      cfg: EncoderConfig, vocab_size: int) -> None:
    init_embedding(params, rng, f"{prefix}.tok_emb", vocab_size, cfg.d_model)
    init_embedding(params, rng, f"{prefix}.pos_emb", cfg.max_seq_len, cfg.d_model)
    init_blocks(params, rng, prefix, cfg)


def init_vision_encoder(params: dict, rng: np.random.Generator, prefix: str,
                        cfg: EncoderConfig, img_h: int, img_w: int) -> None:
    p = cfg.patch_size
    if img_h % p or img_w % p:
        raise EncoderError(f"image {img_h}x{img_w} not divisible by patch size {p}")
    n_patches = (img_h // p) * (img_w // p)
    init_linear(params, rng, f"{prefix}.proj", p * p, cfg.d_model)
    init_embedding(params, rng, f"{prefix}.pos_emb", n_patches, cfg.d_model)
    init_blocks(params, rng, prefix, cfg)


# ---------------------------------------------------------------------------
# forward pieces


def _linear(x: Tensor, params: dict, path: str) -> Tensor:
    return T.add(T.matmul(x, params[f"{path}.w"]), params[f"{path}.b"])


def _linear_nd(x: Tensor, params: dict, path: str) -> Tensor:
    """Affine map over the last axis of a [B, L, d_in] tensor."""
    b, l, d = x.shape
    out = _linear(T.reshape(x, (b * l, d)), params, path)
    return T.reshape(out, (b, l, out.shape[1]))


def _attention(x: Tensor, params: dict, path: str, n_heads: int,
               add_mask: np.ndarray | None, attn_sink: list | None = None) -> Tensor:
    """Multi-head self-attention over [B, L, d].

    add_mask is additive on the attention logits: [L] or [L, L] arrays apply to
    every sequence (pad keys / causal); a [B, 1, L] array masks keys per
    sequence and is repeated across heads.
    """
    b, L, d = x.shape
    dh = d // n_heads
    q = _linear_nd(x, params, f"{path}.q")
    k = _linear_nd(x, params, f"{path}.k")
    v = _linear_nd(x, params, f"{path}.v")
    qh = T.reshape(T.transpose(T.reshape(q, (b, L, n_heads, dh)), (0, 2, 1, 3)),
                   (b * n_heads, L, dh))
    kh = T.reshape(T.transpose(T.reshape(k, (b, L, n_heads, dh)), (0, 2, 3, 1)),
                   (b * n_heads, dh, L))
    vh = T.reshape(T.transpose(T.reshape(v, (b, L, n_heads, dh)), (0, 2, 1, 3)),
                   (b * n_heads, L, dh))
    scores = T.mul(T.matmul(qh, kh), 1.0 / math.sqrt(dh))
    if add_mask is not None:
        if add_mask.ndim == 3:
            add_mask = np.repeat(add_mask, n_heads, axis=0)
        scores = T.add(scores, Tensor(add_mask))
    attn = T.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(attn)
    ctx = T.reshape(T.transpose(T.reshape(T.matmul(attn, vh), (b, n_heads, L, dh)),
                                (0, 2, 1, 3)), (b, L, d))
    return _linear_nd(ctx, params, f"{path}.o")


def run_blocks(x: Tensor, params: dict, prefix: str, cfg: EncoderConfig,
               add_mask: np.ndarray | None = None,
               attn_sink: list | None = None) -> Tensor:
    """Post-norm transformer stack: ln(x + attn(x)) then ln(x + ffn(x)).

    Accepts [L, d] (one sequence) or [B, L, d] (a batch)."""
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1, *x.shape))
    for i in range(cfg.n_layers):
        p = f"{prefix}.l{i}"
        ctx = _attention(x, params, p, cfg.n_heads, add_mask, attn_sink)
        x = T.layer_norm(T.add(x, ctx), params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        ff = _linear_nd(T.gelu(_linear_nd(x, params, f"{p}.ff1")), params, f"{p}.ff2")
        x = T.layer_norm(T.add(x, ff), params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
    return T.reshape(x, x.shape[1:]) if single else x


def pad_attention_mask(ids) -> np.ndarray | None:
    """Additive key mask: SENTINEL under pad tokens, 0 elsewhere."""
    arr = np.asarray(ids)
    if not (arr == PAD_ID).any():
        return None
    return np.where(arr == PAD_ID, SENTINEL, 0.0)


def causal_attention_mask(n: int) -> np.ndarray:
    mask = np.full((n, n), SENTINEL)
    return np.triu(mask, k=1)  # zeros on and below the diagonal


def pooled_mean(states: Tensor, weights: np.ndarray) -> Tensor:
    return T.reshape(T.matmul(Tensor(weights[None, :]), states), (states.shape[1],))


def encode_text(seq: TokenSeq, params: dict, cfg: EncoderConfig,
                prefix: str = "text", attn_sink: list | None = None) -> SemanticEncoding:
    L = len(seq.ids)
    if L == 0 or L > cfg.max_seq_len:
        raise EncoderError(f"sequence length {L} outside [1, {cfg.max_seq_len}]")
    x = T.add(T.embedding_lookup(params[f"{prefix}.tok_emb"], seq.ids),
              T.take_rows(params[f"{prefix}.pos_emb"], range(L)))
    x = run_blocks(x, params, prefix, cfg, pad_attention_mask(seq.ids), attn_sink)
    nonpad = np.asarray([i != PAD_ID for i in seq.ids], dtype=np.float64)
    weights = nonpad / nonpad.sum()
    mask_states = T.take_rows(x, seq.mask_positions) if seq.mask_positions else None
    return SemanticEncoding(x, mask_states, pooled_mean(x, weights),
                            tuple(seq.mask_positions), weights)


@dataclass
class BatchTextEncoding:
    """A batch of sequences encoded together (padded to a common length)."""
    seqs: list[TokenSeq]
    length: int                 # padded length
    states_flat: Tensor         # [n * length, d]
    pooled: Tensor              # [n, d]
    mask_flat_positions: tuple[int, ...]  # into states_flat, sequence-major
    mask_owner: tuple[int, ...]           # owning sequence index per mask
    pool_weights: np.ndarray    # [n, 1, length]
    mask_rows: Tensor | None = None       # [M, d] imputed rows after substitution

    @property
    def n(self) -> int:
        return len(self.seqs)


def encode_text_batch(seqs: list[TokenSeq], params: dict, cfg: EncoderConfig,
                      prefix: str = "text") -> BatchTextEncoding:
    """Encode several sequences in one padded forward pass. Pad positions are
    attention-masked and excluded from pooling, so each sequence's states match
    its standalone encoding."""
    n = len(seqs)
    if n == 0:
        raise EncoderError("empty sequence batch")
    lens = [len(s.ids) for s in seqs]
    if min(lens) == 0 or max(lens) > cfg.max_seq_len:
        raise EncoderError(f"sequence lengths {min(lens)}..{max(lens)} outside "
                           f"[1, {cfg.max_seq_len}]")
    length = max(lens)
    ids = np.full((n, length), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, :lens[i]] = s.ids
    x = T.embedding_lookup(params[f"{prefix}.tok_emb"], ids.reshape(-1))
    x = T.reshape(x, (n, length, x.shape[1]))
    x = T.add(x, T.take_rows(params[f"{prefix}.pos_emb"], range(length)))
    key_mask = np.where(ids == PAD_ID, SENTINEL, 0.0)[:, None, :]
    if not (ids == PAD_ID).any():
        key_mask = None
    x = run_blocks(x, params, prefix, cfg, key_mask)
    nonpad = (ids != PAD_ID).astype(np.float64)
    weights = (nonpad / nonpad.sum(axis=1, keepdims=True))[:, None, :]
    pooled = T.reshape(T.matmul(Tensor(weights), x), (n, x.shape[2]))
    flat = T.reshape(x, (n * length, x.shape[2]))
    positions, owner = [], []
    for i, s in enumerate(seqs):
        for p in s.mask_positions:
            positions.append(i * length + p)
            owner.append(i)
    return BatchTextEncoding(list(seqs), length, flat, pooled,
                             tuple(positions), tuple(owner), weights)


def repool_batch(benc: BatchTextEncoding, new_flat: Tensor,
                 mask_rows: Tensor) -> BatchTextEncoding:
    n, length = benc.n, benc.length
    d = new_flat.shape[1]
    pooled = T.reshape(T.matmul(Tensor(benc.pool_weights),
                                T.reshape(new_flat, (n, length, d))), (n, d))
    return BatchTextEncoding(benc.seqs, length, new_flat, pooled,
                             benc.mask_flat_positions, benc.mask_owner,
                             benc.pool_weights, mask_rows)


def image_patches(pixels: np.ndarray, patch: int) -> np.ndarray:
    """Non-overlapping patch flattening, row-major over the patch grid,
    rescaled from {0,1} strokes to {-1,+1}."""
    h, w = pixels.shape
    if h % patch or w % patch:
        raise EncoderError(f"image {h}x{w} not divisible by patch size {patch}")
    grid = pixels.reshape(h // patch, patch, w // patch, patch)
    flat = grid.transpose(0, 2, 1, 3).reshape(-1, patch * patch)
    return flat * 2.0 - 1.0


def encode_image(pixels: np.ndarray, params: dict, cfg: EncoderConfig,
                 prefix: str = "vis") -> VisualEncoding:
    patches = image_patches(np.asarray(pixels, dtype=np.float64), cfg.patch_size)
    n_patches = patches.shape[0]
    pos = params[f"{prefix}.pos_emb"]
    if n_patches != pos.shape[0]:
        raise EncoderError(f"{n_patches} patches but positional table has {pos.shape[0]}")
    x = T.add(_linear(Tensor(patches), params, f"{prefix}.proj"),
              T.take_rows(pos, range(n_patches)))
    x = run_blocks(x, params, prefix, cfg)
    return VisualEncoding(x, T.tmean(x, axis=0))


def encode_image_batch(images: np.ndarray, params: dict, cfg: EncoderConfig,
                       prefix: str = "vis") -> Tensor:
    """Pooled visual encodings for a stack of images: [n, h, w] -> [n, d]."""
    n = images.shape[0]
    patches = np.stack([image_patches(img.astype(np.float64), cfg.patch_size)
                        for img in images])
    n_patches = patches.shape[1]
    pos = params[f"{prefix}.pos_emb"]
    if n_patches != pos.shape[0]:
        raise EncoderError(f"{n_patches} patches but positional table has {pos.shape[0]}")
    flat = T.reshape(Tensor(patches), (n * n_patches, patches.shape[2]))
    x = _linear(flat, params, f"{prefix}.proj")
    x = T.reshape(x, (n, n_patches, x.shape[1]))
    x = T.add(x, T.take_rows(pos, range(n_patches)))
    x = run_blocks(x, params, prefix, cfg)
    return T.tmean(x, axis=1)


def mean_of(vectors: list[Tensor]) -> Tensor:
    stacked = T.concat([T.reshape(v, (1, v.shape[0])) for v in vectors], axis=0)
    return T.tmean(stacked, axis=0)


def encode_granularities(current_pooled: Tensor, weekly_pooled: list[Tensor],
                         yearly_pooled: list[Tensor], mtg_off: bool = False) -> Tensor:
    """[U_current | mean(U_weekly) | mean(U_yearly)], or U_current alone when
    multi-granularity integration is ablated."""
    if mtg_off:
        return current_pooled
    return T.concat([current_pooled, mean_of(weekly_pooled), mean_of(yearly_pooled)],
                    axis=0)
