"""Sparse Mixture-of-Experts imputation: noisy top-k gating over expert
feed-forward networks; imputed embeddings replace [MASK] token states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import SemanticEncoding, init_linear, pooled_mean
from .tensor import Tensor


class SmoeError(ValueError):
    pass


@dataclass(frozen=True)
class SmoeConfig:
    n_experts: int = 4
    top_k: int = 2
    expert_hidden: int = 256
    noise_enabled: bool = True

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise SmoeError(f"top_k={self.top_k} outside [1, {self.n_experts}]")


@dataclass(frozen=True)
class GateDecision:
    indices: tuple[int, ...]   # selected expert ids, ascending
    weights: tuple[float, ...]  # matching normalized gate weights


@dataclass
class ExpertBank:
    """Gate matrices plus n_experts identical feed-forward nets, living in the
    shared parameter dict under `prefix`."""
    params: dict[str, Tensor]
    prefix: str
    d_model: int
    cfg: SmoeConfig


def init_expert_bank(params: dict[str, Tensor], rng: np.random.Generator,
                     prefix: str, d_model: int, cfg: SmoeConfig) -> ExpertBank:
    e = cfg.n_experts
    params[f"{prefix}.w_g"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, e)), requires_grad=True)
    params[f"{prefix}.w_noise"] = Tensor(
        rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, e)), requires_grad=True)
    for i in range(e):
        init_linear(params, rng, f"{prefix}.e{i}.ff1", d_model, cfg.expert_hidden)
        init_linear(params, rng, f"{prefix}.e{i}.ff2", cfg.expert_hidden, d_model)
    return ExpertBank(params, prefix, d_model, cfg)


def init_linear_imputer(params: dict[str, Tensor], rng: np.random.Generator,
                        prefix: str, d_model: int) -> None:
    """Single shared affine imputer, the SMoE-ablation stand-in."""
    init_linear(params, rng, f"{prefix}.lin", d_model, d_model)


def _gate_scores(m_row: Tensor, bank: ExpertBank, cfg: SmoeConfig,
                 rng: np.random.Generator | None) -> Tensor:
    """Noisy gate over all experts: softmax(topk(m W_g + mu*softplus(m W_noise)))."""
    p = bank.params
    logits = T.matmul(m_row, p[f"{bank.prefix}.w_g"])  # [1, E]
    if cfg.noise_enabled:
        if rng is None:
            raise SmoeError("noise_enabled gating needs an rng")
        mu = rng.standard_normal(cfg.n_experts)
        spread = T.softplus(T.matmul(m_row, p[f"{bank.prefix}.w_noise"]))
        logits = T.add(logits, T.mul(spread, Tensor(mu[None, :])))
    return T.softmax(T.topk_mask(logits, cfg.top_k, axis=-1), axis=-1)


def _expert_forward(m_row: Tensor, bank: ExpertBank, e: int) -> Tensor:
    p, pre = bank.params, bank.prefix
    h = T.gelu(T.add(T.matmul(m_row, p[f"{pre}.e{e}.ff1.w"]), p[f"{pre}.e{e}.ff1.b"]))
    return T.add(T.matmul(h, p[f"{pre}.e{e}.ff2.w"]), p[f"{pre}.e{e}.ff2.b"])


def gate(m: Tensor, bank: ExpertBank, cfg: SmoeConfig,
         rng: np.random.Generator | None = None) -> GateDecision:
    """Routing decision for one embedding; exactly top_k positive weights."""
    with T.no_grad():
        scores = _gate_scores(T.reshape(m, (1, bank.d_model)), bank, cfg, rng)
    w = scores.data[0]
    idx = np.nonzero(w > 0.0)[0]
    return GateDecision(tuple(int(i) for i in idx), tuple(float(w[i]) for i in idx))


def impute(m: Tensor, bank: ExpertBank, cfg: SmoeConfig,
           rng: np.random.Generator | None = None) -> Tensor:
    """Gate-weighted sum of the selected experts only (non-selected experts are
    never evaluated, so they receive exactly zero gradient)."""
    m_row = T.reshape(m, (1, bank.d_model))
    scores = _gate_scores(m_row, bank, cfg, rng)  # [1, E]
    selected = np.nonzero(scores.data[0] > 0.0)[0]
    w_sel = T.take_rows(T.reshape(scores, (cfg.n_experts, 1)), selected)  # [k, 1]
    outs = T.concat([_expert_forward(m_row, bank, int(e)) for e in selected], axis=0)
    mixed = T.matmul(T.transpose(w_sel, (1, 0)), outs)  # [1, d]
    return T.reshape(mixed, (bank.d_model,))


def impute_linear(m: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    row = T.reshape(m, (1, m.shape[0]))
    out = T.add(T.matmul(row, params[f"{prefix}.lin.w"]), params[f"{prefix}.lin.b"])
    return T.reshape(out, (m.shape[0],))


def impute_rows(rows: Tensor, bank: ExpertBank, cfg: SmoeConfig,
                rng: np.random.Generator | None = None) -> Tensor:
    """Batched imputation of [M, d] embeddings; each expert only evaluates the
    rows routed to it (one noise draw of shape [M, E] per call)."""
    m_count = rows.shape[0]
    p, pre = bank.params, bank.prefix
    logits = T.matmul(rows, p[f"{pre}.w_g"])  # [M, E]
    if cfg.noise_enabled:
        if rng is None:
            raise SmoeError("noise_enabled gating needs an rng")
        mu = rng.standard_normal((m_count, cfg.n_experts))
        spread = T.softplus(T.matmul(rows, p[f"{pre}.w_noise"]))
        logits = T.add(logits, T.mul(spread, Tensor(mu)))
    gated = T.softmax(T.topk_mask(logits, cfg.top_k, axis=-1), axis=-1)
    gated_t = T.transpose(gated, (1, 0))  # [E, M]
    acc = Tensor(np.zeros((m_count, bank.d_model)))
    for e in range(cfg.n_experts):
        idx = np.nonzero(gated.data[:, e] > 0.0)[0]
        if idx.size == 0:
            continue
        out = _expert_forward(T.take_rows(rows, idx), bank, e)
        w = T.take_rows(T.reshape(T.take_rows(gated_t, [e]), (m_count, 1)), idx)
        acc = T.index_add_rows(acc, idx, T.mul(out, w))
    return acc


def impute_linear_rows(rows: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(rows, params[f"{prefix}.lin.w"]), params[f"{prefix}.lin.b"])


def substitute_masks(enc: SemanticEncoding, bank: ExpertBank, cfg: SmoeConfig,
                     rng: np.random.Generator | None = None,
                     impute_fn=None) -> SemanticEncoding:
    """Replace token states at mask positions with imputed embeddings and
    recompute the pooled vector; no second encoder pass."""
    if not enc.mask_positions:
        return enc
    fn = impute_fn or (lambda row: impute(row, bank, cfg, rng))
    rows = []
    for h in range(len(enc.mask_positions)):
        m_row = T.reshape(T.take_rows(enc.mask_states, [h]), (enc.mask_states.shape[1],))
        rows.append(T.reshape(fn(m_row), (1, enc.mask_states.shape[1])))
    imputed = T.concat(rows, axis=0)
    states = T.scatter_rows(enc.token_states, enc.mask_positions, imputed)
    return SemanticEncoding(states, imputed, pooled_mean(states, enc.pool_weights),
                            enc.mask_positions, enc.pool_weights)


def substitute_masks_batch(benc, bank: ExpertBank | None, cfg: SmoeConfig | None,
                           rng: np.random.Generator | None = None,
                           impute_fn=None):
    """Batched mask substitution over a BatchTextEncoding; returns a new batch
    encoding whose mask_rows holds the imputed [M, d] embeddings."""
    from .encoders import repool_batch
    if not benc.mask_flat_positions:
        return benc
    rows = T.take_rows(benc.states_flat, benc.mask_flat_positions)
    imputed = impute_fn(rows) if impute_fn else impute_rows(rows, bank, cfg, rng)
    new_flat = T.scatter_rows(benc.states_flat, benc.mask_flat_positions, imputed)
    return repool_batch(benc, new_flat, imputed)


def imputation_loss(imputed: Tensor | None, teacher: Tensor | None) -> Tensor:
    """sqrt of the mean squared Euclidean row distance; teacher rows are
    constants (stop-gradient), so gradient flows only through the imputations."""
    if imputed is None or teacher is None or imputed.shape[0] == 0:
        return Tensor(0.0)
    if imputed.shape != teacher.shape:
        raise SmoeError(f"imputed {imputed.shape} vs teacher {teacher.shape}")
    m = imputed.shape[0]
    diff = T.sub(imputed, teacher.detach())
    return T.sqrt(T.mul(T.tsum(T.mul(diff, diff)), 1.0 / m))
