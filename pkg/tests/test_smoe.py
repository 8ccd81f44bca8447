import math

import numpy as np
import pytest

from ecocast import smoe as S
from ecocast import tensor as T
from ecocast import encoders as E
from ecocast.textual import MASK_ID, TokenSeq
from gradcheck import check_grad

D = 8


def make_bank(seed=0, n_experts=4, top_k=2, hidden=16, noise=False):
    cfg = S.SmoeConfig(n_experts=n_experts, top_k=top_k, expert_hidden=hidden,
                       noise_enabled=noise)
    params = {}
    bank = S.init_expert_bank(params, np.random.default_rng(seed), "smoe", D, cfg)
    return bank, cfg, params


def force_gate_logits(bank, logits):
    """Make m @ W_g produce exactly `logits` for m = e_0."""
    e = len(logits)
    wg = np.zeros((D, e))
    wg[0, :] = logits
    bank.params["smoe.w_g"] = T.Tensor(wg, requires_grad=True)
    m = np.zeros(D)
    m[0] = 1.0
    return T.Tensor(m)


def test_config_validates_top_k():
    with pytest.raises(S.SmoeError):
        S.SmoeConfig(n_experts=2, top_k=3)


def test_gate_hand_example():
    bank, cfg, _ = make_bank(noise=False)
    m = force_gate_logits(bank, [0.5, 2.0, 1.0, -1.0])
    dec = S.gate(m, bank, cfg)
    assert dec.indices == (1, 2)
    e1 = math.exp(2.0) / (math.exp(2.0) + math.exp(1.0))
    assert abs(dec.weights[0] - e1) < 1e-6
    assert abs(dec.weights[0] - 0.731059) < 1e-6
    assert abs(dec.weights[1] - 0.268941) < 1e-6


def test_gate_single_expert():
    bank, cfg, _ = make_bank(n_experts=1, top_k=1)
    dec = S.gate(T.Tensor(np.ones(D)), bank, cfg)
    assert dec.indices == (0,) and dec.weights == (1.0,)


def test_gate_k_equals_e_is_dense_softmax():
    bank, cfg, _ = make_bank(n_experts=4, top_k=4)
    logits = [0.3, -1.2, 0.9, 0.1]
    m = force_gate_logits(bank, logits)
    dec = S.gate(m, bank, cfg)
    direct = T.softmax(T.Tensor(logits)).data
    assert dec.indices == (0, 1, 2, 3)
    assert np.max(np.abs(np.array(dec.weights) - direct)) <= 1e-12


def test_gate_exactly_topk_positive_and_normalized():
    bank, cfg, _ = make_bank(seed=3, noise=True)
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = T.Tensor(rng.normal(size=D))
        dec = S.gate(m, bank, cfg, rng)
        assert len(dec.indices) == cfg.top_k
        assert len(set(dec.indices)) == cfg.top_k
        assert all(w > 0 for w in dec.weights)
        assert abs(sum(dec.weights) - 1.0) <= 1e-10


def test_gate_noise_off_is_deterministic():
    bank, cfg, _ = make_bank(seed=4, noise=False)
    m = T.Tensor(np.linspace(-1, 1, D))
    a = S.gate(m, bank, cfg)
    b = S.gate(m, bank, cfg)
    assert a == b


def test_gate_argmax_scale_invariance_noise_off():
    bank, cfg, _ = make_bank(seed=5, noise=False, top_k=1)
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = rng.normal(size=D)
        a = S.gate(T.Tensor(m), bank, cfg)
        b = S.gate(T.Tensor(3.7 * m), bank, cfg)
        assert a.indices == b.indices  # linear logits are positively homogeneous


def test_impute_weighted_combination_matches_decision():
    bank, cfg, _ = make_bank(seed=6, noise=False)
    m = T.Tensor(np.linspace(-0.5, 0.5, D))
    dec = S.gate(m, bank, cfg)
    out = S.impute(m, bank, cfg)
    row = T.reshape(m, (1, D))
    expect = np.zeros(D)
    for i, w in zip(dec.indices, dec.weights):
        expect += w * S._expert_forward(row, bank, i).data[0]
    assert np.allclose(out.data, expect, atol=1e-12)


def test_impute_single_expert_is_plain_forward():
    bank, cfg, _ = make_bank(seed=7, n_experts=1, top_k=1)
    m = T.Tensor(np.linspace(-1, 1, D))
    out = S.impute(m, bank, cfg)
    expect = S._expert_forward(T.reshape(m, (1, D)), bank, 0).data[0]
    assert np.allclose(out.data, expect, atol=1e-15)


def test_unselected_expert_gets_zero_gradient():
    bank, cfg, params = make_bank(seed=8, noise=False)
    m = T.Tensor(np.linspace(-0.5, 0.5, D))
    dec = S.gate(m, bank, cfg)
    unselected = [e for e in range(cfg.n_experts) if e not in dec.indices]
    T.backward(T.tsum(S.impute(m, bank, cfg)))
    for e in unselected:
        for suffix in ("ff1.w", "ff1.b", "ff2.w", "ff2.b"):
            assert params[f"smoe.e{e}.{suffix}"].grad is None
    for e in dec.indices:
        assert params[f"smoe.e{e}.ff1.w"].grad is not None


def test_gate_weight_gradient_matches_finite_differences():
    bank, cfg, params = make_bank(seed=9, noise=False)
    m0 = np.linspace(-0.8, 0.8, D)
    key = "smoe.w_g"
    x0 = params[key].data.copy()

    def build(arr):
        leaf = T.Tensor(arr, requires_grad=True)
        params[key] = leaf
        out = S.impute(T.Tensor(m0), bank, cfg)
        w = T.Tensor(np.linspace(0.2, 1.0, D))
        return T.tsum(T.mul(out, w)), leaf

    check_grad(build, x0)
    params[key] = T.Tensor(x0, requires_grad=True)


def test_substitute_masks_locality_and_pool_update():
    enc_cfg = E.EncoderConfig(d_model=D, n_layers=1, n_heads=2, ffn_hidden=16,
                              max_seq_len=16)
    enc_params = {}
    E.init_text_encoder(enc_params, np.random.default_rng(10), "text", enc_cfg, 12)
    bank, cfg, _ = make_bank(seed=11, noise=False)

    seq = TokenSeq((4, MASK_ID, 6, MASK_ID, 8), (1, 3))
    enc = E.encode_text(seq, enc_params, enc_cfg)
    out = S.substitute_masks(enc, bank, cfg)
    changed = np.any(out.token_states.data != enc.token_states.data, axis=1)
    assert changed.tolist() == [False, True, False, True, False]
    expect_pool = out.token_states.data.mean(axis=0)
    assert np.allclose(out.pooled.data, expect_pool, atol=1e-12)

    no_mask = E.encode_text(TokenSeq((4, 5, 6), ()), enc_params, enc_cfg)
    assert S.substitute_masks(no_mask, bank, cfg) is no_mask


def test_substitute_masks_linear_imputer_variant():
    enc_cfg = E.EncoderConfig(d_model=D, n_layers=1, n_heads=2, ffn_hidden=16,
                              max_seq_len=16)
    enc_params = {}
    E.init_text_encoder(enc_params, np.random.default_rng(12), "text", enc_cfg, 12)
    S.init_linear_imputer(enc_params, np.random.default_rng(13), "imp", D)
    enc = E.encode_text(TokenSeq((4, MASK_ID, 6), (1,)), enc_params, enc_cfg)
    out = S.substitute_masks(enc, None, None,
                             impute_fn=lambda row: S.impute_linear(row, enc_params, "imp"))
    manual = S.impute_linear(
        T.Tensor(enc.token_states.data[1]), enc_params, "imp").data
    assert np.allclose(out.token_states.data[1], manual, atol=1e-12)


def test_imputation_loss_hand_cases():
    z = T.Tensor(np.zeros((1, 2)))
    t = T.Tensor(np.array([[3.0, 4.0]]))
    assert abs(S.imputation_loss(z, t).item() - 5.0) <= 1e-9
    assert S.imputation_loss(t, t).item() == 0.0
    t2 = T.Tensor(np.array([[6.0, 8.0]]))
    assert abs(S.imputation_loss(z, t2).item() - 10.0) <= 1e-9  # homogeneity
    assert S.imputation_loss(None, None).item() == 0.0


def test_imputation_loss_gradient_only_through_imputed():
    imp = T.Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    teach = T.Tensor(np.array([[3.0, 4.0]]), requires_grad=True)
    T.backward(S.imputation_loss(imp, teach))
    assert imp.grad is not None
    assert teach.grad is None  # stop-gradient target
