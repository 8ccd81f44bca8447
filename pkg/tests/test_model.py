import numpy as np
import pytest

from ecocast import tensor as T
from ecocast.dataset import generate_synthetic, split_temporal
from ecocast.encoders import EncoderConfig
from ecocast.fusion import FusionConfig
from ecocast.model import (Model, ModelConfig, anchor_keys, load_samples,
                           prepare_sample, prepare_samples, save_samples)
from ecocast.raster import RasterConfig
from ecocast.smoe import SmoeConfig
from ecocast.tensor import Tensor
from ecocast.textual import DATASET_DESCRIPTIONS, TASK_DESCRIPTIONS, build_vocabulary

MICRO = ModelConfig(
    text=EncoderConfig(d_model=8, n_layers=1, n_heads=2, ffn_hidden=16, max_seq_len=160),
    vision=EncoderConfig(d_model=8, n_layers=1, n_heads=2, ffn_hidden=16,
                         max_seq_len=160, patch_size=8),
    smoe=SmoeConfig(n_experts=2, top_k=1, expert_hidden=8),
    fusion=FusionConfig(decoder_layers=1, decoder_d=8, decoder_heads=2, max_positions=150),
    raster=RasterConfig(cell_w=8, cell_h=8),
    beta=6,
    dataset_desc=DATASET_DESCRIPTIONS["synthetic"],
    task_desc=TASK_DESCRIPTIONS["synthetic"])


@pytest.fixture(scope="module")
def world():
    ds = generate_synthetic(seed=2, n_regions=2, total_days=410, missing_rate=0.3)
    vocab = build_vocabulary(ds.schema, ds.regions, MICRO.dataset_desc, MICRO.task_desc)
    return ds, vocab


def variant_cfg(**kw):
    fz = FusionConfig(decoder_layers=1, decoder_d=8, decoder_heads=2,
                      max_positions=150, **kw)
    return ModelConfig(text=MICRO.text, vision=MICRO.vision, smoe=MICRO.smoe,
                       fusion=fz, raster=MICRO.raster, beta=MICRO.beta,
                       dataset_desc=MICRO.dataset_desc, task_desc=MICRO.task_desc)


def test_prepare_sample_fields(world):
    ds, vocab = world
    s = prepare_sample(ds, "r0", 400, vocab, MICRO)
    assert s.region == "r0" and s.day == 400
    assert s.image.dtype == np.uint8 and s.image.shape == (24, 24)
    assert set(np.unique(s.image)) <= {0, 1}
    assert len(s.weekly_layouts) == 7 and len(s.yearly_layouts) == 12
    stats = ds.norm_stats.target
    assert s.target_norm == pytest.approx((s.target_raw - stats.mean) / stats.std)
    assert s.instruction.h == 0


def test_prepare_samples_share_layout_objects(world):
    ds, vocab = world
    a, b = prepare_samples(ds, vocab, MICRO, keys=[("r0", 400), ("r0", 401)])
    # day 400 record is a weekly member of anchor 401: same layout object
    assert b.weekly_layouts[0] is a.current_layout


def test_sample_cache_round_trip(world, tmp_path):
    ds, vocab = world
    samples = prepare_samples(ds, vocab, MICRO, keys=anchor_keys(ds)[:6])
    path = tmp_path / "cache.npz"
    save_samples(path, samples)
    back = load_samples(path)
    assert len(back) == len(samples)
    for s, t in zip(samples, back):
        assert (s.region, s.day) == (t.region, t.day)
        assert s.target_raw == t.target_raw and s.target_norm == t.target_norm
        assert s.current_layout == t.current_layout
        assert s.weekly_layouts == t.weekly_layouts
        assert s.yearly_layouts == t.yearly_layouts
        assert np.array_equal(s.image, t.image)
        assert s.instruction == t.instruction


def test_prepare_samples_disk_cache_used(world, tmp_path):
    ds, vocab = world
    cache = tmp_path / "c"
    first = prepare_samples(ds, vocab, MICRO, cache_dir=str(cache))
    files = list(cache.glob("samples-*.npz"))
    assert len(files) == 1
    second = prepare_samples(ds, vocab, MICRO, cache_dir=str(cache))
    assert len(second) == len(first)
    assert second[0].current_layout == first[0].current_layout


def test_forward_shapes_and_eval_determinism(world):
    ds, vocab = world
    model = Model(MICRO, vocab, ds.schema, seed=4)
    s = prepare_sample(ds, "r1", 400, vocab, MICRO)
    with T.no_grad():
        p1, pairs = model.forward_sample(s, train=False)
        p2, _ = model.forward_sample(s, train=False)
    assert p1.shape == (1,) and pairs == []
    assert p1.item() == p2.item()


def test_predict_raw_denormalizes(world):
    ds, vocab = world
    model = Model(MICRO, vocab, ds.schema, seed=4)
    model.params["fusion.head.w"] = Tensor(np.zeros((8, 1)))
    model.params["fusion.head.b"] = Tensor(np.array([0.5]))
    s = prepare_sample(ds, "r1", 400, vocab, MICRO)
    stats = ds.norm_stats
    assert model.predict_raw(s, stats) == pytest.approx(
        0.5 * stats.target.std + stats.target.mean)


def test_variant_parameter_wiring(world):
    ds, vocab = world
    base = Model(MICRO, vocab, ds.schema, 1)
    assert any(p.startswith("text.") for p in base.params)
    assert any(p.startswith("smoe.e0") for p in base.params)

    text_off = Model(variant_cfg(text_off=True), vocab, ds.schema, 1)
    assert not any(p.startswith(("text.", "smoe.")) for p in text_off.params)

    image_off = Model(variant_cfg(image_off=True), vocab, ds.schema, 1)
    assert not any(p.startswith("vis.") for p in image_off.params)

    llm_off = Model(variant_cfg(llm_off=True), vocab, ds.schema, 1)
    assert llm_off.frozen == {} and "fusion.lin.w" in llm_off.params

    imp_off = Model(variant_cfg(imp_off=True), vocab, ds.schema, 1)
    assert not any(p.startswith("smoe.") for p in imp_off.params)

    lin = Model(variant_cfg(smoe_linear=True), vocab, ds.schema, 1)
    assert "smoe.lin.w" in lin.params and not any(p.startswith("smoe.e") for p in lin.params)

    mtg = Model(variant_cfg(mtg_off=True), vocab, ds.schema, 1)
    assert mtg.params["fusion.proj_u.w"].shape[0] == MICRO.text.d_model
    assert base.params["fusion.proj_u.w"].shape[0] == 3 * MICRO.text.d_model


def test_variant_forward_paths(world):
    ds, vocab = world
    s = None
    for kw in ({"text_off": True}, {"image_off": True}, {"llm_off": True},
               {"imp_off": True}, {"smoe_linear": True}, {"mtg_off": True}):
        cfg = variant_cfg(**kw)
        model = Model(cfg, vocab, ds.schema, 1)
        if s is None:
            s = prepare_sample(ds, "r0", 400, vocab, cfg)
        with T.no_grad():
            pred, _ = model.forward_sample(s, train=False)
        assert np.isfinite(pred.item()), kw


def test_anchor_requires_target(world):
    ds, vocab = world
    with pytest.raises(Exception):
        prepare_sample(ds, "r0", 10_000, vocab, MICRO)
