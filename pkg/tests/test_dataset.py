import math

import numpy as np
import pytest

from ecocast import dataset as D


def make_tiny_csv(tmp_path, rows, header=None):
    schema = D.FeatureSchema()
    lines = [",".join(header or (["region_id", "day_index", *schema.names, "target"]))]
    lines += rows
    p = tmp_path / "tiny.csv"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_default_schema_is_the_eight_drivers():
    schema = D.FeatureSchema()
    assert schema.k == 8
    assert schema.names == (
        "day of the year", "rainfall", "daily average air temperature",
        "solar radiation", "average cloud cover fraction", "groundwater temperature",
        "subsurface temperature", "potential evapotranspiration")


def test_load_csv_missing_cells_and_targets(tmp_path):
    row = "seg1,0,152,0.00152,,125.3,0.4352,9.1,8.4,0.02,"
    p = make_tiny_csv(tmp_path, [row])
    ds = D.load_csv(p)
    rec = ds.get("seg1", 0)
    assert rec.feature_present[1] and rec.features[1] == 0.00152
    assert not rec.feature_present[2]  # air temperature absent
    assert rec.target is None  # empty target cell, record retained


def test_load_csv_duplicate_key_error(tmp_path):
    rows = ["seg1,5,1,1,1,1,1,1,1,1,0.5", "seg1,5,2,2,2,2,2,2,2,2,0.5"]
    p = make_tiny_csv(tmp_path, rows)
    with pytest.raises(D.DatasetError, match="duplicate"):
        D.load_csv(p)


def test_load_csv_unknown_column_error(tmp_path):
    schema = D.FeatureSchema()
    header = ["region_id", "day_index", *schema.names[:-1], "bogus", "target"]
    p = make_tiny_csv(tmp_path, ["seg1,0,1,1,1,1,1,1,1,1,0.5"], header=header)
    with pytest.raises(D.DatasetError, match="bogus"):
        D.load_csv(p)


def test_load_csv_parse_error_names_line(tmp_path):
    p = make_tiny_csv(tmp_path, ["seg1,0,1,1,1,1,1,1,1,1,0.5",
                                 "seg1,1,1,oops,1,1,1,1,1,1,0.5"])
    with pytest.raises(D.DatasetError, match=":3"):
        D.load_csv(p)


def test_csv_round_trip(tmp_path):
    ds = D.generate_synthetic(seed=3, n_regions=2, total_days=400, missing_rate=0.3)
    p = tmp_path / "ds.csv"
    D.write_csv(ds, p)
    back = D.load_csv(p)
    assert back.content_hash() == ds.content_hash()


def test_generate_synthetic_is_deterministic(tmp_path):
    a = D.generate_synthetic(seed=9, n_regions=2, total_days=410, missing_rate=0.4)
    b = D.generate_synthetic(seed=9, n_regions=2, total_days=410, missing_rate=0.4)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    D.write_csv(a, pa)
    D.write_csv(b, pb)
    assert pa.read_bytes() == pb.read_bytes()


def test_generate_synthetic_missing_rate_zero_and_concentration():
    ds0 = D.generate_synthetic(seed=1, n_regions=1, total_days=400, missing_rate=0.0)
    assert all(all(r.feature_present) for r in ds0.records.values())

    ds = D.generate_synthetic(seed=1, n_regions=2, total_days=800, missing_rate=0.5)
    cells = hidden = 0
    for rec in ds.records.values():
        for k in range(1, ds.schema.k):
            cells += 1
            hidden += not rec.feature_present[k]
    assert cells >= 10_000
    assert abs(hidden / cells - 0.5) <= 0.02  # binomial concentration
    # day-of-year column is never masked
    assert all(r.feature_present[0] for r in ds.records.values())


def test_generate_synthetic_rejects_bad_params():
    with pytest.raises(D.DatasetError):
        D.generate_synthetic(seed=1, n_regions=1, total_days=100, missing_rate=0.1)
    with pytest.raises(D.DatasetError):
        D.generate_synthetic(seed=1, n_regions=1, total_days=500, missing_rate=1.0)


def test_shift_spec_moves_feature_means():
    # halves of 1460 days hold two full seasonal periods each, so seasonal
    # means cancel; remaining half-mean differences are noise-sized
    plain = D.generate_synthetic(seed=11, n_regions=2, total_days=1460, missing_rate=0.0)
    shifted = D.generate_synthetic(
        seed=11, n_regions=2, total_days=1460, missing_rate=0.0,
        shift_spec=D.ShiftSpec(("rainfall",), 730, 2.0))
    half = 730
    for ds, expect_shift in ((plain, False), (shifted, True)):
        vals = np.array([[r.day_index, r.features[1]] for r in ds.records.values()])
        first = vals[vals[:, 0] < half, 1]
        second = vals[vals[:, 0] >= half, 1]
        diff = abs(second.mean() - first.mean())
        if expect_shift:
            assert diff > 1.5
        else:
            sigma = vals[:, 1].std()
            assert diff < 3.0 * sigma / math.sqrt(first.size)


def test_split_temporal_days_and_stats_leakage_guard():
    ds = D.generate_synthetic(seed=2, n_regions=2, total_days=4900, missing_rate=0.1)
    train, test = D.split_temporal(ds, 0.5)
    train_days = {r.day_index for r in train.records.values()}
    test_days = {r.day_index for r in test.records.values()}
    assert max(train_days) == 2449 and min(test_days) == 2450 and max(test_days) == 4899
    assert test.norm_stats == train.norm_stats
    # recompute train-only stats independently to show no test leakage
    recomputed = D.compute_norm_stats(train)
    assert recomputed == test.norm_stats


def test_split_temporal_tiny():
    ds = D.generate_synthetic(seed=2, n_regions=1, total_days=400, missing_rate=0.0)
    train, test = D.split_temporal(ds, 0.9)
    assert max(r.day_index for r in train.records.values()) == 359
    assert min(r.day_index for r in test.records.values()) == 360


def test_split_ood_regions_tie_break_and_disjoint():
    schema = D.FeatureSchema()
    recs = {}
    counts = {"a": 10, "b": 7, "c": 7, "d": 1}
    for region, n in counts.items():
        for d in range(12):
            target = 1.0 if d < n else None
            recs[(region, d)] = D.Record(region, d, (float(d),) * 8, (True,) * 8, target)
    ds = D.Dataset(schema, recs, sorted(counts), 12)
    train, test = D.split_ood_regions(ds, 3)
    assert sorted(train.regions) == ["a", "b", "c"]
    assert test.regions == ["d"]
    assert not (set(train.regions) & set(test.regions))
    with pytest.raises(D.DatasetError):
        D.split_ood_regions(ds, 4)


def test_split_ood_single_test_region():
    ds = D.generate_synthetic(seed=5, n_regions=4, total_days=400, missing_rate=0.0)
    train, test = D.split_ood_regions(ds, 3)
    assert len(test.regions) == 1
    assert test.norm_stats == train.norm_stats


def test_znormalize_hand_case_and_idempotence():
    stats = D.compute_stats([1.0, 2.0, 3.0])
    out = D.znormalize([1.0, 2.0, 3.0], stats)
    assert np.allclose(out, [-1.224745, 0.0, 1.224745], atol=1e-6)

    const = D.compute_stats([5.0, 5.0, 5.0])
    assert const.std == 1.0
    assert D.znormalize([5.0, 5.0], const) == [0.0, 0.0]

    norm_stats = D.compute_stats(out)
    again = D.znormalize(out, norm_stats)
    assert np.allclose(again, out, atol=1e-12)


def test_assemble_window_shapes_and_padding():
    ds = D.generate_synthetic(seed=4, n_regions=1, total_days=500, missing_rate=0.0)
    b = D.assemble_window(ds, "r0", 400, beta=30)
    assert [r.day_index for r in b.weekly] == list(range(399, 392, -1))
    assert [r.day_index for r in b.yearly] == [400 - 30 * i for i in range(1, 13)]
    assert len(b.image_window) == 30

    b3 = D.assemble_window(ds, "r0", 3, beta=30)
    pads = [r for r in b3.weekly if not any(r.feature_present)]
    assert len(pads) == 4  # days -1 .. -4
    assert all(r.target is None for r in pads)

    with pytest.raises(D.DatasetError, match="anchor"):
        D.assemble_window(ds, "r0", 500, beta=30)


def test_assemble_window_is_pure():
    ds = D.generate_synthetic(seed=4, n_regions=2, total_days=420, missing_rate=0.2)
    a = D.assemble_window(ds, "r1", 401, beta=12)
    b = D.assemble_window(ds, "r1", 401, beta=12)
    assert a == b


def test_mask_features_copy_leaves_source_untouched():
    ds = D.generate_synthetic(seed=6, n_regions=1, total_days=400, missing_rate=0.0)
    before = ds.content_hash()
    masked = D.mask_features(ds, ["rainfall", "subsurface temperature"])
    assert ds.content_hash() == before
    assert all(not r.feature_present[1] and not r.feature_present[6]
               for r in masked.records.values())
    assert masked.norm_stats == ds.norm_stats
