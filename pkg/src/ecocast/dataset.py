"""Spatial-temporal records: CSV ingestion, synthetic generation, splits,
normalization statistics, and multi-granularity history windows."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_FEATURE_NAMES = (
    "day of the year",
    "rainfall",
    "daily average air temperature",
    "solar radiation",
    "average cloud cover fraction",
    "groundwater temperature",
    "subsurface temperature",
    "potential evapotranspiration",
)

YEARLY_STRIDE = 30  # days between the 12 yearly-window entries
YEARLY_COUNT = 12
WEEKLY_COUNT = 7


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...] = DEFAULT_FEATURE_NAMES
    units: tuple[str, ...] | None = None
    target_name: str = "target"

    def __post_init__(self):
        if len(self.names) < 1:
            raise DatasetError("schema needs at least one feature")
        if len(set(self.names)) != len(self.names):
            raise DatasetError("feature names must be unique")

    @property
    def k(self) -> int:
        return len(self.names)

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DatasetError(f"unknown feature: {name!r}") from None


@dataclass(frozen=True)
class Record:
    region_id: str
    day_index: int
    features: tuple[float, ...]
    feature_present: tuple[bool, ...]
    target: float | None = None

    def feature(self, k: int) -> float:
        if not self.feature_present[k]:
            raise DatasetError(f"feature {k} absent at ({self.region_id}, {self.day_index})")
        return self.features[k]


def pad_record(schema: FeatureSchema, region_id: str, day: int) -> Record:
    """Fully-masked filler for history gaps; day clamped to keep day_index valid."""
    k = schema.k
    return Record(region_id, max(day, 0), (0.0,) * k, (False,) * k, None)


@dataclass(frozen=True)
class VarStats:
    mean: float
    std: float


def compute_stats(values) -> VarStats:
    """Mean and population std; std fixed to 1 when < 2 distinct values."""
    vals = np.asarray(list(values), dtype=np.float64)
    if vals.size == 0:
        return VarStats(0.0, 1.0)
    std = float(vals.std())
    if std == 0.0:
        std = 1.0
    return VarStats(float(vals.mean()), std)


@dataclass(frozen=True)
class NormStats:
    features: tuple[VarStats, ...]
    target: VarStats


def znormalize(series, stats: VarStats):
    """(x - mean) / std per value, with stats taken from the training split."""
    arr = np.asarray(list(series), dtype=np.float64)
    return ((arr - stats.mean) / stats.std).tolist()


def denormalize(value: float, stats: VarStats) -> float:
    return value * stats.std + stats.mean


@dataclass(frozen=True)
class WindowBundle:
    current: Record
    weekly: tuple[Record, ...]       # days t-1 .. t-7
    yearly: tuple[Record, ...]       # days t-30, t-60, ..., t-360
    image_window: tuple[Record, ...]  # days t-1 .. t-beta


@dataclass
class Dataset:
    schema: FeatureSchema
    records: dict[tuple[str, int], Record]
    regions: list[str]
    total_days: int
    norm_stats: NormStats | None = None

    def __post_init__(self):
        if self.norm_stats is None:
            self.norm_stats = compute_norm_stats(self)

    def get(self, region: str, day: int) -> Record | None:
        return self.records.get((region, day))

    def iter_records(self):
        for key in sorted(self.records):
            yield self.records[key]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.schema.names).encode())
        for rec in self.iter_records():
            observable = tuple(v if p else 0.0
                               for v, p in zip(rec.features, rec.feature_present))
            h.update(repr((rec.region_id, rec.day_index, observable,
                           rec.feature_present, rec.target)).encode())
        return h.hexdigest()


def compute_norm_stats(ds: Dataset) -> NormStats:
    per_feature = []
    for k in range(ds.schema.k):
        per_feature.append(compute_stats(
            rec.features[k] for rec in ds.records.values() if rec.feature_present[k]))
    target = compute_stats(
        rec.target for rec in ds.records.values() if rec.target is not None)
    return NormStats(tuple(per_feature), target)


# ---------------------------------------------------------------------------
# CSV ingestion


def _expected_header(schema: FeatureSchema) -> list[str]:
    return ["region_id", "day_index", *schema.names, "target"]


def load_csv(path, schema: FeatureSchema | None = None) -> Dataset:
    schema = schema or FeatureSchema()
    expected = _expected_header(schema)
    records: dict[tuple[str, int], Record] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header != expected:
            bad = [c for c in header if c not in expected] or header
            raise DatasetError(f"{path}: unknown or misordered columns {bad!r}, "
                               f"expected {expected!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DatasetError(f"{path}:{lineno}: expected {len(expected)} cells, got {len(row)}")
            region = row[0]
            try:
                day = int(row[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad day_index {row[1]!r}") from None
            if day < 0:
                raise DatasetError(f"{path}:{lineno}: negative day_index {day}")
            feats, present = [], []
            for cell in row[2:2 + schema.k]:
                if cell == "":
                    feats.append(0.0)
                    present.append(False)
                else:
                    try:
                        feats.append(float(cell))
                    except ValueError:
                        raise DatasetError(f"{path}:{lineno}: bad feature value {cell!r}") from None
                    present.append(True)
            tcell = row[2 + schema.k]
            try:
                target = float(tcell) if tcell != "" else None
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad target value {tcell!r}") from None
            key = (region, day)
            if key in records:
                raise DatasetError(f"{path}:{lineno}: duplicate record for {key}")
            records[key] = Record(region, day, tuple(feats), tuple(present), target)
    if not records:
        raise DatasetError(f"{path}: no records")
    regions = sorted({r for r, _ in records})
    total_days = max(d for _, d in records) + 1
    return Dataset(schema, records, regions, total_days)


def write_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(ds.schema))
        for rec in ds.iter_records():
            cells = [rec.region_id, str(rec.day_index)]
            for v, p in zip(rec.features, rec.feature_present):
                cells.append(repr(v) if p else "")
            cells.append(repr(rec.target) if rec.target is not None else "")
            writer.writerow(cells)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class ShiftSpec:
    """Level shift applied to chosen features from start_day onward."""
    feature_names: tuple[str, ...]
    start_day: int
    delta: float


# synthetic target drivers: groundwater temperature (5) drives subsurface
# temperature (6); both carry the predictive signal
_DRIVER_A, _DRIVER_B = 5, 6
_AR_RHO = 0.7          # day-to-day persistence of the feature drift
_AR_SCALE = 0.25       # drift innovation scale relative to seasonal amplitude
_COUPLING = 0.8        # f6 = COUPLING * f5 + small noise
_TARGET_W = (0.9, 0.7)  # weights of the two driver features
_SEASON_W = 0.3        # amplitude of the 365-day sinusoid in the target


def _ar1(rng: np.random.Generator, n: int, rho: float, scale: float) -> np.ndarray:
    eps = scale * rng.standard_normal(n)
    out = np.empty(n)
    acc = eps[0] / np.sqrt(1.0 - rho * rho)  # start at the stationary scale
    for t in range(n):
        acc = rho * acc + eps[t]
        out[t] = acc
    return out


def generate_synthetic(seed: int, n_regions: int, total_days: int,
                       missing_rate: float, shift_spec: ShiftSpec | None = None) -> Dataset:
    """Region-parameterized seasonal features with independent masking.

    Feature 0 is the day of the year, never masked. Features k >= 1 follow
    base + amp * sin(2*pi*(d + phase)/365) plus an AR(1) drift (rho 0.7,
    innovations 0.25*amp), so recent history is informative. Subsurface
    temperature shadows groundwater temperature (f6 = 0.8*f5 + noise), giving
    the imputer a correlated source when one of them is hidden. The target is
    the documented smooth function 0.9*f5 + 0.7*f6 + 0.3*sin(2*pi*d/365 +
    0.5*rho) + N(0, 0.1), computed from the un-masked feature values.
    """
    if not 0.0 <= missing_rate < 1.0:
        raise DatasetError(f"missing_rate must be in [0, 1), got {missing_rate}")
    if total_days < 400:
        raise DatasetError(f"total_days must be >= 400 so yearly windows exist, got {total_days}")
    if n_regions < 1:
        raise DatasetError("n_regions must be >= 1")
    schema = FeatureSchema()
    k = schema.k
    param_rng = np.random.default_rng([int(seed), 101])
    noise_rng = np.random.default_rng([int(seed), 202])
    mask_rng = np.random.default_rng([int(seed), 303])
    target_rng = np.random.default_rng([int(seed), 404])

    shift_idx: set[int] = set()
    if shift_spec is not None:
        shift_idx = {schema.index_of(name) for name in shift_spec.feature_names}

    records: dict[tuple[str, int], Record] = {}
    days = np.arange(total_days)
    for rho in range(n_regions):
        region = f"r{rho}"
        amp = param_rng.uniform(0.5, 2.0, size=k)
        phase = param_rng.uniform(0.0, 365.0, size=k)
        base = param_rng.uniform(-1.0, 1.0, size=k)
        feats = np.empty((total_days, k))
        feats[:, 0] = (days % 365) + 1
        for j in range(1, k):
            season = base[j] + amp[j] * np.sin(2.0 * np.pi * (days + phase[j]) / 365.0)
            feats[:, j] = season + _ar1(noise_rng, total_days, _AR_RHO,
                                        _AR_SCALE * amp[j])
        feats[:, _DRIVER_B] = (_COUPLING * feats[:, _DRIVER_A]
                               + 0.15 * amp[_DRIVER_B] * noise_rng.standard_normal(total_days))
        if shift_spec is not None:
            for j in shift_idx:
                feats[shift_spec.start_day:, j] += shift_spec.delta
        target = (_TARGET_W[0] * feats[:, _DRIVER_A]
                  + _TARGET_W[1] * feats[:, _DRIVER_B]
                  + _SEASON_W * np.sin(2.0 * np.pi * days / 365.0 + 0.5 * rho)
                  + 0.1 * target_rng.standard_normal(total_days))
        present = np.ones((total_days, k), dtype=bool)
        if missing_rate > 0.0:
            present[:, 1:] = mask_rng.random((total_days, k - 1)) >= missing_rate
        feats = np.where(present, feats, 0.0)  # absent cells carry no value
        for d in range(total_days):
            records[(region, d)] = Record(
                region, d, tuple(float(v) for v in feats[d]),
                tuple(bool(b) for b in present[d]), float(target[d]))
    regions = [f"r{rho}" for rho in range(n_regions)]
    return Dataset(schema, records, regions, total_days)


# ---------------------------------------------------------------------------
# splits


def split_temporal(ds: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Train = days [0, floor(f*total)), test = remainder; test reuses train stats."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cut = int(train_fraction * ds.total_days)
    train_recs = {k: r for k, r in ds.records.items() if r.day_index < cut}
    test_recs = {k: r for k, r in ds.records.items() if r.day_index >= cut}
    if not train_recs or not test_recs:
        raise DatasetError(f"temporal split at day {cut} leaves an empty side")
    train = Dataset(ds.schema, train_recs, sorted({r for r, _ in train_recs}), cut)
    test = Dataset(ds.schema, test_recs, sorted({r for r, _ in test_recs}),
                   ds.total_days, norm_stats=train.norm_stats)
    return train, test


def split_ood_regions(ds: Dataset, n_train_regions: int) -> tuple[Dataset, Dataset]:
    """Train on the n regions with the most target observations, test on the rest.

    Ties in the observation count break toward the lexicographically smaller
    region id; train and test region sets are disjoint by construction.
    """
    counts: dict[str, int] = {r: 0 for r in ds.regions}
    for rec in ds.records.values():
        if rec.target is not None:
            counts[rec.region_id] += 1
    observed = [r for r in ds.regions if counts[r] > 0]
    if n_train_regions >= len(observed):
        raise DatasetError(
            f"n_train_regions={n_train_regions} leaves no test region "
            f"(only {len(observed)} regions have target observations)")
    ranked = sorted(observed, key=lambda r: (-counts[r], r))
    train_regions = set(ranked[:n_train_regions])
    train_recs = {k: r for k, r in ds.records.items() if r.region_id in train_regions}
    test_recs = {k: r for k, r in ds.records.items() if r.region_id not in train_regions}
    train = Dataset(ds.schema, train_recs, sorted(train_regions), ds.total_days)
    test = Dataset(ds.schema, test_recs,
                   sorted(set(ds.regions) - train_regions), ds.total_days,
                   norm_stats=train.norm_stats)
    return train, test


# ---------------------------------------------------------------------------
# windows


def assemble_window(ds: Dataset, region: str, t: int, beta: int) -> WindowBundle:
    """History bundle for (region, t); gaps become fully-masked pad records."""
    current = ds.get(region, t)
    if current is None:
        raise DatasetError(f"no record at anchor ({region}, {t})")

    def fetch(day: int) -> Record:
        if day >= 0:
            rec = ds.get(region, day)
            if rec is not None:
                return rec
        return pad_record(ds.schema, region, day)

    weekly = tuple(fetch(t - i) for i in range(1, WEEKLY_COUNT + 1))
    yearly = tuple(fetch(t - YEARLY_STRIDE * i) for i in range(1, YEARLY_COUNT + 1))
    image_window = tuple(fetch(t - i) for i in range(1, beta + 1))
    return WindowBundle(current, weekly, yearly, image_window)


def mask_features(ds: Dataset, feature_names) -> Dataset:
    """Copy of ds with the named features' presence forced off everywhere."""
    idx = [ds.schema.index_of(n) for n in feature_names]
    if not idx:
        return ds
    new_records = {}
    for key, rec in ds.records.items():
        present = list(rec.feature_present)
        feats = list(rec.features)
        for j in idx:
            present[j] = False
            feats[j] = 0.0
        new_records[key] = replace(rec, feature_present=tuple(present),
                                   features=tuple(feats))
    return Dataset(ds.schema, new_records, list(ds.regions), ds.total_days,
                   norm_stats=ds.norm_stats)
