"""Sequences, CSV ingestion, synthetic generators, cropping and grouped splits."""
from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .config import parse_floats, read_kv
from .errors import ContractError, DataError, ParseError
from .seeding import stream

# documented crop lengths for the three reference corpora (rest / task / clinical)
DEFAULT_CROP = {"rest": 600, "task": 150, "clinical": 100}


@dataclass
class BoldSequence:
    series: np.ndarray  # (T, N), z-scored per column
    label: int
    subject_id: str
    group_id: str = ""
    label_name: str = ""

    def __post_init__(self):
        if not self.group_id:
            self.group_id = self.subject_id
        if not self.label_name:
            self.label_name = str(self.label)

    @property
    def length(self) -> int:
        return self.series.shape[0]

    @property
    def n_rois(self) -> int:
        return self.series.shape[1]


def zscore(x: np.ndarray) -> np.ndarray:
    """Per-column z-score with population sd. Constant columns become zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    centered = x - mu
    centered -= centered.mean(axis=0)  # second pass mops up rounding in mu
    sd = np.sqrt((centered * centered).mean(axis=0))
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    out = centered / np.where(const, 1.0, sd)
    out[:, const] = 0.0
    return out


# ---------------------------------------------------------------- CSV ingestion

def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def read_series_csv(path) -> np.ndarray:
    """Rows are time points, columns are ROIs. A non-numeric first row is a header."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
        first = 2
    else:
        first = 1
    if not rows:
        raise DataError(f"{path}: no data rows")
    width = len(rows[0])
    out = np.empty((len(rows), width))
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i + first} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise ParseError(path, i + first, j + 1, cell) from None
    if not np.all(np.isfinite(out)):
        i, j = np.argwhere(~np.isfinite(out))[0]
        raise ParseError(path, int(i) + first, int(j) + 1, rows[i][j])
    return out


def _label_order(names) -> list[str]:
    uniq = set(names)
    try:
        return sorted(uniq, key=int)
    except ValueError:
        return sorted(uniq)


def ingest_csv(manifest_path) -> list[BoldSequence]:
    """Load a manifest with header ``path,label,subject_id[,group_id]``.

    Paths are resolved relative to the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label", "subject_id"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{manifest_path}: manifest lacks columns {sorted(missing)}")
        rows = list(reader)
    if not rows:
        raise DataError(f"{manifest_path}: empty manifest")
    order = _label_order(r["label"] for r in rows)
    index = {name: i for i, name in enumerate(order)}
    out: list[BoldSequence] = []
    n_rois = None
    for r in rows:
        path = manifest_path.parent / r["path"]
        series = read_series_csv(path)
        if n_rois is None:
            n_rois = series.shape[1]
        elif series.shape[1] != n_rois:
            raise DataError(f"{path}: has {series.shape[1]} ROIs, expected {n_rois}")
        out.append(BoldSequence(zscore(series), index[r["label"]], r["subject_id"],
                                r.get("group_id") or "", r["label"]))
    return out


def write_dataset(data: list[BoldSequence], out_dir, prefix: str = "sub") -> Path:
    """Write one CSV per sequence plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "label", "subject_id", "group_id"])
        for i, seq in enumerate(data):
            name = f"{prefix}{i:04d}.csv"
            np.savetxt(out_dir / name, seq.series, delimiter=",", fmt="%.17g",
                       header=",".join(f"roi{j}" for j in range(seq.n_rois)), comments="")
            w.writerow([name, seq.label_name, seq.subject_id, seq.group_id])
    return manifest


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditional generator: slow shared trend + brief transients + noise.

    ``trend_freqs[c]`` is in cycles per sequence, ``transient_rate[c]`` in
    expected events per ROI per time step.
    """
    n_classes: int = 3
    n_rois: int = 16
    length: int = 240
    trend_freqs: tuple[float, ...] = (1.0, 6.0, 1.0)
    transient_rate: tuple[float, ...] = (0.002, 0.002, 0.04)
    transient_width: int = 3
    noise_sd: float = 0.3
    seed: int = 0
    trend_amp: float = 1.0
    transient_amp: float = 3.0
    trend_frac: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "trend_freqs", tuple(float(f) for f in self.trend_freqs))
        object.__setattr__(self, "transient_rate", tuple(float(r) for r in self.transient_rate))
        if self.n_classes < 2:
            raise ContractError("n_classes must be >= 2")
        if len(self.trend_freqs) != self.n_classes or len(self.transient_rate) != self.n_classes:
            raise ContractError("trend_freqs and transient_rate need one entry per class")
        if self.n_rois < 1 or self.length < 2 or self.transient_width < 1:
            raise ContractError("n_rois >= 1, length >= 2 and transient_width >= 1 required")
        if self.noise_sd < 0 or min(self.transient_rate) < 0 or not 0 < self.trend_frac <= 1:
            raise ContractError("negative noise/rate or trend_frac outside (0, 1]")

    def replace(self, **kw) -> SyntheticSpec:
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return SyntheticSpec(**vals)

    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)
        return out


_INT_KEYS = {"n_classes", "n_rois", "length", "transient_width", "seed"}
_TUPLE_KEYS = {"trend_freqs", "transient_rate"}


def spec_from_items(items: dict[str, str]) -> SyntheticSpec:
    known = {f.name for f in fields(SyntheticSpec)}
    unknown = set(items) - known - {"n_per_class", "preset"}
    if unknown:
        raise DataError(f"unknown synthetic spec keys: {sorted(unknown)}")
    base = preset(items["preset"]) if "preset" in items else SyntheticSpec()
    kw = {}
    for k, raw in items.items():
        if k not in known:
            continue
        try:
            if k in _INT_KEYS:
                kw[k] = int(raw)
            elif k in _TUPLE_KEYS:
                kw[k] = tuple(parse_floats(raw))
            else:
                kw[k] = float(raw)
        except ValueError:
            raise DataError(f"bad value for {k}: {raw!r}") from None
    return base.replace(**kw)


def load_synthetic_spec(path) -> tuple[SyntheticSpec, int]:
    """Read a key = value spec file. Returns the spec and ``n_per_class`` (default 20)."""
    items = read_kv(path)
    return spec_from_items(items), int(items.get("n_per_class", 20))


def preset(kind: str, **kw) -> SyntheticSpec:
    """Named tasks.

    slow: classes differ only in trend frequency. fast: only in transient
    rate. joint: three classes; 0 and 1 share the transient rate but not the
    trend, 0 and 2 share the trend but not the transient rate. adversarial:
    a strong trend common to both classes hides weak transients whose rate
    is the only class signal.
    """
    if kind == "slow":
        spec = SyntheticSpec(n_classes=2, trend_freqs=(1.0, 6.0), transient_rate=(0.01, 0.01))
    elif kind == "fast":
        spec = SyntheticSpec(n_classes=2, trend_freqs=(3.0, 3.0), transient_rate=(0.002, 0.04))
    elif kind == "joint":
        spec = SyntheticSpec()
    elif kind == "adversarial":
        spec = SyntheticSpec(n_classes=2, trend_freqs=(1.0, 1.0), transient_rate=(0.005, 0.05),
                             trend_amp=3.0, transient_amp=1.0)
    else:
        raise ContractError(f"unknown preset {kind!r}")
    return spec.replace(**kw)


def _pulse(width: int) -> np.ndarray:
    # rises over the first half, decays over the second; peak 1
    return np.sin(np.pi * (np.arange(width) + 0.5) / width)


def trend_network(spec: SyntheticSpec) -> np.ndarray:
    """Boolean ROI mask carrying the shared trend; one draw per dataset seed."""
    rng = stream(spec.seed, "synthetic/network")
    members = rng.random(spec.n_rois) < spec.trend_frac
    if not members.any():
        members[rng.integers(spec.n_rois)] = True
    return members


def synth_one(spec: SyntheticSpec, label: int, members: np.ndarray,
              rng: np.random.Generator) -> np.ndarray:
    t_len, n = spec.length, spec.n_rois
    t = np.arange(t_len)
    x = np.zeros((t_len, n))
    phase = rng.uniform(0, 2 * np.pi)
    amp = spec.trend_amp * rng.uniform(0.5, 1.5, size=n) * members
    x += np.sin(2 * np.pi * spec.trend_freqs[label] * t / t_len + phase)[:, None] * amp
    pulse = _pulse(spec.transient_width)
    counts = rng.poisson(spec.transient_rate[label] * t_len, size=n)
    for roi in range(n):
        for start in rng.integers(0, t_len, size=counts[roi]):
            stop = min(t_len, start + spec.transient_width)
            x[start:stop, roi] += spec.transient_amp * pulse[: stop - start]
    if spec.noise_sd > 0:
        x += rng.normal(0.0, spec.noise_sd, size=x.shape)
    return zscore(x)


def make_synthetic(spec: SyntheticSpec, n_per_class: int) -> list[BoldSequence]:
    """``n_per_class`` subjects per class, ordered class-major; one sequence each."""
    members = trend_network(spec)
    rng = stream(spec.seed, "synthetic")
    out = []
    for c in range(spec.n_classes):
        for i in range(n_per_class):
            sid = f"c{c}s{i:03d}"
            out.append(BoldSequence(synth_one(spec, c, members, rng), c, sid))
    return out


# ---------------------------------------------------------------- cropping

def random_crop(x: np.ndarray, crop_len: int, rng: np.random.Generator) -> np.ndarray:
    t_len = x.shape[0]
    if not 1 <= crop_len <= t_len:
        raise ContractError(f"crop_len {crop_len} outside [1, {t_len}]")
    start = int(rng.integers(0, t_len - crop_len + 1))
    return x[start:start + crop_len]


# ---------------------------------------------------------------- splitting

@dataclass
class SplitPlan:
    dev_indices: list[int]
    test_indices: list[int]
    folds: list[tuple[list[int], list[int]]] = field(default_factory=list)


def _groups_by_stratum(data, indices) -> dict[int, list[str]]:
    members: dict[str, list[int]] = defaultdict(list)
    for i in indices:
        members[data[i].group_id].append(i)
    strata: dict[int, list[str]] = defaultdict(list)
    for gid in sorted(members):
        counts = Counter(data[i].label for i in members[gid])
        top = max(counts.values())
        strata[min(c for c, k in counts.items() if k == top)].append(gid)
    return strata


def _expand(data, indices, groups) -> list[int]:
    keep = set(groups)
    return [i for i in indices if data[i].group_id in keep]


def make_split(data: list[BoldSequence], test_frac: float = 0.2, n_folds: int = 5,
               seed: int = 0) -> SplitPlan:
    """Stratified, group-disjoint dev/test split with ``n_folds`` inner folds.

    Each group's stratum is its majority label. Groups are shuffled within a
    stratum, the first ``round(test_frac * n)`` go to test and the rest are
    dealt round-robin into folds, continuing the deal across strata so fold
    sizes stay balanced.
    """
    if not 0 <= test_frac < 1:
        raise ContractError("test_frac must lie in [0, 1)")
    if n_folds < 2:
        raise ContractError("n_folds must be >= 2")
    rng = stream(seed, "split")
    strata = _groups_by_stratum(data, range(len(data)))
    test_groups, fold_groups = [], [[] for _ in range(n_folds)]
    deal = 0
    for label in sorted(strata):
        groups = strata[label]
        order = [groups[i] for i in rng.permutation(len(groups))]
        n_test = int(math.floor(test_frac * len(order) + 0.5))
        dev = order[n_test:]
        if len(dev) < n_folds:
            raise DataError(f"class {label} has {len(dev)} development subjects, "
                            f"need at least {n_folds} for {n_folds}-fold cross-validation")
        test_groups += order[:n_test]
        for g in dev:
            fold_groups[deal % n_folds].append(g)
            deal += 1
    all_idx = list(range(len(data)))
    test = _expand(data, all_idx, test_groups)
    test_set = set(test)
    dev = [i for i in all_idx if i not in test_set]
    folds = []
    for k in range(n_folds):
        val = _expand(data, dev, fold_groups[k])
        val_set = set(val)
        folds.append(([i for i in dev if i not in val_set], val))
    return SplitPlan(dev, test, folds)


def subsample(data: list[BoldSequence], indices: list[int], percent: float, seed: int) -> list[int]:
    """Stratified subject-level subset holding ``percent`` % of each class.

    The per-class order depends only on ``seed``, so subsets are nested as the
    percentage grows.
    """
    if not 0 < percent <= 100:
        raise ContractError("percent must lie in (0, 100]")
    strata = _groups_by_stratum(data, indices)
    keep = []
    for label in sorted(strata):
        groups = strata[label]
        rng = stream(seed, f"subsample/{label}")
        order = [groups[i] for i in rng.permutation(len(groups))]
        k = int(math.floor(percent / 100 * len(order) + 0.5))
        if k == 0:
            raise DataError(f"{percent}% of class {label} ({len(order)} subjects) leaves no subject")
        keep += order[:k]
    return _expand(data, indices, keep)


def holdout(data: list[BoldSequence], frac: float, seed: int = 0) -> tuple[list[int], list[int]]:
    """Stratified, group-disjoint (train, held-out) index lists; same draw rule as
    :func:`make_split` without inner folds."""
    if not 0 <= frac < 1:
        raise ContractError("holdout fraction must lie in [0, 1)")
    rng = stream(seed, "holdout")
    strata = _groups_by_stratum(data, range(len(data)))
    held = []
    for label in sorted(strata):
        groups = strata[label]
        order = [groups[i] for i in rng.permutation(len(groups))]
        held += order[:int(math.floor(frac * len(order) + 0.5))]
    all_idx = list(range(len(data)))
    out = set(_expand(data, all_idx, held))
    return [i for i in all_idx if i not in out], sorted(out)
