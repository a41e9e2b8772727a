"""N-BaIoT ingestion, experimental subset sampling, scaling and splitting.

Class ids: 0 is benign traffic, 1-5 the Bashlite (gafgyt) variants and 6-10
the Mirai variants, each family in alphabetical order.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CLASS_NAMES = (
    "benign",
    "gafgyt.combo", "gafgyt.junk", "gafgyt.scan", "gafgyt.tcp", "gafgyt.udp",
    "mirai.ack", "mirai.scan", "mirai.syn", "mirai.udp", "mirai.udpplain",
)
ATTACKS = CLASS_NAMES[1:]

# the seven devices hit by both botnets
PAPER_DEVICES = (
    "Danmini_Doorbell",
    "Ecobee_Thermostat",
    "Philips_B120N10_Baby_Monitor",
    "Provision_PT_737E_Security_Camera",
    "Provision_PT_838_Security_Camera",
    "SimpleHome_XCS7_1002_WHT_Security_Camera",
    "SimpleHome_XCS7_1003_WHT_Security_Camera",
)
# device numbering used by the flattened "<n>.<kind>.csv" distribution
NUMBERED_DEVICES = {
    "1": "Danmini_Doorbell",
    "2": "Ecobee_Thermostat",
    "3": "Ennio_Doorbell",
    "4": "Philips_B120N10_Baby_Monitor",
    "5": "Provision_PT_737E_Security_Camera",
    "6": "Provision_PT_838_Security_Camera",
    "7": "Samsung_SNH_1011_N_Webcam",
    "8": "SimpleHome_XCS7_1002_WHT_Security_Camera",
    "9": "SimpleHome_XCS7_1003_WHT_Security_Camera",
}

WINDOWS = ("L5", "L3", "L1", "L0.1", "L0.01")
_STREAMS = (
    ("MI_dir", ("weight", "mean", "variance")),
    ("H", ("weight", "mean", "variance")),
    ("HH", ("weight", "mean", "std", "magnitude", "radius", "covariance", "pcc")),
    ("HH_jit", ("weight", "mean", "variance")),
    ("HpHp", ("weight", "mean", "std", "magnitude", "radius", "covariance", "pcc")),
)
FEATURE_NAMES = tuple(
    f"{stream}_{window}_{stat}" for stream, stats in _STREAMS for window in WINDOWS for stat in stats
)
N_FEATURES = len(FEATURE_NAMES)  # 23 statistics x 5 decay windows


class DataError(ValueError):
    """Bad input data: malformed files, unknown labels, too few samples."""


def class_id(kind: str) -> int:
    """Class id for a traffic kind such as ``mirai.ack`` or ``gafgyt_attacks/tcp``."""
    norm = kind.strip().lower().replace("\\", "/")
    norm = re.sub(r"\.csv$", "", norm)
    norm = re.sub(r"[/_ ]+", ".", norm)
    norm = norm.replace("bashlite", "gafgyt").replace(".attacks", "")
    if norm in ("benign.traffic", "normal"):
        norm = "benign"
    try:
        return CLASS_NAMES.index(norm)
    except ValueError:
        raise DataError(f"unknown traffic kind {kind!r}") from None


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    devices: np.ndarray
    kinds: np.ndarray
    class_names: tuple[str, ...] = CLASS_NAMES
    row_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.features.shape[0]
        self.devices = np.asarray(self.devices, dtype=object)
        self.kinds = np.asarray(self.kinds, dtype=object)
        if self.row_ids is None:
            self.row_ids = np.arange(n, dtype=np.int64)
        self.row_ids = np.asarray(self.row_ids, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a (rows, width) matrix")
        for name in ("labels", "devices", "kinds", "row_ids"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{name} has {len(getattr(self, name))} entries for {n} rows")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError(f"labels must lie in [0, {len(self.class_names)})")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.devices[idx], self.kinds[idx],
                       self.class_names, self.row_ids[idx])

    def with_features(self, features) -> "Dataset":
        return Dataset(features, self.labels, self.devices, self.kinds, self.class_names, self.row_ids)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise DataError("nothing to concatenate")
        return Dataset(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.devices for p in parts]),
            np.concatenate([p.kinds for p in parts]),
            parts[0].class_names,
        )


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def _locate_bad_cell(path: Path, width: int) -> str:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        for r, row in enumerate(reader, start=1):
            if len(row) != width:
                return f"row {r} (line {r + 1}) has {len(row)} cells, expected {width}"
            for c, cell in enumerate(row):
                try:
                    float(cell)
                except ValueError:
                    return f"non-numeric value {cell!r} at row {r} (line {r + 1}), column {c + 1} ({header[c]!r})"
    return "unparseable content"


def load_device_csv(path, device: str, kind: str) -> Dataset:
    """One N-BaIoT CSV (header + 115 numeric columns) as a labelled fragment."""
    path = Path(path)
    label = class_id(kind)
    try:
        frame = pd.read_csv(path, dtype=float, engine="c", float_precision="round_trip")
    except FileNotFoundError:
        raise DataError(f"{path}: no such file") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file") from None
    except (ValueError, pd.errors.ParserError):
        with open(path, newline="") as fh:
            width = len(next(csv.reader(fh), []))
        if width != N_FEATURES:
            raise DataError(f"{path}: expected {N_FEATURES} feature columns, found {width}") from None
        raise DataError(f"{path}: {_locate_bad_cell(path, width)}") from None
    if frame.shape[1] != N_FEATURES:
        raise DataError(f"{path}: expected {N_FEATURES} feature columns, found {frame.shape[1]}")
    values = frame.to_numpy(dtype=float)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise DataError(
            f"{path}: non-finite value {values[r, c]!r} at row {r + 1} (line {r + 2}), "
            f"column {c + 1} ({frame.columns[c]!r})"
        )
    n = values.shape[0]
    canonical = CLASS_NAMES[label]
    return Dataset(values, np.full(n, label), np.full(n, device, dtype=object),
                   np.full(n, canonical, dtype=object))


def write_device_csv(dataset: Dataset, path) -> None:
    """Inverse of :func:`load_device_csv`; 17 significant digits round-trip exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FEATURE_NAMES if dataset.width == N_FEATURES else
                   [f"f{i}" for i in range(dataset.width)])
        for row in dataset.features:
            w.writerow([format(v, ".17g") for v in row])


def discover_sources(root) -> list[tuple[Path, str, str]]:
    """Find ``(path, device, kind)`` triples under an N-BaIoT download.

    Understands both ``<device>/benign_traffic.csv`` + ``<device>/{gafgyt,mirai}_attacks/<x>.csv``
    and the flat ``<device>.<family>.<x>.csv`` naming (device may be 1-9).
    """
    root = Path(root)
    found = []
    for path in sorted(root.rglob("*.csv")):
        rel = path.relative_to(root)
        if len(rel.parts) >= 2 and (rel.parts[-1] == "benign_traffic.csv" or rel.parts[-2].endswith("_attacks")):
            device_part = rel.parts[-2] if rel.parts[-1] == "benign_traffic.csv" else rel.parts[-3]
            kind = "benign" if rel.parts[-1] == "benign_traffic.csv" else f"{rel.parts[-2]}/{path.stem}"
        else:
            device_part, _, kind = path.stem.partition(".")
            if not kind:
                continue
        try:
            kind = CLASS_NAMES[class_id(kind)]
        except DataError:
            log.debug("skipping %s: unrecognised traffic kind", path)
            continue
        found.append((path, NUMBERED_DEVICES.get(device_part, device_part), kind))
    return found


# --------------------------------------------------------------------------
# Experimental subset
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingPlan:
    benign_total: int = 430_000
    per_attack_per_device: int = 1_000
    devices: tuple[str, ...] = PAPER_DEVICES
    attacks: tuple[str, ...] = ATTACKS
    seed: int = 0

    @property
    def total(self) -> int:
        return self.benign_total + len(self.devices) * len(self.attacks) * self.per_attack_per_device


def _allocate(total: int, available: Sequence[int]) -> list[int]:
    # largest-remainder split of ``total`` proportional to ``available``
    pool = sum(available)
    quotas = [total * a / pool for a in available]
    counts = [math.floor(q) for q in quotas]
    short = total - sum(counts)
    by_remainder = sorted(range(len(available)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in by_remainder[:short]:
        counts[i] += 1
    return counts


def build_subset(fragments: Iterable[Dataset], plan: SamplingPlan) -> Dataset:
    """Sample the experimental dataset without replacement, then shuffle."""
    cells: dict[tuple[str, str], list[Dataset]] = {}
    for frag in fragments:
        for device in np.unique(frag.devices):
            for kind in np.unique(frag.kinds[frag.devices == device]):
                sel = (frag.devices == device) & (frag.kinds == kind)
                cells.setdefault((device, kind), []).append(frag.take(np.nonzero(sel)[0]))
    pools = {key: Dataset.concat(parts) for key, parts in cells.items()}

    def pool(device, kind):
        return pools.get((device, kind))

    rng = np.random.default_rng(plan.seed)
    parts = []
    available = [len(pool(d, "benign")) if pool(d, "benign") is not None else 0 for d in plan.devices]
    if sum(available) < plan.benign_total:
        raise DataError(f"insufficient benign samples: need {plan.benign_total}, have {sum(available)}")
    for device, count in zip(plan.devices, _allocate(plan.benign_total, available)):
        if count:
            src = pool(device, "benign")
            parts.append(src.take(rng.choice(len(src), size=count, replace=False)))
    for device in plan.devices:
        for attack in plan.attacks:
            kind = CLASS_NAMES[class_id(attack)]
            src = pool(device, kind)
            have = 0 if src is None else len(src)
            if have < plan.per_attack_per_device:
                raise DataError(
                    f"insufficient samples for ({device}, {kind}): need {plan.per_attack_per_device}, have {have}"
                )
            parts.append(src.take(rng.choice(have, size=plan.per_attack_per_device, replace=False)))
    subset = Dataset.concat(parts)
    subset = subset.take(rng.permutation(len(subset)))
    subset.row_ids = np.arange(len(subset), dtype=np.int64)
    return subset


# --------------------------------------------------------------------------
# Scaling and splitting
# --------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features) -> "Standardizer":
        X = np.asarray(features, dtype=float)
        if X.shape[0] < 2:
            raise DataError("standardisation needs at least two rows")
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        # numerically constant columns map to zero
        std[std <= 1e-12 * (1.0 + np.abs(mean))] = 0.0
        return cls(mean, std)

    def apply(self, features) -> np.ndarray:
        X = np.asarray(features, dtype=float)
        if X.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"expected width {self.mean.shape[0]}, got {X.shape[-1]}")
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (X - self.mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def standardize(dataset: Dataset) -> tuple[Dataset, Standardizer]:
    stats = Standardizer.fit(dataset.features)
    return dataset.with_features(stats.apply(dataset.features)), stats


def stratified_split(dataset: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Per-class proportional train/test split (test share rounded half up)."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(dataset.labels):
        members = np.nonzero(dataset.labels == c)[0]
        if members.size < 2:
            raise DataError(f"class {c} ({dataset.class_names[c]}) has {members.size} row(s); need 2 to split")
        members = rng.permutation(members)
        n_test = int(math.floor(members.size * test_fraction + 0.5))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    train = np.concatenate(train_idx)
    test = np.concatenate(test_idx)
    return dataset.take(rng.permutation(train)), dataset.take(rng.permutation(test))


# --------------------------------------------------------------------------
# Synthetic stand-in
# --------------------------------------------------------------------------

# class 0 dominant in the same 86/14 ratio as the experimental subset
SYNTH_SMALL_COUNTS = (4300,) + (70,) * 10


def synth_generate(counts: Sequence[int] = SYNTH_SMALL_COUNTS, width: int = N_FEATURES, seed: int = 0,
                   separation: float = 8.0, noise_fraction: float = 0.1, n_devices: int = 7) -> Dataset:
    """Gaussian blobs, one per class, with a block of class-irrelevant features.

    Class means point in random directions of the informative subspace with
    Euclidean norm ``separation``; every class gets its own mildly correlated
    covariance.
    """
    C = len(counts)
    if C < 2 or width < 2:
        raise ValueError("need at least two classes and two features")
    rng = np.random.default_rng(seed)
    n_noise = int(round(noise_fraction * width))
    perm = rng.permutation(width)
    informative, noise = np.sort(perm[n_noise:]), np.sort(perm[:n_noise])
    k = informative.size
    names = CLASS_NAMES if C <= len(CLASS_NAMES) else tuple(f"class{c}" for c in range(C))
    names = tuple(names[:C])

    blocks, labels = [], []
    for c, n in enumerate(counts):
        direction = rng.normal(size=k)
        mean = separation * direction / np.linalg.norm(direction)
        mix = np.eye(k) + 0.3 * rng.normal(size=(k, k)) / math.sqrt(k)
        X = np.empty((n, width))
        X[:, informative] = mean + rng.normal(size=(n, k)) @ mix.T
        X[:, noise] = rng.normal(size=(n, n_noise))
        blocks.append(X)
        labels.append(np.full(n, c))
    X = np.concatenate(blocks)
    y = np.concatenate(labels)
    order = rng.permutation(len(y))
    X, y = X[order], y[order]
    devices = np.array([f"synth-{i % n_devices}" for i in range(len(y))], dtype=object)
    return Dataset(X, y, devices, np.array([names[c] for c in y], dtype=object), names)
