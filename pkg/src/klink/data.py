"""Sample ingestion, windowing, normalization, and synthetic corpora."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

# 1-based indices of the constant-valued turbofan sensors dropped by default
DEFAULT_DROPPED_SENSORS = (1, 5, 6, 10, 16, 18, 19)
DEFAULT_RUL_CAP = 125.0


@dataclasses.dataclass
class MtsSample:
    """One multivariate window: sensors x timestamps plus its label."""

    signal: np.ndarray  # (N, L), sensor-major
    label: float | int
    sensor_names: list[str]
    sample_id: str

    def __post_init__(self):
        self.signal = np.asarray(self.signal, dtype=np.float64)
        if self.signal.ndim != 2:
            raise ValueError(f"sample {self.sample_id}: signal must be 2-D, got {self.signal.shape}")
        if self.signal.shape[0] != len(self.sensor_names):
            raise ValueError(
                f"sample {self.sample_id}: {self.signal.shape[0]} rows vs "
                f"{len(self.sensor_names)} sensor names"
            )

    @property
    def n_sensors(self) -> int:
        return self.signal.shape[0]

    @property
    def length(self) -> int:
        return self.signal.shape[1]


@dataclasses.dataclass
class PatchSet:
    """Non-overlapping time patches of one sample; the trailing remainder is dropped."""

    patches: np.ndarray  # (patch_count, N, patch_size)
    patch_size: int

    @property
    def patch_count(self) -> int:
        return self.patches.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.patches.shape[1]


def partition(sample: MtsSample, patch_size: int) -> PatchSet:
    """Split a sample into floor(L / f) patches of shape (N, f)."""
    f = int(patch_size)
    if f < 1:
        raise ValueError("patch size must be >= 1")
    if f > sample.length:
        raise ValueError(f"patch size {f} exceeds sample length {sample.length}")
    count = sample.length // f
    trimmed = sample.signal[:, : count * f]
    patches = trimmed.reshape(sample.n_sensors, count, f).transpose(1, 0, 2)
    return PatchSet(patches=np.ascontiguousarray(patches), patch_size=f)


def patch_batch(samples: Sequence[MtsSample], patch_size: int) -> np.ndarray:
    """Stack per-sample patches into a (B, patch_count, N, f) array."""
    return np.stack([partition(s, patch_size).patches for s in samples])


@dataclasses.dataclass
class NormalizationStats:
    """Per-sensor min/max fitted on the training split only."""

    minimum: np.ndarray
    maximum: np.ndarray
    sensor_names: list[str]

    @classmethod
    def fit(cls, samples: Sequence[MtsSample]) -> "NormalizationStats":
        if not samples:
            raise ValueError("cannot fit normalization stats on an empty split")
        stacked = np.concatenate([s.signal for s in samples], axis=1)
        return cls(stacked.min(axis=1), stacked.max(axis=1), list(samples[0].sensor_names))

    def save(self, path: str | Path) -> None:
        payload = {
            "sensor_names": self.sensor_names,
            "min": self.minimum.tolist(),
            "max": self.maximum.tolist(),
        }
        Path(path).write_text(json.dumps(payload), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(np.array(payload["min"]), np.array(payload["max"]), payload["sensor_names"])


def minmax_normalize(samples: Iterable[MtsSample], stats: NormalizationStats) -> list[MtsSample]:
    """(x - min) / (max - min) per sensor; a constant sensor maps to 0."""
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    out = []
    for s in samples:
        scaled = (s.signal - stats.minimum[:, None]) / safe[:, None]
        scaled[span == 0, :] = 0.0
        out.append(MtsSample(scaled, s.label, list(s.sensor_names), s.sample_id))
    return out


def downsample(sample: MtsSample, interval: int) -> MtsSample:
    """Keep every interval-th timestamp (ceil(L / interval) remain)."""
    if interval < 1:
        raise ValueError("interval must be >= 1")
    return MtsSample(
        sample.signal[:, ::interval].copy(), sample.label, list(sample.sensor_names), sample.sample_id
    )


# ---------------------------------------------------------------------------
# splits


@dataclasses.dataclass
class DatasetSplit:
    train: list[MtsSample]
    validation: list[MtsSample]
    test: list[MtsSample]
    ratios: tuple[float, float, float]
    seed: int

    def all_ids_disjoint(self) -> bool:
        ids = [s.sample_id for part in (self.train, self.validation, self.test) for s in part]
        return len(ids) == len(set(ids))


def _partition_indices(n: int, ratios: Sequence[float], rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    cuts = np.cumsum(np.asarray(ratios) / np.sum(ratios))[:-1]
    bounds = (cuts * n).round().astype(int)
    return np.split(order, bounds)


def split_random(
    samples: Sequence[MtsSample], ratios: tuple[float, float, float], seed: int
) -> DatasetSplit:
    parts = _partition_indices(len(samples), ratios, np.random.default_rng(seed))
    pick = lambda idx: [samples[i] for i in sorted(idx)]
    return DatasetSplit(pick(parts[0]), pick(parts[1]), pick(parts[2]), tuple(ratios), seed)


def split_by_subject(
    samples: Sequence[MtsSample],
    subject_of: Callable[[MtsSample], str],
    ratios: tuple[float, float, float],
    seed: int,
) -> DatasetSplit:
    """Split whole subjects (units, participants) so none is shared across splits."""
    subjects = sorted({subject_of(s) for s in samples})
    parts = _partition_indices(len(subjects), ratios, np.random.default_rng(seed))
    assignment = {}
    for split_idx, idx in enumerate(parts):
        for i in idx:
            assignment[subjects[i]] = split_idx
    buckets: list[list[MtsSample]] = [[], [], []]
    for s in samples:
        buckets[assignment[subject_of(s)]].append(s)
    return DatasetSplit(buckets[0], buckets[1], buckets[2], tuple(ratios), seed)


# ---------------------------------------------------------------------------
# run-to-failure ingestion


@dataclasses.dataclass
class IngestWarning:
    unit: str
    message: str


def ingest_rul_corpus(
    engine_series: dict[str, np.ndarray],
    sensor_names: Sequence[str],
    window: int,
    stride: int = 1,
    cap: float = DEFAULT_RUL_CAP,
) -> tuple[list[MtsSample], list[IngestWarning]]:
    """Slide a window over each unit's (N, T) series; label = min(T - L - a*S, cap).

    Units shorter than the window are skipped with a warning record.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    samples: list[MtsSample] = []
    warnings: list[IngestWarning] = []
    names = list(sensor_names)
    for unit, series in engine_series.items():
        series = np.asarray(series, dtype=np.float64)
        total = series.shape[1]
        if total < window:
            warnings.append(IngestWarning(unit, f"series length {total} < window {window}, skipped"))
            continue
        for a in range((total - window) // stride + 1):
            start = a * stride
            label = min(float(total - window - a * stride), float(cap))
            samples.append(
                MtsSample(series[:, start : start + window].copy(), label, names, f"{unit}:{a}")
            )
    return samples, warnings


def read_turbofan_raw(
    path: str | Path,
    n_settings: int = 3,
    dropped_sensors: Sequence[int] = DEFAULT_DROPPED_SENSORS,
) -> tuple[dict[str, np.ndarray], list[str]]:
    """Parse whitespace-delimited run-to-failure data (unit, cycle, settings..., sensors...).

    Returns per-unit (N, T) matrices over the retained sensors, ordered by cycle.
    """
    raw = np.loadtxt(Path(path))
    if raw.ndim == 1:
        raw = raw[None, :]
    n_sensor_cols = raw.shape[1] - 2 - n_settings
    dropped = set(dropped_sensors)
    kept = [i for i in range(1, n_sensor_cols + 1) if i not in dropped]
    names = [f"sensor {i}" for i in kept]
    cols = [2 + n_settings + (i - 1) for i in kept]
    units: dict[str, np.ndarray] = {}
    for unit in np.unique(raw[:, 0]):
        rows = raw[raw[:, 0] == unit]
        rows = rows[np.argsort(rows[:, 1])]
        units[str(int(unit))] = rows[:, cols].T.copy()
    return units, names


def last_window_samples(
    engine_series: dict[str, np.ndarray],
    sensor_names: Sequence[str],
    window: int,
    labels: dict[str, float],
    cap: float = DEFAULT_RUL_CAP,
) -> tuple[list[MtsSample], list[IngestWarning]]:
    """One sample per unit from its trailing window, labeled from a lookup table."""
    samples: list[MtsSample] = []
    warnings: list[IngestWarning] = []
    for unit, series in engine_series.items():
        total = series.shape[1]
        if total < window:
            warnings.append(IngestWarning(unit, f"series length {total} < window {window}, skipped"))
            continue
        label = min(float(labels[unit]), float(cap))
        samples.append(
            MtsSample(series[:, total - window :].copy(), label, list(sensor_names), f"{unit}:last")
        )
    return samples, warnings


# ---------------------------------------------------------------------------
# sample file format: one self-describing JSON object per line


def write_samples(path: str | Path, samples: Iterable[MtsSample]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in samples:
            record = {
                "id": s.sample_id,
                "sensors": list(s.sensor_names),
                "n": s.n_sensors,
                "l": s.length,
                "label": s.label if isinstance(s.label, int) else float(s.label),
                "values": s.signal.ravel(order="C").tolist(),
            }
            fh.write(json.dumps(record) + "\n")


def read_samples(path: str | Path) -> list[MtsSample]:
    samples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            n, l = int(record["n"]), int(record["l"])
            values = np.asarray(record["values"], dtype=np.float64)
            if values.size != n * l:
                raise ValueError(f"{path}:{line_no}: expected {n * l} values, got {values.size}")
            samples.append(
                MtsSample(values.reshape(n, l), record["label"], list(record["sensors"]), record["id"])
            )
    return samples


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclasses.dataclass
class SyntheticSpec:
    n_sensors: int = 6
    n_classes: int = 3
    n_groups: int = 2  # informative correlation groups
    n_nuisance: int = 2  # class-independent singleton groups
    noise: float = 0.3
    seed: int = 7
    length: int = 32
    samples_per_class: tuple[int, int, int] = (16, 16, 64)  # train/val/test


@dataclasses.dataclass
class SyntheticCorpus:
    split: DatasetSplit
    relations: np.ndarray  # (N, N), 1 within a correlation group
    groups: list[int]  # group index per sensor
    sensor_names: list[str]
    class_names: list[str]
    stats: NormalizationStats


def make_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticCorpus:
    """Grouped sinusoid corpus: sensors in a group share a latent signal.

    Class identity selects each informative group's latent frequency (one
    of two carriers, chosen per class bit) and phase; a random per-sample
    time shift removes absolute phase, so classification requires
    combining groups rather than reading one sensor. Nuisance singleton
    groups carry class-independent latents at nearby frequencies and act
    as confusable distractors. Per-sensor raw means carry almost no class
    information. Returns min-max-normalized splits (stats fitted on
    train) and the ground-truth sensor relation matrix.
    """
    if spec.n_groups < 2:
        raise ValueError("need at least 2 correlation groups")
    informative = spec.n_sensors - spec.n_nuisance
    if informative < spec.n_groups:
        raise ValueError("need at least one informative sensor per group")
    rng = np.random.default_rng(spec.seed)
    per_group = informative // spec.n_groups
    extra = informative % spec.n_groups
    groups: list[int] = []
    for g in range(spec.n_groups):
        groups.extend([g] * (per_group + (1 if g < extra else 0)))
    groups.extend(spec.n_groups + j for j in range(spec.n_nuisance))
    total_groups = spec.n_groups + spec.n_nuisance
    sensor_names = [f"{_GROUP_WORDS[g % len(_GROUP_WORDS)]} channel {i}" for i, g in enumerate(groups)]
    class_names = [f"pattern {c}" for c in range(spec.n_classes)]

    carriers = np.array([2.0, 5.0])
    freq = np.zeros((spec.n_classes, total_groups))
    phase = rng.uniform(0.0, 2 * np.pi, size=(spec.n_classes, total_groups))
    for c in range(spec.n_classes):
        for g in range(spec.n_groups):
            freq[c, g] = carriers[(c >> g) & 1]
    for j in range(spec.n_nuisance):
        g = spec.n_groups + j
        # near-colliding carrier: confusable with a real group, class-blind
        freq[:, g] = carriers[j % 2] * (1.15 if j % 2 == 0 else 0.92)
        phase[:, g] = phase[0, g]
    t = np.arange(spec.length) / spec.length

    def build(count: int, tag: str) -> list[MtsSample]:
        out = []
        for c in range(spec.n_classes):
            for k in range(count):
                shift = rng.uniform(0.0, 1.0)
                latents = np.stack(
                    [
                        np.sin(2 * np.pi * freq[c, g] * (t + shift) + phase[c, g])
                        for g in range(total_groups)
                    ]
                )
                signal = latents[groups] + spec.noise * rng.normal(size=(spec.n_sensors, spec.length))
                out.append(MtsSample(signal, c, sensor_names, f"{tag}-c{c}-{k}"))
        return out

    train = build(spec.samples_per_class[0], "train")
    val = build(spec.samples_per_class[1], "val")
    test = build(spec.samples_per_class[2], "test")
    stats = NormalizationStats.fit(train)
    total = sum(spec.samples_per_class)
    split = DatasetSplit(
        minmax_normalize(train, stats),
        minmax_normalize(val, stats),
        minmax_normalize(test, stats),
        tuple(n / total for n in spec.samples_per_class),
        spec.seed,
    )
    relations = np.array(
        [[1.0 if groups[i] == groups[j] else 0.0 for j in range(spec.n_sensors)] for i in range(spec.n_sensors)]
    )
    return SyntheticCorpus(split, relations, groups, sensor_names, class_names, stats)


_GROUP_WORDS = ("temperature", "pressure", "vibration", "flow", "torque", "voltage")
