"""Core data model: channel schemas, flight samples, datasets, fold plans.

Everything downstream (ingestion, training, the cascade, metrics) speaks in
terms of these types.  They are deliberately plain dataclasses over numpy
arrays; no framework types leak out of this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

CATEGORIES = ("electrical", "fuel", "engine", "cylinder", "flight_status", "environmental")
OBSERVATION_SETS = ("monitoring", "operational")

HEALTHY = 0
ANOMALOUS = 1


@dataclass(frozen=True)
class ChannelSpec:
    """One recorded channel: name, physical category, and observation role."""

    name: str
    category: str
    observation_set: str

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown channel category {self.category!r} for {self.name!r}")
        if self.observation_set not in OBSERVATION_SETS:
            raise ValueError(
                f"unknown observation set {self.observation_set!r} for {self.name!r}"
            )


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered collection of channels with a monitoring/operational split."""

    channels: tuple[ChannelSpec, ...]

    def __post_init__(self) -> None:
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate channel names: {dupes}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def monitoring_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.observation_set == "monitoring")

    @property
    def operational_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels if c.observation_set == "operational")

    def index_of(self, name: str) -> int:
        for i, c in enumerate(self.channels):
            if c.name == name:
                return i
        raise KeyError(f"unknown channel {name!r}; valid: {list(self.names)}")


def _spec(name: str, category: str, operational: bool = False) -> ChannelSpec:
    return ChannelSpec(name, category, "operational" if operational else "monitoring")


#: The stock 23-channel general-aviation schema.  Flight-profile context
#: signals (airspeed, vertical speed, altitude, outside air temperature) form
#: the operational set; everything else is powerplant/avionics monitoring.
DEFAULT_SCHEMA = ChannelSchema(
    channels=(
        _spec("volt1", "electrical"),
        _spec("volt2", "electrical"),
        _spec("amp1", "electrical"),
        _spec("amp2", "electrical"),
        _spec("FQtyL", "fuel"),
        _spec("FQtyR", "fuel"),
        _spec("E1 FFlow", "fuel"),
        _spec("E1 OilT", "engine"),
        _spec("E1 OilP", "engine"),
        _spec("E1 RPM", "engine"),
        _spec("E1 CHT1", "cylinder"),
        _spec("E1 CHT2", "cylinder"),
        _spec("E1 CHT3", "cylinder"),
        _spec("E1 CHT4", "cylinder"),
        _spec("E1 EGT1", "cylinder"),
        _spec("E1 EGT2", "cylinder"),
        _spec("E1 EGT3", "cylinder"),
        _spec("E1 EGT4", "cylinder"),
        _spec("IAS", "flight_status", operational=True),
        _spec("VSpd", "flight_status", operational=True),
        _spec("AltMSL", "flight_status", operational=True),
        _spec("NormAc", "flight_status"),
        _spec("OAT", "environmental", operational=True),
    )
)


def synth_schema(n_channels: int) -> ChannelSchema:
    """Schema for generated datasets: n-2 monitoring channels + 2 operational."""
    if n_channels < 4:
        raise ValueError("need at least 4 channels for a monitoring/operational split")
    mon = [_spec(f"mon{i}", "engine") for i in range(n_channels - 2)]
    ops = [
        _spec("op_speed", "flight_status", operational=True),
        _spec("op_alt", "flight_status", operational=True),
    ]
    return ChannelSchema(channels=tuple(mon + ops))


@dataclass
class FlightSample:
    """One flight: an L x D series plus labels and replica provenance.

    ``missing_mask`` is True where the raw record had no value (before fill);
    an all-True column marks a channel that was entirely absent.  ``source_id``
    names the physical flight this sample's values came from — it differs from
    ``flight_id`` only for replication-augmented copies.
    """

    flight_id: str
    values: np.ndarray
    missing_mask: np.ndarray
    ad_label: int | None = None
    fc_label: int | None = None
    class_name: str | None = None
    source_id: str = ""

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"values must be 2-D (L, D); got shape {self.values.shape}")
        if self.missing_mask is None:
            self.missing_mask = np.zeros(self.values.shape, dtype=bool)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.missing_mask.shape != self.values.shape:
            raise ValueError("missing_mask shape must match values shape")
        if self.values.shape[0] < 2:
            raise ValueError(f"flight {self.flight_id!r}: need at least 2 timesteps")
        if self.fc_label is not None and self.ad_label != ANOMALOUS:
            raise ValueError(
                f"flight {self.flight_id!r}: fault label requires the anomalous label"
            )
        if not self.source_id:
            self.source_id = self.flight_id

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def diagnosis_label(self) -> int:
        """0 for healthy, fault-class index (1..N) otherwise."""
        if self.ad_label is None:
            raise ValueError(f"flight {self.flight_id!r} is unlabeled")
        if self.ad_label == HEALTHY:
            return 0
        if self.fc_label is None:
            raise ValueError(f"anomalous flight {self.flight_id!r} lacks a fault label")
        return self.fc_label

    def with_values(self, values: np.ndarray, missing_mask: np.ndarray | None = None) -> "FlightSample":
        mask = missing_mask if missing_mask is not None else np.zeros(values.shape, dtype=bool)
        return replace(self, values=values, missing_mask=mask)


@dataclass
class IngestReport:
    """Tally of what happened during dataset loading."""

    loaded: int = 0
    excluded_missing: int = 0
    skipped_unreadable: int = 0
    warnings: list[str] = field(default_factory=list)


@dataclass
class LabeledDataset:
    """A set of labeled flights sharing one schema and fault-class vocabulary.

    ``class_names[i]`` is the name of fault class i+1; index 0 is always the
    healthy category and has no entry here.
    """

    samples: list[FlightSample]
    schema: ChannelSchema
    class_names: tuple[str, ...]
    ingest: IngestReport | None = None

    def __post_init__(self) -> None:
        self.class_names = tuple(self.class_names)
        ids = [s.flight_id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise ValueError(f"duplicate flight ids: {dupes}")
        n = self.n_fault_classes
        for s in self.samples:
            if s.n_channels != self.schema.n_channels:
                raise ValueError(
                    f"flight {s.flight_id!r} has {s.n_channels} channels; "
                    f"schema has {self.schema.n_channels}"
                )
            if s.fc_label is not None and not (1 <= s.fc_label <= n):
                raise ValueError(
                    f"flight {s.flight_id!r}: fault label {s.fc_label} outside 1..{n}"
                )

    @property
    def n_fault_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self, flight_id: str) -> FlightSample:
        for s in self.samples:
            if s.flight_id == flight_id:
                return s
        raise KeyError(f"no flight {flight_id!r} in dataset")

    def subset(self, flight_ids: Iterable[str]) -> "LabeledDataset":
        wanted = set(flight_ids)
        picked = [s for s in self.samples if s.flight_id in wanted]
        missing = wanted - {s.flight_id for s in picked}
        if missing:
            raise KeyError(f"flights not in dataset: {sorted(missing)[:5]}")
        return LabeledDataset(picked, self.schema, self.class_names)

    def class_name_of(self, diagnosis_label: int) -> str:
        if diagnosis_label == 0:
            return "healthy"
        return self.class_names[diagnosis_label - 1]


@dataclass
class NormStats:
    """Per-channel z-score statistics fitted on a training subset only."""

    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be matching 1-D vectors")
        if np.any(self.std < 0):
            raise ValueError("negative std entries")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    def apply(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if np.isnan(values).any():
            raise ValueError("NaN in input; run missing-value handling first")
        return (values - self.mean) / np.maximum(self.std, self.epsilon)

    def to_json(self, path: str | Path) -> None:
        payload = {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "epsilon": self.epsilon,
        }
        Path(path).write_text(json.dumps(payload, indent=1))

    @classmethod
    def from_json(cls, path: str | Path) -> "NormStats":
        payload = json.loads(Path(path).read_text())
        return cls(
            mean=np.asarray(payload["mean"], dtype=np.float64),
            std=np.asarray(payload["std"], dtype=np.float64),
            epsilon=float(payload["epsilon"]),
        )


@dataclass
class FoldPlan:
    """Assignment of every flight to exactly one cross-validation fold."""

    k: int
    assignments: dict[str, int]
    seed: int

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ValueError("need k >= 2 folds")
        bad = {f: i for f, i in self.assignments.items() if not (0 <= i < self.k)}
        if bad:
            raise ValueError(f"fold indices out of range: {list(bad.items())[:5]}")

    def test_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(f for f, i in self.assignments.items() if i == fold)

    def train_ids(self, fold: int) -> list[str]:
        self._check_fold(fold)
        return sorted(f for f, i in self.assignments.items() if i != fold)

    def _check_fold(self, fold: int) -> None:
        if not (0 <= fold < self.k):
            raise ValueError(f"fold {fold} outside 0..{self.k - 1}")

    def save_text(self, path: str | Path) -> None:
        lines = [f"# k={self.k} seed={self.seed}"]
        for fid in sorted(self.assignments):
            lines.append(f"{fid}\t{self.assignments[fid]}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load_text(cls, path: str | Path) -> "FoldPlan":
        text = Path(path).read_text().strip().splitlines()
        if not text or not text[0].startswith("#"):
            raise ValueError(f"malformed fold plan file {path}")
        header = dict(part.split("=") for part in text[0][1:].split())
        assignments: dict[str, int] = {}
        for line in text[1:]:
            if not line.strip():
                continue
            fid, idx = line.rsplit("\t", 1)
            assignments[fid] = int(idx)
        return cls(k=int(header["k"]), assignments=assignments, seed=int(header["seed"]))


def class_counts(samples: Sequence[FlightSample]) -> dict[int, int]:
    """Histogram of diagnosis labels (0 = healthy, 1..N = fault classes)."""
    counts: dict[int, int] = {}
    for s in samples:
        lbl = s.diagnosis_label
        counts[lbl] = counts.get(lbl, 0) + 1
    return counts
