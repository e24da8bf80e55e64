"""Ingestion and preprocessing pipeline.

Per-flight CSVs + a labels manifest go in; fixed-length, fillable, foldable
datasets come out.  The stages mirror the deployment order: admission filter
on missing rate, forward/back fill, natural-cubic resampling to a fixed
length, train-only z-score statistics, stratified fold planning, and
replication augmentation for the fault-classification stage.
"""

from __future__ import annotations

import logging
import warnings
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline, interp1d

from .schema import (
    ANOMALOUS,
    HEALTHY,
    ChannelSchema,
    FlightSample,
    FoldPlan,
    IngestReport,
    LabeledDataset,
    NormStats,
    class_counts,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def load_flight_csv(path: str | Path, schema: ChannelSchema) -> tuple[np.ndarray, np.ndarray]:
    """Read one flight CSV into (values, missing_mask), columns in schema order.

    The header must contain exactly the schema's channel names (any order);
    extra or absent columns are a hard error naming the offender.  Empty cells
    are missing values.
    """
    frame = pd.read_csv(path, dtype=np.float64, skipinitialspace=True)
    have = list(frame.columns)
    want = set(schema.names)
    extra = [c for c in have if c not in want]
    absent = [c for c in schema.names if c not in set(have)]
    if extra or absent:
        parts = []
        if absent:
            parts.append(f"missing channel(s) {absent}")
        if extra:
            parts.append(f"unexpected channel(s) {extra}")
        raise ValueError(f"{path}: header does not match schema: " + "; ".join(parts))
    frame = frame[list(schema.names)]
    values = frame.to_numpy(dtype=np.float64)
    mask = np.isnan(values)
    return values, mask


def fill_missing(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Forward-fill each channel, back-filling any leading gap.

    A channel with no observations at all is filled with 0.0 — under the
    train-set z-score that follows, a constant channel lands at exactly zero,
    which is the neutral choice.
    """
    out = values.copy()
    L, D = out.shape
    idx = np.arange(L)
    for d in range(D):
        col_mask = mask[:, d]
        if not col_mask.any():
            continue
        if col_mask.all():
            out[:, d] = 0.0
            continue
        valid = ~col_mask
        # index of the most recent valid row at or before each position
        last_valid = np.maximum.accumulate(np.where(valid, idx, -1))
        first_valid = idx[valid][0]
        last_valid[last_valid < 0] = first_valid  # leading gap: back-fill
        out[:, d] = out[last_valid, d]
    return out


def worst_missing_rate(mask: np.ndarray) -> float:
    """Largest per-channel fraction of missing entries."""
    return float(mask.mean(axis=0).max())


def load_dataset(
    root_path: str | Path,
    schema: ChannelSchema,
    labels_manifest: str | Path,
    max_missing_rate: float = 0.10,
    class_names: Sequence[str] | None = None,
) -> LabeledDataset:
    """Ingest a directory of flight CSVs plus a labels manifest.

    Flights whose worst channel misses at a rate >= ``max_missing_rate`` are
    excluded (counted in the ingest report).  Unreadable files are skipped
    with a warning tally.  When ``class_names`` is given, any manifest class
    outside it is a hard error; otherwise classes are inferred (sorted).
    """
    root = Path(root_path)
    manifest = pd.read_csv(labels_manifest, dtype=str, keep_default_na=False)
    required = {"flight_id", "ad_label", "class_name"}
    if not required.issubset(manifest.columns):
        raise ValueError(
            f"labels manifest must have columns {sorted(required)}; got {list(manifest.columns)}"
        )

    rows: dict[str, tuple[int, str]] = {}
    for _, row in manifest.iterrows():
        ad_raw = row["ad_label"].strip().lower()
        if ad_raw not in ("healthy", "anomalous"):
            raise ValueError(f"manifest flight {row['flight_id']!r}: bad ad_label {ad_raw!r}")
        cname = row["class_name"].strip()
        if ad_raw == "healthy" and cname:
            raise ValueError(
                f"manifest flight {row['flight_id']!r}: healthy rows must have empty class_name"
            )
        if ad_raw == "anomalous" and not cname:
            raise ValueError(
                f"manifest flight {row['flight_id']!r}: anomalous rows need a class_name"
            )
        rows[row["flight_id"]] = (HEALTHY if ad_raw == "healthy" else ANOMALOUS, cname)

    seen = {c for _, c in rows.values() if c}
    if class_names is None:
        names = tuple(sorted(seen))
    else:
        names = tuple(class_names)
        unknown = seen - set(names)
        if unknown:
            raise ValueError(f"manifest contains unknown class name(s): {sorted(unknown)}")
    label_index = {c: i + 1 for i, c in enumerate(names)}

    report = IngestReport()
    samples: list[FlightSample] = []
    for fid in sorted(rows):
        path = root / f"{fid}.csv"
        try:
            values, mask = load_flight_csv(path, schema)
        except (ValueError,) as exc:
            # schema mismatches are contract violations, not unreadable files
            raise
        except Exception as exc:  # noqa: BLE001 - unreadable file -> skip + tally
            report.skipped_unreadable += 1
            report.warnings.append(f"{fid}: unreadable ({exc})")
            log.warning("skipping unreadable flight %s: %s", fid, exc)
            continue
        if worst_missing_rate(mask) >= max_missing_rate:
            report.excluded_missing += 1
            continue
        ad, cname = rows[fid]
        samples.append(
            FlightSample(
                flight_id=fid,
                values=fill_missing(values, mask),
                missing_mask=mask,
                ad_label=ad,
                fc_label=label_index[cname] if cname else None,
                class_name=cname or None,
            )
        )
    report.loaded = len(samples)
    return LabeledDataset(samples, schema, names, ingest=report)


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

def resample_series(values: np.ndarray, target_len: int) -> np.ndarray:
    """Natural cubic spline resampling of an (L, D) array to (target_len, D).

    Knots sit at 0..L-1 and the output grid spans the same interval, so no
    extrapolation occurs.  Two points fall back to linear and three to
    quadratic interpolation — the spline of maximal available order.
    """
    values = np.asarray(values, dtype=np.float64)
    L = values.shape[0]
    if L < 2:
        raise ValueError("need at least 2 timesteps to resample")
    if np.isnan(values).any():
        raise ValueError("missing values present; fill before resampling")
    x = np.arange(L, dtype=np.float64)
    xs = np.linspace(0.0, float(L - 1), target_len)
    if L == 2:
        f = interp1d(x, values, kind="linear", axis=0)
        return f(xs)
    if L == 3:
        f = interp1d(x, values, kind="quadratic", axis=0)
        return f(xs)
    spline = CubicSpline(x, values, axis=0, bc_type="natural")
    return spline(xs)


def resample_cubic(sample: FlightSample, target_len: int = 2048) -> FlightSample:
    """Resample one flight to a fixed length.

    The output mask keeps only the all-missing-channel information: index-level
    provenance does not survive a continuous re-gridding.
    """
    out_values = resample_series(sample.values, target_len)
    col_all_missing = sample.missing_mask.all(axis=0)
    out_mask = np.zeros((target_len, sample.n_channels), dtype=bool)
    out_mask[:, col_all_missing] = True
    return sample.with_values(out_values, out_mask)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def fit_norm_stats(samples: Sequence[FlightSample], epsilon: float = 1e-8) -> NormStats:
    """Pooled per-channel mean/std (population) over all timesteps of all samples."""
    if not samples:
        raise ValueError("cannot fit normalization on an empty sample list")
    stacked = np.concatenate([s.values for s in samples], axis=0)
    if np.isnan(stacked).any():
        raise ValueError("NaN in training values; preprocessing must precede fitting")
    return NormStats(mean=stacked.mean(axis=0), std=stacked.std(axis=0), epsilon=epsilon)


def apply_norm(sample: FlightSample, stats: NormStats) -> FlightSample:
    return sample.with_values(stats.apply(sample.values), sample.missing_mask.copy())


def normalize(data, stats: NormStats | None = None, mode: str = "fit"):
    """Fit or apply z-score normalization.

    mode="fit": data must be a LabeledDataset; returns (normalized dataset,
    freshly fitted NormStats).  mode="apply": data may be a dataset or a single
    sample; returns (normalized data, the given stats).
    """
    if mode == "fit":
        if not isinstance(data, LabeledDataset):
            raise TypeError("fit mode requires a LabeledDataset")
        stats = fit_norm_stats(data.samples)
        out = LabeledDataset(
            [apply_norm(s, stats) for s in data.samples], data.schema, data.class_names
        )
        return out, stats
    if mode == "apply":
        if stats is None:
            raise ValueError("apply mode requires previously fitted stats")
        if isinstance(data, LabeledDataset):
            out = LabeledDataset(
                [apply_norm(s, stats) for s in data.samples], data.schema, data.class_names
            )
            return out, stats
        if isinstance(data, FlightSample):
            return apply_norm(data, stats), stats
        raise TypeError(f"cannot normalize object of type {type(data).__name__}")
    raise ValueError(f"unknown mode {mode!r}; expected 'fit' or 'apply'")


# ---------------------------------------------------------------------------
# Fold planning
# ---------------------------------------------------------------------------

def stratified_kfold(
    dataset: LabeledDataset,
    k: int = 5,
    seed: int = 0,
    stratify_on: str = "diagnosis_label",
) -> FoldPlan:
    """Deterministic stratified k-fold split with per-flight isolation.

    Per class, sizes are dealt as floor(n_c/k) per fold with the remainder
    going one-each to the currently least-loaded folds; classes smaller than k
    therefore land one-per-fold until exhausted.  Every flight appears in
    exactly one fold.
    """
    if stratify_on != "diagnosis_label":
        raise ValueError(f"unsupported stratification key {stratify_on!r}")
    if k < 2:
        raise ValueError("need k >= 2")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")

    groups: dict[int, list[str]] = {}
    for s in dataset.samples:
        groups.setdefault(s.diagnosis_label, []).append(s.flight_id)

    rng = np.random.default_rng(seed)
    fold_sizes = np.zeros(k, dtype=np.int64)
    assignments: dict[str, int] = {}
    for label in sorted(groups):
        ids = sorted(groups[label])
        rng.shuffle(ids)
        base, rem = divmod(len(ids), k)
        # hand the remainder to the least-loaded folds, random tie-break
        order = np.lexsort((rng.permutation(k), fold_sizes))
        takes_extra = set(int(f) for f in order[:rem])
        cursor = 0
        for fold in range(k):
            take = base + (1 if fold in takes_extra else 0)
            for fid in ids[cursor : cursor + take]:
                assignments[fid] = fold
            fold_sizes[fold] += take
            cursor += take
    return FoldPlan(k=k, assignments=assignments, seed=seed)


# ---------------------------------------------------------------------------
# Augmentation and subsetting
# ---------------------------------------------------------------------------

def replicate_augment(dataset: LabeledDataset, k_da: int = 3) -> LabeledDataset:
    """Bring every class up to min(k_da * N_c, N_cmax) by cyclic replication.

    Replicas are verbatim value copies carrying fresh flight ids of the form
    ``<source>#r<j>`` and ``source_id`` pointing at the original.  Originals
    are always retained.  N_cmax is the size of the largest class in the
    input.
    """
    if not dataset.samples:
        raise ValueError("cannot augment an empty dataset")
    if k_da < 1:
        raise ValueError("k_da must be >= 1")
    counts = class_counts(dataset.samples)
    n_cmax = max(counts.values())
    out: list[FlightSample] = list(dataset.samples)
    by_class: dict[int, list[FlightSample]] = {}
    for s in dataset.samples:
        by_class.setdefault(s.diagnosis_label, []).append(s)
    for label in sorted(by_class):
        originals = sorted(by_class[label], key=lambda s: s.flight_id)
        target = min(k_da * len(originals), n_cmax)
        need = target - len(originals)
        for j in range(need):
            src = originals[j % len(originals)]
            copy_index = j // len(originals) + 1
            out.append(
                FlightSample(
                    flight_id=f"{src.flight_id}#r{copy_index}",
                    values=src.values.copy(),
                    missing_mask=src.missing_mask.copy(),
                    ad_label=src.ad_label,
                    fc_label=src.fc_label,
                    class_name=src.class_name,
                    source_id=src.source_id,
                )
            )
    return LabeledDataset(out, dataset.schema, dataset.class_names)


def anomalous_subset(dataset: LabeledDataset) -> LabeledDataset:
    """Exactly the anomalous samples, labels preserved."""
    picked = [s for s in dataset.samples if s.ad_label == ANOMALOUS]
    if not picked:
        warnings.warn("anomalous subset is empty", stacklevel=2)
    return LabeledDataset(picked, dataset.schema, dataset.class_names)


# ---------------------------------------------------------------------------
# Manifest / CSV writing (used by the synthesizer and tests)
# ---------------------------------------------------------------------------

def write_dataset_csv(dataset: LabeledDataset, root: str | Path) -> Path:
    """Write one CSV per flight plus a labels manifest; returns manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for s in dataset.samples:
        frame = pd.DataFrame(s.values, columns=list(dataset.schema.names))
        frame = frame.mask(s.missing_mask)
        frame.to_csv(root / f"{s.flight_id}.csv", index=False)
    rows = []
    for s in dataset.samples:
        rows.append(
            {
                "flight_id": s.flight_id,
                "ad_label": "healthy" if s.ad_label == HEALTHY else "anomalous",
                "class_name": s.class_name or "",
            }
        )
    manifest = root / "labels.csv"
    pd.DataFrame(rows).to_csv(manifest, index=False)
    return manifest
