"""End-to-end pipeline over a working directory.

Layout (all under one work dir, overridable via ``LMSD_WORK_DIR``)::

    config.yaml                     snapshot taken at preprocess time
    manifest.json                   ingest summary + config hash
    processed/index.json            sample index (labels, files, schema)
    processed/samples/*.npz         resampled series (float32) + missing masks
    processed/folds.tsv             fold plan (flight -> fold)
    processed/fold<i>/norm_stats.json   per-fold stats, fitted lazily from
                                        that fold's training files only
    checkpoints/fold<i>/<stage>/    best.ckpt, last.ckpt, kel.ckpt, logs
    reports/fold<i>/                diagnosis.jsonl, metrics.json, figures
    reports/cv_summary.json|.png    cross-fold aggregate
    explain/                        keyness figures + sidecars

Every step checks its prerequisites and raises :class:`MissingArtifactError`
naming the missing file and the command that produces it.
"""

from __future__ import annotations

import dataclasses
import json
import re
import warnings
from pathlib import Path
from types import SimpleNamespace
from typing import Callable, Sequence

import numpy as np
import torch

from . import plotting
from .backbones import (
    ConvTokMHSA,
    MMKNet,
    init_parameters,
    load_checkpoint,
    checkpoint_extra,
    param_hash,
    save_checkpoint,
)
from .cascade import batch_diagnose, read_diagnosis_jsonl, write_diagnosis_jsonl
from .config import RunConfig
from .dataio import (
    anomalous_subset,
    fit_norm_stats,
    load_dataset,
    normalize,
    resample_cubic,
    stratified_kfold,
    write_dataset_csv,
)
from .keyness import (
    KeynessRecord,
    distill_train,
    export_heatmap,
    kel_forward,
    retrieve_baselines,
)
from .metrics import ConfusionMatrix, classification_metrics, efficiency_metrics, stability_analysis
from .schema import (
    ANOMALOUS,
    HEALTHY,
    ChannelSchema,
    ChannelSpec,
    DEFAULT_SCHEMA,
    FlightSample,
    FoldPlan,
    LabeledDataset,
    NormStats,
)
from .synth import SynthSpec, synth_generate
from .training import STAGES, TrainReport, lmsd_timing, train_stage

INDEX_VERSION = 1
_STAGE_SEED_OFFSET = {"ad": 1, "fc": 2, "kel": 3}
_FOLD_SEED_STEP = 7919  # prime stride keeps per-fold streams disjoint


class MissingArtifactError(RuntimeError):
    """A pipeline prerequisite is absent; says which command creates it."""

    def __init__(self, artifact: str, path: str | Path, hint: str):
        self.artifact = artifact
        self.path = Path(path)
        self.hint = hint
        super().__init__(f"missing {artifact}: {self.path} (run `lmsd {hint}` first)")


# ---------------------------------------------------------------------------
# Paths
# ---------------------------------------------------------------------------

def processed_dir(work: Path) -> Path:
    return Path(work) / "processed"


def index_path(work: Path) -> Path:
    return processed_dir(work) / "index.json"


def samples_dir(work: Path) -> Path:
    return processed_dir(work) / "samples"


def folds_path(work: Path) -> Path:
    return processed_dir(work) / "folds.tsv"


def fold_stats_path(work: Path, fold: int) -> Path:
    return processed_dir(work) / f"fold{fold}" / "norm_stats.json"


def ckpt_dir(work: Path, fold: int, stage: str) -> Path:
    return Path(work) / "checkpoints" / f"fold{fold}" / stage


def reports_dir(work: Path, fold: int | None = None) -> Path:
    base = Path(work) / "reports"
    return base if fold is None else base / f"fold{fold}"


def explain_dir(work: Path) -> Path:
    return Path(work) / "explain"


def stage_seed(base: int, fold: int, stage: str) -> int:
    if stage not in _STAGE_SEED_OFFSET:
        raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(_STAGE_SEED_OFFSET)}")
    return base + _FOLD_SEED_STEP * fold + _STAGE_SEED_OFFSET[stage]


def _safe_name(flight_id: str) -> str:
    return re.sub(r"[^-A-Za-z0-9_.]", "_", flight_id)


# ---------------------------------------------------------------------------
# Processed store
# ---------------------------------------------------------------------------

def _schema_to_dict(schema: ChannelSchema) -> dict:
    return {
        "channels": [
            {"name": c.name, "category": c.category, "observation_set": c.observation_set}
            for c in schema.channels
        ]
    }


def _schema_from_dict(d: dict) -> ChannelSchema:
    return ChannelSchema(tuple(ChannelSpec(**c) for c in d["channels"]))


class ProcessedStore:
    """Read access to the preprocessed sample files, with a read audit hook.

    ``on_read`` (when set) is called with every flight id whose file is
    loaded; normalization-statistics fitting uses it to prove that only
    training files were touched.
    """

    def __init__(self, work: str | Path):
        self.work = Path(work)
        path = index_path(self.work)
        if not path.exists():
            raise MissingArtifactError("processed dataset", path, "preprocess")
        self._index = json.loads(path.read_text())
        if self._index.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported processed-index version in {path}")
        self.schema = _schema_from_dict(self._index["schema"])
        self.class_names: tuple[str, ...] = tuple(self._index["class_names"])
        self.target_len: int = int(self._index["target_len"])
        self.config_hash: str = self._index.get("config_hash", "")
        self._records = {rec["flight_id"]: rec for rec in self._index["samples"]}
        self.on_read: Callable[[str], None] | None = None

    @property
    def flight_ids(self) -> list[str]:
        return sorted(self._records)

    @property
    def n_fault_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self._records)

    def load_sample(self, flight_id: str) -> FlightSample:
        if flight_id not in self._records:
            raise KeyError(
                f"flight {flight_id!r} not in processed store ({len(self._records)} flights)"
            )
        if self.on_read is not None:
            self.on_read(flight_id)
        rec = self._records[flight_id]
        with np.load(samples_dir(self.work) / rec["file"]) as payload:
            values = payload["values"].astype(np.float64)
            mask = payload["mask"].astype(bool)
        fc = rec["fc_label"]
        return FlightSample(
            flight_id=flight_id,
            values=values,
            missing_mask=mask,
            ad_label=int(rec["ad_label"]),
            fc_label=int(fc) if fc is not None else None,
            class_name=rec["class_name"] or None,
            source_id=rec["source_id"],
        )

    def load_many(self, flight_ids: Sequence[str]) -> LabeledDataset:
        samples = [self.load_sample(fid) for fid in flight_ids]
        return LabeledDataset(samples, self.schema, list(self.class_names))

    def dataset(self) -> LabeledDataset:
        return self.load_many(self.flight_ids)


# ---------------------------------------------------------------------------
# Preprocess / synth / folds
# ---------------------------------------------------------------------------

def preprocess(
    work: str | Path,
    data_root: str | Path,
    config: RunConfig,
    labels: str | Path | None = None,
    schema: ChannelSchema | None = None,
) -> dict:
    """Ingest raw CSVs, resample to the common length, persist the store."""
    work = Path(work)
    data_root = Path(data_root)
    if labels is None:
        labels = data_root / "labels.csv"
    labels = Path(labels)
    if not labels.exists():
        raise MissingArtifactError(
            "labels manifest", labels, "synth (or place a labels.csv next to the flight CSVs)"
        )
    if schema is None:
        schema_file = data_root / "schema.json"
        if schema_file.exists():
            schema = _schema_from_dict(json.loads(schema_file.read_text()))
        else:
            schema = DEFAULT_SCHEMA

    dataset = load_dataset(
        data_root, schema, labels, max_missing_rate=config.max_missing_rate
    )
    sdir = samples_dir(work)
    sdir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, sample in enumerate(dataset.samples):
        resampled = resample_cubic(sample, config.target_len)
        fname = f"sample_{i:05d}.npz"
        np.savez_compressed(
            sdir / fname,
            values=resampled.values.astype(np.float32),
            mask=resampled.missing_mask,
        )
        records.append(
            {
                "flight_id": sample.flight_id,
                "file": fname,
                "ad_label": sample.ad_label,
                "fc_label": sample.fc_label,
                "class_name": sample.class_name or "",
                "source_id": sample.source_id,
            }
        )

    index = {
        "version": INDEX_VERSION,
        "target_len": config.target_len,
        "seed": config.seed,
        "config_hash": config.config_hash(),
        "class_names": list(dataset.class_names),
        "schema": _schema_to_dict(schema),
        "ingest": dataclasses.asdict(dataset.ingest) if dataset.ingest else None,
        "samples": records,
    }
    index_path(work).write_text(json.dumps(index, indent=1))
    config.to_yaml(work / "config.yaml")

    summary = {
        "n_samples": len(records),
        "n_healthy": sum(1 for r in records if r["ad_label"] == HEALTHY),
        "n_anomalous": sum(1 for r in records if r["ad_label"] == ANOMALOUS),
        "class_names": list(dataset.class_names),
        "target_len": config.target_len,
        "excluded_missing": dataset.ingest.excluded_missing if dataset.ingest else 0,
        "skipped_unreadable": dataset.ingest.skipped_unreadable if dataset.ingest else 0,
        "config_hash": config.config_hash(),
    }
    (work / "manifest.json").write_text(json.dumps(summary, indent=1))
    return summary


def synth_to_csv(spec: SynthSpec, out_dir: str | Path) -> tuple[Path, int]:
    """Generate a synthetic fleet and write it as CSVs + manifest + schema."""
    dataset = synth_generate(spec)
    out_dir = Path(out_dir)
    manifest = write_dataset_csv(dataset, out_dir)
    (out_dir / "schema.json").write_text(json.dumps(_schema_to_dict(dataset.schema), indent=1))
    return manifest, len(dataset)


def make_folds(work: str | Path, config: RunConfig) -> FoldPlan:
    store = ProcessedStore(work)
    plan = stratified_kfold(store.dataset(), k=config.folds, seed=config.seed)
    plan.save_text(folds_path(work))
    return plan


def load_fold_plan(work: str | Path) -> FoldPlan:
    path = folds_path(work)
    if not path.exists():
        raise MissingArtifactError("fold plan", path, "fold")
    return FoldPlan.load_text(path)


# ---------------------------------------------------------------------------
# Per-fold data with leakage-safe statistics
# ---------------------------------------------------------------------------

def fold_norm_stats(
    work: str | Path,
    fold: int,
    store: ProcessedStore | None = None,
    plan: FoldPlan | None = None,
) -> NormStats:
    """Per-fold z-score statistics, cached; fitted from training files only.

    The fitting pass records every file it reads and persists the list next to
    the stats, so the train-only guarantee is auditable after the fact.
    """
    path = fold_stats_path(work, fold)
    if path.exists():
        return NormStats.from_json(path)
    store = store if store is not None else ProcessedStore(work)
    plan = plan if plan is not None else load_fold_plan(work)
    train_ids = plan.train_ids(fold)
    touched: list[str] = []
    previous_hook = store.on_read

    def _audit(fid: str) -> None:
        touched.append(fid)
        if previous_hook is not None:
            previous_hook(fid)

    store.on_read = _audit
    try:
        samples = [store.load_sample(fid) for fid in train_ids]
    finally:
        store.on_read = previous_hook
    stats = fit_norm_stats(samples)
    outside = sorted(set(touched) - set(train_ids))
    if outside:  # structurally impossible; kept as a tripwire
        raise RuntimeError(f"statistics fitting read non-training files: {outside[:5]}")
    path.parent.mkdir(parents=True, exist_ok=True)
    stats.to_json(path)
    (path.parent / "fitted_from.json").write_text(
        json.dumps({"fold": fold, "files_read": sorted(touched)}, indent=1)
    )
    return stats


def fold_datasets(
    work: str | Path, fold: int, normalized: bool = True
) -> tuple[LabeledDataset, LabeledDataset, NormStats]:
    """(train, test, stats) for one fold; stats always fitted on train only."""
    store = ProcessedStore(work)
    plan = load_fold_plan(work)
    stats = fold_norm_stats(work, fold, store=store, plan=plan)
    train = store.load_many(plan.train_ids(fold))
    test = store.load_many(plan.test_ids(fold))
    if normalized:
        train, _ = normalize(train, stats, mode="apply")
        test, _ = normalize(test, stats, mode="apply")
    return train, test, stats


# ---------------------------------------------------------------------------
# Training / diagnosis / evaluation
# ---------------------------------------------------------------------------

def build_stage_model(
    config: RunConfig, stage: str, n_channels: int, n_fault_classes: int, seed: int
) -> torch.nn.Module:
    if stage == "ad":
        model = ConvTokMHSA(config.health_model_config(n_channels))
    elif stage == "fc":
        if n_fault_classes < 2:
            raise ValueError(f"fault stage needs >= 2 classes, dataset has {n_fault_classes}")
        model = MMKNet(config.fault_model_config(n_channels, n_fault_classes))
    else:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return init_parameters(model, seed)


def train_fold_stage(
    work: str | Path,
    stage: str,
    fold: int,
    config: RunConfig,
    seed: int | None = None,
    out_dir: str | Path | None = None,
) -> TrainReport:
    """Train one cascade stage for one fold; leaves best/last checkpoints."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    train, _test, _stats = fold_datasets(work, fold)
    if stage == "fc":
        data = anomalous_subset(train)
    else:
        data = train
    seed = seed if seed is not None else stage_seed(config.seed, fold, stage)
    model = build_stage_model(
        config, stage, train.schema.n_channels, len(train.class_names), seed
    )
    out = Path(out_dir) if out_dir is not None else ckpt_dir(work, fold, stage)
    report = train_stage(
        model,
        data,
        config.train_config(stage, seed),
        out_dir=out,
        log_path=out / "train_log.jsonl",
    )
    report.to_json(out / "train_report.json")
    return report


def _stage_ckpt(work: str | Path, fold: int, stage: str, root: str | Path | None = None) -> Path:
    base = Path(root) if root is not None else ckpt_dir(work, fold, stage)
    return base / "best.ckpt"


def load_stage_model(
    work: str | Path, fold: int, stage: str, ckpt_root: str | Path | None = None
) -> torch.nn.Module:
    path = _stage_ckpt(work, fold, stage, ckpt_root)
    if not path.exists():
        raise MissingArtifactError(
            f"{stage} checkpoint for fold {fold}",
            path,
            f"train --stage {stage} --fold {fold}",
        )
    expected = "convtok" if stage == "ad" else "mmk"
    model = load_checkpoint(path, expected_kind=expected)
    model.eval()
    return model


def _report_from_json(path: Path) -> SimpleNamespace:
    return SimpleNamespace(**json.loads(path.read_text()))


def stage_artifacts_exist(work: str | Path, fold: int, stage: str) -> bool:
    base = ckpt_dir(work, fold, stage)
    return (base / "best.ckpt").exists() and (base / "train_report.json").exists()


def run_diagnosis(
    work: str | Path,
    fold: int,
    ckpt_root_ad: str | Path | None = None,
    ckpt_root_fc: str | Path | None = None,
    out_path: str | Path | None = None,
) -> Path:
    """Route every test flight of a fold through the cascade; write JSONL."""
    health = load_stage_model(work, fold, "ad", ckpt_root_ad)
    fault = load_stage_model(work, fold, "fc", ckpt_root_fc)
    _train, test, _stats = fold_datasets(work, fold)
    outputs = batch_diagnose(test.samples, health, fault)
    path = Path(out_path) if out_path is not None else reports_dir(work, fold) / "diagnosis.jsonl"
    write_diagnosis_jsonl(path, test.samples, outputs, test.class_names)
    return path


def evaluate_fold(work: str | Path, fold: int, config: RunConfig) -> dict:
    """Score one fold's diagnosis records; write metrics, tables, figures."""
    diag_path = reports_dir(work, fold) / "diagnosis.jsonl"
    if not diag_path.exists():
        raise MissingArtifactError(
            f"diagnosis records for fold {fold}", diag_path, f"diagnose --fold {fold}"
        )
    records = read_diagnosis_jsonl(diag_path)
    store = ProcessedStore(work)
    diag_names = ["healthy", *store.class_names]

    y_true_ad, y_pred_ad, y_true_diag, y_pred_diag = [], [], [], []
    for rec in records:
        sample = store.load_sample(rec["flight_id"])
        y_true_ad.append(sample.ad_label)
        y_pred_ad.append(ANOMALOUS if rec["path"] == "anomalous" else HEALTHY)
        y_true_diag.append(sample.diagnosis_label)
        y_pred_diag.append(int(rec["predicted_index"]))

    cm_ad = ConfusionMatrix.from_predictions(y_true_ad, y_pred_ad, ["healthy", "anomalous"])
    cm_diag = ConfusionMatrix.from_predictions(y_true_diag, y_pred_diag, diag_names)
    rep_ad = classification_metrics(cm_ad, task="ad")
    rep_diag = classification_metrics(
        cm_diag,
        task="diagnosis",
        alpha_p=config.penalty.missed_anomaly_weight,
        beta_p=config.penalty.false_alarm_weight,
    )

    out = reports_dir(work, fold)
    out.mkdir(parents=True, exist_ok=True)
    cm_ad.to_csv(out / "confusion_ad.csv")
    cm_diag.to_csv(out / "confusion_diagnosis.csv")
    plotting.render_confusion_matrix(
        cm_ad.counts, cm_ad.class_names, out / "confusion_ad.png", title=f"fold {fold}: screening"
    )
    plotting.render_confusion_matrix(
        cm_diag.counts,
        cm_diag.class_names,
        out / "confusion_diagnosis.png",
        title=f"fold {fold}: diagnosis",
    )
    plotting.render_per_class_bars(
        rep_diag.per_class, out / "per_class_diagnosis.png", title=f"fold {fold}: per class"
    )

    payload = {
        "fold": fold,
        "n_test": len(records),
        "ad": dataclasses.asdict(rep_ad),
        "diagnosis": dataclasses.asdict(rep_diag),
    }
    (out / "metrics.json").write_text(json.dumps(payload, indent=1))
    return payload


# ---------------------------------------------------------------------------
# Cross-validation / stability / explanation
# ---------------------------------------------------------------------------

def _train_or_reuse(
    work: str | Path, stage: str, fold: int, config: RunConfig, force: bool
) -> TrainReport | SimpleNamespace:
    if not force and stage_artifacts_exist(work, fold, stage):
        return _report_from_json(ckpt_dir(work, fold, stage) / "train_report.json")
    return train_fold_stage(work, stage, fold, config)


def run_cv(
    work: str | Path,
    config: RunConfig,
    force: bool = False,
    time_inference: bool = True,
) -> dict:
    """Full k-fold pass: train both stages, diagnose, evaluate, aggregate."""
    store = ProcessedStore(work)
    plan = load_fold_plan(work)
    fold_payloads: list[dict] = []
    timings: list[dict] = []
    for fold in range(plan.k):
        rep_ad = _train_or_reuse(work, "ad", fold, config, force)
        rep_fc = _train_or_reuse(work, "fc", fold, config, force)
        run_diagnosis(work, fold)
        payload = evaluate_fold(work, fold, config)
        timing = lmsd_timing(rep_ad, rep_fc)
        payload["timing"] = timing
        timings.append(timing)
        fold_payloads.append(payload)

    def collect(path_keys: tuple[str, ...]) -> list[float]:
        vals = []
        for p in fold_payloads:
            node = p
            for key in path_keys:
                node = node[key]
            vals.append(float(node))
        return vals

    tracked = {
        "diagnosis_acc": ("diagnosis", "acc"),
        "diagnosis_macro_f1": ("diagnosis", "macro_f1"),
        "mcwpm": ("diagnosis", "mcwpm"),
        "ad_acc": ("ad", "acc"),
        "ad_fnr": ("ad", "fnr"),
    }
    aggregate = {}
    for name, keys in tracked.items():
        vals = collect(keys)
        aggregate[name] = {
            "mean": float(np.mean(vals)),
            "std": float(np.std(vals)),
            "per_fold": vals,
        }

    model_paths = [_stage_ckpt(work, 0, "ad"), _stage_ckpt(work, 0, "fc")]
    inference_fn = None
    if time_inference:
        health = load_stage_model(work, 0, "ad")
        fault = load_stage_model(work, 0, "fc")
        _train, test, _stats = fold_datasets(work, 0)
        batch = [test.samples[i % len(test.samples)] for i in range(32)]

        def inference_fn() -> None:
            batch_diagnose(batch, health, fault)

    reports = [
        r for fold in range(plan.k) for r in (
            _report_from_json(ckpt_dir(work, fold, "ad") / "train_report.json"),
            _report_from_json(ckpt_dir(work, fold, "fc") / "train_report.json"),
        )
    ]
    efficiency = efficiency_metrics(reports, model_paths, inference_fn=inference_fn)

    summary = {
        "k": plan.k,
        "n_flights": len(store),
        "class_names": list(store.class_names),
        "folds": fold_payloads,
        "aggregate": aggregate,
        "timing_per_fold": timings,
        "efficiency": efficiency,
    }
    out = reports_dir(work)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cv_summary.json").write_text(json.dumps(summary, indent=1))
    plotting.render_cv_summary(
        {k: {"mean": v["mean"], "std": v["std"]} for k, v in aggregate.items()},
        out / "cv_summary.png",
        title=f"{plan.k}-fold cross-validation",
    )
    return summary


def run_stability(
    work: str | Path,
    config: RunConfig,
    rounds: int = 10,
    fold: int = 0,
) -> dict:
    """Retrain one fold under shifted seeds; bucket flights by consistency."""
    if rounds < 2:
        raise ValueError("need at least 2 rounds")
    store = ProcessedStore(work)
    plan = load_fold_plan(work)
    test_ids = plan.test_ids(fold)
    truth = {fid: store.load_sample(fid).diagnosis_label for fid in test_ids}

    correct: dict[str, list[int]] = {fid: [] for fid in test_ids}
    for r in range(rounds):
        round_cfg = dataclasses.replace(config, seed=config.seed + r)
        round_root = Path(work) / "checkpoints" / "stability" / f"round{r}"
        for stage in STAGES:
            stage_dir = round_root / stage
            if not (stage_dir / "best.ckpt").exists():
                train_fold_stage(
                    work,
                    stage,
                    fold,
                    round_cfg,
                    seed=stage_seed(round_cfg.seed, fold, stage),
                    out_dir=stage_dir,
                )
        diag_path = run_diagnosis(
            work,
            fold,
            ckpt_root_ad=round_root / "ad",
            ckpt_root_fc=round_root / "fc",
            out_path=round_root / "diagnosis.jsonl",
        )
        for rec in read_diagnosis_jsonl(diag_path):
            fid = rec["flight_id"]
            correct[fid].append(int(int(rec["predicted_index"]) == truth[fid]))

    categories, counts = stability_analysis(correct, rounds=rounds)
    payload = {
        "rounds": rounds,
        "fold": fold,
        "counts": counts,
        "per_flight": categories,
    }
    out = reports_dir(work)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stability.json").write_text(json.dumps(payload, indent=1))
    plotting.render_stability(
        counts, out / "stability.png", title=f"fold {fold}, {rounds} training rounds"
    )
    return payload


# ---------------------------------------------------------------------------
# Keyness explanation
# ---------------------------------------------------------------------------

def _features_of(model: torch.nn.Module, samples: Sequence[FlightSample]) -> np.ndarray:
    x = torch.as_tensor(np.stack([s.values for s in samples]).astype(np.float32, copy=False))
    with torch.no_grad():
        feats = model.features(x)
    return feats.double().numpy()


def _distilled_encoder(
    work: str | Path,
    fold: int,
    stage: str,
    config: RunConfig,
    teacher: torch.nn.Module,
    train: LabeledDataset,
):
    """Load the cached keyness encoder for (fold, stage), or distill it."""
    cache = ckpt_dir(work, fold, stage) / "kel.ckpt"
    teacher_sig = param_hash(teacher)
    if cache.exists():
        extra = checkpoint_extra(cache)
        if extra.get("teacher_hash") == teacher_sig:
            encoder = load_checkpoint(cache, expected_kind="kel")
            encoder.eval()
            return encoder, extra
        warnings.warn(
            f"cached keyness encoder at {cache} was distilled from a different "
            "teacher; re-distilling",
            stacklevel=2,
        )
    student_backbone = load_checkpoint(
        _stage_ckpt(work, fold, stage), expected_kind=teacher.kind
    )
    student_backbone.eval()
    data = anomalous_subset(train) if stage == "fc" else train
    kel_cfg = config.kel_config(seed=stage_seed(config.seed, fold, "kel"))
    encoder, report = distill_train(teacher, student_backbone, kel_cfg, data, stage)
    extra = {
        "teacher_hash": teacher_sig,
        "stage": stage,
        "fold": fold,
        "fidelity": report.fidelity,
        "epochs": report.epochs,
    }
    save_checkpoint(encoder, cache, extra=extra)
    encoder.eval()
    return encoder, extra


def explain_flight(
    work: str | Path,
    stage: str,
    flight_id: str,
    config: RunConfig,
    channels: Sequence[str] | None = None,
    baseline_id: str | None = None,
    k_baselines: int = 10,
) -> dict:
    """Produce the keyness figure + sidecar for one flight and one stage.

    Uses the fold whose held-out set contains the flight, so the explaining
    models never saw it during training; falls back to fold 0 (with a
    warning) for flights outside the fold plan.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    store = ProcessedStore(work)
    plan = load_fold_plan(work)
    if flight_id in plan.assignments:
        fold = plan.assignments[flight_id]
    else:
        fold = 0
        warnings.warn(
            f"flight {flight_id!r} is not in the fold plan; explaining with fold 0 models",
            stacklevel=2,
        )
    teacher = load_stage_model(work, fold, stage)
    train, _test, stats = fold_datasets(work, fold)
    sample_raw = store.load_sample(flight_id)
    sample, _ = normalize(sample_raw, stats, mode="apply")

    encoder, distill_info = _distilled_encoder(work, fold, stage, config, teacher, train)

    x = torch.as_tensor(sample.values.astype(np.float32, copy=False))
    with torch.no_grad():
        w_k, _x_kw = kel_forward(x, encoder)
    w_k = w_k.squeeze(0).double().numpy()

    healthy_train = [s for s in train.samples if s.ad_label == HEALTHY]
    if healthy_train:
        pool_feats = _features_of(teacher, healthy_train)
        pool = {s.flight_id: pool_feats[i] for i, s in enumerate(healthy_train)}
        query = _features_of(teacher, [sample])[0]
        baselines = retrieve_baselines(query, pool, k=k_baselines)
    else:
        warnings.warn("no healthy flights in the training fold; skipping retrieval", stacklevel=2)
        baselines = []

    record = KeynessRecord(
        flight_id=flight_id,
        stage=stage,
        w_k=w_k,
        stride=config.keyness.stride,
        length=sample.length,
        n_channels=sample.n_channels,
        baselines=baselines,
    )

    baseline_sample = None
    chosen_baseline = baseline_id if baseline_id is not None else (
        baselines[0][0] if baselines else None
    )
    if chosen_baseline is not None:
        baseline_sample, _ = normalize(store.load_sample(chosen_baseline), stats, mode="apply")

    out_dir = explain_dir(work)
    out_dir.mkdir(parents=True, exist_ok=True)
    png_path = out_dir / f"{_safe_name(flight_id)}_{stage}.png"
    png, sidecar = export_heatmap(
        record, sample, store.schema, png_path, baseline=baseline_sample, channels=channels
    )
    return {
        "flight_id": flight_id,
        "stage": stage,
        "fold": fold,
        "figure": str(png),
        "sidecar": str(sidecar),
        "baseline": chosen_baseline,
        "baselines": baselines,
        "distillation": distill_info,
    }
