"""Evaluation metrics: classification, safety weighting, efficiency, stability.

The safety-weighted score divides correct decisions by correct decisions plus
penalized boundary errors: missed faults (fault predicted healthy) carry
weight alpha and false alarms (healthy predicted fault) carry weight beta,
with alpha > beta encoding safety-over-economy.  Cross-fault confusions do
not enter the denominator — that is the metric's literal definition, kept as
is (see mcwpm docstring).
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .keyness import cosine_similarity


@dataclass
class ConfusionMatrix:
    """Square count matrix; rows are true classes, columns predictions.

    Index 0 is the healthy category for diagnosis/AD tasks.
    """

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        if len(self.class_names) != self.counts.shape[0]:
            raise ValueError("class_names length must match matrix size")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(
        cls,
        y_true: Sequence[int],
        y_pred: Sequence[int],
        class_names: Sequence[str],
    ) -> "ConfusionMatrix":
        n = len(class_names)
        counts = np.zeros((n, n), dtype=np.int64)
        for t, p in zip(y_true, y_pred, strict=True):
            counts[t, p] += 1
        return cls(counts, tuple(class_names))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = "true\\pred," + ",".join(self.class_names)
        lines = [header]
        for name, row in zip(self.class_names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        path.write_text("\n".join(lines) + "\n")
        return path


@dataclass
class MetricsReport:
    task: str
    acc: float
    macro_f1: float
    weighted_f1: float
    per_class: dict[str, dict[str, float]]
    fnr: float | None = None
    mcwpm: float | None = None
    efficiency: dict | None = None
    meta: dict = field(default_factory=dict)

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=1, default=str))
        return path


def _per_class_prf(cm: ConfusionMatrix) -> dict[str, dict[str, float]]:
    counts = cm.counts
    out: dict[str, dict[str, float]] = {}
    for i, name in enumerate(cm.class_names):
        tp = float(counts[i, i])
        support = float(counts[i, :].sum())
        predicted = float(counts[:, i].sum())
        precision = tp / predicted if predicted > 0 else 0.0
        recall = tp / support if support > 0 else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
        out[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": support,
            "predicted": predicted,
        }
    return out


def classification_metrics(
    cm: ConfusionMatrix,
    task: str,
    alpha_p: float = 2.5,
    beta_p: float = 1.0,
) -> MetricsReport:
    """Accuracy, macro/weighted F1, and task-specific safety figures.

    Macro-F1 averages per-class F1 over classes that appear (classes with
    zero support and zero predictions are excluded; zero-support classes that
    were predicted contribute 0).  Weighted-F1 weights by true support.  The
    false-negative rate is defined as 1 - anomalous recall so the two always
    sum to 1 exactly.
    """
    if task not in ("ad", "fc", "diagnosis"):
        raise ValueError(f"unknown task {task!r}")
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    if task == "ad" and cm.counts.shape != (2, 2):
        raise ValueError("the detection task uses a 2x2 matrix (healthy, anomalous)")

    counts = cm.counts
    acc = float(np.trace(counts)) / cm.total
    per_class = _per_class_prf(cm)

    f1_values = []
    weighted_sum = 0.0
    for name in cm.class_names:
        stats = per_class[name]
        if stats["support"] == 0 and stats["predicted"] == 0:
            continue
        f1_values.append(stats["f1"])
    macro_f1 = float(np.mean(f1_values)) if f1_values else 0.0
    total_support = sum(per_class[n]["support"] for n in cm.class_names)
    for name in cm.class_names:
        stats = per_class[name]
        weighted_sum += stats["f1"] * stats["support"] / total_support
    weighted_f1 = float(weighted_sum)

    fnr = None
    if task in ("ad", "diagnosis"):
        anomalous_total = float(counts[1:, :].sum())
        if anomalous_total > 0:
            missed = float(counts[1:, 0].sum())
            anomalous_recall = (anomalous_total - missed) / anomalous_total
            fnr = 1.0 - anomalous_recall
        else:
            fnr = 0.0

    score = mcwpm(cm, alpha_p, beta_p) if task == "diagnosis" else None
    return MetricsReport(
        task=task,
        acc=acc,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
        per_class=per_class,
        fnr=fnr,
        mcwpm=score,
    )


def mcwpm(cm: ConfusionMatrix, alpha_p: float = 2.5, beta_p: float = 1.0) -> float:
    """Safety-weighted score: trace / (trace + alpha*missed_faults + beta*false_alarms).

    ``missed_faults`` counts fault rows predicted healthy (column 0);
    ``false_alarms`` counts the healthy row predicted as any fault.  The trace
    includes healthy-correct decisions, making a perfect classifier score
    exactly 1.  Cross-fault confusions are absent from the denominator by
    definition.  An all-zero denominator (empty evaluation, guarded upstream)
    is defined as 1.0.
    """
    if alpha_p < 0 or beta_p < 0:
        raise ValueError("penalty weights must be non-negative")
    counts = cm.counts
    tp_sum = float(np.trace(counts))
    fn_health = float(counts[1:, 0].sum())
    fp_health = float(counts[0, 1:].sum())
    denom = tp_sum + alpha_p * fn_health + beta_p * fp_health
    if denom == 0.0:
        return 1.0
    return tp_sum / denom


def efficiency_metrics(
    train_reports: Sequence,
    model_paths: Sequence[str | Path],
    inference_fn: Callable[[], object] | None = None,
    warmup_iters: int = 2,
    timed_iters: int = 5,
) -> dict:
    """Timing and footprint figures.

    ET/TTT come from the training reports (summed over stages); IT32 is the
    median of ``timed_iters`` >= 5 timed calls of ``inference_fn`` — which
    must run one 32-sample batch — after ``warmup_iters`` discarded runs, with
    the coefficient of variation reported alongside; MSize sums the checkpoint
    bytes of every model file in the evaluated system.
    """
    import platform

    reports = [r for r in train_reports if r is not None]
    if not reports:
        raise ValueError("need at least one training report")
    total_epochs = sum(r.epochs_run for r in reports)
    if total_epochs == 0:
        raise ValueError("no training epochs recorded")
    ttt = float(sum(r.total_time for r in reports))

    msize = 0
    for path in model_paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint missing: {path}")
        msize += path.stat().st_size

    out = {
        "ET": ttt / total_epochs,
        "TTT": ttt,
        "MSize_bytes": int(msize),
        "MSize_MB": msize / 1e6,
        "hardware": f"{platform.machine()} {platform.processor()}".strip(),
    }
    if inference_fn is not None:
        if timed_iters < 5:
            raise ValueError("need at least 5 timed iterations")
        for _ in range(warmup_iters):
            inference_fn()
        times = []
        for _ in range(timed_iters):
            t0 = time.perf_counter()
            inference_fn()
            times.append(time.perf_counter() - t0)
        median = statistics.median(times)
        mean = statistics.fmean(times)
        cov = statistics.pstdev(times) / mean if mean > 0 else 0.0
        out["IT32"] = median
        out["IT32_cov"] = cov
    return out


STABILITY_CATEGORIES = (
    "always_correct",
    "generally_correct",
    "frequently_misclassified",
    "always_misclassified",
)


def stability_analysis(
    per_round_correctness: Mapping[str, Sequence[bool]], rounds: int = 10
) -> tuple[dict[str, str], dict[str, int]]:
    """Bin flights by how often repeated retrainings classify them correctly.

    correct in all rounds -> always_correct; in more than half but not all ->
    generally_correct; in none -> always_misclassified; anything else
    (including exactly half) -> frequently_misclassified.  Returns
    (per-flight category, category counts); the categories partition the
    flights.
    """
    categories: dict[str, str] = {}
    counts = {c: 0 for c in STABILITY_CATEGORIES}
    for fid, flags in per_round_correctness.items():
        flags = list(flags)
        if len(flags) != rounds:
            raise ValueError(
                f"flight {fid!r} has {len(flags)} rounds of results; expected {rounds}"
            )
        c = sum(bool(f) for f in flags)
        if c == rounds:
            cat = "always_correct"
        elif c == 0:
            cat = "always_misclassified"
        elif c > rounds / 2:
            cat = "generally_correct"
        else:
            cat = "frequently_misclassified"
        categories[fid] = cat
        counts[cat] += 1
    return categories, counts


def healthy_center_similarity(
    features: Mapping[str, np.ndarray],
    labels: Mapping[str, int],
    predictions: Mapping[str, int],
    centroid: np.ndarray | None = None,
) -> dict[str, dict[str, float] | None]:
    """Cosine-to-healthy-centroid statistics per decision group.

    Groups: true_healthy_correct (healthy, predicted healthy), false_negative
    (anomalous, predicted healthy), false_positive (healthy, predicted
    anomalous).  Labels/predictions are diagnosis indices (0 = healthy, any
    positive value = anomalous).  The centroid defaults to the mean feature of
    true-healthy flights in ``features``; pass the training-set centroid for
    protocol-faithful analysis.  Empty groups report None.
    """
    if centroid is None:
        healthy_vecs = [np.asarray(features[f]) for f in features if labels[f] == 0]
        if not healthy_vecs:
            raise ValueError("no healthy flights available to form a centroid")
        centroid = np.mean(healthy_vecs, axis=0)
    centroid = np.asarray(centroid, dtype=np.float64)

    groups: dict[str, list[float]] = {
        "true_healthy_correct": [],
        "false_negative": [],
        "false_positive": [],
    }
    for fid, vec in features.items():
        true_healthy = labels[fid] == 0
        pred_healthy = predictions[fid] == 0
        if true_healthy and pred_healthy:
            key = "true_healthy_correct"
        elif not true_healthy and pred_healthy:
            key = "false_negative"
        elif true_healthy and not pred_healthy:
            key = "false_positive"
        else:
            continue  # correctly detected anomalies are not part of the analysis
        groups[key].append(cosine_similarity(np.asarray(vec, dtype=np.float64), centroid))

    out: dict[str, dict[str, float] | None] = {}
    for key, sims in groups.items():
        if not sims:
            out[key] = None
            continue
        arr = np.asarray(sims)
        out[key] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(sims)}
    return out
