"""Decoupled two-stage training with early stopping and timing accounting.

Each stage is its own optimization problem over its own parameters — the
health analyzer sees the full training set, the fault analyzer sees only the
anomalous subset — so no gradient can cross the routing boundary by
construction.  Both stages use an internal stratified train/validation split
derived from the stage seed, patience-based early stopping on validation
loss, and per-epoch best/last checkpointing.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbones import load_state_into, save_checkpoint
from .dataio import replicate_augment
from .schema import ANOMALOUS, HEALTHY, FlightSample, LabeledDataset

log = logging.getLogger(__name__)

STAGES = ("ad", "fc")


@dataclass
class TrainConfig:
    stage: str
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    early_stop_patience: int = 3
    seed: int = 0
    internal_split: float = 0.9
    augmentation: str = "off"
    k_da: int = 3

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if not 0.0 < self.internal_split < 1.0:
            raise ValueError("internal_split must lie in (0, 1)")
        if self.augmentation not in ("off", "replication"):
            raise ValueError(f"unknown augmentation {self.augmentation!r}")
        if self.stage == "ad" and self.augmentation != "off":
            raise ValueError("the anomaly-detection stage trains without augmentation")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs, early_stop_patience must be >= 1")


@dataclass
class TrainReport:
    stage: str
    epochs_run: int
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    epoch_times: list[float]
    total_time: float
    checkpoint_path: str
    last_checkpoint_path: str
    samples_consumed: dict[str, int]
    train_size: int
    val_size: int

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=1, default=str))


class EarlyStopper:
    """Stop after `patience` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.fails = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch (1-based); returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.fails = 0
            return False
        self.fails += 1
        return self.fails >= self.patience

    @property
    def improved(self) -> bool:
        return self.fails == 0


def _stage_label(sample: FlightSample, stage: str) -> int:
    if stage == "ad":
        if sample.ad_label is None:
            raise ValueError(f"flight {sample.flight_id!r} lacks a health label")
        return sample.ad_label
    if sample.ad_label != ANOMALOUS or sample.fc_label is None:
        raise ValueError(
            f"flight {sample.flight_id!r}: the fault stage trains on labeled anomalous "
            "samples only"
        )
    return sample.fc_label - 1


def _grouped_split(
    samples: Sequence[FlightSample], stage: str, split: float, seed: int
) -> tuple[list[FlightSample], list[FlightSample]]:
    """Stratified 9:1-style split over source flights.

    Groups (a physical flight plus any replicas) never straddle the boundary,
    and only original samples count for validation — replicas may not leak
    into the held-out side.
    """
    groups: dict[str, list[FlightSample]] = {}
    for s in samples:
        groups.setdefault(s.source_id, []).append(s)
    by_label: dict[int, list[str]] = {}
    for src, members in groups.items():
        labels = {_stage_label(m, stage) for m in members}
        if len(labels) != 1:
            raise ValueError(f"replica group {src!r} mixes labels {sorted(labels)}")
        by_label.setdefault(labels.pop(), []).append(src)

    rng = np.random.default_rng(seed)
    train: list[FlightSample] = []
    val: list[FlightSample] = []
    for label in sorted(by_label):
        srcs = sorted(by_label[label])
        rng.shuffle(srcs)
        n_val = int(len(srcs) * (1.0 - split))
        if n_val == 0 and len(srcs) >= 2:
            n_val = 1
        for src in srcs[:n_val]:
            val.extend(m for m in groups[src] if m.flight_id == m.source_id)
        for src in srcs[n_val:]:
            train.extend(groups[src])
    if not train:
        raise ValueError("internal training split is empty")
    if not val:
        raise ValueError("internal validation split is empty")
    return train, val


def _to_tensors(samples: Sequence[FlightSample], stage: str) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.as_tensor(
        np.stack([s.values for s in samples]).astype(np.float32, copy=False)
    )
    y = torch.as_tensor([_stage_label(s, stage) for s in samples], dtype=torch.long)
    return x, y


@torch.no_grad()
def evaluate_split(
    model: nn.Module, x: torch.Tensor, y: torch.Tensor, batch_size: int
) -> tuple[float, float]:
    """(mean loss, accuracy) over a fixed split, evaluation mode."""
    was_training = model.training
    model.eval()
    loss_fn = nn.CrossEntropyLoss(reduction="sum")
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            yb = y[start : start + batch_size]
            logits = model(xb)
            total_loss += float(loss_fn(logits, yb))
            correct += int((logits.argmax(dim=1) == yb).sum())
    if was_training:
        model.train()
    return total_loss / len(x), correct / len(x)


def train_stage(
    model: nn.Module,
    data: LabeledDataset,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> TrainReport:
    """Train one stage to convergence under early stopping.

    The model is left holding the best-validation-loss parameters.  When
    ``cfg.augmentation == "replication"`` and the data contains no replicas
    yet, replication augmentation is applied to the training side of the
    internal split only, so copies of one flight can never straddle the
    validation boundary.
    """
    if not data.samples:
        raise ValueError("empty training dataset")
    if cfg.stage == "fc":
        healthy_in = [s.flight_id for s in data.samples if s.ad_label == HEALTHY]
        if healthy_in:
            raise ValueError(
                f"fault stage received healthy flights (e.g. {healthy_in[:3]}); "
                "pass the anomalous subset"
            )
        if model.cfg.head_dim != data.n_fault_classes:
            raise ValueError(
                f"fault head is {model.cfg.head_dim}-way but dataset has "
                f"{data.n_fault_classes} fault classes"
            )
    else:
        if model.cfg.head_dim != 2:
            raise ValueError("health stage needs a 2-way head")

    out_dir = Path(out_dir) if out_dir is not None else Path("lmsd_checkpoints") / cfg.stage
    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "best.ckpt"
    last_path = out_dir / "last.ckpt"

    train_samples, val_samples = _grouped_split(
        data.samples, cfg.stage, cfg.internal_split, cfg.seed
    )
    if cfg.augmentation == "replication":
        has_replicas = any(s.flight_id != s.source_id for s in data.samples)
        if has_replicas:
            log.warning("input already contains replicas; skipping re-augmentation")
        else:
            train_samples = replicate_augment(
                LabeledDataset(train_samples, data.schema, data.class_names), cfg.k_da
            ).samples

    x_train, y_train = _to_tensors(train_samples, cfg.stage)
    x_val, y_val = _to_tensors(val_samples, cfg.stage)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    loss_fn = nn.CrossEntropyLoss()
    stopper = EarlyStopper(cfg.early_stop_patience)

    consumed = {"healthy": 0, "anomalous": 0}
    ad_labels = np.array([s.ad_label for s in train_samples])
    history: list[dict] = []
    epoch_times: list[float] = []
    # truncate: each run owns its log, a rerun must not append to a stale one
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            model.train()
            order = rng.permutation(len(x_train))
            running = 0.0
            n_batches = 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = order[start : start + cfg.batch_size]
                xb = x_train[idx]
                yb = y_train[idx]
                optimizer.zero_grad()
                loss = loss_fn(model(xb), yb)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite training loss at epoch {epoch}, batch {b} "
                        f"(stage={cfg.stage}, lr={cfg.lr})"
                    )
                loss.backward()
                optimizer.step()
                running += float(loss.detach())
                n_batches += 1
                consumed["healthy"] += int((ad_labels[idx] == HEALTHY).sum())
                consumed["anomalous"] += int((ad_labels[idx] == ANOMALOUS).sum())
            train_loss = running / n_batches
            val_loss, val_acc = evaluate_split(model, x_val, y_val, cfg.batch_size)
            seconds = time.perf_counter() - t0
            epoch_times.append(seconds)
            entry = {
                "stage": cfg.stage,
                "epoch": epoch,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "val_acc": val_acc,
                "seconds": seconds,
            }
            history.append(entry)
            if log_fh is not None:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()

            stop = stopper.update(epoch, val_loss)
            if stopper.improved:
                save_checkpoint(
                    model, best_path, extra={"epoch": epoch, "val_loss": val_loss, "stage": cfg.stage}
                )
            save_checkpoint(
                model, last_path, extra={"epoch": epoch, "val_loss": val_loss, "stage": cfg.stage}
            )
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    load_state_into(model, best_path)
    model.eval()
    return TrainReport(
        stage=cfg.stage,
        epochs_run=len(history),
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best,
        epoch_times=epoch_times,
        total_time=float(sum(epoch_times)),
        checkpoint_path=str(best_path),
        last_checkpoint_path=str(last_path),
        samples_consumed=consumed,
        train_size=len(train_samples),
        val_size=len(val_samples),
    )


def lmsd_timing(report_ad: TrainReport | None, report_fc: TrainReport | None) -> dict:
    """Combined timing: TTT adds the stages, ET divides by total epochs."""
    if report_ad is None or report_fc is None:
        raise ValueError("both stage reports are required")
    total_epochs = report_ad.epochs_run + report_fc.epochs_run
    if total_epochs == 0:
        raise ValueError("no training epochs recorded")
    ttt = report_ad.total_time + report_fc.total_time
    return {"TTT": ttt, "ET": ttt / total_epochs}
