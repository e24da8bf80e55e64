"""Two-stage routing and assembly of the final diagnosis distribution.

A length-2 health logit vector either accepts the flight as healthy (strictly
larger healthy logit) or routes it — ties included — to the fault classifier.
The combined (N+1)-way distribution is built directly per path: the healthy
path is a one-hot at index 0, the anomalous path is exactly zero at index 0
with the fault softmax on indices 1..N.  This equals a softmax over logits
with -inf sentinels on the untaken path, without any underflow ambiguity; the
sentinel logit vector is still materialized for audit output.

The fault model is invoked lazily: healthy flights never pay its cost.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbones import param_hash  # noqa: F401  (re-exported convenience)
from .schema import FlightSample

PATH_HEALTHY = "healthy"
PATH_ANOMALOUS = "anomalous"


@dataclass(frozen=True)
class RoutingDecision:
    path: str
    z_h: float
    z_a: float


@dataclass
class DiagnosisOutput:
    z_ad: np.ndarray
    routing: RoutingDecision
    z_fc: np.ndarray | None
    z_d: np.ndarray
    p_d: np.ndarray
    p_ad: np.ndarray

    @property
    def predicted_index(self) -> int:
        return int(np.argmax(self.p_d))

    def to_record(self, flight_id: str, class_names: Sequence[str]) -> dict:
        """One JSON-serializable diagnosis line for downstream metrics."""
        idx = self.predicted_index
        name = "healthy" if idx == 0 else class_names[idx - 1]
        return {
            "flight_id": flight_id,
            "z_AD": [float(v) for v in self.z_ad],
            "path": self.routing.path,
            "z_FC": None if self.z_fc is None else [float(v) for v in self.z_fc],
            "p_D": [float(v) for v in self.p_d],
            "predicted_index": idx,
            "predicted_name": name,
        }


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    e = np.exp(shifted)
    return e / e.sum()


def route_and_assemble(
    z_ad: np.ndarray,
    fc_provider: Callable[[object], np.ndarray],
    x: object,
    n_fault_classes: int,
    flight_id: str = "?",
    anomalous_threshold: float | None = None,
) -> DiagnosisOutput:
    """Route one sample on its health logits and assemble the (N+1)-way output.

    ``fc_provider`` is only called on the anomalous path.  The default routing
    rule is the logit argmax with ties going anomalous; passing
    ``anomalous_threshold`` switches to routing anomalous when the anomalous
    probability reaches the threshold (an optional extension, off by default).
    """
    z_ad = np.asarray(z_ad, dtype=np.float64).reshape(-1)
    if z_ad.shape != (2,):
        raise ValueError(f"flight {flight_id}: z_AD must have exactly 2 entries")
    if not np.isfinite(z_ad).all():
        raise ValueError(f"flight {flight_id}: non-finite health logits {z_ad}")
    if n_fault_classes < 1:
        raise ValueError("need at least one fault class")

    z_h, z_a = float(z_ad[0]), float(z_ad[1])
    p_ad = _softmax(z_ad)
    if anomalous_threshold is None:
        healthy = z_h > z_a  # tie routes anomalous
    else:
        healthy = p_ad[1] < anomalous_threshold

    n_out = n_fault_classes + 1
    if healthy:
        routing = RoutingDecision(PATH_HEALTHY, z_h, z_a)
        p_d = np.zeros(n_out)
        p_d[0] = 1.0
        z_d = np.full(n_out, -np.inf)
        z_d[0] = z_h
        return DiagnosisOutput(z_ad, routing, None, z_d, p_d, p_ad)

    routing = RoutingDecision(PATH_ANOMALOUS, z_h, z_a)
    try:
        z_fc = np.asarray(fc_provider(x), dtype=np.float64).reshape(-1)
    except Exception as exc:
        raise RuntimeError(f"fault-stage failure on flight {flight_id}: {exc}") from exc
    if z_fc.shape != (n_fault_classes,):
        raise ValueError(
            f"flight {flight_id}: fault logits have shape {z_fc.shape}, "
            f"expected ({n_fault_classes},)"
        )
    if not np.isfinite(z_fc).all():
        raise ValueError(f"flight {flight_id}: non-finite fault logits")
    p_d = np.zeros(n_out)
    p_d[1:] = _softmax(z_fc)
    z_d = np.concatenate([[-np.inf], z_fc])
    return DiagnosisOutput(z_ad, routing, z_fc, z_d, p_d, p_ad)


def _model_logits(model: torch.nn.Module, x: np.ndarray) -> np.ndarray:
    tensor = torch.as_tensor(np.asarray(x), dtype=next(model.parameters()).dtype)
    if tensor.ndim == 2:
        tensor = tensor[None]
    with torch.no_grad():
        out = model(tensor)
    return out[0].cpu().numpy().astype(np.float64)


def diagnose(
    x: np.ndarray,
    health_model: torch.nn.Module,
    fault_model: torch.nn.Module,
    flight_id: str = "?",
    anomalous_threshold: float | None = None,
) -> DiagnosisOutput:
    """Run the frozen two-stage cascade on one preprocessed (L, D) sample."""
    for name, model in (("health", health_model), ("fault", fault_model)):
        if model.training:
            raise ValueError(f"{name} model must be in evaluation mode")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"flight {flight_id}: expected an (L, D) sample")
    d_h = health_model.cfg.in_channels
    d_f = fault_model.cfg.in_channels
    if x.shape[1] != d_h or x.shape[1] != d_f:
        raise ValueError(
            f"flight {flight_id}: sample has {x.shape[1]} channels; "
            f"health model expects {d_h}, fault model expects {d_f}"
        )
    n_fault = fault_model.cfg.head_dim
    z_ad = _model_logits(health_model, x)
    return route_and_assemble(
        z_ad,
        lambda s: _model_logits(fault_model, s),
        x,
        n_fault_classes=n_fault,
        flight_id=flight_id,
        anomalous_threshold=anomalous_threshold,
    )


def batch_diagnose(
    samples: Sequence[FlightSample],
    health_model: torch.nn.Module,
    fault_model: torch.nn.Module,
    anomalous_threshold: float | None = None,
) -> list[DiagnosisOutput]:
    """Diagnose a batch; defined as the elementwise loop so batch == loop exactly."""
    return [
        diagnose(
            s.values,
            health_model,
            fault_model,
            flight_id=s.flight_id,
            anomalous_threshold=anomalous_threshold,
        )
        for s in samples
    ]


def write_diagnosis_jsonl(
    path: str | Path,
    samples: Sequence[FlightSample],
    outputs: Sequence[DiagnosisOutput],
    class_names: Sequence[str],
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for s, out in zip(samples, outputs):
            fh.write(json.dumps(out.to_record(s.flight_id, class_names)) + "\n")
    return path


def read_diagnosis_jsonl(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().strip().splitlines()
    return [json.loads(line) for line in lines if line.strip()]
