"""Keyness extraction: distillation-trained temporal importance weights.

A two-layer strided convolutional encoder maps an (L, D) input to one
pre-activation per temporal block of length s; sigmoid(ReLU(.)) pins every
keyness value into [0.5, 1), so no time segment can be fully suppressed.  The
encoder trains by distillation: the pretrained model is the frozen teacher,
the student is the encoder prepended to a frozen copy of the teacher, and the
loss is a temperature-softened KL between the two pooled feature
distributions plus cross-entropy on the student's logits against hard labels.
Only the encoder's parameters move.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import plotting
from .backbones import MODEL_REGISTRY, init_parameters, param_hash
from .schema import ChannelSchema, FlightSample, LabeledDataset
from .training import _grouped_split, _stage_label


@dataclass(frozen=True)
class KelArch:
    """Architecture of the keyness encoder; stride product fixes the block size."""

    in_channels: int
    hidden_channels: int = 16
    layer1_kernel: int = 8
    layer1_stride: int = 8
    layer2_kernel: int = 4
    layer2_stride: int = 4

    def __post_init__(self) -> None:
        for v in (
            self.in_channels,
            self.hidden_channels,
            self.layer1_kernel,
            self.layer1_stride,
            self.layer2_kernel,
            self.layer2_stride,
        ):
            if v < 1:
                raise ValueError("all architecture fields must be positive")

    @property
    def stride(self) -> int:
        return self.layer1_stride * self.layer2_stride


@dataclass(frozen=True)
class KelConfig:
    """Keyness encoder + distillation hyperparameters."""

    stride: int = 32
    temperature: float = 1.2
    hidden_channels: int = 16
    layer1_kernel: int = 8
    layer1_stride: int = 8
    layer2_kernel: int = 4
    layer2_stride: int = 4
    distill_epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    internal_split: float = 0.9

    def __post_init__(self) -> None:
        if self.layer1_stride * self.layer2_stride != self.stride:
            raise ValueError(
                f"layer strides {self.layer1_stride}*{self.layer2_stride} must "
                f"multiply to the temporal stride {self.stride}"
            )
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.distill_epochs < 1:
            raise ValueError("need at least one distillation epoch")

    def arch(self, in_channels: int) -> KelArch:
        return KelArch(
            in_channels=in_channels,
            hidden_channels=self.hidden_channels,
            layer1_kernel=self.layer1_kernel,
            layer1_stride=self.layer1_stride,
            layer2_kernel=self.layer2_kernel,
            layer2_stride=self.layer2_stride,
        )


def _pad_ceil(x: torch.Tensor, kernel: int, stride: int) -> torch.Tensor:
    """Right-pad the time axis so a strided conv emits ceil(L/stride) frames."""
    L = x.shape[-1]
    n_out = -(-L // stride)
    pad = max(0, (n_out - 1) * stride + kernel - L)
    return F.pad(x, (0, pad)) if pad else x


class KelEncoder(nn.Module):
    """Two strided 1-D convolutions producing one keyness value per block."""

    kind = "kel"

    def __init__(self, cfg: KelArch):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv1d(
            cfg.in_channels, cfg.hidden_channels, cfg.layer1_kernel, stride=cfg.layer1_stride
        )
        self.conv2 = nn.Conv1d(cfg.hidden_channels, 1, cfg.layer2_kernel, stride=cfg.layer2_stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, L, D) -> keyness (B, ceil(L/stride)), every entry in [0.5, 1)."""
        h = x.transpose(1, 2)  # (B, D, L)
        h = _pad_ceil(h, self.cfg.layer1_kernel, self.cfg.layer1_stride)
        h = torch.relu(self.conv1(h))
        h = _pad_ceil(h, self.cfg.layer2_kernel, self.cfg.layer2_stride)
        pre = self.conv2(h).squeeze(1)  # (B, n_slots)
        return torch.sigmoid(torch.relu(pre))


def expand_keyness(w_k: torch.Tensor, stride: int, length: int) -> torch.Tensor:
    """Repeat each block value stride times along time, truncated to length."""
    return w_k.repeat_interleave(stride, dim=-1)[..., :length]


def kel_forward(x: torch.Tensor, encoder: KelEncoder) -> tuple[torch.Tensor, torch.Tensor]:
    """Keyness weights and the keyness-weighted input.

    x: (B, L, D) or (L, D).  Returns (w_k, x_kw) with w_k of length
    ceil(L/stride) and x_kw = x * K where K repeats each keyness value over
    its block and broadcasts across channels.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    w_k = encoder(x)
    k_time = expand_keyness(w_k, encoder.cfg.stride, x.shape[1])
    x_kw = x * k_time[:, :, None]
    if squeeze:
        return w_k[0], x_kw[0]
    return w_k, x_kw


class StudentModel(nn.Module):
    """Keyness encoder prepended to a frozen backbone copy."""

    def __init__(self, kel: KelEncoder, backbone: nn.Module):
        super().__init__()
        self.kel = kel
        self.backbone = backbone
        for p in self.backbone.parameters():
            p.requires_grad_(False)
        self.backbone.eval()

    def forward_with_features(self, x: torch.Tensor):
        _, x_kw = kel_forward(x, self.kel)
        feats = self.backbone.features(x_kw)
        logits = self.backbone.head_from_features(feats)
        return logits, feats

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_with_features(x)[0]

    def keyness(self, x: torch.Tensor) -> torch.Tensor:
        return kel_forward(x, self.kel)[0]


def kl_term(
    teacher_features: torch.Tensor, student_features: torch.Tensor, temperature: float
) -> torch.Tensor:
    """KL(softmax(F_T / T) || softmax(F_S / T)), mean over the batch axis."""
    if teacher_features.ndim == 1:
        teacher_features = teacher_features[None]
        student_features = student_features[None]
    log_p = F.log_softmax(teacher_features.detach() / temperature, dim=-1)
    log_q = F.log_softmax(student_features / temperature, dim=-1)
    per_sample = (log_p.exp() * (log_p - log_q)).sum(dim=-1)
    return per_sample.mean()


@dataclass
class DistillReport:
    stage: str
    epochs: int
    fidelity: float
    final_loss: float
    final_kl: float
    final_ce: float
    teacher_hash: str
    train_size: int
    val_size: int


def distill_train(
    teacher: nn.Module,
    student_backbone: nn.Module,
    kel: KelConfig,
    data: LabeledDataset,
    stage: str,
) -> tuple[KelEncoder, DistillReport]:
    """Train the keyness encoder against a frozen teacher.

    Only encoder parameters receive gradients; the teacher and the student's
    backbone copy stay bit-identical.  Fidelity is the student/teacher top-1
    agreement rate on the held-out side of the internal split.
    """
    if teacher.training:
        raise ValueError("teacher must be in evaluation mode (frozen)")
    if getattr(teacher, "kind", None) != getattr(student_backbone, "kind", None):
        raise ValueError("student backbone must be the same architecture as the teacher")
    if param_hash(teacher) != param_hash(student_backbone):
        raise ValueError("student backbone must be a verbatim copy of the teacher")
    if not data.samples:
        raise ValueError("empty distillation dataset")

    in_channels = teacher.cfg.in_channels
    encoder = init_parameters(KelEncoder(kel.arch(in_channels)), kel.seed)
    student = StudentModel(encoder, student_backbone)

    train_samples, val_samples = _grouped_split(
        data.samples, stage, kel.internal_split, kel.seed
    )
    x_train = torch.as_tensor(
        np.stack([s.values for s in train_samples]).astype(np.float32, copy=False)
    )
    y_train = torch.as_tensor(
        [_stage_label(s, stage) for s in train_samples], dtype=torch.long
    )
    x_val = torch.as_tensor(
        np.stack([s.values for s in val_samples]).astype(np.float32, copy=False)
    )

    torch.manual_seed(kel.seed)
    rng = np.random.default_rng(kel.seed)
    optimizer = torch.optim.Adam(encoder.parameters(), lr=kel.lr)
    ce_fn = nn.CrossEntropyLoss()

    final_loss = final_kl = final_ce = float("nan")
    for epoch in range(1, kel.distill_epochs + 1):
        order = rng.permutation(len(x_train))
        for b, start in enumerate(range(0, len(order), kel.batch_size)):
            idx = order[start : start + kel.batch_size]
            xb = x_train[idx]
            yb = y_train[idx]
            with torch.no_grad():
                t_feats = teacher.features(xb)
            s_logits, s_feats = student.forward_with_features(xb)
            kl = kl_term(t_feats, s_feats, kel.temperature)
            ce = ce_fn(s_logits, yb)
            loss = kl + ce
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"divergent distillation loss at epoch {epoch}, batch {b} (lr={kel.lr})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            final_loss, final_kl, final_ce = (
                float(loss.detach()),
                float(kl.detach()),
                float(ce.detach()),
            )

    with torch.no_grad():
        agree = 0
        for start in range(0, len(x_val), kel.batch_size):
            xb = x_val[start : start + kel.batch_size]
            t_pred = teacher(xb).argmax(dim=1)
            s_pred = student(xb).argmax(dim=1)
            agree += int((t_pred == s_pred).sum())
    report = DistillReport(
        stage=stage,
        epochs=kel.distill_epochs,
        fidelity=agree / len(x_val),
        final_loss=final_loss,
        final_kl=final_kl,
        final_ce=final_ce,
        teacher_hash=param_hash(teacher),
        train_size=len(train_samples),
        val_size=len(val_samples),
    )
    return encoder, report


# ---------------------------------------------------------------------------
# Healthy-baseline retrieval
# ---------------------------------------------------------------------------

def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero-norm vectors compare as 0 with a warning."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        warnings.warn("zero-norm feature vector; similarity defined as 0", stacklevel=2)
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def retrieve_baselines(
    query: np.ndarray, healthy_pool: Mapping[str, np.ndarray], k: int = 10
) -> list[tuple[str, float]]:
    """Exact top-k healthy neighbours by cosine similarity.

    Descending similarity, ties broken lexicographically by flight id; k is
    truncated to the pool size.
    """
    if not healthy_pool:
        raise ValueError("healthy pool is empty")
    query = np.asarray(query, dtype=np.float64)
    scored = [(fid, cosine_similarity(query, np.asarray(vec, dtype=np.float64)))
              for fid, vec in healthy_pool.items()]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored[: min(k, len(scored))]


# ---------------------------------------------------------------------------
# Records and export
# ---------------------------------------------------------------------------

@dataclass
class KeynessRecord:
    """Per-flight keyness: block weights, their temporal expansion, baselines."""

    flight_id: str
    stage: str
    w_k: np.ndarray
    stride: int
    length: int
    n_channels: int
    baselines: list[tuple[str, float]]

    def __post_init__(self) -> None:
        self.w_k = np.asarray(self.w_k, dtype=np.float64).reshape(-1)
        expected = -(-self.length // self.stride)
        if len(self.w_k) != expected:
            raise ValueError(
                f"w_k has {len(self.w_k)} slots; length {self.length} at stride "
                f"{self.stride} needs {expected}"
            )

    @property
    def k_time(self) -> np.ndarray:
        """Length-L expansion: each block value repeated stride times."""
        return np.repeat(self.w_k, self.stride)[: self.length]

    @property
    def k_expanded(self) -> np.ndarray:
        """(L, D) expansion broadcast across channels."""
        return np.tile(self.k_time[:, None], (1, self.n_channels))


def write_sidecar(record: KeynessRecord, path: str | Path) -> Path:
    """CSV sidecar (slot_index, t_start, t_end, keyness) with exact floats."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["slot_index,t_start,t_end,keyness"]
    for i, w in enumerate(record.w_k):
        t0 = i * record.stride
        t1 = min((i + 1) * record.stride, record.length)
        lines.append(f"{i},{t0},{t1},{w:.17g}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_sidecar(path: str | Path) -> np.ndarray:
    rows = Path(path).read_text().strip().splitlines()[1:]
    return np.array([float(r.split(",")[3]) for r in rows], dtype=np.float64)


def export_heatmap(
    record: KeynessRecord,
    sample: FlightSample,
    schema: ChannelSchema,
    out_path: str | Path,
    baseline: FlightSample | None = None,
    channels: Sequence[str] | None = None,
) -> tuple[Path, Path]:
    """Render the contrastive keyness figure plus its reproducible sidecar.

    Returns (image path, sidecar path).  The sidecar carries the exact w_K
    values, so the figure can be regenerated bit-for-bit from disk.
    """
    if record.length != sample.length:
        raise ValueError(
            f"record length {record.length} does not match sample length {sample.length}"
        )
    if channels is None:
        channels = list(schema.names[: min(6, schema.n_channels)])
    indices = []
    for name in channels:
        indices.append(schema.index_of(name))  # raises with valid names listed
    out_path = Path(out_path)
    if out_path.suffix != ".png":
        out_path = out_path.with_suffix(".png")
    sidecar = out_path.with_suffix(".csv")
    plotting.render_keyness_heatmap(
        values=sample.values,
        channel_names=list(channels),
        channel_indices=indices,
        k_time=record.k_time,
        out_path=out_path,
        baseline_values=baseline.values if baseline is not None else None,
        title=f"{record.flight_id} [{record.stage}] keyness",
    )
    write_sidecar(record, sidecar)
    return out_path, sidecar


def register_kel_checkpoint_kind() -> None:
    """Make KEL encoders loadable through the shared checkpoint container."""
    if "kel" not in MODEL_REGISTRY:
        MODEL_REGISTRY["kel"] = (
            lambda d: KelArch(**d),
            lambda cfg: KelEncoder(cfg),
        )


register_kel_checkpoint_kind()
