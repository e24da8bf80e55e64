"""The two heterogeneous sequence classifiers.

ConvTokMHSA: a convolutional patch tokenizer followed by multi-head
self-attention encoder layers — full-sequence receptive field, with an
optional sliding-window ablation that masks attention scores beyond a token
radius.  MMKNet: a stack of bottlenecked multi-kernel (1/3/5) convolution
blocks with per-position layer normalization and no pooling until a final
global average — a deliberately micro receptive field of 1 + 4*blocks.

Both expose ``forward`` (logits) and ``features`` (the pooled pre-head
vector used for distillation and similarity retrieval).
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 1

_VAR_FLOOR = 1e-24  # below this, a segment is treated as exactly constant


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TokenizerConfig:
    patch_len: int = 4
    token_dim: int = 128
    conv_kernel: int = 3

    def __post_init__(self) -> None:
        if self.patch_len < 1:
            raise ValueError("patch_len must be >= 1")
        if self.token_dim < 4 or self.token_dim % 2:
            raise ValueError("token_dim must be an even integer >= 4")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd and >= 1")


@dataclass(frozen=True)
class AttentionConfig:
    encoder_layers: int = 2
    heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.0
    attention_mode: str = "global"
    window_half_width: int | None = None
    qkv_kernel: int = 3
    positional_encoding: bool = True

    def __post_init__(self) -> None:
        if self.encoder_layers < 1:
            raise ValueError("need at least one encoder layer")
        if self.attention_mode not in ("global", "sliding_window"):
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")
        if self.attention_mode == "sliding_window":
            if self.window_half_width is None or self.window_half_width < 0:
                raise ValueError("sliding_window mode needs window_half_width >= 0")
        if self.qkv_kernel < 1 or self.qkv_kernel % 2 == 0:
            raise ValueError("qkv_kernel must be odd and >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(frozen=True)
class ConvTokConfig:
    in_channels: int
    tokenizer: TokenizerConfig = TokenizerConfig()
    attention: AttentionConfig = AttentionConfig()
    head_dim: int = 2

    def __post_init__(self) -> None:
        if self.tokenizer.token_dim % self.attention.heads:
            raise ValueError("token_dim must be divisible by the head count")
        if self.head_dim < 1 or self.in_channels < 1:
            raise ValueError("head_dim and in_channels must be positive")


@dataclass(frozen=True)
class MMKConfig:
    in_channels: int
    blocks: int = 4
    filters: int = 256
    kernel_set: tuple[int, ...] = (1, 3, 5)
    bottleneck_dim: int | None = None
    dropout: float = 0.0
    residual_period: int = 3
    head_hidden_dim: int | None = None
    head_dim: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "kernel_set", tuple(self.kernel_set))
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if any(k < 1 or k % 2 == 0 for k in self.kernel_set):
            raise ValueError("kernels must be odd and >= 1")
        if self.residual_period < 1:
            raise ValueError("residual_period must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def branch_out(self) -> int:
        return len(self.kernel_set) * self.filters

    @property
    def bottleneck(self) -> int:
        return self.bottleneck_dim if self.bottleneck_dim is not None else self.filters

    @property
    def receptive_field(self) -> int:
        """Total pre-pooling receptive width: 1 + blocks * (max_kernel - 1)."""
        return 1 + self.blocks * (max(self.kernel_set) - 1)


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------

def sinusoidal_positions(n: int, dim: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed sine/cosine position table of shape (n, dim); dim must be even."""
    pos = torch.arange(n, dtype=torch.float64, device=device)[:, None]
    half = torch.arange(dim // 2, dtype=torch.float64, device=device)[None, :]
    angles = pos / torch.pow(torch.tensor(10000.0, dtype=torch.float64), 2.0 * half / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(angles)
    pe[:, 1::2] = torch.cos(angles)
    return pe.to(dtype)


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` is additive (0 where allowed, -inf where blocked) and broadcast
    against the score matrix.
    """
    d_k = q.shape[-1]
    scores = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if mask is not None:
        scores = scores + mask
    return torch.softmax(scores, dim=-1) @ v


def window_mask(n: int, half_width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Additive (n, n) mask blocking positions with |i - j| > half_width."""
    idx = torch.arange(n, device=device)
    blocked = (idx[:, None] - idx[None, :]).abs() > half_width
    mask = torch.zeros(n, n, dtype=dtype, device=device)
    mask[blocked] = float("-inf")
    return mask


class PatchTokenizer(nn.Module):
    """Non-overlapping patch tokenizer with shape, stats, and position terms.

    The token for each length-p segment is the sum of (a) a learned 1-D
    convolutional shape feature averaged over the segment, (b) a linear
    projection of the segment's per-channel mean and standard deviation, and
    (c) optionally a fixed sinusoidal positional term — an additive form of
    concatenate-then-project.  The final partial segment is zero-padded in the
    raw space; its statistics use only the valid region.
    """

    def __init__(self, cfg: TokenizerConfig, in_channels: int, positional: bool = True):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.positional = positional
        self.shape_conv = nn.Conv1d(
            in_channels, cfg.token_dim, cfg.conv_kernel, padding=cfg.conv_kernel // 2
        )
        self.stats_proj = nn.Linear(2 * in_channels, cfg.token_dim)

    def n_tokens(self, length: int) -> int:
        return -(-length // self.cfg.patch_len)

    def segment_stats(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-segment (mean, std) over the valid region only; shapes (B, N, D)."""
        p = self.cfg.patch_len
        B, L, D = x.shape
        n_tok = self.n_tokens(L)
        pad = n_tok * p - L
        xp = F.pad(x, (0, 0, 0, pad)) if pad else x
        xp = xp.reshape(B, n_tok, p, D)
        counts = torch.full((n_tok,), float(p), dtype=x.dtype, device=x.device)
        if pad:
            counts[-1] = float(p - pad)
        denom = counts[None, :, None]
        mu = xp.sum(dim=2) / denom
        var = (xp * xp).sum(dim=2) / denom - mu * mu
        sigma = torch.where(
            var > _VAR_FLOOR, torch.sqrt(var.clamp_min(_VAR_FLOOR)), var * 0.0
        )
        return mu, sigma

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        p = self.cfg.patch_len
        B, L, D = x.shape
        if D != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {D}")
        n_tok = self.n_tokens(L)
        pad = n_tok * p - L
        xp = F.pad(x, (0, 0, 0, pad)) if pad else x
        shape_feat = self.shape_conv(xp.transpose(1, 2))  # (B, d_tok, n_tok*p)
        shape_feat = shape_feat.reshape(B, self.cfg.token_dim, n_tok, p).mean(dim=3)
        tokens = shape_feat.transpose(1, 2)  # (B, n_tok, d_tok)
        mu, sigma = self.segment_stats(x)
        tokens = tokens + self.stats_proj(torch.cat([mu, sigma], dim=-1))
        if self.positional:
            tokens = tokens + sinusoidal_positions(
                n_tok, self.cfg.token_dim, dtype=x.dtype, device=x.device
            )
        return tokens


class ConvProjectionAttention(nn.Module):
    """Multi-head attention whose Q/K/V come from 1-D convs over the token axis."""

    def __init__(self, d_tok: int, heads: int, qkv_kernel: int):
        super().__init__()
        self.heads = heads
        self.d_k = d_tok // heads
        pad = qkv_kernel // 2
        self.q_conv = nn.Conv1d(d_tok, d_tok, qkv_kernel, padding=pad)
        self.k_conv = nn.Conv1d(d_tok, d_tok, qkv_kernel, padding=pad)
        self.v_conv = nn.Conv1d(d_tok, d_tok, qkv_kernel, padding=pad)
        self.out_proj = nn.Linear(d_tok, d_tok)

    def _project(self, conv: nn.Conv1d, tokens: torch.Tensor) -> torch.Tensor:
        B, N, d = tokens.shape
        out = conv(tokens.transpose(1, 2)).transpose(1, 2)  # (B, N, d)
        return out.reshape(B, N, self.heads, self.d_k).transpose(1, 2)  # (B, h, N, d_k)

    def forward(self, tokens: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        B, N, d = tokens.shape
        q = self._project(self.q_conv, tokens)
        k = self._project(self.k_conv, tokens)
        v = self._project(self.v_conv, tokens)
        ctx = scaled_dot_attention(q, k, v, mask)
        ctx = ctx.transpose(1, 2).reshape(B, N, d)
        return self.out_proj(ctx)


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with a GELU feed-forward."""

    def __init__(self, d_tok: int, cfg: AttentionConfig):
        super().__init__()
        self.attn = ConvProjectionAttention(d_tok, cfg.heads, cfg.qkv_kernel)
        self.ln1 = nn.LayerNorm(d_tok, eps=1e-5)
        self.ln2 = nn.LayerNorm(d_tok, eps=1e-5)
        self.ffn = nn.Sequential(
            nn.Linear(d_tok, cfg.ffn_dim), nn.GELU(), nn.Linear(cfg.ffn_dim, d_tok)
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln1(x), mask))
        x = x + self.drop(self.ffn(self.ln2(x)))
        return x


class ConvTokMHSA(nn.Module):
    """Tokenize, run encoder layers, mean-pool over tokens, classify."""

    kind = "convtok"

    def __init__(self, cfg: ConvTokConfig):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = PatchTokenizer(
            cfg.tokenizer, cfg.in_channels, positional=cfg.attention.positional_encoding
        )
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.tokenizer.token_dim, cfg.attention)
            for _ in range(cfg.attention.encoder_layers)
        )
        self.final_norm = nn.LayerNorm(cfg.tokenizer.token_dim, eps=1e-5)
        self.head = nn.Linear(cfg.tokenizer.token_dim, cfg.head_dim)

    def _mask_for(self, n_tok: int, dtype, device) -> torch.Tensor | None:
        att = self.cfg.attention
        if att.attention_mode != "sliding_window":
            return None
        return window_mask(n_tok, att.window_half_width, dtype=dtype, device=device)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        tokens = self.tokenizer(x)
        mask = self._mask_for(tokens.shape[1], tokens.dtype, tokens.device)
        for layer in self.layers:
            tokens = layer(tokens, mask)
        return self.final_norm(tokens)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Pooled pre-head representation, shape (B, token_dim)."""
        return self.encode(x).mean(dim=1)

    def head_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_from_features(self.features(x))


class MMKBlock(nn.Module):
    """Bottleneck 1x1 conv -> parallel odd-kernel convs -> concat -> LN -> ReLU.

    Temporal length is preserved exactly; the layer norm acts per position
    across channels, so every feature stays local to its receptive window.
    """

    def __init__(self, in_channels: int, cfg: MMKConfig):
        super().__init__()
        self.bottleneck = nn.Conv1d(in_channels, cfg.bottleneck, 1)
        self.branches = nn.ModuleList(
            nn.Conv1d(cfg.bottleneck, cfg.filters, k, padding=k // 2) for k in cfg.kernel_set
        )
        self.norm = nn.LayerNorm(cfg.branch_out, eps=1e-5)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        z = self.bottleneck(h)
        z = torch.cat([branch(z) for branch in self.branches], dim=1)  # (B, 3F, L)
        z = self.norm(z.transpose(1, 2)).transpose(1, 2)
        return self.drop(torch.relu(z))


class MMKNet(nn.Module):
    """Stacked micro-kernel blocks, residual every few blocks, pool at the end."""

    kind = "mmk"

    def __init__(self, cfg: MMKConfig):
        super().__init__()
        self.cfg = cfg
        channels = cfg.in_channels
        blocks = []
        self.skip_projs = nn.ModuleDict()
        anchor_channels = cfg.in_channels
        for i in range(1, cfg.blocks + 1):
            blocks.append(MMKBlock(channels, cfg))
            channels = cfg.branch_out
            if i % cfg.residual_period == 0:
                if anchor_channels != channels:
                    self.skip_projs[str(i)] = nn.Conv1d(anchor_channels, channels, 1)
                anchor_channels = channels
        self.blocks = nn.ModuleList(blocks)
        feat_dim = cfg.branch_out
        if cfg.head_hidden_dim is not None:
            self.pre_head = nn.Sequential(
                nn.Linear(feat_dim, cfg.head_hidden_dim), nn.ReLU()
            )
            head_in = cfg.head_hidden_dim
        else:
            self.pre_head = nn.Identity()
            head_in = feat_dim
        self.head = nn.Linear(head_in, cfg.head_dim)

    def pre_pool_features(self, x: torch.Tensor) -> torch.Tensor:
        """Feature map before global pooling, shape (B, 3F, L)."""
        if x.shape[-1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} channels, got {x.shape[-1]}"
            )
        h = x.transpose(1, 2)  # (B, D, L)
        anchor = h
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            if i % self.cfg.residual_period == 0:
                key = str(i)
                h = h + (self.skip_projs[key](anchor) if key in self.skip_projs else anchor)
                anchor = h
        return h

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average pooled pre-head vector, shape (B, 3F).

        The optional pre-head hidden layer is treated as part of the
        classification head, so this representation is stable across
        head_hidden_dim settings.
        """
        return self.pre_pool_features(x).mean(dim=2)

    def head_from_features(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(self.pre_head(feats))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_from_features(self.features(x))


# ---------------------------------------------------------------------------
# Initialization, counting, hashing
# ---------------------------------------------------------------------------

def _fan_in(weight: torch.Tensor) -> int:
    if weight.ndim == 2:  # linear
        return weight.shape[1]
    if weight.ndim == 3:  # conv1d
        return weight.shape[1] * weight.shape[2]
    raise ValueError(f"unsupported weight rank {weight.ndim}")


def init_parameters(model: nn.Module, seed: int) -> nn.Module:
    """Deterministic fan-in-scaled uniform weights, zero biases, unit norms."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, (nn.Linear, nn.Conv1d)):
            bound = 1.0 / math.sqrt(_fan_in(module.weight))
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.LayerNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_hash(model: nn.Module) -> str:
    """SHA-256 over all named parameters and buffers, order-stable."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

class CheckpointMismatchError(RuntimeError):
    """Raised when a checkpoint does not fit the receiving model."""

    def __init__(self, diff: list[str]):
        self.diff = diff
        super().__init__("checkpoint/model mismatch:\n  " + "\n  ".join(diff))


def _config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _convtok_from_dict(d: dict) -> ConvTokConfig:
    return ConvTokConfig(
        in_channels=d["in_channels"],
        tokenizer=TokenizerConfig(**d["tokenizer"]),
        attention=AttentionConfig(**d["attention"]),
        head_dim=d["head_dim"],
    )


def _mmk_from_dict(d: dict) -> MMKConfig:
    d = dict(d)
    d["kernel_set"] = tuple(d["kernel_set"])
    return MMKConfig(**d)


MODEL_REGISTRY: dict[str, tuple[Callable[[dict], object], Callable[[object], nn.Module]]] = {
    "convtok": (_convtok_from_dict, lambda cfg: ConvTokMHSA(cfg)),
    "mmk": (_mmk_from_dict, lambda cfg: MMKNet(cfg)),
}


def save_checkpoint(model: nn.Module, path: str | Path, extra: dict | None = None) -> Path:
    """Write a self-describing checkpoint: format version + config + tensors."""
    kind = getattr(model, "kind", None)
    if kind not in MODEL_REGISTRY:
        raise ValueError(f"model of type {type(model).__name__} has no registered kind")
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": _config_to_dict(model.cfg),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def _read_container(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError([f"format_version: expected {CHECKPOINT_VERSION}, found {version}"])
    return payload


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> nn.Module:
    """Rebuild the model a checkpoint describes and load its weights."""
    payload = _read_container(path)
    kind = payload["kind"]
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointMismatchError([f"kind: expected {expected_kind!r}, found {kind!r}"])
    if kind not in MODEL_REGISTRY:
        raise CheckpointMismatchError([f"kind: {kind!r} is not a registered model kind"])
    cfg_from_dict, builder = MODEL_REGISTRY[kind]
    model = builder(cfg_from_dict(payload["config"]))
    load_state_into(model, payload)
    return model


def load_state_into(model: nn.Module, checkpoint: str | Path | dict) -> nn.Module:
    """Load checkpoint tensors into an existing model, rejecting mismatches.

    A mismatch produces a named-tensor diff covering missing, unexpected, and
    shape-divergent entries.
    """
    payload = checkpoint if isinstance(checkpoint, dict) else _read_container(checkpoint)
    state = payload["state_dict"]
    expected = model.state_dict()
    diff: list[str] = []
    for name in sorted(set(expected) - set(state)):
        diff.append(f"missing from checkpoint: {name} {tuple(expected[name].shape)}")
    for name in sorted(set(state) - set(expected)):
        diff.append(f"unexpected in checkpoint: {name} {tuple(state[name].shape)}")
    for name in sorted(set(state) & set(expected)):
        if tuple(state[name].shape) != tuple(expected[name].shape):
            diff.append(
                f"shape mismatch: {name} expected {tuple(expected[name].shape)}, "
                f"found {tuple(state[name].shape)}"
            )
    if diff:
        raise CheckpointMismatchError(diff)
    model.load_state_dict(state)
    return model


def checkpoint_extra(path: str | Path) -> dict:
    return _read_container(path).get("extra", {})
