"""Dual-stream multi-scale EEG encoder.

Left stream: temporal conv -> channel attention -> residual 2D conv blocks over
an electrode x time map. Right stream: pyramid multi-scale pooling (PMSP) of
the raw signal, projected back to T samples. Both streams are stacked as
feature maps, cut into L_eeg time chunks and linearly embedded to width D.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class EncoderConfig:
    C: int = 17
    T: int = 256
    D: int = 64
    m: int = 7
    temporal_kernel: int = 7
    n_filters: int = 8
    n_residual_blocks: int = 2
    n_eeg_tokens: int = 16
    multiscale: bool = True

    def validate(self) -> None:
        if self.C < 1 or self.D < 1:
            raise ConfigError("C and D must be positive")
        if 2 ** (self.m + 1) != self.T:
            raise ConfigError(f"PMSP needs T == 2^(m+1); got T={self.T}, m={self.m}")
        if self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel must be odd")
        if self.T % self.n_eeg_tokens:
            raise ConfigError("T must be divisible by n_eeg_tokens")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def pmsp_pool(x: torch.Tensor, m: int) -> torch.Tensor:
    """Adaptive average pools of the last axis to lengths 2, 4, ..., 2^m, concatenated.

    Requires T == 2^(m+1), so every pool has equal windows and the output has
    exactly T - 2 samples.
    """
    T = x.shape[-1]
    if 2 ** (m + 1) != T:
        raise ConfigError(f"PMSP needs T == 2^(m+1); got T={T}, m={m}")
    pooled = []
    for k in range(1, m + 1):
        n = 2 ** k
        pooled.append(x.reshape(*x.shape[:-1], n, T // n).mean(dim=-1))
    return torch.cat(pooled, dim=-1)


class ChannelAttention(nn.Module):
    """Squeeze-excitation gate over electrodes.

    Squeeze: per electrode, the time-mean and time-RMS of each feature map,
    plus the same statistics averaged over all electrodes as context.
    Excitation: a bottleneck MLP (ratio 4) shared by every electrode, then a
    sigmoid. Sharing the MLP makes the gate permutation-equivariant.
    """

    def __init__(self, n_features: int, reduction: int = 4):
        super().__init__()
        d_in = 4 * n_features
        hidden = max(1, d_in // reduction)
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def statistics(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, F, C, T) -> (B, C, 4F)
        mean = x.mean(dim=-1)
        rms = torch.sqrt((x ** 2).mean(dim=-1) + 1e-12)
        own = torch.cat([mean, rms], dim=1).transpose(1, 2)
        ctx = own.mean(dim=1, keepdim=True).expand_as(own)
        return torch.cat([own, ctx], dim=-1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        squeeze_2d = x.dim() == 2
        if squeeze_2d:
            x = x[None, None]
        if not torch.isfinite(x).all():
            raise DataError("channel attention received non-finite input")
        w = torch.sigmoid(self.fc2(F.silu(self.fc1(self.statistics(x))))).squeeze(-1)
        out = x * w[:, None, :, None]
        if squeeze_2d:
            return out[0, 0], w[0]
        return out, w


class ResidualBlock(nn.Module):
    def __init__(self, n_features: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(1, n_features)
        self.conv1 = nn.Conv2d(n_features, n_features, 3, padding=1)
        self.norm2 = nn.GroupNorm(1, n_features)
        self.conv2 = nn.Conv2d(n_features, n_features, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        nn.init.zeros_(self.conv1.bias)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class SpatiotemporalStream(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        k = cfg.temporal_kernel
        self.temporal = nn.Conv2d(1, cfg.n_filters, (1, k), padding=(0, k // 2))
        nn.init.zeros_(self.temporal.bias)
        self.attention = ChannelAttention(cfg.n_filters)
        self.blocks = nn.ModuleList(ResidualBlock(cfg.n_filters) for _ in range(cfg.n_residual_blocks))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # (B, C, T) -> (B, F, C, T)
        h = self.temporal(x[:, None])
        h, w = self.attention(h)
        for block in self.blocks:
            h = block(h)
        return h, w


class EEGEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stream = SpatiotemporalStream(cfg)
        n_maps = cfg.n_filters
        if cfg.multiscale:
            self.pmsp_proj = nn.Linear(cfg.T - 2, cfg.T)
            n_maps += 1
        self.chunk = cfg.T // cfg.n_eeg_tokens
        self.token_proj = nn.Linear(n_maps * cfg.C * self.chunk, cfg.D)

    def feature_shape(self) -> tuple[int, int, int]:
        """(maps, C, T) of the fused two-stream feature map."""
        return (self.cfg.n_filters + int(self.cfg.multiscale), self.cfg.C, self.cfg.T)

    def forward(self, x: torch.Tensor, return_weights: bool = False):
        cfg = self.cfg
        if x.dim() == 2:
            x = x[None]
        if x.shape[1:] != (cfg.C, cfg.T):
            raise DataError(f"expected EEG of shape (C={cfg.C}, T={cfg.T}), got {tuple(x.shape[1:])}")
        h, w = self.stream(x)
        if cfg.multiscale:
            g = self.pmsp_proj(pmsp_pool(x, cfg.m))
            h = torch.cat([h, g[:, None]], dim=1)
        B, M, C, T = h.shape
        # (B, M, C, L, chunk) -> (B, L, M*C*chunk)
        tokens = h.reshape(B, M, C, cfg.n_eeg_tokens, self.chunk).permute(0, 3, 1, 2, 4)
        tokens = self.token_proj(tokens.reshape(B, cfg.n_eeg_tokens, -1))
        if return_weights:
            return tokens, w
        return tokens
