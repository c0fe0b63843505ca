"""Text providers and the two conditioning pathways.

* condition vector: timestep MLP + projected coarse text + projected mean EEG
  token, feeding adaLN modulation;
* cognition sequence: projected fine text tokens followed by the EEG tokens,
  entering joint attention.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import COLORS, SHAPES
from .errors import ConfigError, ProviderError

NULL, UNK = "<null>", "<unk>"
BASE_VOCAB = (NULL, UNK, "a", "an", "and", "on", "the", "of", "with", "background",
              "left", "right", "top", "bottom", "small", "large")


class TextEmbeddingProvider(Protocol):
    name: str
    n_tokens: int
    width: int

    def fine(self, captions: Sequence[str]) -> torch.Tensor: ...

    def coarse_from_fine(self, fine: torch.Tensor) -> torch.Tensor: ...


class ToyTextProvider(nn.Module):
    """Whitespace tokenizer over a fixed vocabulary with a trainable embedding
    table. Fine tokens are padded/truncated to ``n_tokens`` with the null token;
    the coarse embedding is an affine map of the mean fine token."""

    name = "toy"

    def __init__(self, n_tokens: int = 8, width: int = 64, vocab: Sequence[str] | None = None):
        super().__init__()
        vocab = list(vocab) if vocab is not None else list(BASE_VOCAB) + list(COLORS) + list(SHAPES)
        if vocab[0] != NULL:
            raise ConfigError("vocabulary must start with the null token")
        self.vocab = {w: i for i, w in enumerate(vocab)}
        self.n_tokens = n_tokens
        self.width = width
        self.table = nn.Embedding(len(vocab), width)
        nn.init.normal_(self.table.weight, std=1.0)
        self.coarse_map = nn.Linear(width, width)

    def tokenize(self, caption: str) -> list[int]:
        if not isinstance(caption, str):
            raise ProviderError(self.name, f"caption must be str, got {type(caption).__name__}")
        ids = [self.vocab.get(w, self.vocab[UNK]) for w in re.findall(r"[a-z]+", caption.lower())]
        ids = ids[: self.n_tokens]
        return ids + [0] * (self.n_tokens - len(ids))

    def fine(self, captions: Sequence[str]) -> torch.Tensor:
        ids = torch.tensor([self.tokenize(c) for c in captions], dtype=torch.long,
                           device=self.table.weight.device)
        return self.table(ids)

    @property
    def null_token(self) -> torch.Tensor:
        return self.table.weight[0]

    def coarse_from_fine(self, fine: torch.Tensor) -> torch.Tensor:
        return self.coarse_map(fine.mean(dim=-2))

    def coarse(self, captions: Sequence[str]) -> torch.Tensor:
        return self.coarse_from_fine(self.fine(captions))


TEXT_PROVIDERS = {"toy": ToyTextProvider}


def make_text_provider(name: str, **kwargs) -> nn.Module:
    try:
        return TEXT_PROVIDERS[name](**kwargs)
    except KeyError:
        raise ConfigError(f"unknown text provider {name!r}; known: {sorted(TEXT_PROVIDERS)}") from None


def timestep_embedding(tau, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding; frequencies 1/w_k with w_k geometric in [1, max_period].

    Returns (..., dim) laid out as [sin(tau/w_0..), cos(tau/w_0..)].
    """
    if dim % 2:
        raise ConfigError("timestep embedding width must be even")
    tau = torch.as_tensor(tau, dtype=torch.get_default_dtype())
    half = dim // 2
    k = torch.arange(half, dtype=tau.dtype)
    scale = k / (half - 1) if half > 1 else k
    omega = max_period ** scale
    args = tau[..., None] / omega
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def check_timestep(tau, t_max: int) -> None:
    t = torch.as_tensor(tau)
    if (t < 0).any() or (t > t_max).any():
        raise ConfigError(f"timestep out of range [0, {t_max}]: {t.tolist()}")


@dataclass
class ConditionVector:
    c: torch.Tensor
    timestep_emb: torch.Tensor
    coarse_text_emb: torch.Tensor
    pooled_eeg_emb: torch.Tensor


@dataclass
class CognitionSequence:
    tokens: torch.Tensor
    boundary: int

    @property
    def text(self) -> torch.Tensor:
        return self.tokens[..., : self.boundary, :]

    @property
    def eeg(self) -> torch.Tensor:
        return self.tokens[..., self.boundary:, :]


class Conditioner(nn.Module):
    def __init__(self, D: int, text_width: int, t_max: int = 1000):
        super().__init__()
        self.D = D
        self.t_max = t_max
        self.t_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.coarse_proj = nn.Linear(text_width, D)
        self.eeg_proj = nn.Linear(D, D)
        self.fine_proj = nn.Linear(text_width, D)

    def condition_vector(self, tau, coarse: torch.Tensor, eeg_tokens: torch.Tensor) -> ConditionVector:
        check_timestep(tau, self.t_max)
        temb = self.t_mlp(timestep_embedding(tau, self.D).to(coarse.dtype))
        ctext = self.coarse_proj(coarse)
        ceeg = self.eeg_proj(eeg_tokens.mean(dim=-2))
        return ConditionVector(temb + ctext + ceeg, temb, ctext, ceeg)

    def cognition_sequence(self, fine: torch.Tensor, eeg_tokens: torch.Tensor) -> CognitionSequence:
        text = self.fine_proj(fine)
        return CognitionSequence(torch.cat([text, eeg_tokens], dim=-2), boundary=text.shape[-2])


def mask_positions(length: int, ratio: float, seed: int) -> np.ndarray:
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must be in [0, 1], got {ratio}")
    k = math.floor(ratio * length + 1e-9)
    return np.sort(np.random.default_rng(seed).permutation(length)[:k])


def mask_tokens(seq: torch.Tensor, ratio: float, seed: int, null: torch.Tensor) -> torch.Tensor:
    """Replace floor(ratio * L) seeded-random rows of ``seq`` (..., L, D) by ``null``."""
    pos = mask_positions(seq.shape[-2], ratio, seed)
    if len(pos) == 0:
        return seq
    mask = torch.zeros(seq.shape[-2], dtype=torch.bool, device=seq.device)
    mask[torch.as_tensor(pos)] = True
    return torch.where(mask[:, None], null.to(seq.dtype).expand_as(seq), seq)
