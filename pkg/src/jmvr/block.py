"""Joint-modal attention block with adaLN-zero modulation and diffusion-step gating."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NumericError

MODALITIES = ("img", "txt", "eeg")


@dataclass(frozen=True)
class GateState:
    tau: float
    t_max: int
    lambda_txt: float
    lambda_eeg: float
    lambda_img: float = 1.0


def gate_schedule(tau: float, t_max: int) -> GateState:
    """Complementary sine priors: text grows toward high noise, EEG toward low noise."""
    if not 0 <= tau <= t_max:
        raise ConfigError(f"timestep {tau} outside [0, {t_max}]")
    lt = math.sin(tau / t_max * math.pi / 2)
    return GateState(tau, t_max, lt, 1.0 - lt)


def gate_weights(tau: torch.Tensor, t_max: int, enabled: bool = True) -> torch.Tensor:
    """Batched priors as a (B, 3) tensor ordered (img, txt, eeg)."""
    tau = torch.as_tensor(tau, dtype=torch.get_default_dtype()).reshape(-1)
    if (tau < 0).any() or (tau > t_max).any():
        raise ConfigError(f"timestep outside [0, {t_max}]")
    if not enabled:
        return torch.ones(tau.shape[0], 3, dtype=tau.dtype)
    lt = torch.sin(tau / t_max * (math.pi / 2))
    return torch.stack([torch.ones_like(lt), lt, 1.0 - lt], dim=-1)


def modulate(h: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """``h`` is already layer-normalized; shift/scale are (B, D)."""
    return h * (1 + scale[:, None, :]) + shift[:, None, :]


def spans_for(lengths) -> dict[str, tuple[int, int]]:
    out, start = {}, 0
    for name, n in zip(MODALITIES, lengths):
        out[name] = (start, start + n)
        start += n
    return out


class ModalityParams(nn.Module):
    """Everything one modality owns inside a block."""

    def __init__(self, D: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(D, eps=1e-6)
        self.norm2 = nn.LayerNorm(D, eps=1e-6)
        self.q = nn.Linear(D, D)
        self.k = nn.Linear(D, D)
        self.v = nn.Linear(D, D)
        self.proj = nn.Linear(D, D)
        hidden = int(D * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(D, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, D))
        # shift/scale/gate for attention, then for the MLP
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(D, 6 * D))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def modulation(self, c: torch.Tensor):
        return self.ada(c).chunk(6, dim=-1)


class JMVRBlock(nn.Module):
    def __init__(self, D: int = 64, n_heads: int = 4, mlp_ratio: float = 4.0):
        super().__init__()
        if D % n_heads:
            raise ConfigError(f"D={D} not divisible by n_heads={n_heads}")
        self.D = D
        self.n_heads = n_heads
        self.streams = nn.ModuleDict({m: ModalityParams(D, mlp_ratio) for m in MODALITIES})

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        B, L, _ = x.shape
        return x.reshape(B, L, self.n_heads, self.D // self.n_heads).transpose(1, 2)

    def forward(self, hs, c: torch.Tensor, lam: torch.Tensor, inspect: bool = False):
        """hs: (H_img, H_txt, H_eeg), each (B, L_m, D); c: (B, D); lam: (B, 3)."""
        if len(hs) != 3:
            raise DataError("expected three modality streams (img, txt, eeg)")
        B = hs[0].shape[0]
        for h in hs:
            if h.dim() != 3 or h.shape[0] != B or h.shape[-1] != self.D or h.shape[1] == 0:
                raise DataError(f"bad stream shape {tuple(h.shape)} for width {self.D}")
        mods = [self.streams[m].modulation(c) for m in MODALITIES]
        q, k, v = [], [], []
        for m, h, (sh, sc, _, _, _, _) in zip(MODALITIES, hs, mods):
            p = self.streams[m]
            ht = modulate(p.norm1(h), sh, sc)
            q.append(p.q(ht))
            k.append(p.k(ht))
            v.append(p.v(ht))
        lengths = [h.shape[1] for h in hs]
        Q, K, V = (self._heads(torch.cat(x, dim=1)) for x in (q, k, v))
        scores = Q @ K.transpose(-1, -2) / math.sqrt(self.D // self.n_heads)
        probs = torch.softmax(scores, dim=-1)
        att = (probs @ V).transpose(1, 2).reshape(B, sum(lengths), self.D)
        if not torch.isfinite(att).all():
            raise NumericError("non-finite values after joint attention")
        parts = att.split(lengths, dim=1)

        outs, norms = [], {}
        for i, (m, h, part, (_, _, g_attn, sh2, sc2, g_mlp)) in enumerate(zip(MODALITIES, hs, parts, mods)):
            p = self.streams[m]
            delta = p.proj(part)
            h = h + (lam[:, i, None] * g_attn)[:, None, :] * delta
            mlp_out = p.mlp(modulate(p.norm2(h), sh2, sc2))
            h = h + g_mlp[:, None, :] * mlp_out
            outs.append(h)
            if inspect:
                norms[m] = {"attn_residual": delta.detach().norm().item(),
                            "mlp_residual": mlp_out.detach().norm().item()}
        if not all(torch.isfinite(o).all() for o in outs):
            raise NumericError("non-finite values after block residuals")
        if inspect:
            return tuple(outs), {"attention": probs, "spans": spans_for(lengths), "residual_norms": norms}
        return tuple(outs)


def attention_map_export(block: JMVRBlock, hs, c, lam) -> dict:
    """Row-stochastic (B, heads, L_total, L_total) maps plus span offsets."""
    with torch.no_grad():
        _, info = block(hs, c, lam, inspect=True)
    return {"attention": info["attention"], "spans": info["spans"]}


def span_mass(attention: torch.Tensor, spans: dict, src: str, dst: str) -> torch.Tensor:
    """Mean attention mass that queries in ``src`` put on keys in ``dst``."""
    a, b = spans[src]
    c, d = spans[dst]
    return attention[..., a:b, c:d].sum(dim=-1).mean(dim=-1)
