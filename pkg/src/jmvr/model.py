"""The full JMVR denoiser: EEG encoder, text provider, conditioning, image
autoencoder and the stack of joint-modal blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .augment import ImageAutoencoder
from .block import JMVRBlock, gate_weights, modulate
from .conditioning import CognitionSequence, Conditioner, make_text_provider, mask_tokens
from .config import RunConfig
from .encoder import EEGEncoder, EncoderConfig


@dataclass
class Conditions:
    """Timestep-independent conditioning for a batch."""

    eeg_tokens: torch.Tensor
    coarse: torch.Tensor
    cognition: CognitionSequence
    channel_weights: torch.Tensor

    @property
    def batch_size(self) -> int:
        return self.eeg_tokens.shape[0]

    def select(self, idx) -> "Conditions":
        """Rows ``idx`` (repeats allowed) of every field."""
        cog = CognitionSequence(self.cognition.tokens[idx], self.cognition.boundary)
        return Conditions(self.eeg_tokens[idx], self.coarse[idx], cog, self.channel_weights[idx])


class JMVR(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.D
        self.D = D
        self.encoder = EEGEncoder(EncoderConfig(
            C=cfg.C, T=cfg.T, D=D, m=cfg.m, temporal_kernel=cfg.temporal_kernel,
            n_filters=cfg.n_filters, n_residual_blocks=cfg.n_residual_blocks,
            n_eeg_tokens=cfg.n_eeg_tokens, multiscale=cfg.multiscale_on))
        self.text = make_text_provider(cfg.text_provider, n_tokens=cfg.n_txt_tokens, width=D)
        self.conditioner = Conditioner(D, self.text.width, cfg.t_max)
        self.autoencoder = ImageAutoencoder(cfg.image_size, cfg.patch, D, cfg.view_width,
                                            n_views=4 if cfg.augmentation_on else 1)
        self.eeg_null = nn.Parameter(torch.zeros(D))
        self.n_img_tokens = self.autoencoder.n_tokens
        n_txt = cfg.n_txt_tokens if cfg.text_on else cfg.n_eeg_tokens

        self.in_proj = nn.Linear(D, D)
        self.pos_img = nn.Parameter(0.02 * torch.randn(self.n_img_tokens, D))
        self.pos_txt = nn.Parameter(0.02 * torch.randn(n_txt, D))
        self.pos_eeg = nn.Parameter(0.02 * torch.randn(cfg.n_eeg_tokens, D))
        self.blocks = nn.ModuleList(JMVRBlock(D, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_blocks))
        self.final_norm = nn.LayerNorm(D, elementwise_affine=False, eps=1e-6)
        # shift, scale and a per-channel gate on a direct x_t -> eps path; the
        # normalized trunk alone cannot reproduce the token scale of x_t
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(D, 3 * D))
        self.final = nn.Linear(D, D)
        for lin in (self.final_ada[1], self.final):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        self.register_buffer("latent_mean", torch.zeros(()))
        self.register_buffer("latent_std", torch.ones(()))

    # ---- conditioning

    def encode_conditions(self, eeg: torch.Tensor, captions: Sequence[str], *,
                          text_mask: float = 0.0, eeg_mask: float = 0.0, mask_seed: int = 0,
                          text_null: bool = False) -> Conditions:
        eeg_tokens, w = self.encoder(eeg, return_weights=True)
        eeg_tokens = mask_tokens(eeg_tokens, eeg_mask, mask_seed, self.eeg_null)
        if self.cfg.text_on:
            if text_null:
                captions = [""] * len(captions)
            fine = self.text.fine(captions)
        else:
            # EEG-only variant: the EEG tokens stand in for the text span
            fine = eeg_tokens
        fine = mask_tokens(fine, text_mask, mask_seed, self.text.null_token)
        coarse = self.text.coarse_from_fine(fine)
        cog = self.conditioner.cognition_sequence(fine, eeg_tokens)
        return Conditions(eeg_tokens, coarse, cog, w)

    # ---- denoising

    def denoise(self, x_t: torch.Tensor, tau, cond: Conditions, inspect: bool = False):
        tau = torch.as_tensor(tau).reshape(-1)
        cv = self.conditioner.condition_vector(tau, cond.coarse, cond.eeg_tokens)
        lam = gate_weights(tau, self.cfg.t_max, self.cfg.gating_on).to(x_t.dtype)
        hs = (self.in_proj(x_t) + self.pos_img,
              cond.cognition.text + self.pos_txt,
              cond.cognition.eeg + self.pos_eeg)
        records = []
        for block in self.blocks:
            if inspect:
                hs, info = block(hs, cv.c, lam, inspect=True)
                records.append(info)
            else:
                hs = block(hs, cv.c, lam)
        shift, scale, skip = self.final_ada(cv.c).chunk(3, dim=-1)
        out = self.final(modulate(self.final_norm(hs[0]), shift, scale)) + skip[:, None, :] * x_t
        if inspect:
            return out, records
        return out

    # ---- latent space

    def image_latent(self, views: torch.Tensor) -> torch.Tensor:
        """Normalized unified latent of a (B, V, 3, H, W) view stack."""
        return (self.autoencoder.encode(views[:, : self.autoencoder.n_views]) - self.latent_mean) / self.latent_std

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return self.autoencoder.decode(latent * self.latent_std + self.latent_mean)

    def diffusion_parameters(self):
        """Everything trained by the diffusion objective (the autoencoder is frozen)."""
        ae = {id(p) for p in self.autoencoder.parameters()}
        return [p for p in self.parameters() if id(p) not in ae]
