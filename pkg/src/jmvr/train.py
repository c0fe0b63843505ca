"""Loading a split into memory, autoencoder pretraining and diffusion training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment, make_depth_provider, stack_views
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DatasetManifest, ManifestEntry, load_preprocessed
from .diffusion import NoiseSchedule, diffusion_loss
from .errors import DataError
from .model import JMVR

log = logging.getLogger(__name__)


@dataclass
class SplitData:
    entries: list[ManifestEntry]
    eeg: torch.Tensor           # (n, C, T) normalized
    captions: list[str]
    images: np.ndarray          # (n, H, W, 3) in [0, 1]
    views: torch.Tensor         # (n, 4, 3, H, W)

    def __len__(self):
        return len(self.entries)

    def subset(self, idx) -> "SplitData":
        idx = list(idx)
        return SplitData([self.entries[i] for i in idx], self.eeg[idx], [self.captions[i] for i in idx],
                         self.images[idx], self.views[idx])


def check_dataset(cfg: RunConfig, manifest: DatasetManifest) -> None:
    C = manifest.eeg_shape[0]
    if C != cfg.C:
        raise DataError(f"dataset has {C} channels but config C={cfg.C}")
    stats, pre = manifest.load_stats()
    if pre.target_length != cfg.T:
        raise DataError(f"dataset stats were computed for T={pre.target_length}, config T={cfg.T}")


def load_split(cfg: RunConfig, manifest: DatasetManifest, split: str) -> SplitData:
    check_dataset(cfg, manifest)
    entries = sorted(manifest.split(split), key=lambda e: e.stimulus_id)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    eeg = torch.as_tensor(load_preprocessed(manifest, entries), dtype=torch.get_default_dtype())
    images = np.stack([manifest.read_image(e) for e in entries])
    if images.shape[1:3] != (cfg.image_size, cfg.image_size):
        raise DataError(f"images are {images.shape[1:3]}, config image_size={cfg.image_size}")
    provider = make_depth_provider(cfg.depth_provider, manifest)
    sets = [augment(img, provider) for img in images]
    return SplitData(entries, eeg, [manifest.read_caption(e) for e in entries], images, stack_views(sets))


def build_model(cfg: RunConfig) -> JMVR:
    torch.manual_seed(cfg.seed)
    return JMVR(cfg)


def pretrain_autoencoder(model: JMVR, data: SplitData, steps: int, lr: float) -> list[float]:
    """Fit encode/decode as an autoencoder pair on the original images, then
    freeze it and record latent normalization statistics."""
    ae = model.autoencoder
    views = data.views[:, : ae.n_views]
    target = torch.as_tensor(data.images, dtype=views.dtype)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for step in range(steps):
        loss = F.mse_loss(ae.decode_raw(ae.encode(views)), target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    for p in ae.parameters():
        p.requires_grad_(False)
    with torch.no_grad():
        z = ae.encode(views)
        model.latent_mean.copy_(z.mean())
        model.latent_std.copy_(z.std())
    return losses


def make_optimizer(model: JMVR, cfg: RunConfig):
    opt = torch.optim.Adam(model.diffusion_parameters(), lr=cfg.lr)

    def lr_at(step: int) -> float:
        if step < cfg.warmup_steps:
            return cfg.lr * (step + 1) / cfg.warmup_steps
        span = max(cfg.steps - cfg.warmup_steps, 1)
        frac = min((step - cfg.warmup_steps) / span, 1.0)
        return cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))

    return opt, lr_at


def training_step(model: JMVR, batch: SplitData, x0: torch.Tensor, schedule: NoiseSchedule,
                  opt: torch.optim.Optimizer, gen: torch.Generator, cfg: RunConfig,
                  lr: float | None = None, expand=None) -> float:
    """One optimizer update of the epsilon objective; returns the batch loss.

    ``expand`` lists batch rows (with repeats) to train on, so one item can
    contribute several timestep draws while its conditions are encoded once.
    """
    text_null = eeg_null = False
    if cfg.cond_drop > 0:
        u = torch.rand(2, generator=gen)
        text_null, eeg_null = bool(u[0] < cfg.cond_drop), bool(u[1] < cfg.cond_drop)
    cond = model.encode_conditions(batch.eeg, batch.captions, text_mask=float(text_null),
                                   eeg_mask=float(eeg_null))
    if expand is not None:
        cond = cond.select(expand)
        x0 = x0[expand]
    loss, _, _ = diffusion_loss(model, x0, cond, schedule, gen)
    if lr is not None:
        for g in opt.param_groups:
            g["lr"] = lr
    opt.zero_grad()
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.diffusion_parameters(), cfg.grad_clip)
    opt.step()
    return loss.item()


@torch.no_grad()
def probe_loss(model: JMVR, data: SplitData, x0: torch.Tensor, schedule: NoiseSchedule,
               n_tau: int = 32, seed: int = 0) -> float:
    """Epsilon MSE on a fixed grid of timesteps and fixed noise.

    Deterministic, so it serves as the before/after measure of the training
    objective without the sampling noise of single minibatch losses.
    """
    cond = model.encode_conditions(data.eeg, data.captions)
    gen = torch.Generator().manual_seed(seed)
    taus = np.round(np.linspace(1, schedule.t_max, n_tau)).astype(int)
    total = 0.0
    for t in taus:
        tau = torch.full((len(data),), int(t), dtype=torch.long)
        total += float(diffusion_loss(model, x0, cond, schedule, gen, tau=tau)[0])
    return total / len(taus)


@dataclass
class TrainResult:
    model: JMVR
    losses: list[float]
    ae_losses: list[float] = field(default_factory=list)
    probe_initial: float = float("nan")
    probe_final: float = float("nan")

    @property
    def loss_ratio(self) -> float:
        return self.probe_final / self.probe_initial


def train(cfg: RunConfig, data: SplitData) -> TrainResult:
    model = build_model(cfg)
    ae_losses = pretrain_autoencoder(model, data, cfg.ae_steps, cfg.ae_lr)
    schedule = NoiseSchedule(cfg.t_max, cfg.beta_1, cfg.beta_T)
    with torch.no_grad():
        x0_all = model.image_latent(data.views)
    probe_initial = probe_loss(model, data, x0_all, schedule, seed=cfg.seed)
    opt, lr_at = make_optimizer(model, cfg)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    n = len(data)
    losses = []
    for step in range(cfg.steps):
        if cfg.batch_size >= n:
            # small sets: every item each step, tiled to the batch size
            idx, expand = list(range(n)), [i % n for i in range(cfg.batch_size)]
        else:
            idx, expand = torch.randperm(n, generator=gen)[: cfg.batch_size].tolist(), None
        batch = data.subset(idx) if len(idx) != n else data
        losses.append(training_step(model, batch, x0_all[idx], schedule, opt, gen, cfg, lr_at(step),
                                    expand=expand))
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, losses[-1])
    model.eval()
    probe_final = probe_loss(model, data, x0_all, schedule, seed=cfg.seed)
    return TrainResult(model, losses, ae_losses, probe_initial, probe_final)


def checkpoint_header(cfg: RunConfig, step: int, extra: dict | None = None) -> dict:
    return {
        "format": "jmvr-checkpoint/1",
        "config_hash": cfg.config_hash(),
        "model_hash": cfg.model_hash(),
        "step": step,
        "schedule": {"t_max": cfg.t_max, "beta_1": cfg.beta_1, "beta_T": cfg.beta_T},
        "config": cfg.to_json() | {"out_dir": None},
        **(extra or {}),
    }


def save_model(path: str | Path, model: JMVR, cfg: RunConfig, step: int, extra: dict | None = None):
    save_checkpoint(path, model.state_dict(), checkpoint_header(cfg, step, extra))


def load_model(path: str | Path, cfg: RunConfig | None = None) -> tuple[JMVR, dict]:
    state, header = load_checkpoint(path)
    if cfg is None:
        cfg = RunConfig.from_dict({**header["config"], "out_dir": "."})
    check_compatible(header, cfg.model_hash())
    model = JMVR(cfg)
    model.load_state_dict({k: v.to(torch.get_default_dtype()) if v.is_floating_point() else v
                           for k, v in state.items()})
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model, header


def smoothed(losses, window: int = 25) -> np.ndarray:
    x = np.asarray(losses, dtype=np.float64)
    if len(x) == 0:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i - window + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
