"""Experiment drivers behind the CLI: reconstruction, evaluation, masking
sweeps, sliding-window temporal decoding and channel-weight export.

Every function here is a pure function of (model, data, config, seed); the
CLI layer only handles files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .augment import image_key, make_depth_provider
from .config import RunConfig
from .data import DatasetManifest, save_png
from .diffusion import NoiseSchedule, sample
from .errors import ConfigError, DataError
from .metrics import deep_emd, lab_emd, make_feature_extractors, metric_report, n_way_accuracy, resize
from .model import JMVR
from .train import SplitData

log = logging.getLogger(__name__)


def item_seed(seed: int, stimulus_id: str) -> int:
    """Per-item sampler seed, independent of batch composition and order."""
    h = hashlib.sha256(f"{seed}:{stimulus_id}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@torch.no_grad()
def reconstruct(model: JMVR, data: SplitData, cfg: RunConfig, seed: int, *,
                text_mask: float = 0.0, eeg_mask: float = 0.0, text_null: bool = False,
                eeg: torch.Tensor | None = None) -> np.ndarray:
    """Sample one image per item; returns (n, H, W, 3) in [0, 1]."""
    eeg = data.eeg if eeg is None else eeg
    cond = model.encode_conditions(eeg, data.captions, text_mask=text_mask, eeg_mask=eeg_mask,
                                   mask_seed=seed, text_null=text_null)
    schedule = NoiseSchedule(cfg.t_max, cfg.beta_1, cfg.beta_T)
    seeds = [item_seed(seed, e.stimulus_id) for e in data.entries]
    z = sample(model, cond, schedule, seeds, cfg.sample_steps)
    return model.decode(z).numpy()


def side_by_side(gts: np.ndarray, recons: np.ndarray, pad: int = 2) -> np.ndarray:
    """Grid with one row per item: ground truth | reconstruction."""
    n, H, W, _ = gts.shape
    grid = np.ones((n * (H + pad) + pad, 2 * W + 3 * pad, 3))
    for i in range(n):
        y = pad + i * (H + pad)
        grid[y:y + H, pad:pad + W] = gts[i]
        grid[y:y + H, 2 * pad + W:2 * pad + 2 * W] = recons[i]
    return grid


def evaluate(recons: np.ndarray, data: SplitData, cfg: RunConfig) -> dict:
    provider = make_depth_provider(cfg.eval_depth_provider)
    return metric_report([e.stimulus_id for e in data.entries], list(recons), list(data.images),
                         provider, make_feature_extractors(cfg.feature_extractor),
                         size=cfg.metric_size, lab_bins=cfg.lab_bins, deep_grid=cfg.deep_grid)


def emd_pair(recon, gt, cfg: RunConfig, provider) -> tuple[float, float]:
    r, g = resize(recon, cfg.metric_size), resize(gt, cfg.metric_size)
    return lab_emd(r, g, cfg.lab_bins), deep_emd(r, g, provider, cfg.deep_grid)


def mask_sweep(model: JMVR, data: SplitData, cfg: RunConfig, modality: str,
               ratios: Sequence[float], seed: int) -> list[dict]:
    """Mean LabEMD / DeepEMD of reconstructions with one modality masked."""
    if modality not in ("text", "eeg"):
        raise ConfigError(f"modality must be 'text' or 'eeg', got {modality!r}")
    for r in ratios:
        if not 0 <= r <= 1:
            raise ConfigError(f"mask ratio {r} outside [0, 1]")
    provider = make_depth_provider(cfg.eval_depth_provider)
    rows = []
    for r in ratios:
        kw = {"text_mask": r} if modality == "text" else {"eeg_mask": r}
        recons = reconstruct(model, data, cfg, seed, **kw)
        pairs = [emd_pair(a, b, cfg, provider) for a, b in zip(recons, data.images)]
        rows.append({"ratio": float(r), "LabEMD": float(np.mean([p[0] for p in pairs])),
                     "DeepEMD": float(np.mean([p[1] for p in pairs]))})
    return rows


# --------------------------------------------------------------------------
# temporal decoding

SEGMENT_MS = 1000.0


def window_ends(window_ms: float, stride_ms: float, segment_ms: float = SEGMENT_MS) -> list[float]:
    if window_ms <= 0 or stride_ms <= 0:
        raise ConfigError("window and stride must be positive")
    if window_ms > segment_ms:
        raise ConfigError(f"window {window_ms} ms exceeds the {segment_ms} ms segment")
    n = int(np.floor((segment_ms - window_ms) / stride_ms + 1e-9)) + 1
    return [window_ms + k * stride_ms for k in range(n)]


def window_eeg(eeg: torch.Tensor, t_end: float, window_ms: float,
               segment_ms: float = SEGMENT_MS) -> torch.Tensor:
    """Zero every sample outside [t_end - window_ms, t_end).

    Column k of a T-column segment sits at k * segment_ms / T.
    """
    if t_end - window_ms < 0 or t_end > segment_ms:
        raise ConfigError(f"window [{t_end - window_ms}, {t_end}] exceeds the segment")
    T = eeg.shape[-1]
    t = torch.arange(T, dtype=torch.float64) * segment_ms / T
    keep = (t >= t_end - window_ms - 1e-9) & (t < t_end - 1e-9)
    return eeg * keep.to(eeg.dtype)


def candidate_sets(data: SplitData, pool: Sequence[np.ndarray], n: int, seed: int):
    """For each item: its ground truth plus n-1 distinct distractors from ``pool``."""
    keys = [image_key(p) for p in pool]
    uniq = {k: p for k, p in zip(keys, pool)}
    sets = []
    for i, (e, gt) in enumerate(zip(data.entries, data.images)):
        own = image_key(gt)
        others = [k for k in sorted(uniq) if k != own]
        if len(others) < n - 1:
            raise DataError(f"only {len(others)} distractors available for {n}-way identification")
        rng = np.random.default_rng([seed, i])
        picks = rng.choice(len(others), size=n - 1, replace=False)
        cands = [uniq[others[j]] for j in picks]
        pos = int(rng.integers(n))
        cands.insert(pos, gt)
        sets.append((cands, pos))
    return sets


def n_way_size(data: SplitData, pool: Sequence[np.ndarray], n_way: int) -> int:
    distinct = len({image_key(p) for p in pool})
    n = min(n_way, distinct)
    if n < n_way:
        warnings.warn(f"only {distinct} distinct images; using {n}-way identification")
    return n


def temporal_decoding(model: JMVR, data: SplitData, cfg: RunConfig, pool: Sequence[np.ndarray],
                      seed: int, stride_ms: float | None = None) -> dict:
    """Sliding-window decoding: for each window end t, reconstruct from the EEG
    inside [t - window, t) and score n-way accuracy and DeepEMD.

    Also reports a full-signal run and an all-zero control.
    """
    stride = cfg.stride_ms if stride_ms is None else stride_ms
    provider = make_depth_provider(cfg.eval_depth_provider)
    extractor = make_feature_extractors(cfg.feature_extractor)[-1]
    n = n_way_size(data, pool, cfg.n_way)
    sets = candidate_sets(data, pool, n, seed)

    def score(eeg):
        recons = reconstruct(model, data, cfg, seed, eeg=eeg)
        acc = n_way_accuracy(list(recons), sets, extractor, n)
        dem = np.mean([deep_emd(resize(a, cfg.metric_size), resize(b, cfg.metric_size), provider,
                                cfg.deep_grid) for a, b in zip(recons, data.images)])
        return float(acc), float(dem)

    rows = []
    for t in window_ends(cfg.window_ms, stride):
        acc, dem = score(window_eeg(data.eeg, t, cfg.window_ms))
        rows.append({"t": t, "accuracy": acc, "DeepEMD": dem})
    full = score(data.eeg)
    zero = score(torch.zeros_like(data.eeg))
    return {"rows": rows, "n_way": n, "full": {"accuracy": full[0], "DeepEMD": full[1]},
            "zeroed": {"accuracy": zero[0], "DeepEMD": zero[1]}}


@torch.no_grad()
def channel_weights(model: JMVR, data: SplitData) -> np.ndarray:
    """Mean channel-attention weight per electrode over the split."""
    _, w = model.encoder(data.eeg, return_weights=True)
    return w.mean(dim=0).numpy()


# --------------------------------------------------------------------------
# output helpers


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def save_figure(fig, stem: str | Path) -> list[Path]:
    """Save SVG and PNG without timestamps so reruns give identical files."""
    import matplotlib

    stem = Path(stem)
    paths = [stem.with_suffix(".svg"), stem.with_suffix(".png")]
    with matplotlib.rc_context({"svg.hashsalt": "jmvr"}):
        fig.savefig(paths[0], format="svg", metadata={"Date": None})
    fig.savefig(paths[1], format="png", metadata={"Software": None}, dpi=100)
    return paths


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss(losses: Sequence[float], smooth: Sequence[float], stem):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(losses, lw=0.6, alpha=0.5, label="step loss")
    ax.plot(smooth, lw=1.5, label="smoothed")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("epsilon MSE")
    ax.legend()
    fig.tight_layout()
    paths = save_figure(fig, stem)
    plt.close(fig)
    return paths


def plot_mask_sweep(rows: Sequence[dict], modality: str, stem):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    r = [row["ratio"] for row in rows]
    ax.plot(r, [row["LabEMD"] for row in rows], "o-", label="LabEMD")
    ax2 = ax.twinx()
    ax2.plot(r, [row["DeepEMD"] for row in rows], "s--", color="C1", label="DeepEMD")
    ax.set_xlabel(f"{modality} mask ratio")
    ax.set_ylabel("LabEMD")
    ax2.set_ylabel("DeepEMD")
    fig.legend(loc="upper left")
    fig.tight_layout()
    paths = save_figure(fig, stem)
    plt.close(fig)
    return paths


def plot_temporal(rows: Sequence[dict], n_way: int, stem):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    t = [row["t"] for row in rows]
    ax.plot(t, [row["accuracy"] for row in rows], "o-", label=f"{n_way}-way accuracy")
    ax.axhline(1.0 / n_way, color="gray", lw=0.8, ls=":")
    ax2 = ax.twinx()
    ax2.plot(t, [row["DeepEMD"] for row in rows], "s--", color="C1", label="DeepEMD")
    ax.set_xlabel("window end (ms)")
    ax.set_ylabel("accuracy")
    ax2.set_ylabel("DeepEMD")
    fig.legend(loc="upper left")
    fig.tight_layout()
    paths = save_figure(fig, stem)
    plt.close(fig)
    return paths


def plot_channel_weights(coords, names, weight_sets: Sequence[np.ndarray], titles, stem):
    plt = _pyplot()
    k = len(weight_sets)
    fig, axes = plt.subplots(1, k, figsize=(4 * k, 3.8), squeeze=False)
    vmin = min(float(w.min()) for w in weight_sets)
    vmax = max(float(w.max()) for w in weight_sets)
    xy = np.asarray(coords)
    for ax, w, title in zip(axes[0], weight_sets, titles):
        sc = ax.scatter(xy[:, 0], xy[:, 1], c=w, s=220, cmap="viridis", vmin=vmin, vmax=vmax)
        for (x, y), name in zip(xy, names):
            ax.annotate(name, (x, y), fontsize=6, ha="center", va="center", color="white")
        ax.add_patch(plt.Circle((0, 0), 1.0, fill=False, lw=0.8))
        ax.set_xlim(-1.1, 1.1)
        ax.set_ylim(-1.1, 1.1)
        ax.set_aspect("equal")
        ax.axis("off")
        ax.set_title(title)
    fig.colorbar(sc, ax=list(axes[0]), shrink=0.8)
    paths = save_figure(fig, stem)
    plt.close(fig)
    return paths


@dataclass
class ExperimentRecord:
    config_hash: str
    command: str
    tables: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)
    plots: list = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        d = asdict(self)
        d["plots"] = [str(p) for p in self.plots]
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True), encoding="utf-8")


def dataset_pool(manifest: DatasetManifest) -> list[np.ndarray]:
    return [manifest.read_image(e) for e in sorted(manifest.entries, key=lambda e: e.stimulus_id)]
