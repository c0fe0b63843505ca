"""Reconstruction metrics: PixCorr, SSIM, LabEMD, DeepEMD and feature-space
identification.

Exact EMD is the transportation LP solved by HiGHS dual simplex; the Sinkhorn
solver (log domain) is kept alongside as a cheaper approximate route.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage, sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .augment import DepthProvider, depth_map, luma
from .errors import ConfigError, DataError, NumericError


def resize(img: np.ndarray, size: int = 256) -> np.ndarray:
    """Bilinear resize of H x W or H x W x 3 to size x size (half-pixel centers)."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[:2] == (size, size):
        return arr
    t = torch.as_tensor(arr, dtype=torch.float64)
    t = t[None, None] if t.dim() == 2 else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[0]
    return out[0].numpy() if arr.ndim == 2 else out.permute(1, 2, 0).numpy()


def pixcorr(a: np.ndarray, b: np.ndarray) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError("pixcorr needs images of equal size")
    x = x - x.mean()
    y = y - y.mean()
    denom = np.sqrt((x @ x) * (y @ y))
    if denom == 0:
        warnings.warn("pixcorr of a zero-variance image is defined as 0")
        return 0.0
    return float(np.clip((x @ y) / denom, -1.0, 1.0))


SSIM_WIN, SSIM_SIGMA, SSIM_K1, SSIM_K2 = 11, 1.5, 0.01, 0.03


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5) on luma.

    Borders where the window does not fit are excluded from the mean.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise DataError("ssim needs images of equal size")
    if x.ndim == 3:
        x, y = luma(x), luma(y)
    if min(x.shape) < SSIM_WIN:
        raise DataError(f"images smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    radius = SSIM_WIN // 2
    blur = lambda z: ndimage.gaussian_filter(z, SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s[radius:-radius, radius:-radius].mean())


# --------------------------------------------------------------------------
# optimal transport


@dataclass
class Histogram:
    masses: np.ndarray
    bin_centers: np.ndarray
    space_tag: str

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=np.float64)
        self.bin_centers = np.asarray(self.bin_centers, dtype=np.float64).reshape(len(self.masses), -1)
        if np.any(self.masses < 0):
            raise DataError("histogram masses must be nonnegative")
        if abs(self.masses.sum() - 1.0) > 1e-9:
            raise DataError(f"histogram masses sum to {self.masses.sum()}, expected 1")
        if not np.all(np.isfinite(self.bin_centers)):
            raise DataError("bin centers must be finite")

    def support(self) -> "Histogram":
        keep = self.masses > 0
        m = self.masses[keep]
        return Histogram(m / m.sum(), self.bin_centers[keep], self.space_tag)


@dataclass
class TransportPlan:
    plan: np.ndarray
    cost: float
    source: Histogram
    target: Histogram


def ground_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1), 0.0))


LP_TOL = 1e-10


def _transport_lp(a: np.ndarray, b: np.ndarray, M: np.ndarray) -> np.ndarray:
    n, m = M.shape
    rows = sparse.kron(sparse.identity(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.identity(m))
    A = sparse.vstack([rows, cols]).tocsr()
    # presolve misreports infeasibility when masses span many magnitudes (smooth
    # depth maps reach 1e-50); the default 1e-7 tolerances are too loose for us
    res = linprog(M.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs-ds",
                  options={"presolve": False, "primal_feasibility_tolerance": LP_TOL,
                           "dual_feasibility_tolerance": LP_TOL})
    if res.status != 0:
        raise NumericError(f"transport LP failed: {res.message}")
    return round_to_feasible(np.maximum(res.x.reshape(n, m), 0.0), a, b)


SINKHORN_ITERS = 500
SINKHORN_EPS_FACTOR = 0.05


def sinkhorn_plan(a, b, M, eps: float, n_iter: int = SINKHORN_ITERS) -> np.ndarray:
    """Entropic plan by log-domain Sinkhorn, rounded onto the transport polytope.

    Bias: the plan cost exceeds the exact cost by O(eps * log n).
    """
    la, lb = np.log(a), np.log(b)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    for _ in range(n_iter):
        f = -eps * logsumexp((g[None, :] - M) / eps + lb[None, :], axis=1)
        g = -eps * logsumexp((f[:, None] - M) / eps + la[:, None], axis=0)
    P = np.exp((f[:, None] + g[None, :] - M) / eps + la[:, None] + lb[None, :])
    return round_to_feasible(P, a, b)


def round_to_feasible(P: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shrink rows/columns that overshoot, then spread the deficit (exact marginals)."""
    r = P.sum(1)
    P = P * np.minimum(1.0, np.divide(a, r, out=np.ones_like(a), where=r > 0))[:, None]
    c = P.sum(0)
    P = P * np.minimum(1.0, np.divide(b, c, out=np.ones_like(b), where=c > 0))[None, :]
    da = np.maximum(a - P.sum(1), 0.0)
    db = np.maximum(b - P.sum(0), 0.0)
    if da.sum() > 0:
        P = P + np.outer(da, db) / da.sum()
    return P


def emd(h1: Histogram, h2: Histogram, method: str = "exact") -> tuple[float, TransportPlan]:
    if h1.space_tag != h2.space_tag:
        raise DataError(f"cannot compare histograms in {h1.space_tag} and {h2.space_tag}")
    s1, s2 = h1.support(), h2.support()
    M = ground_distance(s1.bin_centers, s2.bin_centers)
    if method == "exact":
        P = _transport_lp(s1.masses, s2.masses, M)
    elif method == "sinkhorn":
        med = float(np.median(M))
        if med == 0:
            P = _transport_lp(s1.masses, s2.masses, M)
        else:
            P = sinkhorn_plan(s1.masses, s2.masses, M, SINKHORN_EPS_FACTOR * med)
    else:
        raise ConfigError(f"unknown EMD method {method!r}")
    cost = float(max((P * M).sum(), 0.0))
    return cost, TransportPlan(P, cost, s1, s2)


# --------------------------------------------------------------------------
# LabEMD

_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(img: np.ndarray) -> np.ndarray:
    """sRGB in [0, 1] (..., 3) to CIELab under D65."""
    c = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    lin = np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)
    xyz = lin @ _SRGB_TO_XYZ.T / D65_WHITE
    delta = 6.0 / 29.0
    f = np.where(xyz > delta ** 3, np.cbrt(xyz), xyz / (3 * delta ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


LAB_RANGES = ((0.0, 100.0), (-110.0, 110.0), (-110.0, 110.0))


def lab_histogram(img: np.ndarray, bins_per_axis: int = 8, centers: str = "centroid") -> Histogram:
    """3D CIELab histogram over L in [0, 100], a, b in [-110, 110].

    ``centers="centroid"`` places each occupied bin at the mean Lab color of
    its pixels; ``"grid"`` uses the geometric bin centers.
    """
    lab = srgb_to_lab(img).reshape(-1, 3)
    idx = []
    for k, (lo, hi) in enumerate(LAB_RANGES):
        i = np.floor((lab[:, k] - lo) / (hi - lo) * bins_per_axis).astype(int)
        idx.append(np.clip(i, 0, bins_per_axis - 1))
    flat = (idx[0] * bins_per_axis + idx[1]) * bins_per_axis + idx[2]
    n_bins = bins_per_axis ** 3
    counts = np.bincount(flat, minlength=n_bins).astype(np.float64)
    if centers == "centroid":
        sums = np.stack([np.bincount(flat, weights=lab[:, k], minlength=n_bins) for k in range(3)], axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            pos = sums / counts[:, None]
    elif centers == "grid":
        axes = [lo + (np.arange(bins_per_axis) + 0.5) * (hi - lo) / bins_per_axis for lo, hi in LAB_RANGES]
        pos = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    else:
        raise ConfigError(f"unknown center rule {centers!r}")
    keep = counts > 0
    return Histogram(counts[keep] / counts.sum(), pos[keep], "lab3d")


def lab_emd(a: np.ndarray, b: np.ndarray, bins_per_axis: int = 8, method: str = "exact") -> float:
    return emd(lab_histogram(a, bins_per_axis), lab_histogram(b, bins_per_axis), method)[0]


# --------------------------------------------------------------------------
# DeepEMD


def grid_histogram(mass_map: np.ndarray, grid: int) -> Histogram:
    """Area-average an H x W map to grid x grid cells at pixel-center coordinates in [0, 1]^2."""
    m = np.asarray(mass_map, dtype=np.float64)
    H, W = m.shape
    if H % grid or W % grid:
        m = resize(m, grid * int(np.ceil(max(H, W) / grid)))
        H, W = m.shape
    cells = m.reshape(grid, H // grid, grid, W // grid).mean(axis=(1, 3))
    total = cells.sum()
    if total <= 0:
        raise DataError("depth map carries no mass")
    centers = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    return Histogram((cells / total).ravel(), np.stack([xx.ravel(), yy.ravel()], axis=1), "grid2d")


def deep_emd(a: np.ndarray, b: np.ndarray, provider: DepthProvider, grid: int = 16,
             method: str = "exact") -> float:
    ha = grid_histogram(depth_map(a, provider), grid)
    hb = grid_histogram(depth_map(b, provider), grid)
    return emd(ha, hb, method)[0]


# --------------------------------------------------------------------------
# feature-space identification


class RandomConvFeatures:
    """Frozen, seeded random conv net; features are the unit-normalized,
    spatially pooled activations after conv layer ``layer`` (1..5)."""

    def __init__(self, layer: int = 5, seed: int = 0, input_size: int = 64):
        if not 1 <= layer <= 5:
            raise ConfigError("layer must be in 1..5")
        self.name = f"RandConv({layer})"
        self.layer = layer
        self.input_size = input_size
        gen = torch.Generator().manual_seed(seed)
        widths = [3, 16, 32, 64, 64, 128]
        self.convs = []
        for i in range(5):
            w = torch.randn(widths[i + 1], widths[i], 3, 3, generator=gen, dtype=torch.float64)
            w /= np.sqrt(widths[i] * 9)
            self.convs.append(w)

    def features(self, img: np.ndarray) -> np.ndarray:
        x = torch.as_tensor(resize(img, self.input_size), dtype=torch.float64).permute(2, 0, 1)[None]
        x = x - 0.5
        for i, w in enumerate(self.convs[: self.layer]):
            x = F.relu(F.conv2d(x, w, padding=1))
            if i < 4:
                x = F.avg_pool2d(x, 2) if i % 2 == 0 else x
        pooled = F.adaptive_avg_pool2d(x, 4).flatten().numpy()
        n = np.linalg.norm(pooled)
        if n == 0:
            return np.full_like(pooled, 1.0 / np.sqrt(pooled.size))
        return pooled / n


FEATURE_EXTRACTORS: dict[str, Callable] = {
    "randconv": lambda: [RandomConvFeatures(2), RandomConvFeatures(5)],
}


def make_feature_extractors(name: str):
    try:
        return FEATURE_EXTRACTORS[name]()
    except KeyError:
        raise ConfigError(f"unknown feature extractor {name!r}") from None


def _feats(images, extractor) -> np.ndarray:
    return np.stack([extractor.features(im) for im in images])


def two_way_identification(recons: Sequence, gts: Sequence, extractor) -> float:
    """Fraction of ordered pairs (i, j != i) where recon_i is closer (cosine) to
    gt_i than to gt_j; ties count one half."""
    if len(recons) != len(gts):
        raise DataError("recons and gts must pair up")
    n = len(recons)
    if n < 2:
        raise DataError("two-way identification needs at least 2 pairs")
    r = _feats(recons, extractor)
    g = _feats(gts, extractor)
    sim = r @ g.T
    own = np.diag(sim)[:, None]
    off = ~np.eye(n, dtype=bool)
    wins = (own > sim) & off
    ties = np.isclose(own, sim, rtol=0, atol=1e-12) & off
    return float((wins.sum() + 0.5 * ties.sum()) / off.sum())


def n_way_accuracy(recons: Sequence, candidate_sets: Sequence, extractor, n: int) -> float:
    """``candidate_sets[i]`` is (candidates, true_index); correct when the true
    candidate has the highest cosine similarity to recon_i."""
    if len(recons) != len(candidate_sets):
        raise DataError("one candidate set per reconstruction")
    hits = 0
    for rec, (cands, true_idx) in zip(recons, candidate_sets):
        if len(cands) != n:
            raise DataError(f"candidate set has {len(cands)} images, expected {n}")
        sims = _feats(cands, extractor) @ extractor.features(rec)
        hits += int(np.argmax(sims) == true_idx)
    return hits / len(recons)


# --------------------------------------------------------------------------
# reports

TABLE_COLUMNS = ("PixCorr", "SSIM", "LabEMD", "DeepEMD")


def pair_metrics(recon: np.ndarray, gt: np.ndarray, provider: DepthProvider, size: int = 256,
                 lab_bins: int = 8, deep_grid: int = 16) -> dict[str, float]:
    r, g = resize(recon, size), resize(gt, size)
    return {
        "PixCorr": pixcorr(r, g),
        "SSIM": ssim(r, g),
        "LabEMD": lab_emd(r, g, lab_bins),
        "DeepEMD": deep_emd(r, g, provider, deep_grid),
    }


def metric_report(ids: Sequence[str], recons: Sequence, gts: Sequence, provider: DepthProvider,
                  extractors: Sequence = (), size: int = 256, lab_bins: int = 8,
                  deep_grid: int = 16) -> dict:
    rows = []
    for sid, r, g in zip(ids, recons, gts):
        rows.append({"stimulus_id": sid, **pair_metrics(r, g, provider, size, lab_bins, deep_grid)})
    agg = {k: float(np.mean([row[k] for row in rows])) for k in TABLE_COLUMNS}
    if len(recons) >= 2:
        for ex in extractors:
            agg[ex.name] = two_way_identification(recons, gts, ex)
    return {"rows": rows, "aggregate": agg}
