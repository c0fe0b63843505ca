"""Edge / saturation / depth views of a stimulus and their fusion into one latent."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from .errors import ConfigError, DataError, ProviderError

CANNY_LOW, CANNY_HIGH = 50.0, 150.0


def luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an H x W x 3 image."""
    img = np.asarray(img, dtype=np.float64)
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DataError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def canny_edges(img: np.ndarray, low: float = CANNY_LOW, high: float = CANNY_HIGH) -> np.ndarray:
    """Binary Canny edge map of an RGB image in [0, 1].

    Luma on the 0-255 scale, 3x3 Gaussian ([1, 2, 1] / 4 separable), Sobel
    gradients, four-direction non-maximum suppression and 8-connected
    hysteresis between ``low`` and ``high``.
    """
    gray = luma(_check_rgb(img)) * 255.0
    k = np.array([0.25, 0.5, 0.25])
    smooth = ndimage.convolve1d(ndimage.convolve1d(gray, k, axis=0, mode="nearest"), k, axis=1, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    P = np.pad(mag, 1, mode="constant")
    H, W = mag.shape

    def shifted(dr, dc):
        return P[1 + dr:1 + dr + H, 1 + dc:1 + dc + W]

    # neighbor offsets along the gradient for each quantized direction
    # (rows grow downward, so positive gy points down)
    bins = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    keep = np.zeros_like(mag, dtype=bool)
    for sel, (dr, dc) in bins:
        fwd = shifted(dr, dc)
        back = shifted(-dr, -dc)
        # strict on one side, non-strict on the other, so plateaus thin to one pixel
        keep |= sel & (mag > back) & (mag >= fwd)
    nms = np.where(keep, mag, 0.0)

    strong = nms > high
    weak = nms > low
    labels, n = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return np.zeros_like(mag, dtype=np.uint8)
    good = np.zeros(n + 1, dtype=bool)
    good[np.unique(labels[strong])] = True
    good[0] = False
    return good[labels].astype(np.uint8)


def saturation_map(img: np.ndarray) -> np.ndarray:
    img = _check_rgb(img)
    mx = img.max(axis=-1)
    mn = img.min(axis=-1)
    out = np.zeros_like(mx)
    np.divide(mx - mn, mx, out=out, where=mx > 0)
    return out


# --------------------------------------------------------------------------
# depth providers


class DepthProvider(Protocol):
    name: str

    def __call__(self, img: np.ndarray) -> np.ndarray: ...


class VerticalGradientDepth:
    name = "vertical-gradient"

    def __call__(self, img):
        H, W = img.shape[:2]
        return np.repeat((np.arange(H) / max(H - 1, 1))[:, None], W, axis=1)


class LuminanceDepth:
    """Treats brightness as nearness. Used as a test stand-in and as the
    default DeepEMD provider for images with no precomputed depth."""

    name = "luminance"

    def __call__(self, img):
        return luma(img)


def image_key(img: np.ndarray) -> str:
    u8 = np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255).astype(np.uint8)
    return hashlib.sha1(np.ascontiguousarray(u8).tobytes() + str(u8.shape).encode()).hexdigest()


class FileDepthProvider:
    """Looks up precomputed depth maps by image content hash.

    For the synthetic dataset these are the generation-time object depths.
    """

    name = "file"

    def __init__(self, index: dict[str, Path]):
        self.index = dict(index)

    @classmethod
    def from_manifest(cls, manifest) -> "FileDepthProvider":
        index = {}
        for e in manifest.entries:
            if e.depth_file is not None:
                index[image_key(manifest.read_image(e))] = manifest.root / e.depth_file
        return cls(index)

    def __call__(self, img):
        from .data import read_f32_map

        key = image_key(img)
        if key not in self.index:
            raise KeyError(f"no precomputed depth for image {key[:12]}")
        return read_f32_map(self.index[key])


DEPTH_PROVIDERS: dict[str, Callable[..., DepthProvider]] = {
    "vertical-gradient": VerticalGradientDepth,
    "luminance": LuminanceDepth,
}


def make_depth_provider(name: str, manifest=None) -> DepthProvider:
    if name == "file":
        if manifest is None:
            raise ConfigError("the 'file' depth provider needs a dataset manifest")
        return FileDepthProvider.from_manifest(manifest)
    try:
        return DEPTH_PROVIDERS[name]()
    except KeyError:
        raise ConfigError(f"unknown depth provider {name!r}") from None


def depth_map(img: np.ndarray, provider: DepthProvider) -> np.ndarray:
    """Provider output min-max normalized to [0, 1]; a constant map becomes 0.5."""
    name = getattr(provider, "name", type(provider).__name__)
    try:
        d = np.asarray(provider(img), dtype=np.float64)
    except Exception as exc:
        raise ProviderError(name, str(exc)) from exc
    if d.shape != np.shape(img)[:2]:
        raise ProviderError(name, f"depth shape {d.shape} does not match image {np.shape(img)[:2]}")
    if not np.all(np.isfinite(d)):
        raise ProviderError(name, "non-finite depth values")
    lo, hi = d.min(), d.max()
    if hi - lo <= 1e-12:
        return np.full_like(d, 0.5)
    return (d - lo) / (hi - lo)


@dataclass
class AugmentedImageSet:
    original: np.ndarray
    edges: np.ndarray
    saturation: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        hw = self.original.shape[:2]
        for name in ("edges", "saturation", "depth"):
            if getattr(self, name).shape != hw:
                raise DataError(f"{name} view has shape {getattr(self, name).shape}, expected {hw}")

    def views(self) -> np.ndarray:
        """(4, 3, H, W): original, then the single-channel views replicated to RGB."""
        rgb = [np.moveaxis(self.original, -1, 0)]
        for v in (self.edges, self.saturation, self.depth):
            rgb.append(np.repeat(np.asarray(v, dtype=np.float64)[None], 3, axis=0))
        return np.stack(rgb)


def augment(img: np.ndarray, provider: DepthProvider) -> AugmentedImageSet:
    img = _check_rgb(img)
    return AugmentedImageSet(img, canny_edges(img).astype(np.float64), saturation_map(img),
                             depth_map(img, provider))


def stack_views(sets: Sequence[AugmentedImageSet], n_views: int = 4) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.views()[:n_views] for s in sets]), dtype=torch.get_default_dtype())


class ImageAutoencoder(nn.Module):
    """Stand-in for the pretrained VAE.

    ``encode``: one stride-p patch convolution shared by all views, per-token
    concatenation of the view embeddings, one affine map to width D.
    ``decode``: per-token affine read-out to p x p x 3 pixels, offset by 0.5
    and clamped to [0, 1].
    """

    def __init__(self, image_size: int = 64, patch: int = 8, D: int = 64,
                 view_width: int = 64, n_views: int = 4):
        super().__init__()
        if image_size % patch:
            raise ConfigError("image_size must be a multiple of the patch size")
        self.image_size = image_size
        self.patch = patch
        self.grid = image_size // patch
        self.n_views = n_views
        self.D = D
        self.embed = nn.Conv2d(3, view_width, patch, stride=patch)
        self.fuse = nn.Linear(n_views * view_width, D)
        self.readout = nn.Linear(D, patch * patch * 3)

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    def view_embeddings(self, views: torch.Tensor) -> torch.Tensor:
        # (B, V, 3, H, W) -> (B, L, V * d)
        B, V = views.shape[:2]
        if V != self.n_views or views.shape[-2:] != (self.image_size, self.image_size):
            raise DataError(f"expected (B, {self.n_views}, 3, {self.image_size}, {self.image_size}) views, "
                            f"got {tuple(views.shape)}")
        e = self.embed(views.reshape(B * V, 3, self.image_size, self.image_size))
        e = e.flatten(2).transpose(1, 2)  # (B*V, L, d)
        e = e.reshape(B, V, self.n_tokens, -1).permute(0, 2, 1, 3)
        return e.reshape(B, self.n_tokens, -1)

    def encode(self, views: torch.Tensor) -> torch.Tensor:
        return self.fuse(self.view_embeddings(views))

    def decode_raw(self, latent: torch.Tensor) -> torch.Tensor:
        B = latent.shape[0]
        p, g = self.patch, self.grid
        x = self.readout(latent).reshape(B, g, g, p, p, 3)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(B, g * p, g * p, 3) + 0.5

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.shape[-2:] != (self.n_tokens, self.D):
            raise DataError(f"latent must be (L={self.n_tokens}, D={self.D}), got {tuple(latent.shape)}")
        return self.decode_raw(latent).clamp(0.0, 1.0)


def fuse_to_latent(aset: AugmentedImageSet, model: ImageAutoencoder) -> torch.Tensor:
    views = stack_views([aset], model.n_views)
    return model.encode(views)[0]
