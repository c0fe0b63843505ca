"""EEG dataset format, preprocessing and the deterministic synthetic generator.

On-disk layout of a dataset directory::

    manifest.json      entries, sampling rate, channel names, montage
    eeg/<id>.f32       raw recording, little-endian float32, C x N row-major
    images/<id>.png    stimulus image
    captions/<id>.txt  UTF-8 caption
    depth/<id>.f32     generation-time depth map (+ <id>.json sidecar)
    stats.json         per-channel normalization statistics (train split)
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError

# 17 occipito-parietal electrodes commonly kept for visual decoding, with
# approximate flattened 2D scalp positions (x: left/right, y: anterior/posterior).
POSTERIOR_17 = {
    "Pz": (0.0, -0.45), "P3": (-0.35, -0.45), "P7": (-0.75, -0.5),
    "O1": (-0.3, -0.9), "Oz": (0.0, -0.95), "O2": (0.3, -0.9),
    "P4": (0.35, -0.45), "P8": (0.75, -0.5), "P1": (-0.18, -0.45),
    "P5": (-0.55, -0.47), "PO7": (-0.6, -0.72), "PO3": (-0.3, -0.68),
    "POz": (0.0, -0.7), "PO4": (0.3, -0.68), "PO8": (0.6, -0.72),
    "P6": (0.55, -0.47), "P2": (0.18, -0.45),
}

COLORS = {
    "red": (0.86, 0.12, 0.12),
    "green": (0.15, 0.65, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.95, 0.85, 0.15),
    "purple": (0.55, 0.20, 0.70),
    "orange": (0.95, 0.55, 0.10),
    "cyan": (0.10, 0.75, 0.80),
    "pink": (0.95, 0.50, 0.70),
    "white": (0.95, 0.95, 0.95),
    "black": (0.08, 0.08, 0.08),
    "brown": (0.50, 0.30, 0.15),
    "gray": (0.50, 0.50, 0.50),
}
SHAPES = ("circle", "square", "triangle")


@dataclass
class EEGRecording:
    data: np.ndarray
    sampling_rate: float
    stimulus_onset_index: int
    subject_id: str = ""
    stimulus_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or min(self.data.shape) < 1:
            raise DataError(f"EEG data must be a non-empty C x N matrix, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("EEG data contains non-finite values")
        if self.sampling_rate <= 0:
            raise DataError("sampling_rate must be positive")
        pre = self.stimulus_onset_index
        post = self.data.shape[1] - self.stimulus_onset_index
        if pre < 0.2 * self.sampling_rate - 1e-9 or post < 1.0 * self.sampling_rate - 1e-9:
            raise DataError(
                f"recording needs >=200 ms before and >=1000 ms after onset "
                f"(have {pre} / {post} samples at {self.sampling_rate} Hz)"
            )

    def with_data(self, data: np.ndarray) -> "EEGRecording":
        return EEGRecording(data, self.sampling_rate, self.stimulus_onset_index,
                            self.subject_id, self.stimulus_id)

    @property
    def n_channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class PreprocessConfig:
    band_low: float = 0.1
    band_high: float = 100.0
    segment_start_ms: float = 0.0
    segment_end_ms: float = 1000.0
    baseline_ms: float = 200.0
    target_length: int = 256

    def validate(self, sampling_rate: float) -> None:
        if not 0 < self.band_low < self.band_high < sampling_rate / 2:
            raise DataError(
                f"need 0 < band_low < band_high < Nyquist ({sampling_rate / 2} Hz), "
                f"got {self.band_low}..{self.band_high}"
            )
        if self.segment_end_ms <= self.segment_start_ms:
            raise DataError("segment_end_ms must exceed segment_start_ms")
        T = self.target_length
        if T < 2 or T & (T - 1):
            raise DataError(f"target_length must be a power of two, got {T}")


def bandpass(rec: EEGRecording, low: float, high: float) -> EEGRecording:
    """Zero every FFT bin outside [low, high] Hz, per channel."""
    nyquist = rec.sampling_rate / 2
    if not 0 <= low < high:
        raise DataError(f"invalid band {low}..{high} Hz")
    if high >= nyquist:
        raise DataError(f"band_high {high} Hz must be below Nyquist {nyquist} Hz")
    n = rec.data.shape[1]
    spectrum = np.fft.rfft(rec.data, axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / rec.sampling_rate)
    spectrum[:, (freqs < low) | (freqs > high)] = 0
    return rec.with_data(np.fft.irfft(spectrum, n=n, axis=1))


def _ms_to_samples(ms: float, fs: float) -> int:
    return int(round(ms * fs / 1000.0))


def baseline_correct(rec: EEGRecording, baseline_ms: float = 200.0) -> EEGRecording:
    n_base = _ms_to_samples(baseline_ms, rec.sampling_rate)
    onset = rec.stimulus_onset_index
    if n_base < 1 or onset - n_base < 0:
        raise DataError(f"not enough pre-stimulus data for a {baseline_ms} ms baseline")
    mean = rec.data[:, onset - n_base:onset].mean(axis=1, keepdims=True)
    return rec.with_data(rec.data - mean)


def segment_and_resample(rec: EEGRecording, cfg: PreprocessConfig) -> np.ndarray:
    """Cut [start, end) ms relative to onset and linearly resample to T columns.

    Output column j sits at source position ``start + j * n_seg / T``, so when
    the segment already has T samples this is an exact slice.
    """
    fs = rec.sampling_rate
    start = rec.stimulus_onset_index + cfg.segment_start_ms * fs / 1000.0
    n_seg = (cfg.segment_end_ms - cfg.segment_start_ms) * fs / 1000.0
    if start < 0 or start + n_seg > rec.data.shape[1] + 1e-9:
        raise DataError(
            f"segment [{cfg.segment_start_ms}, {cfg.segment_end_ms}) ms exceeds the recording"
        )
    T = cfg.target_length
    pos = start + np.arange(T) * (n_seg / T)
    src = np.arange(rec.data.shape[1])
    out = np.stack([np.interp(pos, src, ch) for ch in rec.data])
    return out


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: list[int] = field(default_factory=list)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "flagged": list(self.flagged)}

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64),
                   list(d.get("flagged", [])))


STD_FLOOR = 1e-8


def fit_norm_stats(train_set: Sequence[np.ndarray]) -> NormStats:
    """Per-channel mean/std pooled over all training matrices and time."""
    if len(train_set) == 0:
        raise DataError("empty training set")
    stacked = np.concatenate([np.asarray(x, dtype=np.float64) for x in train_set], axis=1)
    mean = stacked.mean(axis=1)
    std = stacked.std(axis=1)
    flagged = [int(c) for c in np.flatnonzero(std < STD_FLOOR)]
    if flagged:
        warnings.warn(f"zero-variance channels {flagged}; std floored at {STD_FLOOR}")
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean, std, flagged)


def normalize(train_set: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    return fit_norm_stats(train_set).apply(np.asarray(x, dtype=np.float64))


def preprocess_recording(rec: EEGRecording, cfg: PreprocessConfig) -> np.ndarray:
    """Band-pass, baseline-correct and segment one recording (no normalization)."""
    cfg.validate(rec.sampling_rate)
    rec = bandpass(rec, cfg.band_low, cfg.band_high)
    rec = baseline_correct(rec, cfg.baseline_ms)
    return segment_and_resample(rec, cfg)


# --------------------------------------------------------------------------
# dataset manifest


@dataclass
class ManifestEntry:
    subject_id: str
    stimulus_id: str
    class_id: int
    eeg_file: str
    image_file: str
    caption_file: str
    depth_file: str | None
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry]
    sampling_rate: float
    channel_names: list[str]
    montage_coords: list[tuple[float, float]]
    eeg_shape: tuple[int, int]
    stimulus_onset_index: int
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        if len(self.channel_names) != self.eeg_shape[0]:
            raise DataError("channel_names length does not match EEG channel count")
        coords = [tuple(c) for c in self.montage_coords]
        if len(coords) != len(self.channel_names):
            raise DataError("montage must give one coordinate per channel")
        if len(set(coords)) != len(coords):
            raise DataError("montage coordinates must be unique per channel")
        for x, y in coords:
            if not (-1 <= x <= 1 and -1 <= y <= 1):
                raise DataError("montage coordinates must lie in [-1, 1]^2")
        for e in self.entries:
            if e.split not in ("train", "test"):
                raise DataError(f"bad split {e.split!r} for {e.stimulus_id}")
            for rel in (e.eeg_file, e.image_file, e.caption_file, e.depth_file):
                if rel is not None and not (self.root / rel).exists():
                    raise DataError(f"missing file {rel} referenced by {e.stimulus_id}")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def to_json(self) -> dict:
        return {
            "format": "jmvr-dataset/1",
            "sampling_rate": self.sampling_rate,
            "channel_names": list(self.channel_names),
            "montage_coords": [list(c) for c in self.montage_coords],
            "eeg_shape": list(self.eeg_shape),
            "eeg_dtype": "<f4",
            "stimulus_onset_index": self.stimulus_onset_index,
            "meta": self.meta,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self) -> Path:
        path = self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")
        return path

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise DataError(f"no manifest.json in {root}")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
            m = cls(
                root=root,
                entries=[ManifestEntry(**e) for e in d["entries"]],
                sampling_rate=float(d["sampling_rate"]),
                channel_names=list(d["channel_names"]),
                montage_coords=[tuple(c) for c in d["montage_coords"]],
                eeg_shape=tuple(d["eeg_shape"]),
                stimulus_onset_index=int(d["stimulus_onset_index"]),
                meta=d.get("meta", {}),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed manifest: {exc}") from exc
        m.validate()
        return m

    # readers

    def read_recording(self, e: ManifestEntry) -> EEGRecording:
        raw = np.fromfile(self.root / e.eeg_file, dtype="<f4")
        C, N = self.eeg_shape
        if raw.size != C * N:
            raise DataError(f"{e.eeg_file}: expected {C * N} floats, found {raw.size}")
        return EEGRecording(raw.reshape(C, N).astype(np.float64), self.sampling_rate,
                            self.stimulus_onset_index, e.subject_id, e.stimulus_id)

    def read_image(self, e: ManifestEntry) -> np.ndarray:
        return load_png(self.root / e.image_file)

    def read_caption(self, e: ManifestEntry) -> str:
        return (self.root / e.caption_file).read_text(encoding="utf-8")

    def read_depth(self, e: ManifestEntry) -> np.ndarray:
        if e.depth_file is None:
            raise DataError(f"{e.stimulus_id} has no depth map")
        return read_f32_map(self.root / e.depth_file)

    def load_stats(self) -> tuple[NormStats, PreprocessConfig]:
        path = self.root / "stats.json"
        if not path.exists():
            raise DataError(f"no stats.json in {self.root}; run preprocess first")
        d = json.loads(path.read_text(encoding="utf-8"))
        return NormStats.from_json(d["stats"]), PreprocessConfig(**d["preprocess"])


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    u8 = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG", optimize=False)


def write_f32_map(path: str | Path, arr: np.ndarray) -> None:
    """Write an H x W float map as raw little-endian float32 plus a JSON sidecar."""
    path = Path(path)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    arr.tofile(path)
    path.with_suffix(".json").write_text(
        json.dumps({"shape": list(arr.shape), "dtype": "<f4"}), encoding="utf-8")


def read_f32_map(path: str | Path) -> np.ndarray:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return np.fromfile(path, dtype="<f4").reshape(side["shape"]).astype(np.float64)


def compute_dataset_stats(manifest: DatasetManifest, cfg: PreprocessConfig) -> NormStats:
    train = [preprocess_recording(manifest.read_recording(e), cfg) for e in manifest.split("train")]
    return fit_norm_stats(train)


def write_stats(manifest: DatasetManifest, cfg: PreprocessConfig) -> NormStats:
    stats = compute_dataset_stats(manifest, cfg)
    payload = {"preprocess": asdict(cfg), "stats": stats.to_json()}
    (manifest.root / "stats.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return stats


def load_preprocessed(manifest: DatasetManifest, entries: Sequence[ManifestEntry]) -> np.ndarray:
    """Preprocessed, normalized EEG for ``entries`` as an (n, C, T) array."""
    stats, cfg = manifest.load_stats()
    return np.stack([stats.apply(preprocess_recording(manifest.read_recording(e), cfg))
                     for e in entries])


# --------------------------------------------------------------------------
# synthetic generator


def montage_for(C: int) -> tuple[list[str], list[tuple[float, float]]]:
    if C == len(POSTERIOR_17):
        return list(POSTERIOR_17), list(POSTERIOR_17.values())
    names = [f"Ch{i}" for i in range(C)]
    # golden-angle spiral inside the unit disc: unique, well spread
    coords = []
    for i in range(C):
        r = 0.95 * math.sqrt((i + 0.5) / C)
        th = i * math.pi * (3 - math.sqrt(5))
        coords.append((round(r * math.cos(th), 6), round(r * math.sin(th), 6)))
    return names, coords


def _erp_template(rng: np.random.Generator, C: int, fs: float, n_pre: int, n_post: int,
                  channels: np.ndarray, n_components: int = 3) -> np.ndarray:
    """Smooth post-stimulus waveform: Gaussian-windowed oscillations with random
    latency/frequency and random spatial loadings on ``channels``."""
    t_ms = (np.arange(n_post) / fs) * 1000.0
    out = np.zeros((C, n_pre + n_post))
    for _ in range(n_components):
        lat = rng.uniform(80, 750)
        width = rng.uniform(40, 120)
        freq = rng.uniform(2.0, 12.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.exp(-0.5 * ((t_ms - lat) / width) ** 2) * np.cos(
            2 * np.pi * freq * (t_ms - lat) / 1000.0 + phase)
        loading = np.zeros(C)
        loading[channels] = rng.normal(size=len(channels))
        out[:, n_pre:] += loading[:, None] * wave[None, :]
    post = out[:, n_pre:]
    return out / np.sqrt(np.mean(post[channels] ** 2))


def _layout(rng: np.random.Generator, n_objects: int) -> list[dict]:
    objs: list[dict] = []
    while len(objs) < n_objects:
        cx, cy = rng.uniform(0.25, 0.75, size=2)
        if all(math.hypot(cx - o["cx"], cy - o["cy"]) > 0.28 for o in objs):
            objs.append({"cx": float(cx), "cy": float(cy), "size": float(rng.uniform(0.16, 0.24))})
    depths = np.sort(rng.choice(np.linspace(0.4, 1.0, 7), size=n_objects, replace=False))
    for o, d in zip(objs, rng.permutation(depths)):
        o["depth"] = float(d)
    return objs


def _palette(rng: np.random.Generator, n_objects: int) -> dict:
    names = list(COLORS)
    picks = rng.choice(len(names), size=n_objects + 1, replace=False)
    return {
        "background": names[picks[0]],
        "colors": [names[i] for i in picks[1:]],
        "shapes": [SHAPES[i] for i in rng.integers(0, len(SHAPES), size=n_objects)],
    }


def render_scene(layout: list[dict], palette: dict, size: int, supersample: int = 4):
    """Rasterize a scene; returns (rgb H x W x 3, nearness H x W), nearer = larger."""
    S = size * supersample
    yy, xx = np.mgrid[0:S, 0:S]
    u = (xx + 0.5) / S
    v = (yy + 0.5) / S
    rgb = np.empty((S, S, 3))
    rgb[:] = COLORS[palette["background"]]
    depth = np.full((S, S), 0.1)
    order = np.argsort([o["depth"] for o in layout])  # far first
    for i in order:
        o = layout[i]
        shape = palette["shapes"][i]
        dx, dy, r = u - o["cx"], v - o["cy"], o["size"]
        if shape == "circle":
            mask = dx ** 2 + dy ** 2 <= r ** 2
        elif shape == "square":
            mask = (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
        else:
            mask = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
        rgb[mask] = COLORS[palette["colors"][i]]
        depth[mask] = o["depth"]
    rgb = rgb.reshape(size, supersample, size, supersample, 3).mean(axis=(1, 3))
    depth = depth.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
    return rgb, depth


def caption_for(palette: dict) -> str:
    parts = [f"a {c} {s}" for c, s in zip(palette["colors"], palette["shapes"])]
    return " and ".join(parts) + f" on a {palette['background']} background"


def gen_synthetic(
    out_dir: str | Path,
    seed: int = 0,
    n_classes: int = 4,
    n_per_class: int = 2,
    C: int = 17,
    T: int = 256,
    image_size: int = 64,
    *,
    n_test_per_class: int = 0,
    n_layouts: int | None = None,
    n_palettes: int | None = None,
    palette_eeg_weight: float = 0.3,
    noise_scale: float = 0.5,
    signal_channels: Sequence[int] | None = None,
    sampling_rate: float = 250.0,
    n_objects: int = 2,
) -> DatasetManifest:
    """Write a deterministic synthetic dataset and return its manifest.

    Each class is a (layout, palette) pair. The layout fixes object positions,
    sizes and depth order; the palette fixes colors and shape kinds, which is
    all the caption mentions. The class EEG template is a layout waveform plus
    ``palette_eeg_weight`` times a palette waveform. With the defaults every
    class has its own layout and palette; passing fewer ``n_layouts`` /
    ``n_palettes`` makes classes share factors so that text and EEG each carry
    information the other lacks.
    """
    out = Path(out_dir)
    n_layouts = n_classes if n_layouts is None else n_layouts
    n_palettes = n_classes if n_palettes is None else n_palettes
    if n_layouts * n_palettes < n_classes:
        raise DataError("n_layouts * n_palettes must be >= n_classes")
    rng = np.random.default_rng(seed)
    fs = sampling_rate
    n_pre = math.ceil(0.2 * fs)
    n_post = math.ceil(1.0 * fs)
    channels = np.arange(C) if signal_channels is None else np.asarray(signal_channels)

    layouts = [_layout(rng, n_objects) for _ in range(n_layouts)]
    palettes: list[dict] = []
    while len(palettes) < n_palettes:
        p = _palette(rng, n_objects)
        if p not in palettes:
            palettes.append(p)
    factors = [(k % n_layouts, (k + k // n_layouts) % n_palettes) for k in range(n_classes)]
    if len(set(factors)) != n_classes:
        raise DataError("class factor assignment is not injective; adjust n_layouts/n_palettes")

    for _ in range(100):
        lay_tpl = [_erp_template(rng, C, fs, n_pre, n_post, channels) for _ in range(n_layouts)]
        pal_tpl = [_erp_template(rng, C, fs, n_pre, n_post, channels) for _ in range(n_palettes)]
        templates = [lay_tpl[l] + palette_eeg_weight * pal_tpl[p] for l, p in factors]
        if _templates_separable(templates, factors, n_pre):
            break
    else:  # pragma: no cover - astronomically unlikely
        raise DataError("could not draw separable class templates")

    for sub in ("eeg", "images", "captions", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    names, coords = montage_for(C)
    entries: list[ManifestEntry] = []
    for k, (l, p) in enumerate(factors):
        rgb, depth = render_scene(layouts[l], palettes[p], image_size)
        caption = caption_for(palettes[p])
        for j in range(n_per_class + n_test_per_class):
            split = "train" if j < n_per_class else "test"
            sid = f"c{k:03d}_t{j:02d}"
            noise = noise_scale * rng.normal(size=templates[k].shape)
            offset = rng.normal(scale=2.0, size=(C, 1))
            eeg = (templates[k] + noise + offset).astype("<f4")
            eeg.tofile(out / "eeg" / f"{sid}.f32")
            save_png(out / "images" / f"{sid}.png", rgb)
            (out / "captions" / f"{sid}.txt").write_text(caption, encoding="utf-8")
            write_f32_map(out / "depth" / f"{sid}.f32", depth)
            entries.append(ManifestEntry("sub-01", sid, k, f"eeg/{sid}.f32", f"images/{sid}.png",
                                         f"captions/{sid}.txt", f"depth/{sid}.f32", split))

    manifest = DatasetManifest(
        root=out, entries=entries, sampling_rate=fs, channel_names=names,
        montage_coords=coords, eeg_shape=(C, n_pre + n_post), stimulus_onset_index=n_pre,
        meta={
            "generator": "synthetic", "seed": seed, "n_classes": n_classes,
            "n_layouts": n_layouts, "n_palettes": n_palettes,
            "class_factors": [list(f) for f in factors],
            "signal_channels": [int(c) for c in channels], "image_size": image_size,
        },
    )
    np.save(out / "templates.npy", np.stack(templates).astype("<f4"), allow_pickle=False)
    manifest.save()
    write_stats(manifest, PreprocessConfig(target_length=T))
    manifest.validate()
    return manifest


def _templates_separable(templates: list[np.ndarray], factors, n_pre: int) -> bool:
    """Self-check: classes sharing no factor have template correlation < 0.5,
    and a nearest-template classifier is perfect on the noiseless templates."""
    flat = [t[:, n_pre:].ravel() for t in templates]
    for i in range(len(flat)):
        for j in range(i + 1, len(flat)):
            if factors[i][0] != factors[j][0] and factors[i][1] != factors[j][1]:
                if np.corrcoef(flat[i], flat[j])[0, 1] >= 0.5:
                    return False
    return nearest_template_accuracy(flat, flat, list(range(len(flat)))) == 1.0


def nearest_template_accuracy(templates, signals, labels) -> float:
    T = np.stack([np.ravel(t) for t in templates])
    hits = 0
    for x, y in zip(signals, labels):
        d = np.sum((T - np.ravel(x)) ** 2, axis=1)
        hits += int(np.argmin(d) == y)
    return hits / len(labels)
