"""Run configuration: one flat JSON document per run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

# fields that fix the trained network; a checkpoint is only reusable under the same values
ARCH_FIELDS = (
    "C", "T", "D", "n_blocks", "n_heads", "mlp_ratio", "n_eeg_tokens", "n_txt_tokens",
    "patch", "image_size", "view_width", "temporal_kernel", "n_filters", "n_residual_blocks",
    "t_max", "beta_1", "beta_T", "text_provider",
    "gating_on", "multiscale_on", "augmentation_on", "text_on",
)
# fields that never influence any artifact's content
NON_HASHED = ("out_dir",)


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = "runs/default"
    seed: int = 0

    # model
    C: int = 17
    T: int = 256
    D: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    mlp_ratio: float = 4.0
    n_eeg_tokens: int = 16
    n_txt_tokens: int = 8
    patch: int = 8
    image_size: int = 64
    view_width: int = 64
    temporal_kernel: int = 7
    n_filters: int = 8
    n_residual_blocks: int = 2

    # diffusion schedule
    t_max: int = 1000
    beta_1: float = 1e-4
    beta_T: float = 0.02

    # plug-ins
    text_provider: str = "toy"
    depth_provider: str = "file"
    eval_depth_provider: str = "luminance"
    feature_extractor: str = "randconv"

    # ablations
    gating_on: bool = True
    multiscale_on: bool = True
    augmentation_on: bool = True
    text_on: bool = True

    # optimization
    steps: int = 500
    batch_size: int = 8
    lr: float = 4e-3
    warmup_steps: int = 25
    grad_clip: float = 1.0
    ae_steps: int = 400
    ae_lr: float = 5e-3
    cond_drop: float = 0.0

    # sampling / evaluation
    sample_steps: int = 100
    metric_size: int = 256
    lab_bins: int = 8
    deep_grid: int = 16
    mask_ratios: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    window_ms: float = 100.0
    stride_ms: float = 100.0
    n_way: int = 10

    @property
    def m(self) -> int:
        return self.T.bit_length() - 2

    def validate(self) -> "RunConfig":
        if self.T < 4 or self.T & (self.T - 1):
            raise ConfigError(f"T must be a power of two >= 4, got {self.T}")
        if self.D % self.n_heads:
            raise ConfigError("D must be divisible by n_heads")
        if self.D % 2:
            raise ConfigError("D must be even")
        if self.temporal_kernel % 2 == 0:
            raise ConfigError("temporal_kernel must be odd")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be a multiple of patch")
        if not 0 < self.beta_1 < self.beta_T < 1:
            raise ConfigError("need 0 < beta_1 < beta_T < 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        for r in self.mask_ratios:
            if not 0 <= r <= 1:
                raise ConfigError(f"mask ratio {r} outside [0, 1]")
        if not 0 <= self.cond_drop <= 1:
            raise ConfigError("cond_drop must be in [0, 1]")
        return self

    def to_json(self) -> dict:
        return asdict(self)

    def _digest(self, keys) -> str:
        d = self.to_json()
        payload = json.dumps({k: d[k] for k in sorted(keys)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        return self._digest([f.name for f in fields(self) if f.name not in NON_HASHED])

    def model_hash(self) -> str:
        return self._digest(ARCH_FIELDS)

    def replace(self, **kw) -> "RunConfig":
        d = self.to_json()
        d.update(kw)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")
