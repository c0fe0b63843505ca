"""Joint-modal EEG-to-image reconstruction at desk scale."""

import torch

__version__ = "0.1.0"


def use_float64() -> None:
    """All artifacts are produced in 64-bit precision for bitwise reproducibility."""
    torch.set_default_dtype(torch.float64)
