"""Quality and compressibility measurements."""

from dataclasses import dataclass

import numpy as np

from . import transforms
from .signals import Image2D


@dataclass(frozen=True)
class CompressibilityConfig:
    """Per-row DCT threshold: theta_th = multiplier * ||theta||_1 / n_cols."""

    threshold_multiplier: float = 5.0

    def __post_init__(self):
        if self.threshold_multiplier <= 0:
            raise ValueError("threshold_multiplier must be > 0")


def mse(a, b) -> float:
    """Mean squared difference over all samples."""
    a = np.asarray(getattr(a, "samples", a), dtype=np.float64)
    b = np.asarray(getattr(b, "samples", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def row_compressibility(x, cfg: CompressibilityConfig | None = None) -> float:
    """Mean fraction of per-row DCT coefficients at or below the row threshold.

    The comparison is inclusive, so an all-zero row (threshold 0) counts as
    fully compressible.
    """
    cfg = cfg or CompressibilityConfig()
    arr = np.asarray(x.samples if isinstance(x, Image2D) else x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"need a 2D array, got shape {arr.shape}")
    n_cols = arr.shape[1]
    basis = transforms.dct1d_basis(n_cols)
    theta = transforms.analyze(basis, arr)
    thresholds = cfg.threshold_multiplier * np.abs(theta).sum(axis=1) / n_cols
    fractions = (np.abs(theta) <= thresholds[:, None]).mean(axis=1)
    return float(fractions.mean())
