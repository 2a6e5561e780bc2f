"""Linear prediction filters used by the iterative reconstruction loops.

Row filters estimate a row from its upper and lower neighbors:

  P1  plain average of the two rows
  P2  average of the six adjacent pixels (three above, three below)
  P3  distance-weighted average of the same six pixels, weight
      a = (2 - sqrt(2))/4 on the diagonal neighbors and b = (sqrt(2) - 1)/2
      on the vertical ones (4a + 2b = 1 exactly)

Horizontal edges clamp (replicate) the boundary pixel so the weights keep
summing to one.

The band predictor works per non-overlapping spatial block: a least-squares
gain alpha maps the co-located block of a reconstructed reference band onto
the current band, prediction = mu_i + alpha*(ref - mu_l).  Flat reference
blocks (zero variance) fall back to alpha = 0, i.e. the block mean.
"""

import math
from dataclasses import dataclass

import numpy as np

P3_DIAGONAL_WEIGHT = (2.0 - math.sqrt(2.0)) / 4.0
P3_VERTICAL_WEIGHT = (math.sqrt(2.0) - 1.0) / 2.0

_ROW_FILTER_KINDS = ("P1", "P2", "P3")


@dataclass(frozen=True)
class RowFilter:
    kind: str

    def __post_init__(self):
        if self.kind not in _ROW_FILTER_KINDS:
            raise ValueError(f"unknown row filter {self.kind!r}; expected one of {_ROW_FILTER_KINDS}")


P1 = RowFilter("P1")
P2 = RowFilter("P2")
P3 = RowFilter("P3")


@dataclass(frozen=True)
class BlockLSPredictorConfig:
    block_size: int = 16

    def __post_init__(self):
        if self.block_size < 2:
            raise ValueError("block_size must be >= 2")


def _shift_left(rows: np.ndarray) -> np.ndarray:
    # value at j-1, clamped at the left edge
    return np.concatenate([rows[..., :1], rows[..., :-1]], axis=-1)


def _shift_right(rows: np.ndarray) -> np.ndarray:
    # value at j+1, clamped at the right edge
    return np.concatenate([rows[..., 1:], rows[..., -1:]], axis=-1)


def predict_row(flt: RowFilter, upper: np.ndarray, lower: np.ndarray) -> np.ndarray:
    """Predict a row from its upper and lower neighbors.

    Accepts single rows or stacks of rows (leading axes are batch).
    """
    upper = np.asarray(upper, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    if upper.shape != lower.shape:
        raise ValueError(f"row shapes differ: {upper.shape} vs {lower.shape}")
    if upper.shape[-1] < 2:
        raise ValueError("rows must have length >= 2")
    if flt.kind == "P1":
        return 0.5 * (upper + lower)
    vertical = upper + lower
    diagonal = _shift_left(upper) + _shift_right(upper) + _shift_left(lower) + _shift_right(lower)
    if flt.kind == "P2":
        return (vertical + diagonal) / 6.0
    return P3_DIAGONAL_WEIGHT * diagonal + P3_VERTICAL_WEIGHT * vertical


def _block_edges(length: int, block: int) -> list[tuple[int, int]]:
    # trailing partial blocks are processed as smaller rectangles
    return [(k, min(k + block, length)) for k in range(0, length, block)]


def predict_band_blockls(
    ref_band: np.ndarray,
    target_stats_source: np.ndarray,
    cfg: BlockLSPredictorConfig | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One-sided blockwise least-squares prediction of a band.

    ref_band is the reconstructed reference band; target_stats_source is the
    reconstruction of the band being predicted (used for mu_i and the
    correlation).  Returns (prediction, alpha grid).
    """
    cfg = cfg or BlockLSPredictorConfig()
    ref = np.asarray(ref_band, dtype=np.float64)
    tgt = np.asarray(target_stats_source, dtype=np.float64)
    if ref.shape != tgt.shape:
        raise ValueError(f"band shapes differ: {ref.shape} vs {tgt.shape}")
    rows_edges = _block_edges(ref.shape[0], cfg.block_size)
    cols_edges = _block_edges(ref.shape[1], cfg.block_size)
    pred = np.empty_like(ref)
    alphas = np.zeros((len(rows_edges), len(cols_edges)))
    for bi, (r0, r1) in enumerate(rows_edges):
        for bj, (c0, c1) in enumerate(cols_edges):
            rblk = ref[r0:r1, c0:c1]
            tblk = tgt[r0:r1, c0:c1]
            mu_l = rblk.mean()
            mu_i = tblk.mean()
            centered = rblk - mu_l
            denom = np.sum(centered * centered)
            alpha = np.sum(centered * (tblk - mu_i)) / denom if denom > 0 else 0.0
            alphas[bi, bj] = alpha
            pred[r0:r1, c0:c1] = mu_i + alpha * centered
    return pred, alphas


def predict_band_twosided(
    prev_band: np.ndarray | None,
    next_band: np.ndarray | None,
    current_stats: np.ndarray,
    cfg: BlockLSPredictorConfig | None = None,
) -> np.ndarray:
    """Average of the one-sided predictions from the previous and next band.

    At the first/last band exactly one neighbor exists and its one-sided
    prediction is used alone.
    """
    if prev_band is None and next_band is None:
        raise ValueError("need at least one of prev_band / next_band")
    parts = []
    for ref in (prev_band, next_band):
        if ref is not None:
            parts.append(predict_band_blockls(ref, current_stats, cfg)[0])
    return parts[0] if len(parts) == 1 else 0.5 * (parts[0] + parts[1])
