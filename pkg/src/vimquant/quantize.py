"""Symmetric quantizers, similarity metrics, and the similarity scale search.

Every quantizer here is symmetric (zero-point 0) with round-half-to-even
rounding and clamp range [-2^(b-1), 2^(b-1)-1]. Scales are float32 values
carried as Python floats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import Tensor, TensorError

log = logging.getLogger(__name__)


class AllZeroInputError(TensorError):
    """Raised when a MinMax scale is requested for an all-zero tensor."""


class SimilarityMetric(Enum):
    COSINE = "cosine"
    NEG_L1 = "neg_l1"
    NEG_L2 = "neg_l2"


@dataclass(frozen=True)
class QuantParams:
    """Scale, bitwidth and granularity for one quantization site.

    `axis` is None for per-tensor granularity, or the broadcast axis index
    for per-axis scales.
    """

    scale: float
    bits: int = 8
    axis: int | None = None

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise TensorError(f"scale must be positive and finite, got {self.scale}")
        if not 2 <= self.bits <= 8:
            raise TensorError(f"bits must lie in [2, 8], got {self.bits}")


def as_f32(x) -> np.ndarray:
    """Normalize a Tensor / array-like to a float32 ndarray."""
    if isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x)
    if arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    return arr


def qrange(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def minmax_scale(x, bits: int = 8) -> float:
    """max|x| / (2^(b-1) - 1), as a float32 value."""
    arr = as_f32(x)
    m = float(np.max(np.abs(arr)))
    if m == 0.0:
        raise AllZeroInputError("all-zero tensor has no MinMax scale")
    return float(np.float32(m / qrange(bits)[1]))


def quantize_at(x, scale: float, bits: int = 8) -> np.ndarray:
    """clamp(round(x / scale)) with round-half-to-even; int8 for bits <= 8."""
    arr = as_f32(x)
    if not np.isfinite(arr).all():
        raise TensorError("cannot quantize non-finite elements")
    if not (scale > 0 and np.isfinite(scale)):
        raise TensorError(f"scale must be positive and finite, got {scale}")
    lo, hi = qrange(bits)
    q = np.clip(np.rint(arr.astype(np.float64) / float(scale)), lo, hi)
    return q.astype(np.int8 if bits <= 8 else np.int32)


def dequantize(q, scale: float) -> np.ndarray:
    arr = np.asarray(q)
    return (arr.astype(np.float64) * float(scale)).astype(np.float32)


def fake_quant(x, scale: float, bits: int = 8) -> np.ndarray:
    """quantize-then-dequantize, the simulated-integer building block."""
    return dequantize(quantize_at(x, scale, bits), scale)


def similarity(a, b, metric: SimilarityMetric = SimilarityMetric.COSINE) -> float:
    """Similarity score between two same-shape tensors; higher is better."""
    av = as_f32(a)
    bv = as_f32(b)
    if av.shape != bv.shape:
        raise TensorError(f"similarity needs equal shapes, got {av.shape} and {bv.shape}")
    av = av.ravel().astype(np.float64)
    bv = bv.ravel().astype(np.float64)
    if metric is SimilarityMetric.COSINE:
        na = float(np.linalg.norm(av))
        nb = float(np.linalg.norm(bv))
        if na == 0.0 or nb == 0.0:
            raise TensorError("cosine similarity is undefined for zero-norm input")
        return float(np.dot(av, bv) / (na * nb))
    if metric is SimilarityMetric.NEG_L1:
        return float(-np.sum(np.abs(av - bv)))
    return float(-np.linalg.norm(av - bv))


def build_search_space(
    y,
    bits: int = 8,
    n_points: int = 100,
    lo_frac: float = 0.2,
    hi_frac: float = 1.2,
) -> list[float]:
    """Linear sweep of candidate scales around the MinMax scale of `y`."""
    if not (0 < lo_frac < hi_frac):
        raise TensorError(f"need 0 < lo_frac < hi_frac, got {lo_frac}, {hi_frac}")
    if n_points < 2:
        raise TensorError(f"n_points must be >= 2, got {n_points}")
    base = minmax_scale(y, bits)
    return [float(np.float32(f * base)) for f in np.linspace(lo_frac, hi_frac, n_points)]


def search_scale(
    y,
    bits: int,
    space: list[float],
    metric: SimilarityMetric = SimilarityMetric.COSINE,
) -> tuple[float, float]:
    """Scale in `space` maximizing sim(y, Q(y|s)*s); ties go to the larger scale."""
    if not space:
        raise TensorError("empty scale search space")
    arr = as_f32(y)
    best_s = best_score = None
    for s in space:
        score = similarity(arr, fake_quant(arr, s, bits), metric)
        if (
            best_score is None
            or score > best_score
            or (score == best_score and s > best_s)
        ):
            best_s, best_score = s, score
    return best_s, best_score
