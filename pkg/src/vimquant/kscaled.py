"""k-scaled channel-wise / token-wise quantization.

Channels or tokens are partitioned by 1-D k-means over log2 of their peak
magnitude, a scale is calibrated per cluster, and every cluster scale is then
redefined as a right-shift of the largest one (s_i* = s1 >> m_i), so integer
kernels can dequantize against a single scale plus per-group shifts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .quantize import (
    AllZeroInputError,
    SimilarityMetric,
    as_f32,
    build_search_space,
    minmax_scale,
    qrange,
    search_scale,
)
from .tensor import ShapeMismatchError, TensorError

log = logging.getLogger(__name__)

# log2 feature assigned to all-zero groups (below any normal float32 exponent)
FEATURE_FLOOR = -126.0

MAX_SHIFT = 31


class KAxis(Enum):
    CHANNEL = "channel"
    TOKEN = "token"

    @property
    def dim(self) -> int:
        """Axis index in the (channels x tokens) activation layout."""
        return 0 if self is KAxis.CHANNEL else 1


@dataclass(frozen=True)
class KScaledParams:
    axis: KAxis
    k: int
    assignment: tuple[int, ...]
    s1: float
    shifts: tuple[int, ...]
    bits: int = 8

    def __post_init__(self):
        if self.k < 1 or len(self.shifts) != self.k:
            raise TensorError(f"need one shift per cluster, k={self.k}")
        if any(not 0 <= g < self.k for g in self.assignment):
            raise TensorError("assignment entries must lie in [0, k)")
        if any(m < 0 or m > MAX_SHIFT for m in self.shifts):
            raise TensorError(f"shifts must lie in [0, {MAX_SHIFT}]")

    def effective_scales(self) -> np.ndarray:
        """Per-cluster scales s1 * 2^-m, exact in float32."""
        return np.ldexp(
            np.float32(self.s1), -np.asarray(self.shifts, dtype=np.int32)
        ).astype(np.float32)


def group_stats(y, axis: KAxis) -> np.ndarray:
    """Per-group feature: log2 of the group's peak |y| (floored at -126)."""
    arr = as_f32(y)
    if arr.ndim < 2:
        raise TensorError(f"need a rank >= 2 tensor, got dims {arr.shape}")
    moved = np.moveaxis(arr, axis.dim, 0).reshape(arr.shape[axis.dim], -1)
    maxes = np.abs(moved).max(axis=1).astype(np.float64)
    feats = np.full(maxes.shape, FEATURE_FLOOR)
    nz = maxes > 0
    if not nz.all():
        log.warning("%d all-zero group(s), feature floored at %g", int((~nz).sum()), FEATURE_FLOOR)
    np.log2(maxes, out=feats, where=nz)
    return np.maximum(feats, FEATURE_FLOOR)


def _sse_of_runs(prefix: np.ndarray, prefix_sq: np.ndarray, bounds: list[int]) -> float:
    total = 0.0
    for i in range(len(bounds) - 1):
        a, b = bounds[i], bounds[i + 1]
        n = b - a
        s = prefix[b] - prefix[a]
        total += (prefix_sq[b] - prefix_sq[a]) - s * s / n
    return total


def _boundary_polish(sorted_feats: np.ndarray, bounds: list[int]) -> list[int]:
    """Shift single points across adjacent cluster boundaries while the total
    within-cluster SSE strictly decreases.

    1-D k-means clusters are intervals over the sorted values, so this is a
    deterministic stabilization pass on top of Lloyd iterations.
    """
    prefix = np.concatenate(([0.0], np.cumsum(sorted_feats)))
    prefix_sq = np.concatenate(([0.0], np.cumsum(sorted_feats**2)))
    best = _sse_of_runs(prefix, prefix_sq, bounds)
    for _ in range(200):
        improved = False
        for i in range(1, len(bounds) - 1):
            for delta in (-1, 1):
                cand = list(bounds)
                cand[i] += delta
                if not (cand[i - 1] < cand[i] < cand[i + 1]):
                    continue
                sse = _sse_of_runs(prefix, prefix_sq, cand)
                if sse < best - 1e-12 * max(1.0, abs(best)):
                    bounds, best, improved = cand, sse, True
                    break
            if improved:
                break
        if not improved:
            break
    return bounds


def kmeans_1d(features, k: int, iters: int = 50, seed: int = 0) -> np.ndarray:
    """Deterministic 1-D k-means (Lloyd + boundary stabilization).

    Centers start at evenly spaced quantiles of the distinct sorted features;
    `seed` is accepted for interface stability but the procedure is fully
    deterministic. Labels are returned in ascending cluster-center order; if
    fewer than k distinct values exist, k is reduced (logged).
    """
    del seed
    feats = np.asarray(features, dtype=np.float64).ravel()
    if feats.size == 0:
        raise TensorError("cannot cluster an empty feature vector")
    uniq = np.unique(feats)
    if k > uniq.size:
        log.warning("reducing k from %d to %d distinct feature values", k, uniq.size)
        k = int(uniq.size)
    idx = np.floor((np.arange(k) + 0.5) * uniq.size / k).astype(int)
    centers = uniq[idx].copy()

    assign = None
    for _ in range(max(1, iters)):
        dist = np.abs(feats[:, None] - centers[None, :])
        new_assign = np.argmin(dist, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = feats[assign == j]
            if members.size:
                centers[j] = members.mean()

    # Re-express as contiguous intervals over the sorted order, then polish.
    order = np.argsort(feats, kind="stable")
    labels_sorted = assign[order]
    bounds = [0]
    for pos in range(1, feats.size):
        if labels_sorted[pos] != labels_sorted[pos - 1]:
            bounds.append(pos)
    bounds.append(int(feats.size))
    bounds = _boundary_polish(feats[order], bounds)

    out = np.empty(feats.size, dtype=np.int64)
    for run, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        out[order[a:b]] = run
    return out


def redefine_scales(per_cluster_scales) -> tuple[float, tuple[int, ...]]:
    """Largest scale plus per-cluster right-shift amounts m = round(log2(s1/s))."""
    arr = np.asarray(per_cluster_scales, dtype=np.float64).ravel()
    if arr.size == 0 or np.any(arr <= 0) or not np.isfinite(arr).all():
        raise TensorError("cluster scales must be positive and finite")
    s1 = float(np.float32(arr.max()))
    shifts = np.clip(np.rint(np.log2(s1 / arr)), 0, MAX_SHIFT).astype(int)
    return s1, tuple(int(m) for m in shifts)


def _per_group_scales(arr: np.ndarray, p: KScaledParams) -> np.ndarray:
    n = arr.shape[p.axis.dim]
    if n != len(p.assignment):
        raise ShapeMismatchError(
            f"axis length {n} does not match assignment length {len(p.assignment)}"
        )
    eff = p.effective_scales()
    per_group = eff[np.asarray(p.assignment)]
    shape = [1] * arr.ndim
    shape[p.axis.dim] = n
    return per_group.reshape(shape)


def quantize_kscaled(y, p: KScaledParams) -> np.ndarray:
    """Quantize each group at its cluster's effective scale s1 * 2^-m."""
    arr = as_f32(y)
    scales = _per_group_scales(arr, p)
    lo, hi = qrange(p.bits)
    q = np.clip(np.rint(arr.astype(np.float64) / scales.astype(np.float64)), lo, hi)
    return q.astype(np.int8 if p.bits <= 8 else np.int32)


def dequantize_kscaled(q, p: KScaledParams) -> np.ndarray:
    """Shift-based dequantization: left-shift every group up to the deepest
    shift level, then multiply once by the single scale s1 * 2^-m_max."""
    arr = np.asarray(q)
    shifts = np.asarray(p.shifts)[np.asarray(p.assignment)]
    shape = [1] * arr.ndim
    shape[p.axis.dim] = shifts.size
    m = shifts.reshape(shape)
    m_max = int(np.max(p.shifts))
    acc = arr.astype(np.int64) << (m_max - m)
    base = float(np.ldexp(np.float32(p.s1), -m_max))
    return (acc.astype(np.float64) * base).astype(np.float32)


def fake_quant_kscaled(y, p: KScaledParams) -> np.ndarray:
    return dequantize_kscaled(quantize_kscaled(y, p), p)


def calibrate_kscaled(
    y,
    axis: KAxis,
    k: int = 4,
    bits: int = 8,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    scale_mode: str = "search",
    n_points: int = 100,
    seed: int = 0,
) -> KScaledParams:
    """Full pipeline: group stats -> k-means -> per-cluster scale -> shifts.

    scale_mode "search" runs the similarity scale search per cluster (the
    composed default); "minmax" takes the plain per-cluster MinMax scale.
    """
    if scale_mode not in ("search", "minmax"):
        raise TensorError(f"unknown scale_mode {scale_mode!r}")
    arr = as_f32(y)
    feats = group_stats(arr, axis)
    assign = kmeans_1d(feats, k, seed=seed)
    k_eff = int(assign.max()) + 1
    moved = np.moveaxis(arr, axis.dim, 0).reshape(arr.shape[axis.dim], -1)
    scales = []
    for j in range(k_eff):
        members = moved[assign == j].ravel()
        try:
            if scale_mode == "minmax":
                s = minmax_scale(members, bits)
            else:
                space = build_search_space(members, bits, n_points)
                space.append(minmax_scale(members, bits))
                s, _ = search_scale(members, bits, space, metric)
        except AllZeroInputError:
            log.warning("all-zero cluster %d, falling back to scale 1.0", j)
            s = 1.0
        scales.append(s)
    s1, shifts = redefine_scales(scales)
    return KScaledParams(
        axis=axis,
        k=k_eff,
        assignment=tuple(int(g) for g in assign),
        s1=s1,
        shifts=shifts,
        bits=bits,
    )
