"""Rank-1 smoothing of the scan hidden state.

The hidden-state trace h (C x L x D) is approximated by an outer product of
three positive vectors r_C, r_L, r_D. Dividing the state by that product
yields a much flatter h* which quantizes well; instead of rescaling at every
step, the factors are folded into the scan parameters:

    abar*_t = abar_t * r_L[t-1]/r_L[t]          (t >= 2, first slice unchanged)
    bbar*   = bbar / (r_C (x) r_L (x) r_D)
    C*      = C * (r_L (x) r_D)

The scan then produces y_t / r_C directly and a single multiply by r_C at the
end recovers the original output. The r_D portion of the bbar/C transforms can
be folded offline into the B/C projection weights, in which case the runtime
transforms drop their r_D term (the `folded` flag).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .quantize import QuantParams, as_f32
from .ssm import ScanTrace, SsmParams, discretize, project_delta_b_c, scan_core
from .tensor import ShapeMismatchError, TensorError

EPS = 1e-6


class RepKind(Enum):
    MAX = "max"
    MEAN = "mean"
    MEDIAN = "median"
    PERCENTILE = "percentile"
    QUANTILE = "quantile"


class DispKind(Enum):
    SAME = "same"
    STD = "std"
    VAR = "var"
    RANGE = "range"


@dataclass(frozen=True)
class RepFn:
    """Representative function applied to |h| over the complementary axes."""

    kind: RepKind
    percentile_p: float = 99.0
    quantile_q: float = 0.75

    def reduce(self, mag: np.ndarray, axis) -> np.ndarray:
        if self.kind is RepKind.MAX:
            return mag.max(axis=axis)
        if self.kind is RepKind.MEAN:
            return mag.mean(axis=axis)
        if self.kind is RepKind.MEDIAN:
            return np.median(mag, axis=axis)
        if self.kind is RepKind.PERCENTILE:
            return np.percentile(mag, self.percentile_p, axis=axis)
        return np.quantile(mag, self.quantile_q, axis=axis)


def _dispersion(vec: np.ndarray, disp: DispKind) -> float:
    if disp is DispKind.STD:
        return float(np.std(vec))
    if disp is DispKind.VAR:
        return float(np.var(vec))
    if disp is DispKind.RANGE:
        return float(np.max(vec) - np.min(vec))
    raise TensorError(f"no scalar dispersion for {disp}")


@dataclass(frozen=True)
class ReparamFactors:
    r_c: np.ndarray
    r_l: np.ndarray
    r_d: np.ndarray
    rep: RepFn
    disp: DispKind

    def __post_init__(self):
        for name, v in (("r_c", self.r_c), ("r_l", self.r_l), ("r_d", self.r_d)):
            if np.any(np.asarray(v) <= 0):
                raise TensorError(f"{name} must be strictly positive")


def rank1(r_c: np.ndarray, r_l: np.ndarray, r_d: np.ndarray) -> np.ndarray:
    """Outer product r_C (x) r_L (x) r_D as a C x L x D float32 tensor."""
    return (
        (r_c[:, None, None] * r_l[None, :, None]) * r_d[None, None, :]
    ).astype(np.float32)


def rep_initial(h, rep: RepFn) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Initial representatives of |h| along each axis, floored at EPS."""
    mag = np.abs(as_f32(h)).astype(np.float64)
    if mag.ndim != 3:
        raise TensorError(f"hidden state must be C x L x D, got dims {mag.shape}")
    if mag.max() == 0.0:
        raise TensorError("cannot compute representatives of an all-zero state")
    r_c0 = np.maximum(rep.reduce(mag, axis=(1, 2)), EPS)
    r_l0 = np.maximum(rep.reduce(mag, axis=(0, 2)), EPS)
    r_d0 = np.maximum(rep.reduce(mag, axis=(0, 1)), EPS)
    return r_c0, r_l0, r_d0


def disp_weight(
    r_c0: np.ndarray,
    r_l0: np.ndarray,
    r_d0: np.ndarray,
    disp: DispKind,
    rep: RepFn,
) -> ReparamFactors:
    """Exponent-weight the representatives by their relative dispersion.

    Exponents e_X = Disp(r_X0) / sum always total 1; Disp=Same (and the
    degenerate all-zero-dispersion case) means 1/3 each.
    """
    if disp is DispKind.SAME:
        exps = (1.0 / 3.0,) * 3
    else:
        d = [_dispersion(np.asarray(v, dtype=np.float64), disp) for v in (r_c0, r_l0, r_d0)]
        total = sum(d)
        exps = (1.0 / 3.0,) * 3 if total == 0.0 else tuple(v / total for v in d)
    r_c, r_l, r_d = (
        np.power(np.asarray(v, dtype=np.float64), e).astype(np.float32)
        for v, e in zip((r_c0, r_l0, r_d0), exps)
    )
    return ReparamFactors(r_c=r_c, r_l=r_l, r_d=r_d, rep=rep, disp=disp)


def compute_factors(h, rep: RepFn, disp: DispKind) -> ReparamFactors:
    return disp_weight(*rep_initial(h, rep), disp, rep)


def factors_from_calibration(h_traces, rep: RepFn, disp: DispKind) -> ReparamFactors:
    """Per-trace representatives averaged across calibration samples, then
    dispersion-weighted."""
    traces = list(h_traces)
    if not traces:
        raise TensorError("need at least one calibration trace")
    r0s = [rep_initial(t, rep) for t in traces]
    means = tuple(
        np.mean(np.stack([r0[i] for r0 in r0s]), axis=0) for i in range(3)
    )
    return disp_weight(*means, disp, rep)


def reparam_A(abar: np.ndarray, r_l: np.ndarray) -> np.ndarray:
    """Multiply the token-t slice by r_L[t-1]/r_L[t]; the first slice by 1."""
    ratios = np.ones(abar.shape[1], dtype=np.float32)
    ratios[1:] = (r_l[:-1].astype(np.float64) / r_l[1:].astype(np.float64)).astype(
        np.float32
    )
    return (abar * ratios[None, :, None]).astype(np.float32)


def reparam_B(
    bbar: np.ndarray,
    r_c: np.ndarray,
    r_l: np.ndarray,
    r_d: np.ndarray | None = None,
    folded: bool = False,
) -> np.ndarray:
    """Divide bbar by the rank-1 factor tensor (r_D omitted when folded)."""
    if folded:
        denom = (r_c[:, None, None] * r_l[None, :, None]).astype(np.float32)
    else:
        if r_d is None:
            raise TensorError("r_d is required in the unfolded form")
        denom = rank1(r_c, r_l, r_d)
    return (bbar / denom).astype(np.float32)


def reparam_C(
    cmat: np.ndarray,
    r_l: np.ndarray,
    r_d: np.ndarray | None = None,
    folded: bool = False,
) -> np.ndarray:
    """Multiply C by r_L (x) r_D (just r_L when folded)."""
    if folded:
        factor = r_l[:, None].astype(np.float32)
    else:
        if r_d is None:
            raise TensorError("r_d is required in the unfolded form")
        factor = (r_l[:, None] * r_d[None, :]).astype(np.float32)
    return (cmat * factor).astype(np.float32)


def fold_weights(
    w_b: np.ndarray, w_c: np.ndarray, r_d: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Row-scale the B/C projection weights so (w_b* @ x) = (w_b @ x) / r_D
    and (w_c* @ x) = (w_c @ x) * r_D for every x."""
    if w_b.shape[0] != r_d.shape[0] or w_c.shape[0] != r_d.shape[0]:
        raise ShapeMismatchError(
            f"r_d length {r_d.shape[0]} does not match projection rows "
            f"{w_b.shape[0]}/{w_c.shape[0]}"
        )
    w_b_f = (w_b / r_d[:, None]).astype(np.float32)
    w_c_f = (w_c * r_d[:, None]).astype(np.float32)
    return w_b_f, w_c_f


def fold_params(p: SsmParams, r_d: np.ndarray) -> SsmParams:
    w_b_f, w_c_f = fold_weights(p.w_b, p.w_c, r_d)
    return SsmParams(a=p.a, w_delta=p.w_delta, w_b=w_b_f, w_c=w_c_f, d_skip=p.d_skip)


def reparam_scan(
    x,
    p: SsmParams,
    factors: ReparamFactors,
    hq: QuantParams | None = None,
) -> ScanTrace:
    """Run the reparameterized scan on r_D-folded params.

    The trace holds the smoothed states h*_t (fake-quantized per step when
    `hq` is given, which is the quantization site this module protects); `y`
    is the recovered output, y*_t * r_C plus the skip term.
    """
    arr = as_f32(x)
    delta, b, cmat = project_delta_b_c(arr, p)
    abar, bbar = discretize(delta, p.a, b)
    abar_s = reparam_A(abar, factors.r_l)
    bbar_s = reparam_B(bbar, factors.r_c, factors.r_l, folded=True)
    cmat_s = reparam_C(cmat, factors.r_l, folded=True)
    trace, y_core = scan_core(abar_s, bbar_s, cmat_s, arr, hq)
    y = y_core * factors.r_c[:, None] + p.d_skip[:, None] * arr
    return ScanTrace(h=trace, y=y.astype(np.float32))
