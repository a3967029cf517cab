"""Selective state-space recurrence: input-dependent step/input/output
projections, discretization, the sequential scan, and the bidirectional
composition used by vision backbones.

Shapes follow a (channels C, tokens L, state D) convention:

    x               C x L      input sequence
    delta           C x L      positive step sizes
    B, C            L x D      input/output projections per token
    abar, bbar      C x L x D  discretized transition / input
    h trace         C x L x D  hidden states after every step
    y               C x L      scan output
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantize import QuantParams, as_f32, fake_quant
from .tensor import ShapeMismatchError, contract_last, matmul_f32

_TINY_F32 = float(np.nextafter(np.float32(0), np.float32(1)))


@dataclass(frozen=True)
class SsmParams:
    """Per-direction SSM weights.

    `a` is the state-decay matrix (C x D, negative real so exp(delta*a) stays
    in (0,1)); `w_delta` (C x C), `w_b` and `w_c` (both D x C) produce the
    input-dependent delta/B/C; `d_skip` (C) is the direct skip term.
    """

    a: np.ndarray
    w_delta: np.ndarray
    w_b: np.ndarray
    w_c: np.ndarray
    d_skip: np.ndarray

    @property
    def channels(self) -> int:
        return self.a.shape[0]

    @property
    def state(self) -> int:
        return self.a.shape[1]


@dataclass(frozen=True)
class ScanTrace:
    h: np.ndarray  # C x L x D, hidden state after each step
    y: np.ndarray  # C x L


def softplus(x) -> np.ndarray:
    """log(1 + exp(x)), overflow-safe, clamped to stay strictly positive."""
    arr = as_f32(x).astype(np.float64)
    out = np.where(arr > 35.0, arr, np.log1p(np.exp(np.minimum(arr, 35.0))))
    return np.maximum(out.astype(np.float32), np.float32(_TINY_F32))


def project_delta_b_c(x, p: SsmParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """delta = softplus(w_delta @ x), B = (w_b @ x)^T, C = (w_c @ x)^T."""
    arr = as_f32(x)
    if arr.ndim != 2 or arr.shape[0] != p.channels:
        raise ShapeMismatchError(
            f"input dims {arr.shape} do not match {p.channels} channels"
        )
    delta = softplus(matmul_f32(p.w_delta, arr))
    b = matmul_f32(p.w_b, arr).T
    c = matmul_f32(p.w_c, arr).T
    return delta, np.ascontiguousarray(b), np.ascontiguousarray(c)


def discretize(
    delta: np.ndarray, a: np.ndarray, b: np.ndarray, zoh_exact: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """abar = exp(delta*a); bbar = delta*b (simplified form).

    With zoh_exact=True, bbar uses the exact zero-order-hold expression
    (exp(delta*a) - 1) / a * b instead; the simplified product is the
    operative default because it is what the reparameterization folds through.
    """
    da = delta[:, :, None].astype(np.float64) * a[:, None, :].astype(np.float64)
    abar = np.exp(da).astype(np.float32)
    if zoh_exact:
        bbar = ((np.expm1(da) / a[:, None, :].astype(np.float64))
                * b[None, :, :].astype(np.float64)).astype(np.float32)
    else:
        bbar = (delta[:, :, None] * b[None, :, :]).astype(np.float32)
    return abar, bbar


def scan_core(
    abar: np.ndarray,
    bbar: np.ndarray,
    cmat: np.ndarray,
    x: np.ndarray,
    hq: QuantParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sequential recurrence h_t = abar_t*h_{t-1} + bbar_t*x_t, y_t = C_t x h_t.

    When `hq` is given the state is fake-quantized after every update and the
    quantized state is what propagates, so quantization error feeds forward
    exactly as it would in an integer kernel. The skip term is NOT added here.
    """
    channels, tokens, state = abar.shape
    if bbar.shape != abar.shape:
        raise ShapeMismatchError(f"abar dims {abar.shape} != bbar dims {bbar.shape}")
    if cmat.shape != (tokens, state):
        raise ShapeMismatchError(
            f"C dims {cmat.shape} do not match (tokens, state) = {(tokens, state)}"
        )
    if x.shape != (channels, tokens):
        raise ShapeMismatchError(
            f"x dims {x.shape} do not match (channels, tokens) = {(channels, tokens)}"
        )
    h = np.zeros((channels, state), dtype=np.float32)
    trace = np.empty((channels, tokens, state), dtype=np.float32)
    y = np.empty((channels, tokens), dtype=np.float32)
    for t in range(tokens):
        h = abar[:, t, :] * h + bbar[:, t, :] * x[:, t][:, None]
        if hq is not None:
            h = fake_quant(h, hq.scale, hq.bits)
        trace[:, t, :] = h
        y[:, t] = contract_last(cmat[t], h)
    return trace, y


def selective_scan(
    abar: np.ndarray,
    bbar: np.ndarray,
    cmat: np.ndarray,
    d_skip: np.ndarray,
    x: np.ndarray,
    hq: QuantParams | None = None,
) -> ScanTrace:
    """Full scan from h_0 = 0 with the skip term d_skip * x added to y."""
    trace, y = scan_core(abar, bbar, cmat, as_f32(x), hq)
    y = y + np.asarray(d_skip, dtype=np.float32)[:, None] * x
    return ScanTrace(h=trace, y=y.astype(np.float32))


def run_direction(x, p: SsmParams, hq: QuantParams | None = None) -> ScanTrace:
    """Project, discretize and scan one direction on an already-oriented input."""
    delta, b, cmat = project_delta_b_c(x, p)
    abar, bbar = discretize(delta, p.a, b)
    return selective_scan(abar, bbar, cmat, p.d_skip, as_f32(x), hq)


def bidirectional_scan(x, p_fwd: SsmParams, p_bwd: SsmParams) -> np.ndarray:
    """Forward scan plus a backward scan on the token-reversed input
    (re-reversed), summed."""
    if (p_fwd.channels, p_fwd.state) != (p_bwd.channels, p_bwd.state):
        raise ShapeMismatchError(
            f"direction dims differ: {(p_fwd.channels, p_fwd.state)} vs "
            f"{(p_bwd.channels, p_bwd.state)}"
        )
    arr = as_f32(x)
    y_fwd = run_direction(arr, p_fwd).y
    y_bwd = run_direction(np.ascontiguousarray(arr[:, ::-1]), p_bwd).y
    return (y_fwd + y_bwd[:, ::-1]).astype(np.float32)
