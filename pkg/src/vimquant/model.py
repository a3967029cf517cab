"""Desk-scale synthetic Vision-Mamba block with activation taps, the
calibration pipeline, and the serializable quantization config.

Block structure (residual around the whole thing):

    norm -> in_proj -> split -> conv1d -> SiLU -> bidirectional scan -+
                         |                                            * -> out_proj
                         +---------------------> SiLU (gate) --------+

The block consumes pre-embedded token sequences shaped channels x tokens.
The "norm" is a per-channel gain: at desk scale a variance-normalizing layer
would erase the token-outlier structure the quantizers are exercised on, so
a diagonal stand-in is used and documented here.

Activation quantization sites (tap names): in_proj, conv1d, ssm_h_fwd,
ssm_h_bwd, ssm_y, out_proj. Calibration policies:

    passthrough  identity quantizers everywhere (sanity sentinel)
    baseline     per-tensor MinMax at every site, hidden state quantized
                 naively step by step
    similarity   conv1d/out_proj scales picked by cosine scale search
    kscaled      conv1d channel-wise / out_proj token-wise k-scaled with
                 per-cluster MinMax scales
    ours         k-scaled with per-cluster scale search at conv1d/out_proj,
                 plus rank-1 reparameterized hidden-state quantization
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kscaled import KAxis, KScaledParams, calibrate_kscaled, fake_quant_kscaled
from .quantize import (
    AllZeroInputError,
    QuantParams,
    SimilarityMetric,
    as_f32,
    build_search_space,
    fake_quant,
    minmax_scale,
    qrange,
    search_scale,
)
from .reparam import (
    DispKind,
    RepFn,
    RepKind,
    ReparamFactors,
    factors_from_calibration,
    fold_params,
    rank1,
    reparam_scan,
)
from .ssm import SsmParams, run_direction
from .tensor import (
    DType,
    ShapeMismatchError,
    Tensor,
    TensorError,
    matmul_f32,
    read_qten,
    tensor_to_bytes,
    write_qten,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "vimquant-model-v1"
CONFIG_FORMAT = "vimquant-config-v1"

PROFILES = ("none", "middle_tokens", "heavy_channels")
POLICIES = ("passthrough", "baseline", "similarity", "kscaled", "ours")

ACT_SITES = ("in_proj", "conv1d", "ssm_h_fwd", "ssm_h_bwd", "ssm_y", "out_proj")
WEIGHT_NAMES = (
    "in_proj",
    "conv1d",
    "out_proj",
    "fwd.w_delta",
    "fwd.w_b",
    "fwd.w_c",
    "bwd.w_delta",
    "bwd.w_b",
    "bwd.w_c",
)

CONV_WIDTH = 4
MIDDLE_GAIN = 24.0
HEAVY_GAIN = 16.0


class ConfigMismatchError(TensorError):
    """Config does not fit the model (unknown/missing sites, digest drift)."""


# --------------------------------------------------------------------------
# Quantization config
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PassthroughSite:
    kind = "passthrough"

    def to_dict(self):
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d):
        return cls()


@dataclass(frozen=True)
class MinMaxSite:
    scale: float
    bits: int = 8
    kind = "minmax"

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "bits": self.bits}

    @classmethod
    def from_dict(cls, d):
        return cls(scale=float(d["scale"]), bits=int(d["bits"]))


@dataclass(frozen=True)
class SimilaritySite:
    scale: float
    bits: int = 8
    score: float = 0.0
    kind = "similarity"

    def to_dict(self):
        return {
            "kind": self.kind,
            "scale": self.scale,
            "bits": self.bits,
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(scale=float(d["scale"]), bits=int(d["bits"]), score=float(d["score"]))


@dataclass(frozen=True)
class KScaledSite:
    axis: str
    k: int
    s1: float
    shifts: tuple[int, ...]
    assignment: tuple[int, ...]
    bits: int = 8
    kind = "kscaled"

    def params(self) -> KScaledParams:
        return KScaledParams(
            axis=KAxis(self.axis),
            k=self.k,
            assignment=self.assignment,
            s1=self.s1,
            shifts=self.shifts,
            bits=self.bits,
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "axis": self.axis,
            "k": self.k,
            "s1": self.s1,
            "shifts": list(self.shifts),
            "assignment": list(self.assignment),
            "bits": self.bits,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            axis=str(d["axis"]),
            k=int(d["k"]),
            s1=float(d["s1"]),
            shifts=tuple(int(v) for v in d["shifts"]),
            assignment=tuple(int(v) for v in d["assignment"]),
            bits=int(d["bits"]),
        )


@dataclass(frozen=True)
class HiddenSite:
    """Reparameterized hidden-state site: rank-1 factors plus the scale the
    smoothed state h* is quantized at."""

    scale: float
    bits: int
    rep: str
    disp: str
    r_c: tuple[float, ...]
    r_l: tuple[float, ...]
    r_d: tuple[float, ...]
    percentile_p: float = 99.0
    quantile_q: float = 0.75
    kind = "hidden"

    def factors(self) -> ReparamFactors:
        repfn = RepFn(
            RepKind(self.rep), percentile_p=self.percentile_p, quantile_q=self.quantile_q
        )
        return ReparamFactors(
            r_c=np.asarray(self.r_c, dtype=np.float32),
            r_l=np.asarray(self.r_l, dtype=np.float32),
            r_d=np.asarray(self.r_d, dtype=np.float32),
            rep=repfn,
            disp=DispKind(self.disp),
        )

    def to_dict(self):
        return {
            "kind": self.kind,
            "scale": self.scale,
            "bits": self.bits,
            "rep": self.rep,
            "disp": self.disp,
            "percentile_p": self.percentile_p,
            "quantile_q": self.quantile_q,
            "r_c": list(self.r_c),
            "r_l": list(self.r_l),
            "r_d": list(self.r_d),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            scale=float(d["scale"]),
            bits=int(d["bits"]),
            rep=str(d["rep"]),
            disp=str(d["disp"]),
            percentile_p=float(d["percentile_p"]),
            quantile_q=float(d["quantile_q"]),
            r_c=tuple(float(v) for v in d["r_c"]),
            r_l=tuple(float(v) for v in d["r_l"]),
            r_d=tuple(float(v) for v in d["r_d"]),
        )


_SITE_KINDS = {
    "passthrough": PassthroughSite,
    "minmax": MinMaxSite,
    "similarity": SimilaritySite,
    "kscaled": KScaledSite,
    "hidden": HiddenSite,
}


def _site_from_dict(d) -> object:
    kind = d.get("kind")
    if kind not in _SITE_KINDS:
        raise ConfigMismatchError(f"unknown site kind {kind!r}")
    return _SITE_KINDS[kind].from_dict(d)


@dataclass
class QuantConfig:
    policy: str
    act_bits: int
    weight_bits: int
    model_digest: str
    sites: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "format": CONFIG_FORMAT,
            "policy": self.policy,
            "act_bits": self.act_bits,
            "weight_bits": self.weight_bits,
            "model_digest": self.model_digest,
            "sites": {name: s.to_dict() for name, s in self.sites.items()},
            "weights": {name: w.to_dict() for name, w in self.weights.items()},
        }

    @classmethod
    def from_json_dict(cls, d) -> "QuantConfig":
        if d.get("format") != CONFIG_FORMAT:
            raise ConfigMismatchError(f"unknown config format {d.get('format')!r}")
        return cls(
            policy=str(d["policy"]),
            act_bits=int(d["act_bits"]),
            weight_bits=int(d["weight_bits"]),
            model_digest=str(d["model_digest"]),
            sites={name: _site_from_dict(s) for name, s in d["sites"].items()},
            weights={name: MinMaxSite.from_dict(w) for name, w in d["weights"].items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "QuantConfig":
        return cls.from_json_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "QuantConfig":
        return cls.loads(Path(path).read_text())


# --------------------------------------------------------------------------
# Synthetic block
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VimBlock:
    norm_gain: np.ndarray  # C
    w_in: np.ndarray  # 2C x C, rows [0:C] feed the scan branch, [C:2C] the gate
    conv_w: np.ndarray  # C x CONV_WIDTH depthwise causal kernel
    fwd: SsmParams
    bwd: SsmParams
    w_out: np.ndarray  # C x C
    channels: int
    tokens: int
    state: int
    seed: int
    outlier_profile: str


def _ssm_weights(rng, channels: int, state: int) -> SsmParams:
    sc = 1.0 / np.sqrt(channels)
    a = -np.tile(np.arange(1, state + 1, dtype=np.float32), (channels, 1))
    return SsmParams(
        a=a,
        w_delta=(rng.standard_normal((channels, channels)) * sc).astype(np.float32),
        w_b=(rng.standard_normal((state, channels)) * sc).astype(np.float32),
        w_c=(rng.standard_normal((state, channels)) * sc).astype(np.float32),
        d_skip=(rng.standard_normal(channels) * 0.5).astype(np.float32),
    )


def build_synthetic(
    seed: int = 0, dims: tuple[int, int, int] = (8, 64, 8), outlier_profile: str = "none"
) -> VimBlock:
    """Deterministic random block. `outlier_profile` reproduces the stress
    patterns the quantizers target: "middle_tokens" marks the model so its
    inputs carry hot middle tokens, "heavy_channels" scales a subset of conv
    kernel rows so the conv output has channel outliers."""
    channels, tokens, state = (int(v) for v in dims)
    if min(channels, tokens, state) < 1:
        raise TensorError(f"dims must be positive, got {dims}")
    if tokens < 3:
        raise TensorError("need at least 3 tokens")
    if outlier_profile not in PROFILES:
        raise TensorError(f"unknown outlier profile {outlier_profile!r}")
    rng = np.random.default_rng([7, seed])
    sc = 1.0 / np.sqrt(channels)
    norm_gain = (1.0 + 0.1 * rng.standard_normal(channels)).astype(np.float32)
    w_in = (rng.standard_normal((2 * channels, channels)) * sc).astype(np.float32)
    conv_w = (rng.standard_normal((channels, CONV_WIDTH)) * 0.5).astype(np.float32)
    fwd = _ssm_weights(rng, channels, state)
    bwd = _ssm_weights(rng, channels, state)
    w_out = (rng.standard_normal((channels, channels)) * sc).astype(np.float32)
    if outlier_profile == "heavy_channels":
        heavy = rng.choice(channels, size=max(1, channels // 8), replace=False)
        conv_w = conv_w.copy()
        conv_w[heavy] *= np.float32(HEAVY_GAIN)
    return VimBlock(
        norm_gain=norm_gain,
        w_in=w_in,
        conv_w=conv_w,
        fwd=fwd,
        bwd=bwd,
        w_out=w_out,
        channels=channels,
        tokens=tokens,
        state=state,
        seed=seed,
        outlier_profile=outlier_profile,
    )


def make_inputs(m: VimBlock, seed: int, count: int, stream: int = 0) -> list[np.ndarray]:
    """Seeded unit-variance token sequences shaped by the model's outlier
    profile (middle-token outliers are a property of the data, not of any
    token-translation-invariant weight)."""
    out = []
    third = m.tokens // 3
    for i in range(count):
        rng = np.random.default_rng([11, seed, stream, i])
        x = rng.standard_normal((m.channels, m.tokens)).astype(np.float32)
        if m.outlier_profile == "middle_tokens":
            x[:, third : 2 * third] *= np.float32(MIDDLE_GAIN)
        out.append(x)
    return out


# --------------------------------------------------------------------------
# Model files
# --------------------------------------------------------------------------


def _model_tensors(m: VimBlock) -> dict[str, np.ndarray]:
    return {
        "norm_gain": m.norm_gain,
        "in_proj": m.w_in,
        "conv1d": m.conv_w,
        "out_proj": m.w_out,
        "fwd.a": m.fwd.a,
        "fwd.w_delta": m.fwd.w_delta,
        "fwd.w_b": m.fwd.w_b,
        "fwd.w_c": m.fwd.w_c,
        "fwd.d_skip": m.fwd.d_skip,
        "bwd.a": m.bwd.a,
        "bwd.w_delta": m.bwd.w_delta,
        "bwd.w_b": m.bwd.w_b,
        "bwd.w_c": m.bwd.w_c,
        "bwd.d_skip": m.bwd.d_skip,
    }


def _manifest_dict(m: VimBlock) -> dict:
    tensors = _model_tensors(m)
    return {
        "format": MODEL_FORMAT,
        "dims": {"channels": m.channels, "tokens": m.tokens, "state": m.state},
        "seed": m.seed,
        "outlier_profile": m.outlier_profile,
        "tensors": {name: list(t.shape) for name, t in sorted(tensors.items())},
    }


def model_digest(m: VimBlock) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(_manifest_dict(m), sort_keys=True).encode())
    for name, t in sorted(_model_tensors(m).items()):
        h.update(name.encode())
        h.update(tensor_to_bytes(Tensor(t)))
    return h.hexdigest()


def save_model(m: VimBlock, out_dir) -> str:
    """Write manifest.json plus one QTEN file per tensor; returns the digest."""
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(
        json.dumps(_manifest_dict(m), sort_keys=True, indent=2) + "\n"
    )
    for name, t in sorted(_model_tensors(m).items()):
        write_qten(Tensor(t), path / f"{name}.qten")
    return model_digest(m)


def load_model(model_dir) -> VimBlock:
    path = Path(model_dir)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != MODEL_FORMAT:
        raise ConfigMismatchError(f"unknown model format {manifest.get('format')!r}")
    dims = manifest["dims"]
    tensors = {}
    for name, shape in manifest["tensors"].items():
        t = read_qten(path / f"{name}.qten")
        if list(t.dims) != list(shape):
            raise ConfigMismatchError(
                f"tensor {name} has dims {list(t.dims)}, manifest says {shape}"
            )
        tensors[name] = t.data
    def ssm(prefix):
        return SsmParams(
            a=tensors[f"{prefix}.a"],
            w_delta=tensors[f"{prefix}.w_delta"],
            w_b=tensors[f"{prefix}.w_b"],
            w_c=tensors[f"{prefix}.w_c"],
            d_skip=tensors[f"{prefix}.d_skip"],
        )
    return VimBlock(
        norm_gain=tensors["norm_gain"],
        w_in=tensors["in_proj"],
        conv_w=tensors["conv1d"],
        fwd=ssm("fwd"),
        bwd=ssm("bwd"),
        w_out=tensors["out_proj"],
        channels=int(dims["channels"]),
        tokens=int(dims["tokens"]),
        state=int(dims["state"]),
        seed=int(manifest["seed"]),
        outlier_profile=str(manifest["outlier_profile"]),
    )


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------


def _silu(x: np.ndarray) -> np.ndarray:
    pos = x >= 0
    ex = np.exp(np.where(pos, -x, x))
    sig = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return (x * sig).astype(np.float32)


def _depthwise_conv(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Causal per-channel conv: out[:, t] = sum_j w[:, j] * x[:, t-(K-1)+j]."""
    channels, tokens = x.shape
    width = w.shape[1]
    pad = np.concatenate([np.zeros((channels, width - 1), np.float32), x], axis=1)
    acc = np.zeros((channels, tokens), dtype=np.float64)
    for j in range(width):
        acc += w[:, j : j + 1].astype(np.float64) * pad[:, j : j + tokens]
    return acc.astype(np.float32)


def site_quantizer(site):
    """Fake-quantization callable for one configured site (identity for
    passthrough). Hidden sites quantize in smoothed h* coordinates."""
    if isinstance(site, PassthroughSite):
        return lambda x: x
    if isinstance(site, (MinMaxSite, SimilaritySite, HiddenSite)):
        return lambda x: fake_quant(x, site.scale, site.bits)
    if isinstance(site, KScaledSite):
        params = site.params()
        return lambda x: fake_quant_kscaled(x, params)
    raise ConfigMismatchError(f"no quantizer for site object {site!r}")


def validate_config(m: VimBlock, qc: QuantConfig) -> None:
    got = set(qc.sites)
    want = set(ACT_SITES)
    if got != want:
        missing = sorted(want - got)
        extra = sorted(got - want)
        raise ConfigMismatchError(
            f"site mismatch: missing {missing}, unknown {extra}"
        )
    unknown_w = sorted(set(qc.weights) - set(WEIGHT_NAMES))
    if unknown_w:
        raise ConfigMismatchError(f"unknown weight sites {unknown_w}")
    for name in ("ssm_h_fwd", "ssm_h_bwd"):
        if not isinstance(qc.sites[name], (PassthroughSite, MinMaxSite, HiddenSite)):
            raise ConfigMismatchError(
                f"site {name} cannot use kind {qc.sites[name].kind!r}"
            )


def _forward(m: VimBlock, x: np.ndarray, qc: QuantConfig | None):
    arr = as_f32(x)
    if arr.shape != (m.channels, m.tokens):
        raise ShapeMismatchError(
            f"input dims {arr.shape} do not match model dims "
            f"{(m.channels, m.tokens)}"
        )
    if qc is not None:
        validate_config(m, qc)
        fq = {name: site_quantizer(site) for name, site in qc.sites.items()}
        wfq = {
            name: site_quantizer(w) for name, w in qc.weights.items()
        }
    else:
        fq = {name: (lambda v: v) for name in ACT_SITES}
        wfq = {}

    def weight(name, w):
        return wfq[name](w) if name in wfq else w

    taps: dict[str, np.ndarray] = {}
    xn = m.norm_gain[:, None] * arr
    u = matmul_f32(weight("in_proj", m.w_in), xn)
    u = fq["in_proj"](u)
    taps["in_proj"] = u
    xs, z = u[: m.channels], u[m.channels :]

    cv = _depthwise_conv(xs, weight("conv1d", m.conv_w))
    cv = fq["conv1d"](cv)
    taps["conv1d"] = cv
    act = _silu(cv)

    y_ssm = np.zeros((m.channels, m.tokens), dtype=np.float32)
    for site_name, prefix, params, reverse in (
        ("ssm_h_fwd", "fwd", m.fwd, False),
        ("ssm_h_bwd", "bwd", m.bwd, True),
    ):
        xd = np.ascontiguousarray(act[:, ::-1]) if reverse else act
        site = qc.sites[site_name] if qc is not None else None
        if isinstance(site, HiddenSite):
            factors = site.factors()
            folded = fold_params(params, factors.r_d)
            folded = SsmParams(
                a=folded.a,
                w_delta=weight(f"{prefix}.w_delta", folded.w_delta),
                w_b=weight(f"{prefix}.w_b", folded.w_b),
                w_c=weight(f"{prefix}.w_c", folded.w_c),
                d_skip=folded.d_skip,
            )
            tr = reparam_scan(
                xd, folded, factors, hq=QuantParams(site.scale, site.bits)
            )
            # tap in original coordinates so traces stay comparable to FP
            h_tap = (tr.h * rank1(factors.r_c, factors.r_l, factors.r_d)).astype(
                np.float32
            )
            y_dir = tr.y
        else:
            pq = SsmParams(
                a=params.a,
                w_delta=weight(f"{prefix}.w_delta", params.w_delta),
                w_b=weight(f"{prefix}.w_b", params.w_b),
                w_c=weight(f"{prefix}.w_c", params.w_c),
                d_skip=params.d_skip,
            )
            hq = None
            if isinstance(site, MinMaxSite):
                hq = QuantParams(site.scale, site.bits)
            tr = run_direction(xd, pq, hq)
            h_tap, y_dir = tr.h, tr.y
        taps[site_name] = h_tap
        y_ssm = y_ssm + (y_dir[:, ::-1] if reverse else y_dir)

    y_ssm = fq["ssm_y"](y_ssm)
    taps["ssm_y"] = y_ssm
    gate = _silu(z)
    out = matmul_f32(weight("out_proj", m.w_out), (y_ssm * gate).astype(np.float32))
    out = fq["out_proj"](out)
    taps["out_proj"] = out
    return (out + arr).astype(np.float32), taps


def forward_fp(m: VimBlock, x):
    """Full-precision forward pass; returns (y, taps at every site)."""
    return _forward(m, x, None)


def forward_quant(m: VimBlock, qc: QuantConfig, x, return_taps: bool = False):
    """Forward pass with fake quantization at every configured site."""
    y, taps = _forward(m, x, qc)
    return (y, taps) if return_taps else y


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------


def _envelope_minmax(arrs, bits: int) -> MinMaxSite:
    peak = max(float(np.max(np.abs(a))) for a in arrs)
    if peak == 0.0:
        log.warning("all-zero activation site, falling back to scale 1.0")
        scale = 1.0
    else:
        scale = float(np.float32(peak / qrange(bits)[1]))
    return MinMaxSite(scale=scale, bits=bits)


def _searched_site(flat: np.ndarray, bits: int, metric, n_points: int) -> SimilaritySite:
    try:
        space = build_search_space(flat, bits, n_points)
        space.append(minmax_scale(flat, bits))
        scale, score = search_scale(flat, bits, space, metric)
    except AllZeroInputError:
        log.warning("all-zero activation site, falling back to scale 1.0")
        scale, score = 1.0, 1.0
    return SimilaritySite(scale=scale, bits=bits, score=score)


def _hidden_site(
    traces, rep: RepFn, disp: DispKind, bits: int, metric, n_points: int
) -> HiddenSite:
    factors = factors_from_calibration(traces, rep, disp)
    r1 = rank1(factors.r_c, factors.r_l, factors.r_d)
    flat = np.concatenate([(tr / r1).ravel() for tr in traces])
    space = build_search_space(flat, bits, n_points)
    space.append(minmax_scale(flat, bits))
    scale, _ = search_scale(flat, bits, space, metric)
    return HiddenSite(
        scale=scale,
        bits=bits,
        rep=factors.rep.kind.value,
        disp=factors.disp.value,
        percentile_p=factors.rep.percentile_p,
        quantile_q=factors.rep.quantile_q,
        r_c=tuple(float(v) for v in factors.r_c),
        r_l=tuple(float(v) for v in factors.r_l),
        r_d=tuple(float(v) for v in factors.r_d),
    )


def calibrate_from_taps(
    m: VimBlock,
    taps_list: list[dict],
    policy: str,
    rep: RepFn = RepFn(RepKind.MEAN),
    disp: DispKind = DispKind.STD,
    k: int = 4,
    act_bits: int = 8,
    weight_bits: int = 8,
    hidden_bits: int = 8,
    metric: SimilarityMetric = SimilarityMetric.COSINE,
    n_points: int = 100,
) -> QuantConfig:
    """Assemble a QuantConfig from already-collected FP taps (see calibrate)."""
    if policy not in POLICIES:
        raise ConfigMismatchError(f"unknown policy {policy!r}")
    digest = model_digest(m)
    if policy == "passthrough":
        sites = {name: PassthroughSite() for name in ACT_SITES}
        return QuantConfig(policy, act_bits, weight_bits, digest, sites, {})

    sites: dict = {}
    sites["in_proj"] = _envelope_minmax([t["in_proj"] for t in taps_list], act_bits)
    sites["ssm_y"] = _envelope_minmax([t["ssm_y"] for t in taps_list], act_bits)

    conv_cat = np.concatenate([t["conv1d"] for t in taps_list], axis=1)
    proj_cat = np.concatenate([t["out_proj"] for t in taps_list], axis=0)
    if policy == "baseline":
        sites["conv1d"] = _envelope_minmax([t["conv1d"] for t in taps_list], act_bits)
        sites["out_proj"] = _envelope_minmax([t["out_proj"] for t in taps_list], act_bits)
    elif policy == "similarity":
        sites["conv1d"] = _searched_site(conv_cat.ravel(), act_bits, metric, n_points)
        sites["out_proj"] = _searched_site(proj_cat.ravel(), act_bits, metric, n_points)
    else:
        mode = "minmax" if policy == "kscaled" else "search"
        pc = calibrate_kscaled(
            conv_cat, KAxis.CHANNEL, k=k, bits=act_bits, metric=metric,
            scale_mode=mode, n_points=n_points,
        )
        pt = calibrate_kscaled(
            proj_cat, KAxis.TOKEN, k=k, bits=act_bits, metric=metric,
            scale_mode=mode, n_points=n_points,
        )
        for name, p in (("conv1d", pc), ("out_proj", pt)):
            sites[name] = KScaledSite(
                axis=p.axis.value, k=p.k, s1=p.s1, shifts=p.shifts,
                assignment=p.assignment, bits=p.bits,
            )

    hidden_factors: dict[str, ReparamFactors] = {}
    for name in ("ssm_h_fwd", "ssm_h_bwd"):
        traces = [t[name] for t in taps_list]
        if policy == "ours":
            site = _hidden_site(traces, rep, disp, hidden_bits, metric, n_points)
            sites[name] = site
            hidden_factors[name] = site.factors()
        else:
            sites[name] = _envelope_minmax(traces, hidden_bits)

    weights = {}
    wtensors = {
        "in_proj": m.w_in,
        "conv1d": m.conv_w,
        "out_proj": m.w_out,
        "fwd.w_delta": m.fwd.w_delta,
        "fwd.w_b": m.fwd.w_b,
        "fwd.w_c": m.fwd.w_c,
        "bwd.w_delta": m.bwd.w_delta,
        "bwd.w_b": m.bwd.w_b,
        "bwd.w_c": m.bwd.w_c,
    }
    if policy == "ours":
        # weight scales must match the folded tensors forward_quant will see
        for prefix, params in (("fwd", m.fwd), ("bwd", m.bwd)):
            folded = fold_params(params, hidden_factors[f"ssm_h_{prefix}"].r_d)
            wtensors[f"{prefix}.w_b"] = folded.w_b
            wtensors[f"{prefix}.w_c"] = folded.w_c
    for name, w in wtensors.items():
        try:
            scale = minmax_scale(w, weight_bits)
        except AllZeroInputError:
            log.warning("all-zero weight %s, falling back to scale 1.0", name)
            scale = 1.0
        weights[name] = MinMaxSite(scale=scale, bits=weight_bits)

    return QuantConfig(policy, act_bits, weight_bits, digest, sites, weights)


def calibrate(m: VimBlock, samples, policy: str = "ours", **kwargs) -> QuantConfig:
    """Run FP forwards over the calibration samples and assign a quantizer to
    every site per the policy (see module docstring for the policy table)."""
    samples = [as_f32(s) for s in samples]
    if not samples:
        raise TensorError("empty calibration set")
    if len(samples) < 8:
        log.warning("small calibration set (%d samples)", len(samples))
    if policy == "passthrough":
        return calibrate_from_taps(m, [], policy, **kwargs)
    taps_list = [forward_fp(m, x)[1] for x in samples]
    return calibrate_from_taps(m, taps_list, policy, **kwargs)


def make_passthrough_config(m: VimBlock) -> QuantConfig:
    return calibrate_from_taps(m, [], "passthrough")


# --------------------------------------------------------------------------
# Evaluation helpers
# --------------------------------------------------------------------------


def output_metrics(ref: np.ndarray, got: np.ndarray) -> dict:
    """cosine / MSE / max-abs-error of `got` against the FP reference."""
    a = ref.ravel().astype(np.float64)
    b = got.ravel().astype(np.float64)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        cos = 1.0 if na == nb else 0.0
    else:
        cos = float(np.dot(a, b) / (na * nb))
    return {
        "cosine": cos,
        "mse": float(np.mean((a - b) ** 2)),
        "max_abs_err": float(np.max(np.abs(a - b))),
    }


def mean_output_cosine(m: VimBlock, qc: QuantConfig, inputs) -> float:
    scores = []
    for x in inputs:
        y_fp, _ = forward_fp(m, x)
        y_q = forward_quant(m, qc, x)
        scores.append(output_metrics(y_fp, y_q)["cosine"])
    return float(np.mean(scores))
