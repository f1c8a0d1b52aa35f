"""
Numeric reference of the lighting convolutional attention adapter.

Forward path for a feature tensor x of shape (B, C, H, W):

    g_ch = sigmoid(MLP(avgpool x) + MLP(maxpool x))            (B, C, 1, 1)
    g_sp = sigmoid(conv7x7([mean_c x; max_c x]))               (B, 1, H, W)
    e    = laplacian * conv1x1(x)                              (B, 1, H, W)
    g_ct = sigmoid(conv3x3(minmax_normalize(e)))               (B, 1, H, W)
    phi  = PW(ReLU(GroupNorm(DW(x * g_ch * g_sp * g_ct))))
    out  = block(x) + sigmoid(gamma) * phi

PW starts at zero and gamma at -1, so a fresh adapter adds exactly nothing.
Forward runs in the params dtype (float32 by default); gradient checks cast
everything to float64. Backward passes are analytic and cover every
trainable tensor; the laplacian is a buffer and never receives a gradient.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

logger = logging.getLogger(__name__)

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SPATIAL_KERNEL = 7
GATE_INIT = -1.0
NORM_EPS = 1e-6
GN_EPS = 1e-5
DICE_SMOOTH = 1.0
PARAMS_FORMAT = "lumaforge-lca"
PARAMS_VERSION = 1

TRAINABLE: Tuple[str, ...] = (
    "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    "spatial_w",
    "gray_w", "gray_b",
    "refine_w", "refine_b",
    "dw_w", "dw_b",
    "gn_scale", "gn_shift",
    "pw_w",
    "gamma",
)
BUFFERS: Tuple[str, ...] = ("laplacian",)

SUBLAYERS: Dict[str, Tuple[str, ...]] = {
    "channel_mlp": ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"),
    "spatial_conv": ("spatial_w",),
    "gray_proj": ("gray_w", "gray_b"),
    "refine_conv": ("refine_w", "refine_b"),
    "dw_conv": ("dw_w", "dw_b"),
    "group_norm": ("gn_scale", "gn_shift"),
    "pw_conv": ("pw_w",),
    "gate_scalar": ("gamma",),
}


# ---------------------------------------------------------------- params

@dataclass
class LcaParams:
    channels: int
    reduction: int
    groups: int
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    spatial_w: np.ndarray
    gray_w: np.ndarray
    gray_b: np.ndarray
    refine_w: np.ndarray
    refine_b: np.ndarray
    dw_w: np.ndarray
    dw_b: np.ndarray
    gn_scale: np.ndarray
    gn_shift: np.ndarray
    pw_w: np.ndarray
    gamma: np.ndarray
    laplacian: np.ndarray = field(default_factory=lambda: LAPLACIAN.astype(np.float32))
    eps: float = NORM_EPS
    gn_eps: float = GN_EPS

    def __post_init__(self):
        c, r, g = self.channels, self.reduction, self.groups
        if c < 1 or r < 1 or c % r != 0:
            raise ContractError(f"channels {c} must be divisible by reduction {r}")
        if g < 1 or c % g != 0:
            raise ContractError(f"GroupNorm groups {g} must divide channels {c}")
        for name, shape in expected_shapes(c, r).items():
            arr = getattr(self, name)
            if tuple(np.shape(arr)) != shape:
                raise ContractError(f"{name} has shape {np.shape(arr)}, expected {shape}")
        if not np.array_equal(self.laplacian, LAPLACIAN):
            raise ContractError("laplacian buffer must equal the fixed [[0,1,0],[1,-4,1],[0,1,0]] kernel")

    @property
    def dtype(self) -> np.dtype:
        return self.pw_w.dtype

    def tensors(self, trainable_only: bool = False) -> Dict[str, np.ndarray]:
        names = TRAINABLE if trainable_only else TRAINABLE + BUFFERS
        return {n: getattr(self, n) for n in names}

    def astype(self, dtype) -> "LcaParams":
        return replace(self, **{n: np.asarray(a, dtype=dtype).copy() for n, a in self.tensors().items()})

    def copy(self) -> "LcaParams":
        return self.astype(self.dtype)

    def with_tensor(self, name: str, value: np.ndarray) -> "LcaParams":
        if name not in TRAINABLE:
            raise ContractError(f"{name} is not a trainable tensor")
        return replace(self, **{name: np.asarray(value, dtype=self.dtype)})


def expected_shapes(channels: int, reduction: int) -> Dict[str, Tuple[int, ...]]:
    c, cr = channels, channels // reduction
    return {
        "mlp_w1": (cr, c), "mlp_b1": (cr,), "mlp_w2": (c, cr), "mlp_b2": (c,),
        "spatial_w": (1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL),
        "gray_w": (c,), "gray_b": (1,),
        "refine_w": (3, 3), "refine_b": (1,),
        "dw_w": (c, 3, 3), "dw_b": (c,),
        "gn_scale": (c,), "gn_shift": (c,),
        "pw_w": (c, c),
        "gamma": (1,),
        "laplacian": (3, 3),
    }


def init_params(channels: int, reduction: int = 2, groups: int = 32, seed: int = 0,
                dtype=np.float32, scale: float = 1.0) -> LcaParams:
    """Fresh adapter: fan-in scaled gaussian weights, zero biases, zero PW, gamma = -1."""
    rng = np.random.default_rng(seed)
    c, cr = channels, channels // max(reduction, 1)

    def w(*shape, fan_in):
        return (rng.standard_normal(shape) * scale / math.sqrt(fan_in)).astype(dtype)

    return LcaParams(
        channels=channels, reduction=reduction, groups=groups,
        mlp_w1=w(cr, c, fan_in=c), mlp_b1=np.zeros(cr, dtype),
        mlp_w2=w(c, cr, fan_in=max(cr, 1)), mlp_b2=np.zeros(c, dtype),
        spatial_w=w(1, 2, SPATIAL_KERNEL, SPATIAL_KERNEL, fan_in=2 * SPATIAL_KERNEL ** 2),
        gray_w=w(c, fan_in=c), gray_b=np.zeros(1, dtype),
        refine_w=w(3, 3, fan_in=9), refine_b=np.zeros(1, dtype),
        dw_w=w(c, 3, 3, fan_in=9), dw_b=np.zeros(c, dtype),
        gn_scale=np.ones(c, dtype), gn_shift=np.zeros(c, dtype),
        pw_w=np.zeros((c, c), dtype),
        gamma=np.full(1, GATE_INIT, dtype),
        laplacian=LAPLACIAN.astype(dtype),
    )


def param_count(params: LcaParams, trainable_only: bool = True) -> Dict[str, int]:
    out = {name: int(sum(getattr(params, t).size for t in members)) for name, members in SUBLAYERS.items()}
    if not trainable_only:
        out["laplacian"] = int(params.laplacian.size)
    out["total"] = sum(out.values())
    return out


def save_params(params: LcaParams, path: str | Path) -> Path:
    """JSON tensor dump: {format, version, channels, reduction, groups, tensors: {name: {shape, data}}}."""
    path = Path(path)
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "channels": params.channels,
        "reduction": params.reduction,
        "groups": params.groups,
        "dtype": str(params.dtype),
        "tensors": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in params.tensors().items()
        },
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def load_params(path: str | Path) -> LcaParams:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_FORMAT or doc.get("version") != PARAMS_VERSION:
        raise ContractError(f"{path}: not a {PARAMS_FORMAT} v{PARAMS_VERSION} dump")
    dtype = np.dtype(doc.get("dtype", "float32"))
    tensors = {}
    for name in TRAINABLE + BUFFERS:
        entry = doc["tensors"].get(name)
        if entry is None:
            raise ContractError(f"{path}: tensor {name} missing")
        tensors[name] = np.asarray(entry["data"], dtype=dtype).reshape(entry["shape"])
    return LcaParams(channels=int(doc["channels"]), reduction=int(doc["reduction"]), groups=int(doc["groups"]), **tensors)


# ---------------------------------------------------------------- primitives

def sigmoid(z):
    """Overflow-free logistic."""
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.result_type(z, np.float32))


def _check4(x: np.ndarray, name: str = "x") -> np.ndarray:
    if np.ndim(x) != 4:
        raise ContractError(f"{name} must be a (B, C, H, W) tensor, got shape {np.shape(x)}")
    return x


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    return sliding_window_view(xp, (k, k), axis=(2, 3))


def conv2d_same(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Zero-padded cross-correlation keeping H x W. x (B, Cin, H, W), w (Cout, Cin, k, k)."""
    return np.einsum("bchwij,ocij->bohw", _windows(x, w.shape[-1]), w)


def conv2d_same_input_grad(dout: np.ndarray, w: np.ndarray, in_channels: int) -> np.ndarray:
    b, _, h, wd = dout.shape
    k = w.shape[-1]
    p = k // 2
    dxp = np.zeros((b, in_channels, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += np.einsum("bohw,oc->bchw", dout, w[:, :, i, j])
    return dxp[:, :, p:p + h, p:p + wd]


def depthwise_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("bchwij,cij->bchw", _windows(x, w.shape[-1]), w) + b[None, :, None, None]


def depthwise_input_grad(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    bsz, c, h, wd = dout.shape
    k = w.shape[-1]
    p = k // 2
    dxp = np.zeros((bsz, c, h + 2 * p, wd + 2 * p), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + h, j:j + wd] += dout * w[None, :, i, j, None, None]
    return dxp[:, :, p:p + h, p:p + wd]


def laplacian(g: np.ndarray, kernel: np.ndarray = LAPLACIAN) -> np.ndarray:
    """Zero-padded 3x3 laplacian response of a (B, 1, H, W) map."""
    g = _check4(g, "g")
    return conv2d_same(g, np.asarray(kernel, dtype=g.dtype)[None, None])


# ---------------------------------------------------------------- gates

def _mlp(v: np.ndarray, p: LcaParams) -> Tuple[np.ndarray, np.ndarray]:
    hidden = v @ p.mlp_w1.T + p.mlp_b1
    return np.maximum(hidden, 0) @ p.mlp_w2.T + p.mlp_b2, hidden


def channel_gate(x: np.ndarray, params: LcaParams) -> np.ndarray:
    """sigmoid(MLP(avgpool x) + MLP(maxpool x)), shape (B, C, 1, 1)."""
    return _channel_gate(x, params)[0]


def _channel_gate(x, p):
    x = _check4(x)
    if x.shape[1] != p.channels:
        raise ContractError(f"x has {x.shape[1]} channels, params expect {p.channels}")
    avg = x.mean(axis=(2, 3))
    mx = x.max(axis=(2, 3))
    out_a, h_a = _mlp(avg, p)
    out_m, h_m = _mlp(mx, p)
    gate = sigmoid(out_a + out_m)[:, :, None, None]
    return gate, {"avg": avg, "max": mx, "h_avg": h_a, "h_max": h_m}


def spatial_gate(x: np.ndarray, params: LcaParams) -> np.ndarray:
    """sigmoid(conv7x7([mean_c x; max_c x])), shape (B, 1, H, W)."""
    return _spatial_gate(x, params)[0]


def _spatial_gate(x, p):
    x = _check4(x)
    s_in = np.concatenate([x.mean(axis=1, keepdims=True), x.max(axis=1, keepdims=True)], axis=1)
    return sigmoid(conv2d_same(s_in, p.spatial_w)), {"s_in": s_in}


def contrast_gate(x: np.ndarray, params: LcaParams) -> np.ndarray:
    """Laplacian edge map of a gray projection, min-max normalized per sample, refined. (B, 1, H, W)."""
    return _contrast_gate(x, params)[0]


def _contrast_gate(x, p):
    x = _check4(x)
    g = (np.einsum("bchw,c->bhw", x, p.gray_w) + p.gray_b[0])[:, None]
    e = laplacian(g, p.laplacian)
    flat = e.reshape(e.shape[0], -1)
    i_min = flat.argmin(axis=1)
    i_max = flat.argmax(axis=1)
    mn = flat[np.arange(flat.shape[0]), i_min][:, None, None, None]
    mx = flat[np.arange(flat.shape[0]), i_max][:, None, None, None]
    d = mx - mn + p.eps
    e_hat = (e - mn) / d
    z = conv2d_same(e_hat, p.refine_w[None, None]) + p.refine_b[0]
    return sigmoid(z), {"g": g, "e": e, "e_hat": e_hat, "d": d, "i_min": i_min, "i_max": i_max}


def normalized_edges(x: np.ndarray, params: LcaParams) -> np.ndarray:
    """The per-sample min-max normalized laplacian map fed to the refine conv."""
    return _contrast_gate(x, params)[1]["e_hat"]


def fuse(x: np.ndarray, g_ch: np.ndarray, g_sp: np.ndarray, g_ct: np.ndarray) -> np.ndarray:
    """Conjunctive gating: x * g_ch * g_sp * g_ct with broadcasting."""
    b, c, h, w = _check4(x).shape
    for name, g, shape in (("g_ch", g_ch, (b, c, 1, 1)), ("g_sp", g_sp, (b, 1, h, w)), ("g_ct", g_ct, (b, 1, h, w))):
        if np.shape(g) != shape:
            raise ContractError(f"{name} has shape {np.shape(g)}, expected {shape}")
    return x * g_ch * g_sp * g_ct


def project(x_att: np.ndarray, params: LcaParams) -> np.ndarray:
    """PW(ReLU(GroupNorm(DW(x_att)))); identically zero while PW is zero."""
    return _project(x_att, params)[0]


def _project(x_att, p):
    x_att = _check4(x_att, "x_att")
    b, c, h, w = x_att.shape
    if c != p.channels:
        raise ContractError(f"x_att has {c} channels, params expect {p.channels}")
    if c % p.groups:
        raise ContractError(f"GroupNorm groups {p.groups} must divide channels {c}")
    h1 = depthwise_conv(x_att, p.dw_w, p.dw_b)
    grouped = h1.reshape(b, p.groups, c // p.groups, h, w)
    mean = grouped.mean(axis=(2, 3, 4), keepdims=True)
    var = grouped.var(axis=(2, 3, 4), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.gn_eps)
    xhat = ((grouped - mean) * inv_std).reshape(b, c, h, w)
    y = xhat * p.gn_scale[None, :, None, None] + p.gn_shift[None, :, None, None]
    a = np.maximum(y, 0)
    out = np.einsum("bchw,oc->bohw", a, p.pw_w)
    return out, {"x_att": x_att, "xhat": xhat, "inv_std": inv_std, "y": y, "a": a}


@dataclass
class LcaTrace:
    """Gates and intermediates of one forward pass."""
    g_ch: np.ndarray
    g_sp: np.ndarray
    g_ct: np.ndarray
    x_att: np.ndarray
    cache: Dict[str, Any] = field(default_factory=dict, repr=False)


def lca_forward(x: np.ndarray, params: LcaParams) -> Tuple[np.ndarray, LcaTrace]:
    """phi(x) plus the gate tensors, in channel, spatial, contrast, fuse, project order."""
    x = np.asarray(_check4(x), dtype=params.dtype)
    g_ch, c_ch = _channel_gate(x, params)
    g_sp, c_sp = _spatial_gate(x, params)
    g_ct, c_ct = _contrast_gate(x, params)
    x_att = fuse(x, g_ch, g_sp, g_ct)
    phi, c_pr = _project(x_att, params)
    cache = {"x": x, "ch": c_ch, "sp": c_sp, "ct": c_ct, "pr": c_pr}
    return phi, LcaTrace(g_ch=g_ch, g_sp=g_sp, g_ct=g_ct, x_att=x_att, cache=cache)


# ---------------------------------------------------------------- residual

class IdentityBlock:
    """Stand-in for a frozen encoder block: returns its input."""

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x


class LinearBlock:
    """Frozen random 1x1 channel mixing, fixed by seed."""

    def __init__(self, channels: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.weight = (rng.standard_normal((channels, channels)) / math.sqrt(channels)).astype(dtype)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("bchw,oc->bohw", x, self.weight.astype(x.dtype))


def gated_residual(block_out: np.ndarray, x: np.ndarray, params: LcaParams) -> np.ndarray:
    """block_out + sigmoid(gamma) * phi(x); phi sees the block input, not its output."""
    phi, _ = lca_forward(x, params)
    if np.shape(block_out) != phi.shape:
        raise ContractError(f"block output shape {np.shape(block_out)} differs from phi shape {phi.shape}")
    return block_out + sigmoid(params.gamma[0]) * phi


# ---------------------------------------------------------------- losses

@dataclass(frozen=True)
class LossWeights:
    lambda_s: float = 0.5
    lambda_c: float = 0.1

    def __post_init__(self):
        if not (0.0 <= self.lambda_s <= 1.0):
            raise ContractError(f"lambda_s must lie in [0, 1], got {self.lambda_s}")
        if self.lambda_c < 0.0:
            raise ContractError(f"lambda_c must be >= 0, got {self.lambda_c}")


def _same_shape(a, b, what: str) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _check_probs(p: np.ndarray, m: np.ndarray, what: str) -> None:
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ContractError(f"{what}: probabilities must lie strictly inside (0, 1)")
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ContractError(f"{what}: mask must be binary")


def dice(p, m, smooth: float = DICE_SMOOTH) -> float:
    """(2 sum(p m) + s) / (sum p + sum m + s)."""
    p, m = _same_shape(p, m, "dice")
    return float((2.0 * (p * m).sum() + smooth) / (p.sum() + m.sum() + smooth))


def bce_with_logits(z, m) -> float:
    z, m = _same_shape(z, m, "bce")
    return float(np.mean(np.maximum(z, 0) - z * m + np.log1p(np.exp(-np.abs(z)))))


def bce(p, m) -> float:
    """Mean binary cross-entropy, evaluated through logits."""
    p, m = _same_shape(p, m, "bce")
    _check_probs(p, m, "bce")
    return bce_with_logits(np.log(p) - np.log1p(-p), m)


def seg_loss(p, m) -> float:
    """BCE + 1 - Dice on probabilities."""
    p, m = _same_shape(p, m, "seg_loss")
    _check_probs(p, m, "seg_loss")
    return bce(p, m) + 1.0 - dice(p, m)


def seg_loss_logits(z, m) -> float:
    z, m = _same_shape(z, m, "seg_loss")
    return bce_with_logits(z, m) + 1.0 - dice(sigmoid(z), m)


def prob_diff(a, b):
    """sigmoid(a) - sigmoid(b), nonzero whenever a != b even where both saturate.

    Uses s(a) - s(b) = s(a) s(-b) - s(-a) s(b); each product keeps the small tail.
    """
    a, b = np.asarray(a), np.asarray(b)
    return sigmoid(a) * sigmoid(-b) - sigmoid(-a) * sigmoid(b)


def consistency_loss(z_clean, z_variant) -> float:
    """Mean |sigmoid(z_clean) - sigmoid(z_variant)|; zero exactly when the logits agree."""
    a, b = _same_shape(z_clean, z_variant, "consistency_loss")
    return float(np.mean(np.abs(prob_diff(a, b))))


def combine_instance_losses(supervised: Sequence[float], consistency: Sequence[float], lambda_c: float) -> float:
    """(1/K) sum_k (sup_k + lambda_c * cons_k)."""
    if len(supervised) == 0:
        raise ContractError("at least one instance is required")
    if len(supervised) != len(consistency):
        raise ContractError("supervised and consistency loss lists differ in length")
    return float(sum(s + lambda_c * c for s, c in zip(supervised, consistency)) / len(supervised))


def total_loss(streams: Sequence[Tuple[np.ndarray, np.ndarray]], masks: Sequence[np.ndarray],
               weights: LossWeights = LossWeights()) -> float:
    """Instance-averaged blend of clean/variant seg losses plus weighted consistency.

    Args:
        streams: per instance, (clean_logits, variant_logits)
        masks: per instance, the binary ground-truth mask shared by both streams
    """
    if len(streams) == 0:
        raise ContractError("total_loss needs K >= 1 instances")
    if len(streams) != len(masks):
        raise ContractError(f"{len(streams)} instance streams but {len(masks)} masks")
    sup, cons = [], []
    for (zc, zv), m in zip(streams, masks):
        sup.append(weights.lambda_s * seg_loss_logits(zc, m) + (1.0 - weights.lambda_s) * seg_loss_logits(zv, m))
        cons.append(consistency_loss(zc, zv))
    return combine_instance_losses(sup, cons, weights.lambda_c)


# ---------------------------------------------------------------- backward

def _seg_logit_grad(z: np.ndarray, m: np.ndarray) -> np.ndarray:
    n = z.size
    p = sigmoid(z)
    num = 2.0 * (p * m).sum() + DICE_SMOOTH
    den = p.sum() + m.sum() + DICE_SMOOTH
    d_dice_dp = (2.0 * m * den - num) / den ** 2
    return (p - m) / n - d_dice_dp * p * (1.0 - p)


def _phi_backward(dphi: np.ndarray, trace: LcaTrace, p: LcaParams, grads: Dict[str, np.ndarray]) -> None:
    cache = trace.cache
    x = cache["x"]
    pr = cache["pr"]
    b, c, h, w = x.shape

    # project
    grads["pw_w"] += np.einsum("bohw,bchw->oc", dphi, pr["a"])
    da = np.einsum("bohw,oc->bchw", dphi, p.pw_w)
    dy = da * (pr["y"] > 0)
    grads["gn_scale"] += (dy * pr["xhat"]).sum(axis=(0, 2, 3))
    grads["gn_shift"] += dy.sum(axis=(0, 2, 3))
    dxhat = (dy * p.gn_scale[None, :, None, None]).reshape(b, p.groups, c // p.groups, h, w)
    xhat = pr["xhat"].reshape(b, p.groups, c // p.groups, h, w)
    n = (c // p.groups) * h * w
    dh1 = (pr["inv_std"] / n) * (
        n * dxhat - dxhat.sum(axis=(2, 3, 4), keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=(2, 3, 4), keepdims=True)
    )
    dh1 = dh1.reshape(b, c, h, w)
    grads["dw_w"] += np.einsum("bchw,bchwij->cij", dh1, _windows(pr["x_att"], 3))
    grads["dw_b"] += dh1.sum(axis=(0, 2, 3))
    dx_att = depthwise_input_grad(dh1, p.dw_w)

    # fuse
    g_ch, g_sp, g_ct = trace.g_ch, trace.g_sp, trace.g_ct
    d_gch = (dx_att * x * g_sp * g_ct).sum(axis=(2, 3))
    d_gsp = (dx_att * x * g_ch * g_ct).sum(axis=1, keepdims=True)
    d_gct = (dx_att * x * g_ch * g_sp).sum(axis=1, keepdims=True)

    # channel gate, both pooling paths share the MLP
    ch = cache["ch"]
    du = d_gch * g_ch[:, :, 0, 0] * (1.0 - g_ch[:, :, 0, 0])
    for v, hidden in ((ch["avg"], ch["h_avg"]), (ch["max"], ch["h_max"])):
        r = np.maximum(hidden, 0)
        grads["mlp_w2"] += du.T @ r
        grads["mlp_b2"] += du.sum(axis=0)
        dh = (du @ p.mlp_w2) * (hidden > 0)
        grads["mlp_w1"] += dh.T @ v
        grads["mlp_b1"] += dh.sum(axis=0)

    # spatial gate
    dz_sp = d_gsp * g_sp * (1.0 - g_sp)
    grads["spatial_w"] += np.einsum("bohw,bchwij->ocij", dz_sp, _windows(cache["sp"]["s_in"], SPATIAL_KERNEL))

    # contrast gate
    ct = cache["ct"]
    dz_ct = d_gct * g_ct * (1.0 - g_ct)
    grads["refine_w"] += np.einsum("bhw,bhwij->ij", dz_ct[:, 0], _windows(ct["e_hat"], 3)[:, 0])
    grads["refine_b"] += dz_ct.sum()
    de_hat = conv2d_same_input_grad(dz_ct, p.refine_w[None, None], 1)
    e_hat, d = ct["e_hat"], ct["d"]
    de = de_hat / d
    d_min = (de_hat * (e_hat - 1.0) / d).sum(axis=(1, 2, 3))
    d_max = -(de_hat * e_hat / d).sum(axis=(1, 2, 3))
    flat = de.reshape(b, -1)
    flat[np.arange(b), ct["i_min"]] += d_min
    flat[np.arange(b), ct["i_max"]] += d_max
    de = flat.reshape(de.shape)
    dg = conv2d_same_input_grad(de, p.laplacian[None, None], 1)
    grads["gray_w"] += np.einsum("bhw,bchw->c", dg[:, 0], x)
    grads["gray_b"] += dg.sum()


@dataclass
class DualStreamBatch:
    """Clean and variant features sharing K instance masks, read out by a fixed (K, C) head."""
    clean: np.ndarray
    variant: np.ndarray
    masks: np.ndarray
    head: np.ndarray
    block: Callable[[np.ndarray], np.ndarray] = field(default_factory=IdentityBlock)
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        _check4(self.clean, "clean")
        if np.shape(self.variant) != np.shape(self.clean):
            raise ContractError(f"variant shape {np.shape(self.variant)} differs from clean {np.shape(self.clean)}")
        b, c, h, w = np.shape(self.clean)
        k = np.shape(self.head)[0]
        if np.shape(self.head) != (k, c):
            raise ContractError(f"head must have shape (K, {c}), got {np.shape(self.head)}")
        if np.shape(self.masks) != (b, k, h, w):
            raise ContractError(f"masks must have shape {(b, k, h, w)}, got {np.shape(self.masks)}")


@dataclass
class ObjectiveResult:
    loss: float
    grads: Dict[str, np.ndarray]
    signature: str


def dual_stream_objective(params: LcaParams, batch: DualStreamBatch) -> ObjectiveResult:
    """Total loss of both streams through block + gated adapter, with analytic gradients.

    The signature hashes every branch choice (ReLU masks, min/max positions,
    L1 signs) so finite differences can skip coordinates that cross a kink.
    """
    dtype = params.dtype
    head = np.asarray(batch.head, dtype=dtype)
    masks = np.asarray(batch.masks, dtype=np.float64)
    k = head.shape[0]
    s_gamma = sigmoid(params.gamma[0])

    logits, traces, phis = [], [], []
    for x in (batch.clean, batch.variant):
        x = np.asarray(x, dtype=dtype)
        phi, trace = lca_forward(x, params)
        y = batch.block(x) + s_gamma * phi
        logits.append(np.einsum("bchw,kc->bkhw", y, head).astype(np.float64))
        traces.append(trace)
        phis.append(phi)
    zc, zv = logits

    streams = [(zc[:, i], zv[:, i]) for i in range(k)]
    inst_masks = [masks[:, i] for i in range(k)]
    loss = total_loss(streams, inst_masks, batch.weights)

    lam_s, lam_c = batch.weights.lambda_s, batch.weights.lambda_c
    dzc = np.zeros_like(zc)
    dzv = np.zeros_like(zv)
    signs = []
    for i in range(k):
        dzc[:, i] = lam_s * _seg_logit_grad(zc[:, i], inst_masks[i])
        dzv[:, i] = (1.0 - lam_s) * _seg_logit_grad(zv[:, i], inst_masks[i])
        pc, pv = sigmoid(zc[:, i]), sigmoid(zv[:, i])
        sgn = np.sign(prob_diff(zc[:, i], zv[:, i]))
        signs.append(sgn)
        n = pc.size
        dzc[:, i] += lam_c * sgn * pc * (1.0 - pc) / n
        dzv[:, i] -= lam_c * sgn * pv * (1.0 - pv) / n
    dzc /= k
    dzv /= k

    grads = {name: np.zeros(getattr(params, name).shape, dtype=np.float64) for name in TRAINABLE}
    d_gamma = 0.0
    sig_parts: List[np.ndarray] = []
    for dz, trace, phi in ((dzc, traces[0], phis[0]), (dzv, traces[1], phis[1])):
        dy = np.einsum("bkhw,kc->bchw", dz, head.astype(np.float64))
        d_gamma += float((dy * phi).sum()) * float(s_gamma * (1.0 - s_gamma))
        _phi_backward(dy * s_gamma, trace, params, grads)
        ch, ct, pr = trace.cache["ch"], trace.cache["ct"], trace.cache["pr"]
        sig_parts += [ch["h_avg"] > 0, ch["h_max"] > 0, pr["y"] > 0, ct["i_min"], ct["i_max"]]
    grads["gamma"][0] = d_gamma
    sig_parts += signs

    digest = hashlib.sha1()
    for part in sig_parts:
        digest.update(np.ascontiguousarray(part).astype(np.int8 if part.dtype == bool else np.int64).tobytes())
    return ObjectiveResult(loss=loss, grads=grads, signature=digest.hexdigest())


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    max_rel_error: float = 0.0
    max_unfloored_rel_error: float = 0.0
    checked: int = 0
    floored: int = 0
    skipped: int = 0
    per_tensor: Dict[str, float] = field(default_factory=dict)
    worst: Optional[Dict[str, Any]] = None

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed, "tolerance": self.tolerance, "step": self.step,
            "max_rel_error": self.max_rel_error, "max_unfloored_rel_error": self.max_unfloored_rel_error,
            "checked": self.checked, "floored": self.floored, "skipped": self.skipped,
            "per_tensor": self.per_tensor, "worst": self.worst,
        }


def grad_check(objective: Callable[[LcaParams, Any], ObjectiveResult], params: LcaParams, x: Any,
               tolerance: float = 1e-4, h: float = 1e-3, grad_floor: float = 1e-2,
               names: Optional[Sequence[str]] = None, max_coords: Optional[int] = None,
               seed: int = 0) -> GradCheckReport:
    """Central differences against analytic gradients, in float64.

    Relative error per coordinate is |a - n| / max(|a|, |n|, grad_floor); the
    pass criterion uses it. The plain |a - n| / max(|a|, |n|) is reported as
    max_unfloored_rel_error, and `floored` counts coordinates where the floor
    set the denominator.
    Coordinates whose perturbed evaluations change the kink signature are
    skipped and counted. Never raises on a failed comparison.
    """
    p64 = params.astype(np.float64)
    base = objective(p64, x)
    report = GradCheckReport(tolerance=tolerance, step=h)
    rng = np.random.default_rng(seed)
    for name in names or TRAINABLE:
        if name not in TRAINABLE:
            raise ContractError(f"{name} is not trainable")
        tensor = getattr(p64, name)
        analytic = base.grads[name]
        coords = list(np.ndindex(tensor.shape))
        if max_coords is not None and len(coords) > max_coords:
            coords = [coords[i] for i in sorted(rng.choice(len(coords), size=max_coords, replace=False))]
        worst_here = 0.0
        for idx in coords:
            plus = tensor.copy()
            minus = tensor.copy()
            plus[idx] += h
            minus[idx] -= h
            rp = objective(p64.with_tensor(name, plus), x)
            rm = objective(p64.with_tensor(name, minus), x)
            if rp.signature != base.signature or rm.signature != base.signature:
                report.skipped += 1
                continue
            numeric = (rp.loss - rm.loss) / (2.0 * h)
            a = float(analytic[idx])
            scale = max(abs(a), abs(numeric))
            rel = abs(a - numeric) / max(scale, grad_floor)
            raw = abs(a - numeric) / scale if scale > 0 else 0.0
            report.max_unfloored_rel_error = max(report.max_unfloored_rel_error, raw)
            report.floored += int(scale < grad_floor)
            report.checked += 1
            worst_here = max(worst_here, rel)
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = {"tensor": name, "index": list(idx), "analytic": a, "numeric": numeric}
        report.per_tensor[name] = worst_here
    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, "grad_check: %d checked, %d skipped, max rel error %.3e, unfloored %.3e, %d coords under the floor",
               report.checked, report.skipped, report.max_rel_error, report.max_unfloored_rel_error, report.floored)
    return report


def make_gradcheck_problem(seed: int = 0, batch: int = 2, channels: int = 8, height: int = 6, width: int = 6,
                           instances: int = 2, reduction: int = 2, groups: int = 2
                           ) -> Tuple[LcaParams, DualStreamBatch]:
    """Small float64 problem with a nonzero PW so every tensor receives gradient."""
    rng = np.random.default_rng(seed)
    params = init_params(channels, reduction, groups, seed=seed, dtype=np.float64, scale=0.5)
    params = replace(
        params,
        pw_w=rng.standard_normal((channels, channels)) * 0.3,
        mlp_b1=rng.standard_normal(channels // reduction) * 0.1,
        gray_b=rng.standard_normal(1) * 0.1,
        refine_b=rng.standard_normal(1) * 0.1,
        dw_b=rng.standard_normal(channels) * 0.1,
        gn_shift=rng.standard_normal(channels) * 0.1,
    )
    clean = rng.standard_normal((batch, channels, height, width))
    variant = clean + 0.3 * rng.standard_normal(clean.shape)
    masks = (rng.random((batch, instances, height, width)) < 0.4).astype(np.float64)
    head = rng.standard_normal((instances, channels)) / math.sqrt(channels)
    return params, DualStreamBatch(clean=clean, variant=variant, masks=masks, head=head)


# ---------------------------------------------------------------- self-test

def _check(checks: List[Dict[str, Any]], name: str, passed: bool, detail: Any = None) -> None:
    checks.append({"name": name, "passed": bool(passed), "detail": detail})
    if not passed:
        logger.warning("self-test check failed: %s (%s)", name, detail)


def run_selftest(seed: int = 0, gradcheck_seeds: int = 1) -> Dict[str, Any]:
    """Invariant, oracle and gradient checks; returns a JSON-ready verdict."""
    checks: List[Dict[str, Any]] = []
    rng = np.random.default_rng(seed)

    fresh = init_params(16, reduction=2, groups=4, seed=seed)
    zero_ok, gate_ok = True, True
    for _ in range(5):
        x = rng.standard_normal((2, 16, 8, 8)).astype(np.float32)
        phi, trace = lca_forward(x, fresh)
        out = gated_residual(IdentityBlock()(x), x, fresh)
        zero_ok &= bool(np.all(phi == 0)) and np.array_equal(out, x)
        for g in (trace.g_ch, trace.g_sp, trace.g_ct):
            gate_ok &= bool(np.all(g > 0) and np.all(g < 1))
    _check(checks, "zero_init_identity", zero_ok)
    _check(checks, "gate_ranges_open_unit_interval", gate_ok)

    s = float(sigmoid(np.float64(GATE_INIT)))
    _check(checks, f"sigmoid_gate_init={s:.5f}", abs(s - 0.26894) < 1e-4, s)

    counts = param_count(fresh)
    _check(checks, "spatial_conv_params=98", counts["spatial_conv"] == 98, counts["spatial_conv"])
    _check(checks, "refine_conv_params=10", counts["refine_conv"] == 10, counts["refine_conv"])
    _check(checks, "laplacian_not_trainable", "laplacian" not in TRAINABLE and "laplacian" not in counts)
    full = init_params(768, reduction=2, groups=32, seed=seed)
    total = 2 * param_count(full)["total"]
    _check(checks, "two_module_total_in_2.3M_2.5M", 2_300_000 <= total <= 2_500_000, total)

    impulse = np.zeros((1, 1, 3, 3))
    impulse[0, 0, 1, 1] = 1.0
    e = laplacian(impulse)[0, 0]
    _check(checks, "laplacian_impulse", e[1, 1] == -4 and all(e[i, j] == 1 for i, j in ((0, 1), (1, 0), (1, 2), (2, 1))), e.tolist())
    yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
    affine = (0.3 * xx - 0.7 * yy + 0.2)[None, None]
    interior = laplacian(affine)[0, 0, 1:-1, 1:-1]
    _check(checks, "laplacian_affine_interior", float(np.abs(interior).max()) < 1e-6, float(np.abs(interior).max()))

    live = init_params(16, reduction=2, groups=4, seed=seed + 1, dtype=np.float64)
    live = replace(live, pw_w=rng.standard_normal((16, 16)) * 0.2)
    xb = rng.standard_normal((2, 16, 8, 8))
    both, _ = lca_forward(xb, live)
    split = np.concatenate([lca_forward(xb[i:i + 1], live)[0] for i in range(2)])
    _check(checks, "batch_independence", float(np.abs(both - split).max()) <= 1e-7, float(np.abs(both - split).max()))

    z = rng.standard_normal((4, 4))
    _check(checks, "consistency_zero_on_equal_logits", consistency_loss(z, z) == 0.0)
    _check(checks, "instance_blend_example=0.52", abs(combine_instance_losses([0.4, 0.6], [0.1, 0.3], 0.1) - 0.52) < 1e-12)

    worst = 0.0
    all_passed = True
    for k in range(gradcheck_seeds):
        p, batch = make_gradcheck_problem(seed=seed + k)
        rep = grad_check(dual_stream_objective, p, batch)
        worst = max(worst, rep.max_rel_error)
        all_passed &= rep.passed
    _check(checks, "grad_check_total_loss", all_passed, worst)

    ok = all(c["passed"] for c in checks)
    return {"ok": ok, "checks": checks}
