"""Pyramid builders: top-down FPN, feature grouping, and its cascade.

Top-down FPN (laterals C'_k are 1x1 projections of C_k)::

    T_5 = C'_5,  T_l = C'_l + up2x(T_{l+1}),  P_l = smooth_l(T_l)

Feature grouping: each C'_k is channel-swapped by a learned Z x Z matrix,
split into four quarters, and quarter l of every level is resized to level
l and concatenated, so every P'_l draws Z/4 channels from each C'_k.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import nn, ops
from .backbone import LEVELS, BackboneSpec
from .tensor import Parameter, Tensor

BUILDERS = ("fpn-free", "fpn", "fg", "cfg")


@dataclass(frozen=True)
class PyramidConfig:
    builder: str = "fpn"
    channels: int = 16
    cascade_times: int = 1
    upsample: str = "nearest"
    row_softmax: bool = False

    def __post_init__(self):
        if self.builder not in BUILDERS:
            raise ValueError(f"unknown builder {self.builder!r}; expected one of {BUILDERS}")
        if self.channels < 4 or self.channels % 4:
            raise ValueError(f"pyramid channels must be a positive multiple of 4, got {self.channels}")
        if self.cascade_times < 1:
            raise ValueError(f"cascade_times must be >= 1, got {self.cascade_times}")
        if self.upsample not in ("nearest", "bilinear"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")

    @property
    def stages(self) -> int:
        """Number of feature-grouping stages actually built."""
        return self.cascade_times if self.builder == "cfg" else 1


@dataclass
class PyramidSet:
    levels: dict = field(default_factory=dict)  # level -> Tensor
    channels: int = 0

    def __getitem__(self, level: int) -> Tensor:
        return self.levels[level]

    def stride(self, level: int) -> int:
        return 2 ** level

    def shape_map(self) -> dict:
        return {lv: t.shape for lv, t in sorted(self.levels.items())}


# ------------------------------------------------------------------ laterals

def init_laterals(params: nn.Params, rng, spec: BackboneSpec, z: int) -> None:
    for k in LEVELS:
        nn.add_conv(params, f"pyramid.lat{k}", rng, spec.channels(k), z, 1)


def lateral_project(feats: Mapping[int, Tensor], params: nn.Params) -> dict[int, Tensor]:
    return {k: nn.conv(feats[k], params, f"pyramid.lat{k}") for k in LEVELS}


def init_smoothing(params: nn.Params, rng, z: int, k: int = 3) -> None:
    for lv in LEVELS:
        nn.add_conv(params, f"pyramid.smo{lv}", rng, z, z, k)


def smooth_pyramid(pp: Mapping[int, Tensor], params: nn.Params) -> PyramidSet:
    out = {lv: nn.conv(pp[lv], params, f"pyramid.smo{lv}") for lv in LEVELS}
    return PyramidSet(out, out[LEVELS[0]].shape[1])


# ------------------------------------------------------------------ top-down

def build_topdown_fpn(laterals: Mapping[int, Tensor], params: nn.Params,
                      upsample: str = "nearest") -> PyramidSet:
    missing = [k for k in LEVELS if k not in laterals]
    if missing:
        raise ValueError(f"top-down FPN is missing lateral levels {missing}")
    running = {5: laterals[5]}
    for lv in (4, 3, 2):
        running[lv] = ops.add(laterals[lv], ops.upsample2x(running[lv + 1], upsample))
    return smooth_pyramid(running, params)


def _fpn_from_features(feats, params, upsample):
    return build_topdown_fpn(lateral_project(feats, params), params, upsample)


def verify_linear_expansion(feats: Mapping[int, Tensor], params: nn.Params, trials: int = 10,
                            seed: int = 0, scalars: Optional[tuple] = None,
                            bias: Optional[float] = None, upsample: str = "nearest") -> float:
    """Superposition residual of the top-down FPN as a map C -> P.

    Lateral and smoothing biases are zeroed (or set to ``bias`` for a
    negative control). Returns the max over trials and levels of
    ``|P(aA + bB) - a P(A) - b P(B)|_inf`` for random feature sets A, B.
    """
    lin = {}
    for name, p in params.items():
        if not name.startswith(("pyramid.lat", "pyramid.smo")):
            continue
        data = p.data
        if name.endswith(".bias"):
            data = np.full_like(data, 0.0 if bias is None else bias)
        lin[name] = Tensor(data)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a, b = scalars if scalars is not None else rng.uniform(-2.0, 2.0, size=2)
        A = {k: rng.normal(size=feats[k].shape) for k in LEVELS}
        B = {k: rng.normal(size=feats[k].shape) for k in LEVELS}
        mix = {k: Tensor(a * A[k] + b * B[k]) for k in LEVELS}
        p_mix = _fpn_from_features(mix, lin, upsample)
        p_a = _fpn_from_features({k: Tensor(v) for k, v in A.items()}, lin, upsample)
        p_b = _fpn_from_features({k: Tensor(v) for k, v in B.items()}, lin, upsample)
        for lv in LEVELS:
            r = p_mix[lv].data - a * p_a[lv].data - b * p_b[lv].data
            worst = max(worst, float(np.abs(r).max()))
    return worst


# ----------------------------------------------------------- feature grouping

def init_grouping(params: nn.Params, rng, name: str, z: int, head_std: float = 1e-3) -> None:
    """G_k: 1x1 conv -> GN -> ReLU -> GAP -> affine Z -> Z*Z (bias = identity)."""
    nn.add_conv(params, f"{name}.conv", rng, z, z, 1)
    nn.add_gn(params, f"{name}.gn", z)
    params[f"{name}.head.weight"] = Parameter(rng.normal(0.0, head_std, size=(z, z * z)),
                                              f"{name}.head.weight")
    params[f"{name}.head.bias"] = Parameter(np.eye(z).reshape(-1), f"{name}.head.bias")


def grouping_matrix(x: Tensor, params: nn.Params, name: str, row_softmax: bool = False) -> Tensor:
    """Per-image Z x Z channel-swapping matrix, shape N x Z x Z."""
    w = params[f"{name}.head.weight"]
    z = w.shape[0]
    if x.shape[1] != z:
        raise ValueError(f"grouping matrix {name} expects {z} channels, got {x.shape[1]}")
    n = x.shape[0]
    h = nn.conv_block(x, params, name)
    pooled = ops.reshape(ops.global_avg_pool(h), (n, z))
    flat = ops.add(ops.matmul(pooled, w), params[f"{name}.head.bias"])
    m = ops.reshape(flat, (n, z, z))
    return ops.softmax_rows(m) if row_softmax else m


def channel_swap(x: Tensor, m: Tensor) -> Tensor:
    """X = reshape_back(M @ reshape(x, Z x HW)), batched over N."""
    n, z, h, w = x.shape
    if m.ndim == 2:
        m = ops.reshape(m, (1,) + m.shape)
    if m.shape[-2:] != (z, z):
        raise ValueError(f"channel_swap: matrix {m.shape} does not fit {z} channels")
    flat = ops.reshape(x, (n, z, h * w))
    return ops.reshape(ops.matmul(m, flat), (n, z, h, w))


def regroup_channels(xs: Mapping[int, Tensor], upsample: str = "nearest") -> dict[int, Tensor]:
    """P'_l = concat_k resize(quarter l of X_k); quarters are taken in level order.

    Coarser quarters are upsampled, finer ones average-pooled, to level l.
    """
    if sorted(xs) != list(LEVELS):
        raise ValueError(f"regroup needs levels {LEVELS}, got {sorted(xs)}")
    z = xs[LEVELS[0]].shape[1]
    if z % 4:
        raise ValueError(f"regroup needs channels divisible by 4, got {z}")
    quarters = {k: ops.split_channels(xs[k], 4) for k in LEVELS}
    out = {}
    for qi, lv in enumerate(LEVELS):
        hw = xs[lv].shape[2:]
        out[lv] = ops.concat_channels([ops.resize(quarters[k][qi], hw, upsample) for k in LEVELS])
    return out


def group_features(feats: Mapping[int, Tensor], params: nn.Params, stage: int,
                   cfg: PyramidConfig) -> dict[int, Tensor]:
    xs = {}
    for k in LEVELS:
        name = f"pyramid.g{stage}.k{k}"
        xs[k] = channel_swap(feats[k], grouping_matrix(feats[k], params, name, cfg.row_softmax))
    return regroup_channels(xs, cfg.upsample)


# ------------------------------------------------------------------- cascade

def init_fusion(params: nn.Params, rng, z: int, name: str = "pyramid.fw") -> None:
    nn.add_conv_block(params, f"{name}.b1", rng, z, z)
    nn.add_conv_block(params, f"{name}.b2", rng, z, z)
    nn.add_conv(params, f"{name}.proj", rng, z, 1, 1)


def fusion_weight(x: Tensor, params: nn.Params, name: str = "pyramid.fw") -> Tensor:
    """Sigmoid weight map, N x 1 x H x W."""
    h = nn.conv_block(x, params, f"{name}.b1")
    h = nn.conv_block(h, params, f"{name}.b2")
    return ops.sigmoid(nn.conv(h, params, f"{name}.proj"))


def fuse_weighted(pp: Mapping[int, Tensor], pp_hat: Mapping[int, Tensor],
                  params: nn.Params) -> dict[int, Tensor]:
    """P''_l = f_w(P'_l) * P'_l + f_w(P^'_l) * P^'_l with one shared f_w."""
    return {lv: ops.add(ops.mul(fusion_weight(pp[lv], params), pp[lv]),
                        ops.mul(fusion_weight(pp_hat[lv], params), pp_hat[lv]))
            for lv in LEVELS}


def cascade_fuse(pp: Mapping[int, Tensor], params: nn.Params, cfg: PyramidConfig) -> dict[int, Tensor]:
    """Apply stages 2..T of the cascade; identity when T == 1."""
    cur = dict(pp)
    for t in range(2, cfg.stages + 1):
        hat = group_features(cur, params, t, cfg)
        cur = fuse_weighted(cur, hat, params)
    return cur


# -------------------------------------------------------------------- entry

def init_pyramid(spec: BackboneSpec, cfg: PyramidConfig, rng) -> nn.Params:
    params: nn.Params = {}
    if cfg.builder == "fpn-free":
        return params
    z = cfg.channels
    init_laterals(params, rng, spec, z)
    if cfg.builder in ("fg", "cfg"):
        for t in range(1, cfg.stages + 1):
            for k in LEVELS:
                init_grouping(params, rng, f"pyramid.g{t}.k{k}", z)
        if cfg.stages > 1:
            init_fusion(params, rng, z)
    init_smoothing(params, rng, z)
    return params


def build_pyramid(feats: Mapping[int, Tensor], params: nn.Params, cfg: PyramidConfig) -> PyramidSet:
    if cfg.builder == "fpn-free":
        raise ValueError("the fpn-free builder has no pyramid")
    lat = lateral_project(feats, params)
    if cfg.builder == "fpn":
        return build_topdown_fpn(lat, params, cfg.upsample)
    pp = group_features(lat, params, 1, cfg)
    return smooth_pyramid(cascade_fuse(pp, params, cfg), params)
