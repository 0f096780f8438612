"""Finite-difference gradient suite over every op and every composite.

Each case draws a fresh small random instance per trial and returns the
worst relative error seen across trials. Scalar losses are formed as
``sum(out * R)`` with a fixed random ``R`` so that no gradient is trivially
constant (a plain sum through group norm would be identically zero).
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import nn, ops
from .backbone import LEVELS, BackboneSpec, backbone_forward, init_backbone
from .gradcheck import grad_check
from .heads import (LevelTargets, detection_loss, head_forward, init_alpha, init_head,
                    iou_loss, sigmoid_focal_loss, uncertainty_alpha, uncertainty_wrap)
from .pyramid import (PyramidConfig, build_pyramid, channel_swap, fusion_weight,
                      grouping_matrix, init_fusion, init_grouping, init_pyramid,
                      regroup_channels)
from .tensor import Tensor

CASES: dict[str, Callable] = {}


def _case(name):
    def register(fn):
        CASES[name] = fn
        return fn
    return register


def _probe(out: Tensor, rng) -> Tensor:
    return ops.sum(ops.mul(out, Tensor(rng.normal(size=out.shape))))


def _probe_all(outs: dict, probes: dict) -> Tensor:
    total = None
    for k in sorted(outs):
        term = ops.sum(ops.mul(outs[k], Tensor(probes[k])))
        total = term if total is None else ops.add(total, term)
    return total


def _leaf(rng, *shape, lo=None) -> Tensor:
    data = rng.normal(size=shape) if lo is None else rng.uniform(lo, lo + 2.0, size=shape)
    return Tensor(data, requires_grad=True)


def _pick(params: nn.Params, rng, count: int) -> list:
    names = sorted(params)
    chosen = rng.choice(len(names), size=min(count, len(names)), replace=False)
    return [names[i] for i in sorted(chosen)]


def _jitter(params: nn.Params, rng, std: float = 0.3) -> None:
    """Move biases and GN shifts off zero so ReLU inputs are not exactly at the kink."""
    for name, p in params.items():
        if name.endswith((".bias", ".beta")) or ".head." in name:
            p.data = p.data + rng.normal(0.0, std, size=p.shape)


def _param_case(rng, params: nn.Params, build: Callable, extra: tuple = (), count: int = 3):
    """Probe ``extra`` leaves plus ``count`` randomly chosen parameters."""
    chosen = _pick(params, rng, count)
    for p in params.values():
        p.requires_grad = False
    for name in chosen:
        params[name].requires_grad = True
    leaves = list(extra) + [params[n] for n in chosen]

    def fn(*_):
        return build()
    return fn, leaves


# ---------------------------------------------------------------- primitives

@_case("ew.add")
def _add(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    r = rng.normal(size=(2, 3, 4))
    return lambda a, b: ops.sum(ops.mul(ops.add(a, b), Tensor(r))), [a, b]


@_case("ew.add-broadcast")
def _add_bc(rng):
    a, b = _leaf(rng, 2, 3, 4, 4), _leaf(rng, 3, 1, 1)
    r = rng.normal(size=(2, 3, 4, 4))
    return lambda a, b: ops.sum(ops.mul(ops.add(a, b), Tensor(r))), [a, b]


@_case("ew.sub")
def _sub(rng):
    a, b = _leaf(rng, 5, 3), _leaf(rng, 5, 3)
    r = rng.normal(size=(5, 3))
    return lambda a, b: ops.sum(ops.mul(ops.sub(a, b), Tensor(r))), [a, b]


@_case("ew.mul")
def _mul(rng):
    a, b = _leaf(rng, 4, 4), _leaf(rng, 4, 4)
    return lambda a, b: ops.sum(ops.mul(a, b)), [a, b]


@_case("ew.scalar-mul")
def _scale(rng):
    a, c = _leaf(rng, 6), float(rng.normal())
    r = rng.normal(size=6)
    return lambda a: ops.sum(ops.mul(ops.scale(a, c), Tensor(r))), [a]


@_case("ew.exp")
def _exp(rng):
    a = _leaf(rng, 3, 5)
    r = rng.normal(size=(3, 5))
    return lambda a: ops.sum(ops.mul(ops.exp(a), Tensor(r))), [a]


@_case("ew.neg-exp")
def _negexp(rng):
    a = _leaf(rng, 3, 5)
    r = rng.normal(size=(3, 5))
    return lambda a: ops.sum(ops.mul(ops.neg_exp(a), Tensor(r))), [a]


@_case("ew.relu")
def _relu(rng):
    data = rng.normal(size=(4, 6))
    data[np.abs(data) < 1e-3] = 0.5  # keep probes off the kink
    a = Tensor(data, requires_grad=True)
    r = rng.normal(size=(4, 6))
    return lambda a: ops.sum(ops.mul(ops.relu(a), Tensor(r))), [a]


@_case("ew.sigmoid")
def _sigmoid(rng):
    a = _leaf(rng, 4, 6)
    r = rng.normal(size=(4, 6))
    return lambda a: ops.sum(ops.mul(ops.sigmoid(a), Tensor(r))), [a]


@_case("softmax-rows")
def _softmax(rng):
    a = _leaf(rng, 3, 4, 4)
    return lambda a: _probe(ops.softmax_rows(a), np.random.default_rng(7)), [a]


@_case("mean")
def _mean(rng):
    a = _leaf(rng, 3, 7)
    return lambda a: ops.mul(ops.mean(a), ops.mean(a)), [a]


@_case("global-avg-pool")
def _gap(rng):
    a = _leaf(rng, 2, 3, 4, 4)
    r = rng.normal(size=(2, 3, 1, 1))
    return lambda a: ops.sum(ops.mul(ops.global_avg_pool(a), Tensor(r))), [a]


@_case("matmul")
def _matmul(rng):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 3, 5)
    r = rng.normal(size=(4, 5))
    return lambda a, b: ops.sum(ops.mul(ops.matmul(a, b), Tensor(r))), [a, b]


@_case("matmul-batched")
def _bmm(rng):
    a, b = _leaf(rng, 2, 4, 4), _leaf(rng, 2, 4, 6)
    r = rng.normal(size=(2, 4, 6))
    return lambda a, b: ops.sum(ops.mul(ops.matmul(a, b), Tensor(r))), [a, b]


@_case("conv2d-3x3")
def _conv3(rng):
    stride = int(rng.choice([1, 2]))
    x, w, b = _leaf(rng, 2, 3, 6, 6), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    r = rng.normal(size=(2, 4, 6 // stride, 6 // stride))
    return lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b, stride=stride), Tensor(r))), [x, w, b]


@_case("conv2d-1x1")
def _conv1(rng):
    x, w, b = _leaf(rng, 2, 4, 5, 5), _leaf(rng, 3, 4, 1, 1), _leaf(rng, 3)
    r = rng.normal(size=(2, 3, 5, 5))
    return lambda x, w, b: ops.sum(ops.mul(ops.conv2d(x, w, b), Tensor(r))), [x, w, b]


@_case("group-norm")
def _gn(rng):
    x, g, b = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 4), _leaf(rng, 4)
    r = rng.normal(size=(2, 4, 3, 3))
    return lambda x, g, b: ops.sum(ops.mul(ops.group_norm(x, 2, g, b), Tensor(r))), [x, g, b]


@_case("reshape")
def _reshape(rng):
    x = _leaf(rng, 2, 3, 4)
    r = rng.normal(size=(6, 4))
    return lambda x: ops.sum(ops.mul(ops.reshape(x, (6, 4)), Tensor(r))), [x]


@_case("split-concat")
def _split(rng):
    x = _leaf(rng, 2, 8, 3, 3)
    r = [rng.normal(size=(2, 2, 3, 3)) * (i + 1) for i in range(4)]

    def fn(x):
        parts = ops.split_channels(x, 4)
        swapped = ops.concat_channels([ops.mul(p, Tensor(ri)) for p, ri in zip(parts[::-1], r)])
        return ops.sum(ops.mul(swapped, swapped))
    return fn, [x]


@_case("upsample-nearest-2x")
def _up_n(rng):
    x = _leaf(rng, 2, 3, 3, 3)
    r = rng.normal(size=(2, 3, 6, 6))
    return lambda x: ops.sum(ops.mul(ops.upsample2x(x, "nearest"), Tensor(r))), [x]


@_case("upsample-bilinear-2x")
def _up_b(rng):
    x = _leaf(rng, 2, 3, 3, 3)
    r = rng.normal(size=(2, 3, 6, 6))
    return lambda x: ops.sum(ops.mul(ops.upsample2x(x, "bilinear"), Tensor(r))), [x]


@_case("adaptive-avg-pool")
def _pool(rng):
    x = _leaf(rng, 2, 3, 8, 8)
    out = int(rng.choice([1, 2, 4]))
    r = rng.normal(size=(2, 3, out, out))
    return lambda x: ops.sum(ops.mul(ops.adaptive_avg_pool(x, (out, out)), Tensor(r))), [x]


@_case("stop-gradient")
def _stop(rng):
    # the stopped branch is a function of a tensor outside the probed set, so
    # central differences see only the surviving path
    x = _leaf(rng, 3, 4)
    c = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return lambda x: ops.sum(ops.mul(x, ops.stop_gradient(ops.mul(c, c)))), [x]


@_case("focal-loss")
def _focal(rng):
    x = _leaf(rng, 2, 3, 4, 4)
    x.data *= 3.0
    t = (rng.random((2, 3, 4, 4)) < 0.3).astype(float)
    return lambda x: sigmoid_focal_loss(x, t), [x]


@_case("iou-loss")
def _iou(rng):
    d = _leaf(rng, 2, 4, 3, 3, lo=0.5)
    tgt = rng.uniform(0.5, 2.5, size=(2, 4, 3, 3))
    pos = rng.random((2, 3, 3)) < 0.6
    pos[0, 0, 0] = True
    return lambda d: iou_loss(d, tgt, pos), [d]


# ---------------------------------------------------------------- composites

def _small_backbone(rng) -> BackboneSpec:
    return BackboneSpec(stage_channels=(4, 6, 8, 8, 8), blocks_per_stage=(1, 1, 2, 1, 1),
                        input_size=32, seed=int(rng.integers(1 << 30)))


@_case("composite.conv-gn-relu")
def _block(rng):
    params: nn.Params = {}
    nn.add_conv_block(params, "blk", rng, 3, 4)
    x = _leaf(rng, 2, 3, 6, 6)
    r = rng.normal(size=(2, 4, 6, 6))
    fn, leaves = _param_case(rng, params, lambda: ops.sum(ops.mul(nn.conv_block(x, params, "blk"), Tensor(r))),
                             (x,), count=2)
    return fn, leaves


@_case("composite.backbone")
def _backbone(rng):
    spec = _small_backbone(rng)
    params = init_backbone(spec, rng)
    _jitter(params, rng)
    img = _leaf(rng, 1, 3, 32, 32)
    probes = {i: rng.normal(size=(1, spec.channels(i), 32 >> i, 32 >> i)) for i in LEVELS}

    def build():
        feats = backbone_forward(img, params, spec)
        return _probe_all(feats, probes)
    return _param_case(rng, params, build, (img,))


def _pyramid_case(rng, cfg: PyramidConfig):
    spec = _small_backbone(rng)
    params = init_pyramid(spec, cfg, rng)
    _jitter(params, rng)
    feats = {i: _leaf(rng, 1, spec.channels(i), 32 >> i, 32 >> i) for i in LEVELS}
    probes = {lv: rng.normal(size=(1, cfg.channels, 32 >> lv, 32 >> lv)) for lv in LEVELS}

    def build():
        pyr = build_pyramid(feats, params, cfg)
        return _probe_all(pyr.levels, probes)
    return _param_case(rng, params, build, tuple(feats[i] for i in LEVELS))


@_case("composite.fpn")
def _fpn(rng):
    return _pyramid_case(rng, PyramidConfig("fpn", channels=8))


@_case("composite.fpn-bilinear")
def _fpn_bil(rng):
    return _pyramid_case(rng, PyramidConfig("fpn", channels=8, upsample="bilinear"))


@_case("composite.feature-grouping")
def _fg(rng):
    return _pyramid_case(rng, PyramidConfig("fg", channels=8))


@_case("composite.feature-grouping-softmax")
def _fg_soft(rng):
    return _pyramid_case(rng, PyramidConfig("fg", channels=8, row_softmax=True))


@_case("composite.cascade-grouping")
def _cfg(rng):
    return _pyramid_case(rng, PyramidConfig("cfg", channels=8, cascade_times=int(rng.choice([2, 3]))))


@_case("composite.grouping-matrix")
def _gm(rng):
    params: nn.Params = {}
    init_grouping(params, rng, "g", 8, head_std=0.3)
    x = _leaf(rng, 2, 8, 4, 4)

    def build():
        m = grouping_matrix(x, params, "g")
        return ops.sum(ops.mul(m, m))
    return _param_case(rng, params, build, (x,))


@_case("composite.channel-swap-regroup")
def _swap(rng):
    xs = {k: _leaf(rng, 1, 8, 32 >> k, 32 >> k) for k in LEVELS}
    ms = {k: _leaf(rng, 8, 8) for k in LEVELS}
    probes = {lv: rng.normal(size=(1, 8, 32 >> lv, 32 >> lv)) for lv in LEVELS}

    def fn(*leaves):
        swapped = {k: channel_swap(xs[k], ms[k]) for k in LEVELS}
        pp = regroup_channels(swapped)
        return _probe_all(pp, probes)
    return fn, [xs[k] for k in LEVELS] + [ms[k] for k in LEVELS]


@_case("composite.fusion-weight")
def _fw(rng):
    params: nn.Params = {}
    init_fusion(params, rng, 4)
    x = _leaf(rng, 2, 4, 4, 4)
    r = rng.normal(size=(2, 1, 4, 4))
    return _param_case(rng, params, lambda: ops.sum(ops.mul(fusion_weight(x, params), Tensor(r))), (x,))


@_case("composite.head")
def _head(rng):
    params: nn.Params = {}
    init_head(params, rng, "h", 4, 6, 3, tower_blocks=int(rng.choice([1, 2])))
    params["h.cls.weight"].data = rng.normal(0.0, 0.3, size=params["h.cls.weight"].shape)
    params["h.reg.weight"].data = rng.normal(0.0, 0.3, size=params["h.reg.weight"].shape)
    x = _leaf(rng, 2, 4, 4, 4)
    rc, rr = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 4, 4, 4))

    def build():
        logits, dist, _ = head_forward(x, params, "h", 8)
        return ops.add(ops.sum(ops.mul(logits, Tensor(rc))), ops.sum(ops.mul(dist, Tensor(rr))))
    return _param_case(rng, params, build, (x,))


@_case("composite.detection-loss")
def _det(rng):
    logits = _leaf(rng, 2, 3, 4, 4)
    dist = _leaf(rng, 2, 4, 4, 4, lo=1.0)
    pos = rng.random((2, 4, 4)) < 0.4
    pos[0, 1, 1] = True
    cls = np.zeros((2, 3, 4, 4))
    labels = rng.integers(0, 3, size=(2, 4, 4))
    for n, y, x in zip(*np.nonzero(pos)):
        cls[n, labels[n, y, x], y, x] = 1.0
    reg = rng.uniform(1.0, 3.0, size=(2, 4, 4, 4))
    tg = LevelTargets(cls, reg, pos, 8)
    lam = float(rng.uniform(0.5, 2.0))
    return lambda lg, d: detection_loss(lg, d, tg, lam)[2], [logits, dist]


@_case("composite.uncertainty-wrap")
def _unc(rng):
    params: nn.Params = {}
    init_alpha(params, rng, "a", 4, bias=float(rng.uniform(0.3, 2.0)))
    params["a.weight"].data = rng.normal(0.0, 0.2, size=params["a.weight"].shape)
    x = _leaf(rng, 2, 4, 3, 3)
    loss = Tensor(rng.uniform(0.1, 5.0), requires_grad=True)
    tau = float(rng.uniform(0.01, 1.0))

    def build():
        return uncertainty_wrap(loss, uncertainty_alpha(x, params, "a"), tau)
    return _param_case(rng, params, build, (x, loss), count=2)


@_case("composite.detector-aux-uncertainty")
def _detector(rng):
    from .detector import ModelConfig, compute_losses, forward, init_model
    from .heads import LossConfig
    cfg = ModelConfig(_small_backbone(rng), PyramidConfig("fpn", channels=8),
                      LossConfig("aux-uncertainty", ranges=((2, 0, 6), (3, 6, 12), (4, 12, 20), (5, 20, np.inf))))
    params = init_model(cfg, int(rng.integers(1 << 30)))
    _jitter(params, rng, 0.1)
    img = Tensor(rng.normal(size=(1, 3, 32, 32)))
    objs = [[((2.0, 3.0, 7.0, 8.0), 0), ((10.0, 4.0, 28.0, 24.0), 1), ((1.0, 14.0, 11.0, 26.0), 2)]]

    def build():
        out = forward(params, cfg, img, train=True)
        return compute_losses(out, objs, cfg, params).total
    return _param_case(rng, params, build, count=4)


# -------------------------------------------------------------------- runner

def run_case(name: str, trials: int = 20, seed: int = 0, step: float = 1e-6,
             max_coords: int = 6) -> float:
    """Worst relative error of one case over ``trials`` random instances."""
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial, sum(map(ord, name))])
        fn, inputs = CASES[name](rng)
        worst = max(worst, grad_check(fn, inputs, step=step, max_coords=max_coords, seed=trial))
    return worst


def run_gradcheck_suite(trials: int = 20, seed: int = 0, names: Optional[list] = None) -> dict:
    """name -> worst relative error, in registration order."""
    if trials < 1:
        raise ValueError("need at least one trial")
    return {name: run_case(name, trials, seed) for name in (names or CASES)}
