"""Full detector: backbone -> (pyramid) -> dense heads -> losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import nn
from .backbone import LEVELS, BackboneSpec, backbone_forward, init_backbone
from .heads import (LossConfig, assign_targets, detection_loss, head_forward, init_alpha,
                    init_head, total_loss, uncertainty_alpha)
from .pyramid import PyramidConfig, build_pyramid, init_pyramid
from .tensor import Tensor

AUX_STAGES = (2, 3, 4)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    num_classes: int = 3
    shared_heads: bool = True

    @property
    def fpn_free(self) -> bool:
        return self.pyramid.builder == "fpn-free"

    @property
    def head_levels(self) -> tuple:
        return (5,) if self.fpn_free else LEVELS

    @property
    def uses_aux(self) -> bool:
        return self.loss.mode != "base"

    def level_ranges(self) -> dict:
        if self.fpn_free:
            return {5: (0.0, float("inf"))}
        return self.loss.range_map()

    def head_name(self, level: int) -> str:
        return "head" if (self.shared_heads or self.fpn_free) else f"head.p{level}"


def init_model(cfg: ModelConfig, seed: int = 0) -> nn.Params:
    rng = np.random.default_rng(seed)
    params = init_backbone(cfg.backbone, rng)
    params.update(init_pyramid(cfg.backbone, cfg.pyramid, rng))
    z = cfg.pyramid.channels
    if cfg.fpn_free:
        init_head(params, rng, "head", cfg.backbone.channels(5), z, cfg.num_classes)
    else:
        for lv in LEVELS:
            name = cfg.head_name(lv)
            if f"{name}.cls.weight" not in params:
                init_head(params, rng, name, z, z, cfg.num_classes)
    if cfg.uses_aux:
        for i in AUX_STAGES:
            init_head(params, rng, f"aux{i}", cfg.backbone.channels(i), z, cfg.num_classes,
                      tower_blocks=1)
            if cfg.loss.mode == "aux-uncertainty":
                for task in ("cls", "reg"):
                    init_alpha(params, rng, f"unc.aux{i}.{task}", z, cfg.loss.alpha_bias_init)
    return params


@dataclass
class Outputs:
    feats: dict
    pyramid: Optional[object]
    preds: dict  # level -> (logits, dist)
    aux: dict = field(default_factory=dict)  # stage -> (logits, dist, tower)


def forward(params: nn.Params, cfg: ModelConfig, image: Tensor, train: bool = True,
            block_interstage: bool = False) -> Outputs:
    """Run the detector. Auxiliary branches only exist when ``train`` is set."""
    feats = backbone_forward(image, params, cfg.backbone, block_interstage)
    if cfg.fpn_free:
        pyr = None
        sources = {5: feats[5]}
    else:
        pyr = build_pyramid(feats, params, cfg.pyramid)
        sources = pyr.levels
    preds = {}
    for lv in cfg.head_levels:
        logits, dist, _ = head_forward(sources[lv], params, cfg.head_name(lv), 2 ** lv)
        preds[lv] = (logits, dist)
    aux = {}
    if train and cfg.uses_aux:
        for i in AUX_STAGES:
            aux[i] = head_forward(feats[i], params, f"aux{i}", 2 ** i)
    return Outputs(feats, pyr, preds, aux)


@dataclass
class LossResult:
    total: Tensor
    breakdown: object
    levels: dict  # level -> combined per-level loss tensor
    aux: dict  # stage -> plain combined auxiliary loss tensor


def compute_losses(out: Outputs, objects: Sequence, cfg: ModelConfig,
                   params: Optional[nn.Params] = None) -> LossResult:
    lc = cfg.loss
    size = cfg.backbone.input_size
    sizes = {lv: size >> lv for lv in cfg.head_levels}
    targets = assign_targets(objects, sizes, cfg.level_ranges(), cfg.num_classes)
    base, level_losses = {}, {}
    for lv in cfg.head_levels:
        logits, dist = out.preds[lv]
        l_cls, l_reg, comb = detection_loss(logits, dist, targets.levels[lv], lc.lam,
                                            lc.focal_alpha, lc.focal_gamma)
        base[lv] = (l_cls, l_reg)
        level_losses[lv] = comb
    aux, aux_losses = {}, {}
    if out.aux:
        aux_sizes = {i: size >> i for i in out.aux}
        aux_targets = assign_targets(objects, aux_sizes, None, cfg.num_classes)
        for i, (logits, dist, tower) in out.aux.items():
            l_cls, l_reg, comb = detection_loss(logits, dist, aux_targets.levels[i], lc.lam,
                                                lc.focal_alpha, lc.focal_gamma)
            a_cls = a_reg = None
            if lc.mode == "aux-uncertainty":
                a_cls = uncertainty_alpha(tower, params, f"unc.aux{i}.cls")
                a_reg = uncertainty_alpha(tower, params, f"unc.aux{i}.reg")
            aux[i] = (l_cls, l_reg, a_cls, a_reg)
            aux_losses[i] = comb
    total, bd = total_loss(base, aux, lc.mode, lc.lam, lc.tau)
    return LossResult(total, bd, level_losses, aux_losses)


def count_parameters(params: nn.Params) -> int:
    return int(sum(p.size for p in params.values()))
