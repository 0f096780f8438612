"""Staged convolutional feature extractor producing C2..C5.

Stage ``s_i`` halves the resolution once, so C_i sits at stride 2**i:

    C1 = s0(image),  C_i = s_{i-1}(C_{i-1})  for i = 2..5
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nn, ops
from .tensor import Tensor

LEVELS = (2, 3, 4, 5)


@dataclass(frozen=True)
class BackboneSpec:
    stage_channels: tuple = (8, 16, 24, 32, 40)
    blocks_per_stage: tuple = (1, 1, 1, 1, 1)
    input_size: int = 64
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        blocks = self.blocks_per_stage
        if isinstance(blocks, int):
            blocks = (blocks,) * 5
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in blocks))
        if len(self.stage_channels) != 5 or len(self.blocks_per_stage) != 5:
            raise ValueError("backbone needs exactly 5 stages")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("stage channels and block counts must be positive")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")

    def channels(self, level: int) -> int:
        """Channel count of C_level."""
        return self.stage_channels[level - 1]


def init_backbone(spec: BackboneSpec, rng: np.random.Generator | None = None) -> nn.Params:
    """Kaiming-initialised stage parameters named ``backbone.s0`` .. ``backbone.s4``."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    params: nn.Params = {}
    cin = spec.in_channels
    for s, (cout, blocks) in enumerate(zip(spec.stage_channels, spec.blocks_per_stage)):
        nn.add_conv_block(params, f"backbone.s{s}.down", rng, cin, cout)
        for b in range(1, blocks):
            nn.add_conv_block(params, f"backbone.s{s}.res{b}", rng, cout, cout)
        cin = cout
    return params


def _stage(x: Tensor, params: nn.Params, s: int, blocks: int) -> Tensor:
    x = nn.conv_block(x, params, f"backbone.s{s}.down", stride=2)
    for b in range(1, blocks):
        name = f"backbone.s{s}.res{b}"
        y = nn.gn(nn.conv(x, params, f"{name}.conv"), params, f"{name}.gn")
        x = ops.relu(ops.add(x, y))
    return x


def backbone_forward(image: Tensor, params: nn.Params, spec: BackboneSpec,
                     block_interstage: bool = False) -> dict[int, Tensor]:
    """Run all five stages; returns ``{2: C2, 3: C3, 4: C4, 5: C5}``.

    With ``block_interstage`` the edges C2->C3, C3->C4, C4->C5 carry no
    gradient, so each C_i only receives signal through its direct consumers.
    """
    n = spec.input_size
    if image.ndim != 4 or image.shape[1:] != (spec.in_channels, n, n):
        raise ValueError(f"expected image of shape (N, {spec.in_channels}, {n}, {n}), got {image.shape}")
    feats: dict[int, Tensor] = {}
    x = _stage(image, params, 0, spec.blocks_per_stage[0])
    for i in range(2, 6):
        inp = ops.stop_gradient(x) if (block_interstage and i > 2) else x
        x = _stage(inp, params, i - 1, spec.blocks_per_stage[i - 1])
        feats[i] = x
    return feats


def stage_parameters(params: nn.Params, stage: int) -> nn.Params:
    return nn.subset(params, f"backbone.s{stage}.")


def feature_shapes(spec: BackboneSpec, batch: int = 1) -> dict[int, tuple]:
    return {i: (batch, spec.channels(i), spec.input_size >> i, spec.input_size >> i) for i in LEVELS}


def level_sizes(input_size: int, levels: Sequence[int] = LEVELS) -> dict[int, int]:
    return {lv: input_size >> lv for lv in levels}
