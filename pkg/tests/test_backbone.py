import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyramidflow import nn, ops
from pyramidflow.backbone import (LEVELS, BackboneSpec, backbone_forward, feature_shapes,
                                  init_backbone, stage_parameters)
from pyramidflow.tensor import Tape, Tensor, backward


def test_same_seed_bit_identical():
    spec = BackboneSpec(seed=3)
    a, b = init_backbone(spec), init_backbone(spec)
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_five_stages_named_s0_to_s4():
    params = init_backbone(BackboneSpec(stage_channels=(8, 16, 24, 32, 40)))
    stages = sorted({k.split(".")[1] for k in params})
    assert stages == ["s0", "s1", "s2", "s3", "s4"]
    assert len(set(params)) == len(params)
    assert all(p.name == k for k, p in params.items())


def test_kaiming_variance():
    rng = np.random.default_rng(0)
    w = nn.kaiming(rng, (100, 12, 3, 3))  # 10800 samples, fan_in 108
    assert abs(w.var() / (2.0 / 108) - 1.0) < 0.2


def test_input_size_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        BackboneSpec(input_size=48)


def test_spatial_sizes_for_64():
    spec = BackboneSpec()
    feats = backbone_forward(Tensor(np.zeros((1, 3, 64, 64))), init_backbone(spec), spec)
    assert {i: feats[i].shape[-1] for i in LEVELS} == {2: 16, 3: 8, 4: 4, 5: 2}


def test_zero_image_zero_features():
    spec = BackboneSpec()
    feats = backbone_forward(Tensor(np.zeros((2, 3, 64, 64))), init_backbone(spec), spec)
    assert all(not feats[i].data.any() for i in LEVELS)


def test_wrong_input_shape_rejected():
    spec = BackboneSpec()
    with pytest.raises(ValueError):
        backbone_forward(Tensor(np.zeros((1, 3, 32, 32))), init_backbone(spec), spec)


def test_c5_depends_on_every_stage():
    spec = BackboneSpec(seed=1)
    params = init_backbone(spec)
    img = Tensor(np.random.default_rng(1).normal(size=(2, 3, 64, 64)))
    with Tape() as tape:
        loss = ops.sum(backbone_forward(img, params, spec)[5])
        grads = backward(loss, params, tape)
    for s in range(5):
        sq = sum(float((grads[k] ** 2).sum()) for k in stage_parameters(params, s))
        assert sq > 0, f"stage {s} gets no gradient"


def test_blocking_cuts_chain_but_keeps_values():
    spec = BackboneSpec(seed=2)
    params = init_backbone(spec)
    img = Tensor(np.random.default_rng(2).normal(size=(1, 3, 64, 64)))
    with Tape() as tape:
        free = backbone_forward(img, params, spec)
        blocked = backbone_forward(img, params, spec, block_interstage=True)
        grads = backward(ops.sum(blocked[5]), params, tape)
    assert all(np.array_equal(free[i].data, blocked[i].data) for i in LEVELS)
    assert all(not grads[k].any() for k in stage_parameters(params, 0))
    assert any(grads[k].any() for k in stage_parameters(params, 4))


@settings(max_examples=15, deadline=None)
@given(chans=st.lists(st.integers(1, 6), min_size=5, max_size=5),
       blocks=st.lists(st.integers(1, 2), min_size=5, max_size=5),
       size=st.sampled_from([32, 64]), batch=st.integers(1, 2))
def test_stride_channel_contract(chans, blocks, size, batch):
    spec = BackboneSpec(tuple(chans), tuple(blocks), size)
    feats = backbone_forward(Tensor(np.ones((batch, 3, size, size))), init_backbone(spec), spec)
    assert {i: f.shape for i, f in feats.items()} == feature_shapes(spec, batch)
    for i in LEVELS:
        assert feats[i].shape[1] == chans[i - 1]
        assert size // feats[i].shape[-1] == 2 ** i
