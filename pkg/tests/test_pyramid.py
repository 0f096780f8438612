import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pyramidflow import ops
from pyramidflow.backbone import LEVELS, BackboneSpec
from pyramidflow.gradcheck import grad_check
from pyramidflow.pyramid import (PyramidConfig, build_pyramid, build_topdown_fpn, cascade_fuse,
                                 channel_swap, fuse_weighted, group_features, grouping_matrix,
                                 init_grouping, init_pyramid, lateral_project, regroup_channels,
                                 smooth_pyramid, verify_linear_expansion)
from pyramidflow.tensor import Tape, Tensor

from oracles import channel_swap_loops, conv2d_loops, topdown_recursion

SPEC = BackboneSpec()


def feats_for(spec=SPEC, seed=0, batch=1):
    rng = np.random.default_rng(seed)
    return {i: Tensor(rng.normal(size=(batch, spec.channels(i), spec.input_size >> i, spec.input_size >> i)))
            for i in LEVELS}


def identity_1x1(params, prefix, z):
    for k in LEVELS:
        params[f"{prefix}{k}.weight"].data = np.eye(z).reshape(z, z, 1, 1)
        params[f"{prefix}{k}.bias"].data = np.zeros(z)


def identity_smoothing(params, z):
    for lv in LEVELS:
        w = np.zeros((z, z, 3, 3))
        w[np.arange(z), np.arange(z), 1, 1] = 1.0
        params[f"pyramid.smo{lv}.weight"].data = w
        params[f"pyramid.smo{lv}.bias"].data = np.zeros(z)


def test_config_validation():
    with pytest.raises(ValueError):
        PyramidConfig(channels=6)
    with pytest.raises(ValueError):
        PyramidConfig(builder="bifpn")
    with pytest.raises(ValueError):
        PyramidConfig(builder="cfg", cascade_times=0)


# ------------------------------------------------------------------ laterals

def test_lateral_identity_and_constant():
    spec = BackboneSpec(stage_channels=(8, 8, 8, 8, 8))
    params = init_pyramid(spec, PyramidConfig("fpn", channels=8), np.random.default_rng(0))
    feats = feats_for(spec)
    identity_1x1(params, "pyramid.lat", 8)
    lat = lateral_project(feats, params)
    assert all(np.array_equal(lat[k].data, feats[k].data) for k in LEVELS)
    for k in LEVELS:
        params[f"pyramid.lat{k}.weight"].data[:] = 0.0
        params[f"pyramid.lat{k}.bias"].data[:] = 1.5
    assert all(np.all(t.data == 1.5) for t in lateral_project(feats, params).values())


def test_lateral_single_pixel_is_matvec():
    params = init_pyramid(SPEC, PyramidConfig("fpn"), np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for k in LEVELS:
        params[f"pyramid.lat{k}.bias"].data = rng.normal(size=16)
    x = {k: Tensor(rng.normal(size=(1, SPEC.channels(k), 1, 1))) for k in LEVELS}
    out = lateral_project(x, params)
    for k in LEVELS:
        w = params[f"pyramid.lat{k}.weight"].data[:, :, 0, 0]
        expect = w @ x[k].data[0, :, 0, 0] + params[f"pyramid.lat{k}.bias"].data
        assert np.allclose(out[k].data[0, :, 0, 0], expect, atol=1e-12)


def test_lateral_channel_mismatch():
    params = init_pyramid(SPEC, PyramidConfig("fpn"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        lateral_project(feats_for(BackboneSpec(stage_channels=(4, 4, 4, 4, 4))), params)


# ------------------------------------------------------------------ top-down

def _const_laterals(z=4, values=None, size=64):
    values = values or {k: 1.0 for k in LEVELS}
    return {k: Tensor(np.full((1, z, size >> k, size >> k), values[k])) for k in LEVELS}


def test_topdown_zero_top_gives_plain_lateral():
    params = init_pyramid(SPEC, PyramidConfig("fpn", channels=4), np.random.default_rng(0))
    identity_smoothing(params, 4)
    lat = feats_for(BackboneSpec(stage_channels=(4,) * 5))
    lat[5] = Tensor(np.zeros_like(lat[5].data))
    pyr = build_topdown_fpn(lat, params)
    assert np.array_equal(pyr[4].data, lat[4].data)


def test_topdown_constant_accumulation():
    params = init_pyramid(SPEC, PyramidConfig("fpn", channels=4), np.random.default_rng(0))
    identity_smoothing(params, 4)
    pyr = build_topdown_fpn(_const_laterals(4, {k: 2.0 for k in LEVELS}), params)
    for lv in LEVELS:
        assert np.all(pyr[lv].data == (6 - lv) * 2.0)


def test_topdown_matches_independent_recursion():
    cfg = PyramidConfig("fpn", channels=8)
    params = init_pyramid(SPEC, cfg, np.random.default_rng(3))
    rng = np.random.default_rng(4)
    for lv in LEVELS:
        params[f"pyramid.smo{lv}.bias"].data = rng.normal(size=8)
    lat = {k: Tensor(rng.normal(size=(2, 8, 64 >> k, 64 >> k))) for k in LEVELS}
    got = build_topdown_fpn(lat, params)

    def smooth(lv, x):
        return conv2d_loops(x, params[f"pyramid.smo{lv}.weight"].data, params[f"pyramid.smo{lv}.bias"].data, 1, 1)
    expect = topdown_recursion({k: v.data for k, v in lat.items()}, smooth)
    for lv in LEVELS:
        assert np.max(np.abs(got[lv].data - expect[lv])) < 1e-12


def test_topdown_missing_level():
    params = init_pyramid(SPEC, PyramidConfig("fpn", channels=4), np.random.default_rng(0))
    lat = _const_laterals(4)
    del lat[3]
    with pytest.raises(ValueError):
        build_topdown_fpn(lat, params)


# ---------------------------------------------------------------- linearity

def test_linear_expansion_residual():
    params = init_pyramid(SPEC, PyramidConfig("fpn"), np.random.default_rng(5))
    assert verify_linear_expansion(feats_for(), params, trials=10) < 1e-9


def test_linear_expansion_trivial_scalars_exact():
    params = init_pyramid(SPEC, PyramidConfig("fpn"), np.random.default_rng(5))
    assert verify_linear_expansion(feats_for(), params, trials=3, scalars=(1.0, 0.0)) == 0.0


def test_linear_expansion_bias_negative_control():
    params = init_pyramid(SPEC, PyramidConfig("fpn"), np.random.default_rng(5))
    assert verify_linear_expansion(feats_for(), params, trials=3, bias=0.3) > 1e-6


# ------------------------------------------------------------ grouping matrix

def _grouping(z=8, seed=0, head_std=1e-3):
    params = {}
    init_grouping(params, np.random.default_rng(seed), "g", z, head_std)
    return params


def test_grouping_matrix_identity_from_bias():
    params = _grouping()
    params["g.head.weight"].data[:] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(2, 8, 4, 4)))
    m = grouping_matrix(x, params, "g")
    assert m.shape == (2, 8, 8)
    assert np.array_equal(m.data, np.broadcast_to(np.eye(8), (2, 8, 8)))


def test_grouping_matrix_pure():
    params = _grouping(head_std=0.5)
    x = Tensor(np.random.default_rng(2).normal(size=(1, 8, 4, 4)))
    assert np.array_equal(grouping_matrix(x, params, "g").data, grouping_matrix(x, params, "g").data)


def test_grouping_matrix_gradcheck_on_conv_weights():
    params = _grouping(head_std=0.3, seed=3)
    params["g.gn.beta"].data = np.random.default_rng(3).normal(0, 0.3, size=8)
    x = Tensor(np.random.default_rng(4).normal(size=(2, 8, 4, 4)))
    w = params["g.conv.weight"]

    def fn(w):
        m = grouping_matrix(x, params, "g")
        return ops.sum(ops.mul(m, m))
    assert grad_check(fn, [w], max_coords=30) < 1e-4


def test_grouping_matrix_channel_mismatch():
    with pytest.raises(ValueError):
        grouping_matrix(Tensor(np.ones((1, 4, 2, 2))), _grouping(), "g")


def test_row_softmax_rows_sum_to_one():
    params = _grouping(head_std=0.5)
    m = grouping_matrix(Tensor(np.random.default_rng(5).normal(size=(1, 8, 4, 4))), params, "g", row_softmax=True)
    assert np.allclose(m.data.sum(axis=-1), 1.0)


# -------------------------------------------------------------- channel swap

def test_channel_swap_identity_and_permutation():
    x = Tensor(np.random.default_rng(6).normal(size=(2, 4, 3, 3)))
    assert np.array_equal(channel_swap(x, Tensor(np.eye(4))).data, x.data)
    perm = np.eye(4)[[1, 0, 2, 3]]
    y = channel_swap(x, Tensor(perm)).data
    assert np.array_equal(y[:, 0], x.data[:, 1]) and np.array_equal(y[:, 1], x.data[:, 0])
    assert np.array_equal(y[:, 2:], x.data[:, 2:])


def test_channel_swap_matches_triple_loop():
    rng = np.random.default_rng(7)
    m, x = rng.normal(size=(4, 4)), rng.normal(size=(1, 4, 2, 2))
    assert np.max(np.abs(channel_swap(Tensor(x), Tensor(m)).data - channel_swap_loops(m, x))) < 1e-12


def test_channel_swap_dimension_mismatch():
    with pytest.raises(ValueError):
        channel_swap(Tensor(np.ones((1, 4, 2, 2))), Tensor(np.eye(3)))


# ------------------------------------------------------------------- regroup

def test_regroup_marker_propagation():
    z = 16
    xs = {k: Tensor(np.full((1, z, 64 >> k, 64 >> k), float(k))) for k in LEVELS}
    pp = regroup_channels(xs)
    for lv in LEVELS:
        assert pp[lv].shape == (1, z, 64 >> lv, 64 >> lv)
        for qi, k in enumerate(LEVELS):
            block = pp[lv].data[:, qi * z // 4:(qi + 1) * z // 4]
            assert np.all(block == float(k))


def test_regroup_z8_quarters_of_two():
    xs = {k: Tensor(np.zeros((1, 8, 64 >> k, 64 >> k))) for k in LEVELS}
    assert all(t.shape[1] == 8 for t in regroup_channels(xs).values())


def test_regroup_coarse_quarter_is_nearest_upsampled():
    rng = np.random.default_rng(8)
    xs = {k: Tensor(rng.normal(size=(1, 8, 64 >> k, 64 >> k))) for k in LEVELS}
    pp = regroup_channels(xs)
    quarter = xs[5].data[:, 0:2]  # level-2 quarter of X_5, 2x2
    expect = quarter.repeat(8, axis=-2).repeat(8, axis=-1)
    assert np.array_equal(pp[2].data[:, 6:8], expect)
    # finer quarters are average-pooled: quarter 3 of X_2 lands in P'_3 block 0
    fine = xs[2].data[:, 2:4]
    pooled = fine.reshape(1, 2, 8, 2, 8, 2).mean(axis=(3, 5))
    assert np.allclose(pp[3].data[:, 0:2], pooled, atol=1e-15)


def test_regroup_rejects_bad_channels():
    with pytest.raises(ValueError):
        regroup_channels({k: Tensor(np.zeros((1, 6, 64 >> k, 64 >> k))) for k in LEVELS})


def test_marker_through_identity_grouping():
    cfg = PyramidConfig("fg", channels=8)
    params = init_pyramid(SPEC, cfg, np.random.default_rng(0))
    for k in LEVELS:
        params[f"pyramid.g1.k{k}.head.weight"].data[:] = 0.0
    lat = {k: Tensor(np.full((1, 8, 64 >> k, 64 >> k), float(k))) for k in LEVELS}
    pp = group_features(lat, params, 1, cfg)
    for lv in LEVELS:
        for qi, k in enumerate(LEVELS):
            assert np.all(pp[lv].data[:, 2 * qi:2 * qi + 2] == float(k))


# ------------------------------------------------------------------ smoothing

def test_smoothing_identity_zero_and_oracle():
    params = init_pyramid(SPEC, PyramidConfig("fpn", channels=4), np.random.default_rng(0))
    pp = {lv: Tensor(np.random.default_rng(lv).normal(size=(1, 4, 64 >> lv, 64 >> lv))) for lv in LEVELS}
    got = smooth_pyramid(pp, params)
    for lv in LEVELS:
        expect = conv2d_loops(pp[lv].data, params[f"pyramid.smo{lv}.weight"].data,
                              params[f"pyramid.smo{lv}.bias"].data, 1, 1)
        assert np.allclose(got[lv].data, expect, atol=1e-12)
    identity_smoothing(params, 4)
    assert all(np.array_equal(smooth_pyramid(pp, params)[lv].data, pp[lv].data) for lv in LEVELS)
    for lv in LEVELS:
        params[f"pyramid.smo{lv}.weight"].data[:] = 0.0
    assert all(not smooth_pyramid(pp, params)[lv].data.any() for lv in LEVELS)


# -------------------------------------------------------------------- cascade

def test_cascade_t1_is_noop():
    cfg = PyramidConfig("cfg", channels=8, cascade_times=1)
    params = init_pyramid(SPEC, cfg, np.random.default_rng(0))
    assert not any(k.startswith("pyramid.fw") for k in params)
    lat = lateral_project(feats_for(), params)
    pp = group_features(lat, params, 1, cfg)
    assert cascade_fuse(pp, params, cfg) == pp
    pyr = build_pyramid(feats_for(), params, cfg)
    direct = smooth_pyramid(pp, params)
    assert all(np.array_equal(pyr[lv].data, direct[lv].data) for lv in LEVELS)


def test_fusion_half_weights_reproduce_input():
    cfg = PyramidConfig("cfg", channels=8, cascade_times=2)
    params = init_pyramid(SPEC, cfg, np.random.default_rng(0))
    params["pyramid.fw.proj.weight"].data[:] = 0.0
    params["pyramid.fw.proj.bias"].data[:] = 0.0  # sigmoid(0) = 1/2
    pp = {lv: Tensor(np.random.default_rng(lv).normal(size=(1, 8, 64 >> lv, 64 >> lv))) for lv in LEVELS}
    out = fuse_weighted(pp, pp, params)
    assert all(np.allclose(out[lv].data, pp[lv].data, atol=1e-15) for lv in LEVELS)


@pytest.mark.parametrize("builder", ["fpn", "fg"])
def test_builder_output_contract(builder):
    cfg = PyramidConfig(builder, channels=8)
    pyr = build_pyramid(feats_for(batch=2), init_pyramid(SPEC, cfg, np.random.default_rng(0)), cfg)
    assert pyr.channels == 8
    assert pyr.shape_map() == {lv: (2, 8, 64 >> lv, 64 >> lv) for lv in LEVELS}


@settings(max_examples=6, deadline=None)
@given(t=st.integers(1, 3), z=st.sampled_from([4, 8]), seed=st.integers(0, 1000))
def test_cascade_preserves_shape_map(t, z, seed):
    spec = BackboneSpec(input_size=32)
    cfg = PyramidConfig("cfg", channels=z, cascade_times=t)
    feats = feats_for(spec, seed)
    pyr = build_pyramid(feats, init_pyramid(spec, cfg, np.random.default_rng(seed)), cfg)
    assert pyr.shape_map() == {lv: (1, z, 32 >> lv, 32 >> lv) for lv in LEVELS}


def _sum_grads_to_features(cfg):
    spec = SPEC
    params = init_pyramid(spec, cfg, np.random.default_rng(11))
    feats = {i: Tensor(f.data, requires_grad=True) for i, f in feats_for(spec, 12).items()}
    out = {}
    for lv in LEVELS:
        with Tape() as tape:
            pyr = build_pyramid(feats, params, cfg)
            tape.backward(ops.sum(ops.mul(pyr[lv], pyr[lv])))
        out[lv] = {k: float(np.abs(tape.grad(feats[k])).sum()) for k in LEVELS}
    return out


def test_grouping_reaches_every_feature_topdown_only_coarser():
    fg = _sum_grads_to_features(PyramidConfig("fg", channels=8))
    assert all(fg[lv][k] > 0 for lv in LEVELS for k in LEVELS)
    fpn = _sum_grads_to_features(PyramidConfig("fpn", channels=8))
    for lv in LEVELS:
        for k in LEVELS:
            assert (fpn[lv][k] > 0) == (k >= lv)
