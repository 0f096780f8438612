"""Differentiable tensor operations.

Feature maps are laid out N x Z x H x W. All gradients are exact; the test
suite checks each against central differences.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, _next_id, make_op

EW_KINDS = ("add", "sub", "mul", "scalar-mul", "exp", "neg-exp", "relu", "sigmoid")
STRUCTURAL_KINDS = ("reshape", "concat-channels", "split-channels",
                    "upsample-nearest-2x", "upsample-bilinear-2x", "adaptive-avg-pool")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_op("scalar-mul", a.data * c, (a,), lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op("exp", out, (a,), lambda g: (g * out,))


def neg_exp(a: Tensor) -> Tensor:
    """exp(-a)."""
    out = np.exp(-a.data)
    return make_op("neg-exp", out, (a,), lambda g: (-g * out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_op("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_op("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ew(kind: str, a: Tensor, b: Optional[Tensor] = None, scalar: float = 1.0) -> Tensor:
    """Dispatch an elementwise op by name."""
    if kind not in EW_KINDS:
        raise ValueError(f"unknown elementwise op {kind!r}")
    binary = {"add": add, "sub": sub, "mul": mul}
    if kind in binary:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return binary[kind](a, b)
    if kind == "scalar-mul":
        return scale(a, scalar)
    return {"exp": exp, "neg-exp": neg_exp, "relu": relu, "sigmoid": sigmoid}[kind](a)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    e = np.exp(a.data - a.data.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return make_op("softmax-rows", out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ----------------------------------------------------------------- reductions

def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return make_op("sum", np.array(a.data.sum()), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return make_op("mean", np.array(a.data.mean()), (a,),
                   lambda g: (np.full(shape, float(g) / n),))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: N x Z x H x W -> N x Z x 1 x 1."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects NZHW, got {x.shape}")
    n, z, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make_op("global-avg-pool", out, (x,),
                   lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


# ------------------------------------------------------------------- algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, batched over leading axes when both are 3-d."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner extents disagree for {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op("matmul", ad @ bd, (a, b), vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Cross-correlation with a k x k kernel, k in {1, 3}.

    ``padding`` defaults to k // 2, which preserves resolution at stride 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NZHW input and OZkk kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: kernel must be 1x1 or 3x3, got {kh}x{kw}")
    k = kh
    p = k // 2 if padding is None else int(padding)
    s = int(stride)
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    xd, wd = x.data, weight.data
    # im2col laid out as (C*k*k, N*Ho*Wo) so both passes are single GEMMs
    xt = xd.transpose(1, 0, 2, 3)
    if p:
        xt = np.pad(xt, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, k, k, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
    cols = cols.reshape(c * k * k, n * ho * wo)
    wmat = wd.reshape(o, c * k * k)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)
    else:
        out = np.ascontiguousarray(out)

    def vjp(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gw = (gt @ cols.T).reshape(wd.shape)
        gcols = (wmat.T @ gt).reshape(c, k, k, n, ho, wo)
        gxt = np.zeros((c, n, h + 2 * p, w + 2 * p))
        for i in range(k):
            for j in range(k):
                gxt[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, i, j]
        if p:
            gxt = gxt[:, :, p:p + h, p:p + w]
        grads = [np.ascontiguousarray(gxt.transpose(1, 0, 2, 3)), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(bias.shape))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, vjp)


def group_norm(x: Tensor, groups: int, gamma: Optional[Tensor] = None,
               beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel-group) to zero mean, unit variance, then affine."""
    n, z, h, w = x.shape
    if groups < 1 or z % groups:
        raise ValueError(f"group_norm: {z} channels not divisible into {groups} groups")
    if eps <= 0:
        raise ValueError("group_norm: eps must be positive")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = ((xg - mu) * inv).reshape(n, z, h, w)
    gd = np.ones((1, z, 1, 1)) if gamma is None else gamma.data.reshape(1, z, 1, 1)
    out = y * gd
    if beta is not None:
        out = out + beta.data.reshape(1, z, 1, 1)

    def vjp(g):
        dy = (g * gd).reshape(n, groups, -1)
        yg = y.reshape(n, groups, -1)
        dx = inv * (dy - dy.mean(axis=2, keepdims=True)
                    - yg * (dy * yg).mean(axis=2, keepdims=True))
        grads = [dx.reshape(n, z, h, w)]
        if gamma is not None:
            grads.append((g * y).sum(axis=(0, 2, 3)).reshape(gamma.shape))
        if beta is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(beta.shape))
        return grads

    inputs = [x] + [t for t in (gamma, beta) if t is not None]
    return make_op("group-norm", out, inputs, vjp)


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size or -1 in shape:
        raise ValueError(f"reshape: cannot map {x.shape} ({x.size} values) to {shape}")
    src = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels: nothing to concatenate")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=1))

    return make_op("concat-channels", np.concatenate([t.data for t in xs], axis=1), tuple(xs), vjp)


def split_channels(x: Tensor, parts: int) -> list[Tensor]:
    z = x.shape[1]
    if parts < 1 or z % parts:
        raise ValueError(f"split_channels: {z} channels not divisible into {parts} parts")
    step = z // parts
    outs = []
    for i in range(parts):
        lo, hi = i * step, (i + 1) * step

        def vjp(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(make_op("split-channels", x.data[:, lo:hi].copy(), (x,), vjp))
    return outs


def upsample2x(x: Tensor, mode: str = "nearest") -> Tensor:
    if mode == "nearest":
        out = x.data.repeat(2, axis=2).repeat(2, axis=3)
        n, c, h, w = x.shape

        def vjp(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return make_op("upsample-nearest-2x", out, (x,), vjp)
    if mode == "bilinear":
        uh = _bilinear_matrix(x.shape[2])
        uw = _bilinear_matrix(x.shape[3])
        out = np.einsum("ih,nchw,jw->ncij", uh, x.data, uw)
        return make_op("upsample-bilinear-2x", out, (x,),
                       lambda g: (np.einsum("ih,ncij,jw->nchw", uh, g, uw),))
    raise ValueError(f"unknown upsampling mode {mode!r}")


def _bilinear_matrix(n: int) -> np.ndarray:
    # half-pixel centres (align_corners=False), edge-clamped
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


def adaptive_avg_pool(x: Tensor, out_hw: tuple) -> Tensor:
    """Average pool to ``out_hw``; the input extents must be integer multiples."""
    n, c, h, w = x.shape
    oh, ow = out_hw
    if oh < 1 or ow < 1 or h % oh or w % ow:
        raise ValueError(f"adaptive_avg_pool: {h}x{w} does not tile into {oh}x{ow}")
    fh, fw = h // oh, w // ow
    out = x.data.reshape(n, c, oh, fh, ow, fw).mean(axis=(3, 5))

    def vjp(g):
        gg = g[:, :, :, None, :, None] / (fh * fw)
        return (np.broadcast_to(gg, (n, c, oh, fh, ow, fw)).reshape(n, c, h, w).copy(),)

    return make_op("adaptive-avg-pool", out, (x,), vjp)


def resize(x: Tensor, out_hw: tuple, mode: str = "nearest") -> Tensor:
    """Power-of-two resize: repeated 2x upsampling or average pooling."""
    h = x.shape[2]
    if out_hw[0] == h:
        return x
    if out_hw[0] > h:
        while x.shape[2] < out_hw[0]:
            x = upsample2x(x, mode)
        return x
    return adaptive_avg_pool(x, out_hw)


def structural(kind: str, x, *args, **kwargs):
    """Dispatch a data-movement op by name."""
    table = {
        "reshape": reshape,
        "concat-channels": concat_channels,
        "split-channels": split_channels,
        "upsample-nearest-2x": lambda t: upsample2x(t, "nearest"),
        "upsample-bilinear-2x": lambda t: upsample2x(t, "bilinear"),
        "adaptive-avg-pool": adaptive_avg_pool,
    }
    if kind not in table:
        raise ValueError(f"unknown structural op {kind!r}")
    return table[kind](x, *args, **kwargs)


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, no gradient flows back through this edge."""
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.node_id = _next_id()
    out.name = None
    return out
