"""Dense anchor-free heads, target assignment, and detection losses.

Per-level loss: L = L_cls + lam * L_reg with a focal binary cross-entropy
and a (1 - IoU) box loss, both normalised by the number of positives.
Auxiliary losses may be wrapped as exp(-alpha) * L + tau * alpha with a
learned alpha = ReLU(mean(w * x + b)) >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import nn, ops
from .tensor import Tape, Tensor, make_op

LOSS_MODES = ("base", "aux", "aux-uncertainty")
_MODE_ALIASES = {"base-only": "base", "base+aux": "aux", "base+aux-uncertainty": "aux-uncertainty"}


def canonical_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    return mode


@dataclass(frozen=True)
class LossConfig:
    mode: str = "base"
    lam: float = 1.0
    tau: float = 0.1
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    alpha_bias_init: float = 1.0
    ranges: tuple = ((2, 0.0, 8.0), (3, 8.0, 16.0), (4, 16.0, 32.0), (5, 32.0, float("inf")))

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_mode(self.mode))
        object.__setattr__(self, "ranges", tuple((int(l), float(lo), float(hi)) for l, lo, hi in self.ranges))
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        check_ranges(self.range_map())

    def range_map(self) -> dict:
        return {l: (lo, hi) for l, lo, hi in self.ranges}


# --------------------------------------------------------------------- heads

def init_head(params: nn.Params, rng, name: str, cin: int, width: int, num_classes: int,
              tower_blocks: int = 2, prior: float = 0.01) -> None:
    c = cin
    for b in range(tower_blocks):
        nn.add_conv_block(params, f"{name}.pre{b}", rng, c, width)
        c = width
    nn.add_conv(params, f"{name}.cls", rng, width, num_classes, 1, std=0.01)
    params[f"{name}.cls.bias"].data[:] = -np.log((1.0 - prior) / prior)
    nn.add_conv(params, f"{name}.reg", rng, width, 4, 1, std=0.01)


def head_forward(x: Tensor, params: nn.Params, name: str, stride: float = 1.0):
    """Returns (class logits, side distances in pixels, tower features)."""
    cin = params[f"{name}.pre0.conv.weight"].shape[1]
    if x.shape[1] != cin:
        raise ValueError(f"head {name} expects {cin} channels, got {x.shape[1]}")
    h = x
    b = 0
    while f"{name}.pre{b}.conv.weight" in params:
        h = nn.conv_block(h, params, f"{name}.pre{b}")
        b += 1
    logits = nn.conv(h, params, f"{name}.cls")
    dist = ops.scale(ops.exp(nn.conv(h, params, f"{name}.reg")), stride)
    return logits, dist, h


# ------------------------------------------------------------------- targets

def check_ranges(ranges: Mapping[int, tuple]) -> None:
    """Ranges must tile (0, inf) as consecutive half-open (lo, hi] intervals."""
    levels = sorted(ranges)
    if not levels:
        raise ValueError("no level ranges given")
    prev = 0.0
    for lv in levels:
        lo, hi = ranges[lv]
        if lo != prev:
            kind = "overlapping" if lo < prev else "gapped"
            raise ValueError(f"{kind} level ranges at level {lv}: starts at {lo}, previous ends at {prev}")
        if hi <= lo:
            raise ValueError(f"empty range for level {lv}")
        prev = hi
    if prev != float("inf"):
        raise ValueError("level ranges must extend to infinity")


def level_for_size(side: float, ranges: Mapping[int, tuple]) -> int:
    for lv in sorted(ranges):
        lo, hi = ranges[lv]
        if lo < side <= hi:
            return lv
    raise ValueError(f"no level covers object size {side}")


@dataclass
class LevelTargets:
    cls: np.ndarray  # N x K x h x w, one-hot, zeros = background
    reg: np.ndarray  # N x 4 x h x w, (left, top, right, bottom) in pixels
    pos: np.ndarray  # N x h x w bool
    stride: int

    @property
    def num_pos(self) -> int:
        return int(self.pos.sum())


@dataclass
class TargetAssignment:
    levels: dict = field(default_factory=dict)  # level -> LevelTargets
    ranges: dict = field(default_factory=dict)
    object_levels: list = field(default_factory=list)  # per image, level of each object

    @property
    def num_pos(self) -> int:
        return sum(t.num_pos for t in self.levels.values())


def _assign_one(objects, size: int, stride: int, num_classes: int):
    cls = np.zeros((num_classes, size, size))
    reg = np.zeros((4, size, size))
    pos = np.zeros((size, size), dtype=bool)
    area = np.full((size, size), np.inf)
    centers = np.arange(size) * stride + stride / 2.0
    cx, cy = centers[None, :], centers[:, None]
    for box, c in objects:
        x1, y1, x2, y2 = box
        inside = (cx > x1) & (cx < x2) & (cy > y1) & (cy < y2)
        a = (x2 - x1) * (y2 - y1)
        take = inside & (a < area)  # overlaps resolve to the smaller object
        if not take.any():
            continue
        area[take] = a
        pos |= take
        cls[:, take] = 0.0
        cls[int(c), take] = 1.0
        d = np.stack(np.broadcast_arrays(cx - x1, cy - y1, x2 - cx, y2 - cy))
        reg[:, take] = d[:, take]
    return cls, reg, pos


def assign_targets(objects_per_image: Sequence[Sequence], level_sizes: Mapping[int, int],
                   ranges: Optional[Mapping[int, tuple]], num_classes: int) -> TargetAssignment:
    """Route each object to one level by its max side, then mark positives.

    ``objects_per_image`` holds ((x1, y1, x2, y2), class) pairs per image.
    ``level_sizes`` maps level -> feature map extent (stride 2**level).
    With ``ranges=None`` every level sees every object (auxiliary targets).
    """
    if ranges is not None:
        check_ranges(ranges)
    levels = sorted(level_sizes)
    per_level = {lv: ([], [], []) for lv in levels}
    obj_levels = []
    for objects in objects_per_image:
        routed = {lv: [] for lv in levels}
        lv_of = []
        for box, c in objects:
            side = max(box[2] - box[0], box[3] - box[1])
            if ranges is None:
                for lv in levels:
                    routed[lv].append((box, c))
                lv_of.append(None)
            else:
                lv = level_for_size(side, ranges)
                if lv in routed:
                    routed[lv].append((box, c))
                lv_of.append(lv)
        obj_levels.append(lv_of)
        for lv in levels:
            cls, reg, pos = _assign_one(routed[lv], level_sizes[lv], 2 ** lv, num_classes)
            per_level[lv][0].append(cls)
            per_level[lv][1].append(reg)
            per_level[lv][2].append(pos)
    out = {lv: LevelTargets(np.stack(c), np.stack(r), np.stack(p), 2 ** lv)
           for lv, (c, r, p) in per_level.items()}
    return TargetAssignment(out, dict(ranges) if ranges is not None else {}, obj_levels)


# -------------------------------------------------------------------- losses

def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Summed focal binary cross-entropy over all entries."""
    x = logits.data
    t = targets
    p = ops._sigmoid(x)
    log_p = -_softplus(-x)
    log_q = -_softplus(x)
    loss_pos = -alpha * (1.0 - p) ** gamma * log_p
    loss_neg = -(1.0 - alpha) * p ** gamma * log_q
    total = np.where(t > 0, loss_pos, loss_neg).sum()

    def vjp(g):
        d_pos = alpha * (1.0 - p) ** gamma * (gamma * p * log_p - (1.0 - p))
        d_neg = (1.0 - alpha) * p ** gamma * (p - gamma * (1.0 - p) * log_q)
        return (float(g) * np.where(t > 0, d_pos, d_neg),)

    return make_op("focal-loss", np.array(total), (logits,), vjp)


def _min_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # d min(a, b) / da, splitting ties evenly
    return np.where(a < b, 1.0, np.where(a > b, 0.0, 0.5))


def iou_loss(dist: Tensor, target: np.ndarray, pos: np.ndarray) -> Tensor:
    """Summed (1 - IoU) over positive locations; boxes as side distances."""
    d = dist.data
    l, t, r, b = (d[:, i] for i in range(4))
    lt, tt, rt, bt = (target[:, i] for i in range(4))
    m = pos.astype(float)
    ap = (l + r) * (t + b)
    ag = (lt + rt) * (tt + bt)
    gl, gr, gt, gb = _min_grad(l, lt), _min_grad(r, rt), _min_grad(t, tt), _min_grad(b, bt)
    iw = np.minimum(l, lt) + np.minimum(r, rt)
    ih = np.minimum(t, tt) + np.minimum(b, bt)
    inter = iw * ih
    union = np.where(pos, ap + ag - inter, 1.0)
    iou = np.where(pos, inter / union, 1.0)
    total = float(((1.0 - iou) * m).sum())

    def vjp(g):
        d_inter = [ih * gl, iw * gt, ih * gr, iw * gb]
        d_ap = [t + b, l + r, t + b, l + r]
        out = np.empty_like(d)
        for i in range(4):
            d_union = d_ap[i] - d_inter[i]
            d_iou = (d_inter[i] * union - inter * d_union) / union ** 2
            out[:, i] = -d_iou * m
        return (float(g) * out,)

    return make_op("iou-loss", np.array(total), (dist,), vjp)


def detection_loss(logits: Tensor, dist: Tensor, targets: LevelTargets, lam: float = 1.0,
                   focal_alpha: float = 0.25, focal_gamma: float = 2.0):
    """(L_cls, L_reg, L_cls + lam * L_reg) for one level, normalised by positives."""
    if logits.shape != targets.cls.shape or dist.shape != targets.reg.shape:
        raise ValueError(f"prediction shapes {logits.shape}, {dist.shape} do not match "
                         f"targets {targets.cls.shape}, {targets.reg.shape}")
    norm = 1.0 / max(1, targets.num_pos)
    l_cls = ops.scale(sigmoid_focal_loss(logits, targets.cls, focal_alpha, focal_gamma), norm)
    if targets.num_pos:
        l_reg = ops.scale(iou_loss(dist, targets.reg, targets.pos), norm)
    else:
        l_reg = Tensor(0.0)
    combined = l_cls if lam == 0 else ops.add(l_cls, ops.scale(l_reg, lam))
    return l_cls, l_reg, combined


# --------------------------------------------------------------- uncertainty

def init_alpha(params: nn.Params, rng, name: str, cin: int, bias: float = 1.0) -> None:
    nn.add_conv(params, name, rng, cin, 1, 1, std=0.01)
    params[f"{name}.bias"].data[:] = bias


def uncertainty_alpha(x: Tensor, params: nn.Params, name: str) -> Tensor:
    """alpha = ReLU(mean(w * x + b)) over batch and space; a scalar >= 0."""
    return ops.relu(ops.mean(nn.conv(x, params, name)))


def uncertainty_wrap(loss: Tensor, alpha: Tensor, tau: float) -> Tensor:
    """exp(-alpha) * loss + tau * alpha."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return ops.add(ops.mul(ops.neg_exp(alpha), loss), ops.scale(alpha, tau))


def descend_alpha(loss: float, tau: float, start: float = 0.0, tol: float = 1e-12,
                  max_iter: int = 10_000) -> tuple[float, int]:
    """Projected gradient descent on alpha >= 0 for a fixed wrapped loss.

    Gradients come from the tape; the step size adapts by backtracking, so
    flat regions (small tau) still converge. Returns (alpha, iterations).
    """
    def value_and_grad(a: float) -> tuple[float, float]:
        alpha = Tensor(a, requires_grad=True)
        with Tape() as tape:
            out = uncertainty_wrap(Tensor(loss), alpha, tau)
            tape.backward(out)
        return out.item(), float(tape.grad(alpha))

    a, step = max(0.0, float(start)), 1.0
    f, g = value_and_grad(a)
    for it in range(1, max_iter + 1):
        step *= 2.0
        while True:
            nxt = max(0.0, a - step * g)
            fn, gn = value_and_grad(nxt)
            d = nxt - a
            if fn <= f + g * d + d * d / (2.0 * step) or step < 1e-12:
                break
            step /= 2.0
        if abs(d) <= tol * max(1.0, abs(a)):
            return nxt, it
        a, f, g = nxt, fn, gn
    return a, max_iter


# ----------------------------------------------------------------- combining

@dataclass
class LossBreakdown:
    mode: str
    lam: float
    tau: float
    levels: dict = field(default_factory=dict)  # level -> {"cls", "reg"}
    aux: dict = field(default_factory=dict)  # stage -> {"cls", "reg", "alpha_cls", "alpha_reg"}
    total: float = 0.0

    def recombine(self) -> float:
        """Total recomputed from the stored parts."""
        s = 0.0
        for v in self.levels.values():
            s += v["cls"] + self.lam * v["reg"]
        for v in self.aux.values():
            if self.mode == "aux":
                s += v["cls"] + self.lam * v["reg"]
            elif self.mode == "aux-uncertainty":
                s += np.exp(-v["alpha_cls"]) * v["cls"] + self.tau * v["alpha_cls"]
                s += np.exp(-v["alpha_reg"]) * self.lam * v["reg"] + self.tau * v["alpha_reg"]
        return float(s)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "lam": self.lam, "tau": self.tau,
                "levels": {str(k): v for k, v in self.levels.items()},
                "aux": {str(k): v for k, v in self.aux.items()}, "total": self.total}


def total_loss(base: Mapping, aux: Mapping, mode: str, lam: float = 1.0, tau: float = 0.1):
    """Sum per-level losses and, depending on ``mode``, the auxiliary ones.

    ``base`` maps level -> (L_cls, L_reg); ``aux`` maps stage ->
    (L_cls, L_reg, alpha_cls, alpha_reg), alphas may be None unless the
    mode is ``aux-uncertainty``. Returns (total Tensor, LossBreakdown).
    """
    mode = canonical_mode(mode)
    bd = LossBreakdown(mode, lam, tau)
    terms = []
    for lv in sorted(base):
        lc, lr = base[lv]
        bd.levels[lv] = {"cls": lc.item(), "reg": lr.item()}
        terms.append(ops.add(lc, ops.scale(lr, lam)))
    if mode != "base":
        for st in sorted(aux):
            lc, lr, ac, ar = aux[st]
            entry = {"cls": lc.item(), "reg": lr.item(), "alpha_cls": 0.0, "alpha_reg": 0.0}
            if mode == "aux":
                terms.append(ops.add(lc, ops.scale(lr, lam)))
            else:
                entry["alpha_cls"], entry["alpha_reg"] = ac.item(), ar.item()
                terms.append(uncertainty_wrap(lc, ac, tau))
                terms.append(uncertainty_wrap(ops.scale(lr, lam), ar, tau))
            bd.aux[st] = entry
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    bd.total = total.item()
    return total, bd
