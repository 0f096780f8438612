"""Run configuration: dataclasses plus a flat ``section.key = value`` file format.

Values are JSON literals (numbers, strings, lists, true/false); a bare word
is read as a string. Lines starting with ``#`` are comments. Unknown keys
are rejected.

    seed = 0
    backbone.stage_channels = [8, 16, 24, 32, 40]
    pyramid.builder = "cfg"
    pyramid.cascade_times = 3
    loss.mode = "aux-uncertainty"
    train.steps = 2000
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .backbone import BackboneSpec
from .data import SceneSpec
from .detector import ModelConfig
from .heads import LossConfig
from .pyramid import PyramidConfig


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_at: tuple = (0.75, 0.92)
    decay_factor: float = 0.1
    warmup_steps: int = 100
    grad_clip: float = 10.0
    flip: bool = True
    log_every: int = 10
    eval_every: int = 500
    train_scenes: int = 512
    eval_scenes: int = 128
    record_wall_time: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decay_at", tuple(float(d) for d in self.decay_at))
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("train.steps must be >= 0 and train.batch_size >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("train.lr must be positive and train.momentum in [0, 1)")
        if self.batch_size > self.train_scenes:
            raise ValueError("train.batch_size exceeds train.train_scenes")
        if self.log_every < 1 or self.eval_every < 1:
            raise ValueError("train.log_every and train.eval_every must be >= 1")
        if any(not 0 < d <= 1 for d in self.decay_at):
            raise ValueError("train.decay_at entries must be fractions in (0, 1]")
        if self.eval_scenes < 1:
            raise ValueError("train.eval_scenes must be >= 1")

    def lr_at(self, step: int) -> float:
        lr = self.lr
        if self.warmup_steps and step < self.warmup_steps:
            lr *= 0.001 + 0.999 * step / self.warmup_steps
        for d in self.decay_at:
            if step >= int(round(d * self.steps)):
                lr *= self.decay_factor
        return lr


@dataclass(frozen=True)
class EvalConfig:
    score_thresh: float = 0.05
    per_level_topk: int = 1000
    nms_iou: float = 0.5
    max_total: int = 100
    iou_thresh: tuple = (0.5,)

    def __post_init__(self):
        thr = self.iou_thresh
        object.__setattr__(self, "iou_thresh", (float(thr),) if isinstance(thr, (int, float)) else tuple(float(t) for t in thr))
        if not 0 <= self.score_thresh <= 1 or not 0 < self.nms_iou <= 1:
            raise ValueError("eval thresholds out of range")
        if any(not 0 < t < 1 for t in self.iou_thresh):
            raise ValueError("eval.iou_thresh entries must lie in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: SceneSpec = field(default_factory=SceneSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    eval_seed: int = 1
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.data.image_size != self.backbone.input_size:
            raise ValueError(f"data.image_size {self.data.image_size} != backbone.input_size "
                             f"{self.backbone.input_size}")
        if self.data.num_classes < 1:
            raise ValueError("data.num_classes must be positive")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(self.backbone, self.pyramid, self.loss, self.data.num_classes)

    def scene_spec(self, split: str = "train") -> SceneSpec:
        seed = self.data.seed if split == "train" else self.eval_seed
        return dataclasses.replace(self.data, seed=seed)


# ------------------------------------------------------------ flat mapping

_SECTIONS = ("backbone", "pyramid", "loss", "train", "data", "eval")
_TOP = ("seed", "eval_seed", "out_dir")
# keys hidden from the file format, with their flat replacements
_SKIP = {("backbone", "seed"), ("loss", "ranges")}


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def to_flat(cfg: RunConfig) -> dict:
    flat: dict[str, Any] = {}
    for sec in _SECTIONS:
        obj = getattr(cfg, sec)
        for f in dataclasses.fields(obj):
            if (sec, f.name) in _SKIP:
                continue
            flat[f"{sec}.{f.name}"] = _jsonable(getattr(obj, f.name))
    flat["loss.range_bounds"] = [hi for _, _, hi in cfg.loss.ranges[:-1]]
    for k in _TOP:
        flat[k] = getattr(cfg, k)
    return flat


def known_keys() -> set:
    return set(to_flat(RunConfig()))


def from_flat(flat: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    merged = to_flat(base)
    unknown = sorted(set(flat) - set(merged))
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    merged.update(flat)
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    for key, value in merged.items():
        if "." in key:
            sec, name = key.split(".", 1)
            sections[sec][name] = value
    bounds = [float(b) for b in sections["loss"].pop("range_bounds")]
    edges = [0.0] + bounds + [float("inf")]
    if len(edges) != 5:
        raise ValueError("loss.range_bounds needs exactly 3 boundaries for levels 2..5")
    sections["loss"]["ranges"] = tuple((lv, edges[i], edges[i + 1]) for i, lv in enumerate((2, 3, 4, 5)))
    try:
        return RunConfig(
            backbone=BackboneSpec(**sections["backbone"], seed=int(merged["seed"])),
            pyramid=PyramidConfig(**sections["pyramid"]),
            loss=LossConfig(**sections["loss"]),
            train=TrainConfig(**sections["train"]),
            data=SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in sections["data"].items()}),
            eval=EvalConfig(**sections["eval"]),
            eval_seed=int(merged["eval_seed"]),
            seed=int(merged["seed"]),
            out_dir=str(merged["out_dir"]),
        )
    except TypeError as exc:
        raise ValueError(f"bad config value: {exc}") from None


def parse_config_text(text: str) -> dict:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in flat:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            flat[key] = json.loads(value)
        except json.JSONDecodeError:
            flat[key] = value
    return flat


def load_config(path: str | Path, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    flat = parse_config_text(Path(path).read_text())
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {json.dumps(v)}" for k, v in sorted(to_flat(cfg).items())]
    return "\n".join(lines) + "\n"


def flat_digest(flat: Mapping[str, Any]) -> str:
    blob = json.dumps(dict(flat), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def config_digest(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of the fully resolved flat config.

    ``out_dir`` is left out: where results land does not change them.
    """
    flat = to_flat(cfg)
    del flat["out_dir"]
    return flat_digest(flat)


def model_digest(model: ModelConfig) -> str:
    return flat_digest({"model": dataclasses.asdict(model)})
