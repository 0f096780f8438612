"""Deterministic SGD-momentum training loop, evaluation, and report files."""
from __future__ import annotations

import io
import json
import logging
import math
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nn
from .config import RunConfig, config_digest, dump_config
from .data import flip_horizontal, make_split
from .detector import compute_losses, forward, init_model
from .metrics import decode_predictions, evaluate_ap
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

CSV_COLUMNS = ("step", "lr", "loss", "loss_cls", "loss_reg", "ap", "ap_small", "ap_medium", "ap_large")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsReport:
    config_digest: str
    seed: int
    steps: int
    curves: list = field(default_factory=list)  # per logged step: losses, lr
    evals: list = field(default_factory=list)  # per eval step: eval loss + APs
    ap: dict = field(default_factory=dict)
    wall_time_s: Optional[float] = None

    def as_dict(self) -> dict:
        return {"config_digest": self.config_digest, "seed": self.seed, "steps": self.steps,
                "curves": self.curves, "evals": self.evals, "ap": self.ap,
                "wall_time_s": self.wall_time_s}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["config_digest"], d["seed"], d["steps"], d["curves"], d["evals"], d["ap"],
                   d["wall_time_s"])


def _ap_block(res: dict, num_classes: int) -> dict:
    from .data import CLASS_NAMES
    return {"overall": res["overall"], "small": res["small"], "medium": res["medium"],
            "large": res["large"],
            "per_class": {CLASS_NAMES[c]: res["per_class"].get(c, 0.0) for c in range(num_classes)}}


def evaluate(params: nn.Params, cfg: RunConfig, images: np.ndarray, objects: Sequence,
             chunk: int = 16):
    """Inference-mode losses and AP over a fixed evaluation set."""
    model, ev = cfg.model, cfg.eval
    dets, l_cls, l_reg, weight = [], 0.0, 0.0, 0
    for lo in range(0, len(images), chunk):
        batch = images[lo:lo + chunk]
        objs = objects[lo:lo + chunk]
        out = forward(params, model, Tensor(batch), train=False)
        res = compute_losses(out, objs, model)
        for v in res.breakdown.levels.values():
            l_cls += v["cls"] * len(batch)
            l_reg += v["reg"] * len(batch)
        weight += len(batch)
        for i in range(len(batch)):
            preds = {lv: (lg.data[i], ds.data[i]) for lv, (lg, ds) in out.preds.items()}
            dets.append(decode_predictions(preds, ev.score_thresh, ev.per_level_topk, ev.nms_iou,
                                           ev.max_total, cfg.backbone.input_size))
    ap = evaluate_ap(dets, objects, cfg.data.num_classes, ev.iou_thresh, cfg.data.bins())
    l_cls, l_reg = l_cls / weight, l_reg / weight
    return {"loss": l_cls + cfg.loss.lam * l_reg, "loss_cls": l_cls, "loss_reg": l_reg}, ap, dets


def _eval_row(step, lr, losses, ap) -> dict:
    return {"step": step, "lr": lr, **losses, "ap": ap["overall"], "ap_small": ap["small"],
            "ap_medium": ap["medium"], "ap_large": ap["large"]}


def sgd_step(params: nn.Params, grads: dict, velocity: dict, lr: float, momentum: float,
             weight_decay: float, clip: float) -> float:
    """In-place SGD with momentum; returns the pre-clip global gradient norm."""
    norm = math.sqrt(math.fsum(float((g * g).sum()) for g in grads.values()))
    factor = clip / norm if clip and norm > clip else 1.0
    for name in sorted(params):
        p = params[name]
        g = grads[name] * factor
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity[name] = momentum * velocity[name] + g
        p.data = p.data - lr * v
    return norm


def train(cfg: RunConfig, out_dir: Optional[str | Path] = None, write: bool = True):
    """Train per ``cfg``; returns (MetricsReport, params).

    Writes report.json, metrics.csv, config.txt and checkpoint.npz into
    ``out_dir`` (default ``cfg.out_dir``) when ``write`` is set.
    """
    t0 = time.perf_counter()
    tc = cfg.train
    model = cfg.model
    rng = np.random.default_rng(cfg.seed)
    params = init_model(model, cfg.seed)
    velocity = {k: np.zeros_like(p.data) for k, p in params.items()}
    train_images, train_objs = make_split(cfg.scene_spec("train"), tc.train_scenes)
    eval_images, eval_objs = make_split(cfg.scene_spec("eval"), tc.eval_scenes)
    size = cfg.backbone.input_size

    report = MetricsReport(config_digest(cfg), cfg.seed, tc.steps)
    losses, ap, _ = evaluate(params, cfg, eval_images, eval_objs)
    report.evals.append(_eval_row(0, tc.lr_at(0), losses, ap))
    for step in range(tc.steps):
        idx = rng.choice(tc.train_scenes, size=tc.batch_size, replace=False)
        flips = rng.random(tc.batch_size) < 0.5
        images, objs = [], []
        for i, f in zip(idx, flips):
            img, ob = train_images[i], train_objs[i]
            if tc.flip and f:
                img, ob = flip_horizontal(img, ob, size)
            images.append(img)
            objs.append(ob)
        with Tape() as tape:
            out = forward(params, model, Tensor(np.stack(images)), train=True)
            res = compute_losses(out, objs, model, params)
            if not np.isfinite(res.total.data):
                raise TrainingDiverged(f"non-finite loss {res.total.item()} at step {step}")
            grads = backward(res.total, params, tape)
        tape.clear()
        lr = tc.lr_at(step)
        gnorm = sgd_step(params, grads, velocity, lr, tc.momentum, tc.weight_decay, tc.grad_clip)
        if not math.isfinite(gnorm):
            raise TrainingDiverged(f"non-finite gradient norm at step {step}")
        if step % tc.log_every == 0 or step == tc.steps - 1:
            bd = res.breakdown
            report.curves.append({
                "step": step, "lr": lr, "loss": bd.total,
                "loss_cls": math.fsum(v["cls"] for v in bd.levels.values()),
                "loss_reg": math.fsum(v["reg"] for v in bd.levels.values()),
                "loss_aux": bd.total - math.fsum(v["cls"] + bd.lam * v["reg"] for v in bd.levels.values()),
                "grad_norm": gnorm,
            })
            log.debug("step %d loss %.4f", step, bd.total)
        done = step + 1
        if done % tc.eval_every == 0 or done == tc.steps:
            losses, ap, _ = evaluate(params, cfg, eval_images, eval_objs)
            report.evals.append(_eval_row(done, tc.lr_at(done), losses, ap))
    report.ap = _ap_block(ap, cfg.data.num_classes)
    if tc.record_wall_time:
        report.wall_time_s = time.perf_counter() - t0
    if write:
        out = Path(out_dir or cfg.out_dir)
        emit_report(report, ("json", "csv"), out)
        (out / "config.txt").write_text(dump_config(cfg))
        save_checkpoint(params, out / "checkpoint.npz")
    return report, params


# ------------------------------------------------------------------ outputs

def report_json(report: MetricsReport) -> str:
    return json.dumps(report.as_dict(), indent=2, sort_keys=True, allow_nan=True) + "\n"


def report_csv(report: MetricsReport) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for row in report.evals:
        lines.append(",".join(repr(float(row[c])) if c != "step" else str(row[c]) for c in CSV_COLUMNS))
    return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, formats: Sequence[str], path: str | Path) -> list[Path]:
    """Write report.json and/or metrics.csv under ``path``."""
    unknown = set(formats) - {"json", "csv"}
    if unknown:
        raise ValueError(f"unknown report format(s) {sorted(unknown)}")
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        written = []
        if "json" in formats:
            (path / "report.json").write_text(report_json(report))
            written.append(path / "report.json")
        if "csv" in formats:
            (path / "metrics.csv").write_text(report_csv(report))
            written.append(path / "metrics.csv")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return written


def load_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_dict(json.loads(Path(path).read_text()))


def save_checkpoint(params: nn.Params, path: str | Path) -> None:
    """npz-compatible archive with fixed timestamps, so bytes depend only on values."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(params):
            buf = io.BytesIO()
            np.save(buf, params[name].data, allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path: str | Path, params: nn.Params) -> nn.Params:
    with np.load(path) as arch:
        missing = set(params) - set(arch.files)
        if missing:
            raise ValueError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arch[name].shape != p.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = arch[name].astype(np.float64)
    return params
