"""Which losses supervise which backbone features.

For each loss source (per-level pyramid loss, FPN-free head loss, auxiliary
loss) the analyzer back-propagates that loss alone and records the L2 norm
of its gradient with respect to every backbone feature C_2..C_5. In
``direct`` mode the backbone's inter-stage edges are cut with stop-gradient,
so an entry is nonzero only when a lateral/pyramid path reaches C_i.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backbone import LEVELS, stage_parameters
from .config import model_digest
from .data import SceneSpec, generate_scene
from .detector import ModelConfig, compute_losses, forward, init_model
from .tensor import Tape, Tensor

MODES = ("direct", "full")


@dataclass
class SupervisionMatrix:
    rows: list  # loss sources, e.g. "P2".."P5", "C5", "aux2".."aux4"
    features: list  # backbone levels 2..5
    per_seed: np.ndarray  # seeds x rows x features
    seeds: list
    mode: str
    builder: str
    statistic: str = "feature"
    config_digest: str = ""

    @property
    def values(self) -> np.ndarray:
        return self.per_seed.mean(axis=0)

    @property
    def median(self) -> np.ndarray:
        return np.median(self.per_seed, axis=0)

    def entry(self, row: str, feature: int, reduce: str = "mean") -> float:
        grid = self.values if reduce == "mean" else self.median
        return float(grid[self.rows.index(row), self.features.index(feature)])

    def to_document(self) -> dict:
        cells = []
        for r, row in enumerate(self.rows):
            for f, feat in enumerate(self.features):
                cells.append({"loss": row, "feature": f"C{feat}", "norm": float(self.values[r, f]),
                              "per_seed": [float(v) for v in self.per_seed[:, r, f]]})
        return {"mode": self.mode, "builder": self.builder, "statistic": self.statistic,
                "seeds": list(self.seeds), "cells": cells, "config_digest": self.config_digest}

    @classmethod
    def from_document(cls, doc: dict) -> "SupervisionMatrix":
        rows = list(dict.fromkeys(c["loss"] for c in doc["cells"]))
        feats = [int(c["feature"][1:]) for c in doc["cells"][:len(doc["cells"]) // len(rows)]]
        per_seed = np.array([c["per_seed"] for c in doc["cells"]]).T.reshape(len(doc["seeds"]), len(rows), len(feats))
        return cls(rows, feats, per_seed, doc["seeds"], doc["mode"], doc["builder"],
                   doc.get("statistic", "feature"), doc["config_digest"])

    def render(self) -> str:
        head = f"{self.mode}-path supervision ({self.builder}, {self.statistic}, seeds={self.seeds})"
        lines = [head, "loss    " + "".join(f"{'C' + str(f):>12}" for f in self.features)]
        for r, row in enumerate(self.rows):
            lines.append(f"{row:<8}" + "".join(f"{v:>12.3e}" for v in self.values[r]))
        return "\n".join(lines)


def _loss_sources(cfg: ModelConfig, res) -> dict:
    src = {}
    for lv, loss in res.levels.items():
        src["C5" if cfg.fpn_free else f"P{lv}"] = loss
    for i, loss in res.aux.items():
        src[f"aux{i}"] = loss
    return src


def _measure(cfg: ModelConfig, seed: int, mode: str, statistic: str, batch: int,
             scene: SceneSpec) -> tuple[list, np.ndarray]:
    params = init_model(cfg, seed)
    spec = SceneSpec(**{**scene.__dict__, "seed": seed})
    scenes = [generate_scene(spec, i) for i in range(batch)]
    images = Tensor(np.stack([s[0] for s in scenes]))
    objects = [s[1] for s in scenes]
    with Tape() as tape:
        out = forward(params, cfg, images, train=True, block_interstage=(mode == "direct"))
        res = compute_losses(out, objects, cfg, params)
    sources = _loss_sources(cfg, res)
    rows = list(sources)
    grid = np.zeros((len(rows), len(LEVELS)))
    for r, row in enumerate(rows):
        tape.backward(sources[row])
        for f, lv in enumerate(LEVELS):
            if statistic == "feature":
                g = tape.grad(out.feats[lv])
                grid[r, f] = float(np.sqrt((g * g).sum()))
            else:
                sq = sum(float((tape.grad(p) ** 2).sum()) for p in stage_parameters(params, lv - 1).values())
                grid[r, f] = float(np.sqrt(sq))
    tape.clear()
    return rows, grid


def supervision_matrix(cfg: ModelConfig, seeds: Sequence[int], mode: str = "direct",
                       statistic: str = "feature", batch: int = 2,
                       scene: Optional[SceneSpec] = None) -> SupervisionMatrix:
    """Gradient-norm grid, one backward per loss source, stacked over seeds.

    ``statistic="params"`` swaps dL/dC_i for the gradient of the parameters
    of the stage producing C_i.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if statistic not in ("feature", "params"):
        raise ValueError(f"unknown statistic {statistic!r}")
    if not seeds:
        raise ValueError("need at least one seed")
    scene = scene or SceneSpec(image_size=cfg.backbone.input_size, num_classes=cfg.num_classes)
    rows, grids = None, []
    for seed in seeds:
        rows, grid = _measure(cfg, int(seed), mode, statistic, batch, scene)
        grids.append(grid)
    return SupervisionMatrix(rows, list(LEVELS), np.stack(grids), [int(s) for s in seeds], mode,
                             _builder_label(cfg), statistic, model_digest(cfg))


def direct_supervision_matrix(cfg: ModelConfig, seeds: Sequence[int], **kw) -> SupervisionMatrix:
    return supervision_matrix(cfg, seeds, "direct", **kw)


def full_supervision_matrix(cfg: ModelConfig, seeds: Sequence[int], **kw) -> SupervisionMatrix:
    return supervision_matrix(cfg, seeds, "full", **kw)


def _builder_label(cfg: ModelConfig) -> str:
    b = cfg.pyramid.builder
    return f"cfg-{cfg.pyramid.cascade_times}" if b == "cfg" else b


def ratio_cells(direct: SupervisionMatrix, full: SupervisionMatrix) -> list:
    """direct/full per cell; null where the full-path norm is zero."""
    out = []
    for r, row in enumerate(direct.rows):
        for f, feat in enumerate(direct.features):
            d, fu = direct.values[r, f], full.values[full.rows.index(row), f]
            out.append({"loss": row, "feature": f"C{feat}", "ratio": float(d / fu) if fu > 0 else None})
    return out


def flow_report(matrices: Sequence[SupervisionMatrix], path: str | Path) -> dict:
    """Write ``<path>.json`` (machine-readable) and ``<path>.txt`` (table).

    One matrix yields its document directly; several are wrapped as
    ``{"reports": [...], "ratios": [...]}`` with direct/full ratios when
    both modes are present.
    """
    if not matrices:
        raise ValueError("flow_report needs at least one matrix")
    docs = [m.to_document() for m in matrices]
    if len(docs) == 1:
        doc = docs[0]
    else:
        doc = {"reports": docs}
        by_mode = {m.mode: m for m in matrices}
        if set(by_mode) == set(MODES):
            doc["ratios"] = ratio_cells(by_mode["direct"], by_mode["full"])
    text = "\n\n".join(m.render() for m in matrices) + "\n"
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        path.with_suffix(".txt").write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write flow report to {path}: {exc}") from exc
    return doc
