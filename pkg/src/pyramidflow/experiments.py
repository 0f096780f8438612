"""Directional toy comparisons between builders and loss modes.

Five variants are trained over a seed list; the comparisons only ask which
of two variants scores higher per seed, never by how much.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Sequence

from .config import RunConfig, config_digest, from_flat

log = logging.getLogger(__name__)

VARIANTS = {
    "fpn-free": {"pyramid.builder": "fpn-free", "loss.mode": "base"},
    "fpn": {"pyramid.builder": "fpn", "loss.mode": "base"},
    "fpn-aux": {"pyramid.builder": "fpn", "loss.mode": "aux"},
    "fpn-aux-uncertainty": {"pyramid.builder": "fpn", "loss.mode": "aux-uncertainty"},
    "cfg3": {"pyramid.builder": "cfg", "pyramid.cascade_times": 3, "loss.mode": "base"},
}

# (label, better variant, worse variant, AP key, seeds needed out of 5)
COMPARISONS = (
    ("a", "fpn-aux-uncertainty", "fpn-aux", "overall", 3),
    ("b", "cfg3", "fpn", "large", 4),
    ("c", "fpn", "fpn-free", "small", 3),
)


def variant_config(name: str, seed: int, steps: int = 2000, out_root: str = "results/directional") -> RunConfig:
    flat = dict(VARIANTS[name])
    flat.update({"seed": seed, "train.steps": steps, "out_dir": f"{out_root}/{name}/seed{seed}"})
    return from_flat(flat)


def run_directional(seeds: Sequence[int] = range(5), steps: int = 2000,
                    path: str | Path = "results/directional.json",
                    variants: Optional[Sequence[str]] = None) -> dict:
    """Train every (variant, seed) pair not already cached in ``path``.

    A cached run is reused only when its stored digest matches the digest of
    the config that would be trained now. The document is rewritten after
    every run so an interrupted sweep resumes where it stopped.
    """
    from .train import train
    path = Path(path)
    out_root = str(path.with_suffix(""))
    doc = json.loads(path.read_text()) if path.exists() else {}
    runs = {(r["variant"], r["seed"]): r for r in doc.get("runs", [])}
    for name in variants or VARIANTS:
        for seed in seeds:
            cfg = variant_config(name, seed, steps, out_root)
            digest = config_digest(cfg)
            cached = runs.get((name, seed))
            if cached and cached["config_digest"] == digest:
                continue
            log.info("training %s seed %d", name, seed)
            report, _ = train(cfg)
            runs[(name, seed)] = {"variant": name, "seed": seed, "config_digest": digest,
                                  "ap": {k: report.ap[k] for k in ("overall", "small", "medium", "large")}}
            doc = {"steps": steps, "runs": sorted(runs.values(), key=lambda r: (r["variant"], r["seed"]))}
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    doc = {"steps": steps, "runs": sorted(runs.values(), key=lambda r: (r["variant"], r["seed"]))}
    doc["comparisons"] = compare(doc, seeds)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def compare(doc: dict, seeds: Sequence[int] = range(5)) -> list:
    """Per-seed wins for each directional comparison; ties count as wins."""
    ap = {(r["variant"], r["seed"]): r["ap"] for r in doc["runs"]}
    out = []
    for label, better, worse, key, need in COMPARISONS:
        per_seed = [{"seed": s, better: ap[(better, s)][key], worse: ap[(worse, s)][key]}
                    for s in seeds if (better, s) in ap and (worse, s) in ap]
        wins = sum(row[better] >= row[worse] for row in per_seed)
        out.append({"label": label, "better": better, "worse": worse, "ap": key,
                    "wins": wins, "needed": need, "seeds": len(per_seed),
                    "passed": len(per_seed) == len(list(seeds)) and wins >= need,
                    "per_seed": per_seed})
    return out
