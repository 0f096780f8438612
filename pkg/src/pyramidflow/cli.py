"""Command-line entry point: train, eval, gradflow, gradcheck, scene-gen."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, config_digest, from_flat, load_config


def _resolve_config(args) -> RunConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.builder is not None:
        overrides["pyramid.builder"] = args.builder
    if args.cascade_times is not None:
        overrides["pyramid.cascade_times"] = args.cascade_times
    if args.loss_mode is not None:
        overrides["loss.mode"] = args.loss_mode
    if args.config:
        return load_config(args.config, overrides)
    return from_flat(overrides)


def cmd_train(args) -> int:
    from .train import train
    cfg = _resolve_config(args)
    report, _ = train(cfg)
    ap = report.ap
    print(f"trained {cfg.train.steps} steps -> {cfg.out_dir}: AP {ap['overall']:.4f} "
          f"(S {ap['small']:.4f} M {ap['medium']:.4f} L {ap['large']:.4f})")
    return 0


def cmd_eval(args) -> int:
    from .data import make_split
    from .detector import init_model
    from .train import _ap_block, evaluate, load_checkpoint
    cfg = _resolve_config(args)
    ckpt = Path(args.checkpoint or Path(cfg.out_dir) / "checkpoint.npz")
    params = load_checkpoint(ckpt, init_model(cfg.model, cfg.seed))
    images, objects = make_split(cfg.scene_spec("eval"), cfg.train.eval_scenes)
    losses, ap, _ = evaluate(params, cfg, images, objects)
    doc = {"config_digest": config_digest(cfg), "checkpoint": str(ckpt), "seed": cfg.seed,
           "losses": losses, "ap": _ap_block(ap, cfg.data.num_classes)}
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(json.dumps(doc["ap"], sort_keys=True))
    return 0


def cmd_gradflow(args) -> int:
    from .gradflow import flow_report, supervision_matrix
    cfg = _resolve_config(args)
    base = cfg.seed
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(range(base, base + 5))
    modes = ("direct", "full") if args.mode == "both" else (args.mode,)
    mats = [supervision_matrix(cfg.model, seeds, m, args.statistic, args.batch) for m in modes]
    flow_report(mats, Path(cfg.out_dir) / "gradflow")
    for m in mats:
        print(m.render())
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_gradcheck_suite
    results = run_gradcheck_suite(trials=args.trials, seed=args.seed or 0)
    worst = 0.0
    for name, err in results.items():
        print(f"{name:<28} max rel err {err:.3e}")
        worst = max(worst, err)
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'}: worst {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_scene_gen(args) -> int:
    from .data import CLASS_NAMES, generate_scene
    cfg = _resolve_config(args)
    spec = cfg.scene_spec(args.split)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    for i in range(args.count):
        img, objs = generate_scene(spec, i)
        images.append(img)
        annotations.append({"index": i, "objects": [{"box": list(b), "class": CLASS_NAMES[c]} for b, c in objs]})
    np.savez(out / "scenes.npz", images=np.stack(images))
    (out / "annotations.json").write_text(json.dumps(annotations, indent=1) + "\n")
    print(f"wrote {args.count} scenes to {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage text would make the diagnostic multi-line
        self.exit(2, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyramidflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--builder", choices=["fpn-free", "fpn", "fg", "cfg"])
        p.add_argument("--cascade-times", type=int)
        p.add_argument("--loss-mode", choices=["base", "aux", "aux-uncertainty"])
        return p

    common(sub.add_parser("train", help="train a detector")).set_defaults(fn=cmd_train)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--checkpoint")
    p.set_defaults(fn=cmd_eval)
    p = common(sub.add_parser("gradflow", help="supervision matrices"))
    p.add_argument("--mode", choices=["direct", "full", "both"], default="both")
    p.add_argument("--statistic", choices=["feature", "params"], default="feature")
    p.add_argument("--seeds", help="comma-separated seed list (default: 5 seeds from --seed)")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(fn=cmd_gradflow)
    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    p = common(sub.add_parser("scene-gen", help="write synthetic scenes"))
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--split", choices=["train", "eval"], default="train")
    p.set_defaults(fn=cmd_scene_gen)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # any failure becomes a one-line diagnostic
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
