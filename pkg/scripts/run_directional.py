"""Train the five directional variants over seeds 0..4 and summarise the comparisons.

    python scripts/run_directional.py [--steps 2000] [--seeds 0,1,2,3,4] [--out results/directional.json]

Runs already cached in the output document under a matching config digest
are skipped.
"""
import argparse
import logging

from pyramidflow.experiments import run_directional


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="results/directional.json")
    ap.add_argument("--variants", help="comma-separated subset of variants")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    seeds = [int(s) for s in args.seeds.split(",")]
    variants = args.variants.split(",") if args.variants else None
    doc = run_directional(seeds, args.steps, args.out, variants)
    for c in doc["comparisons"]:
        print(f"({c['label']}) {c['better']} >= {c['worse']} on AP_{c['ap']}: "
              f"{c['wins']}/{c['seeds']} seeds (need {c['needed']}) -> {'PASS' if c['passed'] else 'FAIL'}")


if __name__ == "__main__":
    main()
