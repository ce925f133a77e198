"""Head and objective comparison on the synthetic Markov task; writes report, p-values and curves."""
import argparse
import time

from seqlab.config import TrainConfig, apply_overrides
from seqlab.experiments import SYNTH_BASE, synthetic_comparison


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--out", default="runs/synthetic")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    overrides = apply_overrides(TrainConfig(**SYNTH_BASE),
                                [kv.split("=", 1) for kv in args.set]).to_dict()
    t0 = time.time()
    cmp = synthetic_comparison(seeds, args.out, **overrides)
    for key, value in cmp.summary().items():
        print(f"{key:>16s} {value:.4f}")
    for a, b, p in cmp.result.pvalues("dev"):
        print(f"p({a}, {b}) = {p:.3g}")
    print(f"{time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
