"""Scheduled sampling: print the gold-feeding probability schedule and sweep k on the Markov task."""
import argparse

import numpy as np

from seqlab.experiments import synth_config
from seqlab.runner import evaluate, load_task, train_run
from seqlab.training import inverse_sigmoid


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ks", default="1,5,10,25")
    ap.add_argument("--seeds", default="0,1")
    ap.add_argument("--epochs", type=int, default=20)
    args = ap.parse_args()
    ks = [float(k) for k in args.ks.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]

    print("epoch " + " ".join(f"k={k:<6g}" for k in ks))
    for i in range(0, args.epochs, max(1, args.epochs // 10)):
        print(f"{i:5d} " + " ".join(f"{inverse_sigmoid(i, k):8.3f}" for k in ks))

    base = synth_config(epochs=args.epochs)
    data = load_task(base)
    for name, cfg in [("ml", base)] + [(f"ss k={k:g}", base.replace(objective="scheduled-sampling", ss_k=k))
                                         for k in ks]:
        scores = [evaluate(train_run(cfg.replace(seed=s), data=data).model, data, "dev", cfg.beam)
                  for s in seeds]
        print(f"{name:>10s} dev accuracy {np.mean(scores):.4f} +- {np.std(scores, ddof=1) if len(scores) > 1 else 0:.4f}")


if __name__ == "__main__":
    main()
