#!/usr/bin/env python3
"""Mean learning time per learner on dag9 at a few retention fractions."""
import argparse

from sobn import harness


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--f", default="0.5,0.9")
    args = p.parse_args()
    for ln in harness.LEARNERS:
        for f in (float(x) for x in args.f.split(",")):
            cfg = harness.TrialConfig(structure="dag9", n_trials=args.n, learner=ln, retention=f)
            print(f"{ln:10s} f={f:<4g} mean={harness.profile(cfg).mean:.4f}s")


if __name__ == "__main__":
    main()
