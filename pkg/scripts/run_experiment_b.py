#!/usr/bin/env python3
"""Leaf-only training data on dag9: coverage at gamma = 0.5 and learning time per learner."""
import argparse

from sobn import harness


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--structure", default="dag9")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--complete", type=int, default=20)
    p.add_argument("--partial", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="results/b")
    args = p.parse_args()

    res = harness.experiment_b(
        args.structure, args.n, args.seed, harness.LEARNERS, args.complete, args.partial, args.jobs
    )
    reports = list(res.values())
    harness.write_reports(reports, args.out, args.seed, {"experiment": "b", "configs": harness.report_config(reports)})
    for ln, rep in res.items():
        c = rep.curve
        print(f"{ln:10s} mean_abs={c.mean_abs:.4f} r(0.5)={c.r[50]:.3f} time={rep.mean_time:.3f}s failures={rep.failures}")


if __name__ == "__main__":
    main()
