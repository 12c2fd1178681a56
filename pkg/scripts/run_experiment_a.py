#!/usr/bin/env python3
"""Coverage versus retention fraction on chain3, all three learners.

    python3 scripts/run_experiment_a.py --n 200 --out results/a
"""
import argparse

from sobn import harness


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--structure", default="chain3")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--t", type=int, default=120)
    p.add_argument("--f", default=",".join(str(f) for f in harness.F_VALUES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="results/a")
    args = p.parse_args()

    f_values = tuple(float(x) for x in args.f.split(","))
    res = harness.experiment_a(args.structure, f_values, harness.LEARNERS, args.n, args.t, args.seed, args.jobs)
    reports = list(res.values())
    harness.write_reports(reports, args.out, args.seed, {"experiment": "a", "configs": harness.report_config(reports)})

    print("f      " + "".join(f"{ln:>12s}" for ln in harness.LEARNERS))
    for f in f_values:
        print(f"{f:<7g}" + "".join(f"{res[(ln, f)].curve.mean_abs:12.4f}" for ln in harness.LEARNERS))


if __name__ == "__main__":
    main()
