"""Command-line entry point: ``sobn compile|sample|learn|query|experiment``.

Exit codes: 0 success, 2 argument error, 3 input-format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import harness
from .em import EmConfig, EmError, build_fisher, build_hessian_ga, covariance_from_info, em_fit, observation_patterns
from .infer2 import QueryError, query_all
from .network import (
    BUILTIN_STRUCTURES,
    MISSING,
    BayesNet,
    DataFormatError,
    StructureError,
    ancestral_sample,
    builtin_structure,
    load_dataset,
    load_network,
    mask_cells,
    sample_ground_truth,
    save_dataset,
    save_network,
)
from .posterior import GaussianPosterior, SingularInformationError, build_D, load_posterior, save_posterior
from .bmm import bmm_fit_state
from .spn import UnderflowError, compile_spn, dump, forward_batch

EXIT_ARGS, EXIT_FORMAT, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("sobn")


class ArgumentError(Exception):
    pass


def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned value")
    return v


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _load_net(name: str):
    """Builtin structure id or path to a network file."""
    if name in BUILTIN_STRUCTURES and not os.path.exists(name):
        return builtin_structure(name)
    path = Path(name)
    if not path.exists():
        raise ArgumentError(f"no such network file or builtin structure: {name!r}")
    return load_network(path)


def _structure(net):
    return net.structure if isinstance(net, BayesNet) else net


def parse_evidence(text: str, structure) -> np.ndarray:
    """Parse ``"X0=1,X2=0"`` into an evidence vector; errors name the offending position."""
    ev = np.full(structure.n_nodes, MISSING, dtype=int)
    if not text or not text.strip():
        return ev
    pos = 0
    for part in text.split(","):
        where = pos + 1
        pos += len(part) + 1
        if "=" not in part:
            raise DataFormatError(f"evidence parse error at position {where}: expected NODE=VALUE in {part!r}")
        name, _, value = part.partition("=")
        name, value = name.strip(), value.strip()
        if not name or not value:
            raise DataFormatError(f"evidence parse error at position {where}: incomplete pair {part!r}")
        try:
            i = structure.index(name)
        except KeyError:
            raise DataFormatError(f"evidence parse error at position {where}: unknown node {name!r}") from None
        try:
            v = int(value)
        except ValueError:
            raise DataFormatError(f"evidence parse error at position {where}: bad value {value!r}") from None
        if not 0 <= v < structure.cards[i]:
            raise DataFormatError(
                f"evidence parse error at position {where}: value {v} outside domain of {name}"
            )
        ev[i] = v
    return ev


# --- subcommands ------------------------------------------------------------------


def cmd_compile(args) -> int:
    net = _load_net(args.network)
    s = _structure(net)
    order = args.order.split(",") if args.order else None
    spn = compile_spn(s, order)
    text = dump(spn)
    if args.out:
        Path(args.out).write_text(text)
    counts = spn.counts()
    reachable = {k: 0 for k in counts}
    for node in spn.eval_order:
        reachable[spn.kinds[node]] += 1
    print(f"order: {','.join(s.ids[i] for i in spn.order)}")
    print(
        "nodes: sum={SUM} product={PRODUCT} indicator={INDICATOR} param={PARAM}".format(**reachable)
    )
    if args.compare_order:
        theta = net.theta if isinstance(net, BayesNet) else sample_ground_truth(
            s, np.random.default_rng(args.seed)
        ).theta
        probe = parse_evidence(args.probe, s)
        other = compile_spn(s, args.compare_order.split(","))
        a = forward_batch(spn, theta, probe[None])[0]
        b = forward_batch(other, theta, probe[None])[0]
        print(f"probe p(e): order A {a:.17g}  order B {b:.17g}  |diff| {abs(a - b):.3g}")
    return 0


def cmd_sample(args) -> int:
    net = _load_net(args.network)
    rng = np.random.default_rng(args.seed)
    if not isinstance(net, BayesNet):
        net = sample_ground_truth(net, rng)
    data = ancestral_sample(net, args.rows, rng)
    if args.f < 1.0:
        data = mask_cells(data, args.f, rng)
    save_dataset(data, net.structure, args.out)
    if args.truth_out:
        save_network(net, args.truth_out)
    print(f"wrote {len(data)} rows to {args.out}")
    return 0


def cmd_learn(args) -> int:
    net = _load_net(args.network)
    s = _structure(net)
    data = load_dataset(args.dataset, s)
    spn = compile_spn(s)
    start = time.perf_counter()
    if args.learner == "bmm":
        state = bmm_fit_state(spn, data)
        post = state.posterior
        summary = f"rows={state.t} skipped={state.skipped}"
    else:
        cfg = EmConfig(fisher_weighting=args.fisher_weighting)
        theta, trace = em_fit(spn, data, cfg, np.random.default_rng(args.seed))
        if args.learner == "em-ga":
            info = build_hessian_ga(spn, theta, data)
        else:
            info = build_fisher(spn, theta, observation_patterns(data), cfg.fisher_weighting)
        post = GaussianPosterior(s, theta, covariance_from_info(info, build_D(s)))
        lp = trace.log_posterior[-1] if trace.log_posterior else float("nan")
        summary = (
            f"iterations={trace.iterations} converged={trace.converged} "
            f"log_posterior={lp:.6f} info={info.kind}"
        )
        if args.learner == "em-fisher":
            summary += f" fisher_weighting={cfg.fisher_weighting}"
    elapsed = time.perf_counter() - start
    save_posterior(post, args.out)
    print(f"learner={args.learner} time_s={elapsed:.4f} {summary}")
    return 0


def cmd_query(args) -> int:
    net = _load_net(args.network)
    s = _structure(net)
    post = load_posterior(s, args.posterior)
    ev = parse_evidence(args.evidence, s)
    spn = compile_spn(s)
    records = []
    for q in query_all(spn, post, ev):
        records.extend(q.records(s.ids))
    print(json.dumps(records, indent=2))
    return 0


def cmd_experiment(args) -> int:
    name = args.structure
    if name not in BUILTIN_STRUCTURES and not os.path.exists(name):
        raise ArgumentError(f"unknown structure {name!r}; use {BUILTIN_STRUCTURES} or a network file")
    learners = tuple(args.learners.split(",")) if args.learners else harness.LEARNERS
    for ln in learners:
        if ln not in harness.LEARNERS:
            raise ArgumentError(f"unknown learner {ln!r}")
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)
    common = dict(fisher_weighting=args.fisher_weighting, interval=args.interval)
    if args.which == "a":
        f_values = tuple(args.f) if args.f else harness.F_VALUES
        res = harness.experiment_a(
            name, f_values, learners, args.n, args.t, args.seed, jobs, **common
        )
        reports = list(res.values())
    else:
        res = harness.experiment_b(
            name, args.n, args.seed, learners, args.complete, args.partial, jobs, **common
        )
        reports = list(res.values())
    run_config = {"experiment": args.which, "configs": harness.report_config(reports)}
    dec, summ = harness.write_reports(reports, args.out, args.seed, run_config, timing=not args.no_timing)
    for rep in reports:
        mean_abs = rep.curve.mean_abs if rep.curve else float("nan")
        print(
            f"{rep.config.learner:10s} {rep.config.cell:10s} mean_abs={mean_abs:.4f} "
            f"mean_time_s={rep.mean_time:.4f} failures={rep.failures}"
        )
    print(f"wrote {dec} and {summ}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sobn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("compile", help="compile a network to a circuit and print node counts")
    c.add_argument("network", help="network file or builtin id (chain3, dag9)")
    c.add_argument("--order", help="comma-separated elimination order")
    c.add_argument("--out", help="write the circuit text dump here")
    c.add_argument("--compare-order", help="second order; prints both forward values on --probe")
    c.add_argument("--probe", default="", help='probe evidence, e.g. "X0=1"')
    c.add_argument("--seed", type=_seed, default=0)
    c.set_defaults(func=cmd_compile)

    s = sub.add_parser("sample", help="sample a (masked) dataset")
    s.add_argument("network")
    s.add_argument("--rows", type=int, default=120)
    s.add_argument("--f", type=float, default=1.0, help="cell retention fraction")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--truth-out", help="write the sampled ground-truth network here")
    s.set_defaults(func=cmd_sample)

    ln = sub.add_parser("learn", help="learn a parameter posterior")
    ln.add_argument("network")
    ln.add_argument("dataset")
    ln.add_argument("--learner", choices=harness.LEARNERS, default="bmm")
    ln.add_argument("--fisher-weighting", type=int, choices=(1, 2), default=1)
    ln.add_argument("--seed", type=_seed, default=0)
    ln.add_argument("--out", required=True)
    ln.set_defaults(func=cmd_learn)

    q = sub.add_parser("query", help="second-order queries for every unobserved node")
    q.add_argument("network")
    q.add_argument("posterior")
    q.add_argument("--evidence", default="", help='e.g. "X0=1,X2=0"')
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("experiment", help="run calibration experiment A or B")
    e.add_argument("which", choices=("a", "b"))
    e.add_argument("--structure", default="chain3")
    e.add_argument("--n", type=int, default=200, help="trials per cell")
    e.add_argument("--t", type=int, default=120, help="rows per trial (experiment a)")
    e.add_argument("--f", type=_floats, help="retention fractions (experiment a)")
    e.add_argument("--complete", type=int, default=20, help="complete seed rows (experiment b)")
    e.add_argument("--partial", type=int, default=100, help="leaf-only rows (experiment b)")
    e.add_argument("--learners", help="comma-separated subset of " + ",".join(harness.LEARNERS))
    e.add_argument("--seed", type=_seed, default=0)
    e.add_argument("--jobs", type=int, default=0, help="worker processes (default: all cores)")
    e.add_argument("--fisher-weighting", type=int, choices=(1, 2), default=1)
    e.add_argument("--interval", choices=("beta", "gaussian"), default="beta")
    e.add_argument("--no-timing", action="store_true", help="leave mean_time_s empty")
    e.add_argument("--out", default="results")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (DataFormatError, StructureError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (EmError, SingularInformationError, UnderflowError, QueryError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
