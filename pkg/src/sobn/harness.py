"""Calibration experiments for second-order parameter learners.

A trial draws a ground-truth network from the flat Dirichlet, samples and
masks a training set, learns a posterior, then checks how often the true
``p(x_k | e)`` falls inside the posterior's equal-tailed interval at each
nominal level ``gamma``.  Coverage counts are integers, so pooled curves do
not depend on the order in which trials finish.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bmm import bmm_fit_state
from .em import EmConfig, EmError, fit_em_fisher, fit_em_ga
from .infer2 import VARIANCE_FLOOR, QueryError, exact_conditionals, query_all
from .network import (
    MISSING,
    Structure,
    ancestral_sample,
    builtin_structure,
    load_network,
    mask_cells,
    mask_pattern,
    sample_ground_truth,
)
from .posterior import SingularInformationError, beta_interval
from .spn import Spn, UnderflowError, compile_spn

log = logging.getLogger(__name__)

LEARNERS = ("bmm", "em-ga", "em-fisher")
GAMMAS = np.round(np.linspace(0.0, 1.0, 101), 2)
F_VALUES = tuple(round(0.1 * k, 1) for k in range(1, 10))

# independent substreams per trial
_NET, _DATA, _MASK, _EVIDENCE, _LEARN = range(5)


@dataclass(frozen=True)
class TrialConfig:
    structure: str = "chain3"
    n_trials: int = 200
    n_rows: int = 120
    learner: str = "bmm"
    masking: str = "cells"  # "cells" or "leaves"
    retention: float = 1.0
    n_complete: int = 20  # leading complete rows when masking="leaves"
    reveal_prob: float = 0.3
    seed: int = 0
    fisher_weighting: int = 1
    interval: str = "beta"

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("need at least one trial")
        if self.n_rows < 0:
            raise ValueError("row count must be nonnegative")
        if self.learner not in LEARNERS:
            raise ValueError(f"unknown learner {self.learner!r}; choose from {LEARNERS}")
        if self.masking not in ("cells", "leaves"):
            raise ValueError(f"unknown masking {self.masking!r}")
        if not 0.0 <= self.retention <= 1.0:
            raise ValueError("retention must lie in [0, 1]")

    @property
    def cell(self) -> str:
        if self.masking == "leaves":
            return f"leaves{self.n_complete}"
        return f"f={self.retention:g}"


@dataclass
class TrialResult:
    index: int
    contained: np.ndarray | None  # (queries, len(GAMMAS)) bool
    learn_time: float = 0.0
    skipped_rows: int = 0
    failed: bool = False
    error: str = ""


@dataclass
class DecbodCurve:
    gammas: np.ndarray
    r: np.ndarray
    mean_abs: float
    count: int


@dataclass
class TrialReport:
    config: TrialConfig
    curve: DecbodCurve | None
    times: list[float] = field(default_factory=list)
    skipped_rows: int = 0
    failures: int = 0

    @property
    def mean_time(self) -> float:
        return float(np.mean(self.times)) if self.times else float("nan")


# --- plumbing -------------------------------------------------------------------

_SPN_CACHE: dict[str, tuple[Structure, Spn]] = {}


def resolve_structure(name: str) -> tuple[Structure, Spn]:
    """Builtin id or path to a network file; compiled circuits are cached."""
    if name not in _SPN_CACHE:
        if os.path.exists(name):
            net = load_network(name)
            s = getattr(net, "structure", net)
        else:
            s = builtin_structure(name)
        _SPN_CACHE[name] = (s, compile_spn(s))
    return _SPN_CACHE[name]


def trial_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index, stream)))


def learn(learner: str, spn: Spn, data, rng, fisher_weighting: int = 1):
    """Fit a posterior; returns ``(posterior, skipped_rows)``."""
    if learner == "bmm":
        state = bmm_fit_state(spn, data)
        return state.posterior, state.skipped
    cfg = EmConfig(fisher_weighting=fisher_weighting)
    if learner == "em-ga":
        post, trace = fit_em_ga(spn, data, cfg, rng)
    elif learner == "em-fisher":
        post, trace = fit_em_fisher(spn, data, cfg, rng)
    else:
        raise ValueError(f"unknown learner {learner!r}")
    return post, trace.skipped_rows


def training_data(cfg: TrialConfig, structure: Structure, net, index: int) -> np.ndarray:
    data = ancestral_sample(net, cfg.n_rows, trial_rng(cfg.seed, index, _DATA))
    if cfg.masking == "cells":
        return mask_cells(data, cfg.retention, trial_rng(cfg.seed, index, _MASK))
    head = data[: cfg.n_complete]
    tail = mask_pattern(data[cfg.n_complete :], structure.leaves)
    return np.vstack([head, tail])


def draw_evidence(net, rng, reveal_prob: float) -> np.ndarray:
    """One joint draw with each variable revealed independently; one stays hidden."""
    full = ancestral_sample(net, 1, rng)[0]
    reveal = rng.random(len(full)) < reveal_prob
    if reveal.all():
        reveal[rng.integers(len(full))] = False
    return np.where(reveal, full, MISSING)


def containment(truth, mean, variance, method="beta") -> np.ndarray:
    var = np.maximum(variance, VARIANCE_FLOOR)
    lo, hi = beta_interval(mean[:, None], var[:, None], GAMMAS[None, :], method)
    t = truth[:, None]
    return (lo <= t) & (t <= hi)


def run_trial(cfg: TrialConfig, index: int) -> TrialResult:
    structure, spn = resolve_structure(cfg.structure)
    net = sample_ground_truth(structure, trial_rng(cfg.seed, index, _NET))
    data = training_data(cfg, structure, net, index)

    start = time.perf_counter()
    try:
        post, skipped = learn(
            cfg.learner, spn, data, trial_rng(cfg.seed, index, _LEARN), cfg.fisher_weighting
        )
    except (EmError, SingularInformationError, UnderflowError, np.linalg.LinAlgError) as exc:
        return TrialResult(index, None, time.perf_counter() - start, failed=True, error=str(exc))
    elapsed = time.perf_counter() - start

    ev = draw_evidence(net, trial_rng(cfg.seed, index, _EVIDENCE), cfg.reveal_prob)
    try:
        results = query_all(spn, post, ev)
    except (QueryError, UnderflowError) as exc:
        return TrialResult(index, None, elapsed, skipped, failed=True, error=str(exc))
    truths = exact_conditionals(spn, net.theta, ev, [q.node for q in results])
    truth = np.concatenate(truths)
    mean = np.clip(np.concatenate([q.mean for q in results]), 0.0, 1.0)
    var = np.concatenate([q.variance for q in results])
    return TrialResult(index, containment(truth, mean, var, cfg.interval), elapsed, skipped)


def decbod(contained) -> DecbodCurve:
    """Coverage curve and mean absolute divergence from pooled containment rows."""
    if isinstance(contained, (list, tuple)):
        rows = [c for c in contained if c is not None and len(c)]
        contained = np.vstack(rows) if rows else np.zeros((0, len(GAMMAS)), bool)
    contained = np.asarray(contained, dtype=bool)
    if contained.ndim != 2 or contained.shape[1] != len(GAMMAS) or len(contained) == 0:
        raise ValueError("decbod needs at least one containment record on the gamma grid")
    hits = contained.sum(axis=0)
    r = hits / len(contained)
    return DecbodCurve(GAMMAS.copy(), r, float(np.mean(np.abs(r - GAMMAS))), len(contained))


def _run_one(args):
    cfg, index = args
    return run_trial(cfg, index)


def run_cell(cfg: TrialConfig, jobs: int | None = 1) -> TrialReport:
    """All trials of one (learner, masking) cell, serial or in a process pool."""
    tasks = [(cfg, i) for i in range(cfg.n_trials)]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda r: r.index)
    ok = [r for r in results if not r.failed]
    curve = decbod([r.contained for r in ok]) if ok else None
    return TrialReport(
        config=cfg,
        curve=curve,
        times=[r.learn_time for r in ok],
        skipped_rows=sum(r.skipped_rows for r in results),
        failures=len(results) - len(ok),
    )


def experiment_a(
    structure="chain3",
    f_values=F_VALUES,
    learners=LEARNERS,
    n_trials=200,
    n_rows=120,
    seed=0,
    jobs=1,
    **overrides,
) -> dict[tuple[str, float], TrialReport]:
    out = {}
    for learner in learners:
        for f in f_values:
            cfg = TrialConfig(
                structure=structure,
                n_trials=n_trials,
                n_rows=n_rows,
                learner=learner,
                masking="cells",
                retention=float(f),
                seed=seed,
                **overrides,
            )
            out[(learner, float(f))] = run_cell(cfg, jobs)
    return out


def experiment_b(
    structure="dag9",
    n_trials=200,
    seed=0,
    learners=LEARNERS,
    n_complete=20,
    n_partial=100,
    jobs=1,
    **overrides,
) -> dict[str, TrialReport]:
    s, _ = resolve_structure(structure)
    if not s.leaves:
        raise ValueError("structure has no leaf nodes")
    out = {}
    for learner in learners:
        cfg = TrialConfig(
            structure=structure,
            n_trials=n_trials,
            n_rows=n_complete + n_partial,
            learner=learner,
            masking="leaves",
            n_complete=n_complete,
            seed=seed,
            **overrides,
        )
        out[learner] = run_cell(cfg, jobs)
    return out


@dataclass(frozen=True)
class TimingStats:
    mean: float
    times: tuple[float, ...]


def profile(cfg: TrialConfig) -> TimingStats:
    """Wall-clock time of the learning call alone over ``cfg.n_trials`` trials."""
    if cfg.n_trials < 1:
        raise ValueError("cannot profile zero trials")
    structure, spn = resolve_structure(cfg.structure)
    times = []
    for index in range(cfg.n_trials):
        net = sample_ground_truth(structure, trial_rng(cfg.seed, index, _NET))
        data = training_data(cfg, structure, net, index)
        rng = trial_rng(cfg.seed, index, _LEARN)
        start = time.perf_counter()
        learn(cfg.learner, spn, data, rng, cfg.fisher_weighting)
        times.append(time.perf_counter() - start)
    return TimingStats(float(np.mean(times)), tuple(times))


# --- output ------------------------------------------------------------------------


def config_hash(doc) -> str:
    text = json.dumps(doc, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def write_reports(reports, out_dir, seed: int, run_config: dict, timing: bool = True):
    """Write ``decbod.csv`` and ``summary.csv``; returns their paths.

    ``timing=False`` leaves ``mean_time_s`` empty so that files are a pure
    function of the seed and configuration.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"# seed={seed} config={config_hash(run_config)}\n"
    dec_path, sum_path = out / "decbod.csv", out / "summary.csv"
    with dec_path.open("w", newline="") as fd, sum_path.open("w", newline="") as fs:
        fd.write(header)
        fs.write(header)
        wd, ws = csv.writer(fd, lineterminator="\n"), csv.writer(fs, lineterminator="\n")
        wd.writerow(["learner", "cell", "gamma", "r"])
        ws.writerow(["learner", "cell", "mean_abs", "mean_time_s", "failures"])
        for rep in reports:
            cfg = rep.config
            if rep.curve is not None:
                for g, r in zip(rep.curve.gammas, rep.curve.r):
                    wd.writerow([cfg.learner, cfg.cell, f"{g:.2f}", f"{r:.10g}"])
                mean_abs = f"{rep.curve.mean_abs:.10g}"
            else:
                mean_abs = "nan"
            t = f"{rep.mean_time:.6g}" if timing else ""
            ws.writerow([cfg.learner, cfg.cell, mean_abs, t, rep.failures])
    return dec_path, sum_path


def report_config(reports) -> list[dict]:
    return [asdict(r.config) for r in reports]
