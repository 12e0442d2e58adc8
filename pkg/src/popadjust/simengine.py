"""Factorial Monte Carlo study of MAIC, STC and the Bucher method.

Each replicate simulates an AC trial (IPD) and a BC trial that is reduced to
covariate means plus a marginal log hazard ratio.  Both active treatments
share the conditional effect and the effect-modifier interactions, so the
true marginal A-vs-B effect in the BC population is zero in every scenario.

Random streams are Philox generators keyed by
(seed_root, scenario id, replicate id, role), so any replicate can be
reproduced in isolation and results do not depend on scheduling.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from itertools import product
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .datagen import (DEFAULT_CENSORING_RATE, CovariateSpec, IpdTrial, OutcomeModelParams,
                      aggregate_trial, generate_trial)
from .errors import ConfigurationError, EstimationError, SeparationError, WeightEstimationError
from .itc import bucher_estimate, indirect_comparison
from .maic import maic_estimate
from .stc import StcModelSpec, stc_estimate

TRUE_EFFECT = 0.0

N_AC_LEVELS = (150, 300, 600)
COEF_LEVELS = (-math.log(0.67), -math.log(0.5), -math.log(0.33))
COEF_LABELS = ("moderate", "strong", "very_strong")
CORRELATION_LEVELS = (0.0, 0.35)
AC_MEAN_LEVELS = (0.45, 0.30, 0.15)
OVERLAP_LABELS = ("strong", "moderate", "poor")

BC_N = 600
BC_MEAN = 0.6
COVARIATE_SD = math.sqrt(0.2)
TREATMENT_COEF = math.log(0.25)
WEIBULL_INVERSE_SCALE = 8.5
WEIBULL_SHAPE = 1.3
N_COVARIATES = 4
EFFECT_MODIFIERS = (0, 1)

METHODS = ("maic", "stc", "bucher")
STATUSES = ("ok", "weight_failure", "separation", "cox_failure")
RESULT_FIELDS = ("scenario_id", "replicate_id", "method", "estimate", "se", "status", "ess")

ROLE_AC, ROLE_BC, ROLE_BOOTSTRAP = 0, 1, 2


@dataclass(frozen=True)
class Scenario:
    id: int
    n_ac: int
    prognostic_coef: float
    interaction_coef: float
    correlation: float
    ac_covariate_mean: float

    def covariate_spec(self, trial: str) -> CovariateSpec:
        mean = self.ac_covariate_mean if trial == "AC" else BC_MEAN
        return CovariateSpec(mean=(mean,) * N_COVARIATES, sd=(COVARIATE_SD,) * N_COVARIATES,
                             pairwise_correlation=self.correlation,
                             effect_modifiers=EFFECT_MODIFIERS)

    def outcome_params(self, censoring_rate: float = DEFAULT_CENSORING_RATE) -> OutcomeModelParams:
        return OutcomeModelParams(
            weibull_inverse_scale=WEIBULL_INVERSE_SCALE,
            weibull_shape=WEIBULL_SHAPE,
            prognostic_coefs=(self.prognostic_coef,) * N_COVARIATES,
            interaction_coefs=(self.interaction_coef,) * len(EFFECT_MODIFIERS),
            treatment_coef=TREATMENT_COEF,
            censoring_rate=censoring_rate)

    def labels(self) -> dict[str, str]:
        return {
            "n_ac": str(self.n_ac),
            "prognostic": COEF_LABELS[_level(COEF_LEVELS, self.prognostic_coef)],
            "interaction": COEF_LABELS[_level(COEF_LEVELS, self.interaction_coef)],
            "correlation": f"{self.correlation:g}",
            "overlap": OVERLAP_LABELS[_level(AC_MEAN_LEVELS, self.ac_covariate_mean)],
        }


@dataclass
class ReplicateResult:
    scenario_id: int
    replicate_id: int
    method: str
    estimate: float
    se: float
    status: str
    ess: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def _level(levels, value):
    return min(range(len(levels)), key=lambda i: abs(levels[i] - value))


def build_grid(filter: Callable[[Scenario], bool] | None = None) -> list[Scenario]:
    """All 162 scenarios, ids 1..162 in nested-loop order
    (n_ac, prognostic, interaction, correlation, AC mean), optionally filtered."""
    grid = []
    levels = product(N_AC_LEVELS, COEF_LEVELS, COEF_LEVELS, CORRELATION_LEVELS, AC_MEAN_LEVELS)
    for sid, (n, b1, b2, rho, mu) in enumerate(levels, start=1):
        grid.append(Scenario(sid, n, b1, b2, rho, mu))
    if filter is not None:
        grid = [s for s in grid if filter(s)]
    return grid


def desk_grid() -> list[Scenario]:
    """Twelve-scenario desk-scale subset.

    Both sample-size extremes and all three overlap levels, crossed with two
    opposite corners of the coefficient/correlation space: very strong
    prognostic with moderate interaction and no correlation, and moderate
    prognostic with very strong interaction and moderate correlation.
    """
    corners = {(COEF_LEVELS[2], COEF_LEVELS[0], 0.0), (COEF_LEVELS[0], COEF_LEVELS[2], 0.35)}
    return build_grid(lambda s: s.n_ac in (150, 600)
                      and (s.prognostic_coef, s.interaction_coef, s.correlation) in corners)


def grid_hash(grid: Sequence[Scenario]) -> str:
    payload = json.dumps([asdict(s) for s in grid], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def stream(seed_root: int, scenario_id: int, replicate_id: int, role: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed_root, spawn_key=(scenario_id, replicate_id, role))
    return np.random.Generator(np.random.Philox(ss))


def _status_of(exc: Exception) -> str:
    if isinstance(exc, WeightEstimationError):
        return "weight_failure"
    if isinstance(exc, SeparationError):
        return "separation"
    return "cox_failure"


def simulate_replicate_data(scenario: Scenario, replicate_id: int, seed_root: int,
                            censoring_rate: float = DEFAULT_CENSORING_RATE):
    """The AC trial and the BC trial (before aggregation) for one replicate."""
    params = scenario.outcome_params(censoring_rate)
    ac = generate_trial(scenario.covariate_spec("AC"), params, scenario.n_ac,
                        stream(seed_root, scenario.id, replicate_id, ROLE_AC))
    bc = generate_trial(scenario.covariate_spec("BC"), params, BC_N,
                        stream(seed_root, scenario.id, replicate_id, ROLE_BC))
    return ac, bc


def run_replicate(scenario: Scenario, replicate_id: int, seed_root: int, *,
                  censoring_rate: float = DEFAULT_CENSORING_RATE,
                  variance_method: str = "sandwich",
                  n_bootstrap: int = 1000) -> list[ReplicateResult]:
    """Apply MAIC, STC and Bucher to one simulated pair of trials.

    Estimator failures are recorded as statuses; nothing is raised.
    """
    def failed(method, status):
        return ReplicateResult(scenario.id, replicate_id, method, math.nan, math.nan, status)

    ac, bc_ipd = simulate_replicate_data(scenario, replicate_id, seed_root, censoring_rate)
    try:
        bc = aggregate_trial(bc_ipd)
    except EstimationError as exc:
        return [failed(m, _status_of(exc)) for m in METHODS]

    out = []
    try:
        res = maic_estimate(ac, bc, EFFECT_MODIFIERS, variance_method, n_bootstrap,
                            rng=stream(seed_root, scenario.id, replicate_id, ROLE_BOOTSTRAP))
        ab = indirect_comparison(res.estimate, bc.effect)
        out.append(ReplicateResult(scenario.id, replicate_id, "maic", ab.value, ab.se, "ok",
                                   res.weights.ess))
    except EstimationError as exc:
        out.append(failed("maic", _status_of(exc)))

    try:
        spec = StcModelSpec(tuple(range(N_COVARIATES)), EFFECT_MODIFIERS)
        ab = indirect_comparison(stc_estimate(ac, bc, spec).estimate, bc.effect)
        out.append(ReplicateResult(scenario.id, replicate_id, "stc", ab.value, ab.se, "ok"))
    except EstimationError as exc:
        out.append(failed("stc", _status_of(exc)))

    try:
        ab = bucher_estimate(ac, bc)
        out.append(ReplicateResult(scenario.id, replicate_id, "bucher", ab.value, ab.se, "ok"))
    except EstimationError as exc:
        out.append(failed("bucher", _status_of(exc)))
    return out


# -- persistence ---------------------------------------------------------------

def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def result_row(r: ReplicateResult) -> list[str]:
    return [str(r.scenario_id), str(r.replicate_id), r.method, _fmt(r.estimate), _fmt(r.se),
            r.status, _fmt(r.ess)]


def sort_key(r: ReplicateResult):
    return r.scenario_id, r.replicate_id, METHODS.index(r.method)


def write_results(results: Iterable[ReplicateResult], path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in sorted(results, key=sort_key):
            w.writerow(result_row(r))
    os.replace(tmp, path)


def read_results(path) -> list[ReplicateResult]:
    def num(s):
        return float(s) if s != "" else math.nan

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RESULT_FIELDS:
            raise ConfigurationError(f"{path} is not a replicate results file")
        return [ReplicateResult(int(row["scenario_id"]), int(row["replicate_id"]), row["method"],
                                num(row["estimate"]), num(row["se"]), row["status"],
                                num(row["ess"]))
                for row in reader]


def make_manifest(grid, n_replicates, seed_root, censoring_rate, variance_method,
                  n_bootstrap) -> dict:
    return {
        "software": "popadjust",
        "version": __version__,
        "seed_root": int(seed_root),
        "grid_hash": grid_hash(grid),
        "scenario_ids": [s.id for s in grid],
        "n_replicates": int(n_replicates),
        "censoring_rate": float(censoring_rate),
        "variance_method": variance_method,
        "n_bootstrap": int(n_bootstrap),
    }


# -- study driver ---------------------------------------------------------------

def _run_chunk(args):
    scenario, replicate_ids, seed_root, kwargs = args
    rows = []
    for rep in replicate_ids:
        rows.extend(run_replicate(scenario, rep, seed_root, **kwargs))
    return rows


def _chunks(grid, n_replicates, done, chunk_size):
    for s in grid:
        todo = [r for r in range(1, n_replicates + 1) if (s.id, r) not in done]
        for i in range(0, len(todo), chunk_size):
            yield s, todo[i:i + chunk_size]


def _stderr_progress(done: int, total: int) -> None:
    sys.stderr.write(f"\r  replicates {done}/{total}")
    if done == total:
        sys.stderr.write("\n")
    sys.stderr.flush()


def run_study(grid: Sequence[Scenario], n_replicates: int, seed_root: int, *,
              workers: int = 1, out_dir=None, resume: bool = True,
              censoring_rate: float = DEFAULT_CENSORING_RATE,
              variance_method: str = "sandwich", n_bootstrap: int = 1000,
              chunk_size: int = 25,
              progress: Callable[[int, int], None] | None = _stderr_progress
              ) -> list[ReplicateResult]:
    """Run every (scenario, replicate) pair and return the sorted results.

    With ``out_dir`` set, rows are appended to ``replicates.csv`` as chunks
    finish and a ``manifest.json`` records the run identity; a rerun with the
    same manifest skips pairs already present.  The file is rewritten in
    sorted order on completion.
    """
    if n_replicates < 1:
        raise ConfigurationError("n_replicates must be at least 1")
    if workers < 1:
        raise ConfigurationError("workers must be at least 1")
    kwargs = dict(censoring_rate=censoring_rate, variance_method=variance_method,
                  n_bootstrap=n_bootstrap)
    manifest = make_manifest(grid, n_replicates, seed_root, censoring_rate, variance_method,
                             n_bootstrap)
    results: list[ReplicateResult] = []
    done: set[tuple[int, int]] = set()
    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / "replicates.csv"
        man_path = out_dir / "manifest.json"
        if resume and csv_path.exists() and man_path.exists():
            old = json.loads(man_path.read_text())
            if {k: v for k, v in old.items() if k != "complete"} == manifest:
                keep_ids = {s.id for s in grid}
                existing = [r for r in read_results(csv_path) if r.scenario_id in keep_ids
                            and r.replicate_id <= n_replicates]
                counts: dict[tuple[int, int], int] = {}
                for r in existing:
                    counts[(r.scenario_id, r.replicate_id)] = counts.get(
                        (r.scenario_id, r.replicate_id), 0) + 1
                done = {k for k, c in counts.items() if c == len(METHODS)}
                results = [r for r in existing if (r.scenario_id, r.replicate_id) in done]
        man_path.write_text(json.dumps({**manifest, "complete": False}, indent=2) + "\n")
        write_results(results, csv_path)

    total = len(grid) * n_replicates
    jobs = [(s, reps, seed_root, kwargs) for s, reps in _chunks(grid, n_replicates, done,
                                                                   chunk_size)]
    n_done = len(done)

    def collect(rows):
        nonlocal n_done
        results.extend(rows)
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for r in rows:
                    w.writerow(result_row(r))
        n_done += len(rows) // len(METHODS)
        if progress is not None:
            progress(n_done, total)

    if workers == 1:
        for job in jobs:
            collect(_run_chunk(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_run_chunk, jobs):
                collect(rows)

    results.sort(key=sort_key)
    if csv_path is not None:
        write_results(results, csv_path)
        (out_dir / "manifest.json").write_text(
            json.dumps({**manifest, "complete": True}, indent=2) + "\n")
    return results


def failure_report(results: Iterable[ReplicateResult]) -> dict[str, dict[str, int]]:
    """Counts of each status per method."""
    report = {m: {s: 0 for s in STATUSES} for m in METHODS}
    for r in results:
        report[r.method][r.status] = report[r.method].get(r.status, 0) + 1
    return report
