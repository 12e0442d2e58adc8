"""Performance measures and Monte Carlo standard errors for simulation output.

For S usable replicates with estimates e_s, standard errors s_s and true
value theta:

    bias      = mean(e) - theta                  MCSE  ESE / sqrt(S)
    ESE       = sd(e), divisor S - 1             MCSE  ESE / sqrt(2 (S - 1))
    VR        = mean(s) / ESE
    coverage  = mean(|e - theta| <= z s)         MCSE  sqrt(c (1 - c) / S)
    MSE       = mean((e - theta)^2)              MCSE  sqrt(sum((d_s - MSE)^2) / (S (S - 1)))
    std. bias = 100 bias / ESE

with d_s = (e_s - theta)^2.  Rows whose status is not ``ok`` are excluded;
``n_used`` records how many replicates remain.
"""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

from .errors import SummarizationError
from .itc import z_quantile
from .simengine import METHODS, TRUE_EFFECT, ReplicateResult

PROBLEMATIC_STD_BIAS = 50.0
SUMMARY_FIELDS = ("scenario_id", "method", "n_used", "bias", "bias_mcse", "std_bias_pct",
                  "ese", "ese_mcse", "vr", "coverage", "coverage_mcse", "mse", "mse_mcse",
                  "mean_model_se")


@dataclass
class PerformanceSummary:
    scenario_id: int
    method: str
    n_used: int
    bias: float
    bias_mcse: float
    standardized_bias_pct: float
    ese: float
    ese_mcse: float
    variability_ratio: float
    coverage: float
    coverage_mcse: float
    mse: float
    mse_mcse: float
    mean_model_se: float

    @property
    def problematic_bias(self) -> bool:
        return abs(self.standardized_bias_pct) > PROBLEMATIC_STD_BIAS

    def as_row(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]


def bias_mcse(ese: float, n: int) -> float:
    return ese / math.sqrt(n)


def ese_mcse(ese: float, n: int) -> float:
    return ese / math.sqrt(2 * (n - 1))


def coverage_mcse(coverage: float, n: int) -> float:
    return math.sqrt(coverage * (1 - coverage) / n)


def mse_mcse(estimates, truth: float = TRUE_EFFECT) -> float:
    d = (np.asarray(estimates, dtype=float) - truth) ** 2
    n = d.size
    return float(math.sqrt(np.sum((d - d.mean()) ** 2) / (n * (n - 1))))


def mcse(measure: str, *, estimates=None, ese: float | None = None,
         coverage: float | None = None, n: int | None = None,
         truth: float = TRUE_EFFECT) -> float:
    """Monte Carlo SE of one performance measure.

    ``measure`` is one of ``bias``, ``ese``, ``coverage``, ``mse``; pass the
    replicate estimates or the summary quantities that measure needs.
    """
    if estimates is not None:
        est = np.asarray(estimates, dtype=float)
        n = est.size
        if ese is None:
            ese = float(np.std(est, ddof=1))
    if n is None or n < 2:
        raise SummarizationError("Monte Carlo SEs need at least two replicates")
    if measure == "bias":
        return bias_mcse(ese, n)
    if measure == "ese":
        return ese_mcse(ese, n)
    if measure == "coverage":
        return coverage_mcse(coverage, n)
    if measure == "mse":
        if estimates is None:
            raise SummarizationError("MSE MCSE needs the replicate estimates")
        return mse_mcse(estimates, truth)
    raise ValueError(f"unknown performance measure {measure!r}")


def summarize_cell(estimates, ses, truth: float = TRUE_EFFECT, *, scenario_id: int = 0,
                   method: str = "", level: float = 0.95) -> PerformanceSummary:
    est = np.asarray(estimates, dtype=float)
    se = np.asarray(ses, dtype=float)
    n = est.size
    if n < 2:
        raise SummarizationError(
            f"scenario {scenario_id} / {method}: {n} usable replicate(s), need at least 2")
    err = est - truth
    bias = float(err.mean())
    ese = float(np.std(est, ddof=1))
    mean_se = float(se.mean())
    z = z_quantile(level)
    coverage = float(np.mean(np.abs(err) <= z * se))
    mse = float(np.mean(err ** 2))
    with np.errstate(divide="ignore", invalid="ignore"):
        vr = mean_se / ese if ese > 0 else math.inf
        std_bias = 100.0 * bias / ese if ese > 0 else (0.0 if bias == 0 else math.copysign(math.inf, bias))
    return PerformanceSummary(
        scenario_id=scenario_id, method=method, n_used=n,
        bias=bias, bias_mcse=bias_mcse(ese, n), standardized_bias_pct=std_bias,
        ese=ese, ese_mcse=ese_mcse(ese, n), variability_ratio=vr,
        coverage=coverage, coverage_mcse=coverage_mcse(coverage, n),
        mse=mse, mse_mcse=mse_mcse(est, truth), mean_model_se=mean_se)


def summarize(results: Iterable[ReplicateResult], truth: float = TRUE_EFFECT,
              level: float = 0.95) -> list[PerformanceSummary]:
    """One summary per (scenario, method), ordered by scenario id then
    method.  Non-ok replicates are dropped."""
    cells: dict[tuple[int, str], list[tuple[int, float, float]]] = defaultdict(list)
    seen = set()
    for r in results:
        seen.add((r.scenario_id, r.method))
        if r.ok:
            cells[(r.scenario_id, r.method)].append((r.replicate_id, r.estimate, r.se))
    order = sorted(seen, key=lambda k: (k[0], METHODS.index(k[1]) if k[1] in METHODS else 99))
    out = []
    for key in order:
        rows = sorted(cells.get(key, []))  # replicate order fixes the summation order
        est = [e for _, e, _ in rows]
        se = [s for _, _, s in rows]
        out.append(summarize_cell(est, se, truth, scenario_id=key[0], method=key[1],
                                  level=level))
    return out


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)) or isinstance(v, str):
        return str(v)
    return repr(float(v))


def write_summary(summaries: Sequence[PerformanceSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for s in summaries:
            w.writerow([_fmt(v) for v in s.as_row()])


def read_summary(path) -> list[PerformanceSummary]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != SUMMARY_FIELDS:
            raise SummarizationError(f"{path} is not a summary file")
        for row in reader:
            vals = [row[k] for k in SUMMARY_FIELDS]
            out.append(PerformanceSummary(int(vals[0]), vals[1], int(vals[2]),
                                          *(float(v) for v in vals[3:])))
    return out
