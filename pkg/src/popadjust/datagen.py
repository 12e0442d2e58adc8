"""Simulated two-arm survival trials and their published-style summaries.

Survival times follow a Weibull proportional-hazards model, generated by
inverse transform of a uniform draw:

    tau = (-log U / (lambda * exp(LP))) ** (1 / nu)
    LP  = X b1 + (bT + X_em b2) * 1[T = 1]

Censoring times are exponential with rate ``censoring_rate`` and are
independent of covariates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import optimize

from .errors import CalibrationError, ConfigurationError, DomainError
from .itc import EstimateWithSE, unadjusted_estimate

COVARIATE_NAMES = ("x1", "x2", "x3", "x4")
IPD_HEADER = ",".join(COVARIATE_NAMES + ("trt", "time", "event"))

# Default rate from the reference calibration (35% censoring, active arm,
# covariates at zero).
DEFAULT_CENSORING_RATE = 0.96


@dataclass(frozen=True)
class CovariateSpec:
    """Marginal normal covariates with exchangeable correlation.

    ``effect_modifiers`` holds the column indices of the covariates that
    interact with treatment; every covariate is prognostic.
    """

    mean: tuple[float, ...] = (0.6, 0.6, 0.6, 0.6)
    sd: tuple[float, ...] = (math.sqrt(0.2),) * 4
    pairwise_correlation: float = 0.0
    effect_modifiers: tuple[int, ...] = (0, 1)

    def __post_init__(self):
        if len(self.mean) != len(self.sd):
            raise ConfigurationError("mean and sd must have the same length")
        if any(not s > 0 for s in self.sd):
            raise ConfigurationError(f"covariate sd must be positive, got {self.sd}")
        k = len(self.mean)
        if any(not 0 <= j < k for j in self.effect_modifiers):
            raise ConfigurationError("effect modifier index out of range")
        if len(set(self.effect_modifiers)) != len(self.effect_modifiers):
            raise ConfigurationError("duplicate effect modifier index")
        # Positive definiteness is checked lazily in covariance().

    @property
    def n_covariates(self) -> int:
        return len(self.mean)

    @property
    def n_effect_modifiers(self) -> int:
        return len(self.effect_modifiers)

    def correlation(self) -> np.ndarray:
        k = self.n_covariates
        rho = self.pairwise_correlation
        return np.full((k, k), rho) + (1.0 - rho) * np.eye(k)

    def covariance(self) -> np.ndarray:
        sd = np.asarray(self.sd, dtype=float)
        return self.correlation() * np.outer(sd, sd)

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariance())
        except np.linalg.LinAlgError:
            raise ConfigurationError(
                f"correlation {self.pairwise_correlation} does not give a "
                "positive-definite correlation matrix") from None


@dataclass(frozen=True)
class OutcomeModelParams:
    weibull_inverse_scale: float = 8.5
    weibull_shape: float = 1.3
    prognostic_coefs: tuple[float, ...] = (-math.log(0.67),) * 4
    interaction_coefs: tuple[float, ...] = (-math.log(0.67),) * 2
    treatment_coef: float = math.log(0.25)
    censoring_rate: float = DEFAULT_CENSORING_RATE

    def __post_init__(self):
        for name in ("weibull_inverse_scale", "weibull_shape", "censoring_rate"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be strictly positive")

    def check_against(self, spec: CovariateSpec):
        if len(self.prognostic_coefs) != spec.n_covariates:
            raise ConfigurationError("prognostic_coefs length does not match covariates")
        if len(self.interaction_coefs) != spec.n_effect_modifiers:
            raise ConfigurationError("interaction_coefs length does not match effect modifiers")


@dataclass
class IpdTrial:
    """Individual patient data, one row per subject.

    ``covariates`` is (n, k); ``treatment`` and ``event`` are 0/1 integer
    arrays; ``time`` is the observed (possibly censored) time.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    time: np.ndarray
    event: np.ndarray
    names: tuple[str, ...] = field(default=COVARIATE_NAMES)

    def __post_init__(self):
        self.covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        self.treatment = np.asarray(self.treatment, dtype=np.int64)
        self.time = np.asarray(self.time, dtype=float)
        self.event = np.asarray(self.event, dtype=np.int64)
        n = len(self.time)
        if n == 0:
            raise ConfigurationError("trial has no records")
        if (self.covariates.shape[0] != n or len(self.treatment) != n
                or len(self.event) != n):
            raise ConfigurationError("record arrays have inconsistent lengths")
        if self.covariates.shape[1] != len(self.names):
            self.names = tuple(f"x{j + 1}" for j in range(self.covariates.shape[1]))
        if not np.all(self.time > 0):
            raise ConfigurationError("all times must be strictly positive")
        if not np.all(np.isin(self.event, (0, 1))):
            raise ConfigurationError("event indicator must be 0/1")
        if not np.all(np.isin(self.treatment, (0, 1))):
            raise ConfigurationError("treatment indicator must be 0/1")

    def __len__(self):
        return len(self.time)

    @property
    def allocation(self) -> dict[int, int]:
        return {1: int(self.treatment.sum()), 0: int((self.treatment == 0).sum())}

    def subset(self, index) -> "IpdTrial":
        return IpdTrial(self.covariates[index], self.treatment[index],
                        self.time[index], self.event[index], self.names)


@dataclass(frozen=True)
class AldSummary:
    """Aggregate data for the comparator trial: covariate means and the
    marginal B-vs-C log hazard ratio."""

    covariate_means: tuple[float, ...]
    effect: EstimateWithSE


def sample_covariates(spec: CovariateSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` covariate vectors.

    With normal marginals the Gaussian copula is a multivariate normal, so
    this is a Cholesky transform of independent standard normals.
    """
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    chol = spec.cholesky()
    z = rng.standard_normal((n, spec.n_covariates))
    return np.asarray(spec.mean, dtype=float) + z @ chol.T


def linear_predictor(x, treatment, params: OutcomeModelParams,
                     effect_modifiers: Sequence[int] = (0, 1)):
    x = np.asarray(x, dtype=float)
    b1 = np.asarray(params.prognostic_coefs, dtype=float)
    b2 = np.asarray(params.interaction_coefs, dtype=float)
    em = x[..., list(effect_modifiers)]
    return x @ b1 + (params.treatment_coef + em @ b2) * np.asarray(treatment)


def survival_time(u, x, treatment, params: OutcomeModelParams,
                  effect_modifiers: Sequence[int] = (0, 1)):
    """Weibull PH survival time by inverse transform of ``u`` in (0, 1).

    Vectorized over leading dimensions of ``u``/``x``/``treatment``.
    """
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("u must lie in the open interval (0, 1)")
    lp = linear_predictor(x, treatment, params, effect_modifiers)
    lam = params.weibull_inverse_scale
    tau = (-np.log(u) / (lam * np.exp(lp))) ** (1.0 / params.weibull_shape)
    return tau[()] if np.ndim(tau) == 0 else tau


def censoring_time(u, rate: float):
    """Exponential censoring time ``-log(u) / rate``."""
    if not rate > 0:
        raise DomainError(f"censoring rate must be positive, got {rate}")
    u = np.asarray(u, dtype=float)
    if np.any((u <= 0) | (u >= 1)):
        raise DomainError("u must lie in the open interval (0, 1)")
    c = -np.log(u) / rate
    return c[()] if np.ndim(c) == 0 else c


def _open_uniform(rng: np.random.Generator, n: int) -> np.ndarray:
    # Generator.random is on [0, 1); 0 would map to an infinite time.
    u = rng.random(n)
    u[u == 0.0] = np.finfo(float).tiny
    return u


def calibrate_censoring_rate(target_rate: float, params: OutcomeModelParams,
                             n_probe: int = 1_000_000,
                             rng: np.random.Generator | None = None,
                             bracket: tuple[float, float] = (1e-8, 1e3),
                             n_covariates: int = 4,
                             effect_modifiers: Sequence[int] = (0, 1)) -> float:
    """Censoring rate giving ``target_rate`` censoring in the active arm at
    baseline (all covariates zero).

    The same probe draws are reused for every candidate rate, so the observed
    censoring proportion is a monotone step function of the rate; Brent's
    method then locates the rate where it crosses the target.
    """
    if not 0 < target_rate < 1:
        raise DomainError("target censoring rate must lie in (0, 1)")
    if rng is None:
        rng = np.random.default_rng(0)
    x0 = np.zeros(n_covariates)
    tau = survival_time(_open_uniform(rng, n_probe), x0, 1, params, effect_modifiers)
    e_cens = -np.log(_open_uniform(rng, n_probe))

    def excess(rate):
        return np.mean(e_cens < rate * tau) - target_rate

    lo, hi = bracket
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo > 0 or f_hi < 0:
        raise CalibrationError(
            f"bracket {bracket} does not contain the target censoring rate "
            f"(observed {f_lo + target_rate:.4f} .. {f_hi + target_rate:.4f})")
    return float(optimize.brentq(excess, lo, hi, xtol=1e-10, rtol=1e-12))


def generate_trial(spec: CovariateSpec, params: OutcomeModelParams, n: int,
                   rng: np.random.Generator) -> IpdTrial:
    """Simulate one 1:1 randomized trial; the first n/2 subjects are active."""
    if n < 2 or n % 2:
        raise ConfigurationError(f"n must be a positive even number, got {n}")
    params.check_against(spec)
    x = sample_covariates(spec, n, rng)
    trt = np.zeros(n, dtype=np.int64)
    trt[: n // 2] = 1
    t_surv = survival_time(_open_uniform(rng, n), x, trt, params, spec.effect_modifiers)
    t_cens = censoring_time(_open_uniform(rng, n), params.censoring_rate)
    event = (t_surv <= t_cens).astype(np.int64)
    return IpdTrial(x, trt, np.minimum(t_surv, t_cens), event)


def aggregate_trial(trial: IpdTrial) -> AldSummary:
    """Covariate means plus an unadjusted Cox log hazard ratio for treatment."""
    effect = unadjusted_estimate(trial)
    means = tuple(float(m) for m in trial.covariates.mean(axis=0))
    return AldSummary(means, effect)


# -- serialization -----------------------------------------------------------

def write_ipd_csv(trial: IpdTrial, path) -> None:
    cols = np.column_stack([trial.covariates, trial.treatment, trial.time, trial.event])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(trial.names + ("trt", "time", "event")) + "\n")
        for row in cols:
            k = trial.covariates.shape[1]
            cells = [repr(float(v)) for v in row[:k]]
            cells += [str(int(row[k])), repr(float(row[k + 1])), str(int(row[k + 2]))]
            fh.write(",".join(cells) + "\n")


def read_ipd_csv(path) -> IpdTrial:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    for col in ("trt", "time", "event"):
        if col not in header:
            raise ConfigurationError(f"IPD file {path} lacks a '{col}' column")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cov_cols = [j for j, h in enumerate(header) if h not in ("trt", "time", "event")]
    return IpdTrial(data[:, cov_cols], data[:, header.index("trt")],
                    data[:, header.index("time")], data[:, header.index("event")],
                    tuple(header[j] for j in cov_cols))


def format_ald(ald: AldSummary, names: Sequence[str] = COVARIATE_NAMES) -> str:
    lines = [f"mean.{nm}={m!r}" for nm, m in zip(names, ald.covariate_means)]
    lines.append(f"logHR={ald.effect.value!r}")
    lines.append(f"se={ald.effect.se!r}")
    return "\n".join(lines) + "\n"


def write_ald(ald: AldSummary, path, names: Sequence[str] = COVARIATE_NAMES) -> None:
    Path(path).write_text(format_ald(ald, names))


def parse_ald(text: str) -> tuple[AldSummary, tuple[str, ...]]:
    """Parse the ``key=value`` summary format; returns the summary and the
    covariate names in file order."""
    means, names, kv = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("mean."):
            names.append(key[5:])
            means.append(float(value))
        else:
            kv[key] = float(value)
    missing = {"logHR", "se"} - kv.keys()
    if missing:
        raise ConfigurationError(f"summary lacks {sorted(missing)}")
    return AldSummary(tuple(means), EstimateWithSE(kv["logHR"], kv["se"])), tuple(names)


def read_ald(path) -> tuple[AldSummary, tuple[str, ...]]:
    return parse_ald(Path(path).read_text())
