"""Anchored indirect comparisons on the log hazard ratio scale."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

from scipy import stats

from .errors import DomainError

if TYPE_CHECKING:
    from .datagen import AldSummary, IpdTrial


@dataclass(frozen=True)
class EstimateWithSE:
    value: float
    se: float

    def __post_init__(self):
        if not (math.isfinite(self.se) and self.se > 0):
            raise DomainError(f"standard error must be finite and positive, got {self.se}")

    @property
    def variance(self) -> float:
        return self.se ** 2


@dataclass(frozen=True)
class IntervalEstimate:
    point: float
    lower: float
    upper: float
    level: float = 0.95


def z_quantile(level: float = 0.95) -> float:
    """Two-sided standard normal critical value (1.959964 at 95%)."""
    if not 0 < level < 1:
        raise DomainError(f"confidence level must lie in (0, 1), got {level}")
    return float(stats.norm.ppf(0.5 + level / 2))


def indirect_comparison(ac: EstimateWithSE, bc: EstimateWithSE) -> EstimateWithSE:
    """A vs B through the common comparator C.

    The two trials are independent, so the variances add with no covariance
    term.
    """
    return EstimateWithSE(ac.value - bc.value, math.sqrt(ac.se ** 2 + bc.se ** 2))


def confidence_interval(est: EstimateWithSE, level: float = 0.95) -> IntervalEstimate:
    half = z_quantile(level) * est.se
    return IntervalEstimate(est.value, est.value - half, est.value + half, level)


def unadjusted_estimate(ipd: IpdTrial) -> EstimateWithSE:
    """Treatment-only Cox fit on the IPD: the marginal A-vs-C log HR in the
    IPD trial's own population, with model-based SE."""
    from .coxmodel import fit_cox

    fit = fit_cox(ipd.time, ipd.event, ipd.treatment[:, None])
    return EstimateWithSE(float(fit.coefs[0]), float(math.sqrt(fit.model_vcov[0, 0])))


def bucher_estimate(ipd: IpdTrial, bc: AldSummary) -> EstimateWithSE:
    """Standard (unadjusted) anchored indirect comparison of A vs B."""
    return indirect_comparison(unadjusted_estimate(ipd), bc.effect)
