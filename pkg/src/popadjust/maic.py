"""Matching-adjusted indirect comparison.

Weights are w_i = exp(z_i a), where z_i are the IPD effect modifiers centered
on the comparator trial's published means and ``a`` minimizes

    Q(a) = sum_i exp(z_i a).

Q is convex and its gradient sum_i z_i w_i vanishes exactly when the weighted
effect-modifier means equal the targets.  The intercept of the trial-selection
model cancels after normalization, so it is never estimated.

Newton steps are taken on log Q instead of Q: same minimizer, but the
gradient is the weighted mean of z (the balance error itself) and the
Hessian is the weighted covariance of z, so the iteration does not depend
on the overall scale of the weights.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from . import coxmodel
from .datagen import AldSummary, IpdTrial
from .errors import ConfigurationError, DomainError, EstimationError, WeightEstimationError
from .itc import EstimateWithSE

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 500
ALPHA_BOUND = 50.0
STALL_LIMIT = 20


@dataclass
class WeightSolution:
    alpha1: np.ndarray
    weights: np.ndarray
    ess: float
    objective_value: float
    n_iter: int = 0


@dataclass
class MaicResult:
    estimate: EstimateWithSE
    weights: WeightSolution
    variance_method: str
    n_bootstrap_failed: int = 0


def center_effect_modifiers(ipd: IpdTrial, targets: AldSummary | Sequence[float],
                            effect_modifiers: Sequence[int] = (0, 1)) -> np.ndarray:
    """IPD effect-modifier columns minus the comparator-trial means.

    ``targets`` may be a summary (indexed by covariate column) or a plain
    sequence of covariate means.  Means of covariates that are not effect
    modifiers are ignored.
    """
    means = targets.covariate_means if isinstance(targets, AldSummary) else targets
    means = list(means)
    cols = list(effect_modifiers)
    missing = [j for j in cols if j >= len(means) or means[j] is None
               or not np.isfinite(means[j])]
    if missing:
        raise ConfigurationError(
            f"no comparator mean for effect modifier column(s) {missing}")
    return ipd.covariates[:, cols] - np.asarray([means[j] for j in cols], dtype=float)


def objective(centered, alpha1) -> float:
    return float(np.exp(np.asarray(centered) @ np.asarray(alpha1)).sum())


def objective_gradient(centered, alpha1) -> np.ndarray:
    z = np.asarray(centered, dtype=float)
    return z.T @ np.exp(z @ np.asarray(alpha1, dtype=float))


def ess(weights) -> float:
    """Approximate effective sample size (sum w)^2 / sum w^2."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or not np.any(w > 0):
        raise DomainError("effective sample size needs at least one positive weight")
    # rescaling by the max keeps the squares finite
    w = w / w.max()
    return float(w.sum() ** 2 / (w ** 2).sum())


def _softmax_moments(z, alpha):
    s = z @ alpha
    lse = logsumexp(s)
    p = np.exp(s - lse)
    mean = p @ z
    dev = z - mean
    cov = (dev * p[:, None]).T @ dev
    return lse, mean, cov


def _no_solution(alpha, n_iter):
    return WeightEstimationError(
        "no finite solution: target outside covariate support "
        f"(alpha reached {np.array2string(np.asarray(alpha), precision=3)} "
        f"after {n_iter} iterations)")


def _bfgs(z, alpha):
    res = optimize.minimize(lambda a: logsumexp(z @ a), alpha,
                            jac=lambda a: _softmax_moments(z, a)[1],
                            method="BFGS", options={"gtol": 1e-13, "maxiter": MAX_ITER})
    return res.x


def estimate_weights(centered, tol: float = GRAD_TOL) -> WeightSolution:
    """Method-of-moments weights for an already-centered effect-modifier matrix.

    Raises
    ------
    WeightEstimationError
        If the targets (the origin, after centering) are not inside the open
        convex hull of the rows of ``centered``; Q then has no finite minimizer.
    """
    z = np.asarray(centered, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] == 0:
        raise DomainError("centered effect-modifier matrix is empty")
    p = z.shape[1]
    alpha = np.zeros(p)
    best_grad = np.inf
    stall = 0
    converged = False
    n_iter = 0
    lse, mean, cov = _softmax_moments(z, alpha)
    while n_iter < MAX_ITER:
        n_iter += 1
        try:
            step = -np.linalg.solve(cov, mean)
        except np.linalg.LinAlgError:
            alpha = _bfgs(z, alpha)
            lse, mean, cov = _softmax_moments(z, alpha)
            break
        # step halving keeps every iterate a descent step on log Q
        t = 1.0
        for _ in range(30):
            new_alpha = alpha + t * step
            new_lse, new_mean, new_cov = _softmax_moments(z, new_alpha)
            if new_lse <= lse + 1e-14 * max(1.0, abs(lse)):
                break
            t /= 2
        alpha, lse, mean, cov = new_alpha, new_lse, new_mean, new_cov
        if np.max(np.abs(alpha)) > ALPHA_BOUND:
            raise _no_solution(alpha, n_iter)
        grad = np.max(np.abs(objective_gradient(z, alpha)))
        # A converged interior solution has both a vanishing gradient and a
        # vanishing Newton step; on the support boundary the gradient decays
        # geometrically while the steps do not.
        if grad < tol and np.max(np.abs(t * step)) < 1e-6:
            converged = True
            break
        if grad < best_grad * (1 - 1e-12):
            best_grad, stall = grad, 0
        else:
            stall += 1
            if stall >= STALL_LIMIT:
                break

    grad = np.max(np.abs(objective_gradient(z, alpha)))
    if not converged and not grad < tol:
        raise _no_solution(alpha, n_iter)
    weights = np.exp(z @ alpha)
    return WeightSolution(alpha, weights, ess(weights), float(weights.sum()), n_iter)


def weighted_mean_outcome(ipd: IpdTrial, weights, arm: int, outcome=None) -> float:
    """Weighted mean of an outcome within one arm (observed time by default)."""
    w = np.asarray(weights, dtype=float)
    y = ipd.time if outcome is None else np.asarray(outcome, dtype=float)
    mask = ipd.treatment == arm
    if not mask.any():
        raise DomainError(f"arm {arm} has no subjects")
    wa = w[mask]
    if not wa.sum() > 0:
        raise DomainError(f"weights in arm {arm} sum to zero")
    return float(np.sum(y[mask] * wa) / wa.sum())


def balance_table(ipd: IpdTrial, targets: AldSummary, weights,
                  effect_modifiers: Sequence[int] = (0, 1)):
    """Rows of (column, unweighted IPD mean, weighted IPD mean, target mean)."""
    w = np.asarray(weights, dtype=float)
    rows = []
    for j in effect_modifiers:
        x = ipd.covariates[:, j]
        rows.append((j, float(x.mean()), float(np.sum(w * x) / w.sum()),
                     float(targets.covariate_means[j])))
    return rows


def _weighted_treatment_fit(ipd: IpdTrial, weights):
    return coxmodel.fit_cox(ipd.time, ipd.event, ipd.treatment[:, None], weights)


def maic_estimate(ipd: IpdTrial, targets: AldSummary,
                  effect_modifiers: Sequence[int] = (0, 1),
                  variance_method: str = "sandwich", n_bootstrap: int = 1000,
                  rng: np.random.Generator | None = None) -> MaicResult:
    """Marginal A-vs-C log hazard ratio in the comparator population.

    Only the effect modifiers are balanced, over both arms combined.  The SE
    is the robust sandwich (weights treated as fixed) or, with
    ``variance_method="bootstrap"``, the SD of estimates over ``n_bootstrap``
    resamples of subjects, re-estimating the weights inside each resample.
    """
    if variance_method not in ("sandwich", "bootstrap"):
        raise ConfigurationError(f"unknown variance method {variance_method!r}")
    z = center_effect_modifiers(ipd, targets, effect_modifiers)
    sol = estimate_weights(z)
    fit = _weighted_treatment_fit(ipd, sol.weights)
    beta = float(fit.coefs[0])
    n_failed = 0
    if variance_method == "sandwich":
        se = float(np.sqrt(fit.robust_vcov[0, 0]))
    else:
        if n_bootstrap < 2:
            raise ConfigurationError("bootstrap needs at least 2 resamples")
        if rng is None:
            rng = np.random.default_rng()
        n = len(ipd)
        draws = []
        for _ in range(n_bootstrap):
            idx = rng.integers(0, n, n)
            boot = ipd.subset(idx)
            try:
                bsol = estimate_weights(z[idx])
                draws.append(_weighted_treatment_fit(boot, bsol.weights).coefs[0])
            except EstimationError:
                n_failed += 1
        if len(draws) < 2:
            raise EstimationError("fewer than two bootstrap resamples could be fitted")
        if n_failed:
            log.info("%d of %d bootstrap resamples failed and were dropped",
                     n_failed, n_bootstrap)
        se = float(np.std(draws, ddof=1))
    return MaicResult(EstimateWithSE(beta, se), sol, variance_method, n_failed)
