"""Weighted Cox proportional hazards regression.

The objective is the Breslow weighted log partial likelihood

    l(beta) = sum_i d_i w_i [ x_i beta - log sum_{j in R(t_i)} w_j exp(x_j beta) ]

with R(t) = {j : t_j >= t}.  It is maximized by Newton-Raphson with step
halving.  Risk-set sums are cumulative sums over subjects sorted by
descending time, so each iteration costs O(n p^2).

The robust variance treats the weights as fixed:

    V = A^-1 (sum_i w_i^2 U_i U_i') A^-1

where A is the observed information and U_i the (unweighted) score residual
of subject i.  U_i equals the derivative of the weighted score with respect
to w_i, which is how the tests validate it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EstimationError, NoEventsError, RankDeficiencyError, SeparationError

SCORE_TOL = 1e-9
STEP_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 10
SEPARATION_BOUND = 15.0
NEWTON_STEP_TOL = 1e-6
INFO_COLLAPSE = 1e-10


@dataclass
class CoxFit:
    coefs: np.ndarray
    model_vcov: np.ndarray
    robust_vcov: np.ndarray
    loglik: float
    score: np.ndarray
    n_events: int
    converged: bool
    n_iter: int

    @property
    def model_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.model_vcov))

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.robust_vcov))


class _RiskSets:
    """Data sorted by descending time, with tie-group bookkeeping."""

    def __init__(self, time, event, X, weights):
        time = np.asarray(time, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        n = len(time)
        if X.shape[0] != n or len(event) != n:
            raise ValueError("time, event and X must have the same number of rows")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (n,):
            raise ValueError("weights must have one entry per subject")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ValueError("weights must be finite and non-negative")
        if not np.any(w > 0):
            raise ValueError("at least one weight must be positive")

        order = np.argsort(-time, kind="stable")
        self.order = order
        self.t = time[order]
        self.X = X[order]
        self.w = w[order]
        self.d = np.asarray(event, dtype=float)[order]
        self.dw = self.d * self.w
        if not np.any(self.dw > 0):
            raise NoEventsError("no (positively weighted) events; Cox model is not estimable")
        self.n_events = int(self.d.sum())

        # Tie groups: with Breslow, every subject tied at t belongs to R(t).
        change = np.r_[True, self.t[1:] != self.t[:-1]]
        self.ties = not change.all()
        if self.ties:
            gid = np.cumsum(change) - 1
            starts = np.flatnonzero(change)
            ends = np.r_[starts[1:] - 1, n - 1]
            self.group_end = ends[gid]
            self.group_start = starts[gid]

    @property
    def p(self):
        return self.X.shape[1]

    def _at_risk(self, csum):
        # csum is a cumulative sum in descending-time order
        return csum[self.group_end] if self.ties else csum

    def _from_event_side(self, values):
        # sum over positions m >= start of own tie group (times <= own time)
        suffix = np.cumsum(values[::-1], axis=0)[::-1]
        return suffix[self.group_start] if self.ties else suffix

    def evaluate(self, beta, need_info=True):
        X, w, dw = self.X, self.w, self.dw
        eta = X @ beta
        shift = eta.max()
        e = np.exp(eta - shift)
        r = w * e
        s0 = self._at_risk(np.cumsum(r))
        s1 = self._at_risk(np.cumsum(r[:, None] * X, axis=0))
        xbar = s1 / s0[:, None]
        ev = dw > 0
        loglik = float(np.sum(dw[ev] * (eta[ev] - shift - np.log(s0[ev]))))
        score = (dw[:, None] * (X - xbar)).sum(axis=0)
        if not need_info:
            return loglik, score, None, None
        haz = np.where(ev, dw / np.where(ev, s0, 1.0), 0.0)
        h = self._from_event_side(haz)
        info = (X * (r * h)[:, None]).T @ X - (xbar * dw[:, None]).T @ xbar
        info = 0.5 * (info + info.T)
        return loglik, score, info, (e, xbar, haz, h)

    def sorted_score_residuals(self, beta):
        _, _, _, (e, xbar, haz, h) = self.evaluate(beta)
        g = self._from_event_side(haz[:, None] * xbar)
        return self.d[:, None] * (self.X - xbar) - e[:, None] * (self.X * h[:, None] - g)

    def score_residuals(self, beta):
        """Per-subject score residuals, returned in the caller's row order."""
        resid = self.sorted_score_residuals(beta)
        out = np.empty_like(resid)
        out[self.order] = resid
        return out


def log_partial_likelihood(time, event, X, weights=None, beta=None) -> float:
    rs = _RiskSets(time, event, X, weights)
    beta = np.zeros(rs.p) if beta is None else np.asarray(beta, dtype=float)
    return rs.evaluate(beta, need_info=False)[0]


def score_and_information(time, event, X, weights=None, beta=None):
    """Analytic gradient and negative Hessian of the weighted log partial
    likelihood at ``beta``."""
    rs = _RiskSets(time, event, X, weights)
    beta = np.zeros(rs.p) if beta is None else np.asarray(beta, dtype=float)
    _, score, info, _ = rs.evaluate(beta)
    return score, info


def score_residuals(time, event, X, weights=None, beta=None) -> np.ndarray:
    rs = _RiskSets(time, event, X, weights)
    beta = np.zeros(rs.p) if beta is None else np.asarray(beta, dtype=float)
    return rs.score_residuals(beta)


def _check_rank(info):
    eig = np.linalg.eigvalsh(info)
    if eig[0] <= 1e-10 * max(eig[-1], 1e-300):
        raise RankDeficiencyError(
            "information matrix is singular; regressors are collinear on the risk sets")


def _check_collapse(info, scale, beta, n_iter):
    # Far out on a monotone likelihood the score and information underflow
    # together, so a vanishing score can masquerade as convergence.
    if np.linalg.eigvalsh(info)[0] < INFO_COLLAPSE * scale:
        raise SeparationError("information vanished; monotone partial likelihood",
                              beta, n_iter)


def fit_cox(time, event, X, weights=None, *, beta0=None, max_iter: int = MAX_ITER,
            score_tol: float = SCORE_TOL, step_tol: float = STEP_TOL) -> CoxFit:
    """Fit a (weighted) Cox model by Newton-Raphson.

    Parameters
    ----------
    time, event : array_like
        Observed times and 0/1 event indicators.
    X : array_like, shape (n, p)
        Regressors; no intercept (absorbed by the baseline hazard).
    weights : array_like, optional
        Non-negative observation weights. ``None`` means unit weights.

    Raises
    ------
    NoEventsError, RankDeficiencyError
        The model is not estimable.
    SeparationError
        The partial likelihood is monotone (coefficients diverge).
    """
    rs = _RiskSets(time, event, X, weights)
    beta = np.zeros(rs.p) if beta0 is None else np.array(beta0, dtype=float)
    loglik, score, info, _ = rs.evaluate(beta)
    _check_rank(info)
    info_scale = np.linalg.eigvalsh(info)[-1]

    converged = False
    n_iter = 0
    while n_iter < max_iter:
        _check_collapse(info, info_scale, beta, n_iter)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise SeparationError("singular information during Newton iterations",
                                  beta, n_iter) from None
        # A vanishing score alone is not enough: on a monotone likelihood the
        # score decays while the Newton step stays O(1).
        if np.max(np.abs(score)) < score_tol and np.max(np.abs(step)) < NEWTON_STEP_TOL:
            converged = True
            break
        n_iter += 1
        ll_floor = loglik - 1e-12 * max(1.0, abs(loglik))
        for _ in range(MAX_HALVINGS + 1):
            new_beta = beta + step
            new_ll, new_score, new_info, _ = rs.evaluate(new_beta)
            if np.isfinite(new_ll) and new_ll >= ll_floor:
                break
            step = step / 2
        else:
            raise SeparationError("step halving failed to increase the partial likelihood",
                                  beta, n_iter)
        beta, loglik, score, info = new_beta, new_ll, new_score, new_info
        if np.max(np.abs(beta)) > SEPARATION_BOUND:
            raise SeparationError(
                f"coefficients diverging (|beta| > {SEPARATION_BOUND:g}); "
                "monotone partial likelihood", beta, n_iter)
        if np.max(np.abs(step)) < step_tol:
            converged = True
            break
    if not converged:
        raise EstimationError(f"Newton-Raphson did not converge in {max_iter} iterations")
    _check_collapse(info, info_scale, beta, n_iter)

    try:
        model_vcov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("information matrix is singular at the solution") from None
    model_vcov = 0.5 * (model_vcov + model_vcov.T)
    resid = rs.sorted_score_residuals(beta) * rs.w[:, None]
    meat = resid.T @ resid
    robust_vcov = model_vcov @ meat @ model_vcov
    robust_vcov = 0.5 * (robust_vcov + robust_vcov.T)
    return CoxFit(beta, model_vcov, robust_vcov, loglik, score, rs.n_events, True, n_iter)
