"""Simulated treatment comparison (plug-in outcome regression).

A Cox model is fitted to the IPD with regressors

    x_1..x_K (prognostic, uncentered), T, T * (x_em - xbar_BC_em)

so the treatment coefficient is the A-vs-C log hazard ratio for a subject
whose effect modifiers sit at the comparator-trial means.  This is a
*conditional* effect; with a non-collapsible measure such as the hazard
ratio it generally differs from the marginal effect the comparator trial
reports.

The Cox model has no intercept, so centering the purely prognostic
covariates would only shift the (unestimated) baseline hazard and leaves
every coefficient unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import coxmodel
from .datagen import AldSummary, IpdTrial
from .errors import ConfigurationError
from .itc import EstimateWithSE

ESTIMATE_LABEL = "conditional log HR (A vs C, BC-centered)"


@dataclass(frozen=True)
class StcModelSpec:
    prognostic_columns: tuple[int, ...] = (0, 1, 2, 3)
    effect_modifier_columns: tuple[int, ...] = (0, 1)
    center_effect_modifiers_only: bool = True

    def validate(self, n_covariates: int):
        cols = self.prognostic_columns + self.effect_modifier_columns
        if any(not 0 <= j < n_covariates for j in cols):
            raise ConfigurationError("STC column index out of range")
        if len(set(self.prognostic_columns)) != len(self.prognostic_columns):
            raise ConfigurationError("duplicate prognostic column")


@dataclass
class StcResult:
    estimate: EstimateWithSE
    fit: coxmodel.CoxFit
    regressor_names: tuple[str, ...]


def design_matrix(ipd: IpdTrial, centers: Sequence[float], spec: StcModelSpec,
                  prognostic_centers: Sequence[float] | None = None):
    """Regressor matrix and column names; the treatment column is at index
    ``len(spec.prognostic_columns)``."""
    spec.validate(ipd.covariates.shape[1])
    x = ipd.covariates
    trt = ipd.treatment.astype(float)
    prog = x[:, list(spec.prognostic_columns)]
    if prognostic_centers is not None:
        prog = prog - np.asarray(prognostic_centers, dtype=float)
    em = x[:, list(spec.effect_modifier_columns)] - np.asarray(centers, dtype=float)
    X = np.column_stack([prog, trt, trt[:, None] * em])
    names = tuple(ipd.names[j] for j in spec.prognostic_columns) + ("trt",) + tuple(
        f"trt:{ipd.names[j]}" for j in spec.effect_modifier_columns)
    return X, names


def stc_estimate(ipd: IpdTrial, targets: AldSummary,
                 spec: StcModelSpec = StcModelSpec()) -> StcResult:
    """Treatment coefficient of the BC-centered interaction Cox model, with
    its model-based SE."""
    means = targets.covariate_means
    centers = []
    for j in spec.effect_modifier_columns:
        if j >= len(means):
            raise ConfigurationError(f"no comparator mean for effect modifier column {j}")
        centers.append(means[j])
    prog_centers = None
    if not spec.center_effect_modifiers_only:
        prog_centers = [means[j] for j in spec.prognostic_columns]
    X, names = design_matrix(ipd, centers, spec, prog_centers)
    fit = coxmodel.fit_cox(ipd.time, ipd.event, X)
    k = len(spec.prognostic_columns)
    est = EstimateWithSE(float(fit.coefs[k]), float(np.sqrt(fit.model_vcov[k, k])))
    return StcResult(est, fit, names)
