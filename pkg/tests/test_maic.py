import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popadjust.coxmodel import fit_cox
from popadjust.datagen import (AldSummary, CovariateSpec, IpdTrial, OutcomeModelParams,
                               aggregate_trial, generate_trial)
from popadjust.errors import ConfigurationError, WeightEstimationError
from popadjust.itc import EstimateWithSE
from popadjust.maic import (balance_table, center_effect_modifiers, ess, estimate_weights,
                            maic_estimate, objective, objective_gradient, weighted_mean_outcome)
from popadjust.simengine import build_grid, simulate_replicate_data

DUMMY_EFFECT = EstimateWithSE(0.0, 0.1)


def _trial(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = x.shape[0]
    return IpdTrial(x, np.arange(n) % 2, np.arange(1, n + 1, dtype=float), np.ones(n, dtype=int))


class TestCentering:
    def test_shift(self):
        ipd = _trial(np.full((4, 4), 0.45))
        z = center_effect_modifiers(ipd, AldSummary((0.6,) * 4, DUMMY_EFFECT))
        assert z.shape == (4, 2)
        assert np.allclose(z.mean(axis=0), -0.15, atol=1e-15)

    def test_equal_means(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(10, 4))
        z = center_effect_modifiers(_trial(x), tuple(x.mean(axis=0)))
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-15)

    def test_non_modifier_target_ignored(self):
        x = np.ones((4, 4))
        a = center_effect_modifiers(_trial(x), (0.5, 0.5, 99.0, -99.0))
        b = center_effect_modifiers(_trial(x), (0.5, 0.5, 0.0, 0.0))
        assert np.array_equal(a, b)

    def test_missing_target(self):
        with pytest.raises(ConfigurationError):
            center_effect_modifiers(_trial(np.ones((4, 4))), (0.5,))


class TestEstimateWeights:
    def test_closed_form_two_points(self):
        sol = estimate_weights(np.array([[-1.0], [2.0]]))
        # e^{3a} = 1/2
        assert sol.alpha1[0] == pytest.approx(-math.log(2) / 3, abs=1e-10)
        assert sol.alpha1[0] == pytest.approx(-0.2310, abs=5e-5)
        assert sol.weights == pytest.approx([1.2599, 0.6300], abs=5e-5)
        assert np.dot(sol.weights, [-1.0, 2.0]) == pytest.approx(0.0, abs=1e-12)

    def test_symmetric_sample(self):
        sol = estimate_weights(np.array([[-1.0], [1.0]]))
        assert sol.alpha1[0] == 0.0
        assert np.array_equal(sol.weights, [1.0, 1.0])
        assert sol.ess == 2.0

    @pytest.mark.parametrize("z", [[[0.0], [1.0]], [[0.5], [1.0], [2.0]],
                                   [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]])
    def test_target_on_or_outside_hull(self, z):
        with pytest.raises(WeightEstimationError, match="no finite solution"):
            estimate_weights(np.array(z))

    def test_gradient_is_objective_derivative(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(30, 2))
        a = np.array([0.3, -0.4])
        h = 1e-6
        fd = [(objective(z, a + h * e) - objective(z, a - h * e)) / (2 * h) for e in np.eye(2)]
        assert np.allclose(objective_gradient(z, a), fd, rtol=1e-7)

    def test_minimizes_objective(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(50, 2)) + 0.2
        sol = estimate_weights(z)
        for d in rng.normal(size=(20, 2)):
            assert objective(z, sol.alpha1 + 1e-3 * d) >= objective(z, sol.alpha1)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), n=st.integers(3, 60), p=st.integers(1, 3))
    def test_balance_and_row_order(self, seed, n, p):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(max(n, p + 2), p))
        target = rng.dirichlet(np.ones(len(x))) @ x
        z = x - target
        sol = estimate_weights(z)
        w = sol.weights
        assert np.all(np.abs(w @ x / w.sum() - target) < 1e-8)
        perm = rng.permutation(len(x))
        sol_p = estimate_weights(z[perm])
        assert np.allclose(sol_p.alpha1, sol.alpha1, atol=1e-8)
        assert np.allclose(sol_p.weights, w[perm], rtol=1e-8)


class TestEss:
    @pytest.mark.parametrize("w, expected", [((1, 1, 1, 1), 4.0), ((1, 3), 1.6)])
    def test_examples(self, w, expected):
        assert ess(w) == pytest.approx(expected, rel=1e-15)

    @pytest.mark.parametrize("c", [1e-300, 1e-5, 2.5, 1e200])
    def test_scale_invariance(self, c):
        assert ess(np.full(7, c)) == pytest.approx(7.0, rel=1e-14)


class TestWeightedMeanOutcome:
    def setup_method(self):
        self.ipd = generate_trial(CovariateSpec(), OutcomeModelParams(), 40,
                                  np.random.default_rng(3))

    def test_unit_weights(self):
        arm = self.ipd.treatment == 1
        assert weighted_mean_outcome(self.ipd, np.ones(40), 1) == pytest.approx(
            self.ipd.time[arm].mean(), rel=1e-14)

    def test_single_subject(self):
        w = np.zeros(40)
        w[5] = 1.0
        arm = int(self.ipd.treatment[5])
        assert weighted_mean_outcome(self.ipd, w, arm) == self.ipd.time[5]

    def test_doubling(self):
        w = np.random.default_rng(4).uniform(size=40)
        assert weighted_mean_outcome(self.ipd, 2 * w, 0) == pytest.approx(
            weighted_mean_outcome(self.ipd, w, 0), rel=1e-14)


class TestMaicEstimate:
    def test_balanced_means_reduce_to_unweighted_fit(self):
        ipd = generate_trial(CovariateSpec(), OutcomeModelParams(), 200,
                             np.random.default_rng(5))
        targets = AldSummary(tuple(ipd.covariates.mean(axis=0)), DUMMY_EFFECT)
        res = maic_estimate(ipd, targets)
        ref = fit_cox(ipd.time, ipd.event, ipd.treatment[:, None])
        assert np.allclose(res.weights.weights, 1.0, atol=1e-12)
        assert res.estimate.value == pytest.approx(ref.coefs[0], abs=1e-10)

    def test_balance_table(self):
        sid = 3
        scenario = build_grid(lambda s: s.id == sid)[0]
        ac, bc_ipd = simulate_replicate_data(scenario, 1, 11)
        bc = aggregate_trial(bc_ipd)
        res = maic_estimate(ac, bc)
        for j, raw, wtd, tgt in balance_table(ac, bc, res.weights.weights):
            assert abs(wtd - tgt) < 1e-8
            assert abs(raw - tgt) > 0.05

    def test_bootstrap_agrees_with_sandwich(self):
        spec = CovariateSpec()
        ipd = generate_trial(spec, OutcomeModelParams(), 600, np.random.default_rng(6))
        targets = AldSummary((0.62, 0.58, 0.6, 0.6), DUMMY_EFFECT)
        sand = maic_estimate(ipd, targets)
        boot = maic_estimate(ipd, targets, variance_method="bootstrap", n_bootstrap=1000,
                             rng=np.random.default_rng(7))
        assert boot.estimate.value == sand.estimate.value
        assert boot.estimate.se == pytest.approx(sand.estimate.se, rel=0.15)

    def test_unknown_variance_method(self):
        ipd = generate_trial(CovariateSpec(), OutcomeModelParams(), 20, np.random.default_rng(8))
        with pytest.raises(ConfigurationError):
            maic_estimate(ipd, AldSummary((0.6,) * 4, DUMMY_EFFECT), variance_method="jackknife")


class TestEssDesignProperties:
    """ESS behaviour across the study's overlap and correlation levels."""

    @staticmethod
    def _mean_ess(sid, reps, seed=21):
        scenario = build_grid(lambda s: s.id == sid)[0]
        values = []
        for rep in range(1, reps + 1):
            ac, _ = simulate_replicate_data(scenario, rep, seed)
            z = ac.covariates[:, :2] - 0.6
            values.append(estimate_weights(z).ess)
        return float(np.mean(values))

    def test_decreases_with_imbalance(self):
        # scenarios 1, 2, 3 differ only in the AC covariate mean (0.45, 0.30, 0.15)
        ess_by_overlap = [self._mean_ess(sid, 100) for sid in (1, 2, 3)]
        assert ess_by_overlap[0] > ess_by_overlap[1] > ess_by_overlap[2]

    def test_correlation_does_not_reduce(self):
        # scenarios 2 and 5 share everything but the correlation (0 vs 0.35)
        assert self._mean_ess(5, 500) >= self._mean_ess(2, 500)
