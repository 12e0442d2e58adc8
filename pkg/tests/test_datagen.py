import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, optimize

from popadjust.datagen import (COVARIATE_NAMES, CovariateSpec, IpdTrial, OutcomeModelParams,
                               aggregate_trial, calibrate_censoring_rate, censoring_time,
                               format_ald, generate_trial, linear_predictor, parse_ald,
                               read_ald, read_ipd_csv, sample_covariates, survival_time,
                               write_ald, write_ipd_csv)
from popadjust.errors import (CalibrationError, ConfigurationError, DomainError,
                              EstimationError)

BASE = OutcomeModelParams()


def _null_params(**kw):
    return OutcomeModelParams(prognostic_coefs=(0.0,) * 4, interaction_coefs=(0.0, 0.0), **kw)


class TestCovariates:
    def test_independent_moments(self):
        spec = CovariateSpec(mean=(0.6,) * 4, sd=(0.2,) * 4, pairwise_correlation=0.0)
        x = sample_covariates(spec, 100_000, np.random.default_rng(1))
        assert np.all(np.abs(x.mean(axis=0) - 0.6) < 0.005)
        corr = np.corrcoef(x, rowvar=False)
        assert np.all(np.abs(corr[np.triu_indices(4, 1)]) < 0.02)

    def test_correlated_moments(self):
        spec = CovariateSpec(pairwise_correlation=0.35)
        x = sample_covariates(spec, 100_000, np.random.default_rng(2))
        corr = np.corrcoef(x, rowvar=False)
        assert np.all(np.abs(corr[np.triu_indices(4, 1)] - 0.35) < 0.02)
        assert np.allclose(x.std(axis=0), math.sqrt(0.2), atol=0.01)

    @pytest.mark.parametrize("kwargs", [
        dict(sd=(0.0, 0.2, 0.2, 0.2)),
        dict(pairwise_correlation=-0.5),
        dict(pairwise_correlation=1.0),
    ])
    def test_rejects_bad_spec(self, kwargs):
        with pytest.raises(ConfigurationError):
            CovariateSpec(**kwargs).cholesky()


class TestSurvivalTime:
    def test_closed_form_control(self):
        # hand value: ln(8.5) / 1.3 = 1.646205, exp(-1.646205) = 0.192780
        assert survival_time(math.exp(-1), np.zeros(4), 0, BASE) == pytest.approx(0.1928, abs=5e-5)
        assert survival_time(math.exp(-1), np.zeros(4), 0, BASE) == pytest.approx(
            (1 / 8.5) ** (1 / 1.3), rel=1e-14)

    def test_closed_form_active(self):
        t = survival_time(math.exp(-1), np.zeros(4), 1, BASE)
        # hand value: ln(2.125) / 1.3 = 0.579824, exp(-0.579824) = 0.559997
        assert t == pytest.approx(0.559997, abs=1e-6)
        assert t == pytest.approx((1 / (8.5 * 0.25)) ** (1 / 1.3), rel=1e-14)

    def test_larger_lp_gives_shorter_time(self):
        x_lo = np.zeros(4)
        x_hi = np.full(4, 0.5)
        assert survival_time(0.3, x_hi, 0, BASE) < survival_time(0.3, x_lo, 0, BASE)

    @pytest.mark.parametrize("u", [0.0, 1.0, -0.1, 1.5])
    def test_u_outside_open_interval(self, u):
        with pytest.raises(DomainError):
            survival_time(u, np.zeros(4), 0, BASE)

    @settings(max_examples=200, deadline=None)
    @given(u=st.floats(1e-12, 1 - 1e-12),
           x=st.lists(st.floats(-2, 2), min_size=4, max_size=4),
           trt=st.integers(0, 1))
    def test_inverse_transform_round_trip(self, u, x, trt):
        x = np.array(x)
        tau = survival_time(u, x, trt, BASE)
        lp = linear_predictor(x[None, :], np.array([trt]), BASE, (0, 1))[0]
        u_back = math.exp(-BASE.weibull_inverse_scale * math.exp(lp)
                          * tau ** BASE.weibull_shape)
        assert u_back == pytest.approx(u, abs=1e-12)

    def test_decreasing_in_scale_by_finite_difference(self):
        h = 1e-6
        for lam in (1.0, 8.5, 20.0):
            lo = survival_time(0.4, np.zeros(4), 0, OutcomeModelParams(weibull_inverse_scale=lam))
            hi = survival_time(0.4, np.zeros(4), 0,
                               OutcomeModelParams(weibull_inverse_scale=lam + h))
            assert (hi - lo) / h < 0


class TestCensoringTime:
    @pytest.mark.parametrize("u, rate", [(math.exp(-0.96), 0.96), (math.exp(-1), 1.0)])
    def test_identity(self, u, rate):
        assert censoring_time(u, rate) == pytest.approx(1.0, rel=1e-14)

    def test_zero_rate(self):
        with pytest.raises(DomainError):
            censoring_time(0.5, 0.0)


def _quadrature_rate(target, params=BASE):
    """Censoring rate solving P(C < T) = target for exponential C and the
    baseline active-arm Weibull T, by numerical integration."""
    lam = params.weibull_inverse_scale * math.exp(params.treatment_coef)
    nu = params.weibull_shape

    def p_censored(rate):
        f = lambda t: rate * math.exp(-rate * t) * math.exp(-lam * t ** nu)
        return integrate.quad(f, 0, math.inf, epsabs=1e-13)[0]

    return optimize.brentq(lambda r: p_censored(r) - target, 1e-6, 50, xtol=1e-12)


class TestCalibration:
    def test_matches_quadrature_oracle(self):
        oracle = _quadrature_rate(0.35)
        for seed in (0, 1):
            rate = calibrate_censoring_rate(0.35, BASE, rng=np.random.default_rng(seed))
            assert rate == pytest.approx(oracle, abs=0.01)

    def test_close_to_default_rate(self):
        rate = calibrate_censoring_rate(0.35, BASE, rng=np.random.default_rng(99))
        assert abs(rate - OutcomeModelParams().censoring_rate) < 0.05

    def test_monotone_toward_zero(self):
        rng = lambda: np.random.default_rng(3)
        rates = [calibrate_censoring_rate(t, BASE, n_probe=200_000, rng=rng())
                 for t in (0.35, 0.1, 0.01, 0.001)]
        assert all(a > b for a, b in zip(rates, rates[1:]))
        assert rates[-1] < 0.01

    def test_bad_bracket(self):
        with pytest.raises(CalibrationError):
            calibrate_censoring_rate(0.35, BASE, n_probe=10_000, bracket=(5.0, 10.0))

    @pytest.mark.parametrize("target", [0.0, 1.0])
    def test_target_domain(self, target):
        with pytest.raises(DomainError):
            calibrate_censoring_rate(target, BASE, n_probe=100)


class TestGenerateTrial:
    def test_censoring_fraction_at_baseline(self):
        rate = calibrate_censoring_rate(0.35, BASE, rng=np.random.default_rng(4))
        spec = CovariateSpec(mean=(0.0,) * 4)
        params = OutcomeModelParams(prognostic_coefs=(0.0,) * 4, interaction_coefs=(0.0, 0.0),
                                    censoring_rate=rate)
        trial = generate_trial(spec, params, 100_000, np.random.default_rng(5))
        active = trial.treatment == 1
        assert abs(1 - trial.event[active].mean() - 0.35) < 0.03

    def test_record_types(self):
        trial = generate_trial(CovariateSpec(), BASE, 300, np.random.default_rng(6))
        assert np.all(trial.time > 0)
        assert set(np.unique(trial.event)) <= {0, 1}
        assert trial.allocation == {1: 150, 0: 150}

    def test_vanishing_censoring(self):
        params = OutcomeModelParams(censoring_rate=1e-9)
        trial = generate_trial(CovariateSpec(), params, 2000, np.random.default_rng(7))
        assert trial.event.mean() > 0.999

    def test_censoring_independent_of_covariates(self):
        # replay the generator's draw order to recover the latent censoring times
        spec, n = CovariateSpec(), 100_000
        trial = generate_trial(spec, BASE, n, np.random.default_rng(8))
        rng = np.random.default_rng(8)
        x = sample_covariates(spec, n, rng)
        rng.random(n)
        c = censoring_time(rng.random(n), BASE.censoring_rate)
        assert np.array_equal(x, trial.covariates)
        assert np.all(trial.time <= c)
        assert np.array_equal(trial.event == 0, trial.time == c)
        for j in range(4):
            assert abs(np.corrcoef(x[:, j], c)[0, 1]) < 0.02

    def test_deterministic(self):
        a = generate_trial(CovariateSpec(), BASE, 200, np.random.default_rng(10))
        b = generate_trial(CovariateSpec(), BASE, 200, np.random.default_rng(10))
        for f in ("covariates", "treatment", "time", "event"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    @pytest.mark.parametrize("n", [0, 3, 151])
    def test_odd_or_empty(self, n):
        with pytest.raises(ConfigurationError):
            generate_trial(CovariateSpec(), BASE, n, np.random.default_rng(0))


class TestAggregate:
    def test_means_exact(self):
        trial = generate_trial(CovariateSpec(), BASE, 400, np.random.default_rng(11))
        ald = aggregate_trial(trial)
        assert ald.covariate_means == tuple(trial.covariates.mean(axis=0))

    def test_null_effect_consistency(self):
        params = OutcomeModelParams(treatment_coef=0.0, interaction_coefs=(0.0, 0.0))
        trial = generate_trial(CovariateSpec(), params, 100_000, np.random.default_rng(12))
        eff = aggregate_trial(trial).effect
        assert abs(eff.value) < 3 * eff.se

    def test_zero_events(self):
        trial = IpdTrial(np.zeros((4, 4)), [1, 1, 0, 0], [1.0, 2.0, 3.0, 4.0], [0, 0, 0, 0])
        with pytest.raises(EstimationError):
            aggregate_trial(trial)


class TestSerialization:
    def test_ipd_round_trip(self, tmp_path):
        trial = generate_trial(CovariateSpec(), BASE, 50, np.random.default_rng(13))
        write_ipd_csv(trial, tmp_path / "ipd.csv")
        back = read_ipd_csv(tmp_path / "ipd.csv")
        assert back.names == COVARIATE_NAMES
        for f in ("covariates", "treatment", "time", "event"):
            assert np.array_equal(getattr(trial, f), getattr(back, f))

    def test_ald_round_trip(self, tmp_path):
        trial = generate_trial(CovariateSpec(), BASE, 600, np.random.default_rng(14))
        ald = aggregate_trial(trial)
        write_ald(ald, tmp_path / "bc.txt")
        back, names = read_ald(tmp_path / "bc.txt")
        assert back == ald
        assert names == COVARIATE_NAMES

    def test_ald_format(self):
        text = "# comparator\nmean.x1=0.5\nmean.x2 = 0.25\nlogHR=-0.7\nse=0.1\n"
        ald, names = parse_ald(text)
        assert names == ("x1", "x2")
        assert ald.covariate_means == (0.5, 0.25)
        assert (ald.effect.value, ald.effect.se) == (-0.7, 0.1)
        assert parse_ald(format_ald(ald, names))[0] == ald

    @pytest.mark.parametrize("text", ["mean.x1=0.5\nse=0.1\n", "logHR -0.7\n"])
    def test_ald_malformed(self, text):
        with pytest.raises(ConfigurationError):
            parse_ald(text)


def test_params_must_match_spec():
    with pytest.raises(ConfigurationError):
        generate_trial(CovariateSpec(), _null_params().__class__(prognostic_coefs=(0.1,) * 3),
                       10, np.random.default_rng(0))
