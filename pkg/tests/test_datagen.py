import math

import numpy as np
import pytest
from scipy import special

from collider_lab.datagen import (CALIBRATION_TOL, SeedSpec, calibrate_selection, gen_collider, gen_exposure,
                                  gen_outcome, normals, poisson_inverse_cdf, quartile_thresholds, simulate,
                                  uniforms)
from collider_lab.models import (ColliderModel, ExposureSpec, NumericalError, OutcomeModel,
                                 ValidationError)

N = 10**6
SEED = SeedSpec(2024, "test")


def test_bernoulli_exposure_mean():
    x = gen_exposure(ExposureSpec.bernoulli(0.3), N, SEED)
    assert set(np.unique(x)) <= {0.0, 1.0}
    assert abs(x.mean() - 0.3) < 0.0015


def test_single_draw_repeatable():
    spec = ExposureSpec.bernoulli(0.5)
    assert gen_exposure(spec, 1, SEED)[0] == gen_exposure(spec, 1, SEED)[0]


def test_normal_exposure_moments():
    x = gen_exposure(ExposureSpec.normal(0, 1), N, SEED)
    assert abs(x.mean()) < 0.003
    assert abs(x.std() - 1) < 0.003


def test_invalid_n():
    with pytest.raises(ValidationError):
        gen_exposure(ExposureSpec.bernoulli(0.3), 0, SEED)


def test_logistic_outcome_at_zero():
    y = gen_outcome(OutcomeModel.logistic(0.0, 0.2), np.zeros(N), SEED)
    assert set(np.unique(y)) <= {0.0, 1.0}
    assert abs(y.mean() - 0.5) < 0.0015


def test_linear_outcome_moments():
    y = gen_outcome(OutcomeModel.linear(0.0, 0.2, 0.5), np.ones(N), SEED)
    assert abs(y.mean() - 0.2) < 0.0015
    assert abs(y.std() - 0.5) < 0.0011


def test_poisson_outcome_mean():
    y = gen_outcome(OutcomeModel.poisson(0.0, 0.2), np.ones(N), SEED)
    assert np.all(y == np.floor(y)) and y.min() >= 0
    assert abs(y.mean() - math.exp(0.2)) < 0.0033


def test_poisson_overflow():
    with pytest.raises(NumericalError, match="overflow"):
        gen_outcome(OutcomeModel.poisson(701.0, 0.0), np.zeros(3), SEED)


def test_non_finite_exposure_rejected():
    with pytest.raises(ValidationError):
        gen_outcome(OutcomeModel.logistic(0, 0.2), np.array([0.0, np.nan]), SEED)


@pytest.mark.parametrize("lam", [0.01, 1.0, 7.3, 49.0, 50.5, 400.0])
def test_poisson_inverse_cdf_matches_scipy(lam):
    from scipy import stats
    u = uniforms(SEED, 20000)
    assert np.array_equal(poisson_inverse_cdf(u, np.full(u.size, lam)), stats.poisson.ppf(u, lam))


def test_logistic_collider_half():
    s = gen_collider(ColliderModel.logistic(0, 0.3, 0.3, 0), np.zeros(N), np.zeros(N), SEED)
    assert abs(s.mean() - 0.5) < 0.0015


def test_double_threshold_quartiles_half():
    lo, hi = quartile_thresholds(1.6)
    c = ColliderModel.double_threshold(0, 0, 0, 0, lo, hi, 1.6)
    s = gen_collider(c, np.zeros(N), np.zeros(N), SEED)
    assert abs(s.mean() - 0.5) < 0.0015


def test_logadditive_collider_invalid_row():
    with pytest.raises(ValidationError, match="row 0"):
        gen_collider(ColliderModel.log_additive(0.1, 0, 0, 0), np.zeros(4), np.zeros(4), SEED)


def test_logadditive_collider_rate():
    s = gen_collider(ColliderModel.log_additive(math.log(0.2), 0, 0, 0), np.zeros(N), np.zeros(N), SEED)
    assert abs(s.mean() - 0.2) < 3 * math.sqrt(0.16 / N)


class TestDeterminism:
    scenario = (ExposureSpec.bernoulli(0.3), OutcomeModel.poisson(0.0, 0.2),
                ColliderModel.probit(-0.3, 0.3, 0.3, 0.2))

    def test_bit_identical(self):
        a = simulate(*self.scenario, 50_000, SeedSpec(9))
        b = simulate(*self.scenario, 50_000, SeedSpec(9))
        for k in ("x", "y", "s"):
            assert np.array_equal(a[k], b[k])

    def test_seed_changes_sample(self):
        a = simulate(*self.scenario, 1000, SeedSpec(9))
        b = simulate(*self.scenario, 1000, SeedSpec(10))
        assert not np.array_equal(a["y"], b["y"])

    @pytest.mark.parametrize("cut", [1, 65535, 65536, 100_001])
    def test_partition_invariance(self, cut):
        n = 200_000
        seed = SeedSpec(5, "part")
        assert np.array_equal(np.concatenate([uniforms(seed, cut), uniforms(seed, n - cut, cut)]),
                              uniforms(seed, n))
        assert np.array_equal(np.concatenate([normals(seed, cut), normals(seed, n - cut, cut)]),
                              normals(seed, n))

    def test_partitioned_generation(self):
        exposure, outcome, collider = self.scenario
        seed = SeedSpec(3)
        n, cut = 150_000, 70_000
        x = gen_exposure(exposure, n, seed.child("x"))
        parts = [gen_exposure(exposure, cut, seed.child("x")),
                 gen_exposure(exposure, n - cut, seed.child("x"), offset=cut)]
        assert np.array_equal(np.concatenate(parts), x)
        y = gen_outcome(outcome, x, seed.child("y"))
        y_parts = [gen_outcome(outcome, x[:cut], seed.child("y")),
                   gen_outcome(outcome, x[cut:], seed.child("y"), offset=cut)]
        assert np.array_equal(np.concatenate(y_parts), y)

    def test_stream_independence(self):
        n = 200_000
        a = normals(SeedSpec(1, "a"), n)
        b = normals(SeedSpec(1, "b"), n)
        c = normals(SeedSpec(2, "a"), n)
        for u, v in ((a, b), (a, c), (b, c)):
            assert abs(np.corrcoef(u, v)[0, 1]) < 4 / math.sqrt(n)

    def test_uniforms_open_interval(self):
        u = uniforms(SEED, 10**5)
        assert u.min() > 0 and u.max() < 1


class TestCalibration:
    exposure = ExposureSpec.bernoulli(0.3)
    outcome = OutcomeModel.logistic(0.0, 0.2)

    def test_null_logistic_gives_zero_intercept(self):
        c = calibrate_selection(ColliderModel.logistic(0, 0, 0, 0), self.exposure, self.outcome, 0.5)
        assert abs(c.delta0) < 1e-8

    def test_double_threshold_quartiles(self):
        from collider_lab.datagen import _calibration_sample
        c0 = ColliderModel.double_threshold(0.0, 0.3, 0.3, 0.2, -1, 1, 1.6)
        c = calibrate_selection(c0, self.exposure, self.outcome, 0.5)
        assert c.delta0 == 0.0
        x, y, z = _calibration_sample(self.exposure, self.outcome, 10**6, 0)
        latent = c0.index(x, y) + 1.6 * z
        assert (c.r_lower, c.r_upper) == tuple(np.quantile(latent, [0.25, 0.75]))

    def test_probit_null_matches_inverse_normal(self):
        c = calibrate_selection(ColliderModel.probit(0, 0, 0, 0, 1.6), self.exposure, self.outcome, 0.3)
        assert c.delta0 == pytest.approx(1.6 * special.ndtri(0.3), abs=1e-8)
        assert c.delta0 == pytest.approx(-0.839, abs=1e-3)

    @pytest.mark.parametrize("kind", ["logistic", "probit", "double_threshold", "log_additive"])
    @pytest.mark.parametrize("target", [0.1, 0.5, 0.9])
    def test_fresh_sample_hits_target(self, kind, target):
        if kind == "log_additive" and target > 0.5:
            pytest.skip("a log-additive model with delta > 0 cannot select 90% of rows")
        base = {"logistic": ColliderModel.logistic(0, 0.3, 0.3, 0.4),
                "probit": ColliderModel.probit(0, 0.3, 0.3, -0.4, 1.6),
                "double_threshold": ColliderModel.double_threshold(0, 0.3, 0.3, 0.4, -1, 1, 1.6),
                "log_additive": ColliderModel.log_additive(-1, 0.3, 0.3, 0.1)}[kind]
        c = calibrate_selection(base, self.exposure, self.outcome, target)
        d = simulate(self.exposure, self.outcome, c, 10**6, SeedSpec(77, "fresh"))
        assert abs(d["s"].mean() - target) < 2 * CALIBRATION_TOL

    def test_unreachable_target(self):
        # exposed rows are always selected once delta1 = 50, so 10% is out of reach
        with pytest.raises(NumericalError, match="unreachable"):
            calibrate_selection(ColliderModel.logistic(0, 50, 0, 0), self.exposure, self.outcome, 0.1)

    def test_logadditive_target_forcing_invalid_model(self):
        with pytest.raises(NumericalError, match="invalid at"):
            calibrate_selection(ColliderModel.log_additive(-1, 0.3, 0.3, 0.1), self.exposure, self.outcome, 0.95)

    @pytest.mark.parametrize("target", [0.0, 0.01, 0.995])
    def test_target_range(self, target):
        with pytest.raises(ValidationError):
            calibrate_selection(ColliderModel.logistic(0, 0, 0, 0), self.exposure, self.outcome, target)
