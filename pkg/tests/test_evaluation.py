import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from lowprob.errors import InputError
from lowprob.estimators import EstimateRecord, GldStats, gaussian_tail
from lowprob.evaluation import (
    DEFAULT_TEMPERATURES,
    FitParams,
    constant_report,
    evaluate_records,
    fit_affine,
    fit_gld,
    is_loss,
    log_mse,
    loocv,
    optimal_constant,
    tune_temperature,
)

positive = st.floats(1e-300, 1.0, allow_subnormal=False)


class TestLosses:
    def test_identity(self):
        assert is_loss(3e-7, 3e-7) == 0.0

    def test_factor_two(self):
        assert is_loss(2e-6, 1e-6) == pytest.approx(2 - np.log(2) - 1, rel=1e-12)

    def test_very_large(self):
        # 1e-90 - ln(1e-90) - 1 = 90 ln 10 - 1 to double precision
        assert is_loss(1e-100, 1e-10) == pytest.approx(90 * np.log(10) - 1, rel=1e-12)
        assert is_loss(1e-100, 1e-10) == pytest.approx(206.2327, abs=1e-4)

    def test_log_mse_values(self):
        assert log_mse(4e-5, 4e-5) == 0.0
        assert log_mse(1e-6, 1e-8) == pytest.approx(np.log(100) ** 2, rel=1e-12)
        assert log_mse(1e-6, 1e-8) == pytest.approx(21.21, abs=0.01)

    def test_log_mse_symmetric(self, rng):
        p, q = 10 ** rng.uniform(-12, 0, (2, 100))
        np.testing.assert_array_equal(log_mse(p, q), log_mse(q, p))

    @pytest.mark.parametrize("fn", [is_loss, log_mse])
    @pytest.mark.parametrize("bad", [0.0, -1e-9, np.nan])
    def test_domain(self, fn, bad):
        with pytest.raises(InputError):
            fn(1e-6, bad)

    def test_nonnegative_random_pairs(self, rng):
        p, q = 10 ** rng.uniform(-15, 0, (2, 10**4))
        assert np.all(is_loss(p, q) >= 0)
        assert np.all(is_loss(p, p) == 0)

    @settings(max_examples=200)
    @given(p=positive, q=positive, lam=st.floats(1e-6, 1e6))
    def test_ratio_invariance(self, p, q, lam):
        a, b = is_loss(p, q), is_loss(p * lam, q * lam)
        assert abs(a - b) <= 1e-12 * max(1.0, a)

    def test_near_equal_precision(self):
        # p/q - ln(p/q) - 1 ~ x^2 / 2 for p/q = 1 + x
        assert is_loss(1 + 1e-8, 1.0) == pytest.approx(0.5e-16, rel=1e-6)


class TestOptimalConstant:
    def test_arithmetic_mean(self):
        assert optimal_constant([1e-6, 3e-6], "is") == pytest.approx(2e-6, rel=1e-15)

    def test_geometric_mean(self):
        assert optimal_constant([1e-6, 1e-8], "log_mse") == pytest.approx(1e-7, rel=1e-12)

    def test_single(self):
        assert optimal_constant([4e-5]) == 4e-5
        assert is_loss(4e-5, optimal_constant([4e-5])) == 0.0

    @pytest.mark.parametrize("loss", ["is", "log_mse"])
    def test_grid_search(self, loss, rng):
        p = 10 ** rng.uniform(-7, -4, 20)
        grid = np.geomspace(1e-8, 1e-3, 20001)
        fn = is_loss if loss == "is" else log_mse
        best = grid[np.argmin([fn(p, q).mean() for q in grid])]
        step = grid[1] / grid[0]
        c = optimal_constant(p, loss)
        assert best / step <= c <= best * step

    def test_empty(self):
        with pytest.raises(InputError):
            optimal_constant([])


class TestFitAffine:
    def test_exact_input_bound(self, rng):
        p = 10 ** rng.uniform(-8, -5, 12)
        fit = fit_affine(p, p, "is")
        ref = FitParams(1.0, 1e-300, 1.0)
        assert is_loss(p, fit.predict(p)).sum() <= is_loss(p, ref.predict(p)).sum() + 1e-12

    @pytest.mark.parametrize("loss", ["is", "log_mse"])
    def test_recovers_power_law(self, loss, rng):
        q = 10 ** rng.uniform(-6, -3, 30)
        p = 2.0 * q**1.5
        fit = fit_affine(q, p, loss)
        assert fit.a == pytest.approx(2.0, rel=0.05)
        assert fit.c == pytest.approx(1.5, rel=0.05)

    @pytest.mark.parametrize("loss", ["is", "log_mse"])
    def test_all_zero_estimates(self, loss, rng):
        p = 10 ** rng.uniform(-7, -4, 10)
        fit = fit_affine(np.zeros(10), p, loss)
        pred = fit.predict(np.zeros(10))
        np.testing.assert_allclose(pred, optimal_constant(p, loss), rtol=1e-4)

    def test_monotone(self, rng):
        q = 10 ** rng.uniform(-6, -2, 15)
        p = np.abs(q * 10 ** rng.normal(0, 0.5, 15))
        fit = fit_affine(q, p)
        xs = np.concatenate([[0.0], np.geomspace(1e-12, 1.0, 500)])
        assert np.all(np.diff(fit.predict(xs)) >= 0)
        assert fit.a > 0 and fit.c > 0 and fit.b > 0

    def test_too_short(self):
        with pytest.raises(InputError):
            fit_affine([1e-3, 2e-3], [1e-3, 2e-3])


class TestFitGld:
    def test_recovers_generating_form(self, rng):
        mu = rng.uniform(-8, -2, 25)
        sigma = rng.uniform(0.5, 2.0, 25)
        a, b, c, eps = 0.8, -1.0, 1e-9, 0.1
        p = np.exp(-((a * mu / (sigma + eps)) ** 2) + b) + c
        stats = [GldStats(m, s) for m, s in zip(mu, sigma)]
        fit = fit_gld(stats, p)
        gen = is_loss(p, p).mean()
        got = is_loss(p, fit.predict(stats)).mean()
        assert got <= gen + 0.01 * max(gen, 1e-3)

    def test_degenerate_constant(self, rng):
        p = 10 ** rng.uniform(-6, -4, 8)
        fit = fit_gld([GldStats(-3.0, 1.0)] * 8, p)
        np.testing.assert_allclose(fit.predict([GldStats(-3.0, 1.0)] * 8), p.mean(), rtol=1e-3)

    def test_gaussian_tails_within_factor_three(self):
        ratio = np.linspace(-6, -3, 24)
        stats = [GldStats(r * s, s) for r, s in zip(ratio, np.linspace(0.5, 3, 24))]
        truth = norm.cdf(ratio)
        fit = fit_gld(stats, truth)
        pred = fit.predict(stats)
        assert np.all(pred / truth <= 3) and np.all(truth / pred <= 3)
        # the plain tail formula is exact here
        np.testing.assert_allclose([gaussian_tail(s) for s in stats], truth, rtol=1e-10)


class TestLoocv:
    def test_fittable_data(self, rng):
        q = 10 ** rng.uniform(-6, -3, 16)
        p = 2.0 * q**1.5
        rep = loocv(q, p)
        assert rep.loocv_loss == pytest.approx(rep.mean_loss, rel=0.1, abs=1e-8)

    def test_outlier(self, rng):
        q = 10 ** rng.uniform(-6, -3, 12)
        p = q.copy()
        p[3] *= 300
        rep = loocv(q, p)
        assert rep.loocv_loss > rep.mean_loss

    def test_minimum_size(self):
        loocv(np.array([1e-3, 2e-3, 3e-3, 4e-3]), np.array([1e-3, 2e-3, 3e-3, 4e-3]))
        with pytest.raises(InputError):
            loocv(np.array([1e-3, 2e-3, 3e-3]), np.array([1e-3, 2e-3, 3e-3]))

    def test_constant_report(self, rng):
        p = 10 ** rng.uniform(-6, -4, 10)
        rep = constant_report(p)
        assert rep.mean_loss <= rep.loocv_loss
        np.testing.assert_allclose(rep.fitted, p.mean())

    def test_evaluate_records_and_write(self, tmp_path, rng):
        p = 10 ** rng.uniform(-6, -4, 6)
        recs = [EstimateRecord("itgis", i, float(x), 100, {}) for i, x in enumerate(p * 1.3)]
        rep = evaluate_records(recs, p)
        assert rep.tokens == list(range(6)) and rep.mean_loss < 1e-3
        gl = [EstimateRecord("gld", i, 0.0, 100, {"mu": -3.0 - i, "sigma": 1.0}) for i in range(6)]
        rep2 = evaluate_records(gl, np.sort(p)[::-1])
        rep2.write(tmp_path / "e.csv")
        assert (tmp_path / "e.csv").read_text().count("\n") == 7
        assert '"loocv_loss"' in (tmp_path / "e.json").read_text()


class TestTuneTemperature:
    def test_default_grid(self):
        assert len(DEFAULT_TEMPERATURES) == 9
        assert DEFAULT_TEMPERATURES[0] == pytest.approx(0.2) and DEFAULT_TEMPERATURES[-1] == pytest.approx(5.0)
        np.testing.assert_allclose(np.diff(np.log(DEFAULT_TEMPERATURES)), np.log(25) / 8)

    def test_single_element(self):
        assert tune_temperature("itgis", None, None, [(1, 1e-3)], grid=[0.7])[0] == 0.7

    def test_ties_go_low(self):
        # estimates that ignore T give identical losses at every grid point
        run = lambda T, tok, rng: EstimateRecord("itgis", tok, 1e-4 * (tok + 1), 1, {})
        targets = [(t, 1e-4 * (t + 1) * (1.1 if t % 2 else 0.9)) for t in range(5)]
        best, table = tune_temperature("itgis", None, None, targets, grid=[2.0, 0.5, 1.0], runner=run)
        assert best == 0.5 and len(set(table.values())) == 1

    def test_picks_argmin(self):
        # estimates get noisier away from T = 1
        def run(T, tok, rng):
            return EstimateRecord("itgis", tok, 1e-4 * (tok + 1) * np.exp(abs(np.log(T)) * rng.normal()), 1, {})
        targets = [(t, 1e-4 * (t + 1)) for t in range(8)]
        best, table = tune_temperature("itgis", None, None, targets, runner=run, seed=3)
        assert table[best] <= table[min(table)] and table[best] <= table[max(table)]
        assert best == pytest.approx(1.0)
