"""Loss tests: closed-form identities, spectral peaks, schedule arithmetic."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pulseforge import losses as LS
from pulseforge import tensor as T
from pulseforge.gradcheck import check_gradient, run_loss_checks

FPS = 30.0


def sinusoid(hz, fps=FPS, n=512, amp=1.0, phase=0.0):
    t = np.arange(n) / fps
    return amp * np.sin(2 * np.pi * hz * t + phase)


class TestNegPearson:
    def test_identical_signals_zero(self):
        x = sinusoid(1.2, n=128)
        assert LS.neg_pearson(x, x).item() == pytest.approx(0.0, abs=1e-9)

    def test_negated_signal_two(self):
        x = sinusoid(1.2, n=128)
        assert LS.neg_pearson(-x, x).item() == pytest.approx(2.0, abs=1e-9)

    def test_matches_direct_formula_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(200)
        y = rng.standard_normal(200)
        got = LS.neg_pearson(x, y).item()
        xm, ym = x - x.mean(), y - y.mean()
        r = np.sum(xm * ym) / (np.sqrt(np.sum(xm**2)) * np.sqrt(np.sum(ym**2)))
        assert abs(got - (1 - r)) < 1e-10

    @given(st.floats(0.1, 50.0), st.floats(-10.0, 10.0), st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_invariant_under_positive_affine_transform(self, a, b, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(64)
        y = rng.standard_normal(64)
        base = LS.neg_pearson(x, y).item()
        moved = LS.neg_pearson(a * x + b, y).item()
        assert abs(base - moved) < 1e-9

    def test_constant_input_returns_one_with_zero_grad(self):
        LS.reset_diagnostics()
        pred = T.tensor(np.full(32, 2.0, dtype=np.float64), requires_grad=True)
        loss = LS.neg_pearson(pred, sinusoid(1.0, n=32))
        assert loss.item() == 1.0
        loss.backward()
        assert pred.grad is None  # graph never attached
        assert LS.diagnostics["constant_pearson"] == 1
        LS.reset_diagnostics()

    def test_constant_gt_also_degenerate(self):
        assert LS.neg_pearson(sinusoid(1.0, n=32), np.zeros(32)).item() == 1.0

    def test_length_mismatch(self):
        with pytest.raises(T.ShapeError):
            LS.neg_pearson(np.zeros(4), np.zeros(5))

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(1)
        gt = sinusoid(1.1, n=64)
        pred = gt + 0.4 * rng.standard_normal(64)
        assert check_gradient(lambda v: LS.neg_pearson(v[0], gt), [pred]) < 1e-4


class TestPsdDistribution:
    def test_default_band_grid_is_40_to_180(self):
        grid = LS.BandConfig().bpm_grid()
        assert grid[0] == 40 and grid[-1] == 180 and grid.size == 141

    def test_pure_sinusoid_mode_at_90bpm(self):
        d = LS.psd_distribution(sinusoid(1.5), FPS)
        assert abs(d.bins[np.argmax(d.pmf_values())] - 90) <= 1

    def test_two_component_mode_at_dominant_60bpm(self):
        x = sinusoid(1.0, amp=1.0) + sinusoid(2.0, amp=0.3)
        d = LS.psd_distribution(x, FPS)
        assert abs(d.bins[np.argmax(d.pmf_values())] - 60) <= 1

    def test_sums_to_one_and_nonnegative(self):
        rng = np.random.default_rng(2)
        d = LS.psd_distribution(rng.standard_normal(256), FPS)
        vals = d.pmf_values()
        assert np.all(vals >= 0)
        assert abs(vals.sum() - 1.0) < 1e-9

    def test_invariant_under_positive_scaling(self):
        x = sinusoid(1.3, n=256) + 0.1 * np.random.default_rng(3).standard_normal(256)
        a = LS.psd_distribution(x, FPS).pmf_values()
        b = LS.psd_distribution(7.5 * x, FPS).pmf_values()
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_zero_signal_gives_uniform(self):
        LS.reset_diagnostics()
        d = LS.psd_distribution(np.zeros(64), FPS)
        np.testing.assert_allclose(d.pmf_values(), 1.0 / 141, atol=1e-12)
        assert LS.diagnostics["degenerate_psd"] == 1
        LS.reset_diagnostics()

    def test_short_signal_rejected(self):
        with pytest.raises(T.ShapeError):
            LS.psd_distribution(np.zeros(8), FPS)

    def test_band_above_nyquist_rejected(self):
        with pytest.raises(ValueError):
            LS.psd_distribution(sinusoid(1.0), 5.0, LS.BandConfig(0.66, 3.0))

    def test_empty_band_rejected(self):
        with pytest.raises(ValueError):
            LS.BandConfig(1.001, 1.002).bpm_grid()

    def test_softmax_normalization_switch(self):
        d = LS.psd_distribution(sinusoid(1.5), FPS, normalize="softmax")
        assert abs(d.pmf_values().sum() - 1.0) < 1e-6


class TestFreqCE:
    def test_matching_sinusoid_beats_shifted_prediction(self):
        gt = sinusoid(1.5)
        good = LS.freq_ce(gt, gt, FPS).item()
        shifted = LS.freq_ce(sinusoid(1.5 + 2.0 / 60.0), gt, FPS).item()
        assert good < shifted

    def test_uniform_pred_pmf_gives_log_nbins(self):
        # constant prediction degenerates to the uniform pmf over 141 bins
        LS.reset_diagnostics()
        loss = LS.freq_ce(np.zeros(128), sinusoid(1.5, n=128), FPS).item()
        assert abs(loss - 4.948759890378168) < 1e-9  # log(141)
        LS.reset_diagnostics()

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(4)
        gt = sinusoid(1.2, n=64)
        pred = gt + 0.3 * rng.standard_normal(64)
        assert check_gradient(lambda v: LS.freq_ce(v[0], gt, FPS), [pred]) < 1e-4


class TestGaussianPmf:
    def test_symmetric_about_mu(self):
        d = LS.gaussian_pmf(110.0, 3.0, np.arange(40, 181))
        p = d.pmf
        i = np.argmax(p)
        np.testing.assert_allclose(p[i - 5 : i], p[i + 5 : i : -1], rtol=1e-12)

    def test_mode_at_nearest_bin(self):
        d = LS.gaussian_pmf(72.4, 3.0, np.arange(40, 181))
        assert d.bins[np.argmax(d.pmf)] == 72

    def test_sigma_three_ratio(self):
        d = LS.gaussian_pmf(100.0, 3.0, np.arange(40, 181))
        p = d.pmf
        ratio = p[60] / p[63]  # pmf(mu) / pmf(mu + sigma)
        assert abs(ratio - math.exp(0.5)) < 1e-6

    def test_clipped_grid_renormalizes(self):
        d = LS.gaussian_pmf(41.0, 3.0, np.arange(40, 181))
        assert abs(d.pmf.sum() - 1.0) < 1e-12

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            LS.gaussian_pmf(100.0, 0.0, np.arange(40, 181))


class TestHrKl:
    def test_equal_means_gauss_gauss_zero(self):
        assert LS.hr_kl(90.0, 90.0, mode="gauss-gauss") == pytest.approx(0.0, abs=1e-12)

    def test_delta_three_sigma_three_half_nat(self):
        # discretized sum matches the closed form (dmu)^2 / (2 sigma^2) = 0.5
        kl = LS.hr_kl(100.0, 103.0, mode="gauss-gauss")
        assert abs(kl - 0.5) < 0.01

    def test_kl_of_pmf_with_itself_is_zero(self):
        rng = np.random.default_rng(5)
        p = rng.random(141)
        p /= p.sum()
        assert LS._kl_discrete(p, p) == pytest.approx(0.0, abs=1e-12)

    def test_gauss_gauss_from_waveform_argmax(self):
        wave = sinusoid(1.5)  # 90 bpm
        kl_wave = LS.hr_kl(90.0, wave, FPS, mode="gauss-gauss")
        assert kl_wave == pytest.approx(0.0, abs=0.06)  # argmax lands within 1 bpm

    def test_gauss_psd_differentiable(self):
        rng = np.random.default_rng(6)
        pred = sinusoid(1.2, n=64) + 0.3 * rng.standard_normal(64)
        assert check_gradient(
            lambda v: LS.hr_kl(72.0, v[0], FPS, mode="gauss-psd"), [pred]
        ) < 1e-4

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            LS.hr_kl(90.0, 90.0, mode="psd-psd")


class TestBetaSchedule:
    def test_epoch_one_equals_lambda(self):
        for lam, theta in ((1.0, 1.5), (0.3, 2.0), (2.0, 0.5)):
            s = LS.LossSchedule(lambda_=lam, theta=theta, epoch_current=1, epoch_total=30)
            assert LS.beta_schedule(s) == lam

    def test_epoch_30_of_30(self):
        s = LS.LossSchedule(lambda_=1.0, theta=1.5, epoch_current=30, epoch_total=30)
        assert abs(LS.beta_schedule(s) - 1.479863131087372) < 1e-6

    def test_lambda_zero(self):
        s = LS.LossSchedule(lambda_=0.0, theta=1.5, epoch_current=10, epoch_total=30)
        assert LS.beta_schedule(s) == 0.0

    @given(st.floats(1.0 + 1e-6, 5.0), st.integers(2, 60))
    @settings(max_examples=25, deadline=None)
    def test_monotone_nondecreasing_for_theta_above_one(self, theta, total):
        betas = [
            LS.beta_schedule(LS.LossSchedule(theta=theta, epoch_current=e, epoch_total=total))
            for e in range(1, total + 1)
        ]
        assert all(b2 >= b1 for b1, b2 in zip(betas, betas[1:]))

    def test_invalid_epochs(self):
        with pytest.raises(ValueError):
            LS.beta_schedule(LS.LossSchedule(epoch_current=0))


class TestOverallLoss:
    def test_lambda_zero_reduces_to_time_term(self):
        rng = np.random.default_rng(7)
        gt = sinusoid(1.2, n=64)
        pred = gt + 0.2 * rng.standard_normal(64)
        s = LS.LossSchedule(lambda_=0.0, alpha_time=1.7)
        out = LS.overall_loss(pred, gt, 72.0, FPS, s)
        expect = 1.7 * LS.neg_pearson(pred, gt).item()
        assert abs(out.total.item() - expect) < 1e-9

    def test_component_sum_identity(self):
        rng = np.random.default_rng(8)
        gt = sinusoid(1.4, n=128)
        pred = gt + 0.3 * rng.standard_normal(128)
        s = LS.LossSchedule(lambda_=1.0, theta=1.5, epoch_current=13, epoch_total=30, alpha_time=1.0)
        out = LS.overall_loss(pred, gt, 84.0, FPS, s)
        recomposed = s.alpha_time * out.time + out.beta * (out.ce + out.hr)
        assert abs(out.total.item() - recomposed) < 1e-9

    def test_perfect_prediction_time_term_vanishes(self):
        gt = sinusoid(1.5)
        s = LS.LossSchedule(epoch_current=1, epoch_total=30)
        out = LS.overall_loss(gt, gt, 90.0, FPS, s)
        assert abs(out.time) < 1e-9
        # the frequency-domain residual is all that remains
        assert abs(out.total.item() - out.beta * (out.ce + out.hr)) < 1e-9

    def test_gradient_vs_finite_difference(self):
        rng = np.random.default_rng(9)
        gt = sinusoid(1.1, n=64)
        pred = gt + 0.3 * rng.standard_normal(64)
        s = LS.LossSchedule(epoch_current=5, epoch_total=30)
        err = check_gradient(
            lambda v: LS.overall_loss(v[0], gt, 66.0, FPS, s).total, [pred]
        )
        assert err < 1e-4


class TestLossGradientSuite:
    def test_all_loss_rows_pass(self):
        for row in run_loss_checks(seed=0):
            assert row.passed, f"{row.name}: rel err {row.rel_err:.2e} >= {row.tol}"
