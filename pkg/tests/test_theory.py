import numpy as np
import pytest
from scipy.integrate import quad

from grantfree.bigamp import detect_activity
from grantfree.config import SystemConfig
from grantfree.denoise import denoise_x_bg
from grantfree.theory import (
    SeParams,
    ce_mse_finite,
    ce_mse_finite_with_error,
    ce_mse_limit,
    convergence_condition,
    dad_error_prob,
    initial_state,
    regularized_gamma_lower,
    regularized_gamma_upper,
    run_se,
    se_step,
    ser_bound,
)
from grantfree.utils import complex_normal, make_rng


def operating_point_params(pilot_len, n_antennas) -> SeParams:
    cfg = SystemConfig(n_devices=1000, n_antennas=n_antennas, pilot_len=pilot_len, data_len=100, activity_prob=0.05, snr_db=10)
    return SeParams.from_config(cfg)


class TestSeStep:
    def test_perfect_estimate_limit(self):
        params = SeParams(K_eff=50, L=140, M=64, beta_bar=1.0, sigma2=0.03)
        v_p, v_r, v_q = se_step(1e-15, 1e-17, params)
        assert v_p < 1e-11
        assert v_r == pytest.approx(0.03)
        assert v_q == pytest.approx(0.03 / 64)

    def test_independent_transcription(self):
        K, L, M, b, s2 = 50, 140, 64, 1.0, 0.0357
        v_r, v_q = 0.1, 0.1 / 64
        shrink_err = b * v_r / (b + v_r)
        sym_err = v_q / (1 + L * v_q)
        expected = K / L * shrink_err + K * sym_err + K * shrink_err * sym_err
        v_p, v_r2, v_q2 = se_step(v_r, v_q, SeParams(K, L, M, b, s2))
        assert v_p == pytest.approx(expected, rel=1e-14)
        assert v_r2 == pytest.approx(s2 + expected, rel=1e-14)
        assert v_q2 == pytest.approx((s2 + expected) / M, rel=1e-14)

    def test_no_active_devices(self):
        assert se_step(0.7, 0.2, SeParams(0, 100, 32, 1.0, 0.1))[0] == 0


class TestRunSe:
    @pytest.mark.parametrize("pilot_len,n_antennas", [(45, 40), (40, 45)])
    def test_fixed_points_reached(self, pilot_len, n_antennas):
        params = operating_point_params(pilot_len, n_antennas)
        trace = run_se(params, t_max=500, tol=1e-6)
        assert trace.fixed_point
        assert abs(trace.records[-1].tau - trace.records[-2].tau) < 1e-6
        check = convergence_condition(params, trace.final.v_r, trace.final.v_q)
        assert check.L_ok and check.M_ok

    def test_too_few_antennas(self):
        params = operating_point_params(40, 10)
        trace = run_se(params)
        check = convergence_condition(params, trace.final.v_r, trace.final.v_q)
        assert not check.M_ok
        assert trace.c2 < 0.25  # reported unclamped

    def test_trace_invariants(self):
        params = operating_point_params(40, 64)
        trace = run_se(params)
        for rec in trace.records:
            assert rec.tau == pytest.approx(rec.v_p + params.sigma2, rel=1e-14)
        for rec in trace.records[1:]:
            assert rec.v_q == pytest.approx(rec.v_r / params.M, rel=1e-14)
        assert trace.records[0].tau == pytest.approx(params.sigma2 + params.K_eff * params.beta_bar)

    def test_noise_floor(self):
        params = operating_point_params(40, 64)
        fin = run_se(params).final
        assert fin.tau >= params.sigma2 and fin.v_r >= params.sigma2

    def test_noiseless_goes_to_zero(self):
        params = SeParams(K_eff=10, L=200, M=100, beta_bar=1.0, sigma2=0.0)
        trace = run_se(params, t_max=500, tol=1e-12)
        assert trace.final.tau < 1e-9

    def test_no_active_devices(self):
        params = SeParams(K_eff=0, L=100, M=32, beta_bar=1.0, sigma2=0.05)
        trace = run_se(params)
        assert trace.fixed_point
        assert trace.final.tau == pytest.approx(0.05)
        assert trace.final.t == 1

    def test_insensitive_to_initialization(self):
        params = operating_point_params(40, 64)
        finals = []
        for v_r0 in [0.05, 1.0, params.sigma2 + params.K_eff]:
            trace = run_se(params, init=(v_r0, v_r0 / params.M), t_max=500, tol=1e-12)
            finals.append(trace.final.tau)
        np.testing.assert_allclose(finals, finals[0], rtol=1e-8)

    def test_monotone_tau(self):
        rng = make_rng(9)
        checked = 0
        for _ in range(50):
            params = SeParams(
                K_eff=float(rng.uniform(5, 80)),
                L=int(rng.integers(20, 300)),
                M=int(rng.integers(8, 256)),
                beta_bar=float(rng.uniform(0.5, 2.0)),
                sigma2=float(rng.uniform(1e-3, 0.5)),
            )
            trace = run_se(params)
            check = convergence_condition(params, trace.final.v_r, trace.final.v_q)
            if not (check.L_ok and check.M_ok):
                continue
            checked += 1
            assert np.all(np.diff(trace.tau) <= 1e-15)
        assert checked > 0


class TestConvergenceCondition:
    def test_limits(self):
        params = SeParams(K_eff=50, L=140, M=64, beta_bar=1.0, sigma2=0.01)
        check = convergence_condition(params, 1e-14, 1e-16)
        assert check.c1 == pytest.approx(1.0)
        assert check.c2 == pytest.approx(1.0)
        assert check.L_ok and check.M_ok

    def test_too_few_antennas(self):
        params = SeParams(K_eff=50, L=140, M=40, beta_bar=1.0, sigma2=0.01)
        assert not convergence_condition(params, 1e-14, 1e-16).M_ok

    def test_small_error_regime_bounds(self):
        rng = make_rng(4)
        for _ in range(100):
            b = float(rng.uniform(0.1, 1.0))
            v_r = float(rng.uniform(0, b))
            L = int(rng.integers(10, 500))
            v_q = float(rng.uniform(0, 1 / L))
            check = convergence_condition(SeParams(10, L, 32, b, 0.01), v_r, v_q)
            assert 0.25 <= check.c1 <= 2 and 0.25 <= check.c2 <= 2


class TestDadErrorProb:
    def test_log_inequalities(self):
        for v_r in [1e-3, 0.1, 1.0, 10.0]:
            ratio = np.log((1 + v_r) / v_r)
            assert (1 + v_r) * ratio >= 1
            assert v_r * ratio <= 1

    def test_vanishes_with_antennas(self):
        assert dad_error_prob(1024, 0.5, 1.0, 0.05) < 1e-12

    def test_nonincreasing_in_antennas(self):
        values = [dad_error_prob(M, 0.5, 1.0, 0.05) for M in range(8, 257, 8)]
        assert np.all(np.diff(values) <= 1e-18)

    def test_chi_square_sampling(self):
        M, v_r, beta, eps, n = 8, 0.5, 1.0, 0.05, 200000
        rng = make_rng(21)
        inactive = complex_normal(rng, (n, M), v_r)
        active = complex_normal(rng, (n, M), beta) + complex_normal(rng, (n, M), v_r)
        false_alarm = detect_activity(denoise_x_bg(inactive, v_r, beta, eps)[1].phi, eps).mean()
        miss = 1 - detect_activity(denoise_x_bg(active, v_r, beta, eps)[1].phi, eps).mean()
        estimate = (1 - eps) * false_alarm + eps * miss
        stderr = np.sqrt((1 - eps) ** 2 * false_alarm * (1 - false_alarm) / n + eps**2 * miss * (1 - miss) / n)
        assert abs(estimate - dad_error_prob(M, v_r, beta, eps)) < 4 * stderr

    def test_domain(self):
        with pytest.raises(ValueError):
            dad_error_prob(8, 0.0, 1.0, 0.05)


class TestCeMse:
    def test_limit(self):
        assert ce_mse_limit(1.0, 0.1) == pytest.approx(1 / 11)
        assert ce_mse_limit(1.0, 0.0) == 0
        assert ce_mse_limit(2.0, 1e15) == pytest.approx(2.0)
        assert ce_mse_limit(1.0, 0.3) < min(1.0, 0.3)

    def test_phi_one_matches_limit(self):
        mse, stderr = ce_mse_finite_with_error(1.0, 0.2, 4, 0.05, 50000, make_rng(1), force_phi_one=True)
        assert abs(mse - ce_mse_limit(1.0, 0.2)) < 4 * stderr

    def test_large_array_matches_limit(self):
        mse, stderr = ce_mse_finite_with_error(1.0, 0.05, 64, 0.05, 100000, make_rng(2))
        assert abs(mse - ce_mse_limit(1.0, 0.05)) < 4 * stderr + 1e-6

    def test_noiseless(self):
        assert ce_mse_finite(1.0, 0.0, 8, 0.05, 10, make_rng(0)) == 0


class TestSerBound:
    def test_operating_point(self):
        expected = np.exp(-0.5 * np.log(63) - 2.5 * np.log(1 + 4 / 3))
        assert ser_bound(0.5, 5, 64, 130, 1 / 260) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.01515, abs=1e-5)

    def test_limits(self):
        assert ser_bound(0.5, 5, 64, 130, 1e30) == pytest.approx(63**-0.5)
        assert ser_bound(0.5, 5, 64, 130, 1e-30) < 1e-60

    def test_monotone(self):
        by_j = [ser_bound(0.5, J, 64, 130, 0.004) for J in range(1, 20)]
        assert np.all(np.diff(by_j) <= 0)
        by_v = [ser_bound(0.5, 5, 64, 130, v) for v in np.logspace(-5, 1, 40)]
        assert np.all(np.diff(by_v) >= 0)

    def test_clamped(self):
        assert ser_bound(0.9, 1, 2, 10, 1e9) <= 1.0

    def test_domain(self):
        with pytest.raises(ValueError):
            ser_bound(0.5, 5, 64, 130, 0.0)


class TestInitialState:
    def test_worst_case_start(self):
        params = SeParams(K_eff=50, L=140, M=64, beta_bar=1.0, sigma2=0.04)
        v_r, v_q = initial_state(params)
        assert v_r == pytest.approx(50.04)
        assert v_q == pytest.approx(50.04 / 64)


class TestIncompleteGamma:
    def test_exponential_case(self):
        assert regularized_gamma_lower(1, np.log(2)) == pytest.approx(0.5, rel=1e-12)
        for x in [0.1, 1.0, 3.0, 20.0]:
            assert regularized_gamma_lower(1, x) == pytest.approx(1 - np.exp(-x), rel=1e-12)

    def test_boundary(self):
        assert regularized_gamma_lower(3.5, 0) == 0
        assert regularized_gamma_upper(3.5, 0) == 1

    def test_quadrature(self):
        ref = quad(lambda t: t * np.exp(-t), 0, 2, epsabs=0, epsrel=1e-13)[0]
        assert regularized_gamma_lower(2, 2) == pytest.approx(ref, abs=1e-9)

    def test_complementarity(self):
        for a in [1, 2, 5, 10, 64, 512, 10000]:
            for x in np.linspace(0, 4 * a, 17):
                assert abs(regularized_gamma_lower(a, x) + regularized_gamma_upper(a, x) - 1) < 1e-12

    def test_single_antenna_dad(self):
        # with M = 1 both tails are plain exponentials
        v_r, beta, eps = 0.5, 1.0, 0.1
        log_ratio = np.log((beta + v_r) / v_r)
        false_alarm = np.exp(-(beta + v_r) / beta * log_ratio)
        miss = 1 - np.exp(-v_r / beta * log_ratio)
        expected = (1 - eps) * false_alarm + eps * miss
        assert dad_error_prob(1, v_r, beta, eps) == pytest.approx(expected, rel=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            regularized_gamma_lower(0, 1.0)
        with pytest.raises(ValueError):
            regularized_gamma_upper(-1, 1.0)
        with pytest.raises(ValueError):
            regularized_gamma_lower(1, -0.5)
