import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refcolor.errors import ParameterError, ShapeError
from refcolor.latents import LatentTensor
from refcolor.schedules import (build_karras_sigmas, build_vp_schedule, q_sample,
                                vp_coeffs_for_sigma, vp_sigmas)


class TestVPSchedule:
    def test_default_horizon_is_1000(self):
        sched = build_vp_schedule()
        assert sched.T == 1000
        assert sched.alpha.shape == (1001,)

    def test_identity_alpha2_plus_beta2(self):
        sched = build_vp_schedule()
        assert np.max(np.abs(sched.alpha ** 2 + sched.beta ** 2 - 1.0)) < 1e-6

    def test_clean_index_convention(self):
        sched = build_vp_schedule()
        assert sched.alpha[0] == 1.0
        assert sched.beta[0] == 0.0

    def test_monotonicity(self):
        sched = build_vp_schedule()
        assert np.all(np.diff(sched.alpha) <= 0)
        assert np.all(np.diff(sched.beta) >= 0)

    def test_cumulative_product_against_high_precision_oracle(self):
        # oracle: 50-digit cumulative product of (1 - beta_k) on the linear ramp
        T, b0, b1 = 1000, 1e-4, 2e-2
        with mpmath.workdps(50):
            betas = [mpmath.mpf(b0) + (mpmath.mpf(b1) - mpmath.mpf(b0)) * k / (T - 1)
                     for k in range(T)]
            abar = mpmath.mpf(1)
            for b in betas:
                abar *= (1 - b)
            oracle_alpha_T = float(mpmath.sqrt(abar))
            oracle_abar = float(abar)
        sched = build_vp_schedule(T, b0, b1)
        assert oracle_abar < 1e-3
        assert sched.alpha[-1] == pytest.approx(oracle_alpha_T, abs=1e-12)

    @pytest.mark.parametrize("kwargs", [
        {"T": 0}, {"beta_start": 0.0}, {"beta_start": 0.03, "beta_end": 0.02},
        {"beta_end": 1.0},
    ])
    def test_parameter_errors(self, kwargs):
        with pytest.raises(ParameterError):
            build_vp_schedule(**{"T": 10, "beta_start": 1e-4, "beta_end": 2e-2, **kwargs})


class TestKarrasSigmas:
    def test_two_point_ladder_hits_endpoints(self):
        for rho in (1.0, 3.0, 7.0):
            sig = build_karras_sigmas(2, 0.1, 10.0, rho)
            assert sig[0] == pytest.approx(10.0, abs=1e-12)
            assert sig[1] == pytest.approx(0.1, abs=1e-12)

    def test_single_point_ladder(self):
        assert build_karras_sigmas(1, 0.1, 10.0).tolist() == [10.0]

    def test_three_point_middle_value(self):
        # frozen from the closed form: ((10^(1/7) + 0.1^(1/7)) / 2)^7
        sig = build_karras_sigmas(3, 0.1, 10.0, 7.0)
        assert sig[1] == pytest.approx(1.45073211356619, abs=1e-9)

    def test_monotone_decreasing(self):
        sig = build_karras_sigmas(25, 0.1, 10.0, 7.0)
        assert np.all(np.diff(sig) < 0)
        assert sig[0] == pytest.approx(10.0)
        assert sig[-1] == pytest.approx(0.1)

    def test_parameter_errors(self):
        with pytest.raises(ParameterError):
            build_karras_sigmas(5, 10.0, 0.1)
        with pytest.raises(ParameterError):
            build_karras_sigmas(0, 0.1, 10.0)
        with pytest.raises(ParameterError):
            build_karras_sigmas(5, 0.1, 10.0, rho=0.0)


class TestQSample:
    @pytest.fixture(scope="class")
    def sched(self):
        return build_vp_schedule(100)

    def test_zero_noise(self, sched):
        z0 = LatentTensor(np.random.RandomState(0).randn(2, 4, 4))
        eps = LatentTensor(np.zeros((2, 4, 4)))
        out = q_sample(z0, 40, eps, sched)
        assert np.allclose(out.data, sched.alpha[40] * z0.data)

    def test_zero_signal(self, sched):
        z0 = LatentTensor(np.zeros((2, 4, 4)))
        eps = LatentTensor(np.random.RandomState(1).randn(2, 4, 4))
        out = q_sample(z0, 70, eps, sched)
        assert np.allclose(out.data, sched.beta[70] * eps.data)

    def test_monte_carlo_variance(self, sched):
        # at fixed t the per-coordinate variance of q_sample(0, eps) is beta_t^2
        rng = np.random.RandomState(42)
        t = 60
        draws = np.stack([
            q_sample(LatentTensor(np.zeros((1, 2, 2))), t,
                     LatentTensor(rng.randn(1, 2, 2)), sched).data
            for _ in range(10_000)
        ])
        empirical = draws.var()
        assert abs(empirical - sched.beta[t] ** 2) < 0.05 * sched.beta[t] ** 2

    def test_shape_error(self, sched):
        with pytest.raises(ShapeError):
            q_sample(LatentTensor(np.zeros((1, 2, 2))), 3,
                     LatentTensor(np.zeros((1, 3, 3))), sched)

    def test_t_range_error(self, sched):
        z = LatentTensor(np.zeros((1, 2, 2)))
        with pytest.raises(ParameterError):
            q_sample(z, 101, z, sched)

    @settings(max_examples=25, deadline=None)
    @given(t=st.integers(min_value=0, max_value=100),
           a=st.floats(-3, 3), b=st.floats(-3, 3))
    def test_linearity_superposition(self, sched, t, a, b):
        rng = np.random.RandomState(abs(hash((t, a, b))) % 2 ** 31)
        z1, z2 = rng.randn(1, 3, 3), rng.randn(1, 3, 3)
        e1, e2 = rng.randn(1, 3, 3), rng.randn(1, 3, 3)
        lhs = q_sample(LatentTensor(a * z1 + b * z2), t,
                       LatentTensor(a * e1 + b * e2), sched).data
        rhs = (a * q_sample(LatentTensor(z1), t, LatentTensor(e1), sched).data
               + b * q_sample(LatentTensor(z2), t, LatentTensor(e2), sched).data)
        assert np.max(np.abs(lhs - rhs)) < 1e-6


class TestSigmaMapping:
    def test_roundtrip(self):
        sched = build_vp_schedule()
        for t in (1, 17, 400, 999, 1000):
            sigma = sched.sigma_ratio(t)
            assert sched.sigma_to_t(sigma) == pytest.approx(t, abs=1e-6)

    def test_vp_coeffs_identity(self):
        alpha, beta = vp_coeffs_for_sigma(np.array([0.1, 1.0, 10.0]))
        assert np.allclose(alpha ** 2 + beta ** 2, 1.0)
        assert np.allclose(beta / alpha, [0.1, 1.0, 10.0])

    def test_vp_ladder(self):
        sched = build_vp_schedule()
        sig = vp_sigmas(sched, 20)
        assert len(sig) == 20
        assert np.all(np.diff(sig) < 0)
        assert sig[0] == pytest.approx(sched.sigma_ratio(1000))
        assert sig[-1] == pytest.approx(sched.sigma_ratio(1))
