import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stoq import bathcorr
from stoq.bathcorr import (
    BathCorrError,
    CorrelationSet,
    correlation_matrix,
    correlations_for_grid,
    fdt_diagnostics,
    lag_grid,
    resolution_error,
    thermal_occupation,
    xy_covariances,
)
from stoq.model import SpectralModel, TimeGrid, discrete_spectrum, ohmic_spectrum

TAU = 0.1 * np.arange(-40, 41)


def mode_K(s, w, T, tau, hbar=1.0):
    x = hbar * w / T
    return s * (np.exp(1j * w * tau) + np.exp(x) * np.exp(-1j * w * tau)) / (1 + np.exp(x))


class TestCorrelationMatrix:
    def test_single_mode_closed_form(self):
        C = correlation_matrix(discrete_spectrum([1.3], [[[0.4]]]), 0.7, 1.0, TAU)
        np.testing.assert_allclose(C.K[:, 0, 0], mode_K(0.4, 1.3, 0.7, TAU), rtol=0, atol=1e-14)

    def test_hbar_enters_ratio(self):
        C = correlation_matrix(discrete_spectrum([1.0], [[[1.0]]]), 1.0, 2.0, TAU)
        np.testing.assert_allclose(C.K[:, 0, 0], mode_K(1.0, 1.0, 1.0, TAU, hbar=2.0), atol=1e-14)

    def test_k0_is_total_weight(self):
        sp = ohmic_spectrum(0.2, 1.5)
        C = correlation_matrix(sp, 0.3, 1.0, TAU)
        k0 = C.at_lag(0)[0, 0]
        assert k0.imag == 0.0
        assert k0.real == pytest.approx(np.trapezoid(sp.weights[:, 0, 0], sp.omega), rel=1e-14)
        # analytic integral of eta w e^{-w/wc} up to 30 wc
        assert k0.real == pytest.approx(0.2 * 1.5**2 * (1 - 31 * math.exp(-30)), rel=1e-6)

    def test_ohmic_infinite_temperature(self):
        eta, wc = 0.3, 2.0
        C = correlation_matrix(ohmic_spectrum(eta, wc), math.inf, 1.0, TAU)
        assert np.all(C.K.imag == 0.0)
        u = (wc * TAU) ** 2
        exact = eta * wc**2 * (1 - u) / (1 + u) ** 2
        np.testing.assert_allclose(C.K[:, 0, 0].real, exact, rtol=1e-5, atol=1e-6)
        np.testing.assert_array_equal(C.C_yx, 0.0)

    def test_two_forms_agree(self):
        x = np.array([0.0, 0.5, 50.0, 800.0])
        phase_tau = np.linspace(-3, 3, 7)
        a, b = bathcorr._kernel_forms(x, phase_tau, 1.0, 1.0)
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_form_mismatch_raises_with_resolution(self, monkeypatch):
        real = bathcorr._kernel_forms

        def skewed(omega, tau, T, hbar):
            a, b = real(omega, tau, T, hbar)
            return a * (1 + 1e-6), b

        monkeypatch.setattr(bathcorr, "_kernel_forms", skewed)
        with pytest.raises(BathCorrError, match="spacing"):
            correlation_matrix(ohmic_spectrum(0.1, 1.0), 1.0, 1.0, TAU)

    def test_rejects_asymmetric_grid(self):
        with pytest.raises(BathCorrError):
            correlation_matrix(discrete_spectrum([1.0], [[[1.0]]]), 1.0, 1.0, np.arange(5.0))

    def test_resolution_error_coarse(self):
        w = np.linspace(0, 30, 61)
        sp = SpectralModel("continuous", w, (0.1 * w * np.exp(-w))[:, None, None])
        fine = ohmic_spectrum(0.1, 1.0)
        tau = 0.5 * np.arange(-40, 41)
        assert resolution_error(sp, 1.0, 1.0, tau) > 10 * resolution_error(fine, 1.0, 1.0, tau)
        assert resolution_error(discrete_spectrum([1.0], [[[1.0]]]), 1.0, 1.0, tau) == 0.0

    def test_lag_grid(self):
        g = TimeGrid(0.0, 0.25, 4)
        np.testing.assert_allclose(lag_grid(g), 0.25 * np.arange(-3, 4))

    def test_multichannel_hermitian_symmetry(self):
        w = [0.5, 1.0, 2.0]
        W = [np.array([[1.0, 0.3], [0.3, 0.5]]), np.array([[0.2, -0.1], [-0.1, 0.4]]), np.eye(2) * 0.1]
        C = correlation_matrix(discrete_spectrum(w, W), 0.8, 1.0, TAU)
        np.testing.assert_allclose(C.K[::-1], C.K.conj().transpose(0, 2, 1), atol=1e-15)
        np.testing.assert_allclose(C.K, C.K.transpose(0, 2, 1), atol=1e-15)


class TestTargets:
    def test_causal_zeros_exact(self):
        C = correlation_matrix(ohmic_spectrum(0.2, 1.0), 1.0, 1.0, TAU)
        c = C.center
        assert np.all(C.C_yx[: c + 1] == 0.0)
        np.testing.assert_array_equal(C.C_yx[c + 1 :], 2.0 * C.K[c + 1 :].imag)
        np.testing.assert_array_equal(C.C_xx, C.K.real)

    def test_zero_temperature_limit(self):
        # T -> 0: C_yx(lag) = -(2 s / hbar) sin(w lag)
        C = correlation_matrix(discrete_spectrum([1.0], [[[0.3]]]), 1e-3, 1.0, TAU)
        pos = TAU > 0
        np.testing.assert_allclose(C.C_yx[pos, 0, 0], -0.6 * np.sin(TAU[pos]), atol=1e-14)

    def test_xy_matrix_layout(self):
        grid = TimeGrid(0.0, 0.3, 3)
        sp = discrete_spectrum([1.0, 2.0], [np.diag([0.3, 0.1]), [[0.2, 0.1], [0.1, 0.2]]])
        C = correlations_for_grid(sp, 0.9, 1.0, grid)
        Cxx, Cyx = xy_covariances(C)
        t = grid.midpoints
        for j in range(2):
            for m in range(2):
                for a in range(3):
                    for b in range(3):
                        lag = t[a] - t[b]
                        Kjm = C.K[C.center + a - b, j, m]
                        assert Cxx[j * 3 + a, m * 3 + b] == pytest.approx(Kjm.real, abs=1e-15)
                        if t[b] > t[a]:
                            want = 2 * C.K[C.center + b - a, m, j].imag
                        else:
                            want = 0.0
                        assert Cyx[j * 3 + a, m * 3 + b] == pytest.approx(want, abs=1e-15)
                        del lag

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.1, 3.0), st.floats(0.05, 2.0), st.one_of(st.floats(0.1, 5.0), st.just(math.inf)))
    def test_linear_scaling(self, w, s, T):
        sp = discrete_spectrum([w], [[[s]]])
        C1 = correlation_matrix(sp, T, 1.0, TAU)
        C2 = correlation_matrix(sp.scaled(2.0), T, 1.0, TAU)
        np.testing.assert_allclose(C2.K, 2 * C1.K, rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(C2.C_xx, 2 * C1.C_xx, rtol=1e-14, atol=1e-15)
        np.testing.assert_allclose(C2.C_yx, 2 * C1.C_yx, rtol=1e-14, atol=1e-15)


class TestFDT:
    def test_valid_passes(self):
        C = correlation_matrix(ohmic_spectrum(0.2, 1.0), 0.5, 1.0, TAU)
        assert fdt_diagnostics(C)["passed"]

    def test_occupation_frozen(self):
        n = thermal_occupation(np.array([1.0]), 0.5, 1.0)[0]
        assert n == pytest.approx(0.156518, abs=5e-7)
        assert (2 * n + 1) * math.tanh(1.0) == pytest.approx(1.0, abs=1e-14)

    def test_mode_balance_reported(self):
        C = correlation_matrix(discrete_spectrum([1.0], [[[0.2]]]), 0.5, 1.0, TAU)
        rep = fdt_diagnostics(C)
        assert rep["mode_balance_max_deviation"] < 1e-10
        assert rep["mode_occupations"][0] == pytest.approx(1 / (math.e**2 - 1))

    @pytest.mark.parametrize("k", [3, 25])
    def test_corrupted_sign_named(self, k):
        C = correlation_matrix(discrete_spectrum([1.0], [[[0.2]]]), 0.5, 1.0, TAU)
        K = C.K.copy()
        i = C.center + k
        K[i] = K[i].conj()
        bad = CorrelationSet(C.tau_grid, K, K.real, C.C_yx, C.temperature, C.hbar, C.spectral)
        with pytest.raises(BathCorrError) as exc:
            fdt_diagnostics(bad)
        assert exc.value.index == i

    def test_indefinite_k0(self):
        C = correlation_matrix(discrete_spectrum([1.0], [[[0.2]]]), 0.5, 1.0, TAU)
        K = C.K.copy()
        K[C.center] = -K[C.center]
        bad = CorrelationSet(C.tau_grid, K, K.real, C.C_yx, C.temperature, C.hbar, C.spectral)
        with pytest.raises(BathCorrError, match="positive"):
            fdt_diagnostics(bad)
