import math

import numpy as np
import pytest

from stoq.bathcorr import correlations_for_grid
from stoq.model import TimeGrid, discrete_spectrum, ohmic_spectrum
from stoq.noisegen import (
    NoiseError,
    NoiseFactor,
    NoiseSample,
    PseudoCovariance,
    assemble_pseudo_covariance,
    complex_symmetric_factor,
    draw_standard_normals,
    dump_noise,
    empirical_moment_check,
    noise_factor,
    real_noise,
    sample_noise,
    sample_noise_batch,
    takagi_factor,
    trajectory_key,
)


def corr(spectrum, T, n_steps=6, dt=0.2, hbar=1.0):
    return correlations_for_grid(spectrum, T, hbar, TimeGrid(0.0, dt, n_steps))


MODE = discrete_spectrum([1.0], [[[0.3]]])
TWO_CH = discrete_spectrum([0.7, 1.6], [[[0.3, 0.1], [0.1, 0.2]], [[0.1, -0.05], [-0.05, 0.3]]])


def draw(F, n, seed=0, alpha=0):
    return sample_noise_batch(F, [trajectory_key(seed, alpha, i) for i in range(n)])


class TestAssemble:
    def test_zero_spectrum(self):
        M = assemble_pseudo_covariance(corr(discrete_spectrum([1.0], [[[0.0]]]), 1.0))
        assert not np.any(M.M)

    def test_hand_assembled_n2(self):
        C = corr(MODE, 0.8, n_steps=2)
        M = assemble_pseudo_covariance(C).M
        a0, a1 = C.K[C.center].real[0, 0], C.K[C.center + 1].real[0, 0]
        b1 = 2 * C.K[C.center + 1].imag[0, 0]
        want = np.array([[a0, a1, 0, 0], [a1, a0, b1, 0], [0, b1, 0, 0], [0, 0, 0, 0]], dtype=complex)
        # rows/cols (X0, X1, Y0, Y1); Y0 pairs with the later X1 only
        np.testing.assert_array_equal(M, want)

    def test_infinite_temperature_real(self):
        M = assemble_pseudo_covariance(corr(ohmic_spectrum(0.1, 1.0), math.inf))
        assert not np.any(M.M.imag)
        assert not np.any(M.block("yy")) and not np.any(M.block("yx")) and not np.any(M.block("xy"))

    def test_symmetric_and_blocks(self):
        P = assemble_pseudo_covariance(corr(TWO_CH, 0.6))
        np.testing.assert_array_equal(P.M, P.M.T)
        assert not np.any(P.block("yy"))
        np.testing.assert_array_equal(P.block("xy"), P.block("yx").T)


class TestFactor:
    def test_zero(self):
        F = noise_factor(corr(discrete_spectrum([1.0], [[[0.0]]]), 1.0))
        assert F.rank == 0
        S = sample_noise(F, 3)
        assert not np.any(S.X) and not np.any(S.Y)

    def test_real_psd(self, rng):
        A = rng.normal(size=(5, 3))
        G = takagi_factor(A @ A.T)
        assert G.shape[1] == 3
        np.testing.assert_allclose(G @ G.T, A @ A.T, atol=1e-12)
        assert not np.any(G.imag)

    def test_off_diagonal_pair(self):
        b = 0.7
        M = np.array([[0, b], [b, 0]], dtype=complex)
        G = takagi_factor(M)
        np.testing.assert_allclose(G @ G.T, M, atol=1e-15)
        cand = np.sqrt(b / 2) * np.array([[1, 1j], [1, -1j]])
        np.testing.assert_allclose(cand @ cand.T, M, atol=1e-15)

    def test_general_complex_symmetric(self, rng):
        A = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
        M = A + A.T
        G = takagi_factor(M)
        np.testing.assert_allclose(G @ G.T, M, atol=1e-12)

    @pytest.mark.parametrize(
        "sp,T,n",
        [(MODE, 1.0, 8), (MODE, math.inf, 8), (ohmic_spectrum(0.2, 1.0), 1.0, 40),
         (ohmic_spectrum(0.2, 1.0), 0.1, 40), (TWO_CH, 0.6, 12), (TWO_CH, math.inf, 12)],
    )
    def test_residual_and_exact_zeros(self, sp, T, n):
        P = assemble_pseudo_covariance(corr(sp, T, n_steps=n))
        F = complex_symmetric_factor(P)
        GG = F.G @ F.G.T
        tol = 1e-8 * P.max_abs
        assert F.residual <= tol
        h = P.size // 2
        assert np.max(np.abs(GG[h:, h:])) <= tol
        causal = P.block("yx") == 0
        assert np.max(np.abs(GG[h:, :h][causal])) <= tol

    def test_zero_rows_exact(self):
        F = noise_factor(corr(MODE, math.inf))
        h = F.n_channels * F.n_steps
        assert not np.any(F.G[h:])

    def test_residual_guard(self):
        P = assemble_pseudo_covariance(corr(MODE, 1.0))
        with pytest.raises(NoiseError, match="residual"):
            complex_symmetric_factor(P, rtol=-1.0)


class TestSampling:
    def test_w_and_co_noise(self):
        F = noise_factor(corr(TWO_CH, 0.6))
        S = sample_noise(F, 11)
        np.testing.assert_allclose(S.W + S.W_co, 2 * S.X, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(S.W - S.W_co, 1j * S.hbar * S.Y, rtol=1e-15, atol=1e-15)

    def test_seed_determinism(self):
        F = noise_factor(corr(TWO_CH, 0.6))
        a = sample_noise(F, trajectory_key(5, 1, 17))
        b = sample_noise_batch(F, [trajectory_key(5, 1, 17)])
        assert a.X.tobytes() == b.X[0].tobytes() and a.Y.tobytes() == b.Y[0].tobytes()
        keys = [trajectory_key(5, 1, i) for i in range(64)]
        c, d = sample_noise_batch(F, keys), sample_noise_batch(F, keys)
        assert c.X.tobytes() == d.X.tobytes()
        np.testing.assert_allclose(c.X[17], a.X, rtol=1e-13, atol=1e-15)

    def test_streams_differ(self):
        e = draw_standard_normals([trajectory_key(1, 0, 0), trajectory_key(1, 1, 0), trajectory_key(2, 0, 0)], 8)
        assert len({row.tobytes() for row in e}) == 3

    def test_key_range(self):
        with pytest.raises(ValueError):
            trajectory_key(0, 1 << 24, 0)

    def test_mean_and_pseudo_covariance(self):
        P = assemble_pseudo_covariance(corr(MODE, 0.8, n_steps=3))
        F = complex_symmetric_factor(P)
        S = draw(F, 100_000, seed=3)
        Z = np.concatenate([S.X.reshape(len(S.X), -1), S.Y.reshape(len(S.Y), -1)], axis=1)
        n = Z.shape[0]
        for part in (Z.real, Z.imag):
            se = part.std(axis=0) / math.sqrt(n)
            assert np.all(np.abs(part.mean(axis=0)) <= 5 * se + 1e-15)
        prod = Z[:, :, None] * Z[:, None, :]
        est = prod.mean(axis=0)
        for e, t, p in ((est.real, P.M.real, prod.real), (est.imag, P.M.imag, prod.imag)):
            se = p.std(axis=0) / math.sqrt(n)
            assert np.all(np.abs(e - t) <= 5 * se + 1e-15)
        Y = Z[:, 3:]
        assert np.max(np.abs((Y[:, :, None] * Y[:, None, :]).mean(axis=0))) < 0.02
        # <Y Y*> is free and nonzero; the last Y has no later X partner and is exactly 0
        assert np.all((np.abs(Y[:, :-1]) ** 2).mean(axis=0) > 0.01)
        assert not np.any(Y[:, -1])

    def test_error_halves(self):
        P = assemble_pseudo_covariance(corr(MODE, 0.8, n_steps=3))
        F = complex_symmetric_factor(P)

        def rms_err(n, seed):
            S = draw(F, n, seed=seed)
            Z = np.concatenate([S.X.reshape(n, -1), S.Y.reshape(n, -1)], axis=1)
            est = np.einsum("sa,sb->ab", Z, Z) / n
            return np.sqrt(np.mean(np.abs(est - P.M) ** 2))

        small = np.mean([rms_err(10_000, s) ** 2 for s in range(8)]) ** 0.5
        big = np.mean([rms_err(40_000, 100 + s) ** 2 for s in range(8)]) ** 0.5
        assert 1.6 <= small / big <= 2.5

    def test_wick_fourth_moment(self):
        P = assemble_pseudo_covariance(corr(MODE, 0.8, n_steps=3))
        F = complex_symmetric_factor(P)
        S = draw(F, 100_000, seed=9)
        Z = np.concatenate([S.X.reshape(len(S.X), -1), S.Y.reshape(len(S.Y), -1)], axis=1)
        M = P.M
        n = Z.shape[0]
        for a, b, c, d in [(0, 1, 2, 0), (0, 0, 1, 1), (0, 3, 1, 2), (1, 4, 2, 2), (3, 1, 0, 2)]:
            p = Z[:, a] * Z[:, b] * Z[:, c] * Z[:, d]
            wick = M[a, b] * M[c, d] + M[a, c] * M[b, d] + M[a, d] * M[b, c]
            for e, t, q in ((p.mean().real, wick.real, p.real), (p.mean().imag, wick.imag, p.imag)):
                assert abs(e - t) <= 5 * q.std() / math.sqrt(n) + 1e-15

    def test_real_noise_helper(self):
        S = real_noise(np.ones((1, 4)))
        assert S.is_real and np.array_equal(S.W, S.W_co)


class TestMomentCheck:
    def test_passes_finite_T(self):
        C = corr(TWO_CH, 0.6, n_steps=8)
        rep = empirical_moment_check(draw(noise_factor(C), 20_000), C)
        assert rep["passed"], rep

    def test_infinite_T_estimates_coincide(self):
        C = corr(MODE, math.inf, n_steps=6)
        S = draw(noise_factor(C), 4000)
        np.testing.assert_array_equal(S.W, S.W_co)
        rep = empirical_moment_check(S, C)
        assert rep["passed"]
        assert rep["checks"]["WW"] == rep["checks"]["W'W"]

    def test_equal_time_single_mode(self):
        C = corr(MODE, 1.0, n_steps=4)
        S = draw(noise_factor(C), 50_000)
        est = np.mean(S.W[:, 0, 2] ** 2)
        s = 0.3
        assert abs(est.real - s) <= 5 * np.std((S.W[:, 0, 2] ** 2).real) / math.sqrt(50_000)

    def test_time_ordered_vs_anti(self):
        C = corr(MODE, 0.5, n_steps=10, dt=0.3)
        S = draw(noise_factor(C), 100_000, seed=4)
        # co-noise at the earlier time: <W'(t_a) W(t_b)> = K(t_a - t_b) = K(t_b - t_a)*
        a, b = 2, 7
        ww = np.mean(S.W[:, 0, a] * S.W[:, 0, b])
        cw = np.mean(S.W_co[:, 0, a] * S.W[:, 0, b])
        K = C.K[C.center + b - a, 0, 0]
        assert abs(ww - K) < 0.01 and abs(cw - K.conj()) < 0.01
        assert abs((ww - cw) - 2j * K.imag) < 0.015
        assert abs(K.imag) > 0.05
        # co-noise at the later time coincides with the ordered product
        assert abs(np.mean(S.W_co[:, 0, b] * S.W[:, 0, a]) - K) < 0.01

    def test_wrong_factor_fails_naming_entry(self):
        C = corr(MODE, 0.5, n_steps=6, dt=0.3)
        F = noise_factor(C)
        G = F.G.copy()
        G[F.n_channels * F.n_steps :] *= -1  # flips the causal cross block
        bad = NoiseFactor(G, F.residual, F.n_channels, F.n_steps, F.hbar)
        rep = empirical_moment_check(draw(bad, 20_000), C)
        assert not rep["passed"]
        assert set(rep["checks"]["WW"]["entry"]) == {"j", "t_a", "m", "t_b"}

    def test_needs_samples(self):
        C = corr(MODE, 0.5)
        with pytest.raises(ValueError):
            empirical_moment_check(draw(noise_factor(C), 10), C)


def test_dump_layout(tmp_path):
    X = np.arange(12, dtype=float).reshape(2, 2, 3) + 0.5j
    Y = -np.arange(12, dtype=float).reshape(2, 2, 3)
    dump_noise(tmp_path / "n.bin", NoiseSample(X, Y.astype(complex), 1.0))
    raw = np.fromfile(tmp_path / "n.bin", dtype="<f8")
    assert raw.size == 48
    assert raw[0] == 0.0 and raw[1] == 0.5 and raw[2] == 1.0  # [sample][channel][time] (re, im)
    assert raw[24] == 0.0 and raw[26] == -1.0


def test_pseudo_covariance_block_names():
    P = PseudoCovariance(np.arange(16.0).reshape(4, 4), 1, 2, 1.0)
    np.testing.assert_array_equal(P.block("xy"), [[2, 3], [6, 7]])
