import math

import numpy as np
import pytest
from scipy.stats import norm

from stoq.bathcorr import correlations_for_grid
from stoq.dynamics import (
    StepSizeError,
    dump_trajectories,
    free_propagation,
    propagate_batch,
    propagate_liouville,
    propagate_pair,
    propagate_pair_batch,
    schrodinger_generator,
    step_exponential,
)
from stoq.model import BathSpec, TimeGrid, build_channel_scenario, build_two_level_scenario, discrete_spectrum
from stoq.noisegen import NoiseSample, noise_factor, real_noise, sample_noise, sample_noise_batch, trajectory_key

from conftest import ohmic_two_level, single_mode_scenario

PLUS = np.array([1.0, 1.0]) / math.sqrt(2)


def factor_for(s):
    return noise_factor(correlations_for_grid(s.bath.spectral, s.bath.temperature, s.hbar, s.grid))


class TestStepExponential:
    def test_zero_generator(self):
        v = np.array([0.3, 0.4j, 0.1])
        np.testing.assert_array_equal(step_exponential(v, np.zeros((3, 3)), 0.7), v)

    def test_diagonal_phases(self):
        E = np.array([0.5, -1.0, 2.0])
        out = step_exponential(np.ones(3), -1j * np.diag(E), 0.3)
        np.testing.assert_allclose(out, np.exp(-1j * E * 0.3), atol=1e-15)

    def test_non_normal_against_squaring(self, rng):
        A = rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
        A = np.triu(A) * 0.3  # strongly non-normal
        I = np.eye(8)
        h = A / 1024.0
        small = I + h + h @ h / 2 + h @ h @ h / 6 + h @ h @ h @ h / 24 + h @ h @ h @ h @ h / 120
        P = small
        for _ in range(10):
            P = P @ P
        np.testing.assert_allclose(step_exponential(I, A, 1.0), P, atol=1e-9)

    def test_guard(self):
        with pytest.raises(StepSizeError):
            step_exponential(np.ones(2), 20 * np.eye(2), 1.0)


class TestPropagatePair:
    def test_zero_noise_free_evolution(self):
        s = ohmic_two_level(g=0.0, initial=PLUS)
        zero = real_noise(np.zeros((1, s.grid.n_steps)))
        tp = propagate_pair(s.initial, zero, s)
        t = s.grid.times
        want = np.stack([np.exp(-0.5j * t), np.exp(0.5j * t)], axis=1) / math.sqrt(2)
        np.testing.assert_allclose(tp.psi, want, atol=1e-12)
        np.testing.assert_array_equal(tp.psi, tp.phi)
        # coherence rotates with period 2 pi / Delta
        coh = tp.psi[:, 0] * tp.psi[:, 1].conj()
        np.testing.assert_allclose(coh, 0.5 * np.exp(-1j * t), atol=1e-12)

    def test_real_noise_dephasing(self):
        s = ohmic_two_level(eta=0.2, T=math.inf, axis="z", initial=np.array([0.6, 0.8]))
        S = sample_noise(factor_for(s), 4)
        assert not np.any(S.Y)
        tp = propagate_pair(s.initial, S, s)
        np.testing.assert_allclose(np.abs(tp.psi) ** 2, np.tile([0.36, 0.64], (len(tp.times), 1)), atol=1e-12)
        np.testing.assert_array_equal(tp.psi, tp.phi)
        assert np.max(np.abs(tp.psi_norm - 1)) <= 1e-9

    def test_real_noise_purity_x(self):
        s = ohmic_two_level(eta=0.2, T=math.inf, axis="x")
        tp = propagate_pair(s.initial, sample_noise(factor_for(s), 5), s)
        np.testing.assert_array_equal(tp.psi, tp.phi)
        assert np.max(np.abs(tp.psi_norm - 1)) <= 1e-9

    def test_overlap_derivative(self):
        s, _ = single_mode_scenario(c=0.3, n_steps=400, dt=0.01, initial=PLUS)
        S = sample_noise(factor_for(s), 8)
        tp = propagate_pair(s.initial, S, s)
        ov = tp.overlap
        assert np.max(np.abs(np.abs(ov) - 1)) > 1e-3  # not unitary
        Sop = s.couplings[0]
        sand = np.einsum("ti,ij,tj->t", tp.phi.conj(), Sop, tp.psi)
        mid = 0.5 * (sand[1:] + sand[:-1])
        fd = np.diff(ov) / s.grid.dt
        want = S.Y[0] * mid
        assert np.max(np.abs(fd - want)) <= 1e-4 * np.max(np.abs(want)) + 1e-9

    def test_matches_batch_path(self):
        s, _ = single_mode_scenario(c=0.3, n_steps=100)
        F = factor_for(s)
        keys = [trajectory_key(2, 0, i) for i in range(4)]
        S = sample_noise_batch(F, keys)
        psi, phi, div = propagate_pair_batch(s.initial, S, s, stride=5)
        for i in range(4):
            tp = propagate_pair(s.initial, S[i], s, stride=5)
            np.testing.assert_allclose(psi[i], tp.psi, atol=1e-12)
            np.testing.assert_allclose(phi[i], tp.phi, atol=1e-12)
        assert not div.any()

    def test_divergence_flagged(self):
        s = ohmic_two_level(n_steps=50)
        N = s.grid.n_steps
        Y = np.full((1, N), 150.0 + 0j)
        tp = propagate_pair(s.initial, NoiseSample(np.zeros((1, N), complex), Y, 1.0), s)
        assert tp.diverged and tp.diverged_at is not None
        assert np.isnan(tp.psi[-1]).all()
        states, div = propagate_batch(s.initial, (0.5j * Y)[None], s)
        assert div[0] and not np.any(states[0, -1])

    def test_stride_must_divide(self):
        s = ohmic_two_level(n_steps=10)
        with pytest.raises(ValueError):
            free_propagation(s.initial, s, stride=3)

    def test_generator_fresh(self):
        s = ohmic_two_level()
        before = s.couplings[0].copy()
        schrodinger_generator(s, [2.0])
        np.testing.assert_array_equal(s.couplings[0], before)


class TestLiouville:
    def test_matches_pair(self):
        s, _ = single_mode_scenario(c=0.3, n_steps=150, initial=PLUS)
        F = factor_for(s)
        for seed in range(3):
            S = sample_noise(F, seed)
            tp = propagate_pair(s.initial, S, s, stride=10)
            R = propagate_liouville(np.outer(s.initial, s.initial.conj()), S, s, stride=10)
            np.testing.assert_allclose(R, tp.density(), atol=1e-8, rtol=0)
            np.testing.assert_allclose(np.trace(R, axis1=1, axis2=2), tp.overlap, atol=1e-10)

    def test_identity_invariant(self):
        s = ohmic_two_level()
        zero = real_noise(np.zeros((1, s.grid.n_steps)))
        R = propagate_liouville(np.eye(2) / 2, zero, s, stride=20)
        np.testing.assert_allclose(R, np.broadcast_to(np.eye(2) / 2, R.shape), atol=1e-14)


class TestFreePropagation:
    def test_eigenstate_phase_only(self):
        s = ohmic_two_level(initial=np.array([0.0, 1.0]))
        free = free_propagation(s.initial, s)
        np.testing.assert_allclose(np.abs(free @ s.initial.conj()), 1.0, atol=1e-14)

    def test_norm_drift(self):
        s = build_two_level_scenario(
            1.3, "x", 0.0, BathSpec(1.0, discrete_spectrum([1.0], [[[0.1]]])), TimeGrid(0, 0.05, 10_000), initial=PLUS
        )
        free = free_propagation(s.initial, s, stride=100)
        assert np.max(np.abs(np.linalg.norm(free, axis=1) - 1)) <= 1e-9

    def test_channel_group_velocity(self):
        s = build_channel_scenario(
            64, 1.0, 32, (16.0, 3.0, np.pi / 2), BathSpec(1.0, discrete_spectrum([1.0], [[[0.1]]])),
            TimeGrid(0, 0.05, 200), strength=0.0,
        )
        free = free_propagation(s.initial, s, stride=20)
        sites = np.arange(64)
        centers = (np.abs(free) ** 2) @ sites
        t = s.grid.times[::20]
        slope = np.polyfit(t, centers, 1)[0]
        assert slope == pytest.approx(2.0, rel=0.02)

    @pytest.mark.parametrize("V", [0.5, 1.0, 2.0])
    def test_delta_barrier_transmission(self, V):
        # lattice delta barrier: T(k) = 1 / (1 + (V / (2 J sin k))^2), averaged over the packet
        w = 3.0
        s = build_channel_scenario(
            64, 1.0, 32, (14.0, w, np.pi / 2), BathSpec(1.0, discrete_spectrum([1.0], [[[0.1]]])),
            TimeGrid(0, 0.05, 300), strength=0.0,
        )
        H = s.system.copy()
        H[32, 32] += V
        free = free_propagation(s.initial, s.replace(system=H), stride=300)[-1]
        trans = float(np.sum(np.abs(free[33:]) ** 2))
        k = np.linspace(np.pi / 2 - 6 / (2 * w), np.pi / 2 + 6 / (2 * w), 2001)
        pk = norm.pdf(k, np.pi / 2, 1 / (2 * w))
        Tk = 1 / (1 + (V / (2 * np.sin(k))) ** 2)
        expected = np.trapezoid(pk * Tk, k) / np.trapezoid(pk, k)
        assert trans == pytest.approx(expected, abs=2e-3)


class TestIntegratorOrder:
    @staticmethod
    def smooth_noise(t):
        rng = np.random.default_rng(0)
        amp = (rng.normal(size=4) + 1j * rng.normal(size=4)) * 0.3
        nu = np.array([0.3, 0.7, 1.1, 1.9])
        return (amp[None, :] * np.exp(1j * np.outer(t, nu))).sum(axis=1)

    def final_state(self, dt, horizon=4.0):
        n = int(round(horizon / dt))
        s = build_two_level_scenario(
            1.0, "x", 1.0, BathSpec(1.0, discrete_spectrum([1.0], [[[0.1]]])), TimeGrid(0, dt, n), initial=PLUS
        )
        W = self.smooth_noise(s.grid.midpoints)[None, None, :]
        return propagate_batch(s.initial, W, s)[0][0, -1]

    def test_second_order(self):
        dt = 0.1
        ref = self.final_state(dt / 16)
        e1 = np.linalg.norm(self.final_state(dt) - ref)
        e2 = np.linalg.norm(self.final_state(dt / 2) - ref)
        assert 3.4 <= e1 / e2 <= 4.6


def test_dump_appends(tmp_path):
    p = tmp_path / "t.bin"
    a = np.ones((2, 3, 2), complex)
    dump_trajectories(p, a)
    dump_trajectories(p, 2 * a)
    raw = np.fromfile(p, "<f8")
    assert raw.size == 48 and raw[24] == 2.0 and raw[25] == 0.0
