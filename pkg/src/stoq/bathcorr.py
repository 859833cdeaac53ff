"""Bath correlation matrix K_jm(tau) and the real/causal noise covariance targets.

For an equilibrium bath with spectrum matrix sigma_jm(omega) at temperature T

    K(tau) = int_0^inf [e^{i w tau} + e^{hbar w/T} e^{-i w tau}] / (1 + e^{hbar w/T}) sigma(w) dw
           = int_0^inf [cos(w tau) - i tanh(hbar w / 2T) sin(w tau)] sigma(w) dw

and the covariance targets of the (x, y) pair follow as

    <x_j(t) x_m(s)> = Re K_jm(t - s)
    <y_j(t) x_m(s)> = (2/hbar) Im K_jm(s - t)   if s > t, else 0
    <y y> = 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import SpectralModel, TimeGrid

FORM_RTOL = 1e-8
FDT_TOL = 1e-10
_TAU_CHUNK = 64


class BathCorrError(ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def lag_grid(grid: TimeGrid) -> np.ndarray:
    """Symmetric lag grid ``k dt`` for ``k = -(N-1) .. N-1``."""
    n = grid.n_steps
    return grid.dt * np.arange(-(n - 1), n)


@dataclass(frozen=True)
class CorrelationSet:
    """``K`` sampled on a symmetric lag grid, plus the derived targets.

    ``K``, ``C_xx`` and ``C_yx`` have shape ``(n_lags, J, J)``; index ``center``
    holds lag zero.  ``C_yx[k]`` is ``<y(t) x(t + tau_k)>``, which vanishes for
    ``tau_k <= 0``.
    """

    tau_grid: np.ndarray
    K: np.ndarray
    C_xx: np.ndarray
    C_yx: np.ndarray
    temperature: float
    hbar: float
    spectral: SpectralModel

    @property
    def center(self) -> int:
        return (self.tau_grid.size - 1) // 2

    @property
    def n_channels(self) -> int:
        return self.K.shape[1]

    def at_lag(self, k: int) -> np.ndarray:
        """K at lag index ``k`` (may be negative)."""
        return self.K[self.center + k]


def _beta_hbar_omega(omega: np.ndarray, T: float, hbar: float) -> np.ndarray:
    if math.isinf(T):
        return np.zeros_like(omega)
    return hbar * omega / T


def _kernel_forms(omega: np.ndarray, tau: np.ndarray, T: float, hbar: float):
    """Both integrand kernels on a (tau, omega) grid."""
    x = _beta_hbar_omega(omega, T, hbar)
    phase = np.outer(tau, omega)
    c, s = np.cos(phase), np.sin(phase)
    e = c + 1j * s
    # form A written in a way that cannot overflow for large hbar w / T
    p = expit(-x)
    form_a = p * e + (1.0 - p) * e.conj()
    form_b = c - 1j * np.tanh(0.5 * x) * s
    return form_a, form_b


def _quadrature_weights(omega: np.ndarray) -> np.ndarray:
    if omega.size < 2:
        return np.zeros_like(omega)
    q = np.empty_like(omega)
    h = np.diff(omega)
    q[0] = 0.5 * h[0]
    q[-1] = 0.5 * h[-1]
    q[1:-1] = 0.5 * (h[:-1] + h[1:])
    return q


def _integrate(spectral: SpectralModel, tau: np.ndarray, T: float, hbar: float):
    J = spectral.n_channels
    omega = spectral.omega
    if spectral.kind == "continuous":
        sig = (_quadrature_weights(omega)[:, None] * spectral.weights.reshape(omega.size, J * J))
    else:
        sig = spectral.weights.reshape(omega.size, J * J)
    ka = np.empty((tau.size, J * J), dtype=complex)
    kb = np.empty((tau.size, J * J), dtype=complex)
    for start in range(0, tau.size, _TAU_CHUNK):
        sl = slice(start, start + _TAU_CHUNK)
        fa, fb = _kernel_forms(omega, tau[sl], T, hbar)
        ka[sl] = fa @ sig
        kb[sl] = fb @ sig
    return ka.reshape(-1, J, J), kb.reshape(-1, J, J)


def suggested_resolution(tau_max: float) -> float:
    """An omega spacing that resolves ``e^{i w tau}`` out to ``tau_max`` with margin."""
    return math.pi / (32.0 * max(tau_max, 1e-300))


def correlation_matrix(
    spectral: SpectralModel, T: float, hbar: float, tau_grid: np.ndarray
) -> CorrelationSet:
    """Evaluate K on ``tau_grid`` (symmetric about zero, see :func:`lag_grid`).

    Both integral forms are evaluated with the same quadrature and must
    agree to ``FORM_RTOL``; the cos/tanh-sin form is returned.  At infinite
    temperature the imaginary part is exactly zero.
    """
    tau = np.asarray(tau_grid, dtype=float)
    if tau.size % 2 != 1 or not np.allclose(tau, -tau[::-1], rtol=0, atol=1e-12 * max(1.0, np.abs(tau).max())):
        raise BathCorrError("tau_grid must be symmetric about zero with an odd number of points")
    ka, kb = _integrate(spectral, tau, T, hbar)
    scale = max(float(np.max(np.abs(kb))), 1e-300) if kb.size else 1.0
    rel = float(np.max(np.abs(ka - kb))) / scale if kb.size else 0.0
    if rel > FORM_RTOL:
        raise BathCorrError(
            f"integral forms of K disagree (relative difference {rel:.2e}); "
            f"refine the omega grid to spacing <= {suggested_resolution(float(np.abs(tau).max())):.3g}"
        )
    K = kb
    if math.isinf(T):
        K = K.real.astype(complex)
    C_xx, C_yx = _targets(K, tau, hbar)
    return CorrelationSet(tau, K, C_xx, C_yx, float(T), float(hbar), spectral)


def correlations_for_grid(spectral: SpectralModel, T: float, hbar: float, grid: TimeGrid) -> CorrelationSet:
    return correlation_matrix(spectral, T, hbar, lag_grid(grid))


def resolution_error(spectral: SpectralModel, T: float, hbar: float, tau_grid: np.ndarray) -> float:
    """Relative change of K when the omega table is thinned by half (continuous spectra).

    A cheap a-posteriori estimate of the trapezoid error; returns 0 for
    discrete spectra.
    """
    if spectral.kind != "continuous" or spectral.omega.size < 5:
        return 0.0
    tau = np.asarray(tau_grid, dtype=float)
    full = _integrate(spectral, tau, T, hbar)[1]
    m = spectral.omega.size - (1 - spectral.omega.size % 2)
    coarse_model = SpectralModel("continuous", spectral.omega[:m:2], spectral.weights[:m:2])
    coarse = _integrate(coarse_model, tau, T, hbar)[1]
    scale = max(float(np.max(np.abs(full))), 1e-300)
    return float(np.max(np.abs(full - coarse))) / scale


def _targets(K: np.ndarray, tau: np.ndarray, hbar: float):
    C_xx = K.real.copy()
    C_yx = np.where((tau > 0)[:, None, None], (2.0 / hbar) * K.imag, 0.0)
    return C_xx, C_yx


def xy_covariances(C: CorrelationSet) -> tuple[np.ndarray, np.ndarray]:
    """Two-time covariance matrices over the noise grid.

    Returns ``(Cxx, Cyx)`` with shape ``(J N, J N)`` and index ``j N + n``
    for channel ``j`` at grid time ``n``:

    ``Cxx[(j,a),(m,b)] = Re K_jm(t_a - t_b)``,
    ``Cyx[(j,a),(m,b)] = (2/hbar) Im K_mj(t_b - t_a)`` if ``t_b > t_a`` else exactly 0.
    """
    J = C.n_channels
    n = C.center + 1
    a = np.arange(n)
    lag = a[:, None] - a[None, :]  # t_a - t_b in steps
    kxx = C.C_xx[C.center + lag]  # (n, n, J, J)
    kyx = C.C_yx[C.center - lag]  # lag index t_b - t_a
    Cxx = kxx.transpose(2, 0, 3, 1).reshape(J * n, J * n)
    # Cyx[(j,a),(m,b)] uses channel order (m, j)
    Cyx = kyx.transpose(3, 0, 2, 1).reshape(J * n, J * n)
    return Cxx, Cyx


def thermal_occupation(omega: np.ndarray, T: float, hbar: float) -> np.ndarray:
    """Bose occupation ``1 / (exp(hbar w / T) - 1)``."""
    return 1.0 / np.expm1(hbar * np.asarray(omega, dtype=float) / T)


def fdt_diagnostics(C: CorrelationSet, tol: float = FDT_TOL) -> dict:
    """Check the fluctuation-dissipation structure of a correlation set.

    Verifies ``K(-tau) = K(tau)*`` index by index, positivity of ``K(0)``,
    consistency of the derived targets and, for discrete spectra at finite
    temperature, ``(2 n_k + 1) tanh(hbar w_k / 2T) = 1``.  Raises
    :class:`BathCorrError` naming the first offending lag index.
    """
    K = C.K
    scale = max(float(np.max(np.abs(K))), 1e-300)
    mirror = K[::-1].conj().transpose(0, 2, 1)
    dev = np.max(np.abs(K - mirror), axis=(1, 2)) / scale
    bad = np.flatnonzero(dev > tol)
    if bad.size:
        i = int(bad[0]) if bad[0] >= C.center else int(C.tau_grid.size - 1 - bad[0])
        raise BathCorrError(
            f"K(-tau) != K(tau)* at lag index {i} (tau = {C.tau_grid[i]:.6g}, deviation {dev[i]:.2e})", i
        )
    k0 = K[C.center]
    k0_eigs = np.linalg.eigvalsh(0.5 * (k0 + k0.conj().T))
    if float(np.max(np.abs(k0.imag))) > tol * scale:
        raise BathCorrError("K(0) is not real", C.center)
    if k0_eigs.min() < -tol * scale:
        raise BathCorrError(f"K(0) is not positive semidefinite (eigenvalue {k0_eigs.min():.3e})", C.center)
    C_xx, C_yx = _targets(K, C.tau_grid, C.hbar)
    target_dev = max(float(np.max(np.abs(C_xx - C.C_xx))), float(np.max(np.abs(C_yx - C.C_yx)))) / scale
    if target_dev > tol:
        raise BathCorrError(f"derived covariance targets inconsistent with K (deviation {target_dev:.2e})")
    report = {
        "symmetry_max_deviation": float(dev.max()) if dev.size else 0.0,
        "K0_min_eigenvalue": float(k0_eigs.min()),
        "targets_deviation": target_dev,
        "passed": True,
    }
    sp = C.spectral
    if sp.kind == "discrete" and not math.isinf(C.temperature):
        nbar = thermal_occupation(sp.omega, C.temperature, C.hbar)
        balance = (2.0 * nbar + 1.0) * np.tanh(C.hbar * sp.omega / (2.0 * C.temperature))
        report["mode_occupations"] = nbar.tolist()
        report["mode_balance_max_deviation"] = float(np.max(np.abs(balance - 1.0)))
        if report["mode_balance_max_deviation"] > tol:
            raise BathCorrError("(2n+1) tanh(hbar w / 2T) != 1 for a bath mode")
    return report
