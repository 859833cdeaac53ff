"""Checks of the exact ensemble identities, relaxation diagnostics and the Bourret closure.

Every function here is a deterministic function of an :class:`EnsembleResult`
(plus the scenario where needed).  Errors come from the 32 batch sums,
either directly (linear estimators) or by delete-one-batch jackknife.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .bathcorr import CorrelationSet, correlation_matrix
from .ensemble import EnsembleResult, batch_se, jackknife
from .model import Scenario, step_parameter
from .oracle import trace_distance

Z_PASS = 5.0
BOUND_Z = 3.0
BAND_QUANTILE = 0.005
BAND_MAX_FRACTION = 0.9
GIBBS_TOL = 0.05
ROUNDOFF = 1e-13


class AnalysisError(ValueError):
    pass


def _z(dev: np.ndarray, se: np.ndarray) -> np.ndarray:
    """|dev| / se, real and imaginary parts separately, max taken.

    Deviations at rounding level (``<= ROUNDOFF``) count as zero whatever
    the SE; e.g. at t0 every trajectory is identical and SE ~ 1e-17.
    """
    dev = np.asarray(dev)
    se = np.asarray(se)

    def part(d, s):
        d = np.abs(d)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(s > 0, d / np.where(s > 0, s, 1.0), np.inf)
        return np.where(d > ROUNDOFF, z, 0.0)

    if np.iscomplexobj(dev) or np.iscomplexobj(se):
        return np.maximum(part(dev.real, np.real(se)), part(dev.imag, np.imag(se)))
    return part(dev, se)


# --------------------------------------------------------------------------
# average unitarity


@dataclass(frozen=True)
class UnitarityReport:
    max_z: float
    profile: np.ndarray  # max over (a, b) of the SE-units residual at each time
    residual: np.ndarray  # overlap - delta, shape (T, A, A)
    se: np.ndarray
    passed: bool


def unitarity_residual(E: EnsembleResult, paired: bool = True, threshold: float = Z_PASS) -> UnitarityReport:
    """``overlap_ab(t) - delta_ab`` in standard errors.

    ``paired=False`` puts the ket itself on the bra side, a negative
    control: without the co-state the identity does not hold at finite
    temperature.
    """
    sums = E.overlap_sum if paired else E.overlap_unpaired_sum
    mean, se = E.mean_se(sums)
    dev = mean - np.eye(E.n_states)
    z = _z(dev, se)
    profile = z.reshape(z.shape[0], -1).max(axis=1)
    mz = float(profile.max())
    return UnitarityReport(mz, profile, dev, se, mz <= threshold)


# --------------------------------------------------------------------------
# scattering decomposition


@dataclass
class ScatteringDecomposition:
    """Free wave, mean scattered wave and fluctuation norm for one initial state.

    Per-batch arrays (leading axis = batch) are kept so that derived
    quantities get proper errors.
    """

    times: np.ndarray
    free: np.ndarray  # (T, d)
    mean_psi: np.ndarray
    mean_psi_se: np.ndarray
    mean_s: np.ndarray
    fluct_norm: np.ndarray  # (T,) complex
    fluct_norm_se: np.ndarray
    counts: np.ndarray
    psi_b: np.ndarray  # per-batch sums (nb, T, d)
    phi_b: np.ndarray
    ovl_b: np.ndarray  # (nb, T)
    incident_band: tuple | None = None
    meta: dict = field(default_factory=dict)

    def batch_means(self, sums):
        return sums / self.counts.reshape((-1,) + (1,) * (sums.ndim - 1))


def scattering_decomposition(E: EnsembleResult, alpha: int = 0, system: np.ndarray | None = None) -> ScatteringDecomposition:
    """Split the ensemble of state ``alpha`` into free and scattered parts.

    ``fluct_norm`` is the mean of ``<phi - Psi0 | psi - Psi0>``, expanded
    linearly so it comes from the stored sums.  Pass the system
    Hamiltonian to attach the incident energy band.
    """
    free = E.free[alpha]
    psi_b, phi_b = E.psi_sum[alpha], E.phi_sum[alpha]
    ovl_b = E.overlap_sum[:, :, alpha, alpha]
    n = E.counts.reshape(-1, 1)
    fb = (
        ovl_b
        - np.einsum("td,btd->bt", free.conj(), psi_b)
        - np.einsum("btd,td->bt", phi_b.conj(), free)
        + n * np.sum(np.abs(free) ** 2, axis=-1)
    )
    mean_psi, mean_psi_se = E.mean_se(psi_b)
    fluct, fluct_se = E.mean_se(fb)
    D = ScatteringDecomposition(
        times=E.times, free=free, mean_psi=mean_psi, mean_psi_se=mean_psi_se, mean_s=mean_psi - free,
        fluct_norm=fluct, fluct_norm_se=fluct_se, counts=E.counts, psi_b=psi_b, phi_b=phi_b, ovl_b=ovl_b,
    )
    if system is not None:
        D.incident_band = incident_band(system, free[0])
    return D


@dataclass(frozen=True)
class OpticalReport:
    times: np.ndarray
    r: np.ndarray  # complex; both parts should vanish on average
    se: np.ndarray
    z: np.ndarray
    max_z: float
    passed: bool


def optical_residual(D: ScatteringDecomposition, threshold: float = Z_PASS) -> OpticalReport:
    """``r(t) = 2 Re<Psi0|mean_s> + fluct_norm`` with SE."""
    free = D.free
    n0 = np.sum(np.abs(free) ** 2, axis=-1)
    cross = np.einsum("td,btd->bt", free.conj(), D.psi_b)
    fb = D.ovl_b - cross - np.einsum("btd,td->bt", D.phi_b.conj(), free) + D.counts[:, None] * n0
    rb = 2.0 * cross.real - 2.0 * D.counts[:, None] * n0 + fb
    r = rb.sum(axis=0) / D.counts.sum()
    se = batch_se(D.batch_means(rb))
    z = _z(r, se)
    mz = float(z.max())
    return OpticalReport(D.times, r, se, z, mz, mz <= threshold)


def sign_test(values, alpha: float = 0.05) -> dict:
    """Two-sided binomial sign test for zero median of per-seed statistics."""
    v = np.asarray(values, dtype=float)
    v = v[v != 0]
    k = int(np.sum(v > 0))
    p = float(stats.binomtest(k, v.size, 0.5).pvalue) if v.size else 1.0
    return {"n": int(v.size), "positive": k, "pvalue": p, "passed": p >= alpha}


@dataclass(frozen=True)
class NormIdentityReport:
    algebraic_residual: float
    z: np.ndarray
    max_z: float
    passed: bool


def norm_identity(D: ScatteringDecomposition, threshold: float = Z_PASS) -> NormIdentityReport:
    """Tie the norm deficit of the mean wave to the fluctuation norm.

    Algebraically ``1 - |<Psi>|^2 = -2 Re<Psi0|mean_s> - |mean_s|^2 + (1 - |Psi0|^2)``
    (checked to rounding); with the optical identity this becomes
    ``1 - |<Psi>|^2 = fluct_norm - |mean_s|^2``, checked statistically.
    """
    m, s, free = D.mean_psi, D.mean_s, D.free
    n0 = np.sum(np.abs(free) ** 2, axis=-1)
    lhs = 1.0 - np.sum(np.abs(m) ** 2, axis=-1)
    rhs = -2.0 * np.einsum("td,td->t", free.conj(), s).real - np.sum(np.abs(s) ** 2, axis=-1) + (1.0 - n0)
    alg = float(np.max(np.abs(lhs - rhs)))

    def stat(psi, phi, ovl):
        fl = ovl - np.einsum("td,td->t", free.conj(), psi) - np.einsum("td,td->t", phi.conj(), free) + n0
        ms = psi - free
        return (1.0 - np.sum(np.abs(psi) ** 2, axis=-1)) - (fl.real - np.sum(np.abs(ms) ** 2, axis=-1))

    dev, se = jackknife(stat, D.psi_b, D.phi_b, D.ovl_b, counts=D.counts)
    z = _z(dev, se)
    return NormIdentityReport(alg, z, float(z.max()), bool(z.max() <= threshold and alg < 1e-10))


# --------------------------------------------------------------------------
# inelastic scattering


def incident_band(system: np.ndarray, psi0: np.ndarray, q: float = BAND_QUANTILE) -> tuple:
    """Energy window holding all but ``2q`` of the free wave's energy distribution."""
    E, V = np.linalg.eigh(system)
    p = np.abs(V.conj().T @ psi0) ** 2
    cdf = np.cumsum(p) / p.sum()
    lo = E[min(int(np.searchsorted(cdf, q)), E.size - 1)]
    hi = E[min(int(np.searchsorted(cdf, 1.0 - q)), E.size - 1)]
    return float(lo), float(hi)


def _outside_projector(system, band):
    E, V = np.linalg.eigh(system)
    out = (E < band[0] - 1e-12) | (E > band[1] + 1e-12)
    if 1.0 - out.mean() > BAND_MAX_FRACTION:
        raise AnalysisError(
            f"incident band covers {1.0 - out.mean():.0%} of the spectrum; inelastic probability is not meaningful"
        )
    return V[:, out]


@dataclass(frozen=True)
class InelasticReport:
    times: np.ndarray
    p_inel: np.ndarray
    p_inel_se: np.ndarray
    norm_deficit: np.ndarray  # 1 - |<Psi>|^2
    norm_deficit_se: np.ndarray
    z_mean_bound: np.ndarray  # (p_inel - norm_deficit) / SE
    z_half_bound: np.ndarray  # (p_inel - 1/2) / SE
    window: np.ndarray  # bool mask of checked times
    band: tuple
    passed_mean_bound: bool
    passed_half_bound: bool

    @property
    def passed(self) -> bool:
        return self.passed_mean_bound and self.passed_half_bound


def inelastic_probability(
    E: EnsembleResult, D: ScatteringDecomposition, system: np.ndarray, t_window=None, alpha: int = 0
) -> InelasticReport:
    """Energy-basis population of the hermitized density estimate outside the incident band.

    The outside population of the free wave itself (a constant, at most
    ``2 * BAND_QUANTILE``) is subtracted, so a purely elastic process gives
    zero.  Both bounds are checked over ``t_window = (t_start, t_end)``.
    """
    band = D.incident_band or incident_band(system, D.free[0])
    P = _outside_projector(system, band)
    free_out = float(np.sum(np.abs(P.conj().T @ D.free[0]) ** 2))
    if E.rho_sum is None:
        raise AnalysisError("inelastic probability needs stored density matrices")
    rho_b = E.rho_sum[alpha]  # (nb, T, d, d)
    # <P|rho_H|P> is linear, and Re of the trace equals the hermitized value
    pop_b = np.einsum("dk,btde,ek->bt", P.conj(), rho_b, P).real

    def pinel(pop):
        return pop - free_out

    def mean_bound(pop, psi):
        return pinel(pop) - (1.0 - np.sum(np.abs(psi) ** 2, axis=-1))

    p, p_se = jackknife(pinel, pop_b, counts=E.counts)
    d1, d1_se = jackknife(mean_bound, pop_b, D.psi_b, counts=E.counts)
    deficit, deficit_se = jackknife(lambda psi: 1.0 - np.sum(np.abs(psi) ** 2, axis=-1), D.psi_b, counts=E.counts)
    t = E.times
    window = np.ones(t.size, bool) if t_window is None else (t >= t_window[0]) & (t <= t_window[1])
    z1 = np.where(d1_se > 0, d1 / np.where(d1_se > 0, d1_se, 1), np.where(d1 > 1e-12, np.inf, -np.inf))
    z2 = np.where(p_se > 0, (p - 0.5) / np.where(p_se > 0, p_se, 1), np.where(p > 0.5, np.inf, -np.inf))
    return InelasticReport(
        t, p, p_se, deficit, deficit_se, z1, z2, window, band,
        bool(np.all(z1[window] <= BOUND_Z)), bool(np.all(z2[window] <= BOUND_Z)),
    )


def band_leakage(D: ScatteringDecomposition, system: np.ndarray, t_window=None) -> np.ndarray:
    """Fraction of ``|mean_s(t)|^2`` outside the incident band, per time."""
    band = D.incident_band or incident_band(system, D.free[0])
    P = _outside_projector(system, band)
    out = np.sum(np.abs(D.mean_s @ P.conj()) ** 2, axis=-1)
    tot = np.sum(np.abs(D.mean_s) ** 2, axis=-1)
    frac = np.where(tot > 0, out / np.where(tot > 0, tot, 1.0), 0.0)
    if t_window is not None:
        frac = frac[(D.times >= t_window[0]) & (D.times <= t_window[1])]
    return frac


# --------------------------------------------------------------------------
# relaxation


def gibbs_state(H: np.ndarray, T: float) -> np.ndarray:
    E, V = np.linalg.eigh(H)
    if math.isinf(T):
        p = np.ones_like(E)
    else:
        p = np.exp(-(E - E.min()) / T)
    p /= p.sum()
    return (V * p) @ V.conj().T


@dataclass(frozen=True)
class GibbsReport:
    distance: float
    distance_se: float
    averaged: np.ndarray
    target: np.ndarray
    slope: float
    warnings: tuple

    @property
    def converged(self) -> bool:
        return not self.warnings


def gibbs_distance(E: EnsembleResult, s: Scenario, t_window, tol: float = GIBBS_TOL) -> GibbsReport:
    """Trace distance between the window-averaged hermitized estimate and the Gibbs state.

    Warnings are raised (and recorded) when populations still drift
    across the window or when the distance exceeds ``tol``.
    """
    t = E.times
    mask = (t >= t_window[0]) & (t <= t_window[1])
    if mask.sum() < 2:
        raise AnalysisError("the Gibbs window must contain at least two output times")
    target = gibbs_state(s.system, s.bath.temperature)
    _, V = np.linalg.eigh(s.system)
    w_rho = np.tensordot(E.weights, E.rho_sum, axes=(0, 0))[:, mask]  # (nb, Tw, d, d)

    def avg(r):
        m = r.mean(axis=0)
        return 0.5 * (m + m.conj().T)

    def dist(r):
        return trace_distance(avg(r), target)

    d, d_se = jackknife(dist, w_rho, counts=E.counts)
    rho_w = E.rho_total()[mask]
    pops = np.einsum("dk,tde,ek->tk", V.conj(), rho_w, V).real
    tw = t[mask]
    slope = float(np.polyfit(tw, pops[:, 0], 1)[0])
    msgs = []
    pops_b = np.einsum("dk,btde,ek->btk", V.conj(), E.batch_means(w_rho), V).real[:, :, 0]
    spread = float(batch_se(pops_b).mean())
    drift = abs(slope) * (tw[-1] - tw[0])
    if drift > max(0.02, 3.0 * spread):
        msgs.append(f"populations drift by {drift:.3f} across the window; relaxation may not be complete")
    if float(d) > tol:
        msgs.append(f"distance to Gibbs {float(d):.3f} exceeds {tol}; no relaxation to the thermal state")
    if all(not np.any(S) for S in s.couplings):
        msgs.append("zero coupling: the system cannot relax")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)
    return GibbsReport(float(d), float(d_se), avg(w_rho.sum(axis=0) / E.n_used), target, slope, tuple(msgs))


# --------------------------------------------------------------------------
# Bourret closure


def bourret_mean(C: CorrelationSet | None, s: Scenario) -> np.ndarray:
    """Second-order convolution closure for the mean ket on the scenario grid.

    Solves, in the interaction picture of ``H_S`` and with trapezoidal
    weights for both the memory integral and the time step,

        d<psi>/dt = -(i/hbar) H <psi> - hbar^-2 sum_jm int_0^t K_jm(t-s) S_j U0(t-s) S_m <psi(s)> ds.

    ``C`` may be ``None`` (K is then computed on the lags ``0 .. N dt``).
    Returns the mean at every grid time, shape ``(N + 1, d)``.
    """
    if not s.pure:
        raise AnalysisError("bourret_mean needs a pure initial state")
    Ss = list(s.couplings)
    for a in range(len(Ss)):
        for b in range(a + 1, len(Ss)):
            if np.max(np.abs(Ss[a] @ Ss[b] - Ss[b] @ Ss[a])) > 1e-12:
                raise AnalysisError("bourret_mean needs commuting coupling operators")
    sp = step_parameter(s)
    if sp > 0.3:
        warnings.warn(f"step parameter {sp:.3g} > 0.3: second-order closure is unreliable", RuntimeWarning, stacklevel=2)
    N, dt, hbar = s.grid.n_steps, s.grid.dt, s.hbar
    if C is None or C.center < N:
        C = correlation_matrix(s.bath.spectral, s.bath.temperature, hbar, dt * np.arange(-N, N + 1))
    K = C.K[C.center : C.center + N + 1]  # lags 0..N
    E, V = np.linalg.eigh(s.system)
    Vd = V.conj().T
    Se = [Vd @ S @ V for S in Ss]
    # eigenbasis kernel: sum_jm K_jm(tau) S_j diag(e^{-i E tau}) S_m
    lags = dt * np.arange(N + 1)
    ph = np.exp(-1j * np.outer(lags, E) / hbar)  # (N+1, d)
    kern = np.zeros((N + 1, s.dim, s.dim), dtype=complex)
    for j, Sj in enumerate(Se):
        for m, Sm in enumerate(Se):
            kern += K[:, j, m, None, None] * np.einsum("ab,tb,bc->tac", Sj, ph, Sm)
    times = dt * np.arange(N + 1)
    # interaction picture: chi = e^{iEt} psi_e; kernel K~(n, m) = e^{iE t_n} kern(t_n - t_m) e^{-iE t_m}
    fwd = np.exp(1j * np.outer(times, E) / hbar)
    chi = np.zeros((N + 1, s.dim), dtype=complex)
    chi[0] = Vd @ s.initial
    g = np.zeros_like(chi)  # memory term at each time
    for n in range(1, N + 1):
        # memory at t_n with the unknown chi_n in the k = 0 end point
        k = np.arange(n, 0, -1)  # lag indices for m = 0 .. n-1
        w = np.full(n, dt)
        w[0] = 0.5 * dt
        # terms m = 0 .. n-1: fwd[n] * kern[n-m] * conj(fwd[m]) chi_m
        back = chi[:n] * fwd[:n].conj()
        known = fwd[n] * np.einsum("m,mab,mb->a", w, kern[k], back)
        A0 = 0.5 * dt * (fwd[n, :, None] * kern[0] * fwd[n].conj()[None, :])
        # chi_n = chi_{n-1} + dt/2 (g_{n-1} + g_n),  g_n = -(known + A0 chi_n) / hbar^2
        lhs = np.eye(s.dim) + (0.5 * dt / hbar**2) * A0
        rhs = chi[n - 1] + 0.5 * dt * g[n - 1] - (0.5 * dt / hbar**2) * known
        chi[n] = np.linalg.solve(lhs, rhs)
        g[n] = -(known + A0 @ chi[n]) / hbar**2
    return (chi * fwd.conj()) @ V.T
