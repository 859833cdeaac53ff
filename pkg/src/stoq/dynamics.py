"""Trajectory propagation for the stochastic Schroedinger and Liouville equations.

A trajectory is a pair (psi, phi) with random density matrix
``R = |psi><phi|``.  The ket follows

    d psi/dt = -(i/hbar) [H_S + sum_j W_j(t) S_j] psi,       W = X + i hbar Y / 2,

and the bra ``<phi|`` the adjoint equation with the co-noise
``W' = X - i hbar Y / 2``; stored as a ket, ``phi`` is therefore driven by
``conj(W')``.  Every step uses the exponential midpoint rule with the
noise held at its midpoint value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .model import Scenario
from .noisegen import NoiseSample

DIVERGENCE_NORM = 1e6
STEP_GUARD = 10.0
_TAYLOR_THETA = 0.5
_TAYLOR_TOL = 1e-17


class StepSizeError(ValueError):
    pass


def step_exponential(state: np.ndarray, generator: np.ndarray, dt: float) -> np.ndarray:
    """Apply ``exp(dt * generator)`` to ``state`` (vector or matrix).

    The exponential is formed densely by scaling and squaring with a Pade
    core, so non-normal generators are handled.
    """
    A = dt * np.asarray(generator)
    norm = float(np.linalg.norm(A, 1)) if A.size else 0.0
    if norm > STEP_GUARD:
        raise StepSizeError(f"||dt * generator||_1 = {norm:.3g} exceeds {STEP_GUARD}; reduce dt")
    return expm(A) @ state


def schrodinger_generator(s: Scenario, w) -> np.ndarray:
    """``-(i/hbar) (H_S + sum_j w_j S_j)`` for scalar noise values ``w``."""
    h = s.system.astype(complex)
    for wj, S in zip(np.atleast_1d(w), s.couplings):
        h = h + wj * S
    return (-1j / s.hbar) * h


def _output_indices(n_steps: int, stride: int) -> np.ndarray:
    if stride < 1 or n_steps % stride:
        raise ValueError(f"stride {stride} must be positive and divide n_steps = {n_steps}")
    return np.arange(0, n_steps + 1, stride)


@dataclass(frozen=True)
class TrajectoryPair:
    times: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    diverged: bool = False
    diverged_at: int | None = None

    @property
    def psi_norm(self) -> np.ndarray:
        return np.linalg.norm(self.psi, axis=-1)

    @property
    def phi_norm(self) -> np.ndarray:
        return np.linalg.norm(self.phi, axis=-1)

    @property
    def overlap(self) -> np.ndarray:
        """``<phi(t)|psi(t)>``, the trace of the random density matrix."""
        return np.einsum("ti,ti->t", self.phi.conj(), self.psi)

    def density(self) -> np.ndarray:
        """``R(t) = |psi(t)><phi(t)|``."""
        return np.einsum("ti,tj->tij", self.psi, self.phi.conj())


def propagate_pair(psi0, noise: NoiseSample, s: Scenario, stride: int = 1) -> TrajectoryPair:
    """Propagate one trajectory pair with dense step exponentials.

    Reference path for a single realization; ensembles go through
    :func:`propagate_batch`.  On divergence the remaining output is NaN.
    """
    psi = np.asarray(psi0, dtype=complex).copy()
    phi = psi.copy()
    N = s.grid.n_steps
    out_idx = _output_indices(N, stride)
    W = np.asarray(noise.W).reshape(s.n_channels, N)
    Wc = np.asarray(noise.W_co).reshape(s.n_channels, N).conj()
    psis = np.full((out_idx.size, psi.size), np.nan, dtype=complex)
    phis = np.full_like(psis, np.nan)
    psis[0], phis[0] = psi, phi
    k = 1
    for n in range(N):
        psi = step_exponential(psi, schrodinger_generator(s, W[:, n]), s.grid.dt)
        phi = step_exponential(phi, schrodinger_generator(s, Wc[:, n]), s.grid.dt)
        if not (np.linalg.norm(psi) <= DIVERGENCE_NORM and np.linalg.norm(phi) <= DIVERGENCE_NORM):
            return TrajectoryPair(s.grid.times[out_idx], psis, phis, True, n + 1)
        if k < out_idx.size and n + 1 == out_idx[k]:
            psis[k], phis[k] = psi, phi
            k += 1
    return TrajectoryPair(s.grid.times[out_idx], psis, phis)


def free_propagation(psi0, s: Scenario, stride: int = 1) -> np.ndarray:
    """Noise-off evolution with the same integrator as the ensemble path."""
    zero = np.zeros((1, s.n_channels, s.grid.n_steps), dtype=complex)
    states, _ = propagate_batch(psi0, zero, s, stride)
    return states[0]


def _stacked_operators(s: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """``[H^T | S_1^T | ...]`` for one-shot batched products, and 1-norms."""
    ops = [s.system] + list(s.couplings)
    stacked = np.concatenate([np.ascontiguousarray(o.T) for o in ops], axis=1)
    norms = np.array([np.linalg.norm(o, 1) for o in ops])
    return stacked, norms


def propagate_batch(psi0, W: np.ndarray, s: Scenario, stride: int = 1):
    """Propagate many kets, each driven by its own noise row.

    Parameters
    ----------
    psi0 : array, shape (d,) or (B, d)
        Initial kets (broadcast over the batch if 1-D).
    W : array, shape (B, J, N)
        Complex noise values at the step midpoints.

    Returns
    -------
    states : array, shape (B, n_out, d)
    diverged : bool array, shape (B,)
        Trajectories whose norm passed ``DIVERGENCE_NORM``; their states
        are zero from that step on.

    The step exponential is applied as a truncated Taylor series with
    sub-stepping, sized so the dropped remainder is below 1e-17 relative.
    """
    W = np.asarray(W, dtype=complex)
    B, J, N = W.shape
    d = s.dim
    psi = np.broadcast_to(np.asarray(psi0, dtype=complex), (B, d)).copy()
    out_idx = _output_indices(N, stride)
    states = np.empty((B, out_idx.size, d), dtype=complex)
    states[:, 0] = psi
    stacked, norms = _stacked_operators(s)
    dt, hbar = s.grid.dt, s.hbar
    alive = np.ones(B, dtype=bool)
    k = 1
    for n in range(N):
        w = W[:, :, n]
        bound = dt * (norms[0] + np.abs(w) @ norms[1:]) / hbar
        nu = float(bound[alive].max()) if alive.any() else 0.0
        n_sub = max(1, math.ceil(nu / _TAYLOR_THETA))
        h = dt / n_sub
        x = nu / n_sub
        degree, term_bound = 0, 1.0
        while term_bound > _TAYLOR_TOL and degree < 40:
            degree += 1
            term_bound *= x / degree
        coef = -1j * h / hbar
        for _ in range(n_sub):
            acc = psi.copy()
            term = psi
            for m in range(1, degree + 1):
                prod = (term @ stacked).reshape(B, J + 1, d)
                applied = prod[:, 0] + np.einsum("bj,bjd->bd", w, prod[:, 1:])
                term = (coef / m) * applied
                acc += term
            psi = acc
        norm = np.linalg.norm(psi, axis=1)
        blown = alive & ~(norm <= DIVERGENCE_NORM)
        if blown.any():
            alive &= ~blown
            psi[blown] = 0.0
        if k < out_idx.size and n + 1 == out_idx[k]:
            states[:, k] = psi
            k += 1
    return states, ~alive


def propagate_pair_batch(psi0, noise: NoiseSample, s: Scenario, stride: int = 1):
    """Ket and co-state batches for a stacked NoiseSample (leading axis B)."""
    psi, div_psi = propagate_batch(psi0, noise.W, s, stride)
    phi, div_phi = propagate_batch(psi0, np.conj(noise.W_co), s, stride)
    return psi, phi, div_psi | div_phi


# --------------------------------------------------------------------------
# superoperator route


def liouville_super(A: np.ndarray, hbar: float) -> np.ndarray:
    """Matrix of ``L(A) R = (i/hbar)(R A - A R)`` on row-major ``vec(R)``."""
    eye = np.eye(A.shape[0])
    return (1j / hbar) * (np.kron(eye, A.T) - np.kron(A, eye))


def jordan_super(A: np.ndarray) -> np.ndarray:
    """Matrix of ``Pi(A) R = (R A + A R)/2`` on row-major ``vec(R)``."""
    eye = np.eye(A.shape[0])
    return 0.5 * (np.kron(eye, A.T) + np.kron(A, eye))


def propagate_liouville(R0, noise: NoiseSample, s: Scenario, stride: int = 1) -> np.ndarray:
    """Step ``dR/dt = [L(H_S) + sum_j X_j L(S_j) + Y_j Pi(S_j)] R`` directly.

    Works on ``d^2 x d^2`` superoperators, so intended for small systems.
    Returns ``R`` at the output times, shape ``(n_out, d, d)``.
    """
    d = s.dim
    if d > 16:
        raise ValueError("propagate_liouville is limited to d <= 16")
    hb = s.hbar
    N = s.grid.n_steps
    L_H = liouville_super(s.system, hb)
    L_S = [liouville_super(S, hb) for S in s.couplings]
    P_S = [jordan_super(S) for S in s.couplings]
    X = np.asarray(noise.X).reshape(s.n_channels, N)
    Y = np.asarray(noise.Y).reshape(s.n_channels, N)
    out_idx = _output_indices(N, stride)
    r = np.asarray(R0, dtype=complex).reshape(d * d).copy()
    out = np.empty((out_idx.size, d, d), dtype=complex)
    out[0] = r.reshape(d, d)
    k = 1
    for n in range(N):
        gen = L_H.copy()
        for j in range(s.n_channels):
            gen += X[j, n] * L_S[j] + Y[j, n] * P_S[j]
        r = step_exponential(r, gen, s.grid.dt)
        if k < out_idx.size and n + 1 == out_idx[k]:
            out[k] = r.reshape(d, d)
            k += 1
    return out


def dump_trajectories(path, states: np.ndarray) -> None:
    """Little-endian float64 (re, im) pairs, row-major [sample][time][component]."""
    a = np.ascontiguousarray(np.asarray(states, dtype="<c16"))
    with open(path, "ab") as fh:
        fh.write(a.view("<f8").tobytes())
