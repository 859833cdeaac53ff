"""Exact reference dynamics for a system coupled to a few truncated bosonic modes.

The bath is ``H_W = sum_k hbar w_k a_k^dag a_k`` with coupling operators
``W_j = sum_k c_jk (a_k + a_k^dag)``.  Linear coupling to oscillators is
Gaussian, so the bath is completely characterized by its correlation
matrix and serves as ground truth for the stochastic representation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .bathcorr import thermal_occupation
from .model import Scenario, SpectralModel

TOP_LEVEL_TOL = 1e-6
MAX_TOTAL_DIM = 4096
MAX_BATH_DIM_MOMENTS = 256


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class BathMode:
    omega: float
    coupling: tuple  # c_jk for each channel j
    n_max: int = 8

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.coupling, dtype=float))
        object.__setattr__(self, "coupling", tuple(float(v) for v in c))
        if self.omega <= 0:
            raise OracleError("mode frequency must be > 0")
        if self.n_max < 4:
            raise OracleError("n_max must be >= 4")


@dataclass(frozen=True)
class BathModeSet:
    modes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        modes = tuple(m if isinstance(m, BathMode) else BathMode(*m) for m in self.modes)
        object.__setattr__(self, "modes", modes)
        if len({len(m.coupling) for m in modes}) > 1:
            raise OracleError("all modes must couple to the same number of channels")

    @property
    def n_channels(self) -> int:
        return len(self.modes[0].coupling) if self.modes else 0

    @property
    def dim(self) -> int:
        return int(np.prod([m.n_max for m in self.modes])) if self.modes else 1

    @classmethod
    def from_dict(cls, d: dict) -> "BathModeSet":
        return cls(tuple(BathMode(m["omega"], m["coupling"], m.get("n_max", 8)) for m in d["modes"]))

    def to_dict(self) -> dict:
        return {"modes": [{"omega": m.omega, "coupling": list(m.coupling), "n_max": m.n_max} for m in self.modes]}


def top_level_occupation(omega: float, n_max: int, T: float, hbar: float) -> float:
    """Thermal population of level ``n_max - 1`` in the truncated oscillator."""
    x = hbar * omega / T
    p = np.exp(-x * np.arange(n_max))
    return float(p[-1] / p.sum())


def check_truncation(b: BathModeSet, T: float, hbar: float) -> None:
    for k, m in enumerate(b.modes):
        occ = top_level_occupation(m.omega, m.n_max, T, hbar)
        if occ >= TOP_LEVEL_TOL:
            need = m.n_max
            while top_level_occupation(m.omega, need, T, hbar) >= TOP_LEVEL_TOL:
                need += 1
            raise OracleError(
                f"mode {k}: top-level thermal occupation {occ:.2e} >= {TOP_LEVEL_TOL:g}; need n_max >= {need}"
            )


def annihilation(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def _embed(op: np.ndarray, k: int, dims: Sequence[int]) -> np.ndarray:
    mats = [op if i == k else np.eye(n) for i, n in enumerate(dims)]
    return reduce(np.kron, mats)


def bath_operators(b: BathModeSet, hbar: float = 1.0):
    """``(H_W, [W_j])`` on the tensor-product Fock space of the modes."""
    dims = [m.n_max for m in b.modes]
    D = int(np.prod(dims))
    H = np.zeros((D, D), dtype=complex)
    Ws = [np.zeros((D, D), dtype=complex) for _ in range(b.n_channels)]
    for k, m in enumerate(b.modes):
        a = _embed(annihilation(m.n_max), k, dims)
        H += hbar * m.omega * (a.conj().T @ a)
        q = a + a.conj().T
        for j, c in enumerate(m.coupling):
            Ws[j] += c * q
    return H, Ws


def thermal_state(H: np.ndarray, T: float) -> np.ndarray:
    E, V = np.linalg.eigh(H)
    p = np.exp(-(E - E.min()) / T)
    p /= p.sum()
    return (V * p) @ V.conj().T


def modes_to_spectrum(b: BathModeSet, T: float, hbar: float = 1.0) -> SpectralModel:
    """Discrete spectrum with weights ``s_k = c_k c_k^T (2 n_k + 1)``.

    With these weights the thermal correlation formula reproduces the
    bath's correlators ``<W_j(t) W_m(0)>`` exactly.
    """
    if not (T > 0) or math.isinf(T):
        raise OracleError("modes_to_spectrum needs a finite temperature T > 0")
    order = np.argsort([m.omega for m in b.modes], kind="stable")
    modes = [b.modes[i] for i in order]
    omega = np.array([m.omega for m in modes])
    nbar = thermal_occupation(omega, T, hbar)
    weights = np.array([np.outer(m.coupling, m.coupling) * (2 * n + 1) for m, n in zip(modes, nbar)])
    # merge degenerate frequencies so the grid stays strictly increasing
    uniq, inv = np.unique(omega, return_inverse=True)
    merged = np.zeros((uniq.size,) + weights.shape[1:])
    np.add.at(merged, inv, weights)
    return SpectralModel("discrete", uniq, merged)


def partial_trace_bath(rho: np.ndarray, d_s: int, d_w: int) -> np.ndarray:
    """Trace out the second tensor factor; works on stacks ``(..., D, D)``."""
    lead = rho.shape[:-2]
    r = rho.reshape(*lead, d_s, d_w, d_s, d_w)
    return np.einsum("...iaja->...ij", r)


def exact_reduced_dynamics(s: Scenario, b: BathModeSet, stride: int = 1):
    """Reduced density matrix of the system from the full unitary evolution.

    Returns ``(times, rho_S)`` with ``rho_S`` of shape ``(n_out, d, d)``.
    The bath starts in its thermal state at the scenario temperature.
    """
    T, hbar = s.bath.temperature, s.hbar
    if math.isinf(T):
        raise OracleError("the exact oracle needs a finite temperature")
    if b.n_channels != s.n_channels:
        raise OracleError(f"bath couples to {b.n_channels} channels, scenario has {s.n_channels}")
    check_truncation(b, T, hbar)
    d_s, d_w = s.dim, b.dim
    if d_s * d_w > MAX_TOTAL_DIM:
        raise OracleError(f"total dimension {d_s * d_w} exceeds {MAX_TOTAL_DIM}")
    H_W, Ws = bath_operators(b, hbar)
    H = np.kron(s.system, np.eye(d_w)) + np.kron(np.eye(d_s), H_W)
    for S, W in zip(s.couplings, Ws):
        H += np.kron(S, W)
    rho_s0 = s.initial if s.initial.ndim == 2 else np.outer(s.initial, s.initial.conj())
    rho = np.kron(rho_s0, thermal_state(H_W, T))
    U = expm((-1j * s.grid.dt / hbar) * H)
    Ud = U.conj().T
    N = s.grid.n_steps
    if stride < 1 or N % stride:
        raise ValueError("stride must divide n_steps")
    out_idx = np.arange(0, N + 1, stride)
    out = np.empty((out_idx.size, d_s, d_s), dtype=complex)
    out[0] = partial_trace_bath(rho, d_s, d_w)
    k = 1
    for n in range(N):
        rho = U @ rho @ Ud
        if k < out_idx.size and n + 1 == out_idx[k]:
            out[k] = partial_trace_bath(rho, d_s, d_w)
            k += 1
    return s.grid.times[out_idx], out


# --------------------------------------------------------------------------
# superoperator moments


@dataclass(frozen=True)
class Moment:
    value: complex
    order: tuple  # the factors as applied, latest first
    reordered: bool
    note: str = ""


def superoperator_moments(
    H_W: np.ndarray,
    W_ops: Sequence[np.ndarray],
    rho_W: np.ndarray,
    time_tuples: Sequence[Sequence[tuple]],
    hbar: float = 1.0,
) -> list[Moment]:
    """Bath averages of products of the superoperators x_j(t) and y_j(t).

    Each entry of ``time_tuples`` is a sequence of factors
    ``(kind, j, t)`` with ``kind`` in ``{"x", "y"}``.  The product is taken
    with later times to the left,

        <x_j(t1) y_m(t2)> = Tr_W[ x_j(t1) y_m(t2) rho_W ],   t1 >= t2,

    where ``x_j(t) = e^{-L(H_W) t} Pi(W_j) e^{L(H_W) t}`` and likewise for
    ``y_j`` with ``L(W_j)``.  Factors given out of chronological order are
    reordered (stably, ties keep the given order) and flagged.
    """
    H_W = np.asarray(H_W, dtype=complex)
    if H_W.shape[0] > MAX_BATH_DIM_MOMENTS:
        raise OracleError(f"bath dimension {H_W.shape[0]} exceeds {MAX_BATH_DIM_MOMENTS}")
    E, V = np.linalg.eigh(H_W)
    Vd = V.conj().T

    def u(t):  # e^{-i H t / hbar}
        return (V * np.exp(-1j * E * t / hbar)) @ Vd

    def L_of(A, B):
        return (1j / hbar) * (B @ A - A @ B)

    def Pi_of(A, B):
        return 0.5 * (B @ A + A @ B)

    def e_L(t, B):  # e^{L(H_W) t} B = e^{-iHt} B e^{iHt}
        ut = u(t)
        return ut @ B @ ut.conj().T

    results = []
    for factors in time_tuples:
        factors = [(str(k), int(j), float(t)) for k, j, t in factors]
        if len(factors) > 3:
            raise OracleError("moments of order > 3 are not supported")
        ordered = sorted(factors, key=lambda f: -f[2])
        reordered = ordered != factors
        B = np.asarray(rho_W, dtype=complex)
        for kind, j, t in reversed(ordered):  # earliest acts first
            op = Pi_of if kind == "x" else L_of if kind == "y" else None
            if op is None:
                raise OracleError(f"unknown factor kind {kind!r}")
            B = e_L(-t, op(W_ops[j], e_L(t, B)))
        note = "factors reordered chronologically (latest leftmost)" if reordered else ""
        results.append(Moment(complex(np.trace(B)), tuple(ordered), reordered, note))
    return results


def trace_distance(rho1, rho2, hermitize: bool = False) -> float:
    """Half the trace norm of ``rho1 - rho2``."""
    a, b = np.asarray(rho1), np.asarray(rho2)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if hermitize:
        diff = 0.5 * (diff + diff.conj().T)
    elif np.max(np.abs(diff - diff.conj().T), initial=0.0) > 1e-10 * max(1.0, np.max(np.abs(diff), initial=0.0)):
        raise ValueError("trace_distance needs Hermitian inputs (pass hermitize=True)")
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff))))
