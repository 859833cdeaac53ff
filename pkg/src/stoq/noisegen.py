"""Complex Gaussian noise with prescribed pseudo-covariance.

The pair (x, y) has second moments ``<x x> = C_xx``, causal ``<y x> = C_yx``
and ``<y y> = 0``.  No real process has these moments, so the sampler draws
a complex vector ``Z = G eta`` with ``eta`` real standard normal and a
factor ``G`` satisfying ``G G^T = M`` (transpose, not conjugate transpose).
Every moment of ``Z`` without complex conjugation then matches the target
Gaussian moments exactly, which is all that averages of analytic
functionals of (x, y) need.

Layout of the stacked vector: ``Z[j N + n] = X_j(t_n)``,
``Z[J N + j N + n] = Y_j(t_n)``, with ``t_n`` the step midpoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .bathcorr import CorrelationSet, xy_covariances

FACTOR_RTOL = 1e-8
RANK_RTOL = 1e-13
_MASK64 = (1 << 64) - 1


class NoiseError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoCovariance:
    M: np.ndarray
    n_channels: int
    n_steps: int
    hbar: float

    @property
    def size(self) -> int:
        return self.M.shape[0]

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.M))) if self.M.size else 0.0

    def block(self, name: str) -> np.ndarray:
        """One of the ``xx``, ``xy``, ``yx``, ``yy`` blocks."""
        h = self.n_channels * self.n_steps
        rows = slice(0, h) if name[0] == "x" else slice(h, 2 * h)
        cols = slice(0, h) if name[1] == "x" else slice(h, 2 * h)
        return self.M[rows, cols]


@dataclass(frozen=True)
class NoiseFactor:
    G: np.ndarray
    residual: float
    n_channels: int
    n_steps: int
    hbar: float

    @property
    def rank(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class NoiseSample:
    """Sampled X, Y of shape ``(..., J, N)``; leading axes index trajectories."""

    X: np.ndarray
    Y: np.ndarray
    hbar: float

    @property
    def W(self) -> np.ndarray:
        """Ket-side noise ``X + i hbar Y / 2``."""
        return self.X + 0.5j * self.hbar * self.Y

    @property
    def W_co(self) -> np.ndarray:
        """Co-noise ``X - i hbar Y / 2`` carried by the bra side."""
        return self.X - 0.5j * self.hbar * self.Y

    @property
    def is_real(self) -> bool:
        return not np.any(self.Y) and not np.any(self.X.imag)

    def __getitem__(self, idx) -> "NoiseSample":
        return NoiseSample(self.X[idx], self.Y[idx], self.hbar)

    def __len__(self) -> int:
        return self.X.shape[0] if self.X.ndim == 3 else 1


def assemble_pseudo_covariance(C: CorrelationSet) -> PseudoCovariance:
    """Block matrix ``[[C_xx, C_yx^T], [C_yx, 0]]`` on the midpoint grid."""
    Cxx, Cyx = xy_covariances(C)
    h = Cxx.shape[0]
    M = np.zeros((2 * h, 2 * h), dtype=complex)
    M[:h, :h] = Cxx
    M[h:, :h] = Cyx
    M[:h, h:] = Cyx.T
    if not np.array_equal(M, M.T):
        raise NoiseError("assembled pseudo-covariance is not symmetric")
    return PseudoCovariance(M, C.n_channels, C.center + 1, C.hbar)


def takagi_factor(M: np.ndarray, rank_rtol: float = RANK_RTOL) -> np.ndarray:
    """Rectangular ``G`` with ``G @ G.T == M`` for complex symmetric ``M``.

    Uses the real symmetric embedding ``[[P, Q], [Q, -P]]`` of ``M = P + iQ``:
    an eigenvector ``(a, b)`` with eigenvalue ``s > 0`` gives a Takagi vector
    ``u = a + ib`` with ``M conj(u) = s u``.  Columns of ``G`` are
    ``sqrt(s) u`` for the eigenvalues above ``rank_rtol * max(s)``.  Real
    ``M`` is factored directly (real columns for positive eigenvalues,
    imaginary ones for negative).  Rows and columns of ``M`` that are
    identically zero get exactly zero rows in ``G``.
    """
    M = np.asarray(M)
    n = M.shape[0]
    support = np.flatnonzero(np.any(M != 0, axis=1))
    if support.size == 0:
        return np.zeros((n, 0), dtype=complex)
    Ms = M[np.ix_(support, support)]
    if not np.any(Ms.imag):
        lam, vec = np.linalg.eigh(Ms.real)
        cut = rank_rtol * np.abs(lam).max()
        keep = np.abs(lam) > cut
        lam, vec = lam[keep], vec[:, keep]
        cols = vec * np.sqrt(np.abs(lam)).astype(complex)
        cols[:, lam < 0] *= 1j
    else:
        P, Q = Ms.real, Ms.imag
        emb = np.block([[P, Q], [Q, -P]])
        lam, vec = np.linalg.eigh(emb)
        m = Ms.shape[0]
        keep = lam > rank_rtol * lam.max()
        lam, vec = lam[keep], vec[:, keep]
        cols = (vec[:m] + 1j * vec[m:]) * np.sqrt(lam)
    G = np.zeros((n, cols.shape[1]), dtype=complex)
    G[support] = cols
    return G


def complex_symmetric_factor(M: PseudoCovariance, rtol: float = FACTOR_RTOL) -> NoiseFactor:
    """Factor the pseudo-covariance; raises if ``max|G G^T - M| > rtol * max|M|``."""
    G = takagi_factor(M.M)
    residual = float(np.max(np.abs(G @ G.T - M.M))) if G.size else M.max_abs
    if residual > rtol * M.max_abs:
        raise NoiseError(f"factorization residual {residual:.3e} exceeds {rtol:g} * max|M| = {rtol * M.max_abs:.3e}")
    return NoiseFactor(G, residual, M.n_channels, M.n_steps, M.hbar)


def noise_factor(C: CorrelationSet) -> NoiseFactor:
    return complex_symmetric_factor(assemble_pseudo_covariance(C))


# --------------------------------------------------------------------------
# sampling


def trajectory_key(master_seed: int, alpha: int, index: int) -> tuple[int, int]:
    """Philox key for trajectory ``index`` of branch ``alpha``."""
    if alpha >= 1 << 24 or index >= 1 << 40:
        raise ValueError("alpha < 2**24 and index < 2**40 required")
    return int(master_seed) & _MASK64, (int(alpha) << 40) | int(index)


def trajectory_rng(key) -> np.random.Generator:
    """Counter-based generator: Philox keyed by ``key`` with zero counter."""
    if isinstance(key, (int, np.integer)):
        key = (int(key) & _MASK64, 0)
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def draw_standard_normals(keys: Sequence, n: int) -> np.ndarray:
    out = np.empty((len(keys), n))
    for row, key in enumerate(keys):
        out[row] = trajectory_rng(key).standard_normal(n)
    return out


def _unpack(F: NoiseFactor, Z: np.ndarray) -> NoiseSample:
    h = F.n_channels * F.n_steps
    lead = Z.shape[:-1]
    X = Z[..., :h].reshape(*lead, F.n_channels, F.n_steps)
    Y = Z[..., h:].reshape(*lead, F.n_channels, F.n_steps)
    return NoiseSample(X, Y, F.hbar)


def sample_noise(F: NoiseFactor, seed) -> NoiseSample:
    """One realization; ``seed`` is an int or a Philox key pair."""
    return sample_noise_batch(F, [seed])[0]


def sample_noise_batch(F: NoiseFactor, keys: Sequence) -> NoiseSample:
    """Realizations for several keys, stacked along a leading axis.

    Each row depends only on its own key; the batch is evaluated with one
    matrix product.
    """
    eta = draw_standard_normals(keys, F.rank)
    return _unpack(F, eta @ F.G.T)


def real_noise(X: np.ndarray, hbar: float = 1.0) -> NoiseSample:
    X = np.asarray(X, dtype=complex)
    return NoiseSample(X, np.zeros_like(X), hbar)


# --------------------------------------------------------------------------
# empirical checks


def _stack(samples) -> NoiseSample:
    if isinstance(samples, NoiseSample):
        return samples
    samples = list(samples)
    return NoiseSample(np.stack([s.X for s in samples]), np.stack([s.Y for s in samples]), samples[0].hbar)


def _se_units(est: np.ndarray, target: np.ndarray, prod: np.ndarray, n: int) -> np.ndarray:
    """|est - target| in standard errors, real and imaginary parts separately."""
    se_re = prod.real.std(axis=0, ddof=1) / np.sqrt(n)
    se_im = prod.imag.std(axis=0, ddof=1) / np.sqrt(n)
    floor = 1e-12 * max(1.0, float(np.max(np.abs(target))))
    dre = np.abs(est.real - target.real)
    dim = np.abs(est.imag - target.imag)
    z_re = np.where(se_re > floor, dre / np.maximum(se_re, floor), np.where(dre > floor, np.inf, 0.0))
    z_im = np.where(se_im > floor, dim / np.maximum(se_im, floor), np.where(dim > floor, np.inf, 0.0))
    return np.maximum(z_re, z_im)


def empirical_moment_check(
    samples: Iterable[NoiseSample] | NoiseSample,
    C: CorrelationSet,
    threshold: float = 5.0,
    max_times: int = 16,
) -> dict:
    """Compare sampled products of W, W' with K.

    ``<W_j(t_a) W_m(t_b)>`` should equal ``K_jm(|t_a - t_b|)`` and
    ``<W'_j(t_a) W_m(t_b)>`` should equal ``K_jm(t_a - t_b)``, the sampled
    stand-in for ``<w*_j(t_a) w_m(t_b)>``.  The comparison uses at most
    ``max_times`` evenly spread grid times.  Deviations are reported in
    standard-error units; the check fails above ``threshold``.
    """
    S = _stack(samples)
    n = S.X.shape[0]
    if n < 1000:
        raise ValueError("empirical_moment_check needs at least 1000 samples")
    N = S.X.shape[-1]
    times = np.unique(np.linspace(0, N - 1, min(N, max_times)).round().astype(int))
    W = S.W[:, :, times]
    Wc = S.W_co[:, :, times]
    J = W.shape[1]
    lag = times[:, None] - times[None, :]  # a - b
    K_ab = C.K[C.center + lag]  # K(t_a - t_b), shape (a, b, J, J)
    K_abs = C.K[C.center + np.abs(lag)]
    worst = {}
    for name, left, target in (("WW", W, K_abs), ("W'W", Wc, K_ab)):
        prod = np.einsum("sja,smb->sjamb", left, W)
        est = prod.mean(axis=0)
        tgt = target.transpose(2, 0, 3, 1)
        z = _se_units(est, tgt, prod, n)
        idx = np.unravel_index(int(np.argmax(z)), z.shape)
        worst[name] = {
            "max_se_units": float(z[idx]),
            "entry": {"j": int(idx[0]), "t_a": int(times[idx[1]]), "m": int(idx[2]), "t_b": int(times[idx[3]])},
            "estimate": [float(est[idx].real), float(est[idx].imag)],
            "target": [float(tgt[idx].real), float(tgt[idx].imag)],
        }
    passed = all(v["max_se_units"] <= threshold for v in worst.values())
    return {"n_samples": int(n), "n_channels": int(J), "times": times.tolist(), "checks": worst, "passed": passed}


def dump_noise(path, samples: NoiseSample) -> None:
    """Write X then Y as little-endian float64 (re, im) pairs, row-major [sample][channel][time]."""
    with open(path, "wb") as fh:
        for arr in (samples.X, samples.Y):
            a = np.ascontiguousarray(np.asarray(arr, dtype="<c16"))
            fh.write(a.view("<f8").tobytes())
