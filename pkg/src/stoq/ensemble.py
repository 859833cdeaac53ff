"""Monte Carlo averaging of trajectory pairs into rho_S(t), <Psi(t)> and overlaps.

Trajectories are processed in fixed-size chunks.  Each chunk draws its
noise from per-trajectory Philox keys, so a chunk's contribution depends
only on its index; with ``deterministic_reduce`` the chunk sums are added
in index order and the result is bit-identical for any number of workers.

Statistical errors are batch-means standard errors over 32 contiguous
batches of trajectory indices.  For complex estimates the standard error
is returned as a complex number whose real and imaginary parts are the
errors of the real and imaginary parts.
"""

from __future__ import annotations

import concurrent.futures as cf
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .bathcorr import CorrelationSet, correlations_for_grid
from .dynamics import free_propagation, propagate_batch
from .model import InitialDecomposition, Scenario
from .noisegen import NoiseFactor, NoiseSample, noise_factor, sample_noise_batch, trajectory_key

N_BATCHES = 32
DEFAULT_CHUNK = 64
ABORT_DIVERGENT_FRACTION = 0.01
VALID_DIVERGENT_FRACTION = 0.001


class EnsembleError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def batch_se(batch_means: np.ndarray) -> np.ndarray:
    """Standard error from per-batch means along axis 0 (complex-aware)."""
    nb = batch_means.shape[0]
    if np.iscomplexobj(batch_means):
        return batch_se(batch_means.real) + 1j * batch_se(batch_means.imag)
    return batch_means.std(axis=0, ddof=1) / math.sqrt(nb)


def jackknife(stat, *batch_sums: np.ndarray, counts: np.ndarray):
    """Estimate and delete-one-batch jackknife SE of ``stat(*means)``.

    ``batch_sums`` are per-batch sums (leading axis = batch) and ``counts``
    the number of trajectories in each batch.
    """
    total = counts.sum()

    def means(exclude=None):
        out = []
        for s in batch_sums:
            if exclude is None:
                out.append(s.sum(axis=0) / total)
            else:
                out.append((s.sum(axis=0) - s[exclude]) / (total - counts[exclude]))
        return out

    full = np.asarray(stat(*means()))
    nb = counts.size
    loo = np.stack([np.asarray(stat(*means(b))) for b in range(nb)])

    def se(x):
        return np.sqrt((nb - 1) / nb * np.sum((x - x.mean(axis=0)) ** 2, axis=0))

    if np.iscomplexobj(loo):
        return full, se(loo.real) + 1j * se(loo.imag)
    return full, se(loo)


@dataclass
class EnsembleResult:
    """Per-batch sums of every trajectory estimator plus the free reference.

    Arrays (``A`` initial states, ``nb`` batches, ``T`` output times, ``d`` dimension):

    ``counts (nb,)``, ``psi_sum, phi_sum (A, nb, T, d)``,
    ``rho_sum (A, nb, T, d, d)`` of ``|psi><phi|``,
    ``overlap_sum (nb, T, A, A)`` of ``<phi_a|psi_b>`` and
    ``overlap_unpaired_sum`` of ``<psi_a|psi_b>``.
    """

    times: np.ndarray
    weights: np.ndarray
    states0: np.ndarray
    free: np.ndarray
    counts: np.ndarray
    psi_sum: np.ndarray
    phi_sum: np.ndarray
    rho_sum: np.ndarray | None
    overlap_sum: np.ndarray
    overlap_unpaired_sum: np.ndarray
    n_traj: int
    divergent_count: int
    master_seed: int
    paired: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.weights.size

    @property
    def n_used(self) -> int:
        return int(self.counts.sum())

    @property
    def divergent_fraction(self) -> float:
        return self.divergent_count / self.n_traj

    @property
    def valid(self) -> bool:
        return self.divergent_fraction < VALID_DIVERGENT_FRACTION

    def batch_means(self, sums: np.ndarray, batch_axis: int = 0) -> np.ndarray:
        sums = np.moveaxis(sums, batch_axis, 0)
        return sums / self.counts.reshape((-1,) + (1,) * (sums.ndim - 1))

    def mean_se(self, sums: np.ndarray, batch_axis: int = 0):
        """Pooled mean and batch-means SE of a per-batch sum array."""
        bm = self.batch_means(sums, batch_axis)
        mean = np.moveaxis(sums, batch_axis, 0).sum(axis=0) / self.n_used
        return mean, batch_se(bm)

    def rho_batches(self) -> np.ndarray:
        """Per-batch means of ``sum_a P_a |psi_a><phi_a|``, shape (nb, T, d, d)."""
        if self.rho_sum is None:
            raise EnsembleError("density matrices were not stored for this run")
        weighted = np.tensordot(self.weights, self.rho_sum, axes=(0, 0))
        return self.batch_means(weighted)

    def rho_total(self) -> np.ndarray:
        weighted = np.tensordot(self.weights, self.rho_sum, axes=(0, 0))
        return weighted.sum(axis=0) / self.n_used

    # -- persistence --------------------------------------------------

    _ARRAYS = (
        "times", "weights", "states0", "free", "counts", "psi_sum", "phi_sum",
        "rho_sum", "overlap_sum", "overlap_unpaired_sum",
    )

    def save(self, path) -> None:
        arrays = {k: getattr(self, k) for k in self._ARRAYS if getattr(self, k) is not None}
        scalars = np.array([self.n_traj, self.divergent_count, self.master_seed, int(self.paired)], dtype=np.uint64)
        with open(path, "wb") as fh:
            np.savez(fh, _scalars=scalars, **arrays)

    @classmethod
    def load(cls, path) -> "EnsembleResult":
        with np.load(path) as z:
            arrays = {k: z[k] if k in z.files else None for k in cls._ARRAYS}
            n_traj, div, seed, paired = (int(v) for v in z["_scalars"])
        return cls(**arrays, n_traj=n_traj, divergent_count=div, master_seed=seed, paired=bool(paired))


# --------------------------------------------------------------------------
# engine

_STATE: dict = {}


def _init_worker(state: dict) -> None:
    _STATE.clear()
    _STATE.update(state)


def batch_of(index: np.ndarray, n_traj: int) -> np.ndarray:
    return (np.asarray(index) * N_BATCHES) // n_traj


def _run_chunk(chunk: int) -> dict:
    st = _STATE
    s: Scenario = st["scenario"]
    F: NoiseFactor = st["factor"]
    dec: InitialDecomposition = st["decomposition"]
    n_traj, chunk_size, stride = st["n_traj"], st["chunk_size"], st["stride"]
    idx = np.arange(chunk * chunk_size, min((chunk + 1) * chunk_size, n_traj))
    A = len(dec)
    with threadpool_limits(limits=1):
        psis, phis, noises = [], [], []
        diverged = np.zeros(idx.size, dtype=bool)
        shared = None
        for a in range(A):
            if st["paired"]:
                if shared is None:
                    shared = sample_noise_batch(F, [trajectory_key(st["master_seed"], 0, int(i)) for i in idx])
                noise = shared
            else:
                noise = sample_noise_batch(F, [trajectory_key(st["master_seed"], a, int(i)) for i in idx])
            if a == 0 or not st["paired"]:
                noises.append(noise)
            psi, dpsi = propagate_batch(dec.states[a], noise.W, s, stride)
            phi, dphi = propagate_batch(dec.states[a], np.conj(noise.W_co), s, stride)
            psis.append(psi)
            phis.append(phi)
            diverged |= dpsi | dphi
        psi = np.stack(psis, axis=2)  # (B, T, A, d)
        phi = np.stack(phis, axis=2)
        psi[diverged] = 0.0
        phi[diverged] = 0.0
        batches = batch_of(idx, n_traj)
        out = {"divergent": int(diverged.sum()), "divergent_indices": idx[diverged].tolist(), "batches": {}}
        for b in np.unique(batches):
            sel = (batches == b) & ~diverged
            p, q = psi[sel], phi[sel]
            part = {
                "count": int(sel.sum()),
                "psi": p.sum(axis=0).transpose(1, 0, 2),  # (A, T, d)
                "phi": q.sum(axis=0).transpose(1, 0, 2),
                "overlap": np.einsum("btad,btcd->tac", q.conj(), p),
                "overlap_unpaired": np.einsum("btad,btcd->tac", p.conj(), p),
            }
            if st["store_rho"]:
                part["rho"] = np.einsum("btai,btaj->atij", p, q.conj())
            out["batches"][int(b)] = part
        if st["collect_noise"]:
            out["noise"] = noises
        if st["collect_trajectories"]:
            out["trajectories"] = (psi, phi)
    return out


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("STOQ_WORKERS", "1"))
    return max(1, int(workers))


def run_ensemble(
    s: Scenario,
    n_traj: int,
    master_seed: int,
    workers: int | None = 1,
    deterministic_reduce: bool = True,
    stride: int = 1,
    chunk_size: int = DEFAULT_CHUNK,
    paired: bool = True,
    factor: NoiseFactor | None = None,
    correlations: CorrelationSet | None = None,
    store_rho: bool = True,
    collect_noise: bool = False,
    collect_trajectories: bool = False,
    allow_divergence: bool = False,
) -> EnsembleResult:
    """Average ``n_traj`` trajectory pairs per initial state.

    With ``paired`` (default) trajectory ``i`` of every initial state uses
    the same noise realization, keyed by ``(master_seed, 0, i)``; otherwise
    branch ``a`` uses ``(master_seed, a, i)``.  A trajectory index that
    diverges in any branch is excluded from all averages and counted.
    More than 1% divergent trajectories aborts the run unless
    ``allow_divergence``.
    """
    if n_traj < 100:
        raise ValueError("run_ensemble needs n_traj >= 100")
    t_start = time.perf_counter()
    dec = s.initial_decomposition()
    if factor is None:
        if correlations is None:
            correlations = correlations_for_grid(s.bath.spectral, s.bath.temperature, s.hbar, s.grid)
        factor = noise_factor(correlations)
    if factor.n_steps != s.grid.n_steps or factor.n_channels != s.n_channels:
        raise ValueError("noise factor does not match the scenario grid/channels")
    t_factor = time.perf_counter()
    workers = resolve_workers(workers)
    state = dict(
        scenario=s, factor=factor, decomposition=dec, n_traj=int(n_traj), chunk_size=int(chunk_size),
        stride=int(stride), paired=paired, master_seed=int(master_seed), store_rho=store_rho,
        collect_noise=collect_noise, collect_trajectories=collect_trajectories,
    )
    free = np.stack([free_propagation(dec.states[a], s, stride) for a in range(len(dec))])
    A, T, d = free.shape
    counts = np.zeros(N_BATCHES, dtype=np.int64)
    psi_sum = np.zeros((A, N_BATCHES, T, d), dtype=complex)
    phi_sum = np.zeros_like(psi_sum)
    rho_sum = np.zeros((A, N_BATCHES, T, d, d), dtype=complex) if store_rho else None
    ovl = np.zeros((N_BATCHES, T, A, A), dtype=complex)
    ovl_u = np.zeros_like(ovl)
    divergent = 0
    divergent_idx: list = []
    collected_noise, collected_traj = [], []

    def merge(part):
        nonlocal divergent
        divergent += part["divergent"]
        divergent_idx.extend(part["divergent_indices"])
        for b, p in part["batches"].items():
            counts[b] += p["count"]
            psi_sum[:, b] += p["psi"]
            phi_sum[:, b] += p["phi"]
            ovl[b] += p["overlap"]
            ovl_u[b] += p["overlap_unpaired"]
            if store_rho:
                rho_sum[:, b] += p["rho"]
        if collect_noise:
            collected_noise.extend(part["noise"])
        if collect_trajectories:
            collected_traj.append(part["trajectories"])

    n_chunks = math.ceil(n_traj / chunk_size)
    if workers == 1:
        _init_worker(state)
        for c in range(n_chunks):
            merge(_run_chunk(c))
    else:
        with cf.ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(state,)) as pool:
            if deterministic_reduce:
                for part in pool.map(_run_chunk, range(n_chunks)):
                    merge(part)
            else:
                futures = [pool.submit(_run_chunk, c) for c in range(n_chunks)]
                for fut in cf.as_completed(futures):
                    merge(fut.result())
    t_end = time.perf_counter()
    frac = divergent / n_traj
    if frac > ABORT_DIVERGENT_FRACTION and not allow_divergence:
        raise EnsembleError(
            f"{divergent} of {n_traj} trajectories diverged ({frac:.2%}); parameters outside the trustworthy regime",
            {"divergent": divergent, "n_traj": n_traj, "first_indices": sorted(divergent_idx)[:20]},
        )
    meta = {
        "timings": {"factor_s": t_factor - t_start, "trajectories_s": t_end - t_factor},
        "noise_rank": factor.rank,
        "workers": workers,
        "divergent_indices": sorted(divergent_idx),
    }
    if collect_noise:
        meta["noise"] = collected_noise
    if collect_trajectories:
        meta["trajectories"] = collected_traj
    return EnsembleResult(
        times=s.grid.times[:: stride], weights=np.asarray(dec.weights), states0=np.asarray(dec.states), free=free,
        counts=counts, psi_sum=psi_sum, phi_sum=phi_sum, rho_sum=rho_sum, overlap_sum=ovl,
        overlap_unpaired_sum=ovl_u, n_traj=int(n_traj), divergent_count=int(divergent),
        master_seed=int(master_seed), paired=paired, meta=meta,
    )


# --------------------------------------------------------------------------
# estimators


def mean_wavefunction(E: EnsembleResult, alpha: int = 0):
    """``<Psi_alpha(t)>`` from kets only, with SE; shapes (T, d)."""
    return E.mean_se(E.psi_sum[alpha])


def overlap_matrix(E: EnsembleResult, paired: bool = True):
    """``<<Psi_a(t)|Psi_b(t)>>`` with the co-state on the bra side (or the ket, if not ``paired``).

    Returns ``(overlap, se)`` of shape ``(T, A, A)``.
    """
    return E.mean_se(E.overlap_sum if paired else E.overlap_unpaired_sum)


@dataclass(frozen=True)
class DensityEstimate:
    raw: np.ndarray
    raw_se: np.ndarray
    hermitized: np.ndarray
    hermitized_se: np.ndarray
    trace_deviation: np.ndarray
    hermiticity_deviation: np.ndarray
    min_eigenvalue: np.ndarray


def estimate_density(E: EnsembleResult) -> DensityEstimate:
    """Raw and hermitized ``rho_hat(t)`` with SE and diagnostics (nothing is clipped)."""
    bm = E.rho_batches()
    raw = E.rho_total()
    herm_b = 0.5 * (bm + bm.conj().swapaxes(-1, -2))
    herm = 0.5 * (raw + raw.conj().swapaxes(-1, -2))
    return DensityEstimate(
        raw=raw,
        raw_se=batch_se(bm),
        hermitized=herm,
        hermitized_se=batch_se(herm_b),
        trace_deviation=np.abs(np.trace(raw, axis1=-2, axis2=-1) - 1.0),
        hermiticity_deviation=np.max(np.abs(raw - raw.conj().swapaxes(-1, -2)), axis=(-2, -1)),
        min_eigenvalue=np.linalg.eigvalsh(herm)[..., 0],
    )


def noise_from_meta(E: EnsembleResult) -> NoiseSample | None:
    parts = E.meta.get("noise")
    if not parts:
        return None
    return NoiseSample(np.concatenate([p.X for p in parts]), np.concatenate([p.Y for p in parts]), parts[0].hbar)
