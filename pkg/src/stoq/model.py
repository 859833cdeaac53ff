"""Data model for an open system coupled bilinearly to a bath.

The total Hamiltonian is ``H_S + H_W + sum_j S_j W_j``.  Only the system
side (``H_S``, the coupling operators ``S_j``) and a statistical
description of the bath (its spectrum matrix and temperature) live here;
explicit bath operators are built by :mod:`stoq.oracle`.

All containers are frozen dataclasses holding numpy arrays that are made
read-only on construction, so scenarios can be shared freely between
workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

HERMITIAN_RTOL = 1e-12
NORM_TOL = 1e-12
STEP_PARAMETER_WARN = 0.1
MAX_CHANNELS = 8

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


class ModelError(ValueError):
    """Invalid model input.

    ``field`` names the offending part of the scenario (a JSON-pointer-like
    path) and ``magnitude`` the size of the violation, when meaningful.
    """

    def __init__(self, message: str, field: str = "", magnitude: float | None = None):
        super().__init__(message)
        self.field = field
        self.magnitude = magnitude


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def hermiticity_error(a: np.ndarray) -> float:
    """Relative deviation ``max|A - A^dag| / max(1, max|A|)``."""
    a = np.asarray(a)
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    return float(np.max(np.abs(a - a.conj().T))) / scale if a.size else 0.0


def as_hermitian(a: Any, name: str = "operator") -> np.ndarray:
    """Return ``a`` as a read-only complex square matrix, checking Hermiticity."""
    a = np.asarray(a, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ModelError(f"{name} must be a non-empty square matrix, got shape {a.shape}", name)
    err = hermiticity_error(a)
    if err > HERMITIAN_RTOL:
        raise ModelError(f"{name} is not Hermitian (relative deviation {err:.3e})", name, err)
    return _frozen(a)


# --------------------------------------------------------------------------
# spectra and bath


@dataclass(frozen=True)
class SpectralModel:
    """Real symmetric PSD spectrum matrix ``sigma_jm(omega)`` on ``omega >= 0``.

    ``kind == "continuous"``: ``omega`` is a quadrature grid and ``weights``
    holds ``sigma(omega)`` with shape ``(n_omega, J, J)``.
    ``kind == "discrete"``: ``omega`` are mode frequencies and ``weights``
    the per-mode matrices ``s_k``; the spectrum is ``sum_k s_k delta(omega - omega_k)``.

    ``recipe`` optionally records how a named spectrum was generated so it
    can be serialized by its parameters instead of its table.
    """

    kind: str
    omega: np.ndarray
    weights: np.ndarray
    recipe: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete"):
            raise ModelError(f"unknown spectrum kind {self.kind!r}", "bath/spectrum/kind")
        omega = np.asarray(self.omega, dtype=float).reshape(-1)
        w = np.asarray(self.weights, dtype=float)
        if w.ndim == 1:
            w = w[:, None, None]
        if w.ndim != 3 or w.shape[0] != omega.size or w.shape[1] != w.shape[2]:
            raise ModelError(
                f"spectrum weights must have shape (n_omega, J, J); got {w.shape} for {omega.size} frequencies",
                "bath/spectrum",
            )
        if omega.size and np.any(omega < 0):
            raise ModelError("spectrum frequencies must be >= 0", "bath/spectrum/omega", float(omega.min()))
        if np.any(np.diff(omega) <= 0):
            raise ModelError("spectrum frequencies must be strictly increasing", "bath/spectrum/omega")
        if self.kind == "discrete" and omega.size and omega[0] <= 0:
            raise ModelError("discrete mode frequencies must be > 0", "bath/spectrum/omega", float(omega[0]))
        asym = float(np.max(np.abs(w - w.transpose(0, 2, 1)))) if w.size else 0.0
        if asym > 1e-12 * max(1.0, float(np.max(np.abs(w)))):
            raise ModelError("spectrum matrix must be symmetric in channel indices", "bath/spectrum", asym)
        if w.size:
            lam_min = float(np.min(np.linalg.eigvalsh(w)))
            if lam_min < -1e-12 * max(1.0, float(np.max(np.abs(w)))):
                raise ModelError("spectrum matrix must be positive semidefinite", "bath/spectrum", lam_min)
        object.__setattr__(self, "omega", _frozen(omega))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def n_channels(self) -> int:
        return self.weights.shape[1]

    def scaled(self, c: float) -> "SpectralModel":
        return SpectralModel(self.kind, self.omega, c * self.weights)


def ohmic_spectrum(
    eta: float,
    omega_c: float,
    omega_max: float | None = None,
    n_omega: int = 20001,
) -> SpectralModel:
    """Single-channel Ohmic spectrum ``eta * omega * exp(-omega/omega_c)``.

    The table runs from 0 to ``omega_max`` (default ``30 * omega_c``) on an
    evenly spaced grid.
    """
    if eta < 0 or omega_c <= 0:
        raise ModelError("Ohmic spectrum needs eta >= 0 and omega_c > 0", "bath/spectrum")
    if omega_max is None:
        omega_max = 30.0 * omega_c
    omega = np.linspace(0.0, omega_max, int(n_omega))
    sigma = eta * omega * np.exp(-omega / omega_c)
    recipe = {"model": "ohmic", "eta": eta, "omega_c": omega_c, "omega_max": omega_max, "n_omega": int(n_omega)}
    return SpectralModel("continuous", omega, sigma[:, None, None], recipe=recipe)


def discrete_spectrum(omegas: Sequence[float], weights: Sequence[Any]) -> SpectralModel:
    """Discrete spectrum from mode frequencies and weights (scalars or J x J matrices)."""
    w = np.asarray(weights, dtype=float)
    if w.ndim == 1:
        w = w[:, None, None]
    return SpectralModel("discrete", np.asarray(omegas, dtype=float), w)


@dataclass(frozen=True)
class BathSpec:
    """Equilibrium bath: temperature (``math.inf`` is the infinite-T tag), hbar, spectrum."""

    temperature: float
    spectral: SpectralModel
    hbar: float = 1.0

    def __post_init__(self):
        T = float(self.temperature)
        if not (T > 0):
            raise ModelError("temperature must be > 0 or infinite", "bath/T", T)
        if not (self.hbar > 0) or not math.isfinite(self.hbar):
            raise ModelError("hbar must be finite and > 0", "bath/hbar", self.hbar)
        object.__setattr__(self, "temperature", T)

    @property
    def infinite_temperature(self) -> bool:
        return math.isinf(self.temperature)


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    dt: float
    n_steps: int

    def __post_init__(self):
        if not (self.dt > 0) or not math.isfinite(self.dt):
            raise ModelError("dt must be finite and > 0", "grid/dt", self.dt)
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ModelError("n_steps must be a positive integer", "grid/n_steps", self.n_steps)
        object.__setattr__(self, "n_steps", int(self.n_steps))

    @property
    def times(self) -> np.ndarray:
        """Step boundaries ``t0 + n dt``, ``n = 0..n_steps``."""
        return self.t0 + self.dt * np.arange(self.n_steps + 1)

    @property
    def midpoints(self) -> np.ndarray:
        """Noise sampling times ``t0 + (n + 1/2) dt``, ``n = 0..n_steps-1``."""
        return self.t0 + self.dt * (np.arange(self.n_steps) + 0.5)

    @property
    def horizon(self) -> float:
        return self.dt * self.n_steps


@dataclass(frozen=True)
class Scenario:
    """Full simulation input.

    ``initial`` is either a state vector (1-D) or a density matrix (2-D).
    """

    system: np.ndarray
    couplings: tuple
    bath: BathSpec
    initial: np.ndarray
    grid: TimeGrid
    label: str = ""

    def __post_init__(self):
        h = as_hermitian(self.system, "system")
        couplings = tuple(as_hermitian(s, f"couplings/{j}") for j, s in enumerate(self.couplings))
        object.__setattr__(self, "system", h)
        object.__setattr__(self, "couplings", couplings)
        d = h.shape[0]
        for j, s in enumerate(couplings):
            if s.shape != h.shape:
                raise ModelError(f"coupling {j} has shape {s.shape}, system has {h.shape}", f"couplings/{j}")
        if len(couplings) > MAX_CHANNELS:
            raise ModelError(f"at most {MAX_CHANNELS} coupling channels supported", "couplings", len(couplings))
        if len(couplings) != self.bath.spectral.n_channels:
            raise ModelError(
                f"{len(couplings)} coupling operators but spectrum has {self.bath.spectral.n_channels} channels",
                "couplings",
            )
        init = np.asarray(self.initial, dtype=complex)
        if init.ndim == 1:
            if init.shape[0] != d:
                raise ModelError(f"initial state has length {init.shape[0]}, expected {d}", "initial")
            err = abs(np.linalg.norm(init) - 1.0)
            if err > NORM_TOL:
                raise ModelError("initial state must have unit norm", "initial", err)
        elif init.ndim == 2:
            if init.shape != (d, d):
                raise ModelError(f"initial density matrix has shape {init.shape}, expected {(d, d)}", "initial")
            as_hermitian(init, "initial")
            err = abs(np.trace(init) - 1.0)
            if err > NORM_TOL:
                raise ModelError("initial density matrix must have unit trace", "initial", float(err))
        else:
            raise ModelError("initial must be a vector or a matrix", "initial")
        object.__setattr__(self, "initial", _frozen(init))

    @property
    def dim(self) -> int:
        return self.system.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.couplings)

    @property
    def hbar(self) -> float:
        return self.bath.hbar

    @property
    def pure(self) -> bool:
        return self.initial.ndim == 1

    def initial_decomposition(self) -> "InitialDecomposition":
        if self.pure:
            return InitialDecomposition(np.array([1.0]), self.initial[None, :])
        return decompose_initial(self.initial)

    def replace(self, **changes) -> "Scenario":
        kw = dict(
            system=self.system,
            couplings=self.couplings,
            bath=self.bath,
            initial=self.initial,
            grid=self.grid,
            label=self.label,
        )
        kw.update(changes)
        return Scenario(**kw)


@dataclass(frozen=True)
class InitialDecomposition:
    """Weights ``P_alpha`` and orthonormal states (rows of ``states``)."""

    weights: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        v = np.atleast_2d(np.asarray(self.states, dtype=complex))
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ModelError("weights must be non-negative and sum to 1", "initial", float(abs(w.sum() - 1)))
        gram = v.conj() @ v.T
        err = float(np.max(np.abs(gram - np.eye(len(w))))) if len(w) else 0.0
        if err > 1e-10:
            raise ModelError("initial states must be orthonormal", "initial", err)
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "states", _frozen(v))

    def __len__(self) -> int:
        return len(self.weights)

    def reassemble(self) -> np.ndarray:
        return (self.states.T * self.weights) @ self.states.conj()


def decompose_initial(rho: Any) -> InitialDecomposition:
    """Eigen-decompose a density matrix into weighted orthonormal pure states.

    Eigenvalues below 1e-12 are dropped and the remaining weights are
    renormalized; the dropped mass must stay below 1e-10.  States are
    ordered by descending weight, ties broken by eigenvector index.
    """
    rho = np.asarray(rho, dtype=complex)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ModelError(f"density matrix must be square, got shape {rho.shape}", "initial")
    herm = hermiticity_error(rho)
    if herm > 1e-10:
        raise ModelError(f"density matrix is not Hermitian (deviation {herm:.3e})", "initial", herm)
    tr = np.trace(rho)
    if abs(tr - 1.0) > 1e-10:
        raise ModelError(f"density matrix trace is {tr.real:.12g}, expected 1", "initial", float(abs(tr - 1)))
    evals, evecs = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    if evals[0] < -1e-10:
        raise ModelError(f"density matrix has negative eigenvalue {evals[0]:.3e}", "initial", float(evals[0]))
    order = np.lexsort((np.arange(evals.size), -evals))
    evals, evecs = evals[order], evecs[:, order]
    keep = evals >= 1e-12
    dropped = float(np.sum(np.abs(evals[~keep])))
    if dropped >= 1e-10:
        raise ModelError(f"dropped eigenvalue mass {dropped:.3e} too large", "initial", dropped)
    w = evals[keep]
    return InitialDecomposition(w / w.sum(), evecs[:, keep].T)


# --------------------------------------------------------------------------
# prebuilt scenarios


def build_two_level_scenario(
    splitting: float,
    coupling_axis: str,
    strength: float,
    bath: BathSpec,
    grid: TimeGrid,
    initial: Any = None,
) -> Scenario:
    """Two-level system ``(splitting/2) sigma_z`` coupled through ``strength * sigma_{x|z}``."""
    if splitting < 0 or strength < 0:
        raise ModelError("splitting and strength must be >= 0", "system")
    if coupling_axis not in ("x", "z"):
        raise ModelError(f"coupling_axis must be 'x' or 'z', got {coupling_axis!r}", "couplings/0")
    pauli = PAULI_X if coupling_axis == "x" else PAULI_Z
    if initial is None:
        initial = np.array([1.0, 0.0], dtype=complex)
    return Scenario(
        system=0.5 * splitting * PAULI_Z,
        couplings=(strength * pauli,),
        bath=bath,
        initial=np.asarray(initial, dtype=complex),
        grid=grid,
        label=f"two-level/{coupling_axis}",
    )


def tight_binding_chain(n_sites: int, hopping: float) -> np.ndarray:
    """Open tight-binding chain with ``-hopping`` on the nearest-neighbor off-diagonals."""
    h = np.zeros((n_sites, n_sites), dtype=complex)
    idx = np.arange(n_sites - 1)
    h[idx, idx + 1] = -hopping
    h[idx + 1, idx] = -hopping
    return h


def gaussian_packet(n_sites: int, center: float, width: float, momentum: float) -> np.ndarray:
    """Normalized lattice wave packet ``exp(-(n-c)^2 / (4 w^2) + i k n)``."""
    n = np.arange(n_sites)
    psi = np.exp(-((n - center) ** 2) / (4.0 * width**2) + 1j * momentum * n)
    return psi / np.linalg.norm(psi)


def build_channel_scenario(
    n_sites: int,
    hopping: float,
    scatterer_site: int,
    packet: tuple,
    bath: BathSpec,
    grid: TimeGrid,
    strength: float = 1.0,
) -> Scenario:
    """Wave packet on an open chain with one noisy site.

    ``packet = (center, width, momentum)``.  The coupling operator is
    ``strength`` times the projector onto ``scatterer_site``.
    """
    if n_sites < 32:
        raise ModelError("channel needs at least 32 sites", "system", n_sites)
    if not 0 <= scatterer_site < n_sites:
        raise ModelError("scatterer site outside the chain", "couplings/0", scatterer_site)
    center, width, momentum = packet
    full = gaussian_packet(4 * n_sites, center + 1.5 * n_sites, width, momentum)
    inside = full[int(1.5 * n_sites) : int(2.5 * n_sites)]
    outside = 1.0 - float(np.sum(np.abs(inside) ** 2))
    if outside > 1e-6:
        raise ModelError(
            f"wave packet overlaps the chain ends (outside norm {outside:.2e})", "initial", outside
        )
    proj = np.zeros((n_sites, n_sites), dtype=complex)
    proj[scatterer_site, scatterer_site] = strength
    return Scenario(
        system=tight_binding_chain(n_sites, hopping),
        couplings=(proj,),
        bath=bath,
        initial=gaussian_packet(n_sites, center, width, momentum),
        grid=grid,
        label="channel",
    )


# --------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    step_parameter: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.errors

    def __bool__(self) -> bool:  # truthy when there is something to report
        return bool(self.errors or self.warnings)

    def to_dict(self) -> dict:
        return {"errors": self.errors, "warnings": self.warnings, "step_parameter": self.step_parameter}


def step_parameter(s: Scenario) -> float:
    """``max_j ||S_j|| sqrt(K_jj(0)) dt / hbar``, the dimensionless noise kick per step."""
    sp = s.bath.spectral
    if sp.kind == "discrete":
        k0 = sp.weights.sum(axis=0)
    else:
        k0 = np.trapezoid(sp.weights, sp.omega, axis=0) if sp.omega.size > 1 else np.zeros_like(sp.weights[0])
    vals = [np.linalg.norm(S, 2) * math.sqrt(max(float(k0[j, j]), 0.0)) for j, S in enumerate(s.couplings)]
    return max(vals, default=0.0) * s.grid.dt / s.hbar


def validate_model(s: Any) -> ValidationReport:
    """Check the invariants of a scenario and estimate the step parameter.

    Accepts either a :class:`Scenario` or the raw JSON mapping (so that
    invariant violations are reported instead of raised).
    """
    report = ValidationReport()
    if not isinstance(s, Scenario):
        try:
            s = scenario_from_dict(s)
        except ModelError as exc:
            report.errors.append({"field": exc.field, "message": str(exc), "magnitude": exc.magnitude})
            return report
    report.step_parameter = step_parameter(s)
    if report.step_parameter > STEP_PARAMETER_WARN:
        report.warnings.append(
            {
                "field": "grid/dt",
                "message": f"step parameter {report.step_parameter:.3g} exceeds {STEP_PARAMETER_WARN}",
                "magnitude": report.step_parameter,
            }
        )
    return report


# --------------------------------------------------------------------------
# JSON


def encode_complex(a: Any) -> Any:
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def decode_complex(x: Any, where: str = "") -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if a.ndim == 0 or a.shape[-1] != 2:
        raise ModelError("complex arrays must be nested lists of [re, im] pairs", where)
    out = np.empty(a.shape[:-1], dtype=complex)
    out.real, out.imag = a[..., 0], a[..., 1]  # keeps signed zeros
    return out


def _encode_temperature(T: float) -> Any:
    return "inf" if math.isinf(T) else T


def spectrum_to_dict(sp: SpectralModel) -> dict:
    if sp.recipe is not None:
        return {"kind": sp.kind, **sp.recipe}
    return {"kind": sp.kind, "omega": sp.omega.tolist(), "weights": sp.weights.tolist()}


def spectrum_from_dict(d: dict) -> SpectralModel:
    model = d.get("model")
    if model == "ohmic":
        try:
            return ohmic_spectrum(d["eta"], d["omega_c"], d.get("omega_max"), d.get("n_omega", 20001))
        except KeyError as exc:
            raise ModelError(f"ohmic spectrum missing {exc.args[0]}", f"bath/spectrum/{exc.args[0]}") from None
    if model is not None:
        raise ModelError(f"unknown named spectrum {model!r}", "bath/spectrum/model")
    for key in ("kind", "omega", "weights"):
        if key not in d:
            raise ModelError(f"spectrum missing {key!r}", f"bath/spectrum/{key}")
    return SpectralModel(d["kind"], np.asarray(d["omega"], dtype=float), np.asarray(d["weights"], dtype=float))


def scenario_to_dict(s: Scenario) -> dict:
    return {
        "label": s.label,
        "system": encode_complex(s.system),
        "couplings": [encode_complex(c) for c in s.couplings],
        "bath": {
            "T": _encode_temperature(s.bath.temperature),
            "hbar": s.bath.hbar,
            "spectrum": spectrum_to_dict(s.bath.spectral),
        },
        "initial": encode_complex(s.initial),
        "grid": {"t0": s.grid.t0, "dt": s.grid.dt, "n_steps": s.grid.n_steps},
    }


def scenario_from_dict(d: dict) -> Scenario:
    if not isinstance(d, dict):
        raise ModelError("scenario must be a JSON object", "")
    for key in ("system", "couplings", "bath", "initial", "grid"):
        if key not in d:
            raise ModelError(f"scenario missing {key!r}", key)
    bath = d["bath"]
    for key in ("T", "spectrum"):
        if key not in bath:
            raise ModelError(f"bath missing {key!r}", f"bath/{key}")
    T = bath["T"]
    T = math.inf if isinstance(T, str) and T.lower() in ("inf", "infinite", "infinity") else T
    if not isinstance(T, (int, float)):
        raise ModelError(f"bath temperature must be a number or 'inf', got {T!r}", "bath/T")
    grid = d["grid"]
    for key in ("t0", "dt", "n_steps"):
        if key not in grid:
            raise ModelError(f"grid missing {key!r}", f"grid/{key}")
    return Scenario(
        system=decode_complex(d["system"], "system"),
        couplings=tuple(decode_complex(c, f"couplings/{j}") for j, c in enumerate(d["couplings"])),
        bath=BathSpec(float(T), spectrum_from_dict(bath["spectrum"]), float(bath.get("hbar", 1.0))),
        initial=decode_complex(d["initial"], "initial"),
        grid=TimeGrid(float(grid["t0"]), float(grid["dt"]), grid["n_steps"]),
        label=d.get("label", ""),
    )


def scenario_to_json(s: Scenario) -> str:
    return json.dumps(scenario_to_dict(s), indent=1)


def scenario_from_json(text: str) -> Scenario:
    return scenario_from_dict(json.loads(text))
