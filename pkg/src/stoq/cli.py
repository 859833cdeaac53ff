"""Command-line workflows: run, validate, compare, analyze.

Exit codes: 0 success, 2 configuration error, 3 numerical-regime error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    AnalysisError,
    gibbs_distance,
    inelastic_probability,
    norm_identity,
    optical_residual,
    scattering_decomposition,
    unitarity_residual,
)
from .bathcorr import BathCorrError, correlations_for_grid, fdt_diagnostics
from .dynamics import StepSizeError, dump_trajectories
from .ensemble import EnsembleError, EnsembleResult, batch_se, estimate_density, jackknife, noise_from_meta, run_ensemble
from .model import ModelError, Scenario, scenario_from_dict, validate_model
from .noisegen import NoiseError, dump_noise, empirical_moment_check, noise_factor, sample_noise_batch, trajectory_key
from .oracle import BathModeSet, OracleError, exact_reduced_dynamics, trace_distance

log = logging.getLogger("stoq")

EXIT_OK, EXIT_CONFIG, EXIT_REGIME, EXIT_VERIFY = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int, module: str = "cli", pointer: str = ""):
        super().__init__(message)
        self.code = code
        self.module = module
        self.pointer = pointer

    def __str__(self):
        where = f" at {self.pointer}" if self.pointer else ""
        return f"[{self.module}]{where}: {self.args[0]}"


# --------------------------------------------------------------------------
# config


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_CONFIG, "cli") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"malformed JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})", EXIT_CONFIG, "cli") from None
    if not isinstance(cfg, dict):
        raise CliError("config must be a JSON object", EXIT_CONFIG, "cli", "/")
    return cfg


def scenario_of(cfg: dict) -> tuple[Scenario, str]:
    nested = "scenario" in cfg
    prefix = "/scenario" if nested else ""
    try:
        s = scenario_from_dict(cfg["scenario"] if nested else cfg)
    except ModelError as exc:
        raise CliError(str(exc.args[0]), EXIT_CONFIG, "model", f"{prefix}/{exc.field}".rstrip("/")) from None
    except (TypeError, ValueError) as exc:
        raise CliError(str(exc), EXIT_CONFIG, "model", prefix or "/") from None
    return s, prefix


def _check_model(s: Scenario, prefix: str) -> dict:
    rep = validate_model(s)
    if rep.errors:
        first = rep.errors[0]
        raise CliError(first["message"], EXIT_CONFIG, "model", f"{prefix}/{first['field']}".rstrip("/") or "/")
    for w in rep.warnings:
        log.warning(w)
    return rep.to_dict()


def _block(cfg: dict, name: str) -> dict:
    b = cfg.get(name, {})
    if not isinstance(b, dict):
        raise CliError(f"'{name}' must be an object", EXIT_CONFIG, "cli", f"/{name}")
    return b


def _setting(args, cfg_block: dict, name: str, default):
    v = getattr(args, name, None)
    if v is None:
        v = cfg_block.get(name, default)
    return v


# --------------------------------------------------------------------------
# output helpers


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(path: Path, header: list, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, fields: dict, files: list) -> None:
    fields = dict(fields)
    fields["tool_version"] = __version__
    fields["files"] = {f: sha256(out / f) for f in files}
    write_json(out / "manifest.json", fields)


def verify_manifest(out: Path) -> dict:
    mpath = out / "manifest.json"
    if not mpath.exists():
        raise CliError(f"missing artifact {mpath}", EXIT_CONFIG, "cli")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"manifest is not valid JSON: {exc.msg}", EXIT_VERIFY, "cli") from None
    for name, digest in manifest.get("files", {}).items():
        p = out / name
        if not p.exists():
            raise CliError(f"missing artifact {name}", EXIT_CONFIG, "cli")
        if sha256(p) != digest:
            raise CliError(f"checksum mismatch for {name}", EXIT_VERIFY, "cli")
    return manifest


def _entries(d: int, wanted) -> list:
    if wanted:
        return [tuple(int(v) for v in e) for e in wanted]
    if d <= 4:
        return [(i, j) for i in range(d) for j in range(d)]
    return [(i, i) for i in range(d)]


def _cplx_cols(name):
    return [f"{name}_re", f"{name}_im", f"{name}_se_re", f"{name}_se_im"]


def _cplx_vals(v, se):
    return [v.real, v.imag, se.real, se.imag]


# --------------------------------------------------------------------------
# commands


def _run_ensemble(args, cfg, s: Scenario, prefix: str, collect=False):
    run = _block(cfg, "run")
    seed = int(_setting(args, run, "seed", 0))
    n = int(_setting(args, run, "trajectories", 1000))
    stride = int(run.get("stride", 1))
    det = bool(args.deterministic_reduce or run.get("deterministic_reduce", False))
    workers = args.workers if args.workers is not None else run.get("workers")
    if s.grid.n_steps % stride:
        raise CliError(f"stride {stride} must divide n_steps {s.grid.n_steps}", EXIT_CONFIG, "cli", "/run/stride")
    if n < 100:
        raise CliError("at least 100 trajectories are required", EXIT_CONFIG, "cli", "/run/trajectories")
    try:
        C = correlations_for_grid(s.bath.spectral, s.bath.temperature, s.hbar, s.grid)
        F = noise_factor(C)
        E = run_ensemble(
            s, n, seed, workers=workers, deterministic_reduce=det, stride=stride, factor=F,
            collect_noise=collect and args.dump_noise, collect_trajectories=collect and args.dump_trajectories,
        )
    except BathCorrError as exc:
        raise CliError(str(exc), EXIT_REGIME, "bathcorr", f"{prefix}/bath/spectrum") from None
    except NoiseError as exc:
        raise CliError(str(exc), EXIT_REGIME, "noisegen", f"{prefix}/bath") from None
    except StepSizeError as exc:
        raise CliError(str(exc), EXIT_REGIME, "dynamics", f"{prefix}/grid/dt") from None
    except EnsembleError as exc:
        raise CliError(f"{exc} {json.dumps(exc.diagnostics)}", EXIT_REGIME, "ensemble") from None
    return E, F, dict(seed=seed, trajectories=n, stride=stride, deterministic_reduce=det, workers=E.meta["workers"])


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    s, prefix = scenario_of(cfg)
    report = _check_model(s, prefix)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    E, F, settings = _run_ensemble(args, cfg, s, prefix, collect=True)
    D = estimate_density(E)
    entries = _entries(s.dim, _block(cfg, "run").get("entries"))
    header = ["t"]
    for i, j in entries:
        header += _cplx_cols(f"rho_{i}_{j}")
    header += _cplx_cols("trace") + ["hermiticity_dev", "min_eig_hermitized"]
    tr_b = np.trace(E.rho_batches(), axis1=-2, axis2=-1)
    tr, tr_se = np.trace(D.raw, axis1=-2, axis2=-1), batch_se(tr_b)
    rows = []
    for k, t in enumerate(E.times):
        row = [t]
        for i, j in entries:
            row += _cplx_vals(D.raw[k, i, j], D.raw_se[k, i, j])
        row += _cplx_vals(tr[k], tr_se[k]) + [D.hermiticity_deviation[k], D.min_eigenvalue[k]]
        rows.append(row)
    write_csv(out / "series.csv", header, rows)
    ovl, ovl_se = E.mean_se(E.overlap_sum)
    A = E.n_states
    oh = ["t"] + [c for a in range(A) for b in range(A) for c in _cplx_cols(f"overlap_{a}_{b}")]
    write_csv(
        out / "overlap.csv", oh,
        ([t] + [v for a in range(A) for b in range(A) for v in _cplx_vals(ovl[k, a, b], ovl_se[k, a, b])]
         for k, t in enumerate(E.times)),
    )
    E.save(out / "ensemble.npz")
    write_json(out / "config.json", cfg)
    summary = {
        "label": s.label,
        "master_seed": settings["seed"],
        "n_traj": E.n_traj,
        "n_used": E.n_used,
        "divergent_count": E.divergent_count,
        "divergent_fraction": E.divergent_fraction,
        "divergent_indices": E.meta["divergent_indices"][:100],
        "valid": E.valid,
        "paired_noise": E.paired,
        "diagnostics": {
            "validation": report,
            "noise_rank": F.rank,
            "factor_residual": F.residual,
            "max_trace_deviation": float(D.trace_deviation.max()),
            "max_hermiticity_deviation": float(D.hermiticity_deviation.max()),
            "min_eigenvalue_hermitized": float(D.min_eigenvalue.min()),
        },
    }
    write_json(out / "summary.json", summary)
    files = ["series.csv", "overlap.csv", "summary.json", "ensemble.npz", "config.json"]
    if args.dump_noise:
        dump_noise(out / "noise.bin", noise_from_meta(E))
        files.append("noise.bin")
    if args.dump_trajectories:
        p = out / "trajectories.bin"
        p.unlink(missing_ok=True)
        for psi, phi in E.meta["trajectories"]:
            dump_trajectories(p, psi)
            dump_trajectories(p, phi)
        files.append("trajectories.bin")
    timings = dict(E.meta["timings"], total_s=time.perf_counter() - t0)
    write_manifest(
        out,
        {
            "command": "run", "scenario_path": str(args.config), "master_seed": settings["seed"],
            "n_traj": settings["trajectories"], "workers": settings["workers"],
            "deterministic_reduce": settings["deterministic_reduce"], "output_directory": str(out),
            "timings": timings,
        },
        files,
    )
    log.info("run finished: %d trajectories, %d divergent", E.n_traj, E.divergent_count)
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    s, prefix = scenario_of(cfg)
    report = {"model": _check_model(s, prefix)}
    run = _block(cfg, "run")
    seed = int(_setting(args, run, "seed", 0))
    n = int(_setting(args, run, "trajectories", 2000))
    try:
        C = correlations_for_grid(s.bath.spectral, s.bath.temperature, s.hbar, s.grid)
        report["bathcorr"] = fdt_diagnostics(C)
        F = noise_factor(C)
    except BathCorrError as exc:
        report["bathcorr"] = {"passed": False, "error": str(exc), "index": exc.index}
        _emit(args, report, "validation.json")
        raise CliError(str(exc), EXIT_VERIFY, "bathcorr", f"{prefix}/bath/spectrum") from None
    except NoiseError as exc:
        raise CliError(str(exc), EXIT_VERIFY, "noisegen", f"{prefix}/bath") from None
    report["noisegen"] = {"rank": F.rank, "factor_residual": F.residual}
    samples = sample_noise_batch(F, [trajectory_key(seed, 0, i) for i in range(max(n, 1000))])
    report["noisegen"]["moments"] = empirical_moment_check(samples, C)
    ok = report["bathcorr"]["passed"] and report["noisegen"]["moments"]["passed"]
    report["passed"] = ok
    _emit(args, report, "validation.json")
    return EXIT_OK if ok else EXIT_VERIFY


def _emit(args, obj, name):
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / name, obj)
    print(json.dumps(obj, indent=1, default=_json_default))


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    s, prefix = scenario_of(cfg)
    report = _check_model(s, prefix)
    if "oracle" not in cfg:
        raise CliError("compare needs an 'oracle' block with bath modes", EXIT_CONFIG, "cli", "/oracle")
    try:
        modes = BathModeSet.from_dict(cfg["oracle"])
    except (KeyError, TypeError, OracleError) as exc:
        raise CliError(f"bad oracle block: {exc}", EXIT_CONFIG, "oracle", "/oracle/modes") from None
    threshold = float(cfg["oracle"].get("threshold", 0.02))
    E, F, settings = _run_ensemble(args, cfg, s, prefix)
    try:
        times, exact = exact_reduced_dynamics(s, modes, settings["stride"])
    except OracleError as exc:
        raise CliError(str(exc), EXIT_CONFIG, "oracle", "/oracle/modes") from None
    td, se = trace_distance_series(E, exact)
    ok_t = td <= np.maximum(threshold, 5.0 * se)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", ["t", "trace_distance", "se", "pass"], zip(times, td, se, ok_t.astype(float)))
    in_regime = not report["warnings"]
    verdict = {
        "passed": bool(ok_t.all()) and E.valid,
        "max_trace_distance": float(td.max()),
        "threshold": threshold,
        "step_parameter": report["step_parameter"],
        "in_regime": in_regime,
        "divergent_fraction": E.divergent_fraction,
    }
    write_json(out / "compare.json", verdict)
    write_manifest(out, {"command": "compare", "scenario_path": str(args.config), **settings}, ["compare.csv", "compare.json"])
    print(json.dumps(verdict, indent=1))
    if verdict["passed"]:
        return EXIT_OK
    return EXIT_VERIFY if in_regime else EXIT_REGIME


def trace_distance_series(E: EnsembleResult, exact: np.ndarray):
    """Trace distance of the hermitized estimate to ``exact`` per time, with jackknife SE."""
    w = np.tensordot(E.weights, E.rho_sum, axes=(0, 0))

    def stat(r):
        h = 0.5 * (r + r.conj().swapaxes(-1, -2))
        return np.array([trace_distance(h[k], exact[k], hermitize=True) for k in range(len(exact))])

    return jackknife(stat, w, counts=E.counts)


def cmd_analyze(args) -> int:
    out = Path(args.run_dir)
    manifest = verify_manifest(out)
    try:
        E = EnsembleResult.load(out / "ensemble.npz")
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(f"cannot load ensemble: {exc}", EXIT_CONFIG, "ensemble") from None
    cfg = load_config(out / "config.json")
    s, _ = scenario_of(cfg)
    acfg = _block(cfg, "analysis")
    checks, series = {}, {"t": E.times}
    U = unitarity_residual(E)
    checks["unitarity"] = {"passed": U.passed, "max_se_units": U.max_z, "exact_claim": True}
    series["unitarity_z"] = U.profile
    if E.n_states == 1:
        D = scattering_decomposition(E, system=s.system)
        R = optical_residual(D)
        checks["optical"] = {"passed": R.passed, "max_se_units": R.max_z, "exact_claim": True}
        series.update(optical_r_re=R.r.real, optical_r_im=R.r.imag, optical_se_re=R.se.real, optical_se_im=R.se.imag)
        NI = norm_identity(D)
        checks["norm_identity"] = {"passed": NI.passed, "max_se_units": NI.max_z,
                                   "algebraic_residual": NI.algebraic_residual, "exact_claim": True}
        if "inelastic_window" in acfg:
            try:
                I = inelastic_probability(E, D, s.system, acfg["inelastic_window"])
            except AnalysisError as exc:
                checks["inelastic"] = {"passed": False, "error": str(exc), "exact_claim": True}
            else:
                checks["inelastic"] = {
                    "passed": I.passed, "mean_bound": I.passed_mean_bound, "half_bound": I.passed_half_bound,
                    "band": I.band, "max_p_inel": float(I.p_inel[I.window].max()), "exact_claim": True,
                }
                series.update(p_inel=I.p_inel, p_inel_se=I.p_inel_se, norm_deficit=I.norm_deficit)
    if "gibbs_window" in acfg:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            G = gibbs_distance(E, s, acfg["gibbs_window"])
        checks["gibbs"] = {"passed": G.distance <= 0.05, "distance": G.distance, "se": G.distance_se,
                           "warnings": list(G.warnings), "exact_claim": False}
    names = list(series)
    write_csv(out / "residuals.csv", names, zip(*(series[n] for n in names)))
    failed = [k for k, v in checks.items() if v["exact_claim"] and not v["passed"]]
    verdict = {"checks": checks, "failed": failed, "passed": not failed, "run_seed": manifest.get("master_seed")}
    write_json(out / "analysis.json", verdict)
    print(json.dumps(verdict, indent=1, default=_json_default))
    return EXIT_VERIFY if failed else EXIT_OK


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stoq", description="Stochastic open-system trajectories")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", required=True, help="scenario JSON (optionally with run/oracle/analysis blocks)")
        sp.add_argument("--seed", type=int, help="master seed (u64)")
        sp.add_argument("--trajectories", type=int)
        sp.add_argument("--workers", type=int, default=None, help="worker processes (fallback: STOQ_WORKERS)")
        sp.add_argument("--deterministic-reduce", action="store_true")
        sp.add_argument("--out", required=out_required)

    r = sub.add_parser("run", help="run an ensemble and write series, summary and manifest")
    common(r)
    r.add_argument("--dump-noise", action="store_true", help="write sampled X, Y to noise.bin")
    r.add_argument("--dump-trajectories", action="store_true", help="write psi and phi to trajectories.bin")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="correlation and noise diagnostics")
    common(v, out_required=False)
    v.set_defaults(func=cmd_validate)

    c = sub.add_parser("compare", help="ensemble against the exact truncated-bath oracle")
    common(c)
    c.set_defaults(func=cmd_compare)

    a = sub.add_parser("analyze", help="check identities on a finished run directory")
    a.add_argument("run_dir")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "workers", None) is None and "STOQ_WORKERS" in os.environ:
        try:
            args.workers = int(os.environ["STOQ_WORKERS"])
        except ValueError:
            print("error [cli]: STOQ_WORKERS must be an integer", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error {exc}", file=sys.stderr)
        return exc.code
    except ModelError as exc:
        print(f"error [model] at /{exc.field}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
