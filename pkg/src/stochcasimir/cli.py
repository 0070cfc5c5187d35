"""Command-line front end.

Commands: ``analyze``, ``simulate``, ``verify-bounds``, ``shear`` and
``convergence``.  Each reads a JSON configuration validated against
``data/config.schema.json`` and writes its results to ``--out``.

Exit codes: 0 success or certified, 1 certification-negative result,
2 input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .sde import EnsembleSpec, IntegratorConfig, StepFailure, simulate_ensemble, strong_convergence_order
from .shearflow import ProfileError, read_profile_csv, shear_certificate
from .stability import (
    CertificationError,
    certify,
    gronwall_bound,
    initial_offset,
    linearized_system,
    markov_bound,
    stopping_time,
)
from .systems import system_from_dict

log = logging.getLogger("stochcasimir")

EXIT_OK, EXIT_NEGATIVE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
DEFAULT_EPS_OVER_DELTA = 100.0
# Relative slack for floating-point rounding in the sample mean at t = 0,
# where the stderr is exactly zero and the mean equals the bound analytically.
ROUNDING_SLACK = 1e-12


class InputError(ValueError):
    """Invalid configuration or input file."""


# -- configuration -----------------------------------------------------------

def load_schema() -> dict:
    return json.loads(resources.files("stochcasimir").joinpath("data/config.schema.json").read_text("utf-8"))


def fixture_path(name: str) -> Path:
    """Path of a shipped fixture (``rigid_body.json``, ``shear_cosh.csv``, ...)."""
    return Path(str(resources.files("stochcasimir").joinpath("data", name)))


def load_config(path) -> dict:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    validate_config(cfg)
    cfg["_base"] = str(path.resolve().parent)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from None


def _resolve(cfg: dict, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else Path(cfg.get("_base", ".")) / p


def build_system(cfg: dict):
    if "system" in cfg and "system_file" in cfg:
        raise InputError("give either 'system' or 'system_file', not both")
    if "system_file" in cfg:
        try:
            spec = json.loads(_resolve(cfg, cfg["system_file"]).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read system file: {exc}") from None
    elif "system" in cfg:
        spec = cfg["system"]
    else:
        raise InputError("config needs a 'system' definition")
    try:
        return system_from_dict(spec)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid system definition: {exc}") from None


def _equilibrium(cfg: dict, system) -> np.ndarray:
    if "equilibrium" not in cfg:
        raise InputError("config needs an 'equilibrium'")
    mu = np.asarray(cfg["equilibrium"], dtype=float)
    if mu.shape != (system.dim,):
        raise InputError(f"equilibrium needs {system.dim} coordinates, got {mu.size}")
    return mu


def thresholds(cfg: dict, cert) -> tuple[np.ndarray, float, float]:
    """Initial offset and the ``(eps, delta)`` pair on the squared H_C norm.

    Without an explicit ``delta`` the offset's own norm is used; with one,
    the offset is rescaled to have exactly that norm.  ``eps`` defaults to
    ``100 * delta``.
    """
    off = cfg.get("initial_offset", {})
    d0 = initial_offset(cert.mu_e, off.get("scale", 1e-2), off.get("kind", "deterministic"), cfg.get("seed", 0))
    n0 = float(cert.norm_sq(d0))
    delta = cfg.get("delta")
    if delta is not None:
        d0 = d0 * math.sqrt(delta / n0)
    else:
        delta = n0
    eps = cfg.get("eps", DEFAULT_EPS_OVER_DELTA * delta)
    if not eps > delta:
        raise InputError(f"need eps > delta, got eps={eps}, delta={delta}")
    return d0, float(eps), float(delta)


def _write_json(path: Path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _num(x: float):
    return x if math.isfinite(x) else None


# -- commands ----------------------------------------------------------------

def cmd_analyze(cfg: dict, out: Path) -> int:
    system = build_system(cfg)
    mu_e = _equilibrium(cfg, system)
    try:
        cert = certify(system, mu_e, phi_grid=cfg.get("phi_grid"))
    except CertificationError as exc:
        _write_json(out / "certificate.json", exc.to_dict())
        print(f"not certified ({exc.stage}): {exc.reason}")
        return EXIT_NEGATIVE
    d0, eps, delta = thresholds(cfg, cert)
    cert.stopping_times = [(eps, delta, cert.stopping_time(eps, delta))]
    data = cert.to_dict()
    data["system"] = system.to_dict()
    data["initial_offset"] = d0.tolist()
    _write_json(out / "certificate.json", data)
    t_max = cert.stopping_times[0][2]
    print(f"certified ({cert.sign_label} definite): sigma_sq_tight={cert.sigma_sq_tight:.6g} "
          f"T_max={t_max:.6g} (eps/delta={eps / delta:.6g})")
    return EXIT_OK


def _ensemble_spec(section: dict, cfg: dict, **extra) -> EnsembleSpec:
    return EnsembleSpec(
        n_paths=section["n_paths"], t_final=section["t_final"], save_every=section.get("save_every", 1),
        master_seed=cfg.get("seed", 0), batch_size=section.get("batch_size", 512),
        workers=section.get("workers", 1), **extra,
    )


def cmd_simulate(cfg: dict, out: Path) -> int:
    system = build_system(cfg)
    mu_e = _equilibrium(cfg, system)
    sim = dict(cfg.get("simulate", {}))
    sim.setdefault("n_paths", 1000)
    sim.setdefault("t_final", 10.0)
    hist = sim.get("histogram")
    observables = sim.get("observables") or {f"mu{i + 1}": i for i in range(system.dim)}
    for name, i in observables.items():
        if i >= system.dim:
            raise InputError(f"observable {name!r} index {i} out of range")
    extra = {}
    if hist:
        extra = {"hist_observable": hist["observable"], "hist_range": tuple(hist.get("range", (-1.0, 1.0))),
                 "hist_bins": hist.get("bins", 200)}
        if hist["observable"] not in observables:
            raise InputError(f"histogram observable {hist['observable']!r} is not among the observables")
    try:
        spec = _ensemble_spec(sim, cfg, **extra)
        icfg = IntegratorConfig(sim.get("scheme", "implicit_midpoint"), sim.get("dt", 1e-2))
        cert = certify(system, mu_e, phi_grid=cfg.get("phi_grid"))
    except CertificationError:
        cert = None
    except ValueError as exc:
        raise InputError(str(exc)) from None

    linear = sim.get("model", "nonlinear") == "linearized"
    if cert is not None:
        d0, eps, delta = thresholds(cfg, cert)
    elif linear:
        raise InputError("the linearized model needs a certified equilibrium")
    else:
        off = cfg.get("initial_offset", {})
        d0 = initial_offset(mu_e, off.get("scale", 1e-2), off.get("kind", "deterministic"), cfg.get("seed", 0))
        eps = delta = None
        log.warning("equilibrium not certified; H_C norm statistics are omitted")
    if linear:
        model, x0, norm = linearized_system(system, cert), d0, cert.norm_sq
    else:
        model, x0 = system, mu_e + d0
        norm = cert.deviation_norm_sq if cert is not None else None
    try:
        res = simulate_ensemble(model, x0, spec, icfg, observables=observables, norm_sq=norm, eps=eps)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    res.provenance["model"] = "linearized" if linear else "nonlinear"
    if cert is not None:
        res.provenance.update({"delta": delta, "sigma_sq_tight": cert.sigma_sq_tight,
                               "T_max": _num(cert.stopping_time(eps, delta))})
    res.write(out / "ensemble.csv", out / "ensemble.meta.json")
    if res.n_failed:
        print(f"{res.n_failed} paths failed: {np.flatnonzero(res.failed).tolist()}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"simulated {res.n_paths} paths to t={spec.t_final}; wrote {out / 'ensemble.csv'}")
    return EXIT_OK


def verify_bounds(result, sigma_sq: float, norm0: float, eps: float) -> dict:
    """Compare an ensemble with the Gronwall and Markov bounds at every saved time."""
    t = result.t
    mean, se = result.norm_mean(), result.norm_stderr()
    freq, fse = result.exit_frequency(), result.exit_stderr()
    g = gronwall_bound(norm0, sigma_sq, t)
    m = markov_bound(norm0, sigma_sq, eps, t)
    margin_g = g + 3 * se + ROUNDING_SLACK * g - mean
    margin_m = m + 3 * fse - freq
    bad_g, bad_m = np.flatnonzero(margin_g < 0), np.flatnonzero(margin_m < 0)
    return {
        "t": t, "mean": mean, "stderr": se, "gronwall": g, "exit_freq": freq, "exit_stderr": fse,
        "markov": m, "margin_gronwall": margin_g, "margin_markov": margin_m,
        "passed": bool(bad_g.size == 0 and bad_m.size == 0),
        "violations": {
            "gronwall": [{"t": float(t[i]), "margin": float(margin_g[i])} for i in bad_g],
            "markov": [{"t": float(t[i]), "margin": float(margin_m[i])} for i in bad_m],
        },
    }


def cmd_verify_bounds(cfg: dict, out: Path, sigma_sq: float | None = None) -> int:
    system = build_system(cfg)
    mu_e = _equilibrium(cfg, system)
    try:
        cert = certify(system, mu_e, phi_grid=cfg.get("phi_grid"))
    except CertificationError as exc:
        _write_json(out / "bounds.json", {"passed": False, "certification": exc.to_dict()})
        print(f"not certified ({exc.stage}): {exc.reason}")
        return EXIT_NEGATIVE
    d0, eps, delta = thresholds(cfg, cert)
    vb = dict(cfg.get("verify_bounds", {}))
    if sigma_sq is None:
        sigma_sq = vb.get("sigma_sq", cert.sigma_sq_tight)
    t_max = stopping_time(eps, delta, sigma_sq)
    if "t_final" not in vb:
        vb["t_final"] = 5.0 if not math.isfinite(t_max) else max(5.0, math.ceil(t_max))
    vb.setdefault("n_paths", 10000)
    try:
        spec = _ensemble_spec(vb, cfg)
        icfg = IntegratorConfig(vb.get("scheme", "implicit_midpoint"), vb.get("dt", 5e-3))
        res = simulate_ensemble(linearized_system(system, cert), d0, spec, icfg,
                                norm_sq=cert.norm_sq, eps=eps)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    if res.n_failed:
        print(f"{res.n_failed} paths failed: {np.flatnonzero(res.failed).tolist()}", file=sys.stderr)
        return EXIT_RUNTIME
    rep = verify_bounds(res, sigma_sq, delta, eps)
    cols = ["t", "mean", "stderr", "gronwall", "exit_freq", "exit_stderr", "markov",
            "margin_gronwall", "margin_markov"]
    with open(out / "bounds.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(cols) + "\n")
        for row in np.column_stack([rep[c] for c in cols]):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    summary = {
        "passed": rep["passed"], "sigma_sq": sigma_sq, "sigma_sq_tight": cert.sigma_sq_tight,
        "sigma_sq_overridden": sigma_sq != cert.sigma_sq_tight, "eps": eps, "delta": delta,
        "T_max": _num(t_max), "n_paths": res.n_paths, "t_final": spec.t_final,
        "violations": rep["violations"], "provenance": res.provenance,
    }
    _write_json(out / "bounds.json", summary)
    if rep["passed"]:
        print(f"bounds hold at all {res.t.size} saved times (sigma_sq={sigma_sq:.6g})")
        return EXIT_OK
    v = rep["violations"]
    print(f"bounds violated (sigma_sq={sigma_sq:.6g}): {len(v['gronwall'])} Gronwall and "
          f"{len(v['markov'])} Markov violations; first at t={(v['gronwall'] or v['markov'])[0]['t']:.6g}")
    return EXIT_NEGATIVE


def cmd_shear(cfg: dict, out: Path, profile_path=None) -> int:
    sh = cfg.get("shear", {})
    if profile_path is None:
        if "profile" not in sh:
            raise InputError("config needs a 'shear.profile' CSV")
        profile_path = _resolve(cfg, sh["profile"])
    try:
        profile = read_profile_csv(profile_path, sh.get("boundary", "clamped"), sh.get("period"))
    except FileNotFoundError:
        raise InputError(f"profile not found: {profile_path}") from None
    except ProfileError as exc:
        raise InputError(str(exc)) from None
    eps = cfg.get("eps", DEFAULT_EPS_OVER_DELTA)
    delta = cfg.get("delta", 1.0)
    if not eps > delta:
        raise InputError(f"need eps > delta, got eps={eps}, delta={delta}")
    try:
        rep = shear_certificate(profile, eps, delta)
    except CertificationError as exc:
        data = exc.to_dict()
        _write_json(out / "shear.json", data)
        print(f"not certified: {exc.reason}")
        return EXIT_NEGATIVE
    _write_json(out / "shear.json", rep)
    t_max = "unbounded" if rep["unbounded"] else f"{rep['T_max']:.6g}"
    print(f"sign test {rep['sign_test']['verdict']}: sigma1_sq={rep['sigma1_sq']:.6g} T_max={t_max}")
    return EXIT_OK


def cmd_convergence(cfg: dict, out: Path) -> int:
    system = build_system(cfg)
    conv = cfg.get("convergence", {})
    if conv.get("deterministic", False):
        spec = dict(cfg["system"]) if "system" in cfg else None
        if spec is None:
            raise InputError("deterministic convergence needs an inline 'system'")
        spec["noise"] = [[0.0] * system.dim]
        system = system_from_dict(spec)
    if "initial_state" in conv:
        mu0 = np.asarray(conv["initial_state"], dtype=float)
    else:
        mu_e = _equilibrium(cfg, system)
        mu0 = mu_e + initial_offset(mu_e, cfg.get("initial_offset", {}).get("scale", 1e-2))
    if mu0.shape != (system.dim,):
        raise InputError(f"initial state needs {system.dim} coordinates")
    levels = conv.get("dt_levels", [2.0**-k for k in range(6, 11)])
    try:
        rep = strong_convergence_order(system, mu0, levels, conv.get("n_paths", 200), cfg.get("seed", 0),
                                       t_final=conv.get("t_final", 1.0), scheme=conv.get("scheme", "heun"),
                                       reference_factor=conv.get("reference_factor", 16))
    except ValueError as exc:
        raise InputError(str(exc)) from None
    data = rep.to_dict()
    data.update({"scheme": conv.get("scheme", "heun"), "n_paths": conv.get("n_paths", 200),
                 "seed": cfg.get("seed", 0), "initial_state": mu0.tolist(),
                 "deterministic": conv.get("deterministic", False)})
    _write_json(out / "convergence.json", data)
    if rep.order is None:
        print(rep.notice)
    else:
        print(f"strong order {rep.order:.4f} from errors {', '.join(f'{e:.3e}' for e in rep.errors)}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochcasimir", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("analyze", "certify an equilibrium and report Sigma^2 and T_max"),
        ("simulate", "run a Monte Carlo ensemble and write CSV statistics"),
        ("verify-bounds", "check the Gronwall and Markov bounds on the linearized ensemble"),
        ("shear", "shear-flow sign test and noise constant from a profile CSV"),
        ("convergence", "estimate the strong order of the integrator"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="JSON configuration (see data/config.schema.json)")
        s.add_argument("--seed", type=int, help="master seed")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--paths", type=int, help="number of Monte Carlo paths")
        s.add_argument("--dt", type=float, help="time step")
        s.add_argument("--t-final", type=float, help="final time")
        s.add_argument("--eps", type=float, help="exit threshold on the squared H_C norm")
        s.add_argument("--delta", type=float, help="initial squared H_C norm")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "verify-bounds":
            s.add_argument("--sigma-sq", type=float, help="override Sigma^2 used in the bounds")
        if name == "shear":
            s.add_argument("--profile", help="profile CSV (columns y,u,eta_1,...)")
    return p


SECTION = {"simulate": "simulate", "verify-bounds": "verify_bounds", "convergence": "convergence"}


def apply_overrides(cfg: dict, args) -> dict:
    """Fold command-line flags into the configuration and re-validate it."""
    base = cfg.pop("_base", None)
    for key in ("seed", "eps", "delta"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    sec = SECTION.get(args.command)
    if sec is not None:
        block = cfg.setdefault(sec, {})
        for flag, key in (("paths", "n_paths"), ("dt", "dt"), ("t_final", "t_final")):
            val = getattr(args, flag)
            if val is not None:
                if sec == "convergence" and key == "dt":
                    raise InputError("--dt does not apply to convergence; set convergence.dt_levels")
                block[key] = val
    validate_config(cfg)
    if base is not None:
        cfg["_base"] = base
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is None:
            if args.command == "shear" and args.profile:
                cfg = {}
            else:
                raise InputError("--config is required")
        else:
            cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "analyze":
            return cmd_analyze(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(cfg, out, args.sigma_sq)
        if args.command == "shear":
            return cmd_shear(cfg, out, args.profile)
        return cmd_convergence(cfg, out)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StepFailure as exc:
        print(f"runtime failure: {exc} (paths {exc.paths})", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every unexpected error maps to exit code 3
        log.debug("unhandled error", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
