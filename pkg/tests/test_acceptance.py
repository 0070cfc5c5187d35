"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line (visible with ``pytest -v``
or ``-s``) before asserting, so a full run doubles as a report.
"""
import csv
import json
import math
import time

import numpy as np
import pytest

from stochcasimir.cli import cmd_simulate, fixture_path, load_config, thresholds, verify_bounds
from stochcasimir.sde import (
    EnsembleSpec,
    IntegratorConfig,
    brownian_increments,
    simulate_ensemble,
    simulate_path,
    strong_convergence_order,
)
from stochcasimir.shearflow import ShearFlowProfile, bernoulli_sign_test, sigma1
from stochcasimir.stability import CertificationError, certify, generator_quadratic_form, linearized_system
from stochcasimir.systems import make_heavy_top, make_rigid_body

RB = make_rigid_body(3.0, 2.0, 1.0, 0.5)
E1 = np.array([1.0, 0.0, 0.0])
# Oracle for the tight noise constant of the (3, 2, 1) body with sigma = 0.5.
# Frozen from the closed-form generator diag(0, sigma^2/2, -sigma^2/2) and the
# phi = 1 Hessian diag(., 1/6, 2/3): the largest ratio is 0.125 / (1/6).
# Cross-checked in test_stability against scipy.linalg.eigh and the exact
# second-moment ODE.
SIGMA_SQ_ORACLE = 0.75
SIGMA_SQ_REFERENCE = 0.1875  # reference value taking the e3 ratio; not the supremum
SIGMA_SQ_ANALYTIC = 0.25


def report(capsys, n, ok, msg):
    with capsys.disabled():
        print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {msg}")
    assert ok, msg


@pytest.fixture(scope="module")
def rigid_cert():
    return certify(RB, E1)


@pytest.fixture(scope="module")
def linear_ensemble(rigid_cert):
    cfg = load_config(fixture_path("rigid_body.json"))
    d0, eps, delta = thresholds(cfg, rigid_cert)
    vb = cfg["verify_bounds"]
    spec = EnsembleSpec(10_000, vb["t_final"], save_every=vb["save_every"], master_seed=cfg["seed"],
                        batch_size=vb.get("batch_size", 512))
    t0 = time.perf_counter()
    res = simulate_ensemble(linearized_system(RB, rigid_cert), d0, spec, IntegratorConfig(dt=vb["dt"]),
                            norm_sq=rigid_cert.norm_sq, eps=eps)
    return res, delta, eps, time.perf_counter() - t0


def test_criterion_1_casimir_preservation(capsys):
    cases = [
        (RB, np.array([0.48, 0.6, 0.64])),
        (make_heavy_top(1.0, 1.5, 0.5, 1.0, 1.0, 1.0, sigma=0.5), np.array([0.3, -0.2, 1.1, 0.6, 0.0, 0.8])),
    ]
    t0 = time.perf_counter()
    worst = {}
    for system, mu0 in cases:
        spec = EnsembleSpec(100, 10.0, save_every=100, master_seed=1, batch_size=100)
        res = simulate_ensemble(system, mu0, spec, IntegratorConfig(dt=1e-3),
                                observables={f"x{i}": i for i in range(system.dim)})
        X = res.observables
        for name, Q in zip(system.casimir_names, system.casimirs):
            C = 0.5 * np.einsum("pti,ij,ptj->pt", X, Q, X)
            worst[f"{system.name}:{name}"] = float(np.max(np.abs(C / C[:, :1] - 1)))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-9 and elapsed < 10.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    report(capsys, 1, ok, f"max relative Casimir drift {detail}; runtime {elapsed:.1f}s")


def test_criterion_2_gronwall_bound(capsys, rigid_cert, linear_ensemble):
    res, delta, eps, elapsed = linear_ensemble
    assert rigid_cert.sigma_sq_tight == pytest.approx(SIGMA_SQ_ORACLE, rel=1e-12)
    worst = {}
    for s2 in (SIGMA_SQ_ORACLE, SIGMA_SQ_REFERENCE, SIGMA_SQ_ANALYTIC):
        rep = verify_bounds(res, s2, delta, eps)
        # t = 0 holds with equality; report the tightest relative margin after it
        rel = rep["margin_gronwall"][1:] / rep["gronwall"][1:]
        worst[s2] = float(np.min(rel)) if rep["margin_gronwall"][0] >= 0 else -1.0
    ok = all(m >= 0 for m in worst.values()) and elapsed < 60.0 and res.t[-1] >= 5.0
    detail = ", ".join(f"Sigma^2={k}: min relative margin {v:.2e}" for k, v in worst.items())
    report(capsys, 2, ok, f"{res.n_paths} paths to t={res.t[-1]:g}; {detail}; runtime {elapsed:.1f}s "
                          f"(tight Sigma^2 is {SIGMA_SQ_ORACLE}, reference value {SIGMA_SQ_REFERENCE} is not the supremum)")


def test_criterion_3_markov_stopping_time(capsys, rigid_cert, linear_ensemble):
    res, delta, eps, _ = linear_ensemble
    t_max = rigid_cert.stopping_time(eps, delta)
    closed = math.log(eps / delta) / SIGMA_SQ_ORACLE
    rel = abs(t_max - closed) / closed
    rep = verify_bounds(res, SIGMA_SQ_ORACLE, delta, eps)
    upto = res.t <= t_max
    margin = float(np.min(rep["margin_markov"][upto]))
    ok = rel <= 1e-12 and margin >= 0 and res.t[-1] >= t_max
    report(capsys, 3, ok, f"eps/delta={eps / delta:g}, T_max={t_max:.12g} (rel err {rel:.1e}); "
                          f"min Markov margin on t<=T_max {margin:.3e}")


def test_criterion_4_kubo(capsys):
    kubo = make_rigid_body(2.0, 1.0, 1.0, 0.5)
    cert = certify(kubo, E1)
    q_zero = bool(np.all(cert.generator == 0.0))
    d0 = np.array([0.0, 1.0, 1.0]) * 1e-2 / math.sqrt(2)
    # the deviation is 1e-2 of the state, so the nonlinear path needs a fixed
    # point tolerance two orders below the default for a 1e-9 norm check
    lin = simulate_path(linearized_system(kubo, cert), d0, IntegratorConfig(dt=1e-3), 10.0, seed=3, save_every=10)
    nl = simulate_path(kubo, E1 + d0, IntegratorConfig(dt=1e-3, fixed_point_tol=1e-14), 10.0, seed=3, save_every=10)
    single = 0.0
    for n in (cert.norm_sq(lin.states), cert.deviation_norm_sq(nl.states)):
        single = max(single, float(np.max(np.abs(n / n[0] - 1))))
    res = simulate_ensemble(kubo, E1 + d0, EnsembleSpec(500, 10.0, save_every=100, master_seed=4),
                            IntegratorConfig(dt=1e-2), norm_sq=cert.deviation_norm_sq)
    mean, se = res.norm_mean(), res.norm_stderr()
    # flatness: within 3 stderr, with the same 1e-9 relative floor as the
    # single-path check since the spread across paths is at rounding level
    flat = bool(np.all(np.abs(mean - mean[0]) <= 3 * se + 1e-9 * mean[0]))
    ok = q_zero and single < 1e-9 and flat
    report(capsys, 4, ok, f"Q_gen == 0: {q_zero}; single-path relative norm drift {single:.1e}; "
                          f"ensemble mean spread {np.ptp(mean) / mean[0]:.1e} (flat: {flat})")


def _lagrange_certified(pi3):
    top = make_heavy_top(1.0, 1.0, 0.5, 1.0, 1.0, 1.0, sigma=0.5)
    try:
        certify(top, [0.0, 0.0, pi3, 0.0, 0.0, 1.0])
    except CertificationError:
        return False
    return True


def test_criterion_5_heavy_top_threshold(capsys):
    grid = np.round(np.arange(1.90, 2.1001, 0.01), 10)
    status = np.array([_lagrange_certified(p) for p in grid])
    flips = np.flatnonzero(np.diff(status.astype(int)))
    ok = (_lagrange_certified(2.1) and not _lagrange_certified(1.9) and flips.size == 1
          and not status[flips[0]] and abs(0.5 * (grid[flips[0]] + grid[flips[0] + 1]) - 2.0) <= 0.02)
    where = f"between {grid[flips[0]]:.2f} and {grid[flips[0] + 1]:.2f}" if flips.size else "nowhere"
    report(capsys, 5, ok, f"certified at 2.1, rejected at 1.9; definiteness flips {where}")


def test_criterion_6_generator_cross_check(capsys, rigid_cert):
    I2, I3, s2 = 2.0, 1.0, 0.25
    N = rigid_cert.hessian
    Q = generator_quadratic_form(RB, N)
    rng = np.random.default_rng(6)
    d = rng.standard_normal((100, 3))
    ours = np.einsum("pi,ij,pj->p", d, Q, d)
    printed = s2 * (d[:, 2] ** 2 * (1 / I3 - 1 / I2) + d[:, 1] ** 2 * (1 / I2 - 1 / I3))
    expr_err = float(np.max(np.abs(ours - printed)))

    # Dynkin finite difference on the linearized flow, with the leading
    # martingale term as control variate
    lin = linearized_system(RB, rigid_cert)
    x0 = np.array([0.3, 0.8, 0.5]) * 1e-2
    h, dt, P, seed = 0.01, 1e-3, 5000, 5
    res = simulate_ensemble(lin, x0, EnsembleSpec(P, h, save_every=10, master_seed=seed, batch_size=P),
                            IntegratorConfig(dt=dt), norm_sq=rigid_cert.norm_sq)
    W = np.array([brownian_increments(seed, p, 10, 1, dt).sum() for p in range(P)])
    G = lin.noise_matrices[0]
    Y = (res.norm_sq[:, -1] - rigid_cert.norm_sq(x0) - 2 * (N @ x0) @ (G @ x0) * W) / h
    se = Y.std(ddof=1) / math.sqrt(P)
    mc_gap = abs(Y.mean() - x0 @ Q @ x0)
    mc_ok = mc_gap < 3 * se
    ok = expr_err <= 1e-12 and mc_ok
    report(capsys, 6, ok, f"max |analytic - printed expression| = {expr_err:.3e} (printed form has the opposite "
                          f"sign); Dynkin Monte Carlo gap {mc_gap:.2e} vs 3 stderr {3 * se:.2e} "
                          f"({'agrees' if mc_ok else 'disagrees'})")


def test_criterion_7_shear_flow(capsys):
    t0 = time.perf_counter()
    m, L = 256, 2 * np.pi
    y = np.arange(m) * (L / m)
    errs = []
    for a, k in [(0.1, 1), (0.3, 2), (-2.0, 3), (1.5, 1)]:
        prof = ShearFlowProfile(y, np.cosh(y), a * np.sin(k * y), boundary="periodic", period=L)
        errs.append(abs(sigma1(prof) - abs(a * k)) / abs(a * k))
    yc = np.linspace(-1, 1, 201)
    cosh = bernoulli_sign_test(ShearFlowProfile(yc, np.cosh(yc), 0.1 * np.sin(yc)))
    couette = bernoulli_sign_test(ShearFlowProfile(yc, yc, 0.1 * np.sin(yc)))
    elapsed = time.perf_counter() - t0
    ok = max(errs) < 1e-6 and cosh.passed and couette.verdict == "degenerate" and elapsed < 1.0
    report(capsys, 7, ok, f"max relative Sigma_1 error {max(errs):.1e}; cosh {cosh.verdict}; "
                          f"Couette {couette.verdict}; runtime {elapsed:.2f}s")


def test_criterion_8_heun_order(capsys):
    t0 = time.perf_counter()
    rep = strong_convergence_order(RB, [0.48, 0.6, 0.64], [2.0**-k for k in range(6, 11)], 200, seed=8,
                                   scheme="heun")
    elapsed = time.perf_counter() - t0
    ok = rep.order is not None and abs(rep.order - 1.0) <= 0.2 and elapsed < 120.0
    report(capsys, 8, ok, f"Heun strong order {rep.order:.3f}; runtime {elapsed:.1f}s")


def test_criterion_9_qualitative_transition(capsys, tmp_path):
    cfg = load_config(fixture_path("rigid_body.json"))
    assert cmd_simulate(cfg, tmp_path) == 0
    with open(tmp_path / "ensemble.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], np.array(rows[1:], dtype=float)
    meta = json.loads((tmp_path / "ensemble.meta.json").read_text())
    t_max = meta["T_max"]
    eps = meta["eps"]
    t = data[:, header.index("t")]
    mean = data[:, header.index("mean_Pi1")]
    early = float(np.max(np.abs(mean[t <= t_max / 2] - 1)))
    bins = [i for i, c in enumerate(header) if c.startswith("hist_") and c[5:].isdigit()]
    late = np.flatnonzero(t >= 10 * t_max)
    support = float(np.mean(data[late[0], bins] > 0)) if late.size else 0.0
    ok = early < eps and support >= 0.5
    report(capsys, 9, ok, f"(qualitative) max |mean Pi1 - 1| on t<=T_max/2 = {early:.2e} < eps={eps:.2e}; "
                          f"histogram support at t={t[late[0]] if late.size else float('nan'):g} "
                          f"(>= 10 T_max) = {support:.0%}")
