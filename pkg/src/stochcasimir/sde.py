"""Stratonovich integration of linear-in-noise SDEs, single paths and ensembles.

Models are duck-typed: anything with ``dim``, ``n_noise``, a batched
``drift(x)`` returning ``(..., n)`` and linear noise fields given as
``noise_matrices`` of shape ``(K, n, n)`` can be stepped.  Both
:class:`~stochcasimir.systems.StochasticLiePoissonSystem` and
:class:`LinearSDE` qualify.

Randomness is organised per path: path ``p`` of an ensemble with master seed
``s`` draws its Brownian increments from a Philox stream keyed by ``(s, p)``,
so results do not depend on batching or on the number of worker threads.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "StepFailure",
    "IntegratorConfig",
    "EnsembleSpec",
    "LinearSDE",
    "Trajectory",
    "EnsembleResult",
    "ConvergenceReport",
    "path_rng",
    "brownian_increments",
    "step",
    "simulate_path",
    "simulate_ensemble",
    "strong_convergence_order",
]

log = logging.getLogger(__name__)

SCHEMES = ("implicit_midpoint", "heun")
_CHUNK = 1024  # time steps of noise drawn per path at once


class StepFailure(RuntimeError):
    """A step could not be completed (fixed point diverged or state non-finite)."""

    def __init__(self, message: str, t: float | None = None, paths=None):
        super().__init__(message)
        self.t = t
        self.paths = paths


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "implicit_midpoint"
    dt: float = 1e-3
    fixed_point_tol: float = 1e-12
    fixed_point_max_iters: int = 50

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError("dt must be positive")
        if not self.fixed_point_tol > 0:
            raise ValueError("fixed_point_tol must be positive")
        if self.fixed_point_max_iters < 1:
            raise ValueError("fixed_point_max_iters must be at least 1")


@dataclass(frozen=True)
class EnsembleSpec:
    """Ensemble size, horizon and bookkeeping.

    ``batch_size`` fixes how paths are grouped for vectorised stepping; it is
    part of the reproducibility contract together with ``master_seed``.
    The histogram is taken over ``hist_observable`` on ``hist_bins`` uniform
    bins spanning ``hist_range``; samples outside land in under/overflow.
    """

    n_paths: int
    t_final: float
    save_every: int = 1
    master_seed: int = 0
    batch_size: int = 512
    workers: int = 1
    hist_observable: str | None = None
    hist_range: tuple = (-1.0, 1.0)
    hist_bins: int = 200

    def __post_init__(self):
        if int(self.n_paths) != self.n_paths or self.n_paths < 1:
            raise ValueError("n_paths must be a positive integer")
        if not self.t_final > 0:
            raise ValueError("t_final must be positive")
        if self.save_every < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("save_every, batch_size and workers must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        lo, hi = self.hist_range
        if not hi > lo or self.hist_bins < 1:
            raise ValueError("invalid histogram range or bin count")


@dataclass(frozen=True, eq=False)
class LinearSDE:
    """Constant-coefficient linear SDE ``dx = L x dt + sum_k G_k x o dW^k``."""

    drift_matrix: np.ndarray
    noise_matrices: np.ndarray

    def __post_init__(self):
        L = np.array(self.drift_matrix, dtype=float)
        G = np.array(self.noise_matrices, dtype=float).reshape(-1, *L.shape)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("drift_matrix must be square")
        object.__setattr__(self, "drift_matrix", L)
        object.__setattr__(self, "noise_matrices", G)

    @property
    def dim(self) -> int:
        return self.drift_matrix.shape[0]

    @property
    def n_noise(self) -> int:
        return self.noise_matrices.shape[0]

    def drift(self, x):
        return np.asarray(x, dtype=float) @ self.drift_matrix.T

    def diffusion(self, x):
        return np.einsum("kij,...j->...ki", self.noise_matrices, np.asarray(x, dtype=float))


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based stream for one path, keyed by ``(master_seed, path_index)``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(master_seed: int, path_index: int, n_steps: int, n_noise: int, dt: float) -> np.ndarray:
    """All increments of one path, shape ``(n_steps, n_noise)``."""
    return path_rng(master_seed, path_index).standard_normal((n_steps, n_noise)) * math.sqrt(dt)


def _n_steps(t_final: float, dt: float) -> int:
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"t_final={t_final} is not an integer multiple of dt={dt}")
    return n


def _noise_operator(model, dW):
    """Per-path matrix ``sum_k dW_k G_k``; the noise fields are linear in the state."""
    return np.tensordot(dW, model.noise_matrices, axes=([-1], [0]))


def _increment(model, z, dt, B):
    return model.drift(z) * dt + (B @ z[..., None])[..., 0]


def _step_batch(model, x, dW, config: IntegratorConfig):
    dt = config.dt
    B = _noise_operator(model, dW)
    if config.scheme == "heun":
        inc0 = _increment(model, x, dt, B)
        pred = x + inc0
        return x + 0.5 * (inc0 + _increment(model, pred, dt, B))

    # implicit midpoint by fixed-point iteration; each row stops on its own so a
    # path's result does not depend on the rest of its batch (converged rows are
    # recomputed but no longer written)
    y = x + _increment(model, x, dt, B)
    active = np.ones(x.shape[0], dtype=bool)
    tol = config.fixed_point_tol
    for _ in range(config.fixed_point_max_iters):
        new = x + _increment(model, 0.5 * (x + y), dt, B)
        err = np.max(np.abs(new - y), axis=-1)
        scale = np.maximum(np.max(np.abs(new), axis=-1), 1e-300)
        y = np.where(active[:, None], new, y)
        active &= ~(err <= tol * scale)
        if not active.any():
            return y
    bad = np.flatnonzero(active)
    raise StepFailure(
        f"implicit midpoint fixed point did not converge in {config.fixed_point_max_iters} "
        f"iterations for {bad.size} path(s); reduce dt",
        paths=bad,
    )


def step(model, state, dW, config: IntegratorConfig) -> np.ndarray:
    """One Stratonovich step from ``state`` with increments ``dW``.

    ``state`` may be a single point ``(n,)`` or a batch ``(B, n)``; ``dW`` has
    matching leading shape and one entry per noise field.
    """
    x = np.asarray(state, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x).copy()
    dWb = np.asarray(dW, dtype=float).reshape(xb.shape[0], -1)
    if dWb.shape[1] != model.n_noise:
        raise ValueError(f"expected {model.n_noise} Brownian increments per path, got {dWb.shape[1]}")
    if not np.all(np.isfinite(xb)):
        raise StepFailure("non-finite state")
    out = _step_batch(model, xb, dWb, config)
    if not np.all(np.isfinite(out)):
        raise StepFailure("step produced a non-finite state")
    return out[0] if single else out


def _integrate_batch(model, x0, config, n_steps, save_every, seed, path_indices, record):
    """Integrate paths ``path_indices`` from ``x0``; ``record(k, states)`` at saved steps.

    Returns a boolean mask of failed paths (NaN rows from the failure onward).
    """
    B = len(path_indices)
    x = np.tile(np.asarray(x0, dtype=float), (B, 1))
    K = model.n_noise
    rngs = [path_rng(seed, p) for p in path_indices]
    sqdt = math.sqrt(config.dt)
    failed = np.zeros(B, dtype=bool)
    record(0, x)
    done = 0
    while done < n_steps:
        m = min(_CHUNK, n_steps - done)
        dW = np.stack([r.standard_normal((m, K)) for r in rngs], axis=1) * sqdt
        for s in range(m):
            ok = ~failed
            if ok.all():
                try:
                    x = _step_batch(model, x, dW[s], config)
                except StepFailure:
                    pass
                else:
                    k = done + s + 1
                    if not np.all(np.isfinite(x)):
                        failed |= ~np.all(np.isfinite(x), axis=1)
                        log.warning("non-finite state at t=%.6g in %d path(s)", k * config.dt, failed.sum())
                        x[failed] = np.nan
                    if k % save_every == 0:
                        record(k // save_every, x)
                    continue
            if ok.any():
                try:
                    x[ok] = _step_batch(model, x[ok], dW[s, ok], config)
                except StepFailure as exc:
                    # redo row by row to isolate the failing paths
                    for i in np.flatnonzero(ok):
                        try:
                            x[i] = _step_batch(model, x[i:i + 1], dW[s, i:i + 1], config)[0]
                        except StepFailure:
                            failed[i] = True
                    log.warning("step failure at t=%.6g: %s", (done + s + 1) * config.dt, exc)
                bad = ~np.all(np.isfinite(x), axis=1) & ~failed
                if bad.any():
                    log.warning("non-finite state at t=%.6g in %d path(s)", (done + s + 1) * config.dt, bad.sum())
                    failed |= bad
                x[failed] = np.nan
            k = done + s + 1
            if k % save_every == 0:
                record(k // save_every, x)
        done += m
    return failed


@dataclass
class Trajectory:
    t: np.ndarray
    states: np.ndarray


def simulate_path(model, mu0, config: IntegratorConfig, t_final: float, seed: int = 0,
                  path_index: int = 0, save_every: int = 1) -> Trajectory:
    """Integrate a single path on the uniform grid ``0, dt, ..., t_final``."""
    mu0 = np.asarray(getattr(mu0, "coords", mu0), dtype=float)
    if not np.all(np.isfinite(mu0)):
        raise ValueError("initial state must be finite")
    n = _n_steps(t_final, config.dt)
    n_saved = n // save_every + 1
    out = np.empty((n_saved, mu0.size))

    def record(k, x):
        out[k] = x[0]

    failed = _integrate_batch(model, mu0, config, n, save_every, seed, [path_index], record)
    if failed[0]:
        rows = np.flatnonzero(~np.all(np.isfinite(out), axis=1))
        t_fail = rows[0] * save_every * config.dt if rows.size else t_final
        raise StepFailure(f"path {path_index} failed near t={t_fail:.6g}", t=t_fail, paths=[path_index])
    return Trajectory(np.arange(n_saved) * save_every * config.dt, out)


@dataclass
class EnsembleResult:
    """Per-path saved observables plus reductions over paths.

    ``observables`` has shape ``(n_paths, n_saved, n_obs)`` and ``norm_sq``
    shape ``(n_paths, n_saved)``; failed paths are NaN and excluded from all
    statistics.
    """

    t: np.ndarray
    observable_names: tuple
    observables: np.ndarray
    norm_sq: np.ndarray | None
    eps: float | None
    failed: np.ndarray
    provenance: dict
    hist_observable: str | None = None
    hist_edges: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.observables.shape[0]

    @property
    def n_failed(self) -> int:
        return int(self.failed.sum())

    def _ok(self, a):
        return a[~self.failed]

    def mean(self, name: str) -> np.ndarray:
        return self._ok(self.observables[..., self.observable_names.index(name)]).mean(axis=0)

    def var(self, name: str) -> np.ndarray:
        v = self._ok(self.observables[..., self.observable_names.index(name)])
        if v.shape[0] < 2:
            return np.zeros(v.shape[1])
        # shifting by one sample keeps identical paths at exactly zero variance
        return (v - v[0]).var(axis=0, ddof=1)

    def _need_norm(self):
        if self.norm_sq is None:
            raise ValueError("ensemble was run without a norm")
        return self._ok(self.norm_sq)

    def norm_mean(self) -> np.ndarray:
        return self._need_norm().mean(axis=0)

    def norm_stderr(self) -> np.ndarray:
        v = self._need_norm()
        return v.std(axis=0, ddof=1) / math.sqrt(v.shape[0]) if v.shape[0] > 1 else np.zeros(v.shape[1])

    def exit_frequency(self) -> np.ndarray:
        if self.eps is None:
            raise ValueError("ensemble was run without an exit threshold")
        return (self._need_norm() > self.eps).mean(axis=0)

    def exit_stderr(self) -> np.ndarray:
        p = self.exit_frequency()
        n = self.n_paths - self.n_failed
        return np.sqrt(p * (1 - p) / n)

    def histogram(self) -> np.ndarray:
        """Counts per saved time: ``(n_saved, bins + 2)`` with under/overflow last."""
        if self.hist_observable is None:
            raise ValueError("no histogram observable configured")
        v = self._ok(self.observables[..., self.observable_names.index(self.hist_observable)])
        edges = self.hist_edges
        nb = edges.size - 1
        out = np.zeros((v.shape[1], nb + 2), dtype=np.int64)
        for k in range(v.shape[1]):
            col = v[:, k]
            out[k, :nb] = np.histogram(col, bins=edges)[0]
            out[k, nb] = np.count_nonzero(col < edges[0])
            out[k, nb + 1] = np.count_nonzero(col > edges[-1])
        return out

    def table(self) -> tuple[list[str], np.ndarray]:
        """Column names and rows of the CSV export."""
        cols, data = ["t"], [self.t]
        for name in self.observable_names:
            cols += [f"mean_{name}", f"var_{name}"]
            data += [self.mean(name), self.var(name)]
        if self.norm_sq is not None:
            cols += ["mean_HCnorm", "stderr_HCnorm"]
            data += [self.norm_mean(), self.norm_stderr()]
            if self.eps is not None:
                cols.append("exit_freq")
                data.append(self.exit_frequency())
        if self.hist_observable is not None:
            h = self.histogram()
            nb = h.shape[1] - 2
            cols += [f"hist_{i}" for i in range(nb)] + ["hist_under", "hist_over"]
            data += list(h.T.astype(float))
        return cols, np.column_stack(data)

    def to_csv(self, path) -> None:
        cols, rows = self.table()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(cols) + "\n")
            for r in rows:
                fh.write(",".join(repr(float(v)) for v in r) + "\n")

    def metadata(self) -> dict:
        meta = dict(self.provenance)
        meta.update({
            "observables": list(self.observable_names),
            "n_failed": self.n_failed,
            "failed_paths": np.flatnonzero(self.failed).tolist(),
            "eps": self.eps,
        })
        if self.hist_edges is not None:
            meta["histogram"] = {"observable": self.hist_observable,
                                 "range": [float(self.hist_edges[0]), float(self.hist_edges[-1])],
                                 "bins": int(self.hist_edges.size - 1)}
        return meta

    def write(self, csv_path, meta_path) -> None:
        self.to_csv(csv_path)
        with open(meta_path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def simulate_ensemble(model, mu0, spec: EnsembleSpec, config: IntegratorConfig, *,
                      observables: Mapping[str, int] | None = None,
                      norm_sq: Callable[[np.ndarray], np.ndarray] | None = None,
                      eps: float | None = None) -> EnsembleResult:
    """Run ``spec.n_paths`` independent paths from ``mu0``.

    ``observables`` maps names to coordinate indices.  ``norm_sq`` evaluates
    a squared norm on a batch of states (e.g. the H_C norm of the deviation
    from an equilibrium); ``eps`` is the exit threshold on that quantity.
    Batches are fixed by ``spec.batch_size`` and may run on ``spec.workers``
    threads; results are written into per-path slots, so the output is
    identical for any worker count.
    """
    mu0 = np.asarray(getattr(mu0, "coords", mu0), dtype=float)
    if not np.all(np.isfinite(mu0)):
        raise ValueError("initial state must be finite")
    observables = dict(observables or {})
    names = tuple(observables)
    idx = np.array([observables[n] for n in names], dtype=int)
    if spec.hist_observable is not None and spec.hist_observable not in observables:
        raise ValueError(f"histogram observable {spec.hist_observable!r} is not among the observables")
    n = _n_steps(spec.t_final, config.dt)
    n_saved = n // spec.save_every + 1
    P = spec.n_paths
    obs = np.empty((P, n_saved, len(names)))
    nrm = np.empty((P, n_saved)) if norm_sq is not None else None
    failed = np.zeros(P, dtype=bool)

    def run(start):
        paths = np.arange(start, min(start + spec.batch_size, P))
        sl = slice(paths[0], paths[-1] + 1)

        def record(k, x):
            obs[sl, k] = x[:, idx]
            if nrm is not None:
                nrm[sl, k] = norm_sq(x)

        failed[sl] = _integrate_batch(model, mu0, config, n, spec.save_every, spec.master_seed, paths, record)

    starts = range(0, P, spec.batch_size)
    if spec.workers > 1:
        with ThreadPoolExecutor(max_workers=spec.workers) as pool:
            list(pool.map(run, starts))
    else:
        for s in starts:
            run(s)
    if failed.any():
        log.warning("%d of %d paths failed: %s", failed.sum(), P, np.flatnonzero(failed)[:20].tolist())

    edges = None
    if spec.hist_observable is not None:
        edges = np.linspace(spec.hist_range[0], spec.hist_range[1], spec.hist_bins + 1)
    prov = {
        "master_seed": int(spec.master_seed),
        "path_streams": "Philox(SeedSequence(master_seed, spawn_key=(path_index,)))",
        "ensemble": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "integrator": asdict(config),
        "initial_state": mu0.tolist(),
    }
    if hasattr(model, "fingerprint"):
        prov["system_sha256"] = model.fingerprint()
    return EnsembleResult(np.arange(n_saved) * spec.save_every * config.dt, names, obs, nrm, eps,
                          failed, prov, spec.hist_observable, edges)


@dataclass
class ConvergenceReport:
    dt_levels: list
    errors: list
    order: float | None
    intercept: float | None
    notice: str = ""
    reference_dt: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"dt_levels": self.dt_levels, "errors": self.errors, "order": self.order,
                "intercept": self.intercept, "notice": self.notice, "reference_dt": self.reference_dt}


def strong_convergence_order(model, mu0, dt_levels, n_paths: int, seed: int, *, t_final: float = 1.0,
                             scheme: str = "heun", reference_factor: int = 16,
                             fixed_point_tol: float = 1e-12) -> ConvergenceReport:
    """Least-squares slope of log strong error against log dt.

    All levels share one Brownian path per sample: increments are drawn at the
    reference step ``min(dt_levels) / reference_factor`` and summed in blocks
    for the coarser levels.  The strong error at ``t_final`` is the mean
    Euclidean distance to the reference solution (same scheme).
    """
    dts = sorted((float(d) for d in dt_levels), reverse=True)
    if len(dts) < 3:
        raise ValueError("at least three dt levels are required")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    dt_ref = dts[-1] / reference_factor
    n_ref = _n_steps(t_final, dt_ref)
    ratios = []
    for d in dts:
        r = d / dt_ref
        if abs(r - round(r)) > 1e-9:
            raise ValueError(f"dt level {d} is not an integer multiple of the reference step {dt_ref}")
        ratios.append(int(round(r)))
    mu0 = np.asarray(getattr(mu0, "coords", mu0), dtype=float)
    K = model.n_noise
    dW = np.stack([brownian_increments(seed, p, n_ref, K, dt_ref) for p in range(n_paths)], axis=1)

    def solve(dt, r):
        cfg = IntegratorConfig(scheme=scheme, dt=dt, fixed_point_tol=fixed_point_tol)
        inc = dW.reshape(n_ref // r, r, n_paths, K).sum(axis=1)
        x = np.tile(mu0, (n_paths, 1))
        for s in range(inc.shape[0]):
            x = _step_batch(model, x, inc[s], cfg)
        return x

    ref = solve(dt_ref, 1)
    errors = [float(np.mean(np.linalg.norm(solve(d, r) - ref, axis=1))) for d, r in zip(dts, ratios)]
    if max(errors) == 0.0:
        return ConvergenceReport(dts, errors, None, None, "all errors are exactly zero; order not estimated",
                                 dt_ref)
    if min(errors) <= 0.0:
        raise ValueError("degenerate fit: some levels have zero error")
    slope, intercept = np.polyfit(np.log(dts), np.log(errors), 1)
    return ConvergenceReport(dts, errors, float(slope), float(intercept), "", dt_ref)
