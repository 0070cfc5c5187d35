"""Stochastic energy-Casimir analysis of equilibria.

The pipeline is::

    check_equilibrium -> solve_first_variation -> second_variation (jet search)
        -> generator_quadratic_form -> sigma_tight -> stopping_time

The composing function of the Casimirs is only ever represented by its jet
(gradient ``lambda`` and Hessian ``phi`` over the invariants) at the
equilibrium.  With ``N = D^2 H_C(mu_e)`` and ``S_k`` the matrix of
``ad*_{sigma_k}``, the infinitesimal generator of ``x -> x.N.x`` along the
linearised flow is the quadratic form of::

    Q_gen = sum_k Sym(S_k^T N S_k + N S_k S_k)

and ``Sigma^2`` is the top eigenvalue of the pencil ``(+-Q_gen, +-N)``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from .sde import LinearSDE
from .systems import EquilibriumReport, StochasticLiePoissonSystem, _coords, check_equilibrium

__all__ = [
    "CertificationError",
    "CasimirJet",
    "FirstVariation",
    "EquilibriumCertificate",
    "solve_first_variation",
    "second_variation",
    "definiteness",
    "hc_norm_sq",
    "generator_quadratic_form",
    "sigma_tight",
    "linearized_system",
    "gronwall_bound",
    "markov_bound",
    "stopping_time",
    "default_phi_grid",
    "search_jets",
    "certify",
    "analytic_sigma_sq",
    "initial_offset",
]

MULTIPLIER_TOL = 1e-10
DEFINITE_TOL = 1e-10
MAX_CONDITION = 1e12


class CertificationError(RuntimeError):
    """Certification failed at ``stage`` for a machine-readable ``reason``."""

    def __init__(self, stage: str, reason: str, details: dict | None = None):
        super().__init__(f"{stage}: {reason}")
        self.stage = stage
        self.reason = reason
        self.details = details or {}

    def to_dict(self) -> dict:
        return {"certified": False, "stage": self.stage, "reason": self.reason, "details": self.details}


@dataclass(frozen=True)
class CasimirJet:
    """``Phi'`` (``gradient``) and ``Phi''`` (``hessian``) at ``c(mu_e)``."""

    gradient: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gradient, dtype=float))
        h = np.asarray(self.hessian, dtype=float)
        if h.ndim == 1:
            h = np.diag(h)
        h = h.reshape(g.size, g.size)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
            raise ValueError("jet entries must be finite")
        object.__setattr__(self, "gradient", g)
        object.__setattr__(self, "hessian", 0.5 * (h + h.T))


@dataclass(frozen=True)
class FirstVariation:
    multipliers: np.ndarray   # minimum-norm solution
    null_space: np.ndarray    # (J, r) directions along which multipliers are free
    residual: float


def solve_first_variation(system: StochasticLiePoissonSystem, mu_e, tol: float = MULTIPLIER_TOL) -> FirstVariation:
    """Solve ``Dh(mu_e) + sum_j lambda_j Q_j mu_e = 0`` in least squares."""
    mu = _coords(system, mu_e)
    V = _casimir_gradients(system, mu)
    rhs = -system.dh(mu)
    if V.shape[1] == 0:
        lam, Z = np.zeros(0), np.zeros((0, 0))
    else:
        lam = np.linalg.lstsq(V, rhs, rcond=None)[0]
        _, s, vt = np.linalg.svd(V)
        rank = int(np.sum(s > max(V.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)))
        Z = vt[rank:].T
    residual = float(np.linalg.norm(V @ lam - rhs))
    if residual > tol:
        raise CertificationError("first_variation", "no Casimir multiplier exists for this equilibrium",
                                 {"residual": residual})
    return FirstVariation(lam, Z, residual)


def _casimir_gradients(system, mu) -> np.ndarray:
    return np.column_stack([Q @ mu for Q in system.casimirs]) if system.casimirs else np.zeros((system.dim, 0))


def _base_hessian(system, lam) -> np.ndarray:
    N = np.array(system.hamiltonian_matrix)
    for l, Q in zip(lam, system.casimirs):
        N = N + l * Q
    return N


def second_variation(system: StochasticLiePoissonSystem, mu_e, jet: CasimirJet) -> np.ndarray:
    """Hessian of ``H_C = h + Phi(c_1, ..., c_J)`` at ``mu_e``."""
    mu = _coords(system, mu_e)
    if jet.gradient.size != len(system.casimirs):
        raise ValueError("jet size does not match the number of Casimirs")
    V = _casimir_gradients(system, mu)
    N = _base_hessian(system, jet.gradient) + V @ jet.hessian @ V.T
    return 0.5 * (N + N.T)


def definiteness(N, rel_tol: float = DEFINITE_TOL) -> int:
    """+1 (positive), -1 (negative) or 0 (indefinite or borderline)."""
    ev = np.linalg.eigvalsh(N)
    thr = rel_tol * max(np.max(np.abs(ev)), np.finfo(float).tiny)
    if ev[0] > thr:
        return 1
    if ev[-1] < -thr:
        return -1
    return 0


def hc_norm_sq(N, sign: int, dmu) -> np.ndarray | float:
    """``sign * dmu.N.dmu``; batched over leading axes of ``dmu``."""
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    d = np.asarray(getattr(dmu, "coords", dmu), dtype=float)
    val = sign * np.einsum("...i,ij,...j->...", d, N, d)
    return float(val) if np.ndim(val) == 0 else val


def generator_quadratic_form(system: StochasticLiePoissonSystem, N) -> np.ndarray:
    """Symmetric ``Q_gen`` with ``D ||dmu||^2 = dmu.Q_gen.dmu`` (unsigned N-form).

    ``N`` may be a certificate, in which case its Hessian is used.
    """
    N = np.asarray(getattr(N, "hessian", N), dtype=float)
    S = np.stack([system.algebra.ad_star_matrix(s) for s in system.noise]) if system.n_noise else np.zeros((0,) + N.shape)
    T = S.transpose(0, 2, 1)  # matrices of ad_sigma
    M = np.einsum("kji,jl,klm->im", S, N, S) + np.einsum("kji,kjl,lm->im", S, T, N)
    return 0.5 * (M + M.T)


def sigma_tight(Q_gen, N, sign: int, return_vector: bool = False):
    """Smallest ``Sigma^2 >= 0`` with ``sign*x.Q.x <= Sigma^2 * sign*x.N.x``.

    Cholesky-whitens ``sign*N`` and takes the top eigenvalue of the whitened
    ``sign*Q_gen``.  With ``return_vector`` also returns the maximising
    direction in the original coordinates.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    Np = sign * np.asarray(N, dtype=float)
    Qp = sign * np.asarray(Q_gen, dtype=float)
    if np.linalg.cond(Np) > MAX_CONDITION:
        raise CertificationError("sigma", "H_C Hessian is numerically singular", {"cond": float(np.linalg.cond(Np))})
    try:
        L = linalg.cholesky(Np, lower=True)
    except linalg.LinAlgError:
        raise CertificationError("sigma", "sign*N is not positive definite") from None
    X = linalg.solve_triangular(L, Qp, lower=True)
    W = linalg.solve_triangular(L, X.T, lower=True)
    w, v = np.linalg.eigh(0.5 * (W + W.T))
    s2 = max(0.0, float(w[-1]))
    if return_vector:
        return s2, linalg.solve_triangular(L.T, v[:, -1], lower=False)
    return s2


def linearized_system(system: StochasticLiePoissonSystem, certificate) -> LinearSDE:
    """Linear SDE for ``dmu = mu - mu_e``: drift Jacobian at ``mu_e`` and the noise matrices."""
    mu = _coords(system, getattr(certificate, "mu_e", certificate))
    return LinearSDE(system.drift_jacobian(mu), system.noise_matrices)


def gronwall_bound(norm0_sq: float, sigma_sq: float, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    return norm0_sq * np.exp(sigma_sq * t)


def markov_bound(norm0_sq: float, sigma_sq: float, eps: float, t):
    """``P(||dmu_t||^2 > eps) <= min(1, norm0_sq/eps * exp(sigma_sq t))``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return np.minimum(1.0, gronwall_bound(norm0_sq, sigma_sq, t) / eps)


def stopping_time(eps: float, delta: float, sigma_sq: float) -> float:
    """``ln(eps/delta) / sigma_sq``; ``inf`` when ``sigma_sq == 0``."""
    if not (eps > delta > 0):
        raise ValueError("need eps > delta > 0")
    if sigma_sq < 0:
        raise ValueError("sigma_sq must be nonnegative")
    if sigma_sq == 0:
        return math.inf
    return math.log(eps / delta) / sigma_sq


def default_phi_grid() -> np.ndarray:
    g = np.logspace(-2, 2, 9)
    return np.concatenate([-g[::-1], g])


def analytic_sigma_sq(system: StochasticLiePoissonSystem) -> float | None:
    """Closed-form ``Sigma^2 = sigma^2`` quoted for the rigid body and heavy top."""
    if system.name in ("rigid_body", "heavy_top"):
        return float(np.sum(system.noise**2))
    return None


def initial_offset(mu_e, scale: float = 1e-2, kind: str = "deterministic", seed: int = 0) -> np.ndarray:
    """Perturbation ``dmu0`` of Euclidean length ``scale`` away from ``mu_e``.

    ``deterministic`` takes the all-ones vector with its component along
    ``mu_e`` removed, so the offset leaves the ray through the equilibrium
    (moving along ``mu_e`` itself typically lands on a neighbouring
    equilibrium).  ``gaussian`` draws an isotropic direction from ``seed``.
    """
    mu = np.asarray(getattr(mu_e, "coords", mu_e), dtype=float)
    if kind == "deterministic":
        d = np.ones_like(mu)
        nrm = float(mu @ mu)
        if nrm > 0:
            d = d - (d @ mu) / nrm * mu
        if np.linalg.norm(d) < 1e-12:
            d = np.zeros_like(mu)
            d[int(np.argmin(np.abs(mu)))] = 1.0
    elif kind == "gaussian":
        d = np.random.default_rng(seed).standard_normal(mu.size)
    else:
        raise ValueError(f"unknown offset kind {kind!r}")
    return scale * d / np.linalg.norm(d)


@dataclass
class JetCandidate:
    jet: CasimirJet
    hessian: np.ndarray
    sign: int
    sigma_sq: float
    min_abs_eig: float


def _restricted_min_eig(system, W, lam0, Z, sign):
    def g(z):
        N0 = _base_hessian(system, lam0 + Z @ np.atleast_1d(z))
        return float(np.linalg.eigvalsh(sign * (W.T @ N0 @ W))[0])
    return g


def _best_multipliers(system, V, fv: FirstVariation, sign: int):
    """Multipliers maximising the smallest eigenvalue of ``sign*N`` on the Casimir tangent space.

    That eigenvalue is concave in the multipliers, so the search is unimodal.
    """
    n = system.dim
    if V.shape[1]:
        u, s, _ = np.linalg.svd(V, full_matrices=True)
        rank = int(np.sum(s > max(V.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)))
        W = u[:, rank:]
    else:
        W = np.eye(n)
    lam0, Z = fv.multipliers, fv.null_space
    if W.shape[1] == 0:
        return lam0, math.inf
    g = _restricted_min_eig(system, W, lam0, Z, sign)
    r = Z.shape[1]
    if r == 0:
        return lam0, g(np.zeros(0))
    bound = 1e3 * (1.0 + np.max(np.abs(lam0), initial=0.0) + np.linalg.norm(system.hamiltonian_matrix, 2))
    if r == 1:
        res = optimize.minimize_scalar(lambda z: -g(z), bounds=(-bound, bound), method="bounded",
                                       options={"xatol": 1e-10 * bound})
        z = np.array([res.x])
    else:
        res = optimize.minimize(lambda z: -g(z), np.zeros(r), method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000})
        z = res.x
    return lam0 + Z @ z, g(z)


def search_jets(system: StochasticLiePoissonSystem, mu_e, fv: FirstVariation, phi_grid=None) -> list[JetCandidate]:
    """All grid jets that make ``N`` sign-definite, with their ``Sigma^2``.

    The free part of the multipliers (if any) is set to the value that makes
    the Hessian most definite on the Casimir tangent space; ``Phi''`` is then
    taken diagonal with entries from ``phi_grid`` (full product over the
    invariants, or one shared value if the product exceeds 20000 points).
    """
    mu = _coords(system, mu_e)
    grid = default_phi_grid() if phi_grid is None else np.asarray(phi_grid, dtype=float)
    V = _casimir_gradients(system, mu)
    J = V.shape[1]
    out: list[JetCandidate] = []
    for sign in (1, -1):
        lam, margin = _best_multipliers(system, V, fv, sign)
        if not margin > 0:
            continue
        N0 = _base_hessian(system, lam)
        if J == 0:
            phis = np.zeros((1, 0))
        elif grid.size**J <= 20000:
            phis = np.array(list(itertools.product(grid, repeat=J)))
        else:
            phis = np.repeat(grid[:, None], J, axis=1)
        Ns = N0[None] + np.einsum("ij,pj,kj->pik", V, phis, V)
        ev = np.linalg.eigvalsh(Ns)
        thr = DEFINITE_TOL * np.max(np.abs(ev), axis=1)
        ok = (sign * ev[:, 0] > thr) if sign > 0 else (ev[:, -1] < -thr)
        for p in np.flatnonzero(ok):
            N = 0.5 * (Ns[p] + Ns[p].T)
            try:
                s2 = sigma_tight(generator_quadratic_form(system, N), N, sign)
            except CertificationError:
                continue
            out.append(JetCandidate(CasimirJet(lam, np.diag(phis[p])), N, sign, s2,
                                    float(np.min(np.abs(ev[p])))))
    return out


@dataclass
class EquilibriumCertificate:
    """Result of a successful stochastic energy-Casimir analysis."""

    mu_e: np.ndarray
    jet: CasimirJet
    hessian: np.ndarray
    sign: int
    generator: np.ndarray
    sigma_sq_tight: float
    sigma_sq_analytic: float | None
    first_variation_residual: float
    equilibrium: EquilibriumReport
    feasible_phi: list = field(default_factory=list)
    stopping_times: list = field(default_factory=list)

    @property
    def sign_label(self) -> str:
        return "positive" if self.sign > 0 else "negative"

    def norm_sq(self, dmu):
        return hc_norm_sq(self.hessian, self.sign, dmu)

    def deviation_norm_sq(self, mu):
        """H_C norm of ``mu - mu_e``, batched."""
        return hc_norm_sq(self.hessian, self.sign, np.asarray(mu) - self.mu_e)

    def stopping_time(self, eps: float, delta: float, sigma_sq: float | None = None) -> float:
        return stopping_time(eps, delta, self.sigma_sq_tight if sigma_sq is None else sigma_sq)

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None else (x if math.isfinite(x) else "inf")
        return {
            "certified": True,
            "mu_e": self.mu_e.tolist(),
            "sign": self.sign_label,
            "equilibrium": self.equilibrium.to_dict(),
            "first_variation_residual": self.first_variation_residual,
            "jet": {"gradient": self.jet.gradient.tolist(), "hessian": self.jet.hessian.tolist()},
            "hessian": self.hessian.tolist(),
            "hessian_eigenvalues": np.linalg.eigvalsh(self.hessian).tolist(),
            "generator": self.generator.tolist(),
            "sigma_sq_tight": self.sigma_sq_tight,
            "sigma_sq_analytic": self.sigma_sq_analytic,
            "feasible_phi": [list(map(float, p)) for p in self.feasible_phi],
            "stopping_times": [
                {"eps": e, "delta": d, "T_max": num(t), "unbounded": not math.isfinite(t)}
                for e, d, t in self.stopping_times
            ],
        }


def certify(system: StochasticLiePoissonSystem, mu_e, *, phi_grid=None, eps_delta=(),
            equilibrium_tol: float = 1e-10) -> EquilibriumCertificate:
    """Run the full analysis; raises :class:`CertificationError` on failure.

    Among grid jets giving a sign-definite Hessian the one with the smallest
    ``Sigma^2`` is kept (ties go to the better-conditioned Hessian).
    """
    mu = np.array(_coords(system, mu_e), dtype=float)
    report = check_equilibrium(system, mu, equilibrium_tol)
    if not report.passed:
        reason = ("mu_e is not an equilibrium of the drift" if report.drift_residual >= equilibrium_tol
                  else "noise is not compatible with the equilibrium")
        raise CertificationError("equilibrium", reason, report.to_dict())
    fv = solve_first_variation(system, mu)
    cands = search_jets(system, mu, fv, phi_grid)
    if not cands:
        raise CertificationError("second_variation", "second variation indefinite for all phi in grid",
                                 {"multipliers": fv.multipliers.tolist()})
    best = min(cands, key=lambda c: (c.sigma_sq, -c.min_abs_eig / np.max(np.abs(np.linalg.eigvalsh(c.hessian)))))
    feasible = [np.diag(c.jet.hessian) for c in cands if c.sign == best.sign]
    s2 = best.sigma_sq
    times = [(float(e), float(d), stopping_time(e, d, s2)) for e, d in eps_delta]
    return EquilibriumCertificate(
        mu_e=mu, jet=best.jet, hessian=best.hessian, sign=best.sign,
        generator=generator_quadratic_form(system, best.hessian), sigma_sq_tight=s2,
        sigma_sq_analytic=analytic_sigma_sq(system), first_variation_residual=fv.residual,
        equilibrium=report, feasible_phi=feasible, stopping_times=times,
    )
