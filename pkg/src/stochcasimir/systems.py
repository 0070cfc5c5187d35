"""Stochastic Lie-Poisson systems with constant multiplicative noise.

A system lives on the dual ``g*`` of a Lie algebra and evolves by the
Stratonovich SDE::

    dmu = -ad*_{Dh(mu)} mu dt - sum_k ad*_{sigma_k} mu o dW^k

with an affine-quadratic Hamiltonian ``h(mu) = 1/2 mu.A.mu + b.mu``.  For the
free rigid body this reads ``dPi + Pi x Omega dt + Pi x sigma o dW = 0``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    AlgebraMismatchError,
    DualElement,
    LieAlgebra,
    SemidirectProduct,
    as_algebra,
    heavy_top_algebra,
    so3,
)

__all__ = [
    "StochasticLiePoissonSystem",
    "SystemState",
    "EquilibriumReport",
    "drift",
    "noise_field",
    "make_rigid_body",
    "make_heavy_top",
    "make_custom",
    "system_from_dict",
    "check_equilibrium",
]

SYMMETRY_TOL = 1e-12


def _as_matrix(a, n, what):
    a = np.array(a, dtype=float)
    if a.shape != (n, n):
        raise ValueError(f"{what} must have shape ({n}, {n}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{what} must be finite")
    if np.max(np.abs(a - a.T)) > SYMMETRY_TOL * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"{what} must be symmetric")
    a = 0.5 * (a + a.T)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class StochasticLiePoissonSystem:
    """Lie-Poisson system with Hamiltonian, noise directions and quadratic invariants.

    Parameters
    ----------
    descriptor
        :class:`LieAlgebra` or :class:`SemidirectProduct`.
    hamiltonian_matrix, hamiltonian_linear
        ``A`` and ``b`` in ``h(mu) = 1/2 mu.A.mu + b.mu``.
    noise
        ``(K, n)`` array, one constant algebra element ``sigma_k`` per row.
    casimirs
        Symmetric matrices ``Q_j``; the invariant is ``c_j = 1/2 mu.Q_j.mu``.
    """

    descriptor: object
    hamiltonian_matrix: np.ndarray
    hamiltonian_linear: np.ndarray
    noise: np.ndarray
    casimirs: tuple = ()
    casimir_names: tuple = ()
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        alg = as_algebra(self.descriptor)
        n = alg.dim
        A = _as_matrix(self.hamiltonian_matrix, n, "hamiltonian_matrix")
        if np.min(np.linalg.eigvalsh(A)) < -1e-12 * max(1.0, np.max(np.abs(A))):
            raise ValueError("hamiltonian_matrix must be positive semidefinite")
        b = np.array(self.hamiltonian_linear, dtype=float).reshape(-1)
        if b.shape != (n,):
            raise ValueError(f"hamiltonian_linear must have length {n}")
        sig = np.array(self.noise, dtype=float).reshape(-1, n) if np.size(self.noise) else np.zeros((0, n))
        if not np.all(np.isfinite(sig)):
            raise ValueError("noise amplitudes must be finite")
        Qs = tuple(_as_matrix(q, n, f"casimir {j}") for j, q in enumerate(self.casimirs))
        names = tuple(self.casimir_names) or tuple(f"C{j}" for j in range(len(Qs)))
        if len(names) != len(Qs):
            raise ValueError("one name per Casimir required")
        b.setflags(write=False)
        sig.setflags(write=False)
        c = alg.structure_constants
        # drift_j = sum_{a,k} D[j,a,k] mu_a mu_k + sum_k E[j,k] mu_k
        D = -np.einsum("ijk,ia->jak", c, A)
        E = -np.einsum("ijk,i->jk", c, b)
        G = np.stack([-alg.ad_star_matrix(s) for s in sig]) if len(sig) else np.zeros((0, n, n))
        for arr in (D, E, G):
            arr.setflags(write=False)
        for key, val in (
            ("hamiltonian_matrix", A), ("hamiltonian_linear", b), ("noise", sig),
            ("casimirs", Qs), ("casimir_names", names), ("_algebra", alg),
            ("_D", D), ("_E", E), ("noise_matrices", G), ("params", dict(self.params)),
            # (a, j*k) layout so the quadratic drift is two matrix products
            ("_Dflat", np.ascontiguousarray(D.transpose(1, 0, 2).reshape(n, n * n))),
            ("_GT", np.ascontiguousarray(G.transpose(2, 0, 1))),
        ):
            object.__setattr__(self, key, val)

    @property
    def algebra(self) -> LieAlgebra:
        return self._algebra

    @property
    def dim(self) -> int:
        return self._algebra.dim

    @property
    def n_noise(self) -> int:
        return self.noise.shape[0]

    # -- evaluation on raw coordinates (leading batch axes allowed) ------------

    def hamiltonian(self, mu):
        mu = np.asarray(mu, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", mu, self.hamiltonian_matrix, mu) + mu @ self.hamiltonian_linear

    def dh(self, mu):
        return np.asarray(mu, dtype=float) @ self.hamiltonian_matrix + self.hamiltonian_linear

    def casimir_values(self, mu) -> np.ndarray:
        """Values ``c_j(mu)``, stacked on the last axis."""
        mu = np.asarray(mu, dtype=float)
        if not self.casimirs:
            return np.zeros(mu.shape[:-1] + (0,))
        return np.stack([0.5 * np.einsum("...i,ij,...j->...", mu, Q, mu) for Q in self.casimirs], axis=-1)

    def stochastic_potentials(self, mu) -> np.ndarray:
        """``Phi_k(mu) = <sigma_k, mu>`` for every noise field."""
        return np.asarray(mu, dtype=float) @ self.noise.T

    def drift(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        n = self.dim
        quad = (mu @ self._Dflat).reshape(mu.shape[:-1] + (n, n))
        return (quad @ mu[..., None])[..., 0] + mu @ self._E.T

    def diffusion(self, mu) -> np.ndarray:
        """All noise vector fields at ``mu``, shape ``(..., K, n)``."""
        mu = np.asarray(mu, dtype=float)
        return np.tensordot(mu, self._GT, axes=([-1], [0])).reshape(mu.shape[:-1] + (self.n_noise, self.dim))

    def drift_jacobian(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        return np.einsum("jmk,k->jm", self._D, mu) + np.einsum("jam,a->jm", self._D, mu) + self._E

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "params": self.params,
            "algebra": self.algebra.to_dict(),
            "hamiltonian_matrix": self.hamiltonian_matrix.tolist(),
            "hamiltonian_linear": self.hamiltonian_linear.tolist(),
            "noise": self.noise.tolist(),
            "casimirs": [q.tolist() for q in self.casimirs],
            "casimir_names": list(self.casimir_names),
        }

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form; used for provenance records."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class SystemState:
    mu: DualElement
    t: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.mu.coords)) or not np.isfinite(self.t):
            raise ValueError("state must be finite")


def _coords(system: StochasticLiePoissonSystem, mu) -> np.ndarray:
    if isinstance(mu, DualElement):
        if mu.algebra != system.algebra:
            raise AlgebraMismatchError("state belongs to a different algebra than the system")
        return mu.coords
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1:] != (system.dim,):
        raise ValueError(f"expected {system.dim} coordinates, got shape {mu.shape}")
    return mu


def _finite(x):
    if not np.all(np.isfinite(x)):
        raise ValueError("state must be finite")
    return x


def drift(system: StochasticLiePoissonSystem, mu) -> DualElement:
    """Deterministic vector field ``-ad*_{Dh(mu)} mu`` as a dual element."""
    return DualElement(system.drift(_finite(_coords(system, mu))), system.algebra)


def noise_field(system: StochasticLiePoissonSystem, k: int, mu) -> DualElement:
    """The ``k``-th Stratonovich diffusion field ``-ad*_{sigma_k} mu``."""
    if not 0 <= k < system.n_noise:
        raise IndexError(f"noise index {k} out of range for {system.n_noise} noise fields")
    return DualElement(system.noise_matrices[k] @ _finite(_coords(system, mu)), system.algebra)


def make_rigid_body(I1: float, I2: float, I3: float, sigma: float = 0.0, noise=None) -> StochasticLiePoissonSystem:
    """Free rigid body on so(3)* with noise ``sigma * e1`` by default.

    ``noise`` may replace the default by a list of 3-vectors (e.g. isotropic
    noise ``sigma * eye(3)``).  The Casimir is ``1/2 |Pi|^2``.
    """
    moments = np.array([I1, I2, I3], dtype=float)
    if not np.all(np.isfinite(moments)) or np.any(moments <= 0):
        raise ValueError("moments of inertia must be positive")
    sig = np.array([[sigma, 0.0, 0.0]]) if noise is None else np.atleast_2d(np.asarray(noise, dtype=float))
    return StochasticLiePoissonSystem(
        so3(),
        np.diag(1.0 / moments),
        np.zeros(3),
        sig,
        casimirs=(np.eye(3),),
        casimir_names=("half_norm_sq",),
        name="rigid_body",
        params={"I": moments.tolist(), "sigma": float(sigma)},
    )


def make_heavy_top(I1, I2, I3, m, g, l, chi=(0.0, 0.0, 1.0), sigma: float = 0.0, noise=None) -> StochasticLiePoissonSystem:
    """Heavy top on (so(3) x| R^3)* with coordinates ``(Pi, Gamma)``.

    ``h = 1/2 Pi.I^-1.Pi + m g l chi.Gamma``; noise ``(sigma e3, 0)`` by default.
    Invariants are ``|Gamma|^2`` and ``Pi.Gamma``; for a Lagrange top
    (``I1 == I2`` and ``chi = e3``) the conserved momentum ``1/2 Pi_3^2`` is
    added, which the sleeping-top criterion ``Pi_3^2 > 4 m g l I1`` needs.
    """
    moments = np.array([I1, I2, I3], dtype=float)
    mgl = np.array([m, g, l], dtype=float)
    chi = np.asarray(chi, dtype=float)
    if np.any(moments <= 0) or np.any(mgl <= 0) or not np.all(np.isfinite(np.r_[moments, mgl, chi])):
        raise ValueError("moments and m, g, l must be positive and finite")
    if chi.shape != (3,) or abs(np.linalg.norm(chi) - 1.0) > 1e-12:
        raise ValueError("chi must be a unit 3-vector")
    A = np.zeros((6, 6))
    A[:3, :3] = np.diag(1.0 / moments)
    b = np.concatenate([np.zeros(3), float(np.prod(mgl)) * chi])
    if noise is None:
        sig = np.array([[0.0, 0.0, sigma, 0.0, 0.0, 0.0]])
    else:
        sig = np.atleast_2d(np.asarray(noise, dtype=float))
        if sig.shape[1] == 3:
            sig = np.hstack([sig, np.zeros_like(sig)])
    Q_gamma = np.zeros((6, 6))
    Q_gamma[3:, 3:] = 2.0 * np.eye(3)
    Q_cross = np.zeros((6, 6))
    Q_cross[:3, 3:] = Q_cross[3:, :3] = np.eye(3)
    casimirs = [Q_gamma, Q_cross]
    names = ["gamma_norm_sq", "pi_dot_gamma"]
    if I1 == I2 and np.array_equal(chi, [0.0, 0.0, 1.0]):
        Q_spin = np.zeros((6, 6))
        Q_spin[2, 2] = 1.0
        casimirs.append(Q_spin)
        names.append("half_pi3_sq")
    return StochasticLiePoissonSystem(
        heavy_top_algebra(),
        A,
        b,
        sig,
        casimirs=tuple(casimirs),
        casimir_names=tuple(names),
        name="heavy_top",
        params={"I": moments.tolist(), "m": float(m), "g": float(g), "l": float(l),
                "chi": chi.tolist(), "sigma": float(sigma)},
    )


def make_custom(algebra, hamiltonian_matrix, hamiltonian_linear=None, noise=(), casimirs=(), casimir_names=(),
                name: str = "custom") -> StochasticLiePoissonSystem:
    alg = as_algebra(algebra)
    b = np.zeros(alg.dim) if hamiltonian_linear is None else hamiltonian_linear
    return StochasticLiePoissonSystem(algebra, hamiltonian_matrix, b, noise, tuple(casimirs),
                                      tuple(casimir_names), name=name)


def system_from_dict(spec: dict) -> StochasticLiePoissonSystem:
    """Build a system from ``{"type": ..., "params": {...}, "noise": [[...], ...]}``.

    ``rigid_body`` params: ``I`` (3 moments), optional ``sigma``.
    ``heavy_top`` params: ``I``, ``m``, ``g``, ``l``, optional ``chi``, ``sigma``.
    ``custom`` params: ``algebra`` (``{"dim", "structure_constants", "name"}``),
    ``A``, optional ``b``, ``casimirs``, ``casimir_names``.
    ``noise``, when present, overrides the default noise of the built-ins.
    """
    kind = spec.get("type")
    p = dict(spec.get("params", {}))
    noise = spec.get("noise")
    if kind == "rigid_body":
        return make_rigid_body(*p["I"], sigma=p.get("sigma", 0.0), noise=noise)
    if kind == "heavy_top":
        return make_heavy_top(*p["I"], p["m"], p["g"], p["l"], chi=p.get("chi", (0.0, 0.0, 1.0)),
                              sigma=p.get("sigma", 0.0), noise=noise)
    if kind == "custom":
        alg = LieAlgebra.from_dict(p["algebra"])
        return make_custom(alg, p["A"], p.get("b"), noise if noise is not None else (),
                           [np.asarray(q) for q in p.get("casimirs", [])], p.get("casimir_names", ()))
    raise ValueError(f"unknown system type {kind!r}")


@dataclass(frozen=True)
class EquilibriumReport:
    drift_residual: float
    noise_residuals: tuple
    tol: float

    @property
    def passed(self) -> bool:
        return self.drift_residual < self.tol and all(r < self.tol for r in self.noise_residuals)

    def to_dict(self) -> dict:
        return {"drift_residual": self.drift_residual, "noise_residuals": list(self.noise_residuals),
                "tol": self.tol, "passed": self.passed}


def check_equilibrium(system: StochasticLiePoissonSystem, mu_e, tol: float = 1e-10) -> EquilibriumReport:
    """Residuals of ``ad*_{Dh(mu_e)} mu_e = 0`` and ``ad*_{sigma_k} mu_e = 0``."""
    mu = _coords(system, mu_e)
    return EquilibriumReport(
        float(np.linalg.norm(system.drift(mu))),
        tuple(float(np.linalg.norm(G @ mu)) for G in system.noise_matrices),
        tol,
    )
