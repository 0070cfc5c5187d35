"""Finite-dimensional Lie algebras, their duals and semidirect products.

Everything is stored densely.  A Lie algebra is fixed by its structure
constants ``c[i, j, k]`` with ``[e_i, e_j] = sum_k c[i, j, k] e_k``; the dual
is identified with R^n through the coordinate dot product, so that the
coadjoint action is the transpose of the adjoint action::

    <ad*_xi mu, eta> = <mu, ad_xi eta>
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AlgebraMismatchError",
    "RepresentationError",
    "LieAlgebra",
    "AlgebraElement",
    "DualElement",
    "SemidirectProduct",
    "ad",
    "ad_star",
    "pairing",
    "semidirect_product",
    "as_algebra",
    "so3",
    "hat",
    "heavy_top_algebra",
]

STRUCTURE_TOL = 1e-12


class AlgebraMismatchError(ValueError):
    """Raised when elements of two different algebras are combined."""


class RepresentationError(ValueError):
    """Raised when matrices do not define a Lie algebra representation."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LieAlgebra:
    """Real Lie algebra of dimension ``dim`` given by structure constants.

    Antisymmetry and the Jacobi identity are verified on construction.
    """

    structure_constants: np.ndarray
    name: str = ""

    def __post_init__(self):
        c = _readonly(self.structure_constants)
        if c.ndim != 3 or not (c.shape[0] == c.shape[1] == c.shape[2]) or c.shape[0] < 1:
            raise ValueError(f"structure constants must have shape (n, n, n), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("structure constants must be finite")
        scale = max(1.0, float(np.max(np.abs(c))))
        asym = np.max(np.abs(c + c.transpose(1, 0, 2)))
        if asym > STRUCTURE_TOL * scale:
            raise ValueError(f"structure constants are not antisymmetric (defect {asym:.3e})")
        jac = jacobi_defect(c)
        if jac > STRUCTURE_TOL * scale**2:
            raise ValueError(f"structure constants violate the Jacobi identity (defect {jac:.3e})")
        object.__setattr__(self, "structure_constants", c)

    @property
    def dim(self) -> int:
        return self.structure_constants.shape[0]

    def __eq__(self, other):
        if not isinstance(other, LieAlgebra):
            return NotImplemented
        return (
            self is other
            or (self.name == other.name
                and self.dim == other.dim
                and np.array_equal(self.structure_constants, other.structure_constants))
        )

    def __hash__(self):
        return hash((self.name, self.dim))

    def __repr__(self):
        return f"LieAlgebra(name={self.name!r}, dim={self.dim})"

    # -- raw coordinate operations (batched over leading axes) --------------

    def bracket(self, xi, eta) -> np.ndarray:
        return np.einsum("ijk,...i,...j->...k", self.structure_constants, xi, eta)

    def coadjoint(self, xi, mu) -> np.ndarray:
        return np.einsum("ijk,...i,...k->...j", self.structure_constants, xi, mu)

    def ad_matrix(self, xi) -> np.ndarray:
        """Matrix ``T`` with ``T @ eta == ad_xi eta``."""
        return np.einsum("ijk,i->kj", self.structure_constants, np.asarray(xi, dtype=float))

    def ad_star_matrix(self, xi) -> np.ndarray:
        """Matrix ``S`` with ``S @ mu == ad*_xi mu``; always ``ad_matrix(xi).T``."""
        return self.ad_matrix(xi).T

    # -- element constructors ----------------------------------------------

    def element(self, coords) -> AlgebraElement:
        return AlgebraElement(coords, self)

    def dual(self, coords) -> DualElement:
        return DualElement(coords, self)

    def basis(self, i: int) -> AlgebraElement:
        e = np.zeros(self.dim)
        e[i] = 1.0
        return AlgebraElement(e, self)

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "structure_constants": self.structure_constants.tolist(),
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, data: dict) -> LieAlgebra:
        c = np.asarray(data["structure_constants"], dtype=float)
        if c.shape[0] != int(data["dim"]):
            raise ValueError("'dim' does not match the structure constants")
        return cls(c, name=str(data.get("name", "")))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> LieAlgebra:
        return cls.from_dict(json.loads(text))


def jacobi_defect(c: np.ndarray) -> float:
    """Largest violation of the Jacobi identity for structure constants ``c``."""
    # sum_m c_ij^m c_mk^l + cyclic(i, j, k)
    t = np.einsum("ijm,mkl->ijkl", c, c)
    cyc = t + t.transpose(1, 2, 0, 3) + t.transpose(2, 0, 1, 3)
    return float(np.max(np.abs(cyc))) if cyc.size else 0.0


class _Element:
    """Shared arithmetic for algebra and dual elements."""

    __slots__ = ("coords", "algebra")

    def __init__(self, coords, algebra: LieAlgebra):
        coords = _readonly(coords)
        if coords.shape != (algebra.dim,):
            raise ValueError(
                f"expected {algebra.dim} coordinates for {algebra.name or 'algebra'}, "
                f"got shape {coords.shape}"
            )
        self.coords = coords
        self.algebra = algebra

    def _check(self, other):
        if type(other) is not type(self):
            raise TypeError(f"cannot combine {type(self).__name__} with {type(other).__name__}")
        if other.algebra != self.algebra:
            raise AlgebraMismatchError(
                f"elements belong to different algebras ({self.algebra!r} vs {other.algebra!r})"
            )

    def __add__(self, other):
        self._check(other)
        return type(self)(self.coords + other.coords, self.algebra)

    def __sub__(self, other):
        self._check(other)
        return type(self)(self.coords - other.coords, self.algebra)

    def __mul__(self, scalar: float):
        return type(self)(float(scalar) * self.coords, self.algebra)

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(-self.coords, self.algebra)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.coords, dtype=dtype)

    def __repr__(self):
        return f"{type(self).__name__}({self.coords.tolist()}, {self.algebra.name!r})"


class AlgebraElement(_Element):
    """Element of the Lie algebra."""


class DualElement(_Element):
    """Element of the dual of the Lie algebra."""


def ad(xi: AlgebraElement, eta: AlgebraElement) -> AlgebraElement:
    """Adjoint action ``ad_xi eta = [xi, eta]``."""
    if not isinstance(xi, AlgebraElement) or not isinstance(eta, AlgebraElement):
        raise TypeError("ad expects two AlgebraElements")
    xi._check(eta)
    return AlgebraElement(xi.algebra.bracket(xi.coords, eta.coords), xi.algebra)


def ad_star(xi: AlgebraElement, mu: DualElement) -> DualElement:
    """Coadjoint action, defined by ``<ad*_xi mu, eta> = <mu, ad_xi eta>``."""
    if not isinstance(xi, AlgebraElement) or not isinstance(mu, DualElement):
        raise TypeError("ad_star expects an AlgebraElement and a DualElement")
    if xi.algebra != mu.algebra:
        raise AlgebraMismatchError("ad_star: xi and mu belong to different algebras")
    return DualElement(xi.algebra.coadjoint(xi.coords, mu.coords), xi.algebra)


def pairing(mu: DualElement, xi: AlgebraElement) -> float:
    if not isinstance(mu, DualElement) or not isinstance(xi, AlgebraElement):
        raise TypeError("pairing expects a DualElement and an AlgebraElement")
    if xi.algebra != mu.algebra:
        raise AlgebraMismatchError("pairing: arguments belong to different algebras")
    return float(mu.coords @ xi.coords)


@dataclass(frozen=True, eq=False)
class SemidirectProduct:
    """Semidirect product ``g x| V`` of a Lie algebra with a representation.

    ``action[i]`` is the ``m x m`` matrix of ``e_i`` acting on ``V``.  The
    derived algebra has dimension ``n + m`` with bracket::

        [(xi, a), (eta, b)] = ([xi, eta], xi.b - eta.a)
    """

    base: LieAlgebra
    action: np.ndarray
    name: str = ""
    derived: LieAlgebra = field(init=False, repr=False)

    def __post_init__(self):
        rho = _readonly(self.action)
        n = self.base.dim
        if rho.ndim != 3 or rho.shape[0] != n or rho.shape[1] != rho.shape[2]:
            raise RepresentationError(f"action must have shape ({n}, m, m), got {rho.shape}")
        defect = representation_defect(self.base, rho)
        scale = max(1.0, float(np.max(np.abs(rho))) if rho.size else 1.0)
        if defect > STRUCTURE_TOL * scale**2:
            raise RepresentationError(f"action is not a representation (defect {defect:.3e})")
        object.__setattr__(self, "action", rho)
        object.__setattr__(
            self, "derived", LieAlgebra(_semidirect_constants(self.base, rho), self.name)
        )

    @property
    def rep_dim(self) -> int:
        return self.action.shape[1]

    @property
    def dim(self) -> int:
        return self.base.dim + self.rep_dim

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "action": self.action.tolist(),
            "name": self.name,
        }


def representation_defect(base: LieAlgebra, rho: np.ndarray) -> float:
    """Largest entry of ``rho([e_i, e_j]) - [rho(e_i), rho(e_j)]``."""
    lhs = np.einsum("ijk,kab->ijab", base.structure_constants, rho)
    rhs = np.einsum("iab,jbc->ijac", rho, rho) - np.einsum("jab,ibc->ijac", rho, rho)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def _semidirect_constants(base: LieAlgebra, rho: np.ndarray) -> np.ndarray:
    n, m = base.dim, rho.shape[1]
    c = np.zeros((n + m, n + m, n + m))
    c[:n, :n, :n] = base.structure_constants
    # [e_i, f_a] = rho_i f_a = sum_b rho_i[b, a] f_b
    c[:n, n:, n:] = rho.transpose(0, 2, 1)
    c[n:, :n, n:] = -rho.transpose(2, 0, 1)
    return c


def semidirect_product(base: LieAlgebra, action, name: str = "") -> SemidirectProduct:
    return SemidirectProduct(base, np.asarray(action, dtype=float), name or f"{base.name}xR{np.shape(action)[1]}")


def as_algebra(descriptor) -> LieAlgebra:
    """Return the Lie algebra behind a descriptor (plain or semidirect)."""
    if isinstance(descriptor, SemidirectProduct):
        return descriptor.derived
    if isinstance(descriptor, LieAlgebra):
        return descriptor
    raise TypeError(f"not an algebra descriptor: {descriptor!r}")


def hat(v) -> np.ndarray:
    """Skew matrix with ``hat(v) @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3() -> LieAlgebra:
    """so(3) identified with R^3; the bracket is the cross product."""
    eps = np.zeros((3, 3, 3))
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        eps[i, j, k] = 1.0
        eps[j, i, k] = -1.0
    return LieAlgebra(eps, "so3")


def heavy_top_algebra() -> SemidirectProduct:
    """so(3) x| R^3 with rotations acting on vectors."""
    return semidirect_product(so3(), np.stack([hat(e) for e in np.eye(3)]), "so3xR3")
