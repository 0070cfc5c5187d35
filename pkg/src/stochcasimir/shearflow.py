"""Planar shear flows ``u_e = (u(y), 0)`` under noise ``sigma_k = (eta_k(y), 0)``.

Two quantities decide transient stability here: the sign of
``K'(omega_e) / omega_e = u / u''`` (Bernoulli-function test, requires no
inflection point) and the noise constant
``Sigma_1 = sqrt(max_y sum_k eta_k'(y)^2)``, which plays the role of
``Sigma`` in the stopping time.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .stability import stopping_time

__all__ = [
    "ProfileError",
    "ShearFlowProfile",
    "fd_weights",
    "derivative",
    "sigma1",
    "bernoulli_sign_test",
    "shear_certificate",
    "read_profile_csv",
]

STENCIL = 5  # 4th-order accurate first derivatives


class ProfileError(ValueError):
    """Malformed profile data."""


@dataclass(frozen=True, eq=False)
class ShearFlowProfile:
    """Velocity ``u`` and noise profiles ``eta`` sampled on ``y``.

    For ``boundary="periodic"`` the grid holds one period without the
    duplicated endpoint; ``period`` defaults to ``y[-1] - y[0] + (y[1] - y[0])``.
    """

    y: np.ndarray
    u: np.ndarray
    eta: np.ndarray
    boundary: str = "clamped"
    period: float | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        u = np.asarray(self.u, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if eta.ndim == 1:
            eta = eta[None, :] if eta.size else np.zeros((0, y.size))
        if y.ndim != 1 or y.size < STENCIL:
            raise ProfileError(f"need at least {STENCIL} grid points")
        if np.any(np.diff(y) <= 0):
            raise ProfileError("y grid must be strictly increasing")
        if u.shape != y.shape or eta.shape[1:] != y.shape:
            raise ProfileError("u and eta must be sampled on the y grid")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(u)) and np.all(np.isfinite(eta))):
            raise ProfileError("profile samples must be finite")
        if self.boundary not in ("periodic", "clamped"):
            raise ProfileError("boundary must be 'periodic' or 'clamped'")
        period = self.period
        if self.boundary == "periodic":
            period = float(y[-1] - y[0] + (y[1] - y[0])) if period is None else float(period)
            if period <= y[-1] - y[0]:
                raise ProfileError("period must exceed the grid extent")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "eta", eta)
        object.__setattr__(self, "period", period)


def fd_weights(x0: float, x: np.ndarray, order: int) -> np.ndarray:
    """Fornberg finite-difference weights for the ``order``-th derivative at ``x0``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    c = np.zeros((n, order + 1))
    c1, c4 = 1.0, x[0] - x0
    c[0, 0] = 1.0
    for i in range(1, n):
        mn = min(i, order)
        c2, c5, c4 = 1.0, c4, x[i] - x0
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[i, k] = c1 * (k * c[i - 1, k - 1] - c5 * c[i - 1, k]) / c2
                c[i, 0] = -c1 * c5 * c[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                c[j, k] = (c4 * c[j, k] - k * c[j, k - 1]) / c3
            c[j, 0] = c4 * c[j, 0] / c3
        c1 = c2
    return c[:, order]


def derivative(profile: ShearFlowProfile, f: np.ndarray, order: int = 1) -> np.ndarray:
    """``order``-th derivative of samples ``f`` (last axis on the grid).

    Five-point stencils: centred in the interior, wrapped for periodic
    profiles, shifted one-sided near clamped boundaries.
    """
    y = profile.y
    m = y.size
    f = np.asarray(f, dtype=float)
    half = STENCIL // 2
    out = np.empty_like(f)
    for i in range(m):
        if profile.boundary == "periodic":
            offs = np.arange(i - half, i + half + 1)
            idx = offs % m
            pts = y[idx] + np.floor_divide(offs, m) * profile.period
        else:
            lo = min(max(i - half, 0), m - STENCIL)
            idx = np.arange(lo, lo + STENCIL)
            pts = y[idx]
        # derivative weights sum to zero, so differencing against f_i is exact
        # and makes constant profiles (and constant shifts) drop out identically
        out[..., i] = (f[..., idx] - f[..., i:i + 1]) @ fd_weights(y[i], pts, order)
    return out


def sigma1(profile: ShearFlowProfile) -> float:
    """Smallest ``Sigma_1`` with ``sum_k eta_k'(y)^2 <= Sigma_1^2`` on the grid."""
    if profile.eta.shape[0] == 0:
        return 0.0
    d = derivative(profile, profile.eta, 1)
    return math.sqrt(float(np.max(np.sum(d * d, axis=0))))


@dataclass(frozen=True)
class SignTestReport:
    verdict: str          # "stable_sign" | "indefinite" | "degenerate"
    sign: int             # sign of u/u'' when verdict is stable_sign, else 0
    ratio_min: float
    ratio_max: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "stable_sign"

    def to_dict(self) -> dict:
        def f(x):
            return x if math.isfinite(x) else None
        return {"verdict": self.verdict, "sign": self.sign, "ratio_min": f(self.ratio_min),
                "ratio_max": f(self.ratio_max), "detail": self.detail}


def bernoulli_sign_test(profile: ShearFlowProfile, margin: float = 1e-10) -> SignTestReport:
    """Sign test of ``K'(omega_e)/omega_e = u/u''`` over the grid.

    Degenerate when ``u''`` vanishes (relative to its maximum) or changes sign
    anywhere, i.e. the profile has an inflection point or is linear.
    """
    upp = derivative(profile, profile.u, 2)
    scale = float(np.max(np.abs(upp)))
    if scale == 0.0 or np.any(np.abs(upp) < margin * scale):
        return SignTestReport("degenerate", 0, math.nan, math.nan, "u'' vanishes on the grid")
    if np.any(upp > 0) and np.any(upp < 0):
        return SignTestReport("degenerate", 0, math.nan, math.nan, "u'' changes sign (inflection point)")
    ratio = profile.u / upp
    lo, hi = float(ratio.min()), float(ratio.max())
    if lo > margin:
        return SignTestReport("stable_sign", 1, lo, hi)
    if hi < -margin:
        return SignTestReport("stable_sign", -1, lo, hi)
    return SignTestReport("indefinite", 0, lo, hi, "u/u'' is not of one strict sign")


def shear_certificate(profile: ShearFlowProfile, eps: float, delta: float) -> dict:
    """``Sigma_1^2``, the stopping time and the noise well-posedness maxima."""
    test = bernoulli_sign_test(profile)
    if not test.passed:
        from .stability import CertificationError
        raise CertificationError("bernoulli_sign_test", f"profile verdict is {test.verdict}", test.to_dict())
    s1 = sigma1(profile)
    t_max = stopping_time(eps, delta, s1 * s1)
    eta_sq = float(np.max(np.sum(profile.eta**2, axis=0))) if profile.eta.shape[0] else 0.0
    return {
        "certified": True,
        "sign_test": test.to_dict(),
        "sigma1": s1,
        "sigma1_sq": s1 * s1,
        "eps": eps,
        "delta": delta,
        "T_max": t_max if math.isfinite(t_max) else None,
        "unbounded": not math.isfinite(t_max),
        "well_posedness": {"sup_noise_sq": eta_sq, "max_grad_noise_sq": s1 * s1,
                           "finite": math.isfinite(eta_sq + s1 * s1)},
    }


def read_profile_csv(path, boundary: str = "clamped", period: float | None = None) -> ShearFlowProfile:
    """Read columns ``y, u, eta_1, ..., eta_K``; errors carry the line number."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ProfileError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["y", "u"] or any(not h.startswith("eta_") for h in header[2:]):
        raise ProfileError(f"{path}:1: header must be 'y,u,eta_1,...,eta_K', got {','.join(header)}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ProfileError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            vals = [float(c) for c in row]
        except ValueError:
            raise ProfileError(f"{path}:{lineno}: non-numeric value in {row}") from None
        data.append(vals)
    if not data:
        raise ProfileError(f"{path}: no data rows")
    arr = np.array(data)
    return ShearFlowProfile(arr[:, 0], arr[:, 1], arr[:, 2:].T, boundary=boundary, period=period)
