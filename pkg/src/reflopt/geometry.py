"""Deterministic optical geometry of the 2D finite-source reflector system.

The reflector curve is r(p) = (p, 0) + u(p) (cos beta(p), sin beta(p)) with
an affine angular map beta sending [l_min, l_max] onto [alpha_max, alpha_min].
Every function here is generic over plain numpy data, tape scalars, and dual
numbers (see :mod:`reflopt.ad`), and pure: no shared mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import ad
from .ad import value_of

TANGENT_TOL = 1e-14  # below representable curvature scales
_VZ_TOL = 1e-12      # back-traced ray treated as parallel to the source line


class GeometryError(Exception):
    pass


class DomainError(GeometryError):
    pass


class SingularTangentError(GeometryError):
    pass


class ProjectionError(GeometryError):
    """Reflected ray points at the stereographic projection pole."""


class BracketError(GeometryError):
    """Viewing-angle bracket violated beyond numerical slack."""


@dataclass(frozen=True)
class DomainSpec:
    """Source interval, angular interval, and far-field interval bounds."""

    l_min: float
    l_max: float
    alpha_min: float
    alpha_max: float
    t_min: float
    t_max: float

    def __post_init__(self):
        if not self.l_min < self.l_max:
            raise DomainError("require l_min < l_max")
        if not (0.0 < self.alpha_min < self.alpha_max < np.pi):
            raise DomainError("require 0 < alpha_min < alpha_max < pi")
        if not self.t_min < self.t_max:
            raise DomainError("require t_min < t_max")

    @property
    def beta_slope(self):
        return (self.alpha_min - self.alpha_max) / (self.l_max - self.l_min)

    @property
    def source_area(self):
        return (self.l_max - self.l_min) * (self.alpha_max - self.alpha_min)


@dataclass(frozen=True)
class ReflectorProfile:
    """Height function u > 0 over the source interval.

    ``height(p) -> (u, du/dp)`` must accept scalars, arrays, tape scalars,
    and dual numbers.
    """

    height: Callable
    domain: DomainSpec

    def scaled(self, lam: float) -> "ReflectorProfile":
        base = self.height

        def scaled_height(p):
            u, du = base(p)
            return lam * u, lam * du

        return ReflectorProfile(height=scaled_height, domain=self.domain)


def constant_profile(c: float, domain: DomainSpec) -> ReflectorProfile:
    if c <= 0:
        raise DomainError("height must be positive")
    return ReflectorProfile(height=lambda p: (c + 0.0 * p, 0.0 * p), domain=domain)


def profile_from_samples(s, u, domain: DomainSpec) -> ReflectorProfile:
    """Cubic-spline profile through height samples (numpy-path only)."""
    from scipy.interpolate import CubicSpline

    spl = CubicSpline(np.asarray(s, dtype=float), np.asarray(u, dtype=float))
    dspl = spl.derivative()
    return ReflectorProfile(height=lambda p: (spl(p), dspl(p)), domain=domain)


class BackTrace(NamedTuple):
    """Result of the closed-form inverse map; invalid entries carry a flag."""

    s: object
    alpha: object
    valid: object  # bool or boolean array


def _check_in_interval(x, lo, hi, what, tol=1e-9):
    v = np.asarray(value_of(x))
    if np.any(v < lo - tol) or np.any(v > hi + tol):
        raise DomainError(f"{what} outside [{lo}, {hi}]")


def beta(p, d: DomainSpec, check: bool = True):
    """Affine angular map: beta(l_min) = alpha_max, beta(l_max) = alpha_min."""
    if check:
        _check_in_interval(p, d.l_min, d.l_max, "p")
    return d.alpha_max + d.beta_slope * (p - d.l_min)


def reflector_point(p, prof: ReflectorProfile, check: bool = True):
    d = prof.domain
    b = beta(p, d, check=check)
    u, _ = prof.height(p)
    return p + u * ad.cos(b), u * ad.sin(b)


def reflector_derivs(p, prof: ReflectorProfile, check: bool = True):
    """(r_x', r_z') from u, u' and the constant beta slope."""
    d = prof.domain
    b = beta(p, d, check=check)
    u, du = prof.height(p)
    sb, cb = ad.sin(b), ad.cos(b)
    bp = d.beta_slope
    rxp = 1.0 - bp * sb * u + cb * du
    rzp = bp * cb * u + sb * du
    return rxp, rzp


def reflector_normal(p, prof: ReflectorProfile, check: bool = True):
    """Unit normal (r_z', -r_x') / ||.||, pointing toward the source side."""
    rxp, rzp = reflector_derivs(p, prof, check=check)
    norm2 = rxp * rxp + rzp * rzp
    if np.any(np.asarray(value_of(norm2)) < TANGENT_TOL ** 2):
        raise SingularTangentError("degenerate tangent (norm below 1e-14)")
    inv = 1.0 / ad.sqrt(norm2)
    return rzp * inv, -rxp * inv


def reflect(incident, normal):
    """Mirror reflection t = s - 2 <s, n> n for unit vectors."""
    sx, sz = incident
    nx, nz = normal
    dot = sx * nx + sz * nz
    return sx - 2.0 * dot * nx, sz - 2.0 * dot * nz


def stereographic(t):
    """sigma = t_x / (1 - t_z); errors on rays toward the pole (0, 1)."""
    tx, tz = t
    denom_v = 1.0 - np.asarray(value_of(tz))
    if np.any(np.abs(denom_v) < 1e-300):
        raise ProjectionError("reflected ray points at the projection pole")
    return tx / (1.0 - tz)


def inv_stereographic(sigma):
    d = sigma * sigma + 1.0
    return 2.0 * sigma / d, (sigma * sigma - 1.0) / d


def inverse_map(p, sigma, prof: ReflectorProfile, check: bool = True) -> BackTrace:
    """Closed-form back-tracing (p, sigma) -> (s, alpha).

    Out-of-domain results (s outside the source interval, alpha outside the
    angular interval, or a back-traced ray parallel to the source line) are
    flagged rather than raised: the pushforward density is zero there.
    """
    d = prof.domain
    if check:
        _check_in_interval(p, d.l_min, d.l_max, "p")
    t = inv_stereographic(sigma)
    n = reflector_normal(p, prof, check=False)
    tx, tz = t
    nx, nz = n
    dot = tx * nx + tz * nz
    vx = 2.0 * dot * nx - tx
    vz = 2.0 * dot * nz - tz
    vz_v = np.asarray(value_of(vz))
    ok = np.abs(vz_v) > _VZ_TOL
    vz_safe = ad.where(ok, vz, 1.0)
    rx, rz = reflector_point(p, prof, check=False)
    s = rx - rz * vx / vz_safe
    alpha = ad.atan2(-vz, -vx)
    s_v = np.asarray(value_of(s))
    a_v = np.asarray(value_of(alpha))
    valid = (ok & (s_v >= d.l_min) & (s_v <= d.l_max)
             & (a_v >= d.alpha_min) & (a_v <= d.alpha_max))
    if valid.ndim == 0:
        valid = bool(valid)
    return BackTrace(s, alpha, valid)


def viewing_angle(s, p, prof: ReflectorProfile, check: bool = True):
    """Angle under which source point (s, 0) sees reflector point r(p)."""
    d = prof.domain
    b = beta(p, d, check=check)
    u, _ = prof.height(p)
    return ad.atan2(u * ad.sin(b), p - s + u * ad.cos(b))


def _viewing_angle_and_slope(s, p, prof: ReflectorProfile):
    d = prof.domain
    b = beta(p, d, check=False)
    u, du = prof.height(p)
    sb, cb = np.sin(value_of(b)), np.cos(value_of(b))
    u = value_of(u)
    du = value_of(du)
    bp = d.beta_slope
    dz = u * sb
    dx = p - s + u * cb
    dzp = du * sb + u * bp * cb
    dxp = 1.0 + du * cb - u * bp * sb
    r2 = dx * dx + dz * dz
    return np.arctan2(dz, dx), (dx * dzp - dz * dxp) / r2


def forward_map(s, alpha, prof: ReflectorProfile,
                n_bisect: int = 30, n_newton: int = 3,
                gamma_tol: float = 1e-12, bracket_slack: float = 1e-8):
    """Forward trace (s, alpha) -> (p, sigma) via bracketed root finding.

    The viewing angle gamma_s is strictly decreasing in p with
    gamma_s(l_min) >= alpha_max and gamma_s(l_max) <= alpha_min, so bisection
    on [l_min, l_max] always brackets the intersection; three Newton polish
    steps then reach |gamma - alpha| < 1e-12.  Numpy path only (vectorized).
    """
    d = prof.domain
    s = np.asarray(s, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    scalar_in = s.ndim == 0 and alpha.ndim == 0
    s, alpha = np.broadcast_arrays(s, alpha)
    s = s.astype(float).copy()
    alpha = alpha.astype(float).copy()

    lo = np.full(s.shape, d.l_min)
    hi = np.full(s.shape, d.l_max)
    g_lo, _ = _viewing_angle_and_slope(s, lo, prof)
    g_hi, _ = _viewing_angle_and_slope(s, hi, prof)
    if np.any(g_lo < alpha - bracket_slack) or np.any(g_hi > alpha + bracket_slack):
        raise BracketError("viewing-angle bracket violated beyond slack")
    # clamp edge cases inside the numerical bracket
    alpha = np.minimum(np.maximum(alpha, g_hi), g_lo)

    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        g_mid, _ = _viewing_angle_and_slope(s, mid, prof)
        go_right = g_mid > alpha
        lo = np.where(go_right, mid, lo)
        hi = np.where(go_right, hi, mid)
    p = 0.5 * (lo + hi)
    for _ in range(n_newton):
        g, gp = _viewing_angle_and_slope(s, p, prof)
        step = (g - alpha) / gp
        p = np.clip(p - step, d.l_min, d.l_max)

    g, _ = _viewing_angle_and_slope(s, p, prof)
    bad = np.abs(g - alpha) > gamma_tol
    if np.any(bad):
        # widen-tolerance retry: extra bisection refinement on offenders
        lo_b = np.where(bad, np.full_like(p, d.l_min), p)
        hi_b = np.where(bad, np.full_like(p, d.l_max), p)
        for _ in range(60):
            mid = 0.5 * (lo_b + hi_b)
            g_mid, _ = _viewing_angle_and_slope(s, mid, prof)
            go_right = g_mid > alpha
            lo_b = np.where(go_right, mid, lo_b)
            hi_b = np.where(go_right, hi_b, mid)
        p = np.where(bad, 0.5 * (lo_b + hi_b), p)
        g, _ = _viewing_angle_and_slope(s, p, prof)
        if np.any(np.abs(g - alpha) > 1e-9):
            raise BracketError("root refinement failed to meet tolerance")

    n = reflector_normal(p, prof, check=False)
    t = reflect((np.cos(alpha), np.sin(alpha)), n)
    sigma = stereographic(t)
    if scalar_in:
        return float(p), float(sigma)
    return p, sigma
