"""Point-source scaling limit of the reflector problem.

When the height function is scaled by lambda -> infinity, the far-field
coordinate of every ray depends only on the emission angle: the system
becomes a point source at the origin with angular intensity F(alpha) and a
polar reflector curve rho(alpha).  This module provides

* the ray map sigma_inf(alpha) solving the limiting flux balance
  sigma_inf' = F / g_hat(sigma_inf) (computed by CDF inversion);
* the polar profile ODE rho' = Phi(alpha, rho; sigma_inf), integrated by
  classical RK4;
* the limiting normal / limiting far-field coordinate of an arbitrary fixed
  profile, and the convergence experiment sigma_lambda -> sigma_inf.

Derivation of Phi.  Imposing t_x / (1 - t_z) = sigma on the reflected
direction of the polar curve gives a quadratic A rho'^2 + B rho' + C = 0 with

    A = cos a - sigma (1 - sin a)
    B = 2 rho (sigma cos a - sin a)
    C = -rho^2 (cos a + sigma (1 + sin a))

whose discriminant simplifies exactly to B^2 - 4AC = 4 rho^2.  The root
(-B - 2 rho) / (2A) is the physical branch: for a circular mirror centered
on the source (sigma = (sin a - 1)/cos a, retroreflection) it gives
rho' = 0.  That quotient is 0/0 at a = pi/2, where A vanishes identically;
using rho'_- rho'_+ = C/A to eliminate A gives the equivalent form

    rho' = -rho (cos a + sigma (1 + sin a)) / (1 + sin a - sigma cos a)

whose denominator vanishes only at sigma = (1 + sin a)/cos a, which has
magnitude >= 1 + sqrt(2) for a in (0, pi) and therefore never occurs for
far-field windows inside (-1-sqrt(2), 1+sqrt(2)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .geometry import (DomainSpec, ReflectorProfile, inv_stereographic,
                       reflect, stereographic, forward_map)
from .raytrace import FarFieldHistogram, qmc_points

DEFAULT_RK4_STEPS = 512


class LimitCaseError(Exception):
    pass


class PhiSingularityError(LimitCaseError):
    """Denominator of the polar-profile ODE vanished."""


@dataclass
class PolarReflector:
    """Polar mirror rho(alpha) > 0 around a point source at the origin."""

    alpha: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.rho = np.asarray(self.rho, dtype=float)
        if np.any(np.diff(self.alpha) <= 0):
            raise LimitCaseError("alpha grid must be strictly increasing")
        if np.any(self.rho <= 0):
            raise LimitCaseError("rho must stay positive")

    def spline(self):
        return CubicSpline(self.alpha, self.rho)

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "rho"])
            for a, r in zip(self.alpha, self.rho):
                w.writerow([repr(float(a)), repr(float(r))])


def ray_map_ode(F, g_hat, domain: DomainSpec, grid_n: int = 513):
    """sigma_inf(alpha) on a uniform alpha grid, by CDF inversion.

    Equivalent to integrating sigma_inf' = F / g_hat(sigma_inf) from
    sigma_inf(alpha_min) = t_min, but unconditionally monotone; both
    endpoints are pinned exactly.  Fluxes are rescaled to match.
    """
    alpha = np.linspace(domain.alpha_min, domain.alpha_max, grid_n)
    Fv = np.maximum(np.asarray(F(alpha), dtype=float), 0.0)
    cF = np.concatenate([[0.0],
                         np.cumsum(0.5 * (Fv[1:] + Fv[:-1]) * np.diff(alpha))])
    if cF[-1] <= 0.0:
        raise LimitCaseError("angular marginal carries no flux")
    sig = np.linspace(domain.t_min, domain.t_max, 4 * grid_n)
    gv = np.maximum(np.asarray(g_hat(sig), dtype=float), 0.0)
    cG = np.concatenate([[0.0],
                         np.cumsum(0.5 * (gv[1:] + gv[:-1]) * np.diff(sig))])
    if cG[-1] <= 0.0:
        raise LimitCaseError("far-field target carries no flux")
    Fn = cF / cF[-1]
    Gn = cG / cG[-1]
    Gn_u, keep = np.unique(Gn, return_index=True)
    sigma_inf = np.interp(Fn, Gn_u, sig[keep])
    sigma_inf[0] = domain.t_min
    sigma_inf[-1] = domain.t_max
    sigma_inf = np.maximum.accumulate(sigma_inf)
    return alpha, sigma_inf


def phi_coefficients(alpha, rho, sigma):
    """Quadratic coefficients (A, B, C) with A rho'^2 + B rho' + C = 0."""
    sa, ca = np.sin(alpha), np.cos(alpha)
    A = ca - sigma * (1.0 - sa)
    B = 2.0 * rho * (sigma * ca - sa)
    C = -rho ** 2 * (ca + sigma * (1.0 + sa))
    return A, B, C


def phi(alpha, rho, sigma, singular_tol: float = 1e-12):
    """rho' = Phi(alpha, rho; sigma): closed-form physical root (the form
    that stays regular across alpha = pi/2, see module docstring)."""
    sa, ca = np.sin(alpha), np.cos(alpha)
    den = 1.0 + sa - sigma * ca
    if np.any(np.abs(np.asarray(den)) < singular_tol):
        raise PhiSingularityError("profile ODE denominator vanished")
    return -rho * (ca + sigma * (1.0 + sa)) / den


def rho_ode(sigma_inf, h: float, alpha_grid, domain: DomainSpec,
            n_steps: int = DEFAULT_RK4_STEPS) -> PolarReflector:
    """Integrate rho' = Phi from rho(alpha_min) = h by classical RK4.

    ``sigma_inf`` may be a callable of alpha or samples on ``alpha_grid``
    (interpolated cubically in the latter case).  The ODE is linear in rho,
    so scaling h scales the whole solution exactly.
    """
    if h <= 0:
        raise LimitCaseError("initial radius h must be positive")
    alpha_grid = np.asarray(alpha_grid, dtype=float)
    if callable(sigma_inf):
        sig_fn = sigma_inf
    else:
        sig_fn = CubicSpline(alpha_grid, np.asarray(sigma_inf, dtype=float))
    a0, a1 = domain.alpha_min, domain.alpha_max
    dense = np.linspace(a0, a1, n_steps + 1)
    rho = np.empty(n_steps + 1)
    rho[0] = h
    dt = (a1 - a0) / n_steps
    r = h
    for k in range(n_steps):
        a = dense[k]
        k1 = phi(a, r, float(sig_fn(a)))
        k2 = phi(a + 0.5 * dt, r + 0.5 * dt * k1, float(sig_fn(a + 0.5 * dt)))
        k3 = phi(a + 0.5 * dt, r + 0.5 * dt * k2, float(sig_fn(a + 0.5 * dt)))
        k4 = phi(a + dt, r + dt * k3, float(sig_fn(a + dt)))
        r = r + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.isfinite(r) or r <= 0:
            raise LimitCaseError("polar profile left the positive cone")
        rho[k + 1] = r
    out = PolarReflector(alpha=dense, rho=rho)
    if alpha_grid.size and not np.array_equal(alpha_grid, dense):
        spl = CubicSpline(dense, rho)
        out = PolarReflector(alpha=alpha_grid, rho=spl(alpha_grid))
    return out


def polar_sigma(polar: PolarReflector, alpha):
    """Far-field coordinate of the ray emitted at angle alpha."""
    spl = polar.spline()
    dspl = spl.derivative()
    a = np.asarray(alpha, dtype=float)
    r = spl(a)
    rp = dspl(a)
    D = rp ** 2 + r ** 2
    sa, ca = np.sin(a), np.cos(a)
    tx = ca - (2.0 * r / D) * (rp * sa + r * ca)
    tz = sa - (2.0 * r / D) * (-rp * ca + r * sa)
    return tx / (1.0 - tz)


def point_source_trace(polar: PolarReflector, F, domain: DomainSpec,
                       n_rays: int = 2 ** 15,
                       n_bins: int = 64) -> FarFieldHistogram:
    """Deterministic QMC trace of the polar mirror from the point source."""
    edges = np.linspace(domain.t_min, domain.t_max, n_bins + 1)
    pts = qmc_points(n_rays)[:, 0]
    a = domain.alpha_min + pts * (domain.alpha_max - domain.alpha_min)
    w = np.asarray(F(a), dtype=float) * (
        (domain.alpha_max - domain.alpha_min) / n_rays)
    w = np.broadcast_to(w, a.shape)
    sigma = polar_sigma(polar, a)
    weights, _ = np.histogram(sigma, bins=edges, weights=w)
    at_top = sigma == edges[-1]
    if np.any(at_top):
        weights[-1] += float(np.sum(w[at_top]))
    inside = (sigma >= edges[0]) & (sigma <= edges[-1])
    return FarFieldHistogram(edges=edges, weights=weights,
                             total_flux=float(np.sum(w)),
                             out_of_range=float(np.sum(w[~inside])),
                             n_rays=n_rays, miss_count=int(np.sum(~inside)))


def point_source_design(F, g_hat, domain: DomainSpec, h: float = 1.0,
                        grid_n: int = 513,
                        n_steps: int = DEFAULT_RK4_STEPS) -> PolarReflector:
    """Full limiting design: ray map by flux balance, then the profile ODE."""
    alpha, sigma_inf = ray_map_ode(F, g_hat, domain, grid_n=grid_n)
    return rho_ode(sigma_inf, h, alpha, domain, n_steps=n_steps)


def _beta_inverse(alpha, domain: DomainSpec):
    return domain.l_min + (np.asarray(alpha, dtype=float)
                           - domain.alpha_max) / domain.beta_slope


def limiting_normal(prof: ReflectorProfile, alpha):
    """Unit normal of lambda * u as lambda -> infinity, at beta^{-1}(alpha)."""
    d = prof.domain
    a = np.asarray(alpha, dtype=float)
    p = _beta_inverse(a, d)
    u, du = prof.height(p)
    bp = d.beta_slope
    sb, cb = np.sin(a), np.cos(a)   # beta(p) = alpha by construction
    nx = du * sb + u * bp * cb
    nz = -du * cb + u * bp * sb
    nrm = np.hypot(nx, nz)
    return nx / nrm, nz / nrm


def limiting_sigma(prof: ReflectorProfile, alpha):
    """sigma_inf(alpha) of a fixed profile: limiting normal, reflect, project."""
    a = np.asarray(alpha, dtype=float)
    n = limiting_normal(prof, a)
    t = reflect((np.cos(a), np.sin(a)), n)
    return stereographic(t)


def scaling_convergence(prof: ReflectorProfile, lambdas,
                        n_s: int = 16, n_alpha: int = 64):
    """Max over an (s, alpha) grid of |sigma_lambda - sigma_inf| per lambda.

    Also reports the spread over s at fixed alpha.  The grid stays strictly
    inside the angular interval so every ray is interior.
    """
    d = prof.domain
    lambdas = [float(l) for l in lambdas]
    if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
        raise LimitCaseError("lambda values must be strictly increasing")
    s = np.linspace(d.l_min, d.l_max, n_s)
    margin = 1e-6 * (d.alpha_max - d.alpha_min)
    alpha = np.linspace(d.alpha_min + margin, d.alpha_max - margin, n_alpha)
    S, A = np.meshgrid(s, alpha, indexing="ij")
    sig_inf = limiting_sigma(prof, alpha)[None, :]
    max_err = []
    spread = []
    for lam in lambdas:
        scaled = prof.scaled(lam)
        _, sig = forward_map(S.ravel(), A.ravel(), scaled)
        sig = sig.reshape(S.shape)
        max_err.append(float(np.max(np.abs(sig - sig_inf))))
        spread.append(float(np.max(sig.max(axis=0) - sig.min(axis=0))))
    return max_err, spread


def save_convergence_csv(lambdas, max_err, spread, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "max_error", "spread_over_s"])
        for lam, e, sp in zip(lambdas, max_err, spread):
            w.writerow([repr(float(lam)), repr(float(e)), repr(float(sp))])
