"""Deconvolution baseline: flux-balance mapping, linear ODE for the height
profile in integrating-factor form, the ray-traced forward operator, and the
clipped Van Cittert iteration.

The monotone mapping m is recovered by CDF inversion (unconditionally
monotone, robust near zeros of the target), the ODE coefficients follow the
reduced single-direction emission model, and the closed-form solution
u = (h + int b mu) / mu is affine in the initial value h, which makes the
minimum-height adjustment a scalar bisection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import cumulative_simpson

from .geometry import DomainSpec, ReflectorProfile, profile_from_samples
from .raytrace import nmae, target_bin_integrals, trace
from .sources import SourceSpec, TargetSpec

DEFAULT_GRID_N = 257   # odd count for cumulative Simpson
DEFAULT_ETA = 0.5
DEFAULT_ITERATIONS = 30


class DeconvError(Exception):
    pass


class SingularCoefficientError(DeconvError):
    """a(s), b(s) denominator vanished (reflected ray at the projection pole)."""


@dataclass
class MonotoneMap:
    s: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.m) <= 0):
            raise DeconvError("mapping is not strictly increasing")

    def __call__(self, x):
        return np.interp(x, self.s, self.m)


@dataclass
class OdeCoeffs:
    s: np.ndarray
    a: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    cum_b_mu: np.ndarray
    log_mu: np.ndarray


def flux_map(f_marginal: Callable, target, domain: DomainSpec,
             grid_n: int = DEFAULT_GRID_N) -> MonotoneMap:
    """Monotone m with the cumulative flux of f up to s equal to that of g up
    to m(s); computed as G^{-1}(F(s)) on cumulative-trapezoid CDFs."""
    s = np.linspace(domain.l_min, domain.l_max, grid_n)
    fs = np.maximum(np.asarray(f_marginal(s), dtype=float), 0.0)
    F = np.concatenate([[0.0], np.cumsum(0.5 * (fs[1:] + fs[:-1]) * np.diff(s))])
    total_f = F[-1]
    if total_f <= 0.0:
        raise DeconvError("source marginal carries no flux")
    sig = np.linspace(domain.t_min, domain.t_max, 4 * grid_n)
    if isinstance(target, TargetSpec):
        gv = np.asarray(target.density(sig), dtype=float)
    else:
        gv = np.asarray(target(sig), dtype=float)
    gv = np.maximum(gv, 0.0)
    G = np.concatenate([[0.0],
                        np.cumsum(0.5 * (gv[1:] + gv[:-1]) * np.diff(sig))])
    total_g = G[-1]
    if total_g <= 0.0:
        raise DeconvError("target carries no flux")
    # rescale source flux to the target flux, then invert the target CDF
    Fn = F / total_f
    Gn = G / total_g
    Gn_u, keep = np.unique(Gn, return_index=True)
    m = np.interp(Fn, Gn_u, sig[keep])
    m[0] = domain.t_min
    m[-1] = domain.t_max
    m = np.maximum.accumulate(m)
    eps = 1e-12 * (domain.t_max - domain.t_min)
    for k in range(1, m.size):
        if m[k] <= m[k - 1]:
            m[k] = m[k - 1] + eps
    m[-1] = domain.t_max
    return MonotoneMap(s=s, m=m)


def ode_coeffs(mono: MonotoneMap, domain: DomainSpec,
               singular_tol: float = 1e-12) -> OdeCoeffs:
    """Linear-form coefficients of u' + a u = b along the source grid."""
    s = mono.s
    sig = mono.m
    bet = domain.alpha_max + domain.beta_slope * (s - domain.l_min)
    bp = domain.beta_slope
    sb = np.sin(bet)
    cb = np.cos(bet)
    den = -sig ** 2 * sb + sig ** 2 - 2.0 * sig * cb + sb + 1.0
    if np.any(np.abs(den) < singular_tol):
        raise SingularCoefficientError(
            "coefficient denominator vanished on the grid")
    a = bp * (-sig ** 2 * cb + 2.0 * sig * sb + cb) / den
    b = (-sig ** 2 * cb + 2.0 * sig - cb) / den
    log_mu = cumulative_simpson(a, x=s, initial=0.0)
    mu = np.exp(log_mu)
    if not np.all(np.isfinite(mu)):
        raise DeconvError("integrating factor overflowed")
    shift = np.max(log_mu)
    cum = cumulative_simpson(b * np.exp(log_mu - shift), x=s, initial=0.0)
    cum_b_mu = cum * np.exp(shift)
    return OdeCoeffs(s=s, a=a, b=b, mu=mu, cum_b_mu=cum_b_mu, log_mu=log_mu)


def u_prime_geometric(s, u, sigma, domain: DomainSpec):
    """u'(s) from the reconstructed normal (reference form of the ODE RHS)."""
    bet = domain.alpha_max + domain.beta_slope * (s - domain.l_min)
    bp = domain.beta_slope
    tx = 2.0 * sigma / (sigma ** 2 + 1.0)
    tz = (sigma ** 2 - 1.0) / (sigma ** 2 + 1.0)
    sx, sz = np.cos(bet), np.sin(bet)
    nx, nz = tx - sx, tz - sz
    nrm = np.hypot(nx, nz)
    nx, nz = nx / nrm, nz / nrm
    rx_hat, rz_hat = -nz, nx
    num = -rx_hat * bp * u * np.cos(bet) - rz_hat * bp * u * np.sin(bet) + rz_hat
    den = rx_hat * np.sin(bet) - rz_hat * np.cos(bet)
    return num / den


def solve_reflector(coeffs: OdeCoeffs, h: float) -> np.ndarray:
    """u(s) = (h + int_{l_min}^{s} b mu) / mu; u at the left endpoint is h."""
    if h <= 0.0:
        raise DeconvError("initial height must be positive")
    u = (h + coeffs.cum_b_mu) / coeffs.mu
    if not np.all(np.isfinite(u)):
        # rescaling retry in log space
        shift = np.max(coeffs.log_mu)
        u = (h * np.exp(-coeffs.log_mu)
             + coeffs.cum_b_mu * np.exp(-shift)
             * np.exp(shift - coeffs.log_mu))
        if not np.all(np.isfinite(u)):
            raise DeconvError("reflector solve overflowed")
    return u


def ray_check(u: np.ndarray, mono: MonotoneMap, domain: DomainSpec) -> float:
    """Max |sigma_geom(s) - m(s)|: single-direction trace of the solved
    profile against the mapping it was built from."""
    from scipy.interpolate import CubicSpline

    s = mono.s
    bet = domain.alpha_max + domain.beta_slope * (s - domain.l_min)
    bp = domain.beta_slope
    du = CubicSpline(s, u).derivative()(s)
    sb, cb = np.sin(bet), np.cos(bet)
    rxp = 1.0 - bp * sb * u + cb * du
    rzp = bp * cb * u + sb * du
    nrm = np.hypot(rxp, rzp)
    nx, nz = rzp / nrm, -rxp / nrm
    sx, sz = cb, sb
    dot = sx * nx + sz * nz
    tx = sx - 2.0 * dot * nx
    tz = sz - 2.0 * dot * nz
    sigma_geom = tx / (1.0 - tz)
    return float(np.max(np.abs(sigma_geom - mono.m)))


def adjust_h(coeffs: OdeCoeffs, h_min: float, tol: float = 1e-9) -> float:
    """h such that min_s u_h(s) = h_min; u is affine and increasing in h."""
    if h_min <= 0.0:
        raise DeconvError("h_min must be positive")

    def min_u(h):
        return float(np.min((h + coeffs.cum_b_mu) / coeffs.mu))

    lo = hi = h_min
    for _ in range(200):
        if min_u(lo) <= h_min:
            break
        lo *= 0.5
    for _ in range(200):
        if min_u(hi) >= h_min:
            break
        hi *= 2.0
    if min_u(lo) > h_min or min_u(hi) < h_min:
        raise DeconvError("failed to bracket the height adjustment")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if min_u(mid) < h_min:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    h = hi
    if abs(min_u(h) - h_min) > 1e-6 * max(1.0, h_min):
        raise DeconvError("height adjustment did not converge")
    return h


@dataclass
class PResult:
    """One application of the forward operator."""

    values: np.ndarray          # resampled far-field density at the grid
    profile: ReflectorProfile   # reflector solved in step 1
    histogram: object           # full finite-source trace of that reflector
    h: float
    u_samples: np.ndarray


def make_operator_P(source: SourceSpec, domain: DomainSpec, h_min: float,
                    n_rays: int = 2 ** 19, n_bins: int = 64,
                    grid_n: int = DEFAULT_GRID_N, target_flux: float | None = None):
    """Forward operator: solve the reduced problem for a virtual target,
    ray-trace the resulting reflector under the full finite source, and
    resample the normalized bin densities back onto the sigma grid."""
    edges = np.linspace(domain.t_min, domain.t_max, n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    widths = np.diff(edges)

    def P(g_tilde: np.ndarray) -> PResult:
        g_tilde = np.maximum(np.asarray(g_tilde, dtype=float), 0.0)
        if np.sum(g_tilde) <= 0.0:
            raise DeconvError("virtual target carries no flux")

        def g_fn(sig):
            return np.interp(sig, centers, g_tilde,
                             left=g_tilde[0], right=g_tilde[-1])

        mono = flux_map(source.marginal_s, g_fn, domain, grid_n)
        coeffs = ode_coeffs(mono, domain)
        h = adjust_h(coeffs, h_min)
        u = solve_reflector(coeffs, h)
        prof = profile_from_samples(mono.s, u, domain)
        hist = trace(prof, source, n_rays=n_rays, n_bins=n_bins)
        dens = hist.weights / widths
        have = float(np.sum(hist.weights))
        want = target_flux if target_flux is not None else float(
            np.trapezoid(g_tilde, centers))
        if have > 0.0:
            dens = dens * (want / (have + hist.out_of_range))
        vals = np.interp(centers, centers, dens)  # grids coincide by design
        return PResult(values=vals, profile=prof, histogram=hist, h=h,
                       u_samples=u)

    return P


def van_cittert(g_hat: np.ndarray, P, eta: float = DEFAULT_ETA,
                n_iter: int = DEFAULT_ITERATIONS, target_weights=None,
                progress=None):
    """Clipped Van Cittert iteration g~ <- max(0, g~ + eta (g_hat - P[g~])).

    Starts from g~ = g_hat.  Returns (g_final, per-iteration records); each
    record carries the iterate index, the ray-traced NMAE of the reflector
    produced inside P (when target bin weights are supplied), and the
    operator result.
    """
    if not (0.0 < eta <= 1.0):
        raise DeconvError("eta must lie in (0, 1]")
    g = np.maximum(np.asarray(g_hat, dtype=float).copy(), 0.0)
    records = []
    for n in range(n_iter):
        res = P(g)
        err = None
        if target_weights is not None and hasattr(res, "histogram"):
            err = nmae(res.histogram.weights, target_weights)
        records.append({"iteration": n, "nmae": err, "result": res})
        if progress is not None:
            progress(n, err)
        g = np.maximum(0.0, g + eta * (np.asarray(g_hat, dtype=float)
                                       - np.asarray(res.values, dtype=float)))
    return g, records


def save_iteration_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "nmae", "min_u", "h"])
        for r in records:
            res = r["result"]
            min_u = float(np.min(res.u_samples)) if hasattr(res, "u_samples") else ""
            h = res.h if hasattr(res, "h") else ""
            w.writerow([r["iteration"],
                        "" if r["nmae"] is None else repr(r["nmae"]),
                        repr(min_u) if min_u != "" else "", repr(h) if h != "" else ""])
