"""Source and target distribution specifications for the reflector problem.

Source densities are callables f(s, alpha) written with the generic math in
:mod:`reflopt.ad`, so they can be evaluated inside traced losses as well as
on plain numpy grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ad
from .geometry import DomainSpec


class SpecError(Exception):
    pass


def _gauss_nodes(lo, hi, n):
    x, w = np.polynomial.legendre.leggauss(n)
    return lo + (x + 1.0) * 0.5 * (hi - lo), w * 0.5 * (hi - lo)


@dataclass
class SourceSpec:
    """2D density on the source phase space with its two marginals."""

    density: Callable            # f(s, alpha) >= 0
    marginal_s: Callable         # f(s) = integral over alpha
    marginal_alpha: Callable     # F(alpha) = integral over s
    total_flux: float
    continuous: bool
    domain: DomainSpec

    def __post_init__(self):
        s_nodes, s_w = _gauss_nodes(self.domain.l_min, self.domain.l_max, 64)
        a_nodes, a_w = _gauss_nodes(self.domain.alpha_min, self.domain.alpha_max, 64)
        fs = float(np.sum(self.marginal_s(s_nodes) * s_w))
        fa = float(np.sum(self.marginal_alpha(a_nodes) * a_w))
        scale = max(abs(self.total_flux), 1e-300)
        if abs(fs - self.total_flux) > 1e-4 * scale or abs(fa - self.total_flux) > 1e-4 * scale:
            raise SpecError("marginals inconsistent with the stated total flux")


def raised_cosine(x, lo, hi):
    """Smooth bump on [lo, hi], zero with zero slope at the boundary."""
    y = (2.0 * x - (lo + hi)) / (hi - lo)
    c = ad.cos(0.5 * np.pi * y)
    inside = np.abs(np.asarray(ad.value_of(y))) < 1.0
    return ad.where(inside, c * c, 0.0)


def separable_source(domain: DomainSpec, w_s=None, w_alpha=None,
                     continuous=True) -> SourceSpec:
    """f(s, alpha) = w(s) * w_tilde(alpha) with quadrature-derived marginals."""
    if w_s is None:
        w_s = lambda s: raised_cosine(s, domain.l_min, domain.l_max)
    if w_alpha is None:
        w_alpha = lambda a: raised_cosine(a, domain.alpha_min, domain.alpha_max)
    s_nodes, s_w = _gauss_nodes(domain.l_min, domain.l_max, 128)
    a_nodes, a_w = _gauss_nodes(domain.alpha_min, domain.alpha_max, 128)
    int_s = float(np.sum(np.asarray(w_s(s_nodes), dtype=float) * s_w))
    int_a = float(np.sum(np.asarray(w_alpha(a_nodes), dtype=float) * a_w))
    return SourceSpec(
        density=lambda s, a: w_s(s) * w_alpha(a),
        marginal_s=lambda s: np.asarray(w_s(s), dtype=float) * int_a,
        marginal_alpha=lambda a: np.asarray(w_alpha(a), dtype=float) * int_s,
        total_flux=int_s * int_a,
        continuous=continuous,
        domain=domain,
    )


def uniform_source(domain: DomainSpec, level: float = 1.0) -> SourceSpec:
    """Constant density on the source phase space, discontinuous at its edge."""
    d = domain

    def density(s, a):
        sv = np.asarray(ad.value_of(s))
        av = np.asarray(ad.value_of(a))
        inside = ((sv >= d.l_min) & (sv <= d.l_max)
                  & (av >= d.alpha_min) & (av <= d.alpha_max))
        return ad.where(inside, level + 0.0 * s + 0.0 * a, 0.0)

    return SourceSpec(
        density=density,
        marginal_s=lambda s: np.where(
            (np.asarray(s) >= d.l_min) & (np.asarray(s) <= d.l_max),
            level * (d.alpha_max - d.alpha_min), 0.0),
        marginal_alpha=lambda a: np.where(
            (np.asarray(a) >= d.alpha_min) & (np.asarray(a) <= d.alpha_max),
            level * (d.l_max - d.l_min), 0.0),
        total_flux=level * d.source_area,
        continuous=False,
        domain=d,
    )


def zero_source(domain: DomainSpec, continuous=True) -> SourceSpec:
    return SourceSpec(density=lambda s, a: 0.0 * s + 0.0 * a,
                      marginal_s=lambda s: 0.0 * np.asarray(s),
                      marginal_alpha=lambda a: 0.0 * np.asarray(a),
                      total_flux=0.0, continuous=continuous, domain=domain)


@dataclass
class TargetSpec:
    """Prescribed far-field density on an equally spaced sigma grid."""

    density: Callable            # g_hat(sigma) >= 0 on the far-field interval
    grid: np.ndarray             # n equally spaced sample points (cell centers)
    total_flux: float
    domain: DomainSpec
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        diffs = np.diff(self.grid)
        if self.grid.size < 2 or np.any(diffs <= 0):
            raise SpecError("target grid must be strictly increasing")
        if not np.allclose(diffs, diffs[0], rtol=1e-9, atol=1e-12):
            raise SpecError("target grid must be equally spaced")
        if self.values is None:
            self.values = np.asarray(self.density(self.grid), dtype=float)
        if np.any(self.values < -1e-12):
            raise SpecError("target density must be nonnegative")


def centers_grid(domain: DomainSpec, n: int) -> np.ndarray:
    edges = np.linspace(domain.t_min, domain.t_max, n + 1)
    return 0.5 * (edges[:-1] + edges[1:])


def target_from_callable(g, domain: DomainSpec, n: int = 64) -> TargetSpec:
    grid = centers_grid(domain, n)
    nodes, w = _gauss_nodes(domain.t_min, domain.t_max, 256)
    flux = float(np.sum(np.asarray(g(nodes), dtype=float) * w))
    return TargetSpec(density=g, grid=grid, total_flux=flux, domain=domain)


def uniform_target(domain: DomainSpec, flux: float, n: int = 64) -> TargetSpec:
    level = flux / (domain.t_max - domain.t_min)
    return target_from_callable(lambda sig: level + 0.0 * np.asarray(sig),
                                domain, n)


def target_from_histogram(hist, domain: DomainSpec, flux: float | None = None) -> TargetSpec:
    """Piecewise-linear density through bin-center densities of a histogram."""
    centers = hist.centers
    dens = hist.densities()
    if flux is not None:
        have = float(np.sum(hist.weights))
        if have <= 0:
            raise SpecError("histogram carries no flux")
        dens = dens * (flux / have)
    dens = np.maximum(dens, 0.0)

    def density(sig):
        return np.interp(np.asarray(sig, dtype=float), centers, dens,
                         left=dens[0], right=dens[-1])

    grid = centers
    total = flux if flux is not None else float(np.sum(hist.weights))
    return TargetSpec(density=density, grid=grid, total_flux=total, domain=domain)
