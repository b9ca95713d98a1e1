"""Change-of-variables loss: pull the target grid back through the inverse
map, weight by the Jacobian determinant, marginalize over the reflector
parameter, and penalize squared deviation from the prescribed far field.

The sigma samples are the 64 cell centers of the far-field interval; the
marginal over p uses Gauss-Legendre quadrature.  The loss is the mean squared
residual times the interval length, approximating the integral form.
"""

from __future__ import annotations

import numpy as np

from . import ad
from .ad import Dual2, Tape
from .geometry import DomainSpec, ReflectorProfile, inverse_map
from .mlp import MlpParams, mlp_init, traced_profile
from .sources import SourceSpec, TargetSpec, centers_grid

DEFAULT_N_SIGMA = 64
DEFAULT_N_P = 64


class ContinuityError(Exception):
    """Direct loss refuses discontinuous sources; use the mesh loss."""


def gauss_nodes(domain: DomainSpec, n_p: int):
    x, w = np.polynomial.legendre.leggauss(n_p)
    half = 0.5 * (domain.l_max - domain.l_min)
    mid = 0.5 * (domain.l_max + domain.l_min)
    return mid + half * x, half * w


def pulled_back_density(prof: ReflectorProfile, source: SourceSpec, p, sigma):
    """f(m^{-1}(p, sigma)) |det J(m^{-1})|; zero when back-tracing leaves S.

    Works for plain numerics and broadcasting arrays; for traced heights the
    result stays differentiable in the parameters.  ``p`` and ``sigma`` enter
    as the two dual-tangent directions of the Jacobian.
    """
    bt = inverse_map(Dual2(p, 1.0, 0.0), Dual2(sigma, 0.0, 1.0), prof)
    det = bt.s.dp * bt.alpha.ds - bt.s.ds * bt.alpha.dp
    absdet = ad.absolute(det)
    fval = source.density(bt.s.val, bt.alpha.val)
    mask = np.where(np.asarray(bt.valid), 1.0, 0.0)
    return fval * absdet * mask


def marginal_g(prof: ReflectorProfile, source: SourceSpec, sigma,
               n_p: int = DEFAULT_N_P):
    """g(sigma) = integral over p of the pulled-back density."""
    if n_p < 8:
        raise ValueError("need n_p >= 8 quadrature nodes")
    nodes, w = gauss_nodes(prof.domain, n_p)
    sig = np.asarray(sigma, dtype=float)
    if sig.ndim == 0:
        g = pulled_back_density(prof, source, nodes, float(sig))
        return ad.asum(g * w)
    g = pulled_back_density(prof, source, nodes[None, :], sig[:, None])
    return ad.sum_axis(g * w[None, :], 1)


def direct_loss_traced(theta, sizes, source: SourceSpec, target: TargetSpec,
                       domain: DomainSpec, n_sigma: int = DEFAULT_N_SIGMA,
                       n_p: int = DEFAULT_N_P, h_min: float | None = None,
                       penalty_weight: float = 1.0):
    """Traced loss over tape-scalar parameters ``theta``.

    Optionally adds the minimum-height penalty (shared with the mesh loss).
    """
    if not source.continuous:
        raise ContinuityError(
            "source is discontinuous; the direct loss is not differentiable "
            "there - use the mesh loss instead")
    prof = traced_profile(theta, sizes, domain)
    grid = centers_grid(domain, n_sigma)
    ghat = np.asarray(target.density(grid), dtype=float)
    g = marginal_g(prof, source, grid, n_p=n_p)
    res = g - ghat
    loss = ad.asum(res * res) * ((domain.t_max - domain.t_min) / n_sigma)
    if h_min is not None:
        from .loss_mesh import height_penalty_traced
        loss = loss + penalty_weight * height_penalty_traced(
            theta, sizes, domain, h_min)
    return loss


def make_direct_objective(sizes, source: SourceSpec, target: TargetSpec,
                          domain: DomainSpec, n_sigma: int = DEFAULT_N_SIGMA,
                          n_p: int = DEFAULT_N_P, h_min: float | None = None,
                          penalty_weight: float = 1.0):
    """(loss, grad) objective over a flat numpy parameter vector."""
    if not source.continuous:
        raise ContinuityError(
            "source is discontinuous; the direct loss is not differentiable "
            "there - use the mesh loss instead")

    def objective(theta_np):
        tape = Tape()
        theta = [tape.var(float(v)) for v in theta_np]
        loss = direct_loss_traced(theta, sizes, source, target, domain,
                                  n_sigma=n_sigma, n_p=n_p, h_min=h_min,
                                  penalty_weight=penalty_weight)
        gs = ad.gradient_of(loss, theta)
        return float(ad.value_of(loss)), np.array([float(g) for g in gs])

    return objective


def direct_loss_profile(prof: ReflectorProfile, source: SourceSpec,
                        target: TargetSpec, n_sigma: int = DEFAULT_N_SIGMA,
                        n_p: int = DEFAULT_N_P) -> float:
    """Plain-value loss of an arbitrary profile (e.g. a ground truth)."""
    domain = prof.domain
    grid = centers_grid(domain, n_sigma)
    ghat = np.asarray(target.density(grid), dtype=float)
    g = np.asarray(marginal_g(prof, source, grid, n_p=n_p), dtype=float)
    return float(np.mean((g - ghat) ** 2) * (domain.t_max - domain.t_min))


def direct_loss_value(params: MlpParams, source, target, domain,
                      n_sigma=DEFAULT_N_SIGMA, n_p=DEFAULT_N_P,
                      h_min=None, penalty_weight=1.0) -> float:
    """Loss value only (numpy parameters), for tests and diagnostics."""
    obj = make_direct_objective(params.sizes, source, target, domain,
                                n_sigma=n_sigma, n_p=n_p, h_min=h_min,
                                penalty_weight=penalty_weight)
    val, _ = obj(params.theta)
    return val
