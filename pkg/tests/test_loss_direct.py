"""Change-of-variables loss: pushforward density, marginalization, gradients."""

import numpy as np
import pytest

from reflopt import ad
from reflopt.ad import Tape
from reflopt.geometry import constant_profile, forward_map
from reflopt.loss_direct import (ContinuityError, direct_loss_profile,
                                 direct_loss_value, gauss_nodes,
                                 make_direct_objective, marginal_g,
                                 pulled_back_density)
from reflopt.mlp import DEFAULT_SIZES, mlp_init, mlp_profile
from reflopt.raytrace import trace
from reflopt.sources import centers_grid, target_from_histogram, uniform_target


def test_gauss_nodes_integrate_cubic(domain):
    nodes, w = gauss_nodes(domain, 8)
    assert np.sum(w * nodes ** 3) == pytest.approx(0.0, abs=1e-12)
    assert np.sum(w * nodes ** 2) == pytest.approx(2.0 / 3.0, rel=1e-12)


def test_pulled_back_density_zero_outside(domain, smooth_source, unit_profile):
    val = pulled_back_density(unit_profile, smooth_source,
                              np.array([0.0]), np.array([40.0]))
    assert np.allclose(np.asarray(ad.value_of(val)), 0.0)


def test_pulled_back_density_change_of_variables(domain, smooth_source,
                                                 unit_profile):
    # oracle: |det J| from central differences of the inverse map
    from reflopt.geometry import inverse_map
    p0, sig0 = 0.15, 0.1
    val = pulled_back_density(unit_profile, smooth_source, p0, sig0)
    h = 1e-6
    def bt(p, s):
        b = inverse_map(p, s, unit_profile)
        return np.array([b.s, b.alpha])
    J = np.column_stack([(bt(p0 + h, sig0) - bt(p0 - h, sig0)) / (2 * h),
                         (bt(p0, sig0 + h) - bt(p0, sig0 - h)) / (2 * h)])
    b0 = inverse_map(p0, sig0, unit_profile)
    expect = smooth_source.density(b0.s, b0.alpha) * abs(np.linalg.det(J))
    assert float(ad.value_of(val)) == pytest.approx(expect, rel=1e-5)


def test_marginal_conserves_flux(domain, smooth_source, unit_profile):
    # integral of the pushforward over the far-field window equals the
    # source flux when nothing escapes the window
    n = 256
    grid = centers_grid(domain, n)
    g = np.asarray(marginal_g(unit_profile, smooth_source, grid), dtype=float)
    total = np.sum(g) * (domain.t_max - domain.t_min) / n
    assert total == pytest.approx(smooth_source.total_flux, rel=1e-2)


def test_marginal_matches_trace(domain, smooth_source, unit_profile):
    # dual-route check: analytic pushforward vs QMC histogram densities
    hist = trace(unit_profile, smooth_source, n_rays=2 ** 18)
    g = np.asarray(marginal_g(unit_profile, smooth_source, hist.centers),
                   dtype=float)
    dens = hist.densities()
    mask = dens > 0.05 * dens.max()
    assert np.max(np.abs(g[mask] - dens[mask]) / dens.max()) < 0.02


def test_zero_loss_on_matching_target(domain, smooth_source, unit_profile):
    hist = trace(unit_profile, smooth_source, n_rays=2 ** 18)
    tgt = target_from_histogram(hist, domain)
    loss = direct_loss_profile(unit_profile, smooth_source, tgt)
    # floor set by QMC noise and the piecewise-linear readback of the
    # histogram, not by the pushforward itself
    scale = float(np.mean(tgt.values)) ** 2
    assert loss < 1e-2 * scale


def test_refuses_discontinuous_source(domain, flat_source, flat_target):
    with pytest.raises(ContinuityError):
        make_direct_objective(DEFAULT_SIZES, flat_source, flat_target, domain)


def test_gradient_matches_fd(domain, smooth_source, flat_target):
    obj = make_direct_objective(DEFAULT_SIZES, smooth_source, flat_target,
                                domain)
    params = mlp_init(seed=0)
    _, g = obj(params.theta)
    rng = np.random.default_rng(4)
    checked = 0
    for k in rng.integers(0, params.theta.size, 12):
        e = np.zeros_like(params.theta)
        e[k] = 1e-6
        fp, _ = obj(params.theta + e)
        fm, _ = obj(params.theta - e)
        fd = (fp - fm) / 2e-6
        if abs(fd) < 1e-6:   # below the FD roundoff floor
            continue
        assert abs(g[k] - fd) < 1e-4 * abs(fd) + 1e-10
        checked += 1
    assert checked >= 6


def test_penalty_term_included(domain, smooth_source, flat_target):
    params = mlp_init(seed=0)
    base = direct_loss_value(params, smooth_source, flat_target, domain)
    with_pen = direct_loss_value(params, smooth_source, flat_target, domain,
                                 h_min=5.0)
    prof = mlp_profile(params, domain)
    u, _ = prof.height(np.linspace(-1, 1, 128))
    expected_extra = (np.min(u) - 5.0) ** 2
    assert with_pen - base == pytest.approx(expected_extra, rel=1e-9)


def test_loss_deterministic(domain, smooth_source, flat_target):
    obj = make_direct_objective(DEFAULT_SIZES, smooth_source, flat_target,
                                domain)
    params = mlp_init(seed=0)
    f1, g1 = obj(params.theta)
    f2, g2 = obj(params.theta)
    assert f1 == f2
    assert np.array_equal(g1, g2)
