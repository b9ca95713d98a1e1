"""Point-source scaling limit: ray map, polar profile ODE, convergence."""

import numpy as np
import pytest

from reflopt.geometry import DomainSpec, constant_profile, forward_map
from reflopt.limitcase import (LimitCaseError, PhiSingularityError,
                               PolarReflector, limiting_normal,
                               limiting_sigma, phi, phi_coefficients,
                               point_source_design, point_source_trace,
                               polar_sigma, ray_map_ode, rho_ode,
                               save_convergence_csv, scaling_convergence)
from reflopt.raytrace import nmae, target_bin_integrals
from reflopt.sources import target_from_callable


def smooth_F(a):
    return 1.0 + 0.5 * np.sin(np.asarray(a, dtype=float))


def smooth_g(sig):
    return np.exp(np.asarray(sig, dtype=float) / 2.0)


class TestRayMap:
    def test_uniform_case_is_affine(self, domain):
        alpha, sig = ray_map_ode(lambda a: np.ones_like(np.asarray(a, float)),
                                 lambda s: np.ones_like(np.asarray(s, float)),
                                 domain)
        frac = (alpha - domain.alpha_min) / (domain.alpha_max
                                             - domain.alpha_min)
        expect = domain.t_min + frac * (domain.t_max - domain.t_min)
        assert np.max(np.abs(sig - expect)) < 1e-9

    def test_analytic_cdf_oracle(self, domain):
        # F = 1, g = exp(sigma): sigma_inf = log(e^{-2} + Fn (e^2 - e^{-2}))
        alpha, sig = ray_map_ode(
            lambda a: np.ones_like(np.asarray(a, float)), np.exp, domain,
            grid_n=65537)
        frac = (alpha - domain.alpha_min) / (domain.alpha_max
                                             - domain.alpha_min)
        expect = np.log(np.exp(-2.0)
                        + frac * (np.exp(2.0) - np.exp(-2.0)))
        assert np.max(np.abs(sig - expect)) < 1e-7

    def test_endpoints_pinned_and_monotone(self, domain):
        _, sig = ray_map_ode(smooth_F, smooth_g, domain)
        assert sig[0] == domain.t_min
        assert sig[-1] == domain.t_max
        assert np.all(np.diff(sig) >= 0)
        assert np.all(np.diff(sig[1:-1]) > 0)

    def test_rejects_zero_flux(self, domain):
        with pytest.raises(LimitCaseError):
            ray_map_ode(lambda a: 0.0 * np.asarray(a, float), smooth_g,
                        domain)


class TestPhi:
    def test_roots_satisfy_quadratic(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(np.pi / 4, 3 * np.pi / 4, 200)
        rho = rng.uniform(0.2, 5.0, 200)
        sig = rng.uniform(-2.0, 2.0, 200)
        rp = phi(a, rho, sig)
        A, B, C = phi_coefficients(a, rho, sig)
        resid = A * rp ** 2 + B * rp + C
        scale = np.abs(A * rp ** 2) + np.abs(B * rp) + np.abs(C) + 1.0
        assert np.max(np.abs(resid) / scale) < 1e-10

    def test_retroreflection_is_stationary(self):
        # circular mirror centered on the source sends rays straight back
        for a in (0.8, 1.4, 2.1):
            sig = (np.sin(a) - 1.0) / np.cos(a)
            assert abs(phi(a, 1.7, sig)) < 1e-12

    def test_regular_across_vertical_ray(self):
        assert np.isfinite(phi(np.pi / 2, 1.0, 0.5))

    def test_singularity_raised(self):
        a = np.pi / 4
        sig = (1.0 + np.sin(a)) / np.cos(a)
        with pytest.raises(PhiSingularityError):
            phi(a, 1.0, sig)


class TestRhoOde:
    def test_positive_and_starts_at_h(self, domain):
        alpha, sig = ray_map_ode(smooth_F, smooth_g, domain)
        polar = rho_ode(sig, 1.3, alpha, domain)
        assert polar.rho[0] == pytest.approx(1.3)
        assert np.all(polar.rho > 0)

    def test_step_count_self_convergence(self, domain):
        alpha, sig = ray_map_ode(smooth_F, smooth_g, domain)
        r1 = rho_ode(sig, 1.0, alpha, domain, n_steps=512)
        r2 = rho_ode(sig, 1.0, alpha, domain, n_steps=1024)
        assert np.max(np.abs(r1.spline()(alpha) - r2.spline()(alpha))) < 1e-6

    def test_exactly_linear_in_h(self, domain):
        alpha, sig = ray_map_ode(smooth_F, smooth_g, domain)
        r1 = rho_ode(sig, 1.0, alpha, domain)
        r2 = rho_ode(sig, 2.0, alpha, domain)
        assert np.allclose(r2.rho, 2.0 * r1.rho, rtol=1e-12)

    def test_rejects_nonpositive_h(self, domain):
        alpha, sig = ray_map_ode(smooth_F, smooth_g, domain)
        with pytest.raises(LimitCaseError):
            rho_ode(sig, 0.0, alpha, domain)

    def test_design_reproduces_ray_map(self, domain):
        # the solved mirror, traced geometrically, realizes the flux-balance
        # ray map it was built from
        alpha, sig = ray_map_ode(smooth_F, smooth_g, domain)
        polar = point_source_design(smooth_F, smooth_g, domain)
        interior = alpha[4:-4]
        err = np.max(np.abs(polar_sigma(polar, interior)
                            - np.interp(interior, alpha, sig)))
        assert err < 5e-3


class TestPointSourceTrace:
    def test_histogram_matches_target(self, domain):
        polar = point_source_design(smooth_F, smooth_g, domain)
        hist = point_source_trace(polar, smooth_F, domain, n_rays=2 ** 15)
        tgt = target_from_callable(smooth_g, domain)
        want = target_bin_integrals(tgt, hist.edges)
        want = want * hist.total_flux / np.sum(want)
        assert nmae(hist.weights, want) < 0.02

    def test_flux_accounted(self, domain):
        polar = point_source_design(smooth_F, smooth_g, domain)
        hist = point_source_trace(polar, smooth_F, domain, n_rays=2 ** 12)
        assert np.sum(hist.weights) + hist.out_of_range == pytest.approx(
            hist.total_flux, rel=1e-9)


class TestScalingLimit:
    def test_limiting_normal_is_unit(self, domain, unit_profile):
        a = np.linspace(domain.alpha_min + 0.01, domain.alpha_max - 0.01, 33)
        nx, nz = limiting_normal(unit_profile, a)
        assert np.allclose(np.hypot(nx, nz), 1.0, atol=1e-12)

    def test_limit_matches_large_lambda(self, domain, unit_profile):
        a = np.linspace(domain.alpha_min + 0.01, domain.alpha_max - 0.01, 17)
        sig_inf = limiting_sigma(unit_profile, a)
        scaled = unit_profile.scaled(1e6)
        p = np.zeros_like(a)
        _, sig = forward_map(p, a, scaled)
        assert np.max(np.abs(sig - sig_inf)) < 1e-5

    def test_convergence_monotone(self, domain, unit_profile):
        max_err, spread = scaling_convergence(unit_profile,
                                              [10.0, 1e2, 1e3, 1e6])
        assert all(b < a for a, b in zip(max_err, max_err[1:]))
        assert all(b < a for a, b in zip(spread, spread[1:]))
        assert max_err[-1] < 1e-4

    def test_rejects_unsorted_lambdas(self, domain, unit_profile):
        with pytest.raises(LimitCaseError):
            scaling_convergence(unit_profile, [100.0, 10.0])


class TestSerialization:
    def test_polar_csv(self, tmp_path, domain):
        polar = point_source_design(smooth_F, smooth_g, domain, grid_n=65)
        path = tmp_path / "polar.csv"
        polar.save_csv(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert np.allclose(data[:, 0], polar.alpha)
        assert np.allclose(data[:, 1], polar.rho)

    def test_convergence_csv(self, tmp_path):
        path = tmp_path / "conv.csv"
        save_convergence_csv([1.0, 10.0], [0.5, 0.05], [0.4, 0.04], path)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert data.shape == (2, 3)

    def test_polar_invariants(self):
        with pytest.raises(LimitCaseError):
            PolarReflector(alpha=np.array([0.5, 0.4]), rho=np.array([1., 1.]))
        with pytest.raises(LimitCaseError):
            PolarReflector(alpha=np.array([0.4, 0.5]), rho=np.array([1., 0.]))
