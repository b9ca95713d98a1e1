"""Reflector geometry: parameterization, reflection, projections, and the
forward/inverse ray maps."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reflopt.geometry import (BracketError, DomainError, DomainSpec,
                              ReflectorProfile, constant_profile, forward_map,
                              inv_stereographic, inverse_map,
                              profile_from_samples, reflect, reflector_derivs,
                              reflector_normal, reflector_point,
                              stereographic, viewing_angle, beta)


def parabola_profile(domain):
    return ReflectorProfile(height=lambda p: (1.0 + 0.2 * p * p, 0.4 * p),
                            domain=domain)


class TestDomainSpec:
    def test_invariants_enforced(self):
        with pytest.raises(DomainError):
            DomainSpec(1.0, -1.0, 0.5, 1.0, -1, 1)
        with pytest.raises(DomainError):
            DomainSpec(-1.0, 1.0, 1.0, 0.5, -1, 1)
        with pytest.raises(DomainError):
            DomainSpec(-1.0, 1.0, 0.5, 4.0, -1, 1)  # beyond pi
        with pytest.raises(DomainError):
            DomainSpec(-1.0, 1.0, 0.5, 1.0, 2, -2)

    def test_beta_endpoints(self, domain):
        assert beta(domain.l_min, domain) == pytest.approx(domain.alpha_max)
        assert beta(domain.l_max, domain) == pytest.approx(domain.alpha_min)

    def test_beta_slope_value(self, domain):
        # (pi/4 - 3pi/4) / 2 for the standard window
        assert domain.beta_slope == pytest.approx(-np.pi / 4.0)


class TestReflection:
    @given(st.floats(0.01, 2 * np.pi - 0.01), st.floats(0.01, np.pi - 0.01))
    @settings(max_examples=100, deadline=None)
    def test_involution_and_isometry(self, phi, psi):
        s = (np.cos(phi), np.sin(phi))
        n = (np.cos(psi), np.sin(psi))
        t = reflect(s, n)
        assert np.hypot(*t) == pytest.approx(1.0, abs=1e-12)
        back = reflect(t, n)
        assert back[0] == pytest.approx(s[0], abs=1e-12)
        assert back[1] == pytest.approx(s[1], abs=1e-12)

    def test_normal_incidence_reverses(self):
        t = reflect((0.0, 1.0), (0.0, 1.0))
        assert t == (pytest.approx(0.0), pytest.approx(-1.0))


class TestStereographic:
    @given(st.floats(-10, 10))
    @settings(max_examples=100, deadline=None)
    def test_roundtrip(self, sigma):
        t = inv_stereographic(sigma)
        assert np.hypot(*t) == pytest.approx(1.0, abs=1e-12)
        assert stereographic(t) == pytest.approx(sigma, rel=1e-9, abs=1e-9)

    def test_known_directions(self):
        assert stereographic((0.0, -1.0)) == pytest.approx(0.0)
        assert stereographic((1.0, 0.0)) == pytest.approx(1.0)
        assert stereographic((-1.0, 0.0)) == pytest.approx(-1.0)

    def test_pole_rejected(self):
        from reflopt.geometry import ProjectionError
        with pytest.raises(ProjectionError):
            stereographic((0.0, 1.0))


class TestCurve:
    def test_constant_height_point_mpmath(self, domain, unit_profile):
        # 50-digit oracle for r(p) at p = 0.3 with u = 1
        mpmath.mp.dps = 50
        p = 0.3
        x, z = reflector_point(p, unit_profile)
        b = mpmath.mpf(3) * mpmath.pi / 4 - mpmath.pi / 4 * (mpmath.mpf("0.3") + 1)
        assert x == pytest.approx(float(mpmath.mpf("0.3") + mpmath.cos(b)), rel=1e-14)
        assert z == pytest.approx(float(mpmath.sin(b)), rel=1e-14)

    def test_derivs_match_fd(self, domain):
        prof = parabola_profile(domain)
        p = np.linspace(-0.9, 0.9, 11)
        h = 1e-6
        xp, zp = reflector_derivs(p, prof)
        x1, z1 = reflector_point(p + h, prof)
        x0, z0 = reflector_point(p - h, prof)
        assert np.allclose(xp, (x1 - x0) / (2 * h), atol=1e-8)
        assert np.allclose(zp, (z1 - z0) / (2 * h), atol=1e-8)

    def test_normal_is_unit_and_orthogonal(self, domain):
        prof = parabola_profile(domain)
        p = np.linspace(-1.0, 1.0, 33)
        nx, nz = reflector_normal(p, prof)
        xp, zp = reflector_derivs(p, prof)
        assert np.allclose(nx * nx + nz * nz, 1.0, atol=1e-12)
        assert np.allclose(nx * xp + nz * zp, 0.0, atol=1e-12)

    def test_normal_points_toward_source_side(self, domain, unit_profile):
        # the source sits below the reflector; the normal's z-component
        # must be negative for the standard geometry
        p = np.linspace(-1.0, 1.0, 9)
        _, nz = reflector_normal(p, unit_profile)
        assert np.all(nz < 0)


class TestViewingAngle:
    @given(st.floats(-0.99, 0.99), st.floats(-0.99, 0.99))
    @settings(max_examples=64, deadline=None)
    def test_decreasing_in_p_and_brackets(self, s, _):
        d = DomainSpec(-1, 1, np.pi / 4, 3 * np.pi / 4, -2, 2)
        prof = parabola_profile(d)
        p = np.linspace(-1.0, 1.0, 65)
        g = viewing_angle(s, p, prof)
        assert np.all(np.diff(g) < 0)
        assert g[0] >= d.alpha_max - 1e-12
        assert g[-1] <= d.alpha_min + 1e-12


class TestForwardInverse:
    def test_roundtrip_grid(self, domain):
        prof = parabola_profile(domain)
        s = np.linspace(-0.95, 0.95, 12)
        a = np.linspace(domain.alpha_min + 0.01, domain.alpha_max - 0.01, 12)
        S, A = np.meshgrid(s, a)
        p, sig = forward_map(S.ravel(), A.ravel(), prof)
        bt = inverse_map(p, sig, prof)
        assert np.all(bt.valid)
        assert np.allclose(bt.s, S.ravel(), atol=1e-7)
        assert np.allclose(bt.alpha, A.ravel(), atol=1e-8)

    def test_forward_against_dense_scan_oracle(self, domain, unit_profile):
        # oracle: brute-force scan of the viewing angle over a dense p grid
        s0, a0 = 0.2, 1.9
        p_dense = np.linspace(-1, 1, 200001)
        g = viewing_angle(s0, p_dense, unit_profile)
        k = np.argmin(np.abs(g - a0))
        p, _ = forward_map(s0, a0, unit_profile)
        assert abs(p - p_dense[k]) < 2e-5

    def test_forward_tolerance(self, domain):
        prof = parabola_profile(domain)
        rng = np.random.default_rng(0)
        s = rng.uniform(-1, 1, 300)
        a = rng.uniform(domain.alpha_min, domain.alpha_max, 300)
        p, _ = forward_map(s, a, prof)
        g = viewing_angle(s, p, prof)
        assert np.max(np.abs(g - a)) < 1e-9

    def test_out_of_domain_flagged_not_raised(self, domain, unit_profile):
        bt = inverse_map(0.0, 50.0, unit_profile)  # absurd far-field coord
        assert not bt.valid

    def test_invalid_p_raises(self, domain, unit_profile):
        with pytest.raises(DomainError):
            inverse_map(5.0, 0.0, unit_profile)

    def test_scaled_profile_consistency(self, domain):
        prof = parabola_profile(domain)
        lam = 3.0
        scaled = prof.scaled(lam)
        u, du = prof.height(0.4)
        us, dus = scaled.height(0.4)
        assert us == pytest.approx(lam * u)
        assert dus == pytest.approx(lam * du)


class TestProfiles:
    def test_constant_profile_positive_only(self, domain):
        with pytest.raises(DomainError):
            constant_profile(-1.0, domain)

    def test_profile_from_samples_interpolates(self, domain):
        s = np.linspace(-1, 1, 41)
        u = 1.0 + 0.1 * np.sin(2 * s)
        prof = profile_from_samples(s, u, domain)
        uu, du = prof.height(0.37)
        assert uu == pytest.approx(1.0 + 0.1 * np.sin(0.74), abs=1e-6)
        assert du == pytest.approx(0.2 * np.cos(0.74), abs=1e-4)
