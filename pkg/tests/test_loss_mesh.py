"""Mesh-based loss: clipping, cell quadrature, binning, continuity."""

import numpy as np
import pytest

from reflopt import ad
from reflopt.ad import Tape
from reflopt.geometry import constant_profile
from reflopt.loss_mesh import (MeshError, NormalizationError, QuadMesh,
                               cell_integral, clip_to_source,
                               height_penalty_profile, make_mesh_objective,
                               map_mesh, mesh_histogram, mesh_loss_profile,
                               mesh_loss_traced, polygon_area,
                               target_column_bins)
from reflopt.mlp import DEFAULT_SIZES, mlp_init, mlp_profile, traced_profile
from reflopt.sources import target_from_histogram, uniform_target

UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


class TestPolygonPrimitives:
    def test_shoelace_known_areas(self):
        assert polygon_area(UNIT_SQUARE) == pytest.approx(1.0)
        assert polygon_area([(0, 0), (1, 0), (0, 1)]) == pytest.approx(0.5)
        assert polygon_area([]) == 0.0
        # orientation does not matter
        assert polygon_area(UNIT_SQUARE[::-1]) == pytest.approx(1.0)

    def test_clip_identity(self):
        out = clip_to_source(UNIT_SQUARE, (0, 1, 0, 1))
        assert polygon_area(out) == pytest.approx(1.0)

    def test_clip_disjoint_empty(self):
        out = clip_to_source(UNIT_SQUARE, (5, 6, 5, 6))
        assert polygon_area(out) == 0.0

    def test_clip_half_overlap(self):
        out = clip_to_source(UNIT_SQUARE, (0.5, 2.0, 0.0, 1.0))
        assert polygon_area(out) == pytest.approx(0.5)

    def test_clip_rejects_folded_quad(self):
        bowtie = [(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]
        with pytest.raises(MeshError):
            clip_to_source(bowtie, (0, 1, 0, 1))


class TestCellIntegral:
    def test_constant_density_exact(self):
        val = cell_integral(UNIT_SQUARE, lambda x, y: 3.0 + 0 * x + 0 * y, 64)
        assert float(ad.value_of(val)) == pytest.approx(3.0, rel=1e-12)

    def test_linear_density_on_triangle(self):
        # int over the triangle (0,0),(1,0),(0,1) of (x + y) = 1/3
        tri = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]
        val = cell_integral(tri, lambda x, y: x + y, 256)
        assert float(ad.value_of(val)) == pytest.approx(1.0 / 3.0, rel=1e-3)

    def test_empty_polygon_zero(self):
        assert cell_integral([], lambda x, y: 1.0, 64) == 0.0


class TestMapMesh:
    def test_vertices_move_smoothly(self, domain):
        params = mlp_init(seed=0)
        mesh = QuadMesh.build(domain, 8, 16)
        prof = mlp_profile(params, domain)
        s0, a0, _ = map_mesh(prof, mesh)
        bumped = mlp_init(seed=0)
        bumped.theta[5] += 1e-6
        s1, a1, _ = map_mesh(mlp_profile(bumped, domain), mesh)
        assert np.max(np.abs(np.asarray(s1) - np.asarray(s0))) < 1e-3

    def test_mapped_mesh_covers_source(self, problem_b):
        # total clipped mass of a constant density ~ source area
        prob = problem_b
        mesh = QuadMesh.build(prob.domain)
        cols, total = mesh_histogram(prob.truth, prob.source, mesh)
        covered = float(ad.value_of(total)) / prob.source.total_flux
        assert covered > 0.99


class TestMeshLoss:
    def test_mass_consistency(self, problem_b):
        mesh = QuadMesh.build(problem_b.domain)
        _, total = mesh_histogram(problem_b.truth, problem_b.source, mesh)
        assert float(ad.value_of(total)) == pytest.approx(
            problem_b.source.total_flux, rel=0.01)

    def test_ground_truth_near_zero_loss(self, problem_b):
        mesh = QuadMesh.build(problem_b.domain)
        bins = target_column_bins(problem_b.target, mesh)
        loss = mesh_loss_profile(problem_b.truth, problem_b.source, bins, mesh)
        mass2 = float(np.mean(bins / np.sum(bins)) ** 2)
        assert float(ad.value_of(loss)) < 1e-4 * mass2 * 64

    def test_normalization_error_on_zero_target(self, domain, flat_source,
                                                unit_profile):
        mesh = QuadMesh.build(domain, 4, 8)
        with pytest.raises(NormalizationError):
            mesh_loss_profile(unit_profile, flat_source, np.zeros(8), mesh)

    def test_resolution_self_convergence(self, problem_b):
        # near the optimum (ground truth) the loss is resolution-stable
        vals = []
        for (npc, nsc) in ((32, 64), (64, 128)):
            mesh = QuadMesh.build(problem_b.domain, npc, nsc)
            bins = target_column_bins(problem_b.target, mesh)
            loss = mesh_loss_profile(problem_b.truth, problem_b.source, bins,
                                     mesh)
            vals.append(float(ad.value_of(loss)))
        # both are at the noise floor; neither should blow up
        assert vals[1] < 10 * vals[0] + 1e-12

    def test_continuity_in_theta_for_discontinuous_source(
            self, domain, flat_source):
        # straight segment in parameter space, uniform steps of 1e-4: no
        # jump may exceed 10x the local secant slope estimate
        tgt = uniform_target(domain, flat_source.total_flux)
        mesh = QuadMesh.build(domain)
        bins = target_column_bins(tgt, mesh)
        params = mlp_init(seed=0)
        rng = np.random.default_rng(3)
        direction = rng.normal(0, 1, params.theta.size)
        direction /= np.linalg.norm(direction)
        ts = np.arange(0.0, 21.0) * 1e-4
        vals = []
        for t in ts:
            prof = mlp_profile(
                type(params)(params.sizes, params.theta + t * direction),
                domain)
            loss = mesh_loss_profile(prof, flat_source, bins, mesh)
            vals.append(float(ad.value_of(loss)))
        vals = np.asarray(vals)
        jumps = np.abs(np.diff(vals))
        slope = np.median(jumps) + 1e-15
        assert np.max(jumps) < 10 * slope

    def test_gradient_matches_fd(self, domain, flat_source):
        tgt = uniform_target(domain, flat_source.total_flux)
        mesh = QuadMesh.build(domain)
        bins = target_column_bins(tgt, mesh)
        obj = make_mesh_objective(DEFAULT_SIZES, flat_source, bins, domain,
                                  mesh)
        params = mlp_init(seed=0)
        _, g = obj(params.theta)
        rng = np.random.default_rng(9)
        checked = 0
        for k in rng.integers(0, params.theta.size, 10):
            e = np.zeros_like(params.theta)
            e[k] = 1e-6
            fp, _ = obj(params.theta + e)
            fm, _ = obj(params.theta - e)
            fd = (fp - fm) / 2e-6
            if abs(fd) < 1e-8:
                continue
            assert abs(g[k] - fd) < 1e-3 * abs(fd) + 1e-11
            checked += 1
        assert checked >= 5

    def test_traced_and_plain_agree(self, domain, flat_source):
        tgt = uniform_target(domain, flat_source.total_flux)
        mesh = QuadMesh.build(domain, 8, 16)
        bins = target_column_bins(tgt, mesh)
        params = mlp_init(seed=0)
        plain = float(ad.value_of(mesh_loss_profile(
            mlp_profile(params, domain), flat_source, bins, mesh)))
        tape = Tape()
        theta = [tape.var(float(v)) for v in params.theta]
        traced = mesh_loss_traced(theta, params.sizes, flat_source, bins,
                                  domain, mesh)
        assert float(ad.value_of(traced)) == pytest.approx(plain, rel=1e-12)


class TestHeightPenalty:
    def test_zero_at_exact_height(self, domain):
        prof = constant_profile(0.7, domain)
        val = height_penalty_profile(prof, 0.7)
        assert float(ad.value_of(val)) == pytest.approx(0.0, abs=1e-15)

    def test_unit_offset(self, domain):
        prof = constant_profile(1.5, domain)
        val = height_penalty_profile(prof, 0.5)
        assert float(ad.value_of(val)) == pytest.approx(1.0)

    def test_grid_floor_enforced(self, domain, unit_profile):
        with pytest.raises(ValueError):
            height_penalty_profile(unit_profile, 1.0, grid_n=16)

    def test_gradient_matches_fd(self, domain):
        from reflopt.loss_mesh import height_penalty_traced

        params = mlp_init(seed=4)

        def objective(theta_np):
            tape = Tape()
            theta = [tape.var(float(v)) for v in theta_np]
            out = height_penalty_traced(theta, params.sizes, domain, 2.0)
            gs = ad.gradient_of(out, theta)
            return float(ad.value_of(out)), np.array([float(x) for x in gs])

        _, g = objective(params.theta)
        rng = np.random.default_rng(1)
        for k in rng.integers(0, params.theta.size, 6):
            e = np.zeros_like(params.theta)
            e[k] = 1e-6
            fp, _ = objective(params.theta + e)
            fm, _ = objective(params.theta - e)
            fd = (fp - fm) / 2e-6
            if abs(fd) < 1e-9:
                continue
            assert abs(g[k] - fd) < 1e-4 * abs(fd) + 1e-10
