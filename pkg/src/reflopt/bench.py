"""Benchmark problem definitions and pipeline orchestration.

Four standard problems on the geometry Omega = [-1, 1], A = [pi/4, 3*pi/4]:

* ``example_a`` — smooth separable source, target derived from a convex
  ground-truth reflector, network trained with the change-of-variables loss;
* ``example_b`` — uniform (discontinuous) source, mesh-based loss;
* ``example_c`` / ``example_d`` — minimum-height sweeps of A and of a
  uniform far-field target, network vs. deconvolution at each height.

The far-field interval of each problem is taken from a forward probe of the
ground truth (padded), so every traced ray of the reference configuration
lands inside the binning window.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ad import Dual2
from .deconv import make_operator_P, van_cittert
from .geometry import DomainSpec, ReflectorProfile, forward_map
from .loss_direct import make_direct_objective
from .loss_mesh import QuadMesh, make_mesh_objective, target_column_bins
from .mlp import DEFAULT_SIZES, MlpParams, mlp_height, mlp_init, mlp_profile
from .optim import OptimConfig, minimize
from .raytrace import (DEFAULT_N_BINS, DEFAULT_N_RAYS, nmae,
                       target_bin_integrals, trace)
from .sources import (SourceSpec, TargetSpec, separable_source,
                      target_from_histogram, uniform_source, uniform_target)

OMEGA = (-1.0, 1.0)
ANGLES = (np.pi / 4.0, 3.0 * np.pi / 4.0)
TRUTH_MIN_HEIGHT = 0.2
TRUTH_N_CENTERS = 5
TRUTH_MAX_RESAMPLES = 50


class BenchError(Exception):
    pass


@dataclass
class ProblemDef:
    name: str
    domain: DomainSpec
    source: SourceSpec
    target: TargetSpec
    solver: str                      # "direct" | "mesh" | "deconv"
    truth: ReflectorProfile | None = None
    h_min: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.solver not in ("direct", "mesh", "deconv"):
            raise BenchError(f"unknown solver {self.solver!r}")
        if self.solver == "direct" and not self.source.continuous:
            raise BenchError("direct solver requires a continuous source")


@dataclass
class BenchConfig:
    """All tunables of a benchmark run, with the standard values as defaults."""

    sizes: tuple = DEFAULT_SIZES
    seed: int = 0
    n_bins: int = DEFAULT_N_BINS
    n_rays_eval: int = 2 ** 17
    n_rays_target: int = 2 ** 21
    n_rays_deconv: int = 2 ** 17
    n_sigma: int = 64
    n_p: int = 64
    mesh_p_cells: int = 32
    mesh_sigma_cells: int = 64
    mesh_samples: int = 64
    vc_eta: float = 0.5
    vc_iters: int = 30
    penalty_weight: float = 1.0
    max_iter: int = 500
    grad_tol: float = 1e-8

    def optim(self) -> OptimConfig:
        return OptimConfig(max_iter=self.max_iter, grad_tol=self.grad_tol)

    def to_dict(self):
        d = dict(self.__dict__)
        d["sizes"] = list(self.sizes)
        return d


@dataclass
class RunReport:
    name: str
    solver: str
    nmae: float
    trace: list = field(default_factory=list)     # per-iteration records
    profile_samples: tuple | None = None          # (p, u) arrays
    histogram: object | None = None
    target_weights: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    params: MlpParams | None = None
    elapsed: float = 0.0

    def check(self):
        """Stored NMAE must match a recomputation from the stored histogram."""
        if self.histogram is None or self.target_weights is None:
            return
        again = nmae(self.histogram.weights, self.target_weights)
        if abs(again - self.nmae) > 1e-12 * max(1.0, abs(self.nmae)):
            raise BenchError("stored NMAE inconsistent with stored histogram")


# -- ground truth ------------------------------------------------------------

def _thin_plate(r):
    out = np.zeros_like(np.asarray(r, dtype=float))
    pos = np.asarray(r) > 0
    rp = np.asarray(r)[pos]
    out[pos] = rp * rp * np.log(rp)
    return out


def _truth_height(centers, weights, offset):
    def height(p):
        if isinstance(p, Dual2):
            u, du = height(p.val)
            d2 = _truth_second_derivative(centers, weights, p.val)
            return (Dual2(u, du * p.dp, du * p.ds),
                    Dual2(du, d2 * p.dp, d2 * p.ds))
        p = np.asarray(p, dtype=float)
        diff = p[..., None] - centers
        r = np.abs(diff)
        u = offset + np.sum(weights * _thin_plate(r), axis=-1)
        # d/dp [r^2 log r] = diff (2 log r + 1), -> 0 as r -> 0
        safe = np.where(r > 0, r, 1.0)
        dphi = np.where(r > 0, diff * (2.0 * np.log(safe) + 1.0), 0.0)
        du = np.sum(weights * dphi, axis=-1)
        if p.ndim == 0:
            return float(u), float(du)
        return u, du

    return height


def _truth_second_derivative(centers, weights, p):
    p = np.asarray(p, dtype=float)
    diff = p[..., None] - centers
    r = np.abs(diff)
    safe = np.where(r > 0, r, 1.0)
    # d^2/dp^2 [r^2 log r] = 2 log r + 3 away from the center
    d2phi = np.where(r > 0, 2.0 * np.log(safe) + 3.0, 0.0)
    d2 = np.sum(weights * d2phi, axis=-1)
    return float(d2) if p.ndim == 0 else d2


def _curve_is_convex(height, domain: DomainSpec, n: int = 256) -> bool:
    p = np.linspace(domain.l_min, domain.l_max, n)
    prof = ReflectorProfile(height=height, domain=domain)
    from .geometry import reflector_point

    x, z = reflector_point(p, prof)
    dx, dz = np.diff(x), np.diff(z)
    cross = dx[:-1] * dz[1:] - dz[:-1] * dx[1:]
    scale = np.max(np.abs(cross))
    tol = 1e-12 * max(scale, 1.0)
    return bool(np.all(cross >= -tol) or np.all(cross <= tol))


def make_ground_truth(seed: int = 0, base_height: float = 0.9,
                      amplitude: float = 0.05) -> ReflectorProfile:
    """Convex polyharmonic (thin-plate) reflector height, deterministic in
    the seed; resamples the spline weights until the reflector curve passes
    the convexity proxy and the height floor."""
    rng = np.random.default_rng(seed)
    provisional = DomainSpec(OMEGA[0], OMEGA[1], ANGLES[0], ANGLES[1],
                             -1.0, 1.0)
    for _ in range(TRUTH_MAX_RESAMPLES):
        centers = np.sort(rng.uniform(OMEGA[0], OMEGA[1], TRUTH_N_CENTERS))
        weights = rng.normal(0.0, amplitude, TRUTH_N_CENTERS)
        offset = base_height + rng.uniform(-0.05, 0.05)
        height = _truth_height(centers, weights, offset)
        grid = np.linspace(OMEGA[0], OMEGA[1], 1024)
        u, _ = height(grid)
        if np.min(u) <= TRUTH_MIN_HEIGHT:
            continue
        if not _curve_is_convex(height, provisional):
            continue
        return ReflectorProfile(height=height, domain=provisional)
    raise BenchError("convexity proxy failed after maximum resamples")


def probe_far_field_bounds(prof: ReflectorProfile, n: int = 64,
                           pad: float = 0.02):
    """(t_min, t_max) covering the forward image of the reference profile."""
    d = prof.domain
    s = np.linspace(d.l_min, d.l_max, n)
    margin = 1e-9 * (d.alpha_max - d.alpha_min)
    a = np.linspace(d.alpha_min + margin, d.alpha_max - margin, n)
    S, A = np.meshgrid(s, a, indexing="ij")
    _, sig = forward_map(S.ravel(), A.ravel(), prof)
    lo, hi = float(np.min(sig)), float(np.max(sig))
    span = hi - lo
    return lo - pad * span, hi + pad * span


def with_domain(prof: ReflectorProfile, domain: DomainSpec) -> ReflectorProfile:
    return ReflectorProfile(height=prof.height, domain=domain)


def derive_target(prof: ReflectorProfile, source: SourceSpec,
                  n_bins: int = DEFAULT_N_BINS,
                  n_rays: int = 2 ** 21) -> TargetSpec:
    """High-resolution trace of the reference profile, read back as a
    far-field density with the exact source flux."""
    hist = trace(prof, source, n_rays=n_rays, n_bins=n_bins)
    return target_from_histogram(hist, prof.domain, flux=source.total_flux)


# -- problem builders --------------------------------------------------------

def _materialize(seed: int, source_builder: Callable, solver: str,
                 name: str, cfg: BenchConfig,
                 target_override=None, h_min=None):
    truth = make_ground_truth(seed)
    t_lo, t_hi = probe_far_field_bounds(truth)
    domain = DomainSpec(OMEGA[0], OMEGA[1], ANGLES[0], ANGLES[1], t_lo, t_hi)
    truth = with_domain(truth, domain)
    source = source_builder(domain)
    if target_override is not None:
        target = target_override(domain, source)
    else:
        target = derive_target(truth, source, n_bins=cfg.n_bins,
                               n_rays=cfg.n_rays_target)
    if h_min is None:
        u, _ = truth.height(np.linspace(domain.l_min, domain.l_max, 1024))
        h_min = float(np.min(u))
    return ProblemDef(name=name, domain=domain, source=source, target=target,
                      solver=solver, truth=truth, h_min=h_min, seed=seed)


def example_a(cfg: BenchConfig | None = None, seed: int = 0) -> ProblemDef:
    cfg = cfg or BenchConfig()
    return _materialize(seed, separable_source, "direct", "example-a", cfg)


def example_b(cfg: BenchConfig | None = None, seed: int = 1) -> ProblemDef:
    cfg = cfg or BenchConfig()
    return _materialize(seed, uniform_source, "mesh", "example-b", cfg)


def example_c(cfg: BenchConfig | None = None, seed: int = 0) -> ProblemDef:
    # same configuration as A; the height sweep varies h_min around it
    cfg = cfg or BenchConfig()
    return _materialize(seed, separable_source, "direct", "example-c", cfg)


def example_d(cfg: BenchConfig | None = None, seed: int = 0) -> ProblemDef:
    cfg = cfg or BenchConfig()

    def uniform(domain, source):
        return uniform_target(domain, source.total_flux, n=cfg.n_sigma)

    return _materialize(seed, separable_source, "direct", "example-d", cfg,
                        target_override=uniform)


PROBLEMS = {"a": example_a, "b": example_b, "c": example_c, "d": example_d}


# -- solvers -----------------------------------------------------------------

def solve_network(problem: ProblemDef, cfg: BenchConfig,
                  h_min: float | None = None):
    """Train the height network with the loss matching the problem's solver
    tag; returns (MlpParams, optimizer trace)."""
    h_min = h_min if h_min is not None else problem.h_min
    if problem.solver == "mesh" or not problem.source.continuous:
        mesh = QuadMesh.build(problem.domain, cfg.mesh_p_cells,
                              cfg.mesh_sigma_cells)
        bins = target_column_bins(problem.target, mesh)
        obj = make_mesh_objective(cfg.sizes, problem.source, bins,
                                  problem.domain, mesh,
                                  n_samples=cfg.mesh_samples, h_min=h_min,
                                  penalty_weight=cfg.penalty_weight)
    else:
        obj = make_direct_objective(cfg.sizes, problem.source, problem.target,
                                    problem.domain, n_sigma=cfg.n_sigma,
                                    n_p=cfg.n_p, h_min=h_min,
                                    penalty_weight=cfg.penalty_weight)
    params0 = mlp_init(cfg.sizes, seed=cfg.seed)
    theta, tr = minimize(obj, params0.theta, cfg.optim())
    return MlpParams(sizes=cfg.sizes, theta=theta, seed=cfg.seed), tr


def solve_deconv(problem: ProblemDef, cfg: BenchConfig,
                 h_min: float | None = None):
    """Deconvolution baseline; returns (final virtual target, records)."""
    h_min = h_min if h_min is not None else problem.h_min
    if h_min is None:
        raise BenchError("deconvolution baseline needs a minimum height")
    d = problem.domain
    edges = np.linspace(d.t_min, d.t_max, cfg.n_bins + 1)
    centers = 0.5 * (edges[:-1] + edges[1:])
    g_hat = np.asarray(problem.target.density(centers), dtype=float)
    P = make_operator_P(problem.source, d, h_min, n_rays=cfg.n_rays_deconv,
                        n_bins=cfg.n_bins,
                        target_flux=problem.target.total_flux)
    target_w = target_bin_integrals(problem.target, edges)
    return van_cittert(g_hat, P, eta=cfg.vc_eta, n_iter=cfg.vc_iters,
                       target_weights=target_w)


def evaluate_profile(prof: ReflectorProfile, problem: ProblemDef,
                     cfg: BenchConfig):
    """(NMAE, histogram, target bin weights) of a candidate reflector."""
    hist = trace(prof, problem.source, n_rays=cfg.n_rays_eval,
                 n_bins=cfg.n_bins)
    edges = hist.edges
    target_w = target_bin_integrals(problem.target, edges)
    return nmae(hist.weights, target_w), hist, target_w


def run_problem(problem: ProblemDef, cfg: BenchConfig | None = None,
                h_min: float | None = None) -> RunReport:
    cfg = cfg or BenchConfig()
    t0 = time.perf_counter()
    config_echo = {"problem": problem.name, "solver": problem.solver,
                   "seed": problem.seed,
                   "h_min": h_min if h_min is not None else problem.h_min,
                   **cfg.to_dict()}
    if problem.solver == "deconv":
        _, records = solve_deconv(problem, cfg, h_min=h_min)
        best = records[-1]["result"]
        err, hist, target_w = evaluate_profile(best.profile, problem, cfg)
        p = np.linspace(problem.domain.l_min, problem.domain.l_max, 257)
        u, _ = best.profile.height(p)
        report = RunReport(name=problem.name, solver="deconv", nmae=err,
                           trace=records, profile_samples=(p, u),
                           histogram=hist, target_weights=target_w,
                           config=config_echo,
                           elapsed=time.perf_counter() - t0)
    else:
        params, tr = solve_network(problem, cfg, h_min=h_min)
        prof = mlp_profile(params, problem.domain)
        err, hist, target_w = evaluate_profile(prof, problem, cfg)
        p = np.linspace(problem.domain.l_min, problem.domain.l_max, 257)
        u, _ = mlp_height(params, p, domain=problem.domain)
        report = RunReport(name=problem.name, solver=problem.solver, nmae=err,
                           trace=tr, profile_samples=(p, u), histogram=hist,
                           target_weights=target_w, config=config_echo,
                           params=params, elapsed=time.perf_counter() - t0)
    report.check()
    return report


def sweep_height(problem: ProblemDef, h_mins, cfg: BenchConfig | None = None):
    """NN vs. deconvolution NMAE at each minimum height; returns a list of
    (h_min, nn_nmae, deconv_nmae) rows in input order."""
    cfg = cfg or BenchConfig()
    rows = []
    for h in h_mins:
        nn = run_problem(problem, cfg, h_min=float(h))
        dc_problem = ProblemDef(name=problem.name, domain=problem.domain,
                                source=problem.source, target=problem.target,
                                solver="deconv", truth=problem.truth,
                                h_min=float(h), seed=problem.seed)
        dc = run_problem(dc_problem, cfg, h_min=float(h))
        rows.append((float(h), nn.nmae, dc.nmae))
    return rows


def save_sweep_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["h_min", "network_nmae", "deconv_nmae"])
        for h, a, b in rows:
            w.writerow([repr(h), repr(a), repr(b)])


def save_report_json(report: RunReport, path):
    payload = {
        "name": report.name, "solver": report.solver,
        "nmae": report.nmae, "elapsed_seconds": report.elapsed,
        "config": report.config, "artifacts": report.artifacts,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_profile_csv(p, u, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p", "u"])
        for a, b in zip(p, u):
            w.writerow([repr(float(a)), repr(float(b))])
