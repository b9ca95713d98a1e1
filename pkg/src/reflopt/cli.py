"""Command-line front end for the reflector design toolkit.

Subcommands::

    reflopt gen-truth      --seed N --out truth.csv [--plot truth.svg]
    reflopt derive-target  --problem a|b|c|d --out target.csv
    reflopt solve          --problem a|b|c|d --method direct|mesh|deconv ...
    reflopt trace          --profile prof.csv --problem a --out hist.csv
    reflopt nmae           --hist-a x.csv --hist-b y.csv
    reflopt sweep-height   --problem c --heights 0.4,0.6,0.8 --out sweep.csv
    reflopt limit-check    --out limit.csv

Configuration defaults live in :class:`reflopt.bench.BenchConfig`; any field
can be overridden by a YAML file passed with ``--config`` (flat mapping of
field name to value).  Exit codes: 0 success, 2 configuration error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys

import numpy as np

from . import bench
from .bench import BenchConfig, PROBLEMS, BenchError
from .geometry import DomainSpec, GeometryError, profile_from_samples
from .limitcase import (LimitCaseError, point_source_design,
                        point_source_trace, save_convergence_csv,
                        scaling_convergence)
from .loss_mesh import MeshError
from .mlp import mlp_profile, save_params
from .optim import OptimError
from .deconv import DeconvError, save_iteration_csv
from .raytrace import RaytraceError, nmae
from .sources import SpecError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

_NUMERIC_ERRORS = (BenchError, GeometryError, MeshError, OptimError,
                   DeconvError, LimitCaseError, RaytraceError,
                   FloatingPointError, ZeroDivisionError)


class ConfigError(Exception):
    pass


def load_config(path) -> BenchConfig:
    if path is None:
        return BenchConfig()
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    valid = set(BenchConfig().__dict__)
    unknown = set(data) - valid
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "sizes" in data:
        data["sizes"] = tuple(int(n) for n in data["sizes"])
    try:
        return BenchConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _line_plot(path, xs, ys_labels, xlabel, ylabel, title):
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for y, label in ys_labels:
        ax.plot(xs, y, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    if len(ys_labels) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _get_problem(name, cfg):
    if name not in PROBLEMS:
        raise ConfigError(f"unknown problem {name!r}; choose from a, b, c, d")
    return PROBLEMS[name](cfg)


def _read_profile_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if rows and rows[0][0] == "p":
        rows = rows[1:]
    p = np.array([float(r[0]) for r in rows])
    u = np.array([float(r[1]) for r in rows])
    return p, u


def _read_hist_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    rows = [r for r in rows if r[0] not in ("bin_left",)]
    return np.array([float(r[2]) for r in rows])


def cmd_gen_truth(args, cfg):
    truth = bench.make_ground_truth(args.seed)
    t_lo, t_hi = bench.probe_far_field_bounds(truth)
    d = truth.domain
    p = np.linspace(d.l_min, d.l_max, 513)
    u, _ = truth.height(p)
    bench.save_profile_csv(p, u, args.out)
    print(f"ground truth (seed {args.seed}) -> {args.out}; "
          f"far-field bounds [{t_lo:.6f}, {t_hi:.6f}]")
    if args.plot:
        _line_plot(args.plot, p, [(u, "u")], "p", "height",
                   f"ground truth, seed {args.seed}")
    return EXIT_OK


def cmd_derive_target(args, cfg):
    problem = _get_problem(args.problem, cfg)
    t = problem.target
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sigma", "density"])
        for s, v in zip(t.grid, t.values):
            w.writerow([repr(float(s)), repr(float(v))])
    print(f"target for problem {args.problem} -> {args.out} "
          f"(flux {t.total_flux:.6g})")
    if args.plot:
        _line_plot(args.plot, t.grid, [(t.values, "g")], "sigma", "density",
                   f"target, problem {args.problem}")
    return EXIT_OK


def cmd_solve(args, cfg):
    problem = _get_problem(args.problem, cfg)
    if args.method:
        problem.solver = args.method
        if args.method == "direct" and not problem.source.continuous:
            raise ConfigError(
                "direct method refuses a discontinuous source; use mesh")
    report = bench.run_problem(problem, cfg, h_min=args.h_min)
    print(f"problem {args.problem} [{report.solver}]: "
          f"NMAE {report.nmae:.6f} in {report.elapsed:.1f}s")
    if args.out_profile and report.profile_samples is not None:
        bench.save_profile_csv(*report.profile_samples, args.out_profile)
    if args.out_params and report.params is not None:
        save_params(report.params, args.out_params)
    if args.out_hist and report.histogram is not None:
        report.histogram.save_csv(args.out_hist,
                                  meta={"problem": args.problem})
    if args.out_trace:
        if report.solver == "deconv":
            save_iteration_csv(report.trace, args.out_trace)
        else:
            from .optim import save_trace_csv

            save_trace_csv(report.trace, args.out_trace)
    if args.report:
        bench.save_report_json(report, args.report)
    if args.plot and report.profile_samples is not None:
        p, u = report.profile_samples
        _line_plot(args.plot, p, [(u, "u")], "p", "height",
                   f"solved profile, problem {args.problem}")
    return EXIT_OK


def cmd_trace(args, cfg):
    problem = _get_problem(args.problem, cfg)
    p, u = _read_profile_csv(args.profile)
    prof = profile_from_samples(p, u, problem.domain)
    hist = bench.trace(prof, problem.source, n_rays=cfg.n_rays_eval,
                       n_bins=cfg.n_bins)
    hist.save_csv(args.out, meta={"problem": args.problem})
    print(f"traced {hist.n_rays} rays -> {args.out} "
          f"(total flux {hist.total_flux:.6g}, misses {hist.miss_count})")
    if args.plot:
        _line_plot(args.plot, hist.centers, [(hist.densities(), "density")],
                   "sigma", "density", "traced far field")
    return EXIT_OK


def cmd_nmae(args, cfg):
    a = _read_hist_csv(args.hist_a)
    b = _read_hist_csv(args.hist_b)
    print(f"NMAE {nmae(a, b):.8f}")
    return EXIT_OK


def cmd_sweep_height(args, cfg):
    problem = _get_problem(args.problem, cfg)
    heights = [float(x) for x in args.heights.split(",") if x.strip()]
    if not heights:
        raise ConfigError("--heights must list at least one value")
    rows = bench.sweep_height(problem, heights, cfg)
    bench.save_sweep_csv(rows, args.out)
    for h, a, b in rows:
        print(f"h_min {h:.4f}: network {a:.6f}  deconv {b:.6f}")
    if args.plot:
        hs = [r[0] for r in rows]
        _line_plot(args.plot, hs,
                   [([r[1] for r in rows], "network"),
                    ([r[2] for r in rows], "deconv")],
                   "h_min", "NMAE", f"height sweep, problem {args.problem}")
    return EXIT_OK


def cmd_limit_check(args, cfg):
    problem = _get_problem(args.problem, cfg)
    lambdas = [float(x) for x in args.lambdas.split(",") if x.strip()]
    truth = problem.truth
    max_err, spread = scaling_convergence(truth, lambdas)
    save_convergence_csv(lambdas, max_err, spread, args.out)
    for lam, e in zip(lambdas, max_err):
        print(f"lambda {lam:g}: max |sigma_lambda - sigma_inf| = {e:.3e}")
    polar = point_source_design(problem.source.marginal_alpha,
                                problem.target.density, problem.domain)
    hist = point_source_trace(polar, problem.source.marginal_alpha,
                              problem.domain)
    from .raytrace import target_bin_integrals

    err = nmae(hist.weights, target_bin_integrals(problem.target, hist.edges))
    print(f"point-source design NMAE {err:.6f}")
    if args.plot:
        _line_plot(args.plot, lambdas, [(max_err, "max error")],
                   "lambda", "max error", "scaling convergence")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="reflopt",
                                 description="2D finite-source reflector "
                                             "design toolkit")
    ap.add_argument("--config", default=None, help="YAML config overrides")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-truth", help="generate the reference reflector")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_gen_truth)

    p = sub.add_parser("derive-target", help="emit a problem's target density")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_derive_target)

    p = sub.add_parser("solve", help="run a solver on a benchmark problem")
    p.add_argument("--problem", required=True)
    p.add_argument("--method", choices=["direct", "mesh", "deconv"],
                   default=None)
    p.add_argument("--h-min", type=float, default=None)
    p.add_argument("--out-profile", default=None)
    p.add_argument("--out-params", default=None)
    p.add_argument("--out-hist", default=None)
    p.add_argument("--out-trace", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("trace", help="ray-trace a stored reflector profile")
    p.add_argument("--problem", required=True)
    p.add_argument("--profile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_trace)

    p = sub.add_parser("nmae", help="compare two histogram CSV files")
    p.add_argument("--hist-a", required=True)
    p.add_argument("--hist-b", required=True)
    p.set_defaults(fn=cmd_nmae)

    p = sub.add_parser("sweep-height", help="NN vs deconv over h_min values")
    p.add_argument("--problem", required=True)
    p.add_argument("--heights", required=True,
                   help="comma-separated h_min list")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_sweep_height)

    p = sub.add_parser("limit-check", help="point-source scaling diagnostics")
    p.add_argument("--problem", default="a")
    p.add_argument("--lambdas", default="10,100,1000")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", default=None)
    p.set_defaults(fn=cmd_limit_check)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SpecError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
