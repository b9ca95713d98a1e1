"""Deterministic limited-memory quasi-Newton minimizer.

L-BFGS two-loop recursion with Armijo backtracking and cautious update
skipping: curvature pairs with a non-positive (or numerically tiny)
curvature proxy are discarded, so search directions never go non-finite.
Accepted losses are monotone non-increasing by construction.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field


import numpy as np


class OptimError(Exception):
    pass


class LineSearchStall(OptimError):
    def __init__(self, trace):
        self.trace = trace
        super().__init__("line search failed after maximum halvings")


@dataclass
class OptimConfig:
    max_iter: int = 500
    grad_tol: float = 1e-8
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    memory: int = 10
    damping: bool = True
    max_halvings: int = 60
    curvature_eps: float = 1e-10

    def __post_init__(self):
        if self.grad_tol <= 0 or not (0.0 < self.backtrack < 1.0):
            raise OptimError("invalid optimizer configuration")


@dataclass
class TracePoint:
    iteration: int
    loss: float
    grad_norm: float
    elapsed: float


def save_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "grad_norm", "elapsed_seconds"])
        for t in trace:
            w.writerow([t.iteration, repr(t.loss), repr(t.grad_norm),
                        repr(t.elapsed)])


def minimize(f_and_grad, x0, cfg: OptimConfig | None = None, callback=None):
    """Minimize f over a flat vector; returns (x, trace).

    ``f_and_grad(x) -> (loss, grad)`` must be deterministic; the iterate
    sequence then is too.
    """
    cfg = cfg or OptimConfig()
    x = np.asarray(x0, dtype=float).copy()
    f, g = f_and_grad(x)
    if not np.isfinite(f):
        raise OptimError("objective not finite at the starting point")
    t0 = time.perf_counter()
    trace = [TracePoint(0, float(f), float(np.linalg.norm(g)),
                        time.perf_counter() - t0)]
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []
    rho_hist: list[float] = []

    for it in range(1, cfg.max_iter + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm < cfg.grad_tol:
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s_k, y_k, rho_k in zip(reversed(s_hist), reversed(y_hist),
                                   reversed(rho_hist)):
            a_k = rho_k * float(s_k @ q)
            q -= a_k * y_k
            alphas.append(a_k)
        if y_hist:
            gamma = float(s_hist[-1] @ y_hist[-1]) / float(y_hist[-1] @ y_hist[-1])
            q *= gamma
        for (s_k, y_k, rho_k), a_k in zip(zip(s_hist, y_hist, rho_hist),
                                          reversed(alphas)):
            b_k = rho_k * float(y_k @ q)
            q += (a_k - b_k) * s_k
        direction = -q
        slope = float(g @ direction)
        if not np.isfinite(slope) or slope >= 0.0:
            direction = -g
            slope = -gnorm ** 2

        step = 1.0
        accepted = False
        for _ in range(cfg.max_halvings):
            x_new = x + step * direction
            f_new, g_new = f_and_grad(x_new)
            if np.isfinite(f_new) and f_new <= f + cfg.armijo_c1 * step * slope:
                accepted = True
                break
            step *= cfg.backtrack
        if not accepted:
            if f < trace[0].loss or gnorm < 1e-6:
                break  # descent exhausted at line-search resolution
            raise LineSearchStall(trace)

        s_k = x_new - x
        y_k = g_new - g
        sy = float(s_k @ y_k)
        if not cfg.damping or sy > cfg.curvature_eps * float(
                np.linalg.norm(s_k)) * float(np.linalg.norm(y_k)):
            s_hist.append(s_k)
            y_hist.append(y_k)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > cfg.memory:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        trace.append(TracePoint(it, float(f), float(np.linalg.norm(g)),
                                time.perf_counter() - t0))
        if callback is not None:
            callback(it, x, f, g)
    return x, trace
