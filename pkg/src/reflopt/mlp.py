"""MLP parameterization of the reflector height function.

Hidden layers use the squared hyperbolic tangent activation; the output
layer passes through softplus(x) + eps with eps = 1e-3, so u > 0 holds for
every parameter vector (exactly the precondition of the ray-intersection
guarantee).  The input coordinate is affinely normalized from the source
interval to [-1, 1] before the first layer.

Two evaluation paths share the same arithmetic:

* :func:`mlp_height` — vectorized numpy, for ray tracing and plotting;
* :func:`mlp_height_traced` — parameters as tape scalars (and optionally a
  dual-number input), for the differentiable losses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import ad
from .geometry import DomainSpec, ReflectorProfile

EPS_HEIGHT = 1e-3
DEFAULT_SIZES = (1, 24, 24, 1)


class MlpError(Exception):
    pass


def n_params(sizes) -> int:
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


@dataclass
class MlpParams:
    sizes: tuple
    theta: np.ndarray
    seed: int | None = None
    activations: tuple = field(default=None)

    def __post_init__(self):
        self.sizes = tuple(int(n) for n in self.sizes)
        if self.activations is None:
            self.activations = tuple(["tanh2"] * (len(self.sizes) - 2) + ["softplus"])
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.size != n_params(self.sizes):
            raise MlpError(
                f"theta length {self.theta.size} inconsistent with sizes {self.sizes}")
        if not np.all(np.isfinite(self.theta)):
            raise MlpError("non-finite parameter entries")


def mlp_init(sizes=DEFAULT_SIZES, seed: int = 0) -> MlpParams:
    """Deterministic Glorot-style uniform initialization."""
    sizes = tuple(int(n) for n in sizes)
    if len(sizes) < 2 or sizes[0] != 1 or sizes[-1] != 1:
        raise MlpError("sizes must start and end with 1")
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return MlpParams(sizes=sizes, theta=np.concatenate(parts), seed=seed)


def unpack(sizes, theta):
    """Split a flat parameter sequence into per-layer (W, b) lists.

    W is stored row-major with shape (fan_in, fan_out); works for numpy
    vectors and for lists of tape scalars.
    """
    layers = []
    k = 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = [[theta[k + i * fan_out + j] for j in range(fan_out)] for i in range(fan_in)]
        k += fan_in * fan_out
        b = [theta[k + j] for j in range(fan_out)]
        k += fan_out
        layers.append((w, b))
    return layers


def _normalizer(domain: DomainSpec):
    half = 0.5 * (domain.l_max - domain.l_min)
    mid = 0.5 * (domain.l_max + domain.l_min)
    return mid, half


def mlp_height(params: MlpParams, p, domain: DomainSpec | None = None):
    """(u, du/dp) on plain numpy inputs, vectorized over p."""
    p = np.asarray(p, dtype=float)
    if domain is not None:
        mid, half = _normalizer(domain)
        x = (p - mid) / half
        dscale = 1.0 / half
    else:
        x = p
        dscale = 1.0
    a = x[..., None]
    da = np.ones_like(a)
    k = 0
    theta = params.theta
    sizes = params.sizes
    for li, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = theta[k:k + fan_in * fan_out].reshape(fan_in, fan_out)
        k += fan_in * fan_out
        b = theta[k:k + fan_out]
        k += fan_out
        z = a @ w + b
        dz = da @ w
        if li < len(sizes) - 2:
            t = np.tanh(z)
            a = t * t
            da = 2.0 * t * (1.0 - t * t) * dz
        else:
            a = np.logaddexp(0.0, z) + EPS_HEIGHT
            da = dz / (1.0 + np.exp(-z))
    u = a[..., 0]
    du = da[..., 0] * dscale
    if p.ndim == 0:
        return float(u), float(du)
    return u, du


def mlp_height_traced(theta, sizes, p, domain: DomainSpec | None = None):
    """(u, du/dp) with theta as tape scalars; p may be numpy, tape, or dual.

    The derivative du/dp is propagated alongside the value through every
    layer, so it is itself a traced quantity (and, for dual inputs, carries
    d2u/dp2 in its tangent).
    """
    if domain is not None:
        mid, half = _normalizer(domain)
        x = (p - mid) * (1.0 / half)
        dscale = 1.0 / half
    else:
        x = p
        dscale = 1.0
    layers = unpack(sizes, theta)
    acts = [x]
    dacts = [1.0]
    for li, (w, b) in enumerate(layers):
        fan_in = len(w)
        fan_out = len(w[0])
        z = []
        dz = []
        for j in range(fan_out):
            zj = b[j]
            dzj = 0.0
            for i in range(fan_in):
                zj = zj + acts[i] * w[i][j]
                dzj = dzj + dacts[i] * w[i][j]
            z.append(zj)
            dz.append(dzj)
        if li < len(layers) - 1:
            acts = []
            dacts = []
            for zj, dzj in zip(z, dz):
                t = ad.tanh(zj)
                acts.append(t * t)
                dacts.append(2.0 * t * (1.0 - t * t) * dzj)
        else:
            acts = [ad.softplus(zj) + EPS_HEIGHT for zj in z]
            dacts = [dzj * ad.sigmoid(zj) for zj, dzj in zip(z, dz)]
    return acts[0], dacts[0] * dscale


def mlp_profile(params: MlpParams, domain: DomainSpec) -> ReflectorProfile:
    """Numpy-path reflector profile backed by the network."""
    return ReflectorProfile(
        height=lambda p: mlp_height(params, p, domain=domain), domain=domain)


def traced_profile(theta, sizes, domain: DomainSpec) -> ReflectorProfile:
    """Tape-path reflector profile (theta entries are tape scalars)."""
    return ReflectorProfile(
        height=lambda p: mlp_height_traced(theta, sizes, p, domain=domain),
        domain=domain)


# -- checkpoint format -------------------------------------------------------
# Line 1: JSON header {"sizes": [...], "seed": ..., "activations": [...]}
# Following lines: one parameter per line, repr'd at full precision.
# Text-based, so byte order is fixed by construction.

def save_params(params: MlpParams, path):
    header = {"sizes": list(params.sizes), "seed": params.seed,
              "activations": list(params.activations)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for v in params.theta:
            fh.write(repr(float(v)) + "\n")


def load_params(path) -> MlpParams:
    with open(path) as fh:
        header = json.loads(fh.readline())
        theta = np.array([float(line) for line in fh if line.strip()])
    return MlpParams(sizes=tuple(header["sizes"]), theta=theta,
                     seed=header.get("seed"),
                     activations=tuple(header["activations"]))
