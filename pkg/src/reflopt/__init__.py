"""2D finite-source reflector design: differentiable losses over a
neural-network height parameterization, a deconvolution baseline, the
point-source scaling limit, and a deterministic ray-traced evaluation
harness."""

from .geometry import (DomainSpec, ReflectorProfile, constant_profile,
                       forward_map, inverse_map, profile_from_samples)
from .mlp import MlpParams, mlp_init, mlp_profile
from .raytrace import FarFieldHistogram, nmae, trace
from .sources import SourceSpec, TargetSpec, separable_source, uniform_source

__all__ = [
    "DomainSpec", "ReflectorProfile", "constant_profile", "forward_map",
    "inverse_map", "profile_from_samples", "MlpParams", "mlp_init",
    "mlp_profile", "FarFieldHistogram", "nmae", "trace", "SourceSpec",
    "TargetSpec", "separable_source", "uniform_source",
]

__version__ = "0.1.0"
