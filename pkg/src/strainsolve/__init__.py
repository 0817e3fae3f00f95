"""
Reconstruction of strain barcodes and frequencies from mixed-sample class
frequency measurements.
"""
from .bcd import BcdConfig, ModeSet, bcd_map, estimate_moi, solve_M_given_w
from .core import (
    CapacityError,
    DimensionError,
    FrequencyVector,
    Measurement,
    NoiseModel,
    ProblemDims,
    Reconstruction,
    StrainMatrix,
    forward,
    is_bi_independent,
    objective_phi,
)
from .evaluation import BenchmarkSpec, recon_error, run_benchmark, sample_ground_truth
from .miqp import map_estimate, solve_global
from .posterior import entropy_map, entropy_of_M_given_w, posterior_stats
from .qp import solve_w_given_M

__version__ = "0.1.0"

__all__ = [
    "BcdConfig", "BenchmarkSpec", "CapacityError", "DimensionError", "FrequencyVector",
    "Measurement", "ModeSet", "NoiseModel", "ProblemDims", "Reconstruction", "StrainMatrix",
    "bcd_map", "entropy_map", "entropy_of_M_given_w", "estimate_moi", "forward",
    "is_bi_independent", "map_estimate", "objective_phi", "posterior_stats", "recon_error",
    "run_benchmark", "sample_ground_truth", "solve_M_given_w", "solve_global", "solve_w_given_M",
]
