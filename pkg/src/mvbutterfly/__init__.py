"""Matrix-free hybrid butterfly factorization."""

from .butterfly import HybridButterfly, apply, apply_transpose, deserialize, serialize, to_dense
from .hier import PartitionTree, build_tree, uniform_tree
from .operators import BlackBoxOperator, SyntheticButterflySpec, dense_operator, synth_butterfly
from .reconstruct import ReconstructionConfig, estimate_error, factorize

__version__ = "0.1.0"

__all__ = [
    "BlackBoxOperator",
    "HybridButterfly",
    "PartitionTree",
    "ReconstructionConfig",
    "SyntheticButterflySpec",
    "apply",
    "apply_transpose",
    "build_tree",
    "dense_operator",
    "deserialize",
    "estimate_error",
    "factorize",
    "serialize",
    "synth_butterfly",
    "to_dense",
    "uniform_tree",
]
