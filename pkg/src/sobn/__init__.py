"""Second-order parameter learning for discrete Bayesian networks with missing data."""
from .network import (
    MISSING,
    BayesNet,
    Structure,
    ancestral_sample,
    builtin_structure,
    mask_cells,
    mask_pattern,
    sample_ground_truth,
    topo_order,
)
from .posterior import DirichletProduct, GaussianPosterior, beta_interval, build_D, to_gaussian
from .spn import backward, compile_spn, forward, joint_from_derivatives

__all__ = [
    "MISSING",
    "BayesNet",
    "Structure",
    "DirichletProduct",
    "GaussianPosterior",
    "ancestral_sample",
    "backward",
    "beta_interval",
    "build_D",
    "builtin_structure",
    "compile_spn",
    "forward",
    "joint_from_derivatives",
    "mask_cells",
    "mask_pattern",
    "sample_ground_truth",
    "to_gaussian",
    "topo_order",
]
