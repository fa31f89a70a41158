"""Hierarchical (p-adic) phi^4 renormalization group: exact RG map, fixed points,
critical shooting, smeared-field cumulants and tree-field sampling."""

__version__ = "0.1.0"

from .blockmap import MonteCarlo, NESTED, RGParams, rg_step, rg_step_composite, zero_sum_block_integral
from .funcs import (CouplingVector, GridSpec, SampledEvenFunction, SampledFunction, evaluate,
                    from_couplings, gauss_smooth, project_couplings, symmetric_pair_integral)

__all__ = [
    "CouplingVector", "GridSpec", "MonteCarlo", "NESTED", "RGParams", "SampledEvenFunction",
    "SampledFunction", "evaluate", "from_couplings", "gauss_smooth", "project_couplings",
    "rg_step", "rg_step_composite", "symmetric_pair_integral", "zero_sum_block_integral",
]
