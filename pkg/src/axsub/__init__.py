"""Approximate multiplier substitution for low-bitwidth quantized CNNs.

Look-up-table multipliers are swapped into individual layers, their effect on
the loss is estimated with a second-order expansion over the multiplier's
error matrix, the per-layer assignment is chosen by an exact knapsack solve
under an energy budget, and a retraining-free calibration recovers accuracy.
"""

from .calib import CalibState, calibrate, input_scale_search, lwc_clip, lwc_gradients
from .mullib import (LutMultiplier, MultiplierLibrary, error_matrix, error_metrics, gen_exact, gen_perturbed,
                     gen_truncated, generate_library, read_library, write_library)
from .netsim import ModelGraph, accuracy, backward, conv_approx, conv_exact_quant, forward, loss_ce
from .perturb import (PerturbationTable, build_table, counting_pass, evaluate_omega, output_hessian_ce,
                      power_iteration)
from .quant import QuantParams, QuantTensor, dequantize, fit_params, quantize
from .selection import SelectionProblem, SelectionSolution, solve, solve_exhaustive

__version__ = "0.1.0"
