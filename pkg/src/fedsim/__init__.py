"""Deterministic simulator for communication-constrained federated learning with local DP."""

from fedsim.analysis import (
    BudgetCheck,
    CommBudget,
    budget_check,
    dominant_tradeoff,
    heterogeneity_lambda,
    theorem1_bound,
    theorem1_terms,
)
from fedsim.compressor import QuantizedVector, bit_cost, decode, dequantize, encode, q_factor, quantize
from fedsim.data import (
    Dataset,
    DevicePartition,
    parse_idx,
    partition_label_skew,
    serialize_idx,
    subsample,
    synth_classification,
)
from fedsim.federation import ControlVariates, RoundRecord, RunConfig, run, schedule
from fedsim.model import (
    ModelState,
    ProblemConstants,
    estimate_constants,
    gradient,
    loss,
    solve_reference_optimum,
)
from fedsim.privacy import (
    PrivacyConfig,
    PrivacySpec,
    amplified_epsilon,
    calibrate_sigma_sq,
    clip,
    gaussian_perturb,
    sensitivity,
)

__version__ = "0.1.0"
