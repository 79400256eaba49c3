"""Convergence-bound evaluation, communication-budget accounting and trade-off reports.

The bound on E||x_K - x*||^2 is the sum of six terms: an initialization term
decaying as E^2/T^2, a compression term in E/T, a variance/heterogeneity term
in 1/T, two client-drift terms in (E-1)/T and (E-1)^2/T, and a privacy term in
E^3/T that is omitted entirely for non-private runs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from fedsim import model as model_mod
from fedsim.data import Dataset, DevicePartition
from fedsim.federation import RunConfig
from fedsim.model import ModelState, ProblemConstants

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "E", "M", "K", "bound_total",
    "term1", "term2", "term3", "term4", "term5", "term6",
    "feasible",
)


@dataclass(frozen=True)
class CommBudget:
    """Total uplink budget B = capacity * duration, at beta bits per update."""

    capacity_bits_per_sec: float
    duration_sec: float
    bits_per_update: float

    def __post_init__(self):
        if self.capacity_bits_per_sec <= 0 or self.duration_sec <= 0 or self.bits_per_update <= 0:
            raise ValueError("budget parameters must be positive")

    @property
    def total_bits(self) -> float:
        return self.capacity_bits_per_sec * self.duration_sec

    def alpha(self, total_iters: int) -> float:
        """Participants per local step affordable under the budget: B / (T beta)."""
        return self.total_bits / (total_iters * self.bits_per_update)

    @classmethod
    def from_total(cls, total_bits: float, bits_per_update: float) -> "CommBudget":
        return cls(total_bits, 1.0, bits_per_update)


@dataclass(frozen=True)
class BudgetCheck:
    feasible: bool
    slack: float


@dataclass(frozen=True)
class TradeoffRow:
    local_steps: int
    participants: int
    rounds: int
    bound_total: float
    terms: tuple[float, float, float, float, float, float]
    feasible: bool


@dataclass(frozen=True)
class TradeoffReport:
    rows: tuple[TradeoffRow, ...]
    alpha: float
    best_index: int | None  # minimizer among feasible rows; None if none feasible


def theorem1_terms(
    constants: ProblemConstants,
    cfg: RunConfig,
    q: float,
    dist0: float,
    n_k: int,
) -> tuple[float, float, float, float, float, float]:
    """The six summands of the convergence bound, evaluated verbatim.

    The privacy term uses cfg.privacy and is zero when privacy is unset.
    """
    e_steps = cfg.local_steps
    t_total = cfg.total_iters
    m = cfg.participants
    n = cfg.num_devices
    b = cfg.batch_size
    mu, big_l, big_g = constants.mu, constants.L, constants.G
    sig_sq = constants.sigma_grad**2
    lam_sq = constants.lambda_het**2
    if t_total <= 0 or m < 1 or n < 1 or b < 1 or n_k < 1:
        raise ValueError("bound evaluation needs positive T, M, N, b and n_k")
    if q < 0 or dist0 < 0:
        raise ValueError("q and dist0 must be nonnegative")
    if q > 1:
        log.warning("compression factor q=%.4g exceeds 1; bound evaluated as-is", q)

    g_sq = big_g**2
    t1 = 16.0 * e_steps**2 / t_total**2 * dist0
    t2 = 16.0 / mu**2 * (2.0 * q * g_sq / m + q * g_sq / n) * (e_steps / t_total)
    t3 = (
        16.0
        / mu**2
        * (4.0 * math.e * sig_sq / (b * m) + 3.0 * big_l * lam_sq / mu + sig_sq / (b * n))
        / t_total
    )
    t4 = 128.0 * math.e * lam_sq / (mu**2 * m) * (e_steps - 1) / t_total
    t5 = 128.0 * g_sq / mu**2 * (e_steps - 1) ** 2 / t_total
    if cfg.privacy is None:
        t6 = 0.0
    else:
        eps, delta = cfg.privacy.epsilon, cfg.privacy.delta
        log_arg = 1.25 * e_steps * b / (n_k * delta)
        if log_arg <= 0:
            raise ValueError(f"nonpositive log argument {log_arg} in the privacy term")
        t6 = (
            4096.0 * constants.d * g_sq * b**2 * (1.0 + q) * math.log(log_arg)
            / (m * n_k**2 * eps**2)
            * (e_steps**3 / t_total)
        )
    return (t1, t2, t3, t4, t5, t6)


def theorem1_bound(
    constants: ProblemConstants,
    cfg: RunConfig,
    q: float,
    dist0: float,
    n_k: int,
) -> float:
    """Upper bound on the expected squared distance to the optimum after the run."""
    return float(sum(theorem1_terms(constants, cfg, q, dist0, n_k)))


def budget_check(rounds: int, participants: int, beta: float, total_bits: float) -> BudgetCheck:
    """Feasibility of K rounds of M updates at beta bits each within the budget."""
    if min(rounds, participants) < 0 or beta < 0 or total_bits < 0:
        raise ValueError("budget inputs must be nonnegative")
    used = rounds * participants * beta
    return BudgetCheck(feasible=used <= total_bits, slack=total_bits - used)


def dominant_tradeoff(
    cfg: RunConfig,
    budget: CommBudget,
    constants: ProblemConstants,
    q: float,
    dist0: float,
    n_k: int,
) -> TradeoffReport:
    """Sweep (E, M = floor(alpha E)) pairs under a fixed budget and bound each one.

    Enumeration runs over E = 1.. while M stays within the device count and at
    least one round fits; rows that exceed the bit budget are kept but flagged
    infeasible.  An empty report signals that the budget admits no participants.
    """
    alpha = budget.alpha(cfg.total_iters)
    rows = []
    best_idx = None
    best_val = math.inf
    for e_steps in range(1, cfg.total_iters + 1):
        m = int(alpha * e_steps)
        if m < 1:
            continue
        if m > cfg.num_devices:
            break
        k = cfg.total_iters // e_steps
        if k < 1:
            break
        cfg_row = replace(
            cfg, local_steps=e_steps, participants=m, rounds=None, total_iters=cfg.total_iters
        )
        terms = theorem1_terms(constants, cfg_row, q, dist0, n_k)
        total = float(sum(terms))
        feasible = budget_check(k, m, budget.bits_per_update, budget.total_bits).feasible
        rows.append(TradeoffRow(e_steps, m, k, total, terms, feasible))
        if feasible and total < best_val:
            best_val = total
            best_idx = len(rows) - 1
    return TradeoffReport(rows=tuple(rows), alpha=alpha, best_index=best_idx)


def heterogeneity_lambda(
    dataset: Dataset,
    partitions: list[DevicePartition],
    x: ModelState,
    mu: float = 0.0,
) -> float:
    """Pointwise heterogeneity estimate: sqrt of the mean squared deviation of
    device gradients from their uniform average, evaluated at x."""
    grads = [
        model_mod.gradient(x, dataset.take(p.sample_indices), mu) for p in partitions
    ]
    if len(grads) == 1:
        return 0.0
    mean_g = np.mean(grads, axis=0)
    return float(np.sqrt(np.mean([(g - mean_g) @ (g - mean_g) for g in grads])))
