"""Regularized multinomial logistic regression: loss, gradients, and reference optimum.

The parameter vector is the flattened (classes x features) weight matrix
followed by the per-class bias; a bias-free layout (classes x features only)
is also accepted and inferred from the vector length.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsim.data import Dataset, DevicePartition
from fedsim.errors import ConfigurationError, ConvergenceError


@dataclass
class ModelState:
    """Flat parameter vector plus round/iteration bookkeeping."""

    params: np.ndarray
    round_index: int = 0
    iteration_index: int = 0

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)


@dataclass(frozen=True)
class ProblemConstants:
    """Problem-level constants consumed by the convergence-bound evaluator.

    L and mu are analytic; sigma_grad, lambda_het and G are sampled at probe
    points and therefore lower bounds on the true suprema.
    """

    L: float
    mu: float
    sigma_grad: float
    lambda_het: float
    G: float
    b: int
    d: int

    def __post_init__(self):
        if not (self.L >= self.mu > 0):
            raise ConfigurationError(f"need L >= mu > 0, got L={self.L}, mu={self.mu}")
        if self.sigma_grad < 0 or self.lambda_het < 0:
            raise ConfigurationError("sigma_grad and lambda_het must be nonnegative")
        if self.G <= 0 or self.b < 1 or self.d < 1:
            raise ConfigurationError("need G > 0, b >= 1, d >= 1")


def param_dim(n_features: int, classes: int, bias: bool = True) -> int:
    return classes * (n_features + int(bias)) if bias else classes * n_features


def _unpack(params: np.ndarray, n_features: int, classes: int):
    """Split the flat vector into (weights, bias-or-None), inferring the layout."""
    d = params.size
    if d == classes * (n_features + 1):
        w = params[: classes * n_features].reshape(classes, n_features)
        return w, params[classes * n_features :]
    if d == classes * n_features:
        return params.reshape(classes, n_features), None
    raise ConfigurationError(
        f"parameter vector of length {d} does not fit {classes} classes x "
        f"{n_features} features (with or without bias)"
    )


def _logits(params: np.ndarray, batch: Dataset) -> np.ndarray:
    w, bias = _unpack(params, batch.dim, batch.classes)
    z = batch.features @ w.T
    if bias is not None:
        z = z + bias
    return z


def _check_batch(batch: Dataset):
    if batch.n < 1:
        raise ValueError("batch must be nonempty")


def loss(state: ModelState, batch: Dataset, mu: float) -> float:
    """Mean softmax cross-entropy over the batch plus (mu/2)||params||^2."""
    _check_batch(batch)
    z = _logits(state.params, batch)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = float(np.mean(lse - z[np.arange(batch.n), batch.labels]))
    return ce + 0.5 * mu * float(state.params @ state.params)


def _probs(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _assemble_grad(err: np.ndarray, batch: Dataset, bias: bool, mu: float, params: np.ndarray,
                   reg_scale: float = 1.0) -> np.ndarray:
    n = batch.n
    gw = err.T @ batch.features / n
    parts = [gw.ravel()]
    if bias:
        parts.append(err.sum(axis=0) / n)
    g = np.concatenate(parts)
    if mu != 0.0:
        g = g + (reg_scale * mu) * params
    return g


def gradient(state: ModelState, batch: Dataset, mu: float) -> np.ndarray:
    """Gradient of `loss` at the current parameters; same length as params."""
    _check_batch(batch)
    z = _logits(state.params, batch)
    err = _probs(z)
    err[np.arange(batch.n), batch.labels] -= 1.0
    _, bias = _unpack(state.params, batch.dim, batch.classes)
    return _assemble_grad(err, batch, bias is not None, mu, state.params)


def per_sample_grad_sq_norms(state: ModelState, batch: Dataset, mu: float) -> np.ndarray:
    """Squared norms of the per-sample gradients, computed without materializing them.

    The per-sample gradient is the rank-one matrix err_n x_n^T (plus the bias
    column and mu * params), so its squared norm has a closed form.
    """
    _check_batch(batch)
    params = state.params
    z = _logits(params, batch)
    err = _probs(z)
    err[np.arange(batch.n), batch.labels] -= 1.0
    w, bias = _unpack(params, batch.dim, batch.classes)
    feat_sq = np.einsum("ij,ij->i", batch.features, batch.features)
    if bias is not None:
        feat_sq = feat_sq + 1.0
    err_sq = np.einsum("ij,ij->i", err, err)
    norms_sq = err_sq * feat_sq
    if mu != 0.0:
        cross = np.einsum("nc,nc->n", err, batch.features @ w.T)
        if bias is not None:
            cross = cross + err @ bias
        norms_sq = norms_sq + 2.0 * mu * cross + (mu * mu) * float(params @ params)
    return np.maximum(norms_sq, 0.0)


def clipped_gradient(state: ModelState, batch: Dataset, mu: float, clip_c: float) -> np.ndarray:
    """Mean of per-sample gradients, each clipped to L2 norm clip_c before averaging."""
    _check_batch(batch)
    if clip_c <= 0:
        raise ValueError("clip bound must be positive")
    norms = np.sqrt(per_sample_grad_sq_norms(state, batch, mu))
    factors = np.minimum(1.0, np.divide(clip_c, norms, out=np.ones_like(norms), where=norms > 0))
    z = _logits(state.params, batch)
    err = _probs(z)
    err[np.arange(batch.n), batch.labels] -= 1.0
    err = factors[:, None] * err
    _, bias = _unpack(state.params, batch.dim, batch.classes)
    return _assemble_grad(err, batch, bias is not None, mu, state.params,
                          reg_scale=float(factors.mean()))


def accuracy(state: ModelState, dataset: Dataset) -> float:
    z = _logits(state.params, dataset)
    return float(np.mean(z.argmax(axis=1) == dataset.labels))


def evaluate(state: ModelState, dataset: Dataset, mu: float) -> tuple[float, float]:
    """(loss, accuracy) from a single logits pass; matches loss() bit for bit."""
    _check_batch(dataset)
    z = _logits(state.params, dataset)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    ce = float(np.mean(lse - z[np.arange(dataset.n), dataset.labels]))
    acc = float(np.mean(z.argmax(axis=1) == dataset.labels))
    return ce + 0.5 * mu * float(state.params @ state.params), acc


def solve_reference_optimum(
    dataset: Dataset,
    mu: float,
    tol: float = 1e-10,
    max_iters: int = 200_000,
    bias: bool = True,
) -> ModelState:
    """Unique minimizer of the regularized objective via full-batch GD with backtracking.

    Deterministic for fixed inputs.  Raises ConvergenceError with the final
    gradient norm if the iteration cap is hit before ||grad|| <= tol.
    """
    if mu <= 0:
        raise ConfigurationError("reference optimum requires mu > 0 (unique minimizer)")
    if tol <= 0:
        raise ConfigurationError("tolerance must be positive")
    x = np.zeros(param_dim(dataset.dim, dataset.classes, bias))
    state = ModelState(x)
    f = loss(state, dataset, mu)
    # Near the optimum the loss decrease falls below float resolution, so the
    # Armijo test alone cannot steer the step; capping at the analytic 1/L
    # keeps every accepted step contractive regardless.
    row_sq = np.einsum("ij,ij->i", dataset.features, dataset.features)
    step_cap = 1.0 / (0.5 * float(row_sq.max() + (1.0 if bias else 0.0)) + mu)
    step = step_cap
    eps = np.finfo(np.float64).eps
    for _ in range(max_iters):
        g = gradient(state, dataset, mu)
        gnorm_sq = float(g @ g)
        if np.sqrt(gnorm_sq) <= tol:
            return state
        if step_cap * gnorm_sq <= 64.0 * eps * max(abs(f), 1e-300):
            # The per-step decrease is below the loss ULP, so the Armijo test
            # can no longer certify progress; the capped step still contracts.
            state = ModelState(state.params - step_cap * g)
            continue
        while True:
            trial = ModelState(state.params - step * g)
            f_trial = loss(trial, dataset, mu)
            if f_trial <= f - 1e-4 * step * gnorm_sq:
                break
            step *= 0.5
            if step < 1e-300:
                raise ConvergenceError(
                    f"line search stalled at gradient norm {np.sqrt(gnorm_sq):.3e}"
                )
        state, f = trial, f_trial
        step = min(step * 2.0, step_cap)
    g = gradient(state, dataset, mu)
    raise ConvergenceError(
        f"no convergence after {max_iters} iterations; gradient norm {np.linalg.norm(g):.3e}"
    )


def estimate_constants(
    dataset: Dataset,
    mu: float,
    probe_points: list[ModelState],
    partitions: list[DevicePartition] | None = None,
    batch_size: int = 1,
    clip_c: float | None = None,
) -> ProblemConstants:
    """Estimate smoothness/variance/heterogeneity constants at the probe points.

    L is an analytic bound for softmax + L2 ((max row norm^2)/2 + mu, bias
    column included); mu is exact; sigma_grad, lambda_het and G are sampled at
    the probes and are lower bounds on the true suprema.  sigma_grad uses the
    without-replacement finite-population correction, so it vanishes at
    batch_size = n.  When clip_c is given (per-sample clipping active), G is
    that bound: clipped stochastic gradients cannot exceed it anywhere.
    """
    if not probe_points:
        raise ValueError("need at least one probe point")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    bias = probe_points[0].params.size == param_dim(dataset.dim, dataset.classes, True)
    row_sq = np.einsum("ij,ij->i", dataset.features, dataset.features)
    L = 0.5 * float(row_sq.max() + (1.0 if bias else 0.0)) + mu

    if partitions is None:
        partitions = [DevicePartition(0, np.arange(dataset.n))]
    device_data = [dataset.take(p.sample_indices) for p in partitions]

    g_max_sq = 0.0
    sigma_sq = 0.0
    lambda_sq = 0.0
    for probe in probe_points:
        grads = []
        for dev in device_data:
            g = gradient(probe, dev, mu)
            grads.append(g)
            sq_norms = per_sample_grad_sq_norms(probe, dev, mu)
            g_max_sq = max(g_max_sq, float(sq_norms.max()))
            n_i = dev.n
            if n_i > 1:
                v1 = float(sq_norms.mean()) - float(g @ g)
                v1 = max(v1, 0.0)
                sigma_sq = max(sigma_sq, v1 * (n_i - batch_size) / (n_i - 1))
        mean_g = np.mean(grads, axis=0)
        lambda_sq = max(
            lambda_sq,
            float(np.mean([(g - mean_g) @ (g - mean_g) for g in grads])),
        )
    if clip_c is not None:
        g_bound = float(clip_c)
    else:
        g_bound = float(np.sqrt(g_max_sq)) if g_max_sq > 0 else 1e-12
    return ProblemConstants(
        L=L,
        mu=mu,
        sigma_grad=float(np.sqrt(sigma_sq)),
        lambda_het=float(np.sqrt(lambda_sq)),
        G=g_bound,
        b=batch_size,
        d=probe_points[0].params.size,
    )
