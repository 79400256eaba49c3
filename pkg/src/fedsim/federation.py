"""Round-based training engine with pluggable local solvers.

One round: schedule a device subset, broadcast the global model, run E local
steps per device, optionally perturb and quantize the local updates, then
average them on the server.  Everything is driven by per-(seed, purpose,
device, round) RNG streams, so runs are reproducible bit for bit and devices
never share randomness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from fedsim import compressor, data, model, privacy
from fedsim.errors import ConfigurationError, NumericalError

ALGORITHMS = ("dist_sgd", "fedavg", "fedpaq", "dp_fedpaq", "scaffold")

_PURPOSES = {"schedule": 0, "batch": 1, "noise": 2, "quantize": 3}


def rng_stream(seed: int, purpose: str, device: int, round_index: int):
    """Independent generator keyed by (seed, purpose, device, round)."""
    key = (seed, _PURPOSES[purpose], device, round_index)
    return np.random.default_rng(np.random.SeedSequence(key))


@dataclass
class RunConfig:
    """Configuration of one training run.

    Exactly one of rounds/total_iters may be omitted; the other is derived via
    rounds = floor(total_iters / local_steps).  Algorithm constraints are
    normalized in place: dist_sgd forces one local step, full participation and
    no quantization; fedavg and scaffold force no quantization; dp_fedpaq pins
    the global step size to 1.
    """

    algorithm: str
    num_devices: int
    participants: int
    local_steps: int = 10
    rounds: int | None = None
    total_iters: int | None = None
    batch_size: int = 10
    quant_level: int | None = None
    eta0: float = 0.1
    lr_mode: str = "experimental"
    mu: float = 0.01
    eta_g: float = 1.0
    seed: int = 0
    privacy: privacy.PrivacyConfig | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(
                f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}"
            )
        if self.algorithm == "dist_sgd":
            self.local_steps = 1
            self.participants = self.num_devices
            self.quant_level = None
        elif self.algorithm in ("fedavg", "scaffold"):
            self.quant_level = None
        if self.algorithm == "dp_fedpaq":
            if self.privacy is None:
                raise ConfigurationError("dp_fedpaq requires a privacy config")
            self.eta_g = 1.0
        elif self.privacy is not None:
            raise ConfigurationError(f"{self.algorithm} does not take a privacy config")

        if not 1 <= self.participants <= self.num_devices:
            raise ConfigurationError(
                f"need 1 <= participants <= devices, got {self.participants}/{self.num_devices}"
            )
        if self.local_steps < 1 or self.batch_size < 1:
            raise ConfigurationError("local_steps and batch_size must be >= 1")
        if self.quant_level is not None and self.quant_level < 1:
            raise ConfigurationError("quant_level must be >= 1 or None")
        if self.lr_mode not in ("experimental", "theoretical"):
            raise ConfigurationError(f"unknown lr_mode {self.lr_mode!r}")
        if self.eta0 <= 0 or self.eta_g <= 0:
            raise ConfigurationError("step sizes must be positive")

        if self.rounds is None and self.total_iters is None:
            raise ConfigurationError("one of rounds/total_iters is required")
        if self.rounds is None:
            self.rounds = self.total_iters // self.local_steps
        elif self.total_iters is None:
            self.total_iters = self.rounds * self.local_steps
        if self.rounds < 0 or self.total_iters < 0:
            raise ConfigurationError("rounds and total_iters must be nonnegative")
        if not (
            self.rounds * self.local_steps
            <= self.total_iters
            < (self.rounds + 1) * self.local_steps
        ):
            raise ConfigurationError(
                f"rounds={self.rounds} and total_iters={self.total_iters} are inconsistent "
                f"with local_steps={self.local_steps}"
            )


@dataclass
class ControlVariates:
    """Global and per-device correction vectors for drift reduction."""

    global_c: np.ndarray
    local_c: np.ndarray  # (num_devices, d)

    @classmethod
    def zeros(cls, num_devices: int, d: int) -> "ControlVariates":
        return cls(np.zeros(d), np.zeros((num_devices, d)))


@dataclass
class RoundRecord:
    round_index: int
    iteration: int
    train_loss: float
    test_acc: float
    dist_sq_to_opt: float
    bits_round: int
    bits_cum: int
    eps_prime: float
    sigma_sq: float


@dataclass
class LocalResult:
    delta: np.ndarray
    delta_c: np.ndarray | None = None
    spec: privacy.PrivacySpec | None = None
    eps_prime: float = float("nan")


def schedule(num_devices: int, participants: int, round_index: int, seed: int) -> list[int]:
    """Uniform without-replacement device subset, sorted for a fixed merge order."""
    if participants > num_devices:
        raise ConfigurationError(
            f"cannot schedule {participants} of {num_devices} devices"
        )
    rng = rng_stream(seed, "schedule", 0, round_index)
    picked = rng.choice(num_devices, size=participants, replace=False)
    return sorted(int(i) for i in picked)


def lr(round_index: int, cfg: RunConfig) -> float:
    """Round step size: eta0/(1 + kE/100) experimentally, 4/(mu (kE + 4E)) theoretically."""
    if round_index < 0:
        raise ValueError("round index must be nonnegative")
    e = cfg.local_steps
    if cfg.lr_mode == "theoretical":
        if cfg.mu <= 0:
            raise ConfigurationError("theoretical schedule requires mu > 0")
        return 4.0 / (cfg.mu * (round_index * e + 4 * e))
    return cfg.eta0 / (1.0 + round_index * e / 100.0)


def resolve_batch_size(cfg: RunConfig, partitions: list[data.DevicePartition]) -> int:
    """Mini-batch size for the run; for dp_fedpaq with a configured gamma it is derived.

    Derivation uses the smallest device so every per-device subsample fits, and
    the exact per-device gamma is recomputed from the resolved size.
    """
    n_min = min(p.n_k for p in partitions)
    if cfg.algorithm == "dp_fedpaq" and cfg.privacy.gamma is not None:
        b = int(cfg.privacy.gamma * n_min) // cfg.local_steps
        if b < 1:
            raise ConfigurationError(
                f"gamma={cfg.privacy.gamma} with {cfg.local_steps} local steps and "
                f"{n_min} samples per device leaves no room for a mini-batch"
            )
        return b
    if cfg.algorithm == "dp_fedpaq" and cfg.local_steps * cfg.batch_size > n_min:
        raise ConfigurationError(
            f"subsample of {cfg.local_steps * cfg.batch_size} exceeds the smallest "
            f"device ({n_min} samples); per-round ratio above 1 is rejected"
        )
    return cfg.batch_size


def _batch_indices(partition: data.DevicePartition, batch_size: int, rng) -> np.ndarray:
    # Uniform with replacement per step; batch_size >= n_k short-circuits to the
    # deterministic full batch in canonical (ascending) order.
    n = partition.n_k
    if batch_size >= n:
        return partition.sample_indices
    return partition.sample_indices[rng.integers(0, n, size=batch_size)]


def local_update(
    device: int,
    x_k: np.ndarray,
    cfg: RunConfig,
    dataset: data.Dataset,
    partition: data.DevicePartition,
    round_index: int,
    variates: ControlVariates | None = None,
) -> LocalResult:
    """Run one device's round: E local steps from x_k, returning the raw update.

    cfg.batch_size must already be resolved (see resolve_batch_size).
    """
    eta = lr(round_index, cfg)
    rng_batch = rng_stream(cfg.seed, "batch", device, round_index)
    y = x_k.copy()

    if cfg.algorithm == "dp_fedpaq":
        p = cfg.privacy
        take = cfg.local_steps * cfg.batch_size
        subset = data.subsample(partition, take, rng_batch)
        for t in range(cfg.local_steps):
            chunk = np.sort(subset[t * cfg.batch_size : (t + 1) * cfg.batch_size])
            g = model.clipped_gradient(
                model.ModelState(y, round_index, t), dataset.take(chunk), cfg.mu, p.clip_c
            )
            y -= eta * g
        delta = y - x_k
        gamma_i = cfg.local_steps * cfg.batch_size / partition.n_k
        delta_f = privacy.sensitivity(
            eta, cfg.local_steps, p.clip_c, cfg.batch_size, p.sensitivity_mode
        )
        spec = privacy.PrivacySpec.calibrate(p.epsilon, p.delta, p.clip_c, gamma_i, delta_f)
        if spec.sigma_sq > 0:
            rng_noise = rng_stream(cfg.seed, "noise", device, round_index)
            delta = privacy.gaussian_perturb(delta, spec.sigma_sq, rng_noise)
        eps_prime = privacy.amplified_epsilon(
            p.epsilon, cfg.batch_size, partition.n_k, cfg.local_steps
        )
        return LocalResult(delta, spec=spec, eps_prime=eps_prime)

    if cfg.algorithm == "scaffold":
        correction = variates.global_c - variates.local_c[device]
        for t in range(cfg.local_steps):
            batch = dataset.take(_batch_indices(partition, cfg.batch_size, rng_batch))
            g = model.gradient(model.ModelState(y, round_index, t), batch, cfg.mu)
            y -= eta * (g + correction)
        delta = y - x_k
        new_local = variates.local_c[device] - variates.global_c - delta / (cfg.local_steps * eta)
        return LocalResult(delta, delta_c=new_local - variates.local_c[device])

    # dist_sgd shares the fedavg/fedpaq body with local_steps forced to 1.
    for t in range(cfg.local_steps):
        batch = dataset.take(_batch_indices(partition, cfg.batch_size, rng_batch))
        g = model.gradient(model.ModelState(y, round_index, t), batch, cfg.mu)
        y -= eta * g
    return LocalResult(y - x_k)


def aggregate(x_k: np.ndarray, updates: list[np.ndarray], eta_g: float) -> np.ndarray:
    """x_{k+1} = x_k + (eta_g / M) * sum of updates, merged in the given order."""
    if not updates:
        raise ConfigurationError("aggregate needs at least one update")
    if any(u.shape != x_k.shape for u in updates):
        raise ConfigurationError("update length mismatch during aggregation")
    return x_k + (eta_g / len(updates)) * np.sum(np.stack(updates), axis=0)


def run(
    cfg: RunConfig,
    dataset: data.Dataset,
    partitions: list[data.DevicePartition],
    x_star: model.ModelState | None = None,
    test_data: data.Dataset | None = None,
    on_round=None,
) -> list[RoundRecord]:
    """Execute cfg.rounds training rounds and return one metrics record per round.

    Fully deterministic given the config (including its seed).  Raises
    NumericalError naming the device and round if an update goes non-finite.
    """
    if len(partitions) != cfg.num_devices:
        raise ConfigurationError(
            f"{cfg.num_devices} devices configured but {len(partitions)} partitions given"
        )
    cfg = replace(cfg, batch_size=resolve_batch_size(cfg, partitions))
    d = model.param_dim(dataset.dim, dataset.classes)
    x = np.zeros(d)
    variates = ControlVariates.zeros(cfg.num_devices, d) if cfg.algorithm == "scaffold" else None
    eval_data = test_data if test_data is not None else dataset
    xs = x_star.params if x_star is not None else None

    records: list[RoundRecord] = []
    bits_cum = 0
    # Overflow on the way to the diagnostic abort is expected, not a warning.
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(cfg.rounds):
            active = schedule(cfg.num_devices, cfg.participants, k, cfg.seed)
            updates: list[np.ndarray] = []
            control_deltas: list[tuple[int, np.ndarray]] = []
            eps_vals: list[float] = []
            sigma_vals: list[float] = []
            bits_round = 0
            for i in active:
                res = local_update(i, x, cfg, dataset, partitions[i], k, variates)
                if not np.isfinite(res.delta).all():
                    raise NumericalError(f"non-finite update from device {i} at round {k}")
                delta = res.delta
                if cfg.quant_level is not None:
                    qv = compressor.quantize(
                        delta, cfg.quant_level, rng_stream(cfg.seed, "quantize", i, k)
                    )
                    payload = compressor.encode(qv)
                    delta = compressor.dequantize(compressor.decode(payload, d, cfg.quant_level))
                    bits_round += compressor.bit_cost(d, cfg.quant_level)
                else:
                    bits_round += 32 * d * (2 if cfg.algorithm == "scaffold" else 1)
                updates.append(delta)
                if res.delta_c is not None:
                    control_deltas.append((i, res.delta_c))
                if res.spec is not None:
                    eps_vals.append(res.eps_prime)
                    sigma_vals.append(res.spec.sigma_sq)
            x = aggregate(x, updates, cfg.eta_g)
            if variates is not None and control_deltas:
                for i, dc in control_deltas:
                    variates.local_c[i] += dc
                variates.global_c = variates.global_c + (
                    np.sum(np.stack([dc for _, dc in control_deltas]), axis=0) / cfg.num_devices
                )
            bits_cum += bits_round
            state = model.ModelState(x, k, (k + 1) * cfg.local_steps)
            train_loss, train_acc = model.evaluate(state, dataset, cfg.mu)
            records.append(
                RoundRecord(
                    round_index=k,
                    iteration=(k + 1) * cfg.local_steps,
                    train_loss=train_loss,
                    test_acc=train_acc
                    if eval_data is dataset
                    else model.accuracy(state, eval_data),
                    dist_sq_to_opt=float((x - xs) @ (x - xs)) if xs is not None else math.nan,
                    bits_round=bits_round,
                    bits_cum=bits_cum,
                    eps_prime=float(np.mean(eps_vals)) if eps_vals else math.nan,
                    sigma_sq=float(np.mean(sigma_vals)) if sigma_vals else math.nan,
                )
            )
            if on_round is not None:
                on_round(k, x.copy())
    return records
