"""Flat `section.key = value` experiment configs with environment overrides.

The format is deliberately diff-friendly for sweeps: one dotted key per line,
`#` comments, later duplicates win.  Environment variables of the form
FEDSIM_<SECTION>_<KEY> override file values.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass
from pathlib import Path

from fedsim import data
from fedsim.errors import ConfigParseError, ConfigurationError
from fedsim.federation import RunConfig
from fedsim.privacy import PrivacyConfig

SECTIONS = ("run", "privacy", "dataset", "experiment", "constants", "bound", "budget")


@dataclass(frozen=True)
class ConfigEntry:
    value: str
    line: int  # 0 for environment overrides


def parse_config_text(text: str) -> dict[str, ConfigEntry]:
    entries: dict[str, ConfigEntry] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigParseError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1 or not all(key.split(".")):
            raise ConfigParseError(f"key {key!r} must look like 'section.key'", lineno)
        section = key.split(".", 1)[0]
        if section not in SECTIONS:
            raise ConfigParseError(
                f"unknown section {section!r}; expected one of {SECTIONS}", lineno
            )
        if not value:
            raise ConfigParseError(f"empty value for {key!r}", lineno)
        entries[key] = ConfigEntry(value, lineno)
    return entries


def _env_overrides() -> dict[str, ConfigEntry]:
    found = {}
    for name, value in os.environ.items():
        if not name.startswith("FEDSIM_"):
            continue
        rest = name[len("FEDSIM_") :]
        for section in SECTIONS:
            prefix = section.upper() + "_"
            if rest.startswith(prefix) and len(rest) > len(prefix):
                found[f"{section}.{rest[len(prefix):].lower()}"] = ConfigEntry(value, 0)
                break
    return found


def load_config(path: str | Path) -> dict[str, ConfigEntry]:
    entries = parse_config_text(Path(path).read_text())
    entries.update(_env_overrides())
    return entries


def _fail(key: str, entry: ConfigEntry | None, message: str):
    where = f" (line {entry.line})" if entry and entry.line else ""
    raise ConfigurationError(f"{key}{where}: {message}")


def get_str(cfg, key, default=None):
    entry = cfg.get(key)
    if entry is None:
        if default is None:
            _fail(key, None, "required key is missing")
        return default
    return entry.value


def get_int(cfg, key, default=None):
    entry = cfg.get(key)
    if entry is None:
        if default is None:
            _fail(key, None, "required key is missing")
        return default
    try:
        return int(entry.value)
    except ValueError:
        _fail(key, entry, f"expected an integer, got {entry.value!r}")


def get_float(cfg, key, default=None):
    entry = cfg.get(key)
    if entry is None:
        if default is None:
            _fail(key, None, "required key is missing")
        return default
    try:
        return float(entry.value)
    except ValueError:
        _fail(key, entry, f"expected a number, got {entry.value!r}")


def get_bool(cfg, key, default: bool) -> bool:
    entry = cfg.get(key)
    if entry is None:
        return default
    lowered = entry.value.lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    _fail(key, entry, f"expected a boolean, got {entry.value!r}")


def parse_scalar(text: str):
    """Best-effort typing for sweep values: int, float, none, or the raw string."""
    if text.lower() in ("none", "null"):
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


@dataclass
class DatasetSpec:
    """Either a synthetic recipe or a pair of IDX paths, plus partitioning knobs."""

    synthetic_n: int | None = None
    synthetic_u: int | None = None
    synthetic_classes: int | None = None
    synthetic_separation: float | None = None
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    label_skew: int | None = None  # digits per device; None means no skew
    seed: int | None = None  # None: follow the per-repeat master seed

    @property
    def synthetic(self) -> bool:
        return self.synthetic_n is not None

    def build(self, fallback_seed: int) -> tuple[data.Dataset, data.Dataset | None]:
        """Materialize (train, test-or-None) for one experiment cell."""
        seed = self.seed if self.seed is not None else fallback_seed
        if self.synthetic:
            train = data.synth_classification(
                self.synthetic_n, self.synthetic_u, self.synthetic_classes,
                self.synthetic_separation, seed,
            )
            n_test = max(self.synthetic_classes * 10, self.synthetic_n // 5)
            test = data.synth_classification(
                n_test, self.synthetic_u, self.synthetic_classes,
                self.synthetic_separation, seed + 1_000_003,
            )
            return train, test
        train = data.load_idx_dataset(
            Path(self.images).read_bytes(), Path(self.labels).read_bytes()
        )
        test = None
        if self.test_images and self.test_labels:
            test = data.load_idx_dataset(
                Path(self.test_images).read_bytes(), Path(self.test_labels).read_bytes()
            )
        return train, test

    def partition(self, dataset: data.Dataset, num_devices: int, fallback_seed: int):
        seed = self.seed if self.seed is not None else fallback_seed
        digits = self.label_skew if self.label_skew is not None else dataset.classes
        return data.partition_label_skew(dataset, num_devices, digits, seed)


@dataclass
class ExperimentConfig:
    run: RunConfig
    dataset: DatasetSpec
    output: str
    sweep_param: str | None
    sweep_values: list
    repeats: int
    compute_optimum: bool
    optimum_tol: float
    jobs: int = 1
    # Which of rounds/total_iters to re-derive per cell: sweeping local_steps
    # keeps the axis the user pinned and recomputes the other one.
    derive_axis: str | None = None

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.sweep_param is not None:
            run_fields = {f.name for f in dataclasses.fields(RunConfig)}
            priv_fields = {f.name for f in dataclasses.fields(PrivacyConfig)}
            if self.sweep_param not in run_fields | priv_fields:
                raise ConfigurationError(
                    f"sweep parameter {self.sweep_param!r} is not a run or privacy field"
                )

    def cell_config(self, value, seed: int) -> RunConfig:
        """The run config for one (sweep value, seed) cell."""
        cfg = self.run
        overrides: dict = {"seed": seed}
        if self.derive_axis is not None:
            overrides[self.derive_axis] = None
        if self.sweep_param is not None:
            run_fields = {f.name for f in dataclasses.fields(RunConfig)}
            if self.sweep_param in run_fields:
                overrides[self.sweep_param] = value
            else:
                if cfg.privacy is None:
                    raise ConfigurationError(
                        f"sweeping {self.sweep_param!r} needs a privacy section"
                    )
                overrides["privacy"] = dataclasses.replace(
                    cfg.privacy, **{self.sweep_param: value}
                )
        return dataclasses.replace(cfg, **overrides)


def build_privacy(cfg) -> PrivacyConfig | None:
    if not any(key.startswith("privacy.") for key in cfg):
        return None
    mode_text = get_str(cfg, "privacy.sensitivity_mode", "derived")
    mode = mode_text if mode_text == "derived" else parse_scalar(mode_text)
    gamma = parse_scalar(get_str(cfg, "privacy.gamma", "0.2"))
    return PrivacyConfig(
        epsilon=get_float(cfg, "privacy.epsilon"),
        delta=get_float(cfg, "privacy.delta", 1e-4),
        clip_c=get_float(cfg, "privacy.clip_c", 1.0),
        gamma=None if gamma is None else float(gamma),
        sensitivity_mode=mode,
    )


def build_run_config(cfg) -> RunConfig:
    quant_text = get_str(cfg, "run.quant_level", "10")
    quant = parse_scalar(quant_text)
    if quant is not None and not isinstance(quant, int):
        _fail("run.quant_level", cfg.get("run.quant_level"), f"expected an integer or none")
    rounds = get_int(cfg, "run.rounds", -1)
    total = get_int(cfg, "run.total_iters", -1)
    if rounds < 0 and total < 0:
        rounds = 100
    return RunConfig(
        algorithm=get_str(cfg, "run.algorithm", "fedpaq"),
        num_devices=get_int(cfg, "run.num_devices", 100),
        participants=get_int(cfg, "run.participants", 10),
        local_steps=get_int(cfg, "run.local_steps", 10),
        rounds=None if rounds < 0 else rounds,
        total_iters=None if total < 0 else total,
        batch_size=get_int(cfg, "run.batch_size", 10),
        quant_level=quant,
        eta0=get_float(cfg, "run.eta0", 0.1),
        lr_mode=get_str(cfg, "run.lr_mode", "experimental"),
        mu=get_float(cfg, "run.mu", 0.01),
        eta_g=get_float(cfg, "run.eta_g", 1.0),
        seed=get_int(cfg, "run.seed", 0),
        privacy=build_privacy(cfg),
    )


def build_dataset_spec(cfg) -> DatasetSpec:
    has_synth = "dataset.synthetic_n" in cfg
    has_idx = "dataset.images" in cfg
    if has_synth == has_idx:
        raise ConfigurationError(
            "dataset needs either dataset.synthetic_* keys or dataset.images/labels paths"
        )
    skew = cfg.get("dataset.label_skew")
    ds_seed = cfg.get("dataset.seed")
    if has_synth:
        return DatasetSpec(
            synthetic_n=get_int(cfg, "dataset.synthetic_n"),
            synthetic_u=get_int(cfg, "dataset.synthetic_u", 10),
            synthetic_classes=get_int(cfg, "dataset.synthetic_classes", 10),
            synthetic_separation=get_float(cfg, "dataset.synthetic_separation", 3.0),
            label_skew=int(skew.value) if skew else None,
            seed=int(ds_seed.value) if ds_seed else None,
        )
    return DatasetSpec(
        images=get_str(cfg, "dataset.images"),
        labels=get_str(cfg, "dataset.labels"),
        test_images=get_str(cfg, "dataset.test_images", ""),
        test_labels=get_str(cfg, "dataset.test_labels", ""),
        label_skew=int(skew.value) if skew else None,
        seed=int(ds_seed.value) if ds_seed else None,
    )


def build_experiment(cfg) -> ExperimentConfig:
    sweep_param = get_str(cfg, "experiment.sweep", "")
    values_text = get_str(cfg, "experiment.sweep_values", "")
    if bool(sweep_param) != bool(values_text):
        raise ConfigurationError(
            "experiment.sweep and experiment.sweep_values must be given together"
        )
    values = [parse_scalar(v.strip()) for v in values_text.split(",") if v.strip()] if values_text else [None]
    if "run.rounds" in cfg and "run.total_iters" not in cfg:
        derive_axis = "total_iters"
    elif "run.total_iters" in cfg and "run.rounds" not in cfg:
        derive_axis = "rounds"
    else:
        derive_axis = "total_iters" if "run.total_iters" not in cfg else None
    return ExperimentConfig(
        run=build_run_config(cfg),
        dataset=build_dataset_spec(cfg),
        output=get_str(cfg, "experiment.output", "out"),
        sweep_param=sweep_param or None,
        sweep_values=values,
        repeats=get_int(cfg, "experiment.repeats", 1),
        compute_optimum=get_bool(cfg, "experiment.compute_optimum", False),
        optimum_tol=get_float(cfg, "experiment.optimum_tol", 1e-10),
        derive_axis=derive_axis,
    )
