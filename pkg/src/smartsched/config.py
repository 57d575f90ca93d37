"""Experiment configuration: typed sections, validation, and dotted overrides.

Config files are JSON. Every section maps onto a dataclass; unknown keys are
rejected and invalid values raise :class:`ConfigError` naming the offending
field (``env.num_ues`` and so on).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import zlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


# LTE CQI spectral efficiencies (bits/symbol), used as the default AMC ladder.
CQI_EFFICIENCY = (
    0.1523, 0.2344, 0.3770, 0.6016, 0.8770, 1.1758, 1.4766, 1.9141,
    2.4063, 2.7305, 3.3223, 3.9023, 4.5234, 5.1152, 5.5547,
)
DEFAULT_LADDER_SNR_DB = tuple(-6.0 + 2.0 * i for i in range(15))


def _require(cond: bool, name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{name}: {msg}")


@dataclass
class EnvConfig:
    num_ues: int = 5
    num_rbgs: int = 1
    duration: int = 500
    arrival_rate: float = 200.0
    tti_s: float = 0.001
    packet_bits: int = 8000
    buffer_bits: int = 1_000_000
    max_delay: int = 2000
    snr_db: list[float] | None = None
    snr_range_db: list[float] = field(default_factory=lambda: [0.0, 20.0])
    fading_std_db: float = 3.0
    fading_corr: float = 0.95
    ladder_snr_db: list[float] = field(default_factory=lambda: list(DEFAULT_LADDER_SNR_DB))
    ladder_efficiency: list[float] = field(default_factory=lambda: list(CQI_EFFICIENCY))
    res_per_rbg: int = 864
    avg_window: int = 100
    full_buffer: bool = False
    fixed_rates: list[float] | None = None

    def __post_init__(self) -> None:
        p = "env."
        _require(isinstance(self.num_ues, int) and self.num_ues >= 1, p + "num_ues", "must be an integer >= 1")
        _require(isinstance(self.num_rbgs, int) and self.num_rbgs >= 1, p + "num_rbgs", "must be an integer >= 1")
        _require(isinstance(self.duration, int) and self.duration >= 1, p + "duration", "must be an integer >= 1")
        _require(math.isfinite(self.arrival_rate) and self.arrival_rate >= 0, p + "arrival_rate", "must be >= 0")
        _require(self.tti_s > 0, p + "tti_s", "must be > 0")
        _require(self.packet_bits >= 1, p + "packet_bits", "must be >= 1")
        _require(self.buffer_bits >= self.packet_bits, p + "buffer_bits", "must hold at least one packet")
        _require(self.max_delay >= 0, p + "max_delay", "must be >= 0")
        _require(0.0 <= self.fading_corr <= 1.0, p + "fading_corr", "must lie in [0, 1]")
        _require(self.fading_std_db >= 0, p + "fading_std_db", "must be >= 0")
        _require(self.avg_window >= 1, p + "avg_window", "must be >= 1")
        _require(self.res_per_rbg >= 1, p + "res_per_rbg", "must be >= 1")
        _require(len(self.snr_range_db) == 2 and self.snr_range_db[0] <= self.snr_range_db[1],
                 p + "snr_range_db", "must be [low, high] with low <= high")
        if self.snr_db is not None:
            _require(len(self.snr_db) == self.num_ues, p + "snr_db", "needs one entry per UE")
        if self.fixed_rates is not None:
            _require(len(self.fixed_rates) == self.num_ues, p + "fixed_rates", "needs one entry per UE")
            _require(all(r >= 0 for r in self.fixed_rates), p + "fixed_rates", "rates must be >= 0")
        _require(len(self.ladder_snr_db) >= 1 and len(self.ladder_snr_db) == len(self.ladder_efficiency),
                 p + "ladder_snr_db", "ladder thresholds and efficiencies must have equal nonzero length")
        _require(all(a < b for a, b in zip(self.ladder_snr_db, self.ladder_snr_db[1:])),
                 p + "ladder_snr_db", "thresholds must be strictly increasing")
        _require(all(a <= b for a, b in zip(self.ladder_efficiency, self.ladder_efficiency[1:]))
                 and self.ladder_efficiency[0] >= 0,
                 p + "ladder_efficiency", "efficiencies must be nonnegative and nondecreasing")

    @property
    def ladder_rates(self) -> np.ndarray:
        """Integer bits per TTI per RBG for each ladder step."""
        return np.array([int(round(e * self.res_per_rbg)) for e in self.ladder_efficiency], dtype=np.int64)

    @property
    def top_rate(self) -> float:
        top = float(self.ladder_rates[-1])
        if self.fixed_rates is not None:
            top = max(top, max(self.fixed_rates))
        return top

    @property
    def arrivals_per_tti(self) -> float:
        return self.arrival_rate * self.tti_s


@dataclass
class RewardWeights:
    alpha: float = 0.07
    beta: float = 0.71
    delta: float = 0.22

    def __post_init__(self) -> None:
        for name in ("alpha", "beta", "delta"):
            v = getattr(self, name)
            _require(math.isfinite(v) and v >= 0, f"reward.{name}", "must be finite and >= 0")


@dataclass
class TrainConfig:
    architecture: str = "scalable"
    hidden: int = 128
    n_steps: int = 20
    gamma: float = 0.9
    entropy_weight: float = 0.03
    value_weight: float = 0.5
    max_updates: int = 10000
    lr: float = 0.001
    lr_decay: float = 0.1
    lr_decay_after: int = 5000
    optimizer: str = "sgd"
    num_envs: int = 8
    grad_clip: float = 5.0
    eval_every: int = 50
    eval_seeds: int = 2
    eval_greedy: bool = True
    early_stop_patience: int = 0
    checkpoint_every: int = 0
    init_checkpoint: str | None = None
    virtual_traces: list[str] = field(default_factory=list)
    pf_reference: bool = True

    def __post_init__(self) -> None:
        p = "training."
        _require(self.architecture in ("scalable", "one_pass"), p + "architecture", "must be 'scalable' or 'one_pass'")
        _require(self.hidden >= 1, p + "hidden", "must be >= 1")
        _require(self.n_steps >= 1, p + "n_steps", "must be >= 1")
        _require(0.0 <= self.gamma < 1.0, p + "gamma", "must lie in [0, 1)")
        _require(self.entropy_weight >= 0, p + "entropy_weight", "must be >= 0")
        _require(self.value_weight >= 0, p + "value_weight", "must be >= 0")
        _require(self.max_updates >= 0, p + "max_updates", "must be >= 0")
        _require(self.lr > 0, p + "lr", "must be > 0")
        _require(self.optimizer in ("sgd", "adam"), p + "optimizer", "must be 'sgd' or 'adam'")
        _require(self.num_envs >= 1, p + "num_envs", "must be >= 1")
        _require(self.grad_clip >= 0, p + "grad_clip", "must be >= 0 (0 disables)")
        _require(self.eval_every >= 0, p + "eval_every", "must be >= 0")


@dataclass
class GaConfig:
    population: int = 40
    generations: int = 200
    crossover_prob: float = 0.95
    mutation_prob: float = 0.05
    eta_c: float = 5.0
    eta_m: float = 20.0
    variation: str = "sbx"

    def __post_init__(self) -> None:
        p = "pareto.ga."
        _require(self.population >= 2 and self.population % 2 == 0, p + "population", "must be even and >= 2")
        _require(self.generations >= 0, p + "generations", "must be >= 0")
        _require(0.0 <= self.crossover_prob <= 1.0, p + "crossover_prob", "must lie in [0, 1]")
        _require(0.0 <= self.mutation_prob <= 1.0, p + "mutation_prob", "must lie in [0, 1]")
        _require(self.eta_c >= 0 and self.eta_m >= 0, p + "eta_c", "distribution indices must be >= 0")
        _require(self.variation in ("sbx", "discrete"), p + "variation", "must be 'sbx' or 'discrete'")


@dataclass
class ParetoConfig:
    trace: str | None = None
    l_max: int = 200
    run_ga: bool = True
    run_pla: bool = True
    exhaustive: bool = False
    dedup: str = "exact"
    expansion: str = "admissible"
    ga: GaConfig = field(default_factory=GaConfig)

    def __post_init__(self) -> None:
        _require(self.l_max >= 1, "pareto.l_max", "must be >= 1")
        _require(self.dedup in ("exact", "coarse", "none"), "pareto.dedup", "must be 'exact', 'coarse' or 'none'")
        _require(self.expansion in ("admissible", "gene"), "pareto.expansion", "must be 'admissible' or 'gene'")


@dataclass
class SchedulerConfig:
    name: str = "pf"
    checkpoint: str | None = None
    greedy: bool = True

    def __post_init__(self) -> None:
        _require(self.name in SCHEDULER_NAMES, "scheduler.name", f"unknown scheduler {self.name!r}")


@dataclass
class CompareConfig:
    schemes: list[str] = field(default_factory=lambda: ["drl", "pf"])
    seeds: int = 20
    paired: bool = True
    trace: str | None = None

    def __post_init__(self) -> None:
        _require(len(self.schemes) == 2, "compare.schemes", "exactly two scheme names are required")
        for s in self.schemes:
            _require(s in SCHEDULER_NAMES, "compare.schemes", f"unknown scheduler {s!r}")
        _require(self.seeds >= 1, "compare.seeds", "must be >= 1")


@dataclass
class OutputConfig:
    dir: str = "out"
    figures: bool = True


SCHEDULER_NAMES = ("rr", "maxci", "maxmin", "pf", "drl")


@dataclass
class ExperimentConfig:
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    pareto: ParetoConfig = field(default_factory=ParetoConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self) -> None:
        _require(isinstance(self.seed, int) and self.seed >= 0, "seed", "must be a nonnegative integer")

    def check_files(self) -> None:
        """Referenced input files must exist."""
        refs = [
            ("scheduler.checkpoint", self.scheduler.checkpoint),
            ("compare.trace", self.compare.trace),
            ("training.init_checkpoint", self.training.init_checkpoint),
            ("pareto.trace", self.pareto.trace),
        ]
        refs += [(f"training.virtual_traces[{i}]", p) for i, p in enumerate(self.training.virtual_traces)]
        for name, path in refs:
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"{name}: file not found: {path}")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def from_dict(cls, data: Any, prefix: str = ""):
    """Build dataclass ``cls`` from a nested mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        if sub is not None:
            kwargs[name] = from_dict(sub, value, prefix + name + ".")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:  # wrong value types deep inside validation
        raise ConfigError(f"{prefix.rstrip('.') or cls.__name__}: {exc}") from exc


_SECTIONS = {
    (ExperimentConfig, "env"): EnvConfig,
    (ExperimentConfig, "reward"): RewardWeights,
    (ExperimentConfig, "scheduler"): SchedulerConfig,
    (ExperimentConfig, "compare"): CompareConfig,
    (ExperimentConfig, "training"): TrainConfig,
    (ExperimentConfig, "pareto"): ParetoConfig,
    (ExperimentConfig, "output"): OutputConfig,
    (ParetoConfig, "ga"): GaConfig,
}


def apply_override(data: dict, dotted: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; value parsed as JSON, else kept as a string."""
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r}: expected key=value")
    key, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = data
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: cannot override inside a non-object value")
    node[parts[-1]] = value


def load_config(path: str | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config: file not found: {path}")
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config: invalid JSON in {path}: {exc}") from exc
    for ov in overrides or []:
        apply_override(data, ov)
    cfg = from_dict(ExperimentConfig, data)
    cfg.check_files()
    return cfg


# --- seeding -----------------------------------------------------------------

def _key(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def derive_seed(master: int, *path: int | str) -> np.random.SeedSequence:
    """Component seed from the master seed and a path of names/indices."""
    return np.random.SeedSequence(master, spawn_key=tuple(_key(p) for p in path))


def derive_int(master: int, *path: int | str) -> int:
    """Plain integer seed for a named component (fits in 63 bits)."""
    return int(derive_seed(master, *path).generate_state(2, np.uint64)[0] >> np.uint64(1))


def make_rng(master: int, *path: int | str) -> np.random.Generator:
    """Counter-based (Philox) generator for one named component."""
    return np.random.Generator(np.random.Philox(derive_seed(master, *path)))
