import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
from omegaconf import OmegaConf

SIGNAL_PRIORS = ("gaussian", "codebook", "discrete")
MODES = ("simulate", "sweep", "theory", "compare")


@dataclass
class SystemConfig:
    n_devices: int = 1000  # N
    n_antennas: int = 64  # M
    pilot_len: int = 40  # L_p
    data_len: int = 100  # L_d
    activity_prob: float = 0.05  # epsilon
    snr_db: float = 10.0
    path_loss: Optional[List[float]] = None  # beta_n, None means all ones
    codeword_len: int = 5  # J
    codebook_size: int = 64  # D
    signal_prior: str = "codebook"  # gaussian / codebook / discrete
    constellation: Optional[str] = None  # qpsk / 8psk / 16qam, for discrete
    alphabet: Optional[List[List[float]]] = None  # [[re, im], ...], for discrete
    alphabet_weights: Optional[List[float]] = None
    noise_var: Optional[float] = None  # explicit sigma^2, overrides snr_db
    seed: int = 0

    def __post_init__(self):
        for name in ("n_devices", "n_antennas", "pilot_len", "data_len", "codeword_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ValueError(f"codebook_size must be >= 2, got {self.codebook_size}")
        if not 0 < self.activity_prob < 1:
            raise ValueError(f"activity_prob must lie in (0, 1), got {self.activity_prob}")
        if self.signal_prior not in SIGNAL_PRIORS:
            raise ValueError(f"signal_prior must be one of {SIGNAL_PRIORS}, got {self.signal_prior!r}")
        if self.signal_prior == "codebook" and self.data_len % self.codeword_len != 0:
            raise ValueError(f"data_len={self.data_len} is not a multiple of codeword_len={self.codeword_len}")
        if self.signal_prior == "discrete" and self.constellation is None and self.alphabet is None:
            raise ValueError("discrete signal_prior needs a constellation name or an explicit alphabet")
        if self.path_loss is not None:
            if len(self.path_loss) != self.n_devices:
                raise ValueError(f"path_loss has {len(self.path_loss)} entries, expected n_devices={self.n_devices}")
            if min(self.path_loss) <= 0:
                raise ValueError("all path_loss entries must be positive")
        if self.noise_var is not None and self.noise_var <= 0:
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def total_len(self) -> int:
        return self.pilot_len + self.data_len

    @property
    def n_blocks(self) -> int:
        """Codewords per device (N_s); one symbol per block for discrete priors."""
        if self.signal_prior == "codebook":
            return self.data_len // self.codeword_len
        return self.data_len

    @property
    def beta(self) -> np.ndarray:
        if self.path_loss is None:
            return np.ones(self.n_devices)
        return np.asarray(self.path_loss, dtype=np.float64)

    @property
    def mean_path_loss(self) -> float:
        return float(np.mean(self.beta))


@dataclass
class DampingConfig:
    initial_step: float = 1.0
    min_step: float = 1.0 / 64
    shrink: float = 0.5
    grow: float = 1.1
    adaptive: bool = True

    def __post_init__(self):
        if not 0 < self.initial_step <= 1:
            raise ValueError(f"initial_step must lie in (0, 1], got {self.initial_step}")
        if not 0 < self.min_step <= self.initial_step:
            raise ValueError(f"min_step must lie in (0, initial_step], got {self.min_step}")
        if not 0 < self.shrink < 1 or self.grow < 1:
            raise ValueError(f"need 0 < shrink < 1 <= grow, got shrink={self.shrink}, grow={self.grow}")


@dataclass
class BigampConfig:
    t_max: int = 200
    kappa: float = 1e-4
    numeric_floor: float = 1e-12
    damping: DampingConfig = field(default_factory=DampingConfig)

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError(f"t_max must be >= 1, got {self.t_max}")
        if not 0 < self.kappa <= 1:
            raise ValueError(f"kappa must lie in (0, 1], got {self.kappa}")
        if self.numeric_floor <= 0:
            raise ValueError(f"numeric_floor must be positive, got {self.numeric_floor}")


@dataclass
class ExperimentSpec:
    system: SystemConfig = field(default_factory=SystemConfig)
    bigamp: BigampConfig = field(default_factory=BigampConfig)
    axes: Dict[str, List[Any]] = field(default_factory=dict)
    n_trials: int = 1
    output: Optional[str] = None
    mode: str = "sweep"
    workers: int = 1
    record_runtime: bool = True
    genie: bool = False

    # Theory settings
    se_t_max: int = 500
    se_tol: float = 1e-6
    ser_rho: float = 0.5

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError(f"n_trials must be >= 1, got {self.n_trials}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        system_fields = {f.name for f in dataclasses.fields(SystemConfig)}
        for name, values in self.axes.items():
            if name not in system_fields or name in ("path_loss", "alphabet", "alphabet_weights", "seed"):
                raise ValueError(f"sweep axis {name!r} is not a sweepable SystemConfig field")
            if len(values) == 0:
                raise ValueError(f"sweep axis {name!r} has no values")

    def sweep_points(self) -> List[Dict[str, Any]]:
        """Cartesian product of the axes, first axis varying slowest."""
        points: List[Dict[str, Any]] = [{}]
        for name, values in self.axes.items():
            points = [{**p, name: v} for p in points for v in values]
        return points

    def system_at(self, point: Dict[str, Any]) -> SystemConfig:
        return dataclasses.replace(self.system, **point)


def load_experiment_spec(path: str, overrides: Optional[List[str]] = None) -> ExperimentSpec:
    """Load a YAML experiment file on top of the structured defaults.

    Unknown keys raise (struct mode); value checks run in the dataclasses.
    """
    schema = OmegaConf.structured(ExperimentSpec)
    cfg = OmegaConf.merge(schema, OmegaConf.load(path))
    if overrides:
        cfg = OmegaConf.merge(cfg, OmegaConf.from_dotlist(overrides))
    spec = OmegaConf.to_object(cfg)
    logging.info(f"loaded {path}: mode={spec.mode}, axes={list(spec.axes)}, n_trials={spec.n_trials}")
    return spec
