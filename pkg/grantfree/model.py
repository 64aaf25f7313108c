import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from grantfree.config import SystemConfig
from grantfree.utils import complex_normal


CONSTELLATIONS = ("qpsk", "8psk", "16qam")


@dataclass
class NoiseModel:
    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")


@dataclass
class Scenario:
    A: np.ndarray  # (L, N) pilots on rows [:L_p], data below
    X: np.ndarray  # (N, M), row n is alpha_n * h_n
    alpha: np.ndarray  # (N, ) int
    W: np.ndarray  # (L, M)
    Y: np.ndarray  # (L, M)
    sigma2: float
    pilot_len: int
    codebook: Optional[np.ndarray] = None  # (D, J); the alphabet as a (D, 1) book for discrete priors
    symbol_idx: Optional[np.ndarray] = None  # (N, n_blocks) index into codebook

    @property
    def pilots(self) -> np.ndarray:
        return self.A[: self.pilot_len]

    @property
    def data(self) -> np.ndarray:
        return self.A[self.pilot_len:]

    @property
    def n_active(self) -> int:
        return int(self.alpha.sum())


def sigma2_from_snr(cfg: SystemConfig) -> float:
    """Noise variance for the configured per-antenna receive SNR.

    SNR = E|z_lm|^2 / sigma^2 with E|z_lm|^2 = eps * N * mean(beta) / L.
    An explicit `noise_var` takes precedence.
    """
    if cfg.noise_var is not None:
        return float(cfg.noise_var)
    signal_power = cfg.activity_prob * cfg.n_devices * cfg.mean_path_loss / cfg.total_len
    return float(signal_power / 10 ** (cfg.snr_db / 10))


def make_constellation(name: str) -> np.ndarray:
    """Unit average power constellation points, in a fixed order."""
    if name == "qpsk":
        points = np.exp(1j * (np.pi / 4 + np.pi / 2 * np.arange(4)))
    elif name == "8psk":
        points = np.exp(2j * np.pi * np.arange(8) / 8)
    elif name == "16qam":
        levels = np.array([-3.0, -1.0, 1.0, 3.0])
        points = (levels[:, None] + 1j * levels[None, :]).reshape(-1) / np.sqrt(10)
    else:
        raise ValueError(f"unknown constellation {name!r}, expected one of {CONSTELLATIONS}")
    return points.astype(np.complex128)


def make_alphabet(cfg: SystemConfig):
    """
    Return:
        alphabet: np.ndarray[complex], (D, ) scaled to average power 1/L
        weights: np.ndarray, (D, ) prior probabilities
    """
    if cfg.alphabet is not None:
        pts = np.asarray(cfg.alphabet, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"alphabet must be a list of [re, im] pairs, got shape {pts.shape}")
        points = pts[:, 0] + 1j * pts[:, 1]
    else:
        points = make_constellation(cfg.constellation)

    if cfg.alphabet_weights is None:
        weights = np.full(len(points), 1.0 / len(points))
    else:
        weights = np.asarray(cfg.alphabet_weights, dtype=np.float64)
        if weights.shape != (len(points),):
            raise ValueError(f"alphabet_weights has shape {weights.shape}, expected ({len(points)},)")
        if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise ValueError("alphabet_weights must be nonnegative and sum to 1")

    power = float(np.sum(weights * np.abs(points) ** 2))
    if power <= 0:
        raise ValueError("alphabet has zero average power")
    return points / np.sqrt(power * cfg.total_len), weights


def generate_codebook(J: int, D: int, L: int, rng: np.random.Generator) -> np.ndarray:
    """
    Return:
        codebook: np.ndarray[complex], (D, J), entries CN(0, 1/L)
    """
    if D < 2 or J < 1:
        raise ValueError(f"need D >= 2 and J >= 1, got D={D}, J={J}")
    codebook = complex_normal(rng, (D, J), 1.0 / L)
    if len(np.unique(codebook, axis=0)) != D:
        raise RuntimeError("generated codebook has duplicate codewords")
    return codebook


def generate_scenario(
    cfg: SystemConfig,
    rng: np.random.Generator,
    activity_prob: Optional[float] = None,
    sigma2: Optional[float] = None,
) -> Scenario:
    """Draw one coherence block Y = A X + W.

    `activity_prob` and `sigma2` override the config values and may be 0.
    Draw order is fixed (activity, channels, pilots, data, noise) so a seed
    pins the whole scenario.
    """
    N, M, L, L_p = cfg.n_devices, cfg.n_antennas, cfg.total_len, cfg.pilot_len
    eps = cfg.activity_prob if activity_prob is None else float(activity_prob)
    if not 0 <= eps <= 1:
        raise ValueError(f"activity_prob override must lie in [0, 1], got {eps}")
    if sigma2 is None:
        sigma2 = sigma2_from_snr(cfg)
    if sigma2 < 0:
        raise ValueError(f"sigma2 must be nonnegative, got {sigma2}")
    beta = cfg.beta

    alpha = (rng.random(N) < eps).astype(np.int64)  # (N, )
    H = complex_normal(rng, (N, M), beta[:, None])  # (N, M)
    X = H * alpha[:, None]

    pilots = complex_normal(rng, (L_p, N), 1.0 / L)  # (L_p, N)

    codebook, symbol_idx = None, None
    if cfg.signal_prior == "codebook":
        codebook = generate_codebook(cfg.codeword_len, cfg.codebook_size, L, rng)  # (D, J)
        symbol_idx = rng.integers(0, cfg.codebook_size, size=(N, cfg.n_blocks))
        # (N, N_s, J) -> (L_d, N)
        data = codebook[symbol_idx].reshape(N, cfg.data_len).T
    elif cfg.signal_prior == "discrete":
        alphabet, weights = make_alphabet(cfg)
        codebook = alphabet[:, None]
        symbol_idx = rng.choice(len(alphabet), size=(N, cfg.data_len), p=weights)
        data = alphabet[symbol_idx].T
    else:
        data = complex_normal(rng, (cfg.data_len, N), 1.0 / L)

    A = np.concatenate([pilots, data], axis=0)  # (L, N)
    W = complex_normal(rng, (L, M), sigma2)
    Y = A @ X + W

    logging.debug(f"scenario: K={int(alpha.sum())}, sigma2={sigma2:.4g}, prior={cfg.signal_prior}")
    return Scenario(
        A=A, X=X, alpha=alpha, W=W, Y=Y, sigma2=float(sigma2), pilot_len=L_p,
        codebook=codebook, symbol_idx=symbol_idx,
    )
