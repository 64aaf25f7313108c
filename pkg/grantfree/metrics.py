from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Tuple

import numpy as np


@dataclass
class TrialRecord:
    dad_error: float
    n_false_alarm: int
    n_miss: int
    ce_mse: Optional[float]
    ser: Optional[float]
    iterations: int
    converged: bool
    seed: int
    runtime_ms: Optional[float] = None
    # Optional per-trial columns (genie reference, residual diagnostics)
    extras: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "extras"}


@dataclass
class ResidualStatistics:
    variance: float  # mean per-entry |y - p|^2
    offdiag_ratio: float  # mean |off-diagonal| / mean diagonal of the M x M covariance


def dad_error_rate(alpha: np.ndarray, alpha_hat: np.ndarray) -> Tuple[float, int, int]:
    """
    Return:
        rate: float, Hamming distance / N
        n_false_alarm: int
        n_miss: int
    """
    alpha = np.asarray(alpha).astype(bool)
    alpha_hat = np.asarray(alpha_hat).astype(bool)
    if alpha.shape != alpha_hat.shape:
        raise ValueError(f"length mismatch: {alpha.shape} vs {alpha_hat.shape}")
    n_false_alarm = int(np.sum(~alpha & alpha_hat))
    n_miss = int(np.sum(alpha & ~alpha_hat))
    return (n_false_alarm + n_miss) / len(alpha), n_false_alarm, n_miss


def correct_set(alpha: np.ndarray, alpha_hat: np.ndarray) -> np.ndarray:
    """Indices of devices that are active and detected."""
    return np.flatnonzero(np.asarray(alpha).astype(bool) & np.asarray(alpha_hat).astype(bool))


def ce_mse_empirical(H_true: np.ndarray, H_hat: np.ndarray, correct: np.ndarray) -> Optional[float]:
    """Per-antenna MSE ||h_hat - h||^2 / M averaged over the correctly detected devices."""
    if len(correct) == 0:
        return None
    M = H_true.shape[1]
    err = np.sum(np.abs(H_hat[correct] - H_true[correct]) ** 2, axis=1) / M
    return float(np.mean(err))


def nearest_codeword(d_hat: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Euclidean-nearest codeword index; argmin keeps the lowest index on ties.

    Args:
        d_hat: (..., J)
        codebook: (D, J)
    Return:
        idx: (..., )
    """
    codebook = np.asarray(codebook)
    if codebook.shape[0] == 0:
        raise ValueError("codebook is empty")
    dist = np.sum(np.abs(np.asarray(d_hat)[..., None, :] - codebook) ** 2, axis=-1)  # (..., D)
    return np.argmin(dist, axis=-1)


def decode_blocks(symbols: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """
    Args:
        symbols: (L_d, N) estimated data rows
        codebook: (D, J)
    Return:
        idx: (N, L_d // J)
    """
    L_d, N = symbols.shape
    J = codebook.shape[1]
    assert L_d % J == 0, f"{L_d=} is not a multiple of {J=}"
    blocks = symbols.T.reshape(N, L_d // J, J)
    return nearest_codeword(blocks, codebook)


def ser(true_idx: np.ndarray, symbols_hat: np.ndarray, codebook: np.ndarray, correct: np.ndarray) -> Optional[float]:
    """Fraction of wrongly decoded (device, block) pairs over the correctly detected devices.

    Args:
        true_idx: (N, n_blocks) transmitted codeword indices
        symbols_hat: (L_d, N) estimated data rows
        codebook: (D, J)
    """
    if len(correct) == 0:
        return None
    decoded = decode_blocks(symbols_hat[:, correct], codebook)  # (K', n_blocks)
    return float(np.mean(true_idx[correct] != decoded))


def residual_statistics(Y: np.ndarray, P_hat: np.ndarray) -> ResidualStatistics:
    E = Y - P_hat  # (L, M)
    L, M = E.shape
    cov = E.conj().T @ E / L  # (M, M)
    diag = np.real(np.diag(cov))
    if M > 1:
        off = np.abs(cov[~np.eye(M, dtype=bool)])
        ratio = float(np.mean(off) / np.mean(diag))
    else:
        ratio = 0.0
    return ResidualStatistics(float(np.mean(np.abs(E) ** 2)), ratio)
