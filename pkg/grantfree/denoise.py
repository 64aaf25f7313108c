"""MMSE estimation functions of the BiGAMP iteration.

All functions are vectorized over leading axes: a "vector" argument has
shape (..., M) and its shared per-entry variance has shape (...).
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from grantfree.utils import NUMERIC_FLOOR, check_variance


@dataclass
class VectorMoments:
    mean: np.ndarray  # (..., M)
    var: np.ndarray  # (...)


@dataclass
class ScalarMoments:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class ActivityBelief:
    phi: np.ndarray
    log_odds: np.ndarray
    psi: np.ndarray


def output_posterior_awgn(y, p_hat, v_p, sigma2: float) -> VectorMoments:
    v_p = np.asarray(v_p, dtype=np.float64)
    if np.any(v_p < 0) or not sigma2 > 0:
        raise ValueError(f"need v_p >= 0 and sigma2 > 0, got min(v_p)={float(np.min(v_p))}, sigma2={sigma2}")
    denom = sigma2 + v_p
    z_hat = (v_p[..., None] * y + sigma2 * p_hat) / denom[..., None]
    v_z = sigma2 * v_p / denom
    return VectorMoments(z_hat, v_z)


def scaled_residual(z_hat, p_hat, v_p, v_z, floor: float = NUMERIC_FLOOR) -> VectorMoments:
    v_p = check_variance(v_p, floor, "v_p")
    s_hat = (z_hat - p_hat) / v_p[..., None]
    v_s = (1 - np.asarray(v_z) / v_p) / v_p
    return VectorMoments(s_hat, v_s)


def denoise_x_bg(r_hat, v_r, beta, eps, floor: float = NUMERIC_FLOOR):
    """Bernoulli-Gaussian row denoiser, x_n ~ (1 - eps) delta_0 + eps CN(0, beta I_M).

    The belief is carried as log-odds so that M * psi can be large.
    `eps` may be 0 or 1 (degenerate priors) for overrides.

    Return:
        moments: VectorMoments, mean (..., M), var (...)
        belief: ActivityBelief
    """
    r_hat = np.asarray(r_hat)
    M = r_hat.shape[-1]
    v_r = check_variance(v_r, floor, "v_r")
    beta = np.asarray(beta, dtype=np.float64)
    if np.any(beta <= 0) or not 0 <= eps <= 1:
        raise ValueError(f"need beta > 0 and eps in [0, 1], got eps={eps}")

    norm2 = np.sum(np.abs(r_hat) ** 2, axis=-1)
    psi = (1 / v_r - 1 / (beta + v_r)) * norm2 / M - np.log1p(beta / v_r)
    with np.errstate(divide="ignore"):
        prior_log_odds = np.log(eps) - np.log1p(-eps)
    log_odds = prior_log_odds + M * psi
    phi = expit(log_odds)
    one_minus_phi = expit(-log_odds)

    shrink = beta / (beta + v_r)
    x_hat = (phi * shrink)[..., None] * r_hat
    v_x = phi * one_minus_phi * shrink**2 * norm2 / M + phi * beta * v_r / (beta + v_r)
    return VectorMoments(x_hat, v_x), ActivityBelief(phi, log_odds, psi)


def denoise_a_gaussian(q_hat, v_q, L: int) -> ScalarMoments:
    v_q = np.asarray(v_q, dtype=np.float64)
    if np.any(v_q < 0):
        raise ValueError("v_q must be nonnegative")
    return ScalarMoments(q_hat / (1 + L * v_q), v_q / (1 + L * v_q))


def denoise_a_pilot(c) -> ScalarMoments:
    c = np.asarray(c)
    return ScalarMoments(c.copy(), np.zeros(c.shape))


def denoise_a_discrete(q_hat, v_q, alphabet, weights, floor: float = NUMERIC_FLOOR) -> ScalarMoments:
    """Posterior moments of a finite-alphabet symbol seen through CN(0, v_q) noise."""
    alphabet = np.asarray(alphabet, dtype=np.complex128)
    weights = np.asarray(weights, dtype=np.float64)
    if alphabet.size == 0 or abs(weights.sum() - 1) > 1e-9:
        raise ValueError("alphabet must be nonempty with weights summing to 1")
    v_q = check_variance(v_q, floor, "v_q")
    q_hat = np.asarray(q_hat)
    v_q = np.broadcast_to(v_q, q_hat.shape)

    with np.errstate(divide="ignore"):
        log_prior = np.log(weights)
    logits = log_prior - np.abs(q_hat[..., None] - alphabet) ** 2 / v_q[..., None]  # (..., D)
    post = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
    a_hat = post @ alphabet
    v_a = np.sum(post * np.abs(alphabet - a_hat[..., None]) ** 2, axis=-1)
    return ScalarMoments(a_hat, v_a)


class GaussianSymbolPrior:
    """CN(0, 1/L) data symbols."""

    def __init__(self, total_len: int):
        self.total_len = total_len

    def denoise(self, q_hat, v_q, floor: float = NUMERIC_FLOOR) -> ScalarMoments:
        return denoise_a_gaussian(q_hat, v_q, self.total_len)


class DiscreteSymbolPrior:
    def __init__(self, alphabet, weights):
        self.alphabet = np.asarray(alphabet, dtype=np.complex128)
        self.weights = np.asarray(weights, dtype=np.float64)

    def denoise(self, q_hat, v_q, floor: float = NUMERIC_FLOOR) -> ScalarMoments:
        return denoise_a_discrete(q_hat, v_q, self.alphabet, self.weights, floor)
