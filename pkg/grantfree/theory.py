import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.special import gammainc, gammaincc

from grantfree.config import SystemConfig
from grantfree.denoise import denoise_x_bg
from grantfree.model import sigma2_from_snr
from grantfree.utils import complex_normal


@dataclass
class SeParams:
    K_eff: float  # eps * N
    L: int
    M: int
    beta_bar: float
    sigma2: float

    def __post_init__(self):
        if self.K_eff < 0 or self.L < 1 or self.M < 1 or self.beta_bar <= 0 or self.sigma2 < 0:
            raise ValueError(f"invalid state evolution parameters {self}")

    @classmethod
    def from_config(cls, cfg: SystemConfig) -> "SeParams":
        return cls(
            K_eff=cfg.activity_prob * cfg.n_devices,
            L=cfg.total_len,
            M=cfg.n_antennas,
            beta_bar=cfg.mean_path_loss,
            sigma2=sigma2_from_snr(cfg),
        )


@dataclass
class SeRecord:
    t: int
    v_p: float
    v_r: float
    v_q: float
    tau: float


@dataclass
class SeTrace:
    records: List[SeRecord] = field(default_factory=list)
    fixed_point: bool = False
    c1: float = float("nan")
    c2: float = float("nan")

    @property
    def final(self) -> SeRecord:
        return self.records[-1]

    @property
    def tau(self) -> np.ndarray:
        return np.array([r.tau for r in self.records])


@dataclass
class ConvergenceCheck:
    c1: float
    c2: float
    L_ok: bool
    M_ok: bool


def se_step(v_r: float, v_q: float, params: SeParams) -> Tuple[float, float, float]:
    """
    Return:
        v_p, v_r, v_q of the next iteration
    """
    if v_r < 0 or v_q < 0:
        raise ValueError(f"state evolution variances must be nonnegative, got v_r={v_r}, v_q={v_q}")
    K, L, b = params.K_eff, params.L, params.beta_bar
    x_err = b * v_r / (b + v_r)
    a_err = v_q / (1 + L * v_q)
    v_p = (K / L) * x_err + K * a_err + K * x_err * a_err
    v_r_next = params.sigma2 + v_p
    return v_p, v_r_next, v_r_next / params.M


def initial_state(params: SeParams) -> Tuple[float, float]:
    """Worst-case start: the whole prior channel power reaches each pseudo-observation."""
    v_r = params.sigma2 + params.K_eff * params.beta_bar
    return v_r, v_r / params.M


def run_se(
    params: SeParams,
    init: Optional[Tuple[float, float]] = None,
    t_max: int = 500,
    tol: float = 1e-6,
) -> SeTrace:
    v_r, v_q = initial_state(params) if init is None else init
    if v_r < 0 or v_q < 0:
        raise ValueError(f"initial variances must be nonnegative, got {init}")
    trace = SeTrace()
    trace.records.append(SeRecord(0, v_r - params.sigma2, v_r, v_q, v_r))

    for t in range(1, t_max + 1):
        v_p, v_r, v_q = se_step(v_r, v_q, params)
        tau = v_p + params.sigma2
        prev_tau = trace.records[-1].tau
        trace.records.append(SeRecord(t, v_p, v_r, v_q, tau))
        if abs(tau - prev_tau) < tol:
            trace.fixed_point = True
            break

    check = convergence_condition(params, trace.final.v_r, trace.final.v_q)
    trace.c1, trace.c2 = check.c1, check.c2
    logging.debug(
        f"SE K={params.K_eff:g} L={params.L} M={params.M}: tau*={trace.final.tau:.6g} after "
        f"{trace.final.t} steps, fixed_point={trace.fixed_point}"
    )
    return trace


def convergence_condition(params: SeParams, v_r: float, v_q: float) -> ConvergenceCheck:
    """Sufficient condition L > c1 K and M > c2 K for the recursion to settle.

    c1 and c2 are reported as computed; the flags use them clamped to
    [1/4, 2], the range they occupy in the small-error regime.
    """
    b, L, K = params.beta_bar, params.L, params.K_eff
    c1 = b**2 / (b + v_r) ** 2 * (1 + L * v_q / (1 + L * v_q))
    c2 = 1 / (1 + L * v_q) ** 2 * (1 + b * v_r / (b + v_r))
    if v_r <= b <= 1 and L * v_q < 1:
        assert 0.25 <= c1 <= 2 and 0.25 <= c2 <= 2, f"{c1=}, {c2=} outside [1/4, 2] for {v_r=}, {v_q=}"
    c1_eff = float(np.clip(c1, 0.25, 2))
    c2_eff = float(np.clip(c2, 0.25, 2))
    return ConvergenceCheck(float(c1), float(c2), bool(L > c1_eff * K), bool(params.M > c2_eff * K))


def _check_gamma_args(a: float, x: float):
    if a <= 0 or x < 0:
        raise ValueError(f"need a > 0 and x >= 0, got {a=}, {x=}")


def regularized_gamma_lower(a: float, x: float) -> float:
    """P(a, x) = gamma(a, x) / Gamma(a)."""
    _check_gamma_args(a, x)
    return float(gammainc(a, x))


def regularized_gamma_upper(a: float, x: float) -> float:
    """Q(a, x) = 1 - P(a, x), computed directly so small tails keep their digits."""
    _check_gamma_args(a, x)
    return float(gammaincc(a, x))


def dad_error_prob(M: int, v_r: float, beta: float, eps: float) -> float:
    """Activity detection error probability of one device.

    ||r_n||^2 scaled by its variance is chi-square with 2M degrees of freedom
    under both hypotheses, so both error events are incomplete gamma values.
    """
    if M < 1 or v_r <= 0 or beta <= 0 or not 0 < eps < 1:
        raise ValueError(f"need M >= 1, v_r > 0, beta > 0, eps in (0, 1); got {M=}, {v_r=}, {beta=}, {eps=}")
    log_ratio = np.log((beta + v_r) / v_r)
    b = (beta + v_r) / beta * log_ratio
    c = v_r / beta * log_ratio
    false_alarm = regularized_gamma_upper(M, M * b)
    miss = regularized_gamma_lower(M, M * c)
    return float((1 - eps) * false_alarm + eps * miss)


def ce_mse_limit(beta: float, v_r: float) -> float:
    if beta <= 0 or v_r < 0:
        raise ValueError(f"need beta > 0 and v_r >= 0, got {beta=}, {v_r=}")
    if np.isinf(v_r):
        return float(beta)
    return float(beta * v_r / (beta + v_r))


def ce_mse_finite_with_error(
    beta: float,
    v_r: float,
    M: int,
    eps: float,
    n_samples: int,
    rng: np.random.Generator,
    force_phi_one: bool = False,
) -> Tuple[float, float]:
    """Monte Carlo channel estimation MSE of an active device seen through CN(0, v_r).

    Return:
        mse: float, per-antenna mean squared error
        stderr: float, standard error of the estimate
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if v_r == 0:
        return 0.0, 0.0
    h = complex_normal(rng, (n_samples, M), beta)  # (n, M)
    r = h + complex_normal(rng, (n_samples, M), v_r)
    if force_phi_one:
        x_hat = beta / (beta + v_r) * r
    else:
        x_hat = denoise_x_bg(r, v_r, beta, eps)[0].mean
    err = np.sum(np.abs(x_hat - h) ** 2, axis=1) / M  # (n, )
    stderr = float(np.std(err, ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else float("nan")
    return float(np.mean(err)), stderr


def ce_mse_finite(beta, v_r, M, eps, n_samples, rng, force_phi_one: bool = False) -> float:
    return ce_mse_finite_with_error(beta, v_r, M, eps, n_samples, rng, force_phi_one)[0]


def ser_bound(rho: float, J: int, D: int, L: int, v_a: float) -> float:
    """Union bound on the codeword error rate tightened by the rho exponent."""
    if not 0 < rho < 1 or J < 1 or D < 2 or L < 1:
        raise ValueError(f"invalid bound parameters {rho=}, {J=}, {D=}, {L=}")
    if not v_a > 0:
        raise ValueError(f"v_a must be positive, got {v_a}")
    exponent = -rho * np.log(D - 1) - J * rho * np.log1p(1 / (L * v_a * (1 + rho)))
    return float(min(1.0, np.exp(exponent)))
