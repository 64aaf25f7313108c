import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from grantfree.config import BigampConfig, SystemConfig
from grantfree.denoise import (
    DiscreteSymbolPrior,
    GaussianSymbolPrior,
    denoise_a_pilot,
    denoise_x_bg,
    output_posterior_awgn,
    scaled_residual,
)
from grantfree.model import Scenario, make_alphabet
from grantfree.utils import DivergenceError, check_finite


@dataclass
class Priors:
    beta: np.ndarray  # (N, )
    activity_prob: float
    sigma2: float
    symbol_prior: Union[GaussianSymbolPrior, DiscreteSymbolPrior]

    @classmethod
    def from_config(cls, cfg: SystemConfig, sigma2: float, activity_prob: Optional[float] = None) -> "Priors":
        if cfg.signal_prior == "discrete":
            symbol_prior = DiscreteSymbolPrior(*make_alphabet(cfg))
        else:
            # Gaussian codebook entries are denoised with their CN(0, 1/L) marginal.
            symbol_prior = GaussianSymbolPrior(cfg.total_len)
        eps = cfg.activity_prob if activity_prob is None else activity_prob
        return cls(beta=cfg.beta, activity_prob=float(eps), sigma2=float(sigma2), symbol_prior=symbol_prior)


@dataclass
class BigampState:
    A_hat: np.ndarray  # (L, N)
    v_a: np.ndarray  # (L, N), zero on pilot rows
    X_hat: np.ndarray  # (N, M)
    v_x: np.ndarray  # (N, )
    S_hat: np.ndarray  # (L, M)
    v_s: np.ndarray  # (L, )
    P_bar: np.ndarray  # (L, M)
    v_pbar: np.ndarray  # (L, )
    P_hat: np.ndarray  # (L, M)
    v_p: np.ndarray  # (L, )
    phi: np.ndarray  # (N, )
    v_r: np.ndarray  # (N, )
    v_q: np.ndarray  # (L, N)
    pilot_len: int
    t: int = 0


@dataclass
class ForwardMoments:
    P_bar: np.ndarray  # (L, M)
    v_pbar: np.ndarray  # (L, )
    P_hat: np.ndarray  # (L, M)
    v_p: np.ndarray  # (L, )


@dataclass
class PseudoObservations:
    q_hat: np.ndarray  # (L, N)
    v_q: np.ndarray  # (L, N)
    r_hat: np.ndarray  # (N, M)
    v_r: np.ndarray  # (N, )


@dataclass
class BigampResult:
    X_hat: np.ndarray
    A_hat: np.ndarray
    phi: np.ndarray
    v_r: np.ndarray
    v_q: np.ndarray
    v_a: np.ndarray
    P_hat: np.ndarray
    v_p: np.ndarray
    pilot_len: int
    iterations: int
    converged: bool
    diverged: bool = False
    # cost still rose at the minimum damping step; the last accepted state is returned
    stalled: bool = False
    residual_trace: List[float] = field(default_factory=list)
    n_rejected: int = 0
    step_size: float = 1.0
    # Last stopping-rule evaluation: ||P(t) - P(t-1)||^2 and ||P(t-1)||^2
    last_change: float = float("nan")
    last_reference: float = float("nan")
    runtime_ms: float = float("nan")

    @property
    def mean_data_var(self) -> float:
        """Mean data-symbol variance v^a over all devices."""
        return float(np.mean(self.v_a[self.pilot_len:]))


@dataclass
class DeviceEstimate:
    index: int
    channel: np.ndarray  # (M, )
    symbols: np.ndarray  # (L_d, )


def init_state(Y: np.ndarray, pilots: np.ndarray, priors: Priors) -> BigampState:
    L, M = Y.shape
    L_p, N = pilots.shape
    if L_p >= L:
        raise ValueError(f"pilot rows ({L_p}) must be fewer than observation rows ({L})")
    if priors.beta.shape != (N,):
        raise ValueError(f"path loss has shape {priors.beta.shape}, expected ({N},)")

    A_hat = np.zeros((L, N), dtype=np.complex128)
    v_a = np.ones((L, N))
    pilot = denoise_a_pilot(pilots)
    A_hat[:L_p] = pilot.mean
    v_a[:L_p] = pilot.var

    return BigampState(
        A_hat=A_hat,
        v_a=v_a,
        X_hat=np.zeros((N, M), dtype=np.complex128),
        # prior second moment of x_n, so the first v_p matches the pilot power
        v_x=priors.activity_prob * priors.beta.astype(np.float64),
        S_hat=np.zeros((L, M), dtype=np.complex128),
        v_s=np.zeros(L),
        P_bar=np.zeros((L, M), dtype=np.complex128),
        v_pbar=np.zeros(L),
        P_hat=np.zeros((L, M), dtype=np.complex128),
        v_p=np.zeros(L),
        phi=np.full(N, priors.activity_prob),
        v_r=np.full(N, np.inf),
        v_q=np.full((L, N), np.inf),
        pilot_len=L_p,
    )


def forward_pass(A_hat, v_a, X_hat, v_x, S_prev) -> ForwardMoments:
    """Plug-in product and its Onsager-corrected version."""
    M = X_hat.shape[1]
    x_norm2 = np.sum(np.abs(X_hat) ** 2, axis=1)  # (N, )
    P_bar = A_hat @ X_hat
    v_pbar = np.abs(A_hat) ** 2 @ v_x + v_a @ x_norm2 / M
    P_hat = P_bar - v_pbar[:, None] * S_prev
    v_p = v_pbar + v_a @ v_x
    return ForwardMoments(P_bar, v_pbar, P_hat, v_p)


def backward_pass(A_hat, v_a, X_hat, v_x, S_hat, v_s, floor: float) -> PseudoObservations:
    """Pseudo-observations r_n of the channel rows and q_ln of the symbols."""
    M = X_hat.shape[1]
    x_norm2 = np.sum(np.abs(X_hat) ** 2, axis=1)  # (N, )

    v_r = 1 / np.maximum(np.abs(A_hat).T ** 2 @ v_s, floor)  # (N, )
    r_hat = v_r[:, None] * (A_hat.conj().T @ S_hat) + (1 - v_r * (v_a.T @ v_s))[:, None] * X_hat

    v_q = 1 / np.maximum(v_s[:, None] * x_norm2[None, :], floor)  # (L, N)
    q_hat = v_q * (S_hat @ X_hat.conj().T) + (1 - v_q * M * v_x[None, :] * v_s[:, None]) * A_hat

    check_finite("backward pass", r_hat, v_r, q_hat)
    return PseudoObservations(q_hat, v_q, r_hat, v_r)


def _damp(new, old, step: float):
    if step == 1.0:
        return new
    return step * new + (1 - step) * old


def bigamp_step(state: BigampState, Y: np.ndarray, priors: Priors, cfg: BigampConfig, step: float = 1.0) -> BigampState:
    """One iteration: forward pass, output denoising, backward pass, input denoising.

    Means and variances of x, a and s, and the mean of p_bar, are mixed with
    the previous iterate by `step`. The backward pass reads the mixed x and a
    of the previous step.
    """
    floor = cfg.numeric_floor
    L_p = state.pilot_len

    fwd = forward_pass(state.A_hat, state.v_a, state.X_hat, state.v_x, state.S_hat)
    P_bar = _damp(fwd.P_bar, state.P_bar, step)
    P_hat = P_bar - fwd.v_pbar[:, None] * state.S_hat
    v_p = np.maximum(fwd.v_p, floor)

    z = output_posterior_awgn(Y, P_hat, v_p, priors.sigma2)
    res = scaled_residual(z.mean, P_hat, v_p, z.var, floor)
    S_hat = _damp(res.mean, state.S_hat, step)
    v_s = _damp(np.maximum(res.var, 0.0), state.v_s, step)

    pseudo = backward_pass(state.A_hat, state.v_a, state.X_hat, state.v_x, S_hat, v_s, floor)
    v_r = np.maximum(pseudo.v_r, floor)
    v_q = np.maximum(pseudo.v_q, floor)

    sym = priors.symbol_prior.denoise(pseudo.q_hat[L_p:], v_q[L_p:], floor)
    A_hat = state.A_hat.copy()
    v_a = state.v_a.copy()
    A_hat[L_p:] = _damp(sym.mean, state.A_hat[L_p:], step)
    v_a[L_p:] = _damp(sym.var, state.v_a[L_p:], step)

    x, belief = denoise_x_bg(pseudo.r_hat, v_r, priors.beta, priors.activity_prob, floor)
    X_hat = _damp(x.mean, state.X_hat, step)
    v_x = _damp(x.var, state.v_x, step)
    check_finite("denoised estimates", X_hat, v_x, A_hat, v_a)

    return BigampState(
        A_hat=A_hat,
        v_a=v_a,
        X_hat=X_hat,
        v_x=v_x,
        S_hat=S_hat,
        v_s=v_s,
        P_bar=P_bar,
        v_pbar=fwd.v_pbar,
        P_hat=P_hat,
        v_p=v_p,
        phi=belief.phi,
        v_r=v_r,
        v_q=v_q,
        pilot_len=L_p,
        t=state.t + 1,
    )


def _frob2(Z: np.ndarray) -> float:
    return float(np.sum(np.abs(Z) ** 2))


def run_bigamp(Y: np.ndarray, pilots: np.ndarray, priors: Priors, cfg: BigampConfig) -> BigampResult:
    """Iterate until ||P(t+1) - P(t)||^2 <= kappa ||P(t)||^2 or t_max steps.

    P(t) is the product of the estimates entering step t. With adaptive
    damping a step that raises ||Y - P||^2 is rewound and retried with a
    smaller step; rejected steps count towards t_max. A rejection at the
    minimum step stops the run as stalled.
    """
    t_start = time.perf_counter()
    L, M = Y.shape
    damping = cfg.damping
    state = init_state(Y, pilots, priors)
    step = damping.initial_step

    product = state.A_hat @ state.X_hat
    cost = _frob2(Y - product)
    trace: List[float] = []
    converged, diverged, stalled = False, False, False
    n_rejected = 0
    last_change, last_reference = float("nan"), float("nan")

    iterations = 0
    while iterations < cfg.t_max:
        iterations += 1
        try:
            candidate = bigamp_step(state, Y, priors, cfg, step)
        except DivergenceError as e:
            logging.warning(f"diverged at iteration {iterations}: {e}")
            diverged = True
            break

        new_product = candidate.A_hat @ candidate.X_hat
        new_cost = _frob2(Y - new_product)
        if not np.isfinite(new_cost):
            logging.warning(f"non-finite residual at iteration {iterations}")
            diverged = True
            break

        if damping.adaptive and new_cost > cost:
            n_rejected += 1
            if step <= damping.min_step:
                logging.warning(f"iteration {iterations}: cost {cost:.4e} -> {new_cost:.4e} at minimum step, stopping")
                stalled = True
                break
            step = max(step * damping.shrink, damping.min_step)
            logging.debug(f"iteration {iterations}: cost {cost:.4e} -> {new_cost:.4e}, step shrunk to {step:.4g}")
            continue
        if damping.adaptive:
            step = min(step * damping.grow, 1.0)

        last_change = _frob2(new_product - product)
        last_reference = _frob2(product)
        state, product, cost = candidate, new_product, new_cost
        trace.append(new_cost / (L * M))
        if last_change <= cfg.kappa * last_reference:
            converged = True
            break

    runtime_ms = (time.perf_counter() - t_start) * 1e3
    logging.info(
        f"BiGAMP done: iterations={iterations}, converged={converged}, diverged={diverged}, "
        f"stalled={stalled}, rejected={n_rejected}, residual={trace[-1] if trace else float('nan'):.4e}"
    )
    return BigampResult(
        X_hat=state.X_hat,
        A_hat=state.A_hat,
        phi=state.phi,
        v_r=state.v_r,
        v_q=state.v_q,
        v_a=state.v_a,
        P_hat=state.P_hat,
        v_p=state.v_p,
        pilot_len=state.pilot_len,
        iterations=iterations,
        converged=converged,
        diverged=diverged,
        stalled=stalled,
        residual_trace=trace,
        n_rejected=n_rejected,
        step_size=step,
        last_change=last_change,
        last_reference=last_reference,
        runtime_ms=runtime_ms,
    )


def run_bigamp_on_scenario(scenario: Scenario, cfg: SystemConfig, bigamp_cfg: BigampConfig) -> BigampResult:
    priors = Priors.from_config(cfg, scenario.sigma2)
    return run_bigamp(scenario.Y, scenario.pilots, priors, bigamp_cfg)


def detect_activity(phi: np.ndarray, eps: float) -> np.ndarray:
    """alpha_hat_n = 1 iff phi_n > eps."""
    phi = np.asarray(phi)
    if np.any((phi < 0) | (phi > 1)):
        raise ValueError("beliefs must lie in [0, 1]")
    return (phi > eps).astype(np.int64)


def extract_estimates(result: BigampResult, alpha_hat: np.ndarray) -> List[DeviceEstimate]:
    return [
        DeviceEstimate(int(k), result.X_hat[k], result.A_hat[result.pilot_len:, k])
        for k in np.flatnonzero(alpha_hat)
    ]
