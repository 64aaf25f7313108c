import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import joblib
import numpy as np
import pandas as pd
import scipy.linalg
from threadpoolctl import threadpool_limits
from tqdm import tqdm

from grantfree.bigamp import detect_activity, run_bigamp_on_scenario
from grantfree.config import BigampConfig, ExperimentSpec, SystemConfig
from grantfree.metrics import (
    TrialRecord,
    ce_mse_empirical,
    correct_set,
    dad_error_rate,
    decode_blocks,
    residual_statistics,
    ser,
)
from grantfree.model import Scenario, generate_scenario, make_alphabet
from grantfree.theory import SeParams, ce_mse_limit, convergence_condition, dad_error_prob, run_se, ser_bound
from grantfree.utils import derive_seed, make_rng


TRIAL_COLUMNS = [
    "trial", "seed", "converged", "iterations", "runtime_ms",
    "dad_error", "n_false_alarm", "n_miss", "ce_mse", "ser",
]
THEORY_COLUMNS = ["theory_dad_error", "theory_mse_limit", "theory_ser_bound", "theory_tau_star"]
GENIE_COLUMNS = ["genie_ce_mse", "genie_ser"]
DIAGNOSTIC_COLUMNS = ["final_v_a", "ser_bound_at_v_a", "residual_var", "residual_tau", "residual_offdiag_ratio"]
SE_TRACE_COLUMNS = [
    "t", "v_p", "v_r", "v_q", "tau", "fixed_point", "tau_star", "v_r_star", "v_q_star",
    "c1", "c2", "L_ok", "M_ok", "dad_error_prob", "ce_mse_limit", "ser_bound",
]
INT_COLUMNS = {"trial", "seed", "iterations", "n_false_alarm", "n_miss", "t"}
BOOL_COLUMNS = {"converged", "fixed_point", "L_ok", "M_ok"}

CSV_KWARGS = dict(index=False, float_format="%.17g", na_rep="NA", lineterminator="\n", encoding="utf-8")
TASKS_PER_CHUNK = 32


@dataclass
class TheoryPoint:
    tau_star: float
    v_r_star: float
    v_q_star: float
    fixed_point: bool
    c1: float
    c2: float
    L_ok: bool
    M_ok: bool
    dad_error: float
    mse_limit: float
    ser_bound: Optional[float]
    trace: list = field(default_factory=list)

    def columns(self) -> Dict[str, Optional[float]]:
        return {
            "theory_dad_error": self.dad_error,
            "theory_mse_limit": self.mse_limit,
            "theory_ser_bound": self.ser_bound,
            "theory_tau_star": self.tau_star,
        }


def codebook_shape(cfg: SystemConfig) -> Optional[Tuple[int, int]]:
    """(J, D) used for decoding, or None when there is nothing to decode."""
    if cfg.signal_prior == "codebook":
        return cfg.codeword_len, cfg.codebook_size
    if cfg.signal_prior == "discrete":
        return 1, len(make_alphabet(cfg)[0])
    return None


def theory_point(cfg: SystemConfig, t_max: int = 500, tol: float = 1e-6, rho: float = 0.5) -> TheoryPoint:
    params = SeParams.from_config(cfg)
    trace = run_se(params, t_max=t_max, tol=tol)
    fin = trace.final
    check = convergence_condition(params, fin.v_r, fin.v_q)
    shape = codebook_shape(cfg)
    bound = None
    if shape is not None:
        v_a = fin.v_q / (1 + params.L * fin.v_q)
        bound = ser_bound(rho, shape[0], shape[1], params.L, v_a)
    return TheoryPoint(
        tau_star=fin.tau,
        v_r_star=fin.v_r,
        v_q_star=fin.v_q,
        fixed_point=trace.fixed_point,
        c1=check.c1,
        c2=check.c2,
        L_ok=check.L_ok,
        M_ok=check.M_ok,
        dad_error=dad_error_prob(params.M, fin.v_r, params.beta_bar, cfg.activity_prob),
        mse_limit=ce_mse_limit(params.beta_bar, fin.v_r),
        ser_bound=bound,
        trace=trace.records,
    )


def genie_mmse_baseline(scenario: Scenario, beta: np.ndarray, seed: int = 0) -> TrialRecord:
    """Support-aware reference: LMMSE channels given the true support and A,
    then per-row LMMSE symbols given the true channels.

    extras["genie_error_var"] holds the analytic per-antenna error variance
    averaged over the active devices.
    """
    S = np.flatnonzero(scenario.alpha)
    if len(S) == 0:
        raise ValueError("genie baseline needs at least one active device")
    sigma2 = scenario.sigma2
    A_S = scenario.A[:, S]  # (L, K)
    L = A_S.shape[0]

    # Sigma = (D^-1 + A_S^H A_S / sigma2)^-1, X_S = Sigma A_S^H Y / sigma2
    precision = np.diag(1 / beta[S]) + A_S.conj().T @ A_S / sigma2  # (K, K)
    chol = scipy.linalg.cho_factor(precision)
    X_S = scipy.linalg.cho_solve(chol, A_S.conj().T @ scenario.Y / sigma2)  # (K, M)
    error_var = np.real(np.diag(scipy.linalg.cho_solve(chol, np.eye(len(S)))))

    X_hat = np.zeros_like(scenario.X)
    X_hat[S] = X_S
    ce_mse = ce_mse_empirical(scenario.X, X_hat, S)

    symbol_error = None
    if scenario.codebook is not None:
        L_p = scenario.pilot_len
        H_S = scenario.X[S]  # (K, M)
        gram = H_S.conj() @ H_S.T + L * sigma2 * np.eye(len(S))  # (K, K)
        A_data = np.linalg.solve(gram, H_S.conj() @ scenario.Y[L_p:].T).T  # (L_d, K)
        decoded = decode_blocks(A_data, scenario.codebook)  # (K, n_blocks)
        symbol_error = float(np.mean(decoded != scenario.symbol_idx[S]))

    record = TrialRecord(
        dad_error=0.0, n_false_alarm=0, n_miss=0, ce_mse=ce_mse, ser=symbol_error,
        iterations=0, converged=True, seed=seed,
    )
    record.extras["genie_error_var"] = float(np.mean(error_var))
    return record


def run_trial(
    cfg: SystemConfig,
    bigamp_cfg: BigampConfig,
    trial_index: int,
    point: Sequence[Any] = (),
    record_runtime: bool = True,
    genie: bool = False,
    diagnostics: bool = False,
    rho: float = 0.5,
) -> TrialRecord:
    seed = derive_seed(cfg.seed, point, trial_index)
    rng = make_rng(seed)
    scenario = generate_scenario(cfg, rng)
    result = run_bigamp_on_scenario(scenario, cfg, bigamp_cfg)

    alpha_hat = detect_activity(result.phi, cfg.activity_prob)
    rate, n_fa, n_miss = dad_error_rate(scenario.alpha, alpha_hat)
    correct = correct_set(scenario.alpha, alpha_hat)
    symbol_error = None
    if scenario.codebook is not None:
        symbol_error = ser(scenario.symbol_idx, result.A_hat[cfg.pilot_len:], scenario.codebook, correct)

    record = TrialRecord(
        dad_error=rate,
        n_false_alarm=n_fa,
        n_miss=n_miss,
        ce_mse=ce_mse_empirical(scenario.X, result.X_hat, correct),
        ser=symbol_error,
        iterations=result.iterations,
        converged=result.converged,
        seed=seed,
        runtime_ms=result.runtime_ms if record_runtime else None,
    )

    if genie:
        ref = genie_mmse_baseline(scenario, cfg.beta, seed) if scenario.n_active > 0 else None
        record.extras["genie_ce_mse"] = None if ref is None else ref.ce_mse
        record.extras["genie_ser"] = None if ref is None else ref.ser
    if diagnostics:
        stats = residual_statistics(scenario.Y, result.P_hat)
        shape = codebook_shape(cfg)
        v_a = result.mean_data_var
        record.extras["final_v_a"] = v_a
        record.extras["ser_bound_at_v_a"] = (
            ser_bound(rho, shape[0], shape[1], cfg.total_len, v_a) if shape is not None and v_a > 0 else None
        )
        record.extras["residual_var"] = stats.variance
        record.extras["residual_tau"] = float(np.mean(result.v_p)) + scenario.sigma2
        record.extras["residual_offdiag_ratio"] = stats.offdiag_ratio
    return record


def _trial_worker(cfg, bigamp_cfg, trial_index, point, record_runtime, genie, diagnostics, rho) -> TrialRecord:
    # Single-threaded BLAS so results do not depend on the worker layout.
    with threadpool_limits(limits=1):
        return run_trial(cfg, bigamp_cfg, trial_index, point, record_runtime, genie, diagnostics, rho)


def result_columns(spec: ExperimentSpec, compare: bool = False) -> List[str]:
    columns = list(spec.axes) + TRIAL_COLUMNS + THEORY_COLUMNS
    if spec.genie or compare:
        columns += GENIE_COLUMNS
    if compare:
        columns += DIAGNOSTIC_COLUMNS
    return columns


def _frame(rows: List[Dict[str, Any]], columns: List[str], axis_names: Sequence[str] = ()) -> pd.DataFrame:
    """Fixed dtypes per column so every chunk formats identically."""
    df = pd.DataFrame(rows, columns=columns)
    for col in columns:
        if col in axis_names:
            continue
        if col in INT_COLUMNS:
            df[col] = df[col].astype(np.uint64 if col == "seed" else np.int64)
        elif col in BOOL_COLUMNS:
            df[col] = df[col].astype(bool)
        else:
            df[col] = pd.to_numeric(df[col], errors="coerce").astype(np.float64)
    return df


def count_complete_rows(path: str, columns: List[str]) -> int:
    """Drop a trailing partial line and return the number of data rows already written."""
    with open(path, "rb") as f:
        content = f.read()
    cut = content.rfind(b"\n") + 1
    if cut != len(content):
        logging.warning(f"{path}: dropping {len(content) - cut} bytes of a partial row")
        with open(path, "r+b") as f:
            f.truncate(cut)
        content = content[:cut]
    lines = content.split(b"\n")[:-1]
    if not lines:
        return 0
    header = lines[0].decode("utf-8").split(",")
    if header != columns:
        raise ValueError(f"{path}: existing header {header} does not match {columns}")
    return len(lines) - 1


def run_sweep(
    spec: ExperimentSpec,
    output: Optional[str] = None,
    workers: Optional[int] = None,
    resume: bool = False,
    compare: bool = False,
) -> List[Dict[str, Any]]:
    """Run the Cartesian product of the axes times n_trials, in canonical order.

    Rows are appended to `output` chunk by chunk, so an interrupted run keeps
    every finished chunk and `resume` continues after the last complete row.
    """
    output = output or spec.output
    workers = workers or spec.workers
    axis_names = list(spec.axes)
    columns = result_columns(spec, compare)
    points = spec.sweep_points()

    theory = []
    for point in points:
        cfg = spec.system_at(point)
        theory.append(theory_point(cfg, spec.se_t_max, spec.se_tol, spec.ser_rho).columns())

    tasks = [(i, trial) for i in range(len(points)) for trial in range(spec.n_trials)]
    done = 0
    if output is not None and resume and os.path.exists(output):
        done = count_complete_rows(output, columns)
        logging.info(f"resuming {output}: {done}/{len(tasks)} rows already written")
    elif output is not None:
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        _frame([], columns, axis_names).to_csv(output, mode="w", **CSV_KWARGS)

    genie = spec.genie or compare
    rows: List[Dict[str, Any]] = []
    chunks = [tasks[i:i + TASKS_PER_CHUNK] for i in range(done, len(tasks), TASKS_PER_CHUNK)]
    logging.info(f"{len(points)} points x {spec.n_trials} trials, {len(tasks) - done} to run on {workers} workers")
    with joblib.Parallel(n_jobs=workers) as parallel:
        for chunk in tqdm(chunks, desc="sweep", disable=len(chunks) <= 1):
            records = parallel(
                joblib.delayed(_trial_worker)(
                    spec.system_at(points[i]), spec.bigamp, trial, tuple(points[i].values()),
                    spec.record_runtime, genie, compare, spec.ser_rho,
                )
                for i, trial in chunk
            )
            chunk_rows = []
            for (i, trial), record in zip(chunk, records):
                row = {**points[i], "trial": trial, **record.to_dict(), **theory[i], **record.extras}
                chunk_rows.append({col: row.get(col) for col in columns})
            if output is not None:
                _frame(chunk_rows, columns, axis_names).to_csv(output, mode="a", header=False, **CSV_KWARGS)
            rows.extend(chunk_rows)
    return rows


def theory_command(spec: ExperimentSpec, output: Optional[str] = None) -> pd.DataFrame:
    """One row per (sweep point, SE iteration) with the point's fixed point and predictors."""
    output = output or spec.output
    axis_names = list(spec.axes)
    rows = []
    for point in spec.sweep_points():
        cfg = spec.system_at(point)
        tp = theory_point(cfg, spec.se_t_max, spec.se_tol, spec.ser_rho)
        summary = {
            "fixed_point": tp.fixed_point, "tau_star": tp.tau_star, "v_r_star": tp.v_r_star,
            "v_q_star": tp.v_q_star, "c1": tp.c1, "c2": tp.c2, "L_ok": tp.L_ok, "M_ok": tp.M_ok,
            "dad_error_prob": tp.dad_error, "ce_mse_limit": tp.mse_limit, "ser_bound": tp.ser_bound,
        }
        for rec in tp.trace:
            rows.append({**point, "t": rec.t, "v_p": rec.v_p, "v_r": rec.v_r, "v_q": rec.v_q, "tau": rec.tau, **summary})
        logging.info(f"{point}: tau*={tp.tau_star:.6g}, fixed_point={tp.fixed_point}, L_ok={tp.L_ok}, M_ok={tp.M_ok}")

    df = _frame(rows, axis_names + SE_TRACE_COLUMNS, axis_names)
    if output is not None:
        os.makedirs(os.path.dirname(os.path.abspath(output)), exist_ok=True)
        df.to_csv(output, **CSV_KWARGS)
    return df


def summarize(rows: List[Dict[str, Any]], axis_names: Sequence[str]) -> pd.DataFrame:
    """Per-point means of the trial metrics."""
    df = pd.DataFrame(rows)
    metrics = [c for c in ("dad_error", "ce_mse", "ser", "iterations", "genie_ce_mse", "genie_ser") if c in df]
    metrics.append("converged")
    df[metrics] = df[metrics].apply(pd.to_numeric, errors="coerce").astype(np.float64)
    if axis_names:
        return df.groupby(list(axis_names), sort=False)[metrics].mean().reset_index()
    return df[metrics].mean().to_frame().T
