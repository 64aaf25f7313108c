import hashlib
import importlib
import logging
from typing import Any, Iterable, Optional

import numpy as np

NUMERIC_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    """A variance handed to an estimator is below the numeric floor."""


class DivergenceError(RuntimeError):
    """The iteration produced non-finite values."""


def set_logging_format(level=logging.INFO):
    importlib.reload(logging)
    FORMAT = '[%(funcName)s()] %(message)s'
    logging.basicConfig(level=level, format=FORMAT)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def stable_point_hash(point: Iterable[Any]) -> int:
    """64-bit hash of sweep-point values, stable across processes and runs."""
    text = "|".join(f"{v!r}" for v in point)
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(base_seed: int, point: Iterable[Any], trial_index: int) -> int:
    ss = np.random.SeedSequence([int(base_seed) & 0xFFFFFFFFFFFFFFFF, stable_point_hash(point), int(trial_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def complex_normal(rng: np.random.Generator, shape, var) -> np.ndarray:
    """CN(0, var): real and imaginary parts independent N(0, var/2).

    `var` may be a scalar or anything broadcastable against `shape`.
    """
    scale = np.sqrt(np.asarray(var, dtype=np.float64) / 2)
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * scale


def check_variance(v, floor: float, name: str):
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < floor):
        raise DegenerateInputError(f"{name} below numeric floor {floor}: min={float(np.min(v))}")
    return v


def check_finite(name: str, *arrays: Optional[np.ndarray]):
    for arr in arrays:
        if arr is not None and not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite values in {name}")
