"""Central finite differences, the reference every analytic gradient is checked against."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import NonFiniteError


def _eval(loss_fn, params) -> float:
    val = float(loss_fn(params))
    if not np.isfinite(val):
        raise NonFiniteError("non-finite loss during finite differencing")
    return val


def fd_gradient(loss_fn: Callable, params, step: float = 1e-5):
    """(f(x + step e_i) - f(x - step e_i)) / (2 step) for every coordinate.

    ``params`` is an array or a mapping of name -> array; ``loss_fn`` takes the
    same structure of plain arrays and returns a float.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, Mapping):
        work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return {k: _fd_one(loss_fn, work, work[k], step) for k in work}
    work = np.array(params, dtype=np.float64)
    return _fd_one(loss_fn, work, work, step)


def _fd_one(loss_fn, work, arr: np.ndarray, step: float) -> np.ndarray:
    out = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = _eval(loss_fn, work)
        flat[i] = orig - step
        lo = _eval(loss_fn, work)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return out


def max_relative_error(analytic, reference, floor: float = 1e-7) -> float:
    """Largest |a - r| / max(|a|, |r|) over coordinates.

    Coordinates where both magnitudes are at most ``floor`` are compared on
    the absolute scale instead: their contribution is |a - r| / floor, so an
    essentially-zero gradient only fails when its gap exceeds the floor times
    the tolerance.
    """
    if isinstance(analytic, Mapping):
        return max((max_relative_error(analytic[k], reference[k], floor) for k in analytic),
                   default=0.0)
    a, r = np.asarray(analytic, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if a.size == 0:
        return 0.0
    mag = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
    return float(np.max(np.abs(a - r) / mag))
