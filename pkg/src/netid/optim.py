"""Shared quasi-Newton driver for the module-parameter and prediction-error
fits.  Non-finite objective values (unstable denominators blowing up the
impulse response) are mapped to a large sentinel so the line search backs
off; if descent fails, the search restarts from deterministic random
perturbations before giving up."""

from __future__ import annotations

import numpy as np
import scipy.optimize

_BIG = 1e50


class OptimizationError(RuntimeError):
    """No finite descent point found, even after restarts."""


def _safe(fun_grad):
    def wrapped(x):
        v, g = fun_grad(x)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return _BIG, np.zeros_like(x)
        return float(v), np.asarray(g, dtype=float)

    return wrapped


def minimize_smooth(
    fun_grad,
    x0: np.ndarray,
    restarts: int = 5,
    perturb: float = 0.3,
    seed: int = 0,
    maxiter: int = 500,
    callback=None,
):
    """Minimize a smooth objective with analytic gradient by L-BFGS-B.

    Returns ``(x, f, nit, success)``.  The result never lies above the
    starting value: if every descent attempt fails, the start is returned
    with ``success=False``.  ``fun_grad`` maps x -> (value, gradient).
    """
    x0 = np.asarray(x0, dtype=float)
    safe = _safe(fun_grad)
    f0, _ = safe(x0)

    best_x, best_f, best_nit, best_ok = x0, f0, 0, False
    rng = np.random.default_rng(seed)
    start = x0
    for attempt in range(restarts + 1):
        fs, _ = safe(start)
        if fs < _BIG:
            res = scipy.optimize.minimize(
                safe,
                start,
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": maxiter},
                callback=callback,
            )
            if np.all(np.isfinite(res.x)) and res.fun < best_f:
                best_x, best_f, best_nit = res.x, float(res.fun), int(res.nit)
                best_ok = bool(res.success) or res.fun < f0
            if best_ok and attempt == 0:
                break
        start = x0 + perturb * (1.0 + np.abs(x0)) * rng.standard_normal(x0.size)
    if best_f >= _BIG:
        raise OptimizationError("objective is non-finite at every attempted start")
    return best_x, best_f, best_nit, best_ok
