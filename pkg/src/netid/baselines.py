"""Reference estimators and the evaluation metric.

The two-stage method first fits high-order FIR models of all sensitivity
paths by least squares, simulates noise-free module inputs from them, then
fits the module parameters by prediction-error minimization.  SMPE merges
the two stages into one weighted cost over (theta, alpha) and, to make the
comparison with the empirical-Bayes estimators fair, also estimates the
noise variances: the log-determinant of the stacked noise covariance joins
the cost and the variances enter through their logarithms.

The FIT score 1 - ||g0 - g||/||g0|| compares impulse responses; 1 is a
perfect match, 0 is what the zero response scores, negative is worse than
predicting nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .lti import toeplitz
from .network import ModuleProblem
from .optim import minimize_smooth

__all__ = [
    "RankDeficientRegressorError",
    "UndefinedFitError",
    "TwoStageResult",
    "SmpeState",
    "fit_metric",
    "two_stage",
    "smpe",
    "smpe_cost",
]


class RankDeficientRegressorError(RuntimeError):
    """The stage-1 reference regressor is not persistently exciting."""


class UndefinedFitError(ValueError):
    """FIT is undefined for an identically zero true response."""


def fit_metric(g_true: np.ndarray, g_hat: np.ndarray) -> float:
    """1 - ||g_true - g_hat|| / ||g_true||; at most 1, can go negative."""
    g_true = np.asarray(g_true, dtype=float)
    g_hat = np.asarray(g_hat, dtype=float)
    if g_true.shape != g_hat.shape:
        raise ValueError(f"length mismatch: {g_true.shape} vs {g_hat.shape}")
    denom = np.linalg.norm(g_true)
    if denom == 0.0:
        raise UndefinedFitError("true impulse response is identically zero")
    return 1.0 - float(np.linalg.norm(g_true - g_hat)) / float(denom)


def _corr_apply(y: np.ndarray, e: np.ndarray) -> np.ndarray:
    """T_N(y)^T e without forming the Toeplitz matrix."""
    N = y.size
    return scipy.signal.fftconvolve(e[::-1], y)[:N][::-1]


def _predict_output(g_arrays: list[np.ndarray], inputs: np.ndarray) -> np.ndarray:
    N = inputs.shape[0]
    pred = np.zeros(N)
    for u, g in enumerate(g_arrays):
        pred += scipy.signal.fftconvolve(inputs[:, u], g)[:N]
    return pred


@dataclass
class TwoStageResult:
    thetas: list[np.ndarray]
    alpha: np.ndarray               # (p, n*m) FIR sensitivity coefficients
    w_hat: np.ndarray               # (N, p) simulated noise-free inputs
    stage1_residual_vars: np.ndarray
    stage2_residual_var: float


def _fir_then_rational_init(param, w_hats: np.ndarray, w_out: np.ndarray, u: int) -> np.ndarray:
    """Equation-error initialization for one rational module: joint FIR fit
    of all modules, then a small least-squares fit of (b, a) to the FIR tail."""
    N, p = w_hats.shape
    K = min(max(4 * param.n_theta, 16), N // (2 * p))
    cols = []
    for v in range(p):
        for k in range(1, K + 1):
            col = np.zeros(N)
            col[k:] = w_hats[: N - k, v]
            cols.append(col)
    X = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(X, w_out, rcond=None)
    g_fir = coef[u * K : (u + 1) * K]  # estimated response of module u at lags 1..K

    nb, na = param.nb, param.na
    rows = []
    rhs = []
    for t in range(1, K + 1):
        row = np.zeros(nb + na)
        if t <= nb:
            row[t - 1] = 1.0
        for k in range(1, na + 1):
            if t - k >= 1:
                row[nb + k - 1] = -g_fir[t - k - 1]
        rows.append(row)
        rhs.append(g_fir[t - 1])
    theta0, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    if not param.tf(theta0).is_stable():
        theta0[nb:] = 0.0
    return theta0


def two_stage(prob: ModuleProblem, init_thetas: list[np.ndarray] | None = None) -> TwoStageResult:
    """High-order FIR sensitivity fit, then prediction-error module fit."""
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    alpha, _, rank, _ = np.linalg.lstsq(prob.R, prob.w_inputs, rcond=None)
    if rank < nm:
        raise RankDeficientRegressorError(
            f"stage-1 regressor has rank {rank} < {nm}; references are not exciting enough"
        )
    w_hat = prob.R @ alpha  # (N, p)
    resid1 = prob.w_inputs - w_hat
    dof1 = max(N - nm, 1)
    stage1_vars = np.sum(resid1**2, axis=0) / dof1

    n_thetas = [pa.n_theta for pa in prob.params]
    splits = np.cumsum(n_thetas)[:-1]
    if all(getattr(pa, "linear", False) for pa in prob.params):
        cols = []
        for u, pa in enumerate(prob.params):
            T_u = toeplitz(w_hat[:, u], N)
            cols.append(T_u @ pa.basis)
        X = np.hstack(cols)
        x, *_ = np.linalg.lstsq(X, prob.w_out, rcond=None)
        thetas = list(np.split(x, splits))
    else:
        if init_thetas is None:
            init_thetas = [
                _fir_then_rational_init(pa, w_hat, prob.w_out, u)
                if not getattr(pa, "linear", False)
                else np.zeros(pa.n_theta)
                for u, pa in enumerate(prob.params)
            ]

        def fun_grad(x):
            thetas_x = np.split(x, splits)
            g = [prob.params[u].g(thetas_x[u]) for u in range(p)]
            gcat = np.concatenate(g)
            if not np.all(np.isfinite(gcat)):
                return np.inf, np.zeros_like(x)
            e = prob.w_out - _predict_output(g, w_hat)
            grads = []
            for u in range(p):
                c = _corr_apply(w_hat[:, u], e)
                grads.append(-2.0 * (prob.params[u].jacobian(thetas_x[u]).T @ c))
            return float(e @ e), np.concatenate(grads)

        x0 = np.concatenate(init_thetas)
        x, _, _, _ = minimize_smooth(fun_grad, x0)
        thetas = list(np.split(x, splits))

    g = [prob.params[u].g(thetas[u]) for u in range(p)]
    resid2 = prob.w_out - _predict_output(g, w_hat)
    dof2 = max(N - sum(n_thetas), 1)
    stage2_var = float(resid2 @ resid2) / dof2
    return TwoStageResult(
        thetas=thetas,
        alpha=alpha.T.copy(),
        w_hat=w_hat,
        stage1_residual_vars=stage1_vars,
        stage2_residual_var=stage2_var,
    )


@dataclass
class SmpeState:
    """Joint state of the simultaneous prediction-error fit."""

    thetas: list[np.ndarray]
    alpha: np.ndarray            # (p, n*m)
    sigmas: np.ndarray           # per-channel noise variances, inputs then output
    cost_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    converged: bool = False


def smpe_cost(prob: ModuleProblem, thetas, alpha, sigmas) -> float:
    """Weighted prediction-error cost plus the noise log-determinant term."""
    N, p = prob.N, prob.p
    g = [prob.params[u].g(thetas[u]) for u in range(p)]
    inputs_hat = (alpha @ prob.R.T).T  # (N, p)
    cost = 0.0
    for i in range(p):
        e_i = prob.w_inputs[:, i] - inputs_hat[:, i]
        cost += float(e_i @ e_i) / sigmas[i] / N
    e_j = prob.w_out - _predict_output(g, inputs_hat)
    cost += float(e_j @ e_j) / sigmas[p] / N
    cost += float(np.sum(np.log(sigmas)))
    return cost


def smpe(prob: ModuleProblem, init: SmpeState | TwoStageResult | None = None, tol: float = 1e-10) -> SmpeState:
    """Simultaneously minimize all prediction errors over module parameters,
    sensitivity coefficients and (log) noise variances.

    Initialized from the two-stage solution unless given a state; stops when
    the relative change of the module parameters falls below ``tol``.  The
    returned cost never exceeds the initial cost.
    """
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    if init is None:
        init = two_stage(prob)
    if isinstance(init, TwoStageResult):
        sig0 = np.concatenate([init.stage1_residual_vars, [init.stage2_residual_var]])
        init = SmpeState(thetas=init.thetas, alpha=init.alpha, sigmas=np.maximum(sig0, 1e-10))

    n_thetas = [pa.n_theta for pa in prob.params]
    th_dim = sum(n_thetas)
    splits = np.cumsum(n_thetas)[:-1]

    def pack(thetas, alpha, sigmas):
        return np.concatenate([*thetas, alpha.ravel(), np.log(sigmas)])

    def unpack(x):
        thetas = list(np.split(x[:th_dim], splits))
        alpha = x[th_dim : th_dim + p * nm].reshape(p, nm)
        sigmas = np.exp(x[th_dim + p * nm :])
        return thetas, alpha, sigmas

    def fun_grad(x):
        thetas, alpha, sigmas = unpack(x)
        g = [prob.params[u].g(thetas[u]) for u in range(p)]
        if not all(np.all(np.isfinite(gu)) for gu in g):
            return np.inf, np.zeros_like(x)
        inputs_hat = (alpha @ prob.R.T).T
        e_in = prob.w_inputs - inputs_hat          # (N, p)
        e_j = prob.w_out - _predict_output(g, inputs_hat)
        sse_in = np.sum(e_in**2, axis=0)
        sse_j = float(e_j @ e_j)
        cost = float(np.sum(sse_in / sigmas[:p])) / N + sse_j / sigmas[p] / N
        cost += float(np.sum(np.log(sigmas)))

        grad_theta = []
        for u in range(p):
            c = _corr_apply(prob.R @ alpha[u], e_j)
            grad_theta.append(-2.0 / (N * sigmas[p]) * (prob.params[u].jacobian(thetas[u]).T @ c))
        grad_alpha = np.empty((p, nm))
        for u in range(p):
            back = _corr_apply(g[u], e_j)          # G_u^T e_j
            grad_alpha[u] = (
                -2.0 / (N * sigmas[u]) * (prob.R.T @ e_in[:, u])
                - 2.0 / (N * sigmas[p]) * (prob.R.T @ back)
            )
        grad_logsig = np.empty(p + 1)
        grad_logsig[:p] = 1.0 - sse_in / sigmas[:p] / N
        grad_logsig[p] = 1.0 - sse_j / sigmas[p] / N
        return cost, np.concatenate([*grad_theta, grad_alpha.ravel(), grad_logsig])

    x0 = pack(init.thetas, init.alpha, init.sigmas)
    trace: list[float] = []
    prev_theta = np.concatenate(init.thetas)

    def callback(xk):
        nonlocal prev_theta
        v, _ = fun_grad(xk)
        trace.append(v)
        th = xk[:th_dim]
        rel = np.linalg.norm(th - prev_theta) / max(np.linalg.norm(prev_theta), 1e-300)
        prev_theta = th.copy()
        if rel < tol:
            raise StopIteration

    x, f, nit, ok = minimize_smooth(fun_grad, x0, callback=callback, maxiter=2000)
    thetas, alpha, sigmas = unpack(x)
    f0, _ = fun_grad(x0)
    if f > f0:  # descent contract: never return something worse than the init
        thetas, alpha, sigmas = init.thetas, init.alpha, init.sigmas
        f = f0
    return SmpeState(
        thetas=[np.asarray(t) for t in thetas],
        alpha=alpha,
        sigmas=sigmas,
        cost_trace=np.asarray(trace),
        iterations=nit,
        converged=ok,
    )
