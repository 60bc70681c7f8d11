"""Empirical-Bayes identification of network modules by expectation /
conditional-maximization.

One iteration alternates an exact E-step (posterior moments of the latent
sensitivity paths) with three conditional maximizations: closed-form kernel
hyperparameters per path, a quadratic-in-the-impulse-response module
parameter step, and closed-form noise variances.  Each CM step can only
improve the complete-data objective, so the marginal likelihood criterion
is nonincreasing across sweeps.

The hyperparameter search profiles the scale out of the kernel objective
and scans the decay rate on a dense grid (log-spaced toward both ends of
(0, 1)) refined by golden section; the exact tridiagonal inverse of the
stable spline kernel keeps every grid evaluation O(n).  The incoming
hyperparameters are always kept as fallback candidates so a coarse grid
can never undo a previous improvement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.signal

from .kernel import (
    BETA_MAX,
    BETA_MIN,
    ScaledKernel,
    build_kernel,
    inv_quad_and_logdet,
    ss_logdet,
)
from .lti import RationalTF, toeplitz, toeplitz_gram
from .network import ModuleProblem
from .optim import minimize_smooth
from .posterior import (
    GaussianPosterior,
    HyperParameters,
    build_regressor,
    marginal_objective,
    posterior,
)

__all__ = [
    "LinearParametrization",
    "RationalParametrization",
    "fir_parametrization",
    "Moments",
    "NebEstimate",
    "NebOptions",
    "DegenerateMomentError",
    "RankDeficientUpdateError",
    "estep_moments",
    "q_function",
    "q_decomposition",
    "update_hyperparameters",
    "assemble_quadratic",
    "update_theta",
    "update_noise_variances",
    "initialize",
    "neb_identify",
]


class DegenerateMomentError(RuntimeError):
    """Latent second moment is numerically zero; no hyperparameter update."""


class RankDeficientUpdateError(RuntimeError):
    """The linear module-parameter normal equations are singular."""


# ----------------------------------------------------------------------
# Module parametrizations: theta -> lag-aligned impulse response of length N
# ----------------------------------------------------------------------

class LinearParametrization:
    """g_theta = basis @ theta for a fixed N x n_theta basis."""

    linear = True

    def __init__(self, basis: np.ndarray):
        self.basis = np.asarray(basis, dtype=float)
        if self.basis.ndim != 2:
            raise ValueError("basis must be an N x n_theta matrix")
        self.N, self.n_theta = self.basis.shape

    def g(self, theta: np.ndarray) -> np.ndarray:
        return self.basis @ theta

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        return self.basis


def fir_parametrization(n_theta: int, N: int) -> LinearParametrization:
    """Strictly proper FIR: theta_k is the response at lag k+1."""
    basis = np.zeros((N, n_theta))
    basis[np.arange(1, n_theta + 1), np.arange(n_theta)] = 1.0
    return LinearParametrization(basis)


class RationalParametrization:
    """theta = [b_1..b_nb, a_1..a_na] for the strictly proper module
    (b1 q^-1 + ...)/(1 + a1 q^-1 + ...), mapped to its first N response
    samples; the Jacobian is computed analytically by filtering."""

    linear = False

    def __init__(self, nb: int, na: int, N: int):
        if nb < 1 or na < 0:
            raise ValueError("need nb >= 1 numerator and na >= 0 denominator coefficients")
        self.nb, self.na, self.N = nb, na, N
        self.n_theta = nb + na

    def split(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        return theta[: self.nb], theta[self.nb :]

    def tf(self, theta: np.ndarray) -> RationalTF:
        b, a = self.split(theta)
        return RationalTF(num=tuple(b), den=tuple(a))

    def g(self, theta: np.ndarray) -> np.ndarray:
        b, a = self.split(theta)
        delta = np.zeros(self.N)
        delta[0] = 1.0
        return scipy.signal.lfilter(np.concatenate(([0.0], b)), np.concatenate(([1.0], a)), delta)

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        b, a = self.split(theta)
        den = np.concatenate(([1.0], a))
        delta = np.zeros(self.N)
        delta[0] = 1.0
        h = scipy.signal.lfilter([1.0], den, delta)      # response of 1/A
        u = scipy.signal.lfilter([1.0], den, self.g(theta))  # response of B/A^2
        J = np.zeros((self.N, self.n_theta))
        for k in range(1, self.nb + 1):
            J[k:, k - 1] = h[: self.N - k]
        for k in range(1, self.na + 1):
            J[k:, self.nb + k - 1] = -u[: self.N - k]
        return J


# ----------------------------------------------------------------------
# E-step moments
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Moments:
    """Posterior mean, covariance and second moment of the latent paths."""

    s_hat: np.ndarray
    P_hat: np.ndarray
    S_hat: np.ndarray


def estep_moments(post: GaussianPosterior) -> Moments:
    """Moments feeding the CM steps; the second moment is symmetrized and,
    if roundoff made it indefinite, eigenvalue-clipped at zero."""
    P = 0.5 * (post.cov + post.cov.T)
    s = post.mean
    S = P + np.outer(s, s)
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S + 1e-14 * max(np.trace(S), 1.0) * np.eye(S.shape[0]))
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(S)
        S = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        S = 0.5 * (S + S.T)
    return Moments(s_hat=s, P_hat=P, S_hat=S)


# ----------------------------------------------------------------------
# Complete-data objective (diagnostics and tests)
# ----------------------------------------------------------------------

def gr_stack(g_arrays: list[np.ndarray], R: np.ndarray) -> np.ndarray:
    """[G_1 R ... G_p R]: module responses applied to the reference stack."""
    N = R.shape[0]
    cols = [scipy.signal.fftconvolve(R, g[:, None], axes=0)[:N] for g in g_arrays]
    return np.hstack(cols)


def _path_blocks(S: np.ndarray, p: int, m: int, n: int):
    """Diagonal n x n block of each latent path, in storage order."""
    for k in range(p * m):
        yield S[k * n : (k + 1) * n, k * n : (k + 1) * n]


def q_decomposition(
    hypers: HyperParameters, moments: Moments, prob: ModuleProblem
) -> tuple[float, float]:
    """The two halves of -2Q: the data part (noise variances and module
    parameters) and the prior part (kernel hyperparameters).  Perturbing
    (lambda, beta) leaves the first untouched and vice versa."""
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    g = [prob.params[u].g(hypers.thetas[u]) for u in range(p)]
    W = build_regressor(g, prob.R)
    z = prob.z
    rows = np.repeat(hypers.sigmas, N)
    Wn = W / rows[:, None]
    q0 = (
        N * float(np.sum(np.log(hypers.sigmas)))
        + float(z @ (z / rows))
        - 2.0 * float((z / rows) @ (W @ moments.s_hat))
        + float(np.sum((W.T @ Wn) * moments.S_hat))
    )
    qs = 0.0
    for k, block in enumerate(_path_blocks(moments.S_hat, p, m, n)):
        sk = ScaledKernel(build_kernel(n, hypers.betas[k]), hypers.lambdas[k])
        trace_term, logdet = inv_quad_and_logdet(sk, block)
        qs += logdet + trace_term
    return q0, qs


def q_function(hypers: HyperParameters, moments: Moments, prob: ModuleProblem) -> float:
    """Expected complete-data log-likelihood Q (additive constants dropped)."""
    q0, qs = q_decomposition(hypers, moments, prob)
    return -0.5 * (q0 + qs)


# ----------------------------------------------------------------------
# CM step: kernel hyperparameters
# ----------------------------------------------------------------------

def _beta_grid(size: int = 200) -> np.ndarray:
    half = size // 2
    left = np.geomspace(BETA_MIN, 0.5, half)
    right = 1.0 - np.geomspace(1.0 - BETA_MAX, 0.5, size - half)
    return np.unique(np.concatenate([left, right]))


_BETA_GRID = _beta_grid()


def _grid_q_beta(n: int, betas: np.ndarray, d: np.ndarray, sub: np.ndarray):
    """Vectorized profiled objective log det K + n log tr(K^-1 S) on a grid,
    using the exact tridiagonal inverse bands of the kernel."""
    powers = betas[:, None] ** np.arange(1, n + 1)
    one_m = (1.0 - betas)[:, None]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if n == 1:
            main = 1.0 / powers
        else:
            main = (1.0 + betas)[:, None] / (powers * one_m)
            main[:, 0] = 1.0 / (powers[:, 0] * one_m[:, 0])
            main[:, -1] = 1.0 / (powers[:, -1] * one_m[:, 0])
        traces = main @ d
        if n > 1:
            off = -1.0 / (powers[:, :-1] * one_m)
            traces = traces + 2.0 * (off @ sub)
        logdet = 0.5 * n * (n + 1) * np.log(betas) + (n - 1) * np.log1p(-betas)
        q = logdet + n * np.log(traces)
    q[~np.isfinite(q) | (traces <= 0)] = np.inf
    return q, traces


def _trace_scalar(n: int, beta: float, d: np.ndarray, sub: np.ndarray) -> float:
    """tr(K_beta^-1 S) from the diagonals of S via the exact inverse bands."""
    if n == 1:
        return float(d[0] / beta)
    one_m = 1.0 - beta
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        inv_pow = beta ** -np.arange(1.0, n + 1.0)
        tr = (1.0 + beta) / one_m * float(inv_pow @ d)
        tr -= d[0] / one_m                        # first diagonal entry is 1/(b(1-b))
        tr -= d[-1] * beta * inv_pow[-1] / one_m  # last is 1/(b^n (1-b))
        tr -= 2.0 / one_m * float(sub @ inv_pow[:-1])
    return tr


def _q_beta_scalar(n: int, beta: float, d: np.ndarray, sub: np.ndarray) -> float:
    tr = _trace_scalar(n, beta, d, sub)
    if not np.isfinite(tr) or tr <= 0:
        return np.inf
    q = 0.5 * n * (n + 1) * np.log(beta) + (n - 1) * np.log1p(-beta) + n * np.log(tr)
    return q if np.isfinite(q) else np.inf


def update_hyperparameters(
    S_block: np.ndarray, n: int, candidates: tuple[float, ...] = ()
) -> tuple[float, float]:
    """Closed-form kernel update for one latent path.

    beta minimizes log det K_beta + n log tr(K_beta^-1 S) over the clamped
    grid with golden-section refinement; lambda = tr(K_beta^-1 S) / n.
    Flat objectives (n = 1, or S proportional to a kernel) tie-break to the
    smallest grid beta.  Extra ``candidates`` (e.g. the incoming beta) are
    kept if they score better than the grid optimum.
    """
    S_block = np.asarray(S_block, dtype=float)
    if S_block.shape != (n, n):
        raise ValueError(f"expected {n}x{n} moment block, got {S_block.shape}")
    d = np.diag(S_block).astype(float)
    sub = np.diag(S_block, -1).astype(float) if n > 1 else np.zeros(0)
    if not np.any(d > 0):
        raise DegenerateMomentError("latent second moment is all zero")

    q, _ = _grid_q_beta(n, _BETA_GRID, d, sub)
    qmin = np.min(q)
    if not np.isfinite(qmin):
        raise DegenerateMomentError("kernel objective not finite anywhere on the grid")
    tol = 1e-10 * (1.0 + abs(qmin))
    idx = int(np.argmax(q <= qmin + tol))  # first (smallest-beta) near-minimum
    flat = np.count_nonzero(q <= qmin + tol) > 1
    beta = float(_BETA_GRID[idx])
    best_q = float(q[idx])

    if not flat and 0 < idx < _BETA_GRID.size - 1:
        lo, hi = float(_BETA_GRID[idx - 1]), float(_BETA_GRID[idx + 1])
        invphi = 0.5 * (np.sqrt(5.0) - 1.0)
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        f1 = _q_beta_scalar(n, x1, d, sub)
        f2 = _q_beta_scalar(n, x2, d, sub)
        while hi - lo > 1e-10:
            if f1 < f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - invphi * (hi - lo)
                f1 = _q_beta_scalar(n, x1, d, sub)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + invphi * (hi - lo)
                f2 = _q_beta_scalar(n, x2, d, sub)
            if min(f1, f2) < best_q:
                beta = x1 if f1 < f2 else x2
                best_q = min(f1, f2)

    for c in candidates:
        c = float(np.clip(c, BETA_MIN, BETA_MAX))
        qc = _q_beta_scalar(n, c, d, sub)
        if qc < best_q:
            beta, best_q = c, qc

    lam = _trace_scalar(n, beta, d, sub) / n
    if not np.isfinite(lam) or lam <= 0:
        raise DegenerateMomentError(f"degenerate scale update at beta={beta!r}")
    return lam, beta


# ----------------------------------------------------------------------
# CM step: module parameters
# ----------------------------------------------------------------------

def assemble_quadratic(moments: Moments, prob: ModuleProblem) -> tuple[np.ndarray, np.ndarray]:
    """Quadratic form (A, b) of the module-parameter step.

    A is the p*N x p*N block matrix with block (u, v) equal to
    D^T (R S_uv R^T kron I_N) D, computed by running diagonal sums instead
    of the Kronecker product; b stacks T_N(R s_u)^T w_out.
    """
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    A = np.empty((p * N, p * N))
    b = np.empty(p * N)
    for u in range(p):
        s_u = moments.s_hat[u * nm : (u + 1) * nm]
        y_u = prob.R @ s_u
        b[u * N : (u + 1) * N] = toeplitz(y_u, N).T @ prob.w_out
        for v in range(p):
            S_uv = moments.S_hat[u * nm : (u + 1) * nm, v * nm : (v + 1) * nm]
            B_uv = prob.R @ S_uv @ prob.R.T
            A[u * N : (u + 1) * N, v * N : (v + 1) * N] = toeplitz_gram(B_uv)
    return A, b


def _stack_g(params, thetas) -> np.ndarray:
    return np.concatenate([params[u].g(thetas[u]) for u in range(len(params))])


def theta_objective(A: np.ndarray, b: np.ndarray, params, thetas) -> float:
    g = _stack_g(params, thetas)
    return float(g @ (A @ g) - 2.0 * b @ g)


def theta_objective_grad(A: np.ndarray, b: np.ndarray, params, thetas):
    """Objective value and per-module gradient lists (chain rule through
    the parametrization Jacobians)."""
    p = len(params)
    g = _stack_g(params, thetas)
    if not np.all(np.isfinite(g)):
        return np.inf, [np.zeros(pa.n_theta) for pa in params]
    Ag = A @ g
    v = float(g @ Ag - 2.0 * b @ g)
    resid = 2.0 * (Ag - b)
    block = g.size // p
    grads = [
        params[u].jacobian(thetas[u]).T @ resid[u * block : (u + 1) * block]
        for u in range(p)
    ]
    return v, grads


def _gauss_newton_theta(A, b, params, warm, max_iter=50):
    """Warm-started Gauss-Newton with Armijo backtracking on the quadratic
    module objective; returns None if it cannot make progress."""
    p = len(params)
    sizes = [pa.n_theta for pa in params]
    splits = np.cumsum(sizes)[:-1]
    x = np.concatenate([np.asarray(t, dtype=float) for t in warm])

    def value_grad(xv):
        thetas = np.split(xv, splits)
        v, grads = theta_objective_grad(A, b, params, thetas)
        return v, (np.concatenate(grads) if np.isfinite(v) else None), thetas

    v, grad, thetas = value_grad(x)
    if not np.isfinite(v):
        return None
    for _ in range(max_iter):
        J = scipy.linalg.block_diag(*[params[u].jacobian(thetas[u]) for u in range(p)])
        H = 2.0 * (J.T @ (A @ J))
        H[np.diag_indices_from(H)] += 1e-12 * (1.0 + np.abs(np.diag(H)))
        try:
            step = np.linalg.solve(H, -grad)
        except np.linalg.LinAlgError:
            return None
        slope = float(grad @ step)
        if slope >= 0:
            return None
        t = 1.0
        for _ in range(40):
            v_new, grad_new, thetas_new = value_grad(x + t * step)
            if np.isfinite(v_new) and v_new <= v + 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            break
        x = x + t * step
        done = abs(v - v_new) <= 1e-14 * (1.0 + abs(v))
        v, grad, thetas = v_new, grad_new, thetas_new
        if done or np.linalg.norm(grad) <= 1e-12 * (1.0 + abs(v)):
            break
    return [np.asarray(t) for t in thetas]


def update_theta(
    A: np.ndarray,
    b: np.ndarray,
    params,
    warm_thetas: list[np.ndarray],
) -> list[np.ndarray]:
    """Minimize g' A g - 2 b' g over the module parameters.

    All-linear parametrizations solve the normal equations in closed form;
    otherwise a warm-started Gauss-Newton descent with analytic Jacobians
    runs, falling back to L-BFGS with deterministic random restarts.  The
    result never scores worse than the warm start.
    """
    p = len(params)
    sizes = [params[u].n_theta for u in range(p)]
    splits = np.cumsum(sizes)[:-1]

    if all(getattr(pa, "linear", False) for pa in params):
        L = scipy.linalg.block_diag(*[pa.basis for pa in params])
        H = L.T @ A @ L
        rhs = L.T @ b
        try:
            c = scipy.linalg.cho_factor(H, lower=True)
            x = scipy.linalg.cho_solve(c, rhs)
        except scipy.linalg.LinAlgError:
            raise RankDeficientUpdateError(
                "normal equations of the linear parameter step are singular"
            ) from None
        return list(np.split(x, splits))

    warm_value = theta_objective(A, b, params, warm_thetas)
    best = _gauss_newton_theta(A, b, params, warm_thetas)
    if best is not None:
        gn_value = theta_objective(A, b, params, best)
        if gn_value <= warm_value:
            return best

    def fun_grad(x):
        thetas = np.split(x, splits)
        v, grads = theta_objective_grad(A, b, params, thetas)
        if not np.isfinite(v):
            return np.inf, np.zeros_like(x)
        return v, np.concatenate(grads)

    x0 = np.concatenate([np.asarray(t, dtype=float) for t in warm_thetas])
    x, f, _, _ = minimize_smooth(fun_grad, x0)
    if f > warm_value:
        return [t.copy() for t in warm_thetas]
    return list(np.split(x, splits))


# ----------------------------------------------------------------------
# CM step: noise variances
# ----------------------------------------------------------------------

def update_noise_variances(
    moments: Moments, prob: ModuleProblem, thetas: list[np.ndarray]
) -> np.ndarray:
    """Closed-form noise updates: squared data misfit plus the posterior
    trace term that compensates the shrinkage bias, divided by N."""
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    sigmas = np.empty(p + 1)
    for i in range(p):
        s_i = moments.s_hat[i * nm : (i + 1) * nm]
        P_ii = moments.P_hat[i * nm : (i + 1) * nm, i * nm : (i + 1) * nm]
        resid = prob.w_inputs[:, i] - prob.R @ s_i
        trace = float(np.sum((prob.R @ P_ii) * prob.R))
        sigmas[i] = (resid @ resid + trace) / N
    g = [prob.params[u].g(thetas[u]) for u in range(p)]
    M = gr_stack(g, prob.R)
    resid = prob.w_out - M @ moments.s_hat
    trace = float(np.sum((M @ moments.P_hat) * M))
    sigmas[p] = (resid @ resid + trace) / N
    return sigmas


# ----------------------------------------------------------------------
# Initialization and the outer loop
# ----------------------------------------------------------------------

def _eb_grid_fit(
    w: np.ndarray, R: np.ndarray, m: int, n: int, sigma2: float, N: int
) -> tuple[float, float]:
    """Coarse empirical-Bayes fit of one input channel: scan (beta, lambda)
    over a small grid of the marginal objective with the channel treated in
    isolation, sharing one (lambda, beta) across its m paths."""
    from .posterior import _marginal_core

    RtR = R.T @ R
    Rtw = R.T @ w
    wtw = float(w @ w)
    var_w = float(np.var(w, ddof=1))
    excess = max(var_w - sigma2, 1e-3 * var_w)
    betas = np.unique(np.concatenate([np.linspace(0.1, 0.9, 9), [0.95, 0.98]]))
    best = (np.inf, 1.0, 0.5)
    for beta in betas:
        K = build_kernel(n, beta)
        priors_unit = [ScaledKernel(K, 1.0) for _ in range(m)]
        # scale that matches the realized signal energy for this decay rate
        tr_rkr = sum(
            float(np.sum((R[:, c * n : (c + 1) * n] @ K.mat) * R[:, c * n : (c + 1) * n]))
            for c in range(m)
        )
        lam_match = max(excess * N / max(tr_rkr, 1e-12), 1e-12)
        for mult in np.logspace(-2, 2, 9):
            lam = lam_match * mult
            priors = [ScaledKernel(K, lam) for _ in range(m)]
            try:
                obj = _marginal_core(
                    RtR / sigma2, Rtw / sigma2, wtw / sigma2, N * np.log(sigma2), priors
                )
            except Exception:
                continue
            if obj < best[0]:
                best = (obj, lam, beta)
    _, lam, beta = best
    return lam, float(np.clip(beta, BETA_MIN, BETA_MAX))


def initialize(prob: ModuleProblem) -> HyperParameters:
    """Starting point for the ECM sweep: module parameters and noise levels
    from the two-stage baseline, kernel hyperparameters from a coarse
    empirical-Bayes fit of each input channel on its own."""
    from .baselines import two_stage

    ts = two_stage(prob)
    p, m, n, N = prob.p, prob.m, prob.n, prob.N
    sigmas = np.empty(p + 1)
    for i in range(p):
        sigmas[i] = max(ts.stage1_residual_vars[i], 1e-8)
    sigmas[p] = max(ts.stage2_residual_var, 1e-8)
    lambdas = np.empty(p * m)
    betas = np.empty(p * m)
    for i in range(p):
        lam, beta = _eb_grid_fit(prob.w_inputs[:, i], prob.R, m, n, sigmas[i], N)
        lambdas[i * m : (i + 1) * m] = lam
        betas[i * m : (i + 1) * m] = beta
    return HyperParameters(sigmas=sigmas, lambdas=lambdas, betas=betas, thetas=ts.thetas)


@dataclass
class NebOptions:
    tol: float = 1e-10
    max_iter: int = 300


@dataclass
class NebEstimate:
    """Result of one ECM run."""

    hypers: HyperParameters
    g_hat: list[np.ndarray]       # per-module response, first entry = lag 1
    s_hat: np.ndarray             # posterior mean of the latent paths
    iterations: int
    objective_trace: np.ndarray
    converged: bool


def _priors_from(hypers: HyperParameters, n: int) -> list[ScaledKernel]:
    return [
        ScaledKernel(build_kernel(n, beta), lam)
        for lam, beta in zip(hypers.lambdas, hypers.betas)
    ]


def _estep_and_objective(prob: ModuleProblem, hypers: HyperParameters, RtR, Rtw):
    """One fused pass: posterior moments and the marginal objective from a
    single factorization of the information matrix.  Equivalent to calling
    ``posterior`` and ``marginal_objective`` on the stacked regressor."""
    from .posterior import _prior_inverse

    n, p, m, N = prob.n, prob.p, prob.m, prob.N
    nm = n * m
    sig_in = hypers.sigmas[:p]
    sig_out = hypers.sigmas[p]
    g = [prob.params[u].g(hypers.thetas[u]) for u in range(p)]
    M = gr_stack(g, prob.R)

    btb = M.T @ M / sig_out
    for i in range(p):
        btb[i * nm : (i + 1) * nm, i * nm : (i + 1) * nm] += RtR / sig_in[i]
    btz = M.T @ prob.w_out / sig_out
    for i in range(p):
        btz[i * nm : (i + 1) * nm] += Rtw[i] / sig_in[i]
    ztz = float(
        np.sum(prob.w_inputs**2 / sig_in) + prob.w_out @ prob.w_out / sig_out
    )

    priors = _priors_from(hypers, n)
    prior_inv, prior_logdet = _prior_inverse(priors)
    info = btb + prior_inv
    try:
        c = scipy.linalg.cho_factor(info, lower=True)
    except scipy.linalg.LinAlgError as exc:
        from .posterior import IllConditionedPosteriorError

        raise IllConditionedPosteriorError(f"information matrix not PD: {exc}") from None
    mean = scipy.linalg.cho_solve(c, btz)
    cov = scipy.linalg.cho_solve(c, np.eye(info.shape[0]))
    cov = 0.5 * (cov + cov.T)
    logdet_info = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    logdet_sigma = N * float(np.sum(np.log(hypers.sigmas)))
    objective = logdet_sigma + prior_logdet + logdet_info + ztz - float(btz @ mean)
    return GaussianPosterior(mean=mean, cov=cov), objective, g


def neb_identify(
    prob: ModuleProblem,
    options: NebOptions | None = None,
    init: HyperParameters | None = None,
) -> NebEstimate:
    """Run the full ECM iteration until the relative change of the
    hyperparameter vector drops below tol (or max_iter sweeps)."""
    options = options or NebOptions()
    hypers = init if init is not None else initialize(prob)
    n, p, m, N = prob.n, prob.p, prob.m, prob.N
    RtR = prob.R.T @ prob.R
    Rtw = [prob.R.T @ prob.w_inputs[:, i] for i in range(p)]

    trace: list[float] = []
    converged = False
    iterations = 0
    for k in range(options.max_iter):
        eta_old = hypers.flatten()
        post, objective, _ = _estep_and_objective(prob, hypers, RtR, Rtw)
        trace.append(objective)
        mom = estep_moments(post)

        lambdas = hypers.lambdas.copy()
        betas = hypers.betas.copy()
        for j, block in enumerate(_path_blocks(mom.S_hat, p, m, n)):
            lambdas[j], betas[j] = update_hyperparameters(
                block, n, candidates=(betas[j],)
            )

        A, b = assemble_quadratic(mom, prob)
        thetas = update_theta(A, b, prob.params, hypers.thetas)
        sigmas = update_noise_variances(mom, prob, thetas)

        hypers = HyperParameters(
            sigmas=sigmas, lambdas=lambdas, betas=betas, thetas=thetas
        )
        iterations = k + 1
        rel = np.linalg.norm(hypers.flatten() - eta_old) / max(
            np.linalg.norm(eta_old), 1e-300
        )
        if rel < options.tol:
            converged = True
            break

    post, objective, g = _estep_and_objective(prob, hypers, RtR, Rtw)
    trace.append(objective)

    return NebEstimate(
        hypers=hypers,
        g_hat=[gu[1:] for gu in g],
        s_hat=post.mean,
        iterations=iterations,
        objective_trace=np.asarray(trace),
        converged=converged,
    )
