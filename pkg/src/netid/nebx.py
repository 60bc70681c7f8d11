"""Module identification with one extra sensor downstream of the target.

The downstream path gets its own stable spline prior, which makes the
joint posterior of (sensitivity paths, downstream path) non-Gaussian: the
extra sensor sees the convolution of two Gaussian vectors.  The E-step is
therefore integrated by a Gibbs sampler alternating the two exact Gaussian
conditionals, and the CM steps reuse the closed forms of the plain
estimator with sampled moments in place of exact ones.

Sample moments use the 1/M convention of the retained chain, and every
retained draw carries v = f * s (per latent path), whose moments drive the
downstream contributions to the parameter and noise updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal

from .kernel import ScaledKernel, build_kernel
from .lti import toeplitz
from .network import ModuleProblem
from .neb import (
    Moments,
    NebEstimate,
    NebOptions,
    _eb_grid_fit,
    _path_blocks,
    _priors_from,
    gr_stack,
    neb_identify,
    update_hyperparameters,
    update_theta,
)
from .posterior import (
    GaussianPosterior,
    HyperParameters,
    IllConditionedPosteriorError,
    _prior_inverse,
    marginal_objective,
)

__all__ = [
    "NebxModel",
    "NebxOptions",
    "GibbsStats",
    "conditional_s",
    "conditional_f",
    "gibbs_sample",
    "nebx_q",
    "nebx_q_terms",
    "nebx_update_theta",
    "nebx_update_variances",
    "nebx_identify",
]


class NebxModel:
    """Data and fixed-hyperparameter quantities shared by both Gibbs
    conditionals.  ``hypers`` carries the input/output/downstream noise
    variances, the per-path kernel hyperparameters followed by the
    downstream-path kernel, and the module parameters."""

    def __init__(self, prob: ModuleProblem, hypers: HyperParameters):
        if prob.z_f is None:
            raise ValueError("problem has no downstream sensor channel")
        self.prob = prob
        self.hypers = hypers
        p, m, n, N = prob.p, prob.m, prob.n, prob.N
        nm = n * m
        if hypers.sigmas.size != p + 2:
            raise ValueError(f"expected {p + 2} noise variances, got {hypers.sigmas.size}")
        if hypers.lambdas.size != p * m + 1:
            raise ValueError(f"expected {p * m + 1} kernel scales, got {hypers.lambdas.size}")
        self.sig_in = hypers.sigmas[:p]
        self.sig_out = float(hypers.sigmas[p])
        self.sig_f = float(hypers.sigmas[p + 1])
        self.g = [prob.params[u].g(hypers.thetas[u]) for u in range(p)]
        self.M = gr_stack(self.g, prob.R)  # (N, p*n*m), module outputs of the paths
        self.s_priors = [
            ScaledKernel(build_kernel(n, hypers.betas[k]), hypers.lambdas[k])
            for k in range(p * m)
        ]
        self.f_prior = ScaledKernel(
            build_kernel(n, hypers.betas[p * m]), hypers.lambdas[p * m]
        )
        prior_inv_s, _ = _prior_inverse(self.s_priors)
        RtR = prob.R.T @ prob.R
        self._info_fixed = self.M.T @ self.M / self.sig_out + prior_inv_s
        for i in range(p):
            self._info_fixed[i * nm : (i + 1) * nm, i * nm : (i + 1) * nm] += (
                RtR / self.sig_in[i]
            )
        self._rhs_fixed = self.M.T @ prob.w_out / self.sig_out
        for i in range(p):
            self._rhs_fixed[i * nm : (i + 1) * nm] += (
                prob.R.T @ prob.w_inputs[:, i] / self.sig_in[i]
            )
        self._f_prior_inv = self.f_prior.inv()

    def _s_factor(self, f: np.ndarray):
        """Mean and information Cholesky factor of p(s | f, data)."""
        N = self.prob.N
        FM = scipy.signal.fftconvolve(self.M, f[:, None], axes=0)[:N]
        info = self._info_fixed + FM.T @ FM / self.sig_f
        rhs = self._rhs_fixed + FM.T @ self.prob.z_f / self.sig_f
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedPosteriorError(f"s-conditional not PD: {exc}") from None
        mean = scipy.linalg.cho_solve((L, True), rhs)
        return mean, L

    def _f_factor(self, s: np.ndarray):
        """Mean and information Cholesky factor of p(f | s, data)."""
        n = self.prob.n
        y = self.M @ s  # noise-free module output under this s
        Wf = toeplitz(y, n)
        info = Wf.T @ Wf / self.sig_f + self._f_prior_inv
        rhs = Wf.T @ self.prob.z_f / self.sig_f
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedPosteriorError(f"f-conditional not PD: {exc}") from None
        mean = scipy.linalg.cho_solve((L, True), rhs)
        return mean, L


def _factor_to_posterior(mean: np.ndarray, L: np.ndarray) -> GaussianPosterior:
    cov = scipy.linalg.cho_solve((L, True), np.eye(L.shape[0]))
    return GaussianPosterior(mean=mean, cov=0.5 * (cov + cov.T))


def conditional_s(f: np.ndarray, model: NebxModel) -> GaussianPosterior:
    """Exact Gaussian conditional of the sensitivity paths given the
    downstream response: the regressor stacks [R; G R; F G R]."""
    f = np.asarray(f, dtype=float)
    if not np.all(np.isfinite(f)):
        raise ValueError("downstream response must be finite")
    return _factor_to_posterior(*model._s_factor(f))


def conditional_f(s: np.ndarray, model: NebxModel) -> GaussianPosterior:
    """Exact Gaussian conditional of the downstream path given the
    sensitivity paths; only the downstream sensor carries information."""
    s = np.asarray(s, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("sensitivity coefficients must be finite")
    return _factor_to_posterior(*model._f_factor(s))


@dataclass(frozen=True)
class GibbsStats:
    """Sample means and covariances of the retained chain, including the
    per-path convolution v = f * s recomputed at every retained draw."""

    s_bar: np.ndarray
    f_bar: np.ndarray
    v_bar: np.ndarray
    P_s: np.ndarray
    P_f: np.ndarray
    P_v: np.ndarray
    M: int
    M0: int
    seed: int


def _convolve_paths(f: np.ndarray, s: np.ndarray, p: int, m: int, n: int) -> np.ndarray:
    """v = f * s applied per latent path, truncated to n samples each."""
    paths = s.reshape(p * m, n)
    out = scipy.signal.fftconvolve(paths, f[None, :], axes=1)[:, :n]
    return out.reshape(-1)


def gibbs_sample(
    model: NebxModel,
    M: int,
    M0: int,
    seed,
    s_init: np.ndarray | None = None,
    f_init: np.ndarray | None = None,
) -> GibbsStats:
    """Alternate draws from the two conditionals, discard the first M0,
    and return 1/M sample moments of s, f and v = f * s."""
    if M < 2:
        raise ValueError(f"need at least 2 retained samples, got {M}")
    if M0 < 0:
        raise ValueError(f"burn-in cannot be negative, got {M0}")
    prob = model.prob
    p, m, n = prob.p, prob.m, prob.n
    dim_s = p * m * n
    if isinstance(seed, np.random.SeedSequence):
        seed_int = int(seed.generate_state(1)[0])
    elif isinstance(seed, (int, np.integer)):
        seed_int = int(seed)
    else:
        seed_int = int(np.random.SeedSequence(seed).generate_state(1)[0])
    rng = np.random.default_rng(seed_int)
    f = np.zeros(n) if f_init is None else np.asarray(f_init, dtype=float).copy()
    s = np.zeros(dim_s) if s_init is None else np.asarray(s_init, dtype=float).copy()

    S = np.empty((M, dim_s))
    F = np.empty((M, n))
    V = np.empty((M, dim_s))
    for k in range(M0 + M):
        mean_s, Ls = model._s_factor(f)
        s = mean_s + scipy.linalg.solve_triangular(
            Ls.T, rng.standard_normal(dim_s), lower=False
        )
        mean_f, Lf = model._f_factor(s)
        f = mean_f + scipy.linalg.solve_triangular(
            Lf.T, rng.standard_normal(n), lower=False
        )
        if k >= M0:
            j = k - M0
            S[j] = s
            F[j] = f
            V[j] = _convolve_paths(f, s, p, m, n)

    s_bar = S.mean(axis=0)
    f_bar = F.mean(axis=0)
    v_bar = V.mean(axis=0)
    Sc = S - s_bar
    Fc = F - f_bar
    Vc = V - v_bar
    return GibbsStats(
        s_bar=s_bar,
        f_bar=f_bar,
        v_bar=v_bar,
        P_s=Sc.T @ Sc / M,
        P_f=Fc.T @ Fc / M,
        P_v=Vc.T @ Vc / M,
        M=M,
        M0=M0,
        seed=seed_int,
    )


# ----------------------------------------------------------------------
# Sampled complete-data objective and CM steps
# ----------------------------------------------------------------------

def _prior_term(sk: ScaledKernel, x: np.ndarray, X: np.ndarray) -> float:
    """log det(lam K) + tr((lam K)^-1 (x x' + X))."""
    inv = sk.inv()
    return sk.logdet() + float(np.sum(inv * (np.outer(x, x) + X)))

def _channel_term(sigma2: float, z: np.ndarray, pred: np.ndarray, Op: np.ndarray, X: np.ndarray) -> float:
    """N log sigma^2 + (||z - pred||^2 + tr(Op X Op')) / sigma^2."""
    N = z.size
    resid = z - pred
    return N * np.log(sigma2) + (float(resid @ resid) + float(np.sum((Op @ X) * Op))) / sigma2


def nebx_q_terms(stats: GibbsStats, model: NebxModel) -> tuple[float, ...]:
    """The five pieces of the sampled -2Q: the two prior terms (paths and
    downstream response), and the three channel terms (inputs stacked into
    one value, output, downstream sensor)."""
    prob = model.prob
    p, m, n = prob.p, prob.m, prob.n
    nm = n * m
    q_s = 0.0
    for k, sk in enumerate(model.s_priors):
        x = stats.s_bar[k * n : (k + 1) * n]
        X = stats.P_s[k * n : (k + 1) * n, k * n : (k + 1) * n]
        q_s += _prior_term(sk, x, X)
    q_f = _prior_term(model.f_prior, stats.f_bar, stats.P_f)
    q_in = 0.0
    for i in range(p):
        s_i = stats.s_bar[i * nm : (i + 1) * nm]
        P_ii = stats.P_s[i * nm : (i + 1) * nm, i * nm : (i + 1) * nm]
        q_in += _channel_term(
            model.sig_in[i], prob.w_inputs[:, i], prob.R @ s_i, prob.R, P_ii
        )
    q_out = _channel_term(
        model.sig_out, prob.w_out, model.M @ stats.s_bar, model.M, stats.P_s
    )
    q_down = _channel_term(
        model.sig_f, prob.z_f, model.M @ stats.v_bar, model.M, stats.P_v
    )
    return q_s, q_f, q_in, q_out, q_down


def nebx_q(stats: GibbsStats, model: NebxModel) -> float:
    """Sampled expected complete-data log-likelihood Q (constants dropped),
    the downstream-sensor analogue of the exact-E-step q_function."""
    return -0.5 * float(sum(nebx_q_terms(stats, model)))


def _quadratic_from(S_full: np.ndarray, s_bar: np.ndarray, target: np.ndarray, prob: ModuleProblem):
    """(A, b) of the quadratic module objective for one sensor channel."""
    from .lti import toeplitz_gram

    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    A = np.empty((p * N, p * N))
    b = np.empty(p * N)
    for u in range(p):
        y_u = prob.R @ s_bar[u * nm : (u + 1) * nm]
        b[u * N : (u + 1) * N] = toeplitz(y_u, N).T @ target
        for v in range(p):
            S_uv = S_full[u * nm : (u + 1) * nm, v * nm : (v + 1) * nm]
            A[u * N : (u + 1) * N, v * N : (v + 1) * N] = toeplitz_gram(
                prob.R @ S_uv @ prob.R.T
            )
    return A, b


def nebx_update_theta(
    stats: GibbsStats,
    sigmas: np.ndarray,
    prob: ModuleProblem,
    warm_thetas: list[np.ndarray],
) -> list[np.ndarray]:
    """Module-parameter step weighting the output sensor and the downstream
    sensor by their noise levels; same solver stack as the plain update."""
    p = prob.p
    S_s = stats.P_s + np.outer(stats.s_bar, stats.s_bar)
    S_v = stats.P_v + np.outer(stats.v_bar, stats.v_bar)
    A_s, b_s = _quadratic_from(S_s, stats.s_bar, prob.w_out, prob)
    A_v, b_v = _quadratic_from(S_v, stats.v_bar, prob.z_f, prob)
    sig_out, sig_f = float(sigmas[p]), float(sigmas[p + 1])
    A = A_s / sig_out + A_v / sig_f
    b = b_s / sig_out + b_v / sig_f
    return update_theta(A, b, prob.params, warm_thetas)


def nebx_update_variances(
    stats: GibbsStats, thetas: list[np.ndarray], prob: ModuleProblem
) -> np.ndarray:
    """Closed-form noise updates for inputs, output and downstream sensor."""
    N, n, p, m = prob.N, prob.n, prob.p, prob.m
    nm = n * m
    sigmas = np.empty(p + 2)
    for i in range(p):
        s_i = stats.s_bar[i * nm : (i + 1) * nm]
        P_ii = stats.P_s[i * nm : (i + 1) * nm, i * nm : (i + 1) * nm]
        resid = prob.w_inputs[:, i] - prob.R @ s_i
        sigmas[i] = (float(resid @ resid) + float(np.sum((prob.R @ P_ii) * prob.R))) / N
    g = [prob.params[u].g(thetas[u]) for u in range(p)]
    M_op = gr_stack(g, prob.R)
    resid = prob.w_out - M_op @ stats.s_bar
    sigmas[p] = (float(resid @ resid) + float(np.sum((M_op @ stats.P_s) * M_op))) / N
    resid = prob.z_f - M_op @ stats.v_bar
    sigmas[p + 1] = (float(resid @ resid) + float(np.sum((M_op @ stats.P_v) * M_op))) / N
    return sigmas


# ----------------------------------------------------------------------
# Outer loop
# ----------------------------------------------------------------------

@dataclass
class NebxOptions:
    tol: float = 1e-10
    max_iter: int = 50
    gibbs_samples: int = 500
    gibbs_burn_in: int = 100
    seed: int = 0
    neb: NebOptions | None = None


def _init_downstream(prob: ModuleProblem, neb_est: NebEstimate):
    """Empirical-Bayes fit of the downstream path from the simulated module
    output (plain-estimator prediction) and the downstream sensor."""
    n, N, p = prob.n, prob.N, prob.p
    g = [prob.params[u].g(neb_est.hypers.thetas[u]) for u in range(p)]
    w_out_hat = gr_stack(g, prob.R) @ neb_est.s_hat
    W = toeplitz(w_out_hat, n)
    coef, _, rank, _ = np.linalg.lstsq(W, prob.z_f, rcond=None)
    resid = prob.z_f - W @ coef
    sig_f = max(float(resid @ resid) / max(N - rank, 1), 1e-10)
    lam_f, beta_f = _eb_grid_fit(prob.z_f, W, 1, n, sig_f, N)
    prior = ScaledKernel(build_kernel(n, beta_f), lam_f)
    info = W.T @ W / sig_f + prior.inv()
    c = scipy.linalg.cho_factor(info, lower=True)
    f0 = scipy.linalg.cho_solve(c, W.T @ prob.z_f / sig_f)
    return f0, lam_f, beta_f, sig_f


def _surrogate_marginal(prob: ModuleProblem, hypers: HyperParameters, f_bar: np.ndarray) -> float:
    """Marginal objective of all three sensor groups with the downstream
    path plugged in at its current chain mean: exact in the sensitivity
    paths, a convergence diagnostic in f."""
    p, n, N = prob.p, prob.n, prob.N
    g = [prob.params[u].g(hypers.thetas[u]) for u in range(p)]
    M_op = gr_stack(g, prob.R)
    FM = scipy.signal.fftconvolve(M_op, f_bar[:, None], axes=0)[:N]
    nm = n * prob.m
    W = np.zeros(((p + 2) * N, p * nm))
    for i in range(p):
        W[i * N : (i + 1) * N, i * nm : (i + 1) * nm] = prob.R
    W[p * N : (p + 1) * N] = M_op
    W[(p + 1) * N :] = FM
    z = np.concatenate([prob.w_inputs.T.reshape(-1), prob.w_out, prob.z_f])
    priors = [
        ScaledKernel(build_kernel(n, hypers.betas[k]), hypers.lambdas[k])
        for k in range(p * prob.m)
    ]
    return marginal_objective(z, W, hypers.sigmas, priors, N)


def nebx_identify(
    prob: ModuleProblem,
    options: NebxOptions | None = None,
    neb_init: NebEstimate | None = None,
) -> NebEstimate:
    """Downstream-sensor estimator: initialize from the plain estimator,
    then iterate Gibbs E-steps and CM steps.

    Reproducible end to end: iteration k samples with a sub-seed derived
    from (options.seed, k), and each chain warm-starts at the previous
    iteration's sample means.
    """
    if prob.z_f is None:
        raise ValueError("problem has no downstream sensor channel")
    options = options or NebxOptions()
    neb_est = neb_init if neb_init is not None else neb_identify(prob, options.neb)
    f_bar, lam_f, beta_f, sig_f = _init_downstream(prob, neb_est)
    s_bar = neb_est.s_hat
    base = neb_est.hypers
    hypers = HyperParameters(
        sigmas=np.concatenate([base.sigmas, [sig_f]]),
        lambdas=np.concatenate([base.lambdas, [lam_f]]),
        betas=np.concatenate([base.betas, [beta_f]]),
        thetas=[t.copy() for t in base.thetas],
    )

    n, p, m = prob.n, prob.p, prob.m
    trace: list[float] = []
    converged = False
    iterations = 0
    for k in range(options.max_iter):
        eta_old = hypers.flatten()
        model = NebxModel(prob, hypers)
        trace.append(_surrogate_marginal(prob, hypers, f_bar))
        stats = gibbs_sample(
            model,
            options.gibbs_samples,
            options.gibbs_burn_in,
            seed=np.random.SeedSequence((options.seed, k)),
            s_init=s_bar,
            f_init=f_bar,
        )

        lambdas = hypers.lambdas.copy()
        betas = hypers.betas.copy()
        S_s = stats.P_s + np.outer(stats.s_bar, stats.s_bar)
        for j, block in enumerate(_path_blocks(S_s, p, m, n)):
            lambdas[j], betas[j] = update_hyperparameters(block, n, candidates=(betas[j],))
        S_f = stats.P_f + np.outer(stats.f_bar, stats.f_bar)
        lambdas[p * m], betas[p * m] = update_hyperparameters(
            S_f, n, candidates=(betas[p * m],)
        )

        thetas = nebx_update_theta(stats, hypers.sigmas, prob, hypers.thetas)
        sigmas = nebx_update_variances(stats, thetas, prob)
        hypers = HyperParameters(
            sigmas=sigmas, lambdas=lambdas, betas=betas, thetas=thetas
        )
        s_bar, f_bar = stats.s_bar, stats.f_bar
        iterations = k + 1
        rel = np.linalg.norm(hypers.flatten() - eta_old) / max(
            np.linalg.norm(eta_old), 1e-300
        )
        if rel < options.tol:
            converged = True
            break

    trace.append(_surrogate_marginal(prob, hypers, f_bar))
    g = [prob.params[u].g(hypers.thetas[u]) for u in range(p)]
    return NebEstimate(
        hypers=hypers,
        g_hat=[gu[1:] for gu in g],
        s_hat=s_bar,
        iterations=iterations,
        objective_trace=np.asarray(trace),
        converged=converged,
    )
