"""Exact Gaussian machinery shared by the empirical-Bayes estimators.

Everything runs in information form: the posterior of the stacked latent
coefficients given per-channel white noise and independent stable spline
priors is obtained from the small (n*m*p)-dimensional information matrix,
never from the 2N- or 3N-dimensional data covariance.  The marginal
likelihood objective comes from the matrix determinant and inversion
lemmas on the same information matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.signal

from .kernel import ScaledKernel

__all__ = [
    "GaussianPosterior",
    "HyperParameters",
    "IllConditionedPosteriorError",
    "build_regressor",
    "posterior",
    "marginal_objective",
]


class IllConditionedPosteriorError(RuntimeError):
    """The information matrix could not be factorized."""


@dataclass(frozen=True)
class GaussianPosterior:
    """Mean and covariance of a latent coefficient vector given data."""

    mean: np.ndarray
    cov: np.ndarray

    @cached_property
    def second_moment(self) -> np.ndarray:
        return self.cov + np.outer(self.mean, self.mean)


@dataclass
class HyperParameters:
    """ECM state: per-channel noise variances, per-path kernel
    hyperparameters, and the module parameter vectors."""

    sigmas: np.ndarray        # channel noise variances
    lambdas: np.ndarray       # one scale per latent path
    betas: np.ndarray         # one decay rate per latent path
    thetas: list[np.ndarray]  # one parameter vector per module

    def __post_init__(self):
        self.sigmas = np.asarray(self.sigmas, dtype=float)
        self.lambdas = np.asarray(self.lambdas, dtype=float)
        self.betas = np.asarray(self.betas, dtype=float)
        self.thetas = [np.asarray(t, dtype=float) for t in self.thetas]
        if np.any(self.sigmas <= 0):
            raise ValueError("noise variances must be positive")
        if np.any(self.lambdas <= 0):
            raise ValueError("kernel scales must be positive")
        if np.any((self.betas <= 0) | (self.betas >= 1)):
            raise ValueError("kernel decay rates must lie in (0, 1)")

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.sigmas, self.lambdas, self.betas, *self.thetas])


def build_regressor(g_arrays: list[np.ndarray], R: np.ndarray) -> np.ndarray:
    """Stacked regressor W = [I_p (x) R ; G (I_p (x) R)].

    ``g_arrays`` holds the p lag-aligned module impulse-response vectors
    (length N, index 0 = lag 0) and ``R`` the N x (n*m) horizontal stack of
    reference Toeplitz operators.  The result maps the stacked latent
    sensitivity coefficients to [inputs...; output] predictions,
    ((p+1)N x p*n*m).
    """
    N, nm = R.shape
    p = len(g_arrays)
    for g in g_arrays:
        if g.shape != (N,):
            raise ValueError(f"module response must have length {N}, got {g.shape}")
    W = np.zeros(((p + 1) * N, p * nm))
    for u, g in enumerate(g_arrays):
        W[u * N : (u + 1) * N, u * nm : (u + 1) * nm] = R
        # G_u R without forming the N x N Toeplitz: columnwise convolution
        GR = scipy.signal.fftconvolve(R, g[:, None], axes=0)[:N]
        W[p * N :, u * nm : (u + 1) * nm] = GR
    return W


def _row_variances(channel_vars: np.ndarray, N: int, rows: int) -> np.ndarray:
    channel_vars = np.asarray(channel_vars, dtype=float)
    if channel_vars.size * N != rows:
        raise ValueError(
            f"{rows} regressor rows are not {channel_vars.size} channels of length {N}"
        )
    if np.any(channel_vars <= 0):
        raise ValueError("channel noise variances must be positive")
    return np.repeat(channel_vars, N)


def _prior_inverse(priors: list[ScaledKernel]) -> tuple[np.ndarray, float]:
    """Block-diagonal inverse prior covariance and its log-determinant."""
    dim = sum(sk.n for sk in priors)
    inv = np.zeros((dim, dim))
    logdet = 0.0
    at = 0
    for sk in priors:
        inv[at : at + sk.n, at : at + sk.n] = sk.inv()
        logdet += sk.logdet()
        at += sk.n
    return inv, logdet


def posterior(
    z: np.ndarray,
    W: np.ndarray,
    channel_vars: np.ndarray,
    priors: list[ScaledKernel],
    N: int,
) -> GaussianPosterior:
    """Posterior of the latent coefficients: mean P W' Sigma_e^-1 z with
    P = (W' Sigma_e^-1 W + prior^-1)^-1, solved on the information matrix."""
    rows = _row_variances(channel_vars, N, W.shape[0])
    prior_inv, _ = _prior_inverse(priors)
    Wn = W / rows[:, None]
    info = W.T @ Wn + prior_inv
    try:
        c = scipy.linalg.cho_factor(info, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedPosteriorError(f"information matrix not PD: {exc}") from None
    cov = scipy.linalg.cho_solve(c, np.eye(info.shape[0]))
    cov = 0.5 * (cov + cov.T)
    mean = scipy.linalg.cho_solve(c, Wn.T @ z)
    return GaussianPosterior(mean=mean, cov=cov)


def marginal_objective(
    z: np.ndarray,
    W: np.ndarray,
    channel_vars: np.ndarray,
    priors: list[ScaledKernel],
    N: int,
) -> float:
    """log det Sigma_z + z' Sigma_z^-1 z for Sigma_z = W prior W' + Sigma_e,
    evaluated through the low-dimensional information matrix."""
    rows = _row_variances(channel_vars, N, W.shape[0])
    Wn = W / rows[:, None]
    btb = W.T @ Wn
    btz = Wn.T @ z
    ztz = float(z @ (z / rows))
    logdet_sigma = float(N * np.sum(np.log(np.asarray(channel_vars, dtype=float))))
    return _marginal_core(btb, btz, ztz, logdet_sigma, priors)


def _marginal_core(
    btb: np.ndarray,
    btz: np.ndarray,
    ztz: float,
    logdet_sigma: float,
    priors: list[ScaledKernel],
) -> float:
    """Objective from precomputed W'S^-1W, W'S^-1z, z'S^-1z pieces."""
    prior_inv, prior_logdet = _prior_inverse(priors)
    info = btb + prior_inv
    try:
        c = scipy.linalg.cho_factor(info, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise IllConditionedPosteriorError(f"information matrix not PD: {exc}") from None
    logdet_info = 2.0 * float(np.sum(np.log(np.diag(c[0]))))
    quad = ztz - float(btz @ scipy.linalg.cho_solve(c, btz))
    return logdet_sigma + prior_logdet + logdet_info + quad
