"""First-order stable spline kernel.

K_beta has entries beta**max(i, j) in one-based indices, which makes it the
covariance of smooth, exponentially decaying impulse-response realizations.
The kernel is severely ill-conditioned for beta near 1 and large n, so the
Cholesky factorization escalates a small jitter before giving up with a
typed error; anything beyond the jitter cap is reported, never silently
regularized away.

Because K_beta is a reordered min-kernel, its inverse is tridiagonal and
its log-determinant has a closed form.  ``ss_logdet`` and
``ss_inverse_bands`` expose those exact expressions; they are what makes
the scalar hyperparameter search cheap, and they are cross-checked against
the Cholesky route in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

BETA_MIN = 1e-6
BETA_MAX = 1.0 - 1e-6

_JITTER_FACTORS = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


class IllConditionedKernelError(RuntimeError):
    """Cholesky failed even after jitter escalation."""

    def __init__(self, beta: float, lam: float, n: int):
        self.beta = beta
        self.lam = lam
        self.n = n
        super().__init__(
            f"stable spline kernel not factorizable: beta={beta!r}, lambda={lam!r}, n={n}"
        )


class KernelMatrix:
    """Materialized K_beta with a lazily cached jittered Cholesky factor."""

    def __init__(self, n: int, beta: float):
        if n < 1:
            raise ValueError(f"kernel dimension must be >= 1, got {n}")
        if not (0.0 <= beta < 1.0):
            raise ValueError(f"beta must lie in [0, 1), got {beta!r}")
        self.n = int(n)
        self.beta = float(beta)
        idx = np.arange(1, n + 1)
        self.mat = beta ** np.maximum.outer(idx, idx).astype(float)
        self._chol: np.ndarray | None = None

    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of K (plus the smallest jitter that works)."""
        if self._chol is None:
            base = np.trace(self.mat) / self.n
            for factor in _JITTER_FACTORS:
                try:
                    self._chol = np.linalg.cholesky(
                        self.mat + factor * base * np.eye(self.n)
                    )
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise IllConditionedKernelError(self.beta, 1.0, self.n)
        return self._chol

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.cholesky()))))

    def solve(self, S: np.ndarray) -> np.ndarray:
        """K^-1 S via the cached Cholesky factor."""
        L = self.cholesky()
        return scipy.linalg.cho_solve((L, True), S)


def build_kernel(n: int, beta: float) -> KernelMatrix:
    """Construct K_beta; beta outside [0, 1) is rejected."""
    return KernelMatrix(n, beta)


@dataclass(frozen=True)
class ScaledKernel:
    """Prior covariance lambda * K_beta of one latent impulse-response path."""

    kernel: KernelMatrix
    lam: float

    def __post_init__(self):
        if not self.lam > 0.0:
            raise ValueError(f"lambda must be positive, got {self.lam!r}")

    @property
    def n(self) -> int:
        return self.kernel.n

    def cov(self) -> np.ndarray:
        return self.lam * self.kernel.mat

    def inv(self) -> np.ndarray:
        # the exact tridiagonal inverse when it is representable, otherwise
        # the jittered Cholesky route
        n, beta = self.kernel.n, self.kernel.beta
        main, off = ss_inverse_bands(n, beta)
        if np.all(np.isfinite(main)) and np.all(np.isfinite(off)):
            inv = np.zeros((n, n))
            idx = np.arange(n)
            inv[idx, idx] = main
            inv[idx[1:], idx[:-1]] = off
            inv[idx[:-1], idx[1:]] = off
            return inv / self.lam
        return self.kernel.solve(np.eye(n)) / self.lam

    def logdet(self) -> float:
        return self.kernel.n * np.log(self.lam) + self.kernel.logdet()


def inv_quad_and_logdet(sk: ScaledKernel, S: np.ndarray) -> tuple[float, float]:
    """trace((lam K)^-1 S) and log det(lam K), through the Cholesky factor.

    ``S`` must be symmetric of matching dimension.  A kernel that cannot be
    factorized even with jitter raises IllConditionedKernelError carrying
    (beta, lambda, n).
    """
    S = np.asarray(S, dtype=float)
    n = sk.kernel.n
    if S.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} matrix, got {S.shape}")
    if not np.allclose(S, S.T, atol=1e-10 * (1.0 + np.abs(S).max())):
        raise ValueError("S must be symmetric")
    try:
        trace_term = float(np.trace(sk.kernel.solve(S))) / sk.lam
        logdet = sk.logdet()
    except IllConditionedKernelError:
        raise IllConditionedKernelError(sk.kernel.beta, sk.lam, n) from None
    return trace_term, logdet


def ss_logdet(n: int, beta: float) -> float:
    """Exact log det K_beta = (n(n+1)/2) log(beta) + (n-1) log(1-beta)."""
    if beta <= 0.0 or beta >= 1.0:
        return -np.inf
    return 0.5 * n * (n + 1) * np.log(beta) + (n - 1) * np.log1p(-beta)


def ss_inverse_bands(n: int, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Main diagonal and first subdiagonal of the tridiagonal K_beta^-1.

    Entries can overflow to inf when beta**n underflows; callers treat
    non-finite results as an infeasible beta.
    """
    powers = beta ** np.arange(1, n + 1, dtype=float)
    one_m = 1.0 - beta
    with np.errstate(divide="ignore", over="ignore"):
        main = (1.0 + beta) / (powers * one_m)
        if n == 1:
            main[0] = 1.0 / beta if beta > 0 else np.inf
        else:
            main[0] = 1.0 / (powers[0] * one_m)
            main[-1] = 1.0 / (powers[-1] * one_m)
        off = -1.0 / (powers[:-1] * one_m)
    return main, off


def ss_inv_quad(n: int, beta: float, diag_S: np.ndarray, sub_S: np.ndarray) -> float:
    """trace(K_beta^-1 S) for symmetric S from its main and first
    subdiagonals, using the exact tridiagonal inverse."""
    main, off = ss_inverse_bands(n, beta)
    return float(main @ diag_S + 2.0 * (off @ sub_S))
