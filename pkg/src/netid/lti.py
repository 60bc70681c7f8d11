"""Discrete-time LTI primitives.

Rational transfer functions in the delay operator q^-1, truncated impulse
responses, lower triangular Toeplitz convolution operators, and the
column-stacking map used by the quadratic module-parameter updates.

Sequence convention: a 1-D array ``a`` is lag-aligned, ``a[k]`` holds the
sample at lag ``k``.  ``toeplitz(a, n) @ b`` is then the causal convolution
of ``a`` with ``b`` truncated to ``len(a)`` samples, and a time signal used
as a Toeplitz generator convolves exactly (index 0 = time of the first
sample).  Impulse responses of strictly proper systems start at lag 1, so
``impulse_response`` returns ``g(1), ..., g(n)`` by default; pass
``first_lag=0`` for the operator-aligned form that includes the direct term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.signal
import scipy.sparse


@dataclass(frozen=True)
class RationalTF:
    """Proper rational transfer function (b0 + b1 q^-1 + ... + b_nb q^-nb) /
    (1 + a1 q^-1 + ... + a_na q^-na).

    ``num`` are the coefficients of q^-1 ... q^-nb and ``den`` those of
    q^-1 ... q^-na (the leading 1 of the denominator is implicit).  The
    direct term ``b0`` defaults to zero, i.e. strictly proper.
    """

    num: tuple[float, ...]
    den: tuple[float, ...] = ()
    b0: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "num", tuple(float(b) for b in self.num))
        object.__setattr__(self, "den", tuple(float(a) for a in self.den))
        object.__setattr__(self, "b0", float(self.b0))

    @property
    def strictly_proper(self) -> bool:
        return self.b0 == 0.0

    def poles(self) -> np.ndarray:
        """Poles in the q-plane (roots of q^na + a1 q^(na-1) + ... + a_na)."""
        if not self.den:
            return np.zeros(0)
        return np.roots(np.concatenate(([1.0], self.den)))

    def pole_radius(self) -> float:
        p = self.poles()
        return float(np.max(np.abs(p))) if p.size else 0.0

    def is_stable(self) -> bool:
        return self.pole_radius() < 1.0

    def num_full(self) -> np.ndarray:
        # numerator polynomial including the q^0 term
        return np.concatenate(([self.b0], self.num))

    def den_full(self) -> np.ndarray:
        return np.concatenate(([1.0], self.den))


def impulse_response(tf: RationalTF, n: int, first_lag: int = 1) -> np.ndarray:
    """First ``n`` impulse response samples of ``tf`` by recursive filtering.

    Returns ``g(first_lag), ..., g(first_lag + n - 1)``.  The default
    ``first_lag=1`` matches the convention for strictly proper modules.
    Unstable transfer functions are not rejected (callers decide via
    ``tf.is_stable()``); ``n`` must be at least 1.
    """
    if n < 1:
        raise ValueError(f"impulse response length must be >= 1, got {n}")
    if first_lag not in (0, 1):
        raise ValueError("first_lag must be 0 or 1")
    delta = np.zeros(n + first_lag)
    delta[0] = 1.0
    g = scipy.signal.lfilter(tf.num_full(), tf.den_full(), delta)
    return g[first_lag:]


def toeplitz(a: np.ndarray, n: int) -> np.ndarray:
    """m x n lower triangular Toeplitz matrix with generator ``a``.

    Entry (i, j) is ``a[i - j]`` for i >= j and zero above the diagonal,
    so ``toeplitz(a, n) @ b`` is the causal convolution a * b truncated
    to ``len(a)`` samples.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("generator must be a nonempty 1-D sequence")
    if n < 1:
        raise ValueError(f"column count must be >= 1, got {n}")
    row = np.zeros(n)
    row[0] = a[0]
    return scipy.linalg.toeplitz(a, row)


def convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """First ``n`` samples of the discrete convolution of two length-n
    sequences.  Commutative; equivalent to ``toeplitz(a, n) @ b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected equal-length 1-D sequences, got {a.shape} and {b.shape}")
    return np.convolve(a, b)[: a.size]


def duplication_matrix(N: int) -> scipy.sparse.csr_matrix:
    """Sparse N^2 x N matrix D with D @ a == vec(toeplitz(a, N)).

    vec stacks columns; row j*N + i carries a 1 in column i - j for i >= j.
    Stored sparse because only N(N+1)/2 of the N^2 rows are nonzero.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    i, j = np.tril_indices(N)
    rows = j * N + i
    cols = i - j
    data = np.ones(rows.size)
    return scipy.sparse.csr_matrix((data, (rows, cols)), shape=(N * N, N))


def toeplitz_gram(B: np.ndarray) -> np.ndarray:
    """Dense N x N matrix A with A[k, l] = sum_{t >= max(k, l)} B[t-k, t-l].

    This is D^T (B kron I_N) D for the column-stacking map D, computed from
    running sums over the diagonals of B instead of materializing the
    N^2 x N^2 Kronecker product.  For any generator vectors a, b it satisfies
    a^T A b = trace(toeplitz(a, N) B toeplitz(b, N)^T).
    """
    B = np.asarray(B, dtype=float)
    N = B.shape[0]
    if B.shape != (N, N):
        raise ValueError(f"expected a square matrix, got {B.shape}")
    # A[k, l] with l >= k is the prefix sum of the (l-k)-th lower diagonal of
    # B up to entry N-1-l, and symmetrically from B^T for l < k.  Skewing the
    # diagonals into rows turns all prefix sums into one cumulative sum.
    tri_r, tri_c = np.tril_indices(N)
    low = np.zeros((N, N))
    low[tri_r - tri_c, tri_c] = B[tri_r, tri_c]
    p_low = np.cumsum(low, axis=1)
    upp = np.zeros((N, N))
    upp[tri_r - tri_c, tri_c] = B[tri_c, tri_r]
    p_upp = np.cumsum(upp, axis=1)
    k = np.arange(N)[:, None]
    l = np.arange(N)[None, :]
    dist = np.abs(k - l)
    tail = N - 1 - np.maximum(k, l)
    return np.where(l >= k, p_low[dist, tail], p_upp[dist, tail])


def shift(a: np.ndarray, k: int) -> np.ndarray:
    """Delay ``a`` by ``k`` lags inside its own window (zeros shifted in)."""
    a = np.asarray(a, dtype=float)
    if k == 0:
        return a.copy()
    out = np.zeros_like(a)
    out[k:] = a[:-k]
    return out
