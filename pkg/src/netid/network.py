"""Known-topology dynamic networks: exact time-domain simulation,
truncated sensitivity paths, and noisy dataset generation.

A network couples L internal variables through scalar rational modules,
w(t) = G(q) w(t) + r(t), and every node is measured with additive white
Gaussian noise.  Simulation assembles one global state-space realization
from the per-edge transfer functions; direct feedthrough (if any module has
one) is resolved exactly by a static solve per step, so no fixed-point
iteration is needed.

Noise levels are configured either as explicit variances or as
noise-to-signal ratios.  A ratio is interpreted as var(e_k)/var(w_k) — a
ratio of 0.1 means 10% noise power — with the signal variance measured from
the realized noise-free trajectory of the run.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.signal

from .lti import RationalTF, toeplitz

__all__ = [
    "NetworkModel",
    "Dataset",
    "IdentificationTask",
    "ModuleProblem",
    "UnstableNetworkError",
    "sensitivity",
    "simulate",
    "calibrate_noise",
    "spectral_radius",
    "build_problem",
]


class UnstableNetworkError(RuntimeError):
    """The network (or a requested sensitivity path) does not decay."""


@dataclass(frozen=True)
class NetworkModel:
    """L-node network with modules keyed (j, i): signal flows from node i
    into node j.  Node indices are one-based throughout."""

    L: int
    modules: dict[tuple[int, int], RationalTF]
    references: tuple[int, ...]
    noise_ratios: dict[int, float] = field(default_factory=dict)
    noise_variances: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "references", tuple(sorted(self.references)))
        for (j, i) in self.modules:
            if j == i:
                raise ValueError(f"self-loop edge ({j},{i}) is not allowed")
            if not (1 <= j <= self.L and 1 <= i <= self.L):
                raise ValueError(f"edge ({j},{i}) outside the node range 1..{self.L}")
        for l in self.references:
            if not 1 <= l <= self.L:
                raise ValueError(f"reference index {l} outside the node range")
        overlap = set(self.noise_ratios) & set(self.noise_variances)
        if overlap:
            raise ValueError(f"nodes {sorted(overlap)} have both a ratio and a variance")
        # well-posedness: I minus the direct-feedthrough matrix must be invertible
        D0 = self.feedthrough_matrix()
        if abs(np.linalg.det(np.eye(self.L) - D0)) < 1e-12:
            raise ValueError("network is not well posed: I - G(inf) is singular")

    def feedthrough_matrix(self) -> np.ndarray:
        D0 = np.zeros((self.L, self.L))
        for (j, i), tf in self.modules.items():
            D0[j - 1, i - 1] = tf.b0
        return D0


def _assemble(net: NetworkModel):
    """Global state-space pieces: x+ = A x + B w,  w = J (C x + r) with
    J = (I - D0)^-1 resolving any direct feedthrough."""
    blocks = []
    nx = 0
    for (j, i), tf in sorted(net.modules.items()):
        # delay-operator coefficients are descending-power coefficients once
        # numerator and denominator are padded to a common length
        num, den = tf.num_full(), tf.den_full()
        width = max(num.size, den.size)
        num = np.pad(num, (0, width - num.size))
        den = np.pad(den, (0, width - den.size))
        with warnings.catch_warnings():
            # strictly proper numerators always trip scipy's leading-zero warning
            warnings.simplefilter("ignore", scipy.signal.BadCoefficients)
            a, b, c, d = scipy.signal.tf2ss(num, den)
        blocks.append((j - 1, i - 1, a, b, c))
        nx += a.shape[0]
    A = np.zeros((nx, nx))
    B = np.zeros((nx, net.L))
    C = np.zeros((net.L, nx))
    at = 0
    for j, i, a, b, c in blocks:
        k = a.shape[0]
        A[at : at + k, at : at + k] = a
        B[at : at + k, i] = b[:, 0]
        C[j, at : at + k] = c[0]
        at += k
    J = np.linalg.inv(np.eye(net.L) - net.feedthrough_matrix())
    return A, B, C, J


def spectral_radius(net: NetworkModel) -> float:
    """Spectral radius of the closed-loop state matrix; < 1 means stable."""
    A, B, C, J = _assemble(net)
    if A.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(A + B @ J @ C))))


def _simulate_nodes(net: NetworkModel, r: np.ndarray) -> np.ndarray:
    """Noise-free internal variables for a given N x L reference matrix."""
    A, B, C, J = _assemble(net)
    N = r.shape[0]
    w = np.empty((N, net.L))
    x = np.zeros(A.shape[0])
    for t in range(N):
        wt = J @ (C @ x + r[t])
        w[t] = wt
        x = A @ x + B @ wt
    return w


def sensitivity(
    net: NetworkModel,
    n: int,
    nodes: tuple[int, ...] | None = None,
    horizon: int = 50,
) -> dict[tuple[int, int], np.ndarray]:
    """Truncated impulse responses of the sensitivity paths (I - G)^-1.

    Returns a map (i, l) -> length-n array of s_il, the response at node i
    to a unit impulse in reference l, for i in ``nodes`` (default: all) and
    l in the reference set.  The first entry of each array is the lag-0
    sample, so a pure identity path comes back as a discrete delta.

    A response still growing past the n-sample window (checked over an
    extra ``horizon`` samples) raises UnstableNetworkError.
    """
    if n < 1:
        raise ValueError(f"truncation length must be >= 1, got {n}")
    nodes = tuple(range(1, net.L + 1)) if nodes is None else tuple(nodes)
    out: dict[tuple[int, int], np.ndarray] = {}
    for l in net.references:
        r = np.zeros((n + horizon, net.L))
        r[0, l - 1] = 1.0
        w = _simulate_nodes(net, r)
        for i in nodes:
            resp = w[:, i - 1]
            head = np.abs(resp[:n]).max()
            tail = np.abs(resp[n:]).max() if horizon > 0 else 0.0
            if tail > max(head, 1e-12):
                raise UnstableNetworkError(
                    f"sensitivity path ({i},{l}) still growing after {n} samples"
                )
            out[(i, l)] = resp[:n].copy()
    return out


def calibrate_noise(signal_variance: float, ratio: float) -> float:
    """Noise variance for a node: ratio * signal variance, where the ratio
    is var(e)/var(w)."""
    if not signal_variance > 0.0:
        raise ValueError(f"signal variance must be positive, got {signal_variance!r}")
    if not ratio > 0.0:
        raise ValueError(f"noise-to-signal ratio must be positive, got {ratio!r}")
    return ratio * signal_variance


@dataclass(frozen=True)
class Dataset:
    """One simulated record: references, noise-free internal variables,
    noisy measurements, and the noise variances actually applied."""

    N: int
    r: np.ndarray        # (N, L)
    w_tilde: np.ndarray  # (N, L)
    w_clean: np.ndarray  # (N, L)
    true_sigmas: np.ndarray  # (L,)
    seed: int

    def node(self, k: int) -> np.ndarray:
        """Noisy measurement column of node k (one-based)."""
        return self.w_tilde[:, k - 1]

    def reference(self, l: int) -> np.ndarray:
        return self.r[:, l - 1]


def simulate(net: NetworkModel, N: int, n: int, seed) -> Dataset:
    """Simulate ``N`` samples of the network driven by unit-variance white
    Gaussian references, then add measurement noise per the noise spec.

    ``n`` is the sensitivity truncation the dataset is meant to support; it
    sizes the stability pre-check.  Fully reproducible from ``seed``: the
    reference columns are drawn first (in node order), then one N x L noise
    panel.
    """
    if N < 1:
        raise ValueError(f"sample count must be >= 1, got {N}")
    rho = spectral_radius(net)
    if rho >= 1.0:
        raise UnstableNetworkError(f"network spectral radius {rho:.4f} >= 1")
    # also insist the truncation window sees decay
    sensitivity(net, n)

    seed_int = int(np.random.SeedSequence(seed).generate_state(1)[0]) if not isinstance(seed, (int, np.integer)) else int(seed)
    rng = np.random.default_rng(seed_int)
    r = np.zeros((N, net.L))
    for l in net.references:
        r[:, l - 1] = rng.standard_normal(N)
    w_clean = _simulate_nodes(net, r)

    sigmas = np.zeros(net.L)
    for k, var in net.noise_variances.items():
        if not var >= 0.0:
            raise ValueError(f"noise variance of node {k} must be >= 0, got {var!r}")
        sigmas[k - 1] = var
    for k, ratio in net.noise_ratios.items():
        sigmas[k - 1] = calibrate_noise(float(np.var(w_clean[:, k - 1], ddof=1)), ratio)

    e = rng.standard_normal((N, net.L)) * np.sqrt(sigmas)
    return Dataset(
        N=N,
        r=r,
        w_tilde=w_clean + e,
        w_clean=w_clean,
        true_sigmas=sigmas,
        seed=seed_int,
    )


@dataclass(frozen=True)
class IdentificationTask:
    """What to estimate: the modules feeding ``output`` from ``inputs``,
    using the given references, with sensitivity paths truncated at ``n``.
    ``downstream`` optionally names an extra sensor behind the target."""

    output: int
    inputs: tuple[int, ...]
    references: tuple[int, ...]
    n: int
    downstream: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "references", tuple(sorted(self.references)))
        if self.n < 1:
            raise ValueError("sensitivity truncation must be >= 1")
        if self.output in self.inputs:
            raise ValueError("the output node cannot be one of its own inputs")


def task_for(net: NetworkModel, output: int, n: int, downstream: int | None = None) -> IdentificationTask:
    """Derive the task for one output node from the network topology."""
    inputs = tuple(sorted(i for (j, i) in net.modules if j == output))
    if not inputs:
        raise ValueError(f"node {output} has no incoming modules")
    return IdentificationTask(
        output=output, inputs=inputs, references=net.references, n=n, downstream=downstream
    )


@dataclass
class ModuleProblem:
    """Estimation-ready view of one dataset for one task.

    R stacks the reference Toeplitz operators [R_l1 ... R_lm] (N x n*m);
    ``w_inputs`` are the measured module inputs, ``w_out`` the measured
    module output with its own reference (if any) subtracted, and ``z_f``
    the optional downstream sensor, likewise reference-corrected.
    """

    R: np.ndarray           # (N, n*m)
    w_inputs: np.ndarray    # (N, p)
    w_out: np.ndarray       # (N,)
    params: list            # p module parametrizations
    n: int
    N: int
    p: int
    m: int
    task: IdentificationTask
    z_f: np.ndarray | None = None

    @property
    def z(self) -> np.ndarray:
        """Stacked data vector [inputs...; output]."""
        return np.concatenate([self.w_inputs[:, i] for i in range(self.p)] + [self.w_out])


def build_problem(dataset: Dataset, task: IdentificationTask, params: list) -> ModuleProblem:
    """Assemble the regression quantities shared by every estimator."""
    if len(params) != len(task.inputs):
        raise ValueError(
            f"{len(task.inputs)} input modules but {len(params)} parametrizations"
        )
    refs = [dataset.reference(l) for l in task.references]
    if not any(np.any(r != 0.0) for r in refs):
        raise ValueError("all reference signals are zero; nothing to identify from")
    R = np.hstack([toeplitz(r, task.n) for r in refs])
    w_inputs = np.column_stack([dataset.node(i) for i in task.inputs])
    w_out = dataset.node(task.output) - dataset.reference(task.output)
    z_f = None
    if task.downstream is not None:
        z_f = dataset.node(task.downstream) - dataset.reference(task.downstream)
    return ModuleProblem(
        R=R,
        w_inputs=w_inputs,
        w_out=w_out,
        params=list(params),
        n=task.n,
        N=dataset.N,
        p=len(task.inputs),
        m=len(task.references),
        task=task,
        z_f=z_f,
    )
