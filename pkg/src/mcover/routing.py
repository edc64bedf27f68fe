"""Mixing kernels and permanent-weighted permutation routing.

A mixing kernel is a nonnegative M x M matrix Q whose rows index destination
covers and whose columns index source covers.  Routing permutations are drawn
with probability proportional to prod_a Q[a, rho(a)], i.e. the permanent-
normalized matching law.  Sampled permutations are collected into quenched
banks and collapsed into row-stochastic empirical mixers.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

# Exact enumeration of S_M is used up to this size (8! = 40320 matchings).
EXACT_SAMPLING_MAX_M = 8
# Ryser's formula is O(2^M * M); refuse anything bigger.
PERMANENT_MAX_M = 14

SINKHORN_TOL = 1e-8
SINKHORN_MAX_ITERS = 10_000


class DegenerateKernelError(ValueError):
    """Every permutation has zero weight under the kernel."""


class UnsupportedSizeError(ValueError):
    """Kernel too large for an exact algorithm."""


class SinkhornConvergenceError(RuntimeError):
    """Sinkhorn balancing did not reach tolerance within the iteration cap."""

    def __init__(self, deviation: float, iters: int):
        self.deviation = deviation
        self.iters = iters
        super().__init__(
            f"sinkhorn balancing stalled at deviation {deviation:.3e} "
            f"after {iters} iterations"
        )


@dataclass(frozen=True)
class MixKernel:
    """Nonnegative M x M routing kernel; rows = destination, cols = source."""

    entries: np.ndarray
    family: str = "explicit"
    mu: float = 0.0
    sigma: float = math.inf

    def __post_init__(self):
        q = np.asarray(self.entries, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1] or q.shape[0] < 1:
            raise ValueError(f"kernel must be square and nonempty, got shape {q.shape}")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("kernel entries must be finite and nonnegative")
        if np.any(q.sum(axis=1) == 0) or np.any(q.sum(axis=0) == 0):
            raise DegenerateKernelError("kernel has an all-zero row or column")
        q = q.copy()
        q.setflags(write=False)
        object.__setattr__(self, "entries", q)

    @property
    def m(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class PermutationBank:
    """Quenched collection of routing permutations (one per row of ``perms``)."""

    perms: np.ndarray  # (S, M) int, perms[s, a] = source cover read by destination a
    source_kernel: MixKernel
    seed: int | None = None

    def __post_init__(self):
        p = np.asarray(self.perms, dtype=np.int64)
        if p.ndim != 2:
            raise ValueError("perms must be a 2-d array of cover images")
        m = p.shape[1]
        ident = np.arange(m)
        for row in p:
            if not np.array_equal(np.sort(row), ident):
                raise ValueError(f"not a bijection on 0..{m - 1}: {row}")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "perms", p)

    @property
    def size(self) -> int:
        return self.perms.shape[0]

    @property
    def m(self) -> int:
        return self.perms.shape[1]


@dataclass(frozen=True)
class EmpiricalMixer:
    """Row-stochastic M x M mixer; entry [b, a] = bank fraction routing a into b."""

    entries: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.entries, dtype=np.float64)
        q.setflags(write=False)
        object.__setattr__(self, "entries", q)

    @property
    def m(self) -> int:
        return self.entries.shape[0]


def ring_distance(a, b, m: int):
    """Signed minimal circular distance from b to a on the ring Z_m, in (-m/2, m/2]."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = np.mod(d, m)
    return np.where(d > m / 2, d - m, d)


def gaussian_ring_kernel(m: int, mu: float, sigma: float) -> MixKernel:
    """Directional Gaussian kernel on the cover ring, Sinkhorn-balanced.

    Row a peaks at the column(s) nearest a + mu (mod m); sigma sets the
    width and sigma = inf gives the uniform kernel.
    """
    if m < 1:
        raise ValueError(f"cover count must be >= 1, got {m}")
    if not sigma > 0:
        raise ValueError(f"kernel width must be positive, got {sigma}")
    if math.isinf(sigma):
        entries = np.full((m, m), 1.0 / m)
        return MixKernel(entries, family="gaussian_ring", mu=mu, sigma=sigma)
    idx = np.arange(m, dtype=np.float64)
    target = idx[:, None] + mu  # row a aims at position a + mu
    d = ring_distance(idx[None, :], target, m)
    with np.errstate(under="ignore"):
        raw = np.exp(-(d * d) / (2.0 * sigma * sigma))
    balanced = _sinkhorn(raw, SINKHORN_MAX_ITERS, SINKHORN_TOL)
    return MixKernel(balanced, family="gaussian_ring", mu=mu, sigma=sigma)


def uniform_kernel(m: int) -> MixKernel:
    if m < 1:
        raise ValueError(f"cover count must be >= 1, got {m}")
    return MixKernel(np.full((m, m), 1.0 / m), family="uniform", sigma=math.inf)


def identity_kernel(m: int) -> MixKernel:
    if m < 1:
        raise ValueError(f"cover count must be >= 1, got {m}")
    return MixKernel(np.eye(m), family="identity", sigma=0.0)


def kernel_from_family(family: str, m: int, mu: float = 0.0,
                       sigma: float = math.inf) -> MixKernel:
    """Build a kernel from its config-file family tag."""
    if family in ("gaussian_ring", "ring"):
        return gaussian_ring_kernel(m, mu, sigma)
    if family == "uniform":
        return uniform_kernel(m)
    if family == "identity":
        return identity_kernel(m)
    raise ValueError(f"unknown kernel family {family!r}")


def _sinkhorn(q: np.ndarray, max_iters: int, tol: float) -> np.ndarray:
    q = np.array(q, dtype=np.float64)
    if np.any(q.sum(axis=1) == 0) or np.any(q.sum(axis=0) == 0):
        raise ValueError("cannot balance a matrix with an all-zero row or column")
    deviation = np.inf
    for _ in range(max_iters):
        rows = q.sum(axis=1)
        cols = q.sum(axis=0)
        deviation = max(np.abs(rows - 1.0).max(), np.abs(cols - 1.0).max())
        if deviation < tol:
            return q
        q = q / rows[:, None]
        q = q / q.sum(axis=0)[None, :]
    rows = q.sum(axis=1)
    cols = q.sum(axis=0)
    deviation = max(np.abs(rows - 1.0).max(), np.abs(cols - 1.0).max())
    if deviation < tol:
        return q
    raise SinkhornConvergenceError(deviation, max_iters)


def sinkhorn_balance(kernel: MixKernel, max_iters: int = SINKHORN_MAX_ITERS,
                     tol: float = SINKHORN_TOL) -> MixKernel:
    """Rescale to a doubly stochastic matrix by alternating row/column normalization."""
    if not tol > 0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    balanced = _sinkhorn(kernel.entries, max_iters, tol)
    return MixKernel(balanced, family=kernel.family, mu=kernel.mu, sigma=kernel.sigma)


def permanent(kernel: MixKernel) -> float:
    """Exact matrix permanent via Ryser's inclusion-exclusion over column subsets."""
    q = kernel.entries
    m = kernel.m
    if m > PERMANENT_MAX_M:
        raise UnsupportedSizeError(
            f"exact permanent limited to M <= {PERMANENT_MAX_M} (got {m}); "
            "MCMC permutation sampling never needs the normalizer"
        )
    # Gray-code walk over nonempty column subsets, updating row sums in O(M).
    rowsums = np.zeros(m, dtype=np.float64)
    total = 0.0
    gray = 0
    for k in range(1, 1 << m):
        bit = k & -k
        j = bit.bit_length() - 1
        gray ^= bit
        if gray & bit:
            rowsums += q[:, j]
        else:
            rowsums -= q[:, j]
        popcount = bin(gray).count("1")
        sign = -1.0 if (m - popcount) % 2 else 1.0
        total += sign * rowsums.prod()
    return float(total)


def enumerate_permutation_law(kernel: MixKernel):
    """All M! permutations with their matching-law probabilities.

    Returns ``(perms, probs)`` where ``perms`` has shape (M!, M).  Only
    available for M <= EXACT_SAMPLING_MAX_M.
    """
    m = kernel.m
    if m > EXACT_SAMPLING_MAX_M:
        raise UnsupportedSizeError(
            f"exact enumeration limited to M <= {EXACT_SAMPLING_MAX_M} (got {m})"
        )
    perms = np.array(list(itertools.permutations(range(m))), dtype=np.int64)
    weights = kernel.entries[np.arange(m)[None, :], perms].prod(axis=1)
    z = weights.sum()
    if z <= 0.0:
        raise DegenerateKernelError("all permutation weights are zero")
    return perms, weights / z


def _greedy_matching(q: np.ndarray) -> np.ndarray:
    """Row-by-row greedy high-weight matching; Hungarian fallback if it hits zero."""
    m = q.shape[0]
    perm = np.empty(m, dtype=np.int64)
    free = np.ones(m, dtype=bool)
    ok = True
    for a in range(m):
        row = np.where(free, q[a], -1.0)
        b = int(np.argmax(row))
        if q[a, b] <= 0.0:
            ok = False
            break
        perm[a] = b
        free[b] = False
    if ok:
        return perm
    from scipy.optimize import linear_sum_assignment

    with np.errstate(divide="ignore"):
        cost = -np.log(q)
    rows, cols = linear_sum_assignment(np.where(np.isfinite(cost), cost, 1e300))
    if np.any(q[rows, cols] <= 0.0):
        raise DegenerateKernelError("no positive-weight matching exists")
    return cols.astype(np.int64)


def _mcmc_sample_batch(kernel: MixKernel, n_samples: int,
                       rng: np.random.Generator) -> np.ndarray:
    """One Metropolis chain per sample, transposition proposals, shared burn-in length."""
    q = kernel.entries
    m = kernel.m
    if m == 1:
        return np.zeros((n_samples, 1), dtype=np.int64)
    start = _greedy_matching(q)
    state = np.tile(start, (n_samples, 1))
    burn_in = 50 * m * m
    chain = np.arange(n_samples)
    for _ in range(burn_in):
        i = rng.integers(m, size=n_samples)
        j = rng.integers(m - 1, size=n_samples)
        j = j + (j >= i)
        si = state[chain, i]
        sj = state[chain, j]
        num = q[i, sj] * q[j, si]
        den = q[i, si] * q[j, sj]
        accept = rng.random(n_samples) * den < num
        ai = np.where(accept, sj, si)
        aj = np.where(accept, si, sj)
        state[chain, i] = ai
        state[chain, j] = aj
    return state


def sample_permutation(kernel: MixKernel, rng: np.random.Generator,
                       method: str = "auto") -> np.ndarray:
    """Draw one permutation with probability prod_a Q[a, rho(a)] / perm(Q).

    Exact enumeration for M <= 8; a Metropolis chain over transpositions
    (burn-in 50 M^2 steps from a greedy matching) above that.
    """
    return sample_bank(kernel, 1, rng, method=method).perms[0]


def sample_bank(kernel: MixKernel, s_perm: int, rng: np.random.Generator,
                method: str = "auto", seed: int | None = None) -> PermutationBank:
    """Draw ``s_perm`` independent routing permutations and freeze them."""
    if s_perm < 1:
        raise ValueError(f"bank size must be >= 1, got {s_perm}")
    if method == "auto":
        method = "exact" if kernel.m <= EXACT_SAMPLING_MAX_M else "mcmc"
    if method == "exact":
        perms, probs = enumerate_permutation_law(kernel)
        idx = rng.choice(perms.shape[0], size=s_perm, p=probs)
        drawn = perms[idx]
    elif method == "mcmc":
        drawn = _mcmc_sample_batch(kernel, s_perm, rng)
    else:
        raise ValueError(f"unknown sampling method {method!r}")
    return PermutationBank(drawn, source_kernel=kernel, seed=seed)


def empirical_mixer(bank: PermutationBank) -> EmpiricalMixer:
    """Collapse a bank into the row-stochastic mixer Qhat[b, a] = freq(rho(b) = a)."""
    if bank.size < 1:
        raise ValueError("cannot build a mixer from an empty bank")
    m = bank.m
    counts = (bank.perms[:, :, None] == np.arange(m)[None, None, :]).sum(axis=0)
    return EmpiricalMixer(counts / bank.size)


def save_bank(bank: PermutationBank, path) -> None:
    """Write one permutation per line, space-separated 1-based images."""
    with open(path, "w", encoding="utf-8") as fh:
        for row in bank.perms:
            fh.write(" ".join(str(v + 1) for v in row) + "\n")


def load_bank(path, kernel: MixKernel) -> PermutationBank:
    """Read a bank written by :func:`save_bank`."""
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([int(v) - 1 for v in line.split()])
    return PermutationBank(np.array(rows, dtype=np.int64), source_kernel=kernel)
