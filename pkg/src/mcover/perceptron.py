"""Binary teacher-student perceptron with routed cavity margins.

Margins are stored as integers scaled by sqrt(N): with +-1 patterns and
+-1 weights every margin is (integer value) / sqrt(N), so the incremental
cache is exact and the pattern-error count is a plain integer comparison.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .routing import PermutationBank


class DegenerateCollapseError(ValueError):
    """Collapsed weight vector is identically zero."""


class CacheConsistencyError(RuntimeError):
    """Incremental routed-margin cache diverged from a from-scratch recompute."""


@dataclass(frozen=True)
class TeacherStudentInstance:
    """Gauged pattern matrix G = y * x with a planted +-1 teacher."""

    gauged: np.ndarray      # (P, N) int8, entries +-1
    w_star: np.ndarray      # (N,) int8, entries +-1
    raw_patterns: np.ndarray  # (P, N) int8, the ungauged inputs
    labels: np.ndarray      # (P,) int8, teacher labels
    alpha: float

    @property
    def n(self) -> int:
        return self.gauged.shape[1]

    @property
    def p(self) -> int:
        return self.gauged.shape[0]


def generate_instance(n: int, alpha: float, rng: np.random.Generator) -> TeacherStudentInstance:
    """Sample teacher, +-1 patterns, and labels; zero-margin patterns are redrawn."""
    if n < 1:
        raise ValueError(f"input dimension must be >= 1, got {n}")
    if not alpha > 0:
        raise ValueError(f"loading factor must be positive, got {alpha}")
    p = int(round(alpha * n))
    if p < 1:
        raise ValueError(f"alpha * n rounds to zero patterns (alpha={alpha}, n={n})")
    w_star = (rng.integers(0, 2, size=n, dtype=np.int8) * 2 - 1).astype(np.int8)
    x = (rng.integers(0, 2, size=(p, n), dtype=np.int8) * 2 - 1).astype(np.int8)
    t = x @ w_star.astype(np.int64)
    while np.any(t == 0):
        ties = np.flatnonzero(t == 0)
        x[ties] = (rng.integers(0, 2, size=(ties.size, n), dtype=np.int8) * 2 - 1).astype(np.int8)
        t[ties] = x[ties] @ w_star.astype(np.int64)
    y = np.sign(t).astype(np.int8)
    gauged = (y[:, None] * x).astype(np.int8)
    return TeacherStudentInstance(gauged=gauged, w_star=w_star, raw_patterns=x,
                                  labels=y, alpha=alpha)


@dataclass(frozen=True)
class AnnealSchedule:
    """Linear temperature ramp from t_max down to t_min in steps of size dt."""

    t_max: float = 0.4
    t_min: float = 0.01
    dt: float = 1e-4

    def __post_init__(self):
        if not (self.t_max > self.t_min > 0):
            raise ValueError("need t_max > t_min > 0")
        if not self.dt > 0:
            raise ValueError("need dt > 0")

    @property
    def num_sweeps(self) -> int:
        # tolerate float noise so (0.4, 0.01, 1e-4) gives exactly 3900 sweeps
        return int(math.ceil((self.t_max - self.t_min) / self.dt - 1e-9))

    def temperatures(self) -> np.ndarray:
        """Strictly decreasing sweep temperatures ending exactly at t_min."""
        n = self.num_sweeps
        if n == 1:
            return np.array([self.t_min])
        return np.linspace(self.t_max, self.t_min, n)


def glauber_flip_probability(delta_e: float, t: float) -> float:
    """Heat-bath acceptance 1 / (1 + exp(delta_e / t)), safe for extreme arguments."""
    if not t > 0:
        raise ValueError(f"temperature must be positive, got {t}")
    x = delta_e / t
    if x >= 0:
        z = math.exp(-x)
        return z / (1.0 + z)
    return 1.0 / (1.0 + math.exp(x))


def pattern_errors(margins) -> int:
    """Number of violated patterns; a tie (margin exactly zero) counts as an error."""
    return int(np.count_nonzero(np.asarray(margins) <= 0))


def random_ensemble(m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """M independent uniform +-1 weight vectors (one per cover), shape (M, N)."""
    return (rng.integers(0, 2, size=(m, n), dtype=np.int8) * 2 - 1).astype(np.int8)


@dataclass(frozen=True)
class DestinationBank:
    """Quenched channel structure: S destination sites and per-(site, channel) routes.

    ``route_idx[q, s]`` indexes ``perms_ext``; the final row of ``perms_ext``
    is the identity, assigned wherever q is the channel's own destination.
    """

    dest_sites: np.ndarray    # (S,) site index of each channel
    route_idx: np.ndarray     # (N, S) int16 into perms_ext
    perms_ext: np.ndarray     # (S_perm + 1, M); last row = identity
    inv_perms_ext: np.ndarray  # inverse permutations, same layout

    @property
    def n_channels(self) -> int:
        return self.dest_sites.shape[0]

    @property
    def m(self) -> int:
        return self.perms_ext.shape[1]


def build_destination_bank(n: int, bank: PermutationBank, n_channels: int,
                           rng: np.random.Generator) -> DestinationBank:
    """Sample destination sites without replacement and assign routes from the bank."""
    if not 1 <= n_channels <= n:
        raise ValueError(f"need 1 <= channels <= {n}, got {n_channels}")
    m = bank.m
    s_perm = bank.size
    perms_ext = np.vstack([bank.perms, np.arange(m, dtype=np.int64)])
    inv = np.empty_like(perms_ext)
    for k, row in enumerate(perms_ext):
        inv[k, row] = np.arange(m)
    dest = rng.choice(n, size=n_channels, replace=False)
    route_idx = rng.integers(0, s_perm, size=(n, n_channels)).astype(np.int16)
    route_idx[dest, np.arange(n_channels)] = s_perm  # self-route is the identity
    return DestinationBank(dest_sites=dest, route_idx=route_idx,
                           perms_ext=perms_ext, inv_perms_ext=inv)


class RoutedMarginCache:
    """All routed margins, maintained incrementally under single-spin flips.

    ``scaled[s, a, mu]`` holds sqrt(N) * margin of pattern mu in channel s for
    destination cover a; ``slice_errors[s, a]`` counts its violated patterns.
    """

    def __init__(self, instance: TeacherStudentInstance, weights: np.ndarray,
                 dbank: DestinationBank):
        self.instance = instance
        self.dbank = dbank
        self._g_cols = np.ascontiguousarray(instance.gauged.T).astype(np.int32)
        self.scaled = self._compute_scaled(weights)
        self.slice_errors = (self.scaled <= 0).sum(axis=2).astype(np.int64)

    def _compute_scaled(self, weights: np.ndarray) -> np.ndarray:
        g64 = self.instance.gauged.astype(np.int64)
        s_chan, m = self.dbank.n_channels, self.dbank.m
        scaled = np.empty((s_chan, m, self.instance.p), dtype=np.int32)
        sites = np.arange(self.instance.n)
        for s in range(s_chan):
            for a in range(m):
                src = self.dbank.perms_ext[self.dbank.route_idx[:, s], a]
                w_eff = weights[src, sites].astype(np.int64)
                scaled[s, a] = g64 @ w_eff
        return scaled

    @property
    def margins(self) -> np.ndarray:
        """Routed margins as reals, shape (S, M, P)."""
        return self.scaled / math.sqrt(self.instance.n)

    def total_error_count(self) -> int:
        return int(self.slice_errors.sum())

    def lifted_energy(self) -> float:
        """Channel-averaged violated-pattern count summed over covers."""
        return self.total_error_count() / self.dbank.n_channels

    def verify(self, weights: np.ndarray) -> None:
        """Assert the incremental state equals a from-scratch recomputation."""
        fresh = self._compute_scaled(weights)
        if not np.array_equal(fresh, self.scaled):
            raise CacheConsistencyError("routed margins diverged from recomputation")
        fresh_err = (fresh <= 0).sum(axis=2)
        if not np.array_equal(fresh_err, self.slice_errors):
            raise CacheConsistencyError("slice error counts diverged from recomputation")


def vanilla_anneal(instance: TeacherStudentInstance, w: np.ndarray,
                   schedule: AnnealSchedule, rng: np.random.Generator):
    """Single-copy Glauber annealing on the pattern-error count.

    Returns ``(weights, energy_trace)``; the trace has one entry per sweep.
    """
    w = w.copy()
    n = instance.n
    g_cols = np.ascontiguousarray(instance.gauged.T).astype(np.int32)
    margins = instance.gauged.astype(np.int64) @ w.astype(np.int64)
    margins = margins.astype(np.int32)
    err = int(np.count_nonzero(margins <= 0))
    trace = []
    for t in schedule.temperatures():
        for q in rng.permutation(n):
            new = margins + (-2 * int(w[q])) * g_cols[q]
            new_err = int(np.count_nonzero(new <= 0))
            p = glauber_flip_probability(float(new_err - err), t)
            if rng.random() < p:
                w[q] = -w[q]
                margins = new
                err = new_err
        trace.append(float(err))
    return w, trace


def mcover_anneal(instance: TeacherStudentInstance, ensemble: np.ndarray,
                  dbank: DestinationBank, cache: RoutedMarginCache,
                  schedule: AnnealSchedule, rng: np.random.Generator,
                  check_every: int = 0):
    """Glauber annealing of the routed ensemble under the lifted error count.

    A flip of cover g at site q touches one destination cover per channel
    (the inverse route of g); its energy change is the channel average of the
    violated-count changes.  ``check_every`` > 0 re-verifies the cache every
    that many sweeps.  Returns ``(ensemble, energy_trace)``.
    """
    ensemble = ensemble.copy()
    n, m = instance.n, dbank.m
    s_chan = dbank.n_channels
    g_cols = cache._g_cols
    route_idx = dbank.route_idx
    inv = dbank.inv_perms_ext
    scaled = cache.scaled
    slice_err = cache.slice_errors
    chan = np.arange(s_chan)
    trace = []
    for sweep, t in enumerate(schedule.temperatures()):
        for idx in rng.permutation(m * n):
            gamma, q = divmod(int(idx), n)
            alphas = inv[route_idx[q], gamma]
            rows = scaled[chan, alphas]
            new = rows + (-2 * int(ensemble[gamma, q])) * g_cols[q]
            new_counts = (new <= 0).sum(axis=1)
            d_int = int(new_counts.sum()) - int(slice_err[chan, alphas].sum())
            p = glauber_flip_probability(d_int / s_chan, t)
            if rng.random() < p:
                ensemble[gamma, q] = -ensemble[gamma, q]
                scaled[chan, alphas] = new
                slice_err[chan, alphas] = new_counts
        trace.append(float(slice_err.sum()) / s_chan)
        if check_every and (sweep + 1) % check_every == 0:
            cache.verify(ensemble)
    return ensemble, trace


def coupling_energy(replicas: np.ndarray, gamma: float) -> float:
    """All-pair ferromagnetic attraction -(gamma/N) sum_{a<b} w^a . w^b."""
    m, n = replicas.shape
    total = 0.0
    r64 = replicas.astype(np.int64)
    for a in range(m):
        for b in range(a + 1, m):
            total += float(r64[a] @ r64[b])
    return -(gamma / n) * total


def rsa_anneal(instance: TeacherStudentInstance, replicas: np.ndarray, gamma: float,
               schedule: AnnealSchedule, rngs):
    """Replicated annealing baseline: per-replica error count plus pair coupling.

    ``rngs`` supplies one generator per replica so that gamma = 0 reproduces
    independent single-copy runs stream for stream.  Returns
    ``(replicas, energy_trace)`` with the trace holding the total energy.
    """
    m, n = replicas.shape
    if m < 2:
        raise ValueError(f"replicated annealing needs M >= 2, got {m}")
    if len(rngs) != m:
        raise ValueError(f"need one RNG stream per replica ({m}), got {len(rngs)}")
    replicas = replicas.copy()
    g_cols = np.ascontiguousarray(instance.gauged.T).astype(np.int32)
    g64 = instance.gauged.astype(np.int64)
    margins = np.ascontiguousarray((g64 @ replicas.astype(np.int64).T).T.astype(np.int32))
    errs = (margins <= 0).sum(axis=1)
    totals = replicas.astype(np.int64).sum(axis=0)
    couple_scale = 2.0 * gamma / n
    trace = []
    for t in schedule.temperatures():
        for a in range(m):
            rng = rngs[a]
            row = margins[a]
            for q in rng.permutation(n):
                w_old = int(replicas[a, q])
                new = row + (-2 * w_old) * g_cols[q]
                new_err = int(np.count_nonzero(new <= 0))
                d_base = new_err - int(errs[a])
                d_couple = couple_scale * w_old * (int(totals[q]) - w_old)
                p = glauber_flip_probability(d_base + d_couple, t)
                if rng.random() < p:
                    replicas[a, q] = -w_old
                    row = new
                    errs[a] = new_err
                    totals[q] -= 2 * w_old
            margins[a] = row
        trace.append(float(errs.sum()) + coupling_energy(replicas, gamma))
    return replicas, trace


def overlap_to_error(r: float) -> float:
    """Generalization error arccos(R) / pi of a student with teacher overlap R."""
    return math.acos(max(-1.0, min(1.0, r))) / math.pi


def collapse_and_score(ensemble: np.ndarray, w_star: np.ndarray):
    """Average the covers and score the collapsed student against the teacher.

    Returns ``(R, eps_g)``.  Raises :class:`DegenerateCollapseError` when the
    covers cancel exactly; callers record eps_g = 0.5 for that event.
    """
    weights = np.atleast_2d(ensemble).astype(np.float64)
    w_bar = weights.mean(axis=0)
    norm = np.linalg.norm(w_bar)
    if norm == 0.0:
        raise DegenerateCollapseError("collapsed weights are identically zero")
    r = float(w_bar @ w_star.astype(np.float64) / (norm * np.linalg.norm(w_star)))
    r = max(-1.0, min(1.0, r))
    return r, overlap_to_error(r)
