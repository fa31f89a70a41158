"""Hierarchical Gaussian fields on finite N-ary trees.

Leaf x of a depth-D tree gets phi_x = sum_q beta^{-q} zeta^{(q)}_{x // N^q},
where the layer-q variables come in sibling blocks of N with covariance
I - J/N.  Leaf indices are base-N numbers with the most significant digit
being the coarsest layer, so the leaves below any node form a contiguous range.

Deep trees are handled by sampling a *subset*: the leaves whose digits all lie
in ``0..k-1``.  Every block still draws its N fluctuations and is centred
before the subset is taken, so the joint law of the retained leaves is exact.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from numba import njit

from .blockmap import _even_eval
from .errors import DegenerateInput, MemoryGuardError, NumericalFailure, TuningFailure
from .rng import parallel_map, stream

MAX_LEAVES = 2**24


@dataclass(frozen=True)
class TreeAddress:
    digits: tuple
    N: int

    def __post_init__(self):
        object.__setattr__(self, "digits", tuple(int(d) for d in self.digits))
        if not self.digits:
            raise ValueError("empty address")
        if any(not 0 <= d < self.N for d in self.digits):
            raise ValueError(f"digits must lie in [0, {self.N})")

    @property
    def depth(self):
        return len(self.digits)

    @property
    def index(self):
        i = 0
        for d in self.digits:
            i = i * self.N + d
        return i

    @classmethod
    def from_index(cls, index, N, depth):
        if not 0 <= index < N**depth:
            raise ValueError("leaf index out of range")
        digits = []
        for _ in range(depth):
            index, r = divmod(index, N)
            digits.append(r)
        return cls(tuple(reversed(digits)), N)


def ultrametric_distance(x, y, alpha):
    """alpha^q with q the height of the first common ancestor; 0 when x == y."""
    if x.depth != y.depth:
        raise ValueError(f"addresses of different depth ({x.depth} vs {y.depth})")
    if x.digits == y.digits:
        return 0.0
    prefix = 0
    for a, b in zip(x.digits, y.digits):
        if a != b:
            break
        prefix += 1
    return float(alpha) ** (x.depth - prefix)


def separation_level(i, j, N):
    """Height of the first common ancestor of leaves i and j (0 when equal)."""
    q = 0
    while i != j:
        i //= N
        j //= N
        q += 1
    return q


# --- exact oracle ------------------------------------------------------------

def exact_pair_covariance(params, D, i, j):
    """E[phi_i phi_j] on the depth-D tree, summed layer by layer over the ancestors of i and j."""
    N, b2 = params.N, params.beta**-2
    total = 0.0
    for q in range(D):
        ai, aj = i // N**q, j // N**q
        if ai == aj:
            total += (1.0 - 1.0 / N) * b2**q
        elif ai // N == aj // N:
            total += -b2**q / N
    return total


def exact_covariance_at_level(params, D, level):
    """Covariance of two leaves whose first common ancestor sits at height ``level``."""
    if not 0 <= level <= D:
        raise ValueError("level out of range")
    if level == 0:
        return exact_pair_covariance(params, D, 0, 0)
    return exact_pair_covariance(params, D, 0, params.N ** (level - 1))


def exact_covariance_matrix(params, D):
    """Dense leaf covariance of a small tree (N^D <= 4096)."""
    n = params.N**D
    if n > 4096:
        raise MemoryGuardError(f"dense covariance needs N^D <= 4096, got {n}")
    idx = np.arange(n)
    C = np.zeros((n, n))
    b2, N = params.beta**-2, params.N
    for q in range(D):
        a = idx // N**q
        same = a[:, None] == a[None, :]
        sib = (a[:, None] // N == a[None, :] // N) & ~same
        C += b2**q * ((1.0 - 1.0 / N) * same - sib / N)
    return C


# --- direct sampling -----------------------------------------------------------

@dataclass
class TreeFieldSample:
    depth: int
    params: object
    leaf_values: np.ndarray
    seed: int
    replica: int = 0
    branching: int = 0

    @property
    def n_leaves(self):
        return self.leaf_values.size

    def leaf_index(self, k):
        """Tree index of the k-th stored leaf (identity for a full tree)."""
        b, N = self.branching, self.params.N
        if b == N:
            return int(k)
        i, scale = 0, 1
        for _ in range(self.depth):
            k, r = divmod(k, b)
            i += r * scale
            scale *= N
        return i


def _resolve_branching(N, D, branching):
    if branching is None or branching == "auto":
        if N**D <= MAX_LEAVES:
            branching = N
        else:
            # ternary subsets give many more pairs per coarse block than binary ones
            branching = 3 if N >= 3 and 3**D <= MAX_LEAVES else 2
    branching = int(branching)
    if not 2 <= branching <= N:
        raise ValueError(f"branching must lie in [2, N={N}]")
    if branching**D > MAX_LEAVES:
        what = "leaves" if branching == N else f"subset leaves (branching {branching})"
        raise MemoryGuardError(f"{branching}^{D} {what} exceed the 2^24 memory guard")
    return branching


def _sample_replica(params, D, k, rng):
    N, beta = params.N, params.beta
    phi = np.zeros(k**D)
    for q in range(D):
        n_blocks = k ** (D - q - 1)
        z = rng.standard_normal((n_blocks, N))
        z -= z.mean(axis=1, keepdims=True)
        if q == 0 and n_blocks and np.max(np.abs(z.sum(axis=1))) > 1e-12:
            raise NumericalFailure("sample_gaussian_field", "zero-sum violated in a layer-0 block")
        phi += beta**-q * np.repeat(z[:, :k].ravel(), k**q)
    return phi


def sample_gaussian_field(params, D, n_replicas, seed=0, branching=None):
    """Independent replicas of the depth-D hierarchical Gaussian field.

    Replica r uses stream (seed, r).  ``branching=None`` samples the full tree
    when it fits under the memory guard and a ternary (or binary) leaf subset
    otherwise.
    """
    if D < 2:
        raise ValueError("depth must be >= 2")
    if n_replicas < 1:
        raise ValueError("need at least one replica")
    k = _resolve_branching(params.N, D, branching)
    if n_replicas * k**D > 4 * MAX_LEAVES:
        raise MemoryGuardError(f"{n_replicas} replicas of {k**D} leaves exceed the memory guard")

    def one(r):
        return TreeFieldSample(D, params, _sample_replica(params, D, k, stream(seed, r)),
                               seed, r, k)

    return parallel_map(one, range(n_replicas))


# --- covariance estimators ------------------------------------------------------

def _pair_products(values, k, D):
    """Per-row mean of a_x a_y over ordered pairs at each separation level 0..D.

    Pairs inside the same k^j block are summed through block sums; the exact
    level-j pairs are the difference between consecutive levels.
    """
    n_rows = values.shape[0]
    n = k**D
    P = np.empty((n_rows, D + 1))
    s = values
    for j in range(D + 1):
        P[:, j] = np.sum(s * s, axis=1)
        if j < D:
            s = s.reshape(n_rows, -1, k).sum(axis=2)
    T = np.empty_like(P)
    T[:, 0] = P[:, 0] / n
    for j in range(1, D + 1):
        T[:, j] = (P[:, j] - P[:, j - 1]) / (n * (k**j - k ** (j - 1)))
    return T


@dataclass
class CorrelationTable:
    """Two-point functions of phi and phi^2 per ultrametric distance alpha^j."""
    levels: np.ndarray
    distances: np.ndarray
    cov_phi: np.ndarray
    cov_phi_stderr: np.ndarray
    cov_phi2: np.ndarray
    cov_phi2_stderr: np.ndarray
    pairs: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_csv(self, path):
        rows = np.column_stack([self.distances, self.cov_phi, self.cov_phi_stderr,
                                self.cov_phi2, self.cov_phi2_stderr])
        np.savetxt(path, rows, delimiter=",", fmt="%.17g", comments="",
                   header="distance,cov_phi,cov_phi_stderr,cov_phi2,cov_phi2_stderr")

    def select(self, levels):
        m = np.isin(self.levels, levels)
        return CorrelationTable(self.levels[m], self.distances[m], self.cov_phi[m],
                                self.cov_phi_stderr[m], self.cov_phi2[m],
                                self.cov_phi2_stderr[m], self.pairs[m], dict(self.meta))


def _replica_rows(V, k, D, levels):
    T1 = _pair_products(V, k, D)[:, levels]
    sq = V * V
    return T1, _pair_products(sq, k, D)[:, levels], sq.mean(axis=1)


def _replica_table(T1, T2, m2, levels, alpha, k, D):
    n = len(m2)
    g = m2.mean()
    # delta method for mean(T2) - mean(m2)^2
    c2_rows = T2 - 2.0 * g * m2[:, None]

    def se(x):
        return x.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(x.shape[1], np.inf)

    pairs = np.array([n * k**D * (k**j - k ** (j - 1)) for j in levels], dtype=float)
    return CorrelationTable(levels, alpha ** levels.astype(float), T1.mean(axis=0), se(T1),
                            T2.mean(axis=0) - g * g, se(c2_rows), pairs,
                            {"depth": D, "branching": k, "replicas": n})


def _check_levels(levels, D):
    levels = np.arange(1, D - 1) if levels is None else np.asarray(levels, dtype=int)
    if np.any((levels < 1) | (levels > D)):
        raise ValueError("levels must lie in [1, D]")
    return levels


def empirical_covariances(samples, levels=None):
    """Replica estimates of Cov(phi_x, phi_y) and Cov(phi_x^2, phi_y^2) per separation level.

    The field is centred, so Cov(phi, phi) is the mean pair product.  For phi^2
    the product of means is subtracted using the grand mean of phi^2.
    Standard errors treat replicas as the independent units.
    """
    if not samples:
        raise DegenerateInput("no samples")
    s0 = samples[0]
    D, k = s0.depth, s0.branching
    levels = _check_levels(levels, D)
    rows = _replica_rows(np.stack([s.leaf_values for s in samples]), k, D, levels)
    return _replica_table(*rows, levels, s0.params.alpha, k, D)


def gaussian_correlations(params, D, n_replicas, seed=0, branching=None, levels=None):
    """Same estimates as :func:`empirical_covariances` without keeping the fields in memory.

    Replica r is drawn from stream (seed, r) exactly as in :func:`sample_gaussian_field`.
    """
    if D < 2 or n_replicas < 2:
        raise ValueError("need D >= 2 and at least two replicas")
    k = _resolve_branching(params.N, D, branching)
    levels = _check_levels(levels, D)

    def one(r):
        phi = _sample_replica(params, D, k, stream(seed, r))
        return _replica_rows(phi[None, :], k, D, levels)

    rows = parallel_map(one, range(n_replicas))
    T1 = np.concatenate([r[0] for r in rows])
    T2 = np.concatenate([r[1] for r in rows])
    m2 = np.concatenate([r[2] for r in rows])
    return _replica_table(T1, T2, m2, levels, params.alpha, k, D)


def _fit_loglog(x, y, ys, what):
    if np.any(y <= 0):
        bad = x[y <= 0]
        raise NumericalFailure("fit_covariance_exponent",
                               f"non-positive {what} at distances {bad.tolist()} (increase replicas)")
    lx, ly = np.log(x), np.log(y)
    sig = ys / y
    A = np.column_stack([np.ones_like(lx), lx])
    coef = np.linalg.lstsq(A, ly, rcond=None)[0]
    # slope = w . ly for OLS; propagate independent per-distance errors
    w = np.linalg.pinv(A)[1]
    return -float(coef[1]), float(np.sqrt(np.sum((w * sig) ** 2)))


def fit_covariance_exponent(samples, distances=None, observable="phi", min_pairs=1000):
    """OLS slope of log covariance against log distance, extremes excluded.

    ``samples`` is a list of :class:`TreeFieldSample` or a :class:`CorrelationTable`.
    ``distances`` are ultrametric distances alpha^j (default alpha^1..alpha^{D-2});
    the smallest and largest of them are dropped before fitting.  Returns
    ``(exponent, stderr)`` with exponent = -slope.
    """
    table = samples if isinstance(samples, CorrelationTable) else None
    if table is None:
        if not samples:
            raise DegenerateInput("no samples")
        s0 = samples[0]
        alpha, D = s0.params.alpha, s0.depth
    else:
        alpha, D = float(table.distances[0] ** (1.0 / table.levels[0])), table.meta["depth"]
    if distances is None:
        levels = np.arange(1, D - 1)
    else:
        levels = np.array([int(round(math.log(r) / math.log(alpha))) for r in distances])
        if np.any(np.abs(alpha ** levels.astype(float) - np.asarray(distances)) >
                  1e-9 * np.asarray(distances)):
            raise ValueError("distances must be integer powers of alpha")
    levels = np.unique(levels)
    if levels.size < 3:
        raise DegenerateInput("need at least three distinct distances")
    fit_levels = levels[1:-1]
    if fit_levels.size < 2:
        raise DegenerateInput("need at least two distances left after dropping the extremes")
    if table is None:
        table = empirical_covariances(samples, fit_levels)
    else:
        missing = set(fit_levels.tolist()) - set(table.levels.tolist())
        if missing:
            raise ValueError(f"table lacks levels {sorted(missing)}")
        table = table.select(fit_levels)
    if np.any(table.pairs < min_pairs):
        raise DegenerateInput(f"fewer than {min_pairs} leaf pairs at some distance")
    if observable == "phi":
        return _fit_loglog(table.distances, table.cov_phi, table.cov_phi_stderr, "covariances")
    if observable == "phi2":
        return _fit_loglog(table.distances, table.cov_phi2, table.cov_phi2_stderr,
                           "phi^2 covariances")
    raise ValueError(f"unknown observable {observable!r}")


# --- Metropolis on the layer variables ---------------------------------------------

@njit(cache=True, nogil=True)
def _leaf_energy(phi, lo, hi, shift, coef, h, n, phi_max, y0, x0, b, c4, flat):
    if flat:
        return 0.0
    e = 0.0
    for x in range(lo, hi):
        e += (_even_eval(coef, h, n, phi_max, y0, x0, b, c4, phi[x] + shift)
              - _even_eval(coef, h, n, phi_max, y0, x0, b, c4, phi[x]))
    return e


@njit(cache=True, nogil=True)
def _sweep(z, offsets, phi, N, D, scales, widths, partner, steps, unif, accepted,
           coef, h, n, phi_max, y0, x0, b, c4, flat):
    """One pass over every layer variable with paired (+delta, -delta) moves inside its block."""
    r = 0
    for q in range(D):
        base = offsets[q]
        n_nodes = offsets[q + 1] - base
        width = N**q
        for a in range(n_nodes):
            blk = a - a % N
            bnode = blk + (a % N + partner[r]) % N
            delta = widths[q] * steps[r]
            za = z[base + a]
            zb = z[base + bnode]
            dprior = delta * (za - zb) + delta * delta
            s = scales[q] * delta
            dpot = (_leaf_energy(phi, a * width, (a + 1) * width, s, coef, h, n, phi_max,
                                 y0, x0, b, c4, flat)
                    + _leaf_energy(phi, bnode * width, (bnode + 1) * width, -s, coef, h, n,
                                   phi_max, y0, x0, b, c4, flat))
            dE = dprior + dpot
            if dE != dE:
                return False
            if dE <= 0.0 or unif[r] < math.exp(-dE):
                z[base + a] = za + delta
                z[base + bnode] = zb - delta
                for x in range(a * width, (a + 1) * width):
                    phi[x] += s
                for x in range(bnode * width, (bnode + 1) * width):
                    phi[x] -= s
                accepted[q] += 1
            r += 1
    return True


@dataclass
class MCMCResult:
    table: CorrelationTable
    exponent_phi2: float
    exponent_phi2_stderr: float
    acceptance: np.ndarray
    widths: np.ndarray
    sweeps: int
    burn_in: int


def _spline_args(V):
    if V is None or np.all(V.logvals == 0.0):
        dummy = np.zeros((4, 1))
        return (dummy, 1.0, 2, 1.0, 0.0, 1.0, 0.0, 0.0, True)
    t = V._tail
    return (np.ascontiguousarray(V._spline.c), V.grid.spacing, V.grid.n_points, V.grid.phi_max,
            t.y0, t.x0, t.b, t.c, False)


def mcmc_perturbed_field(params, V, D, sweeps, burn_in, seed=0, n_batches=20,
                         fit_levels=None, measure_every=1):
    """Metropolis sampling of the tree field with single-spin weight exp(-sum_x V(phi_x)).

    State: the layer variables.  Moves shift two siblings by +delta and -delta,
    preserving every block's zero sum.  Proposal widths are tuned per layer
    during burn-in towards an acceptance rate of 0.23-0.5 and frozen afterwards.
    """
    if D > 8 or D < 2:
        raise ValueError("mcmc needs 2 <= D <= 8")
    if V is not None and abs(float(V.logvals[0])) > 1e-12:
        raise ValueError("V must be normalized (V(0) = 0)")
    N = params.N
    if N**D > MAX_LEAVES:
        raise MemoryGuardError(f"N^D = {N**D} leaves exceed the memory guard")
    if sweeps < 2 * n_batches:
        raise ValueError("need at least two measured sweeps per batch")
    args = _spline_args(V)
    rng = stream(seed, 0)
    counts = [N ** (D - q) for q in range(D)]
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    z = rng.standard_normal(offsets[-1])
    for q in range(D):
        blk = z[offsets[q]:offsets[q + 1]].reshape(-1, N)
        blk -= blk.mean(axis=1, keepdims=True)
    scales = params.beta ** -np.arange(D, dtype=float)
    phi = np.zeros(N**D)
    for q in range(D):
        phi += scales[q] * np.repeat(z[offsets[q]:offsets[q + 1]], N**q)
    widths = np.full(D, 1.0)
    P = int(offsets[-1])
    levels = np.arange(1, D + 1)
    window, n_window = np.zeros(D), 0
    acc_total, n_meas = np.zeros(D), 0
    rows1, rows2, m2 = [], [], []
    for s in range(burn_in + sweeps):
        partner = rng.integers(1, N, P)
        steps = rng.standard_normal(P)
        unif = rng.random(P)
        acc = np.zeros(D)
        if not _sweep(z, offsets, phi, N, D, scales, widths, partner, steps, unif, acc, *args):
            raise NumericalFailure("mcmc_perturbed_field", "non-finite energy")
        if s < burn_in:
            window += acc
            n_window += 1
            if n_window == 5:
                rate = window / (n_window * np.array(counts))
                widths *= np.exp(3.0 * np.clip(rate - 0.35, -0.3, 0.3))
                window[:], n_window = 0.0, 0
            continue
        acc_total += acc
        if (s - burn_in) % measure_every == 0:
            rows1.append(_pair_products(phi[None, :], N, D)[0, levels])
            sq = phi * phi
            rows2.append(_pair_products(sq[None, :], N, D)[0, levels])
            m2.append(sq.mean())
            n_meas += 1
    acceptance = acc_total / (sweeps * np.array(counts))
    if np.any(acceptance < 0.05) or np.any(acceptance > 0.9):
        raise TuningFailure("mcmc_perturbed_field",
                            f"acceptance {np.round(acceptance, 3).tolist()} outside [0.05, 0.9]")
    table = _batch_table(np.array(rows1), np.array(rows2), np.array(m2), levels, params.alpha,
                         N, D, n_batches)
    table.meta.update({"sweeps": sweeps, "burn_in": burn_in, "seed": seed})
    if fit_levels is None:
        fit_levels = np.arange(1, D - 1)
    try:
        expo, err = fit_covariance_exponent(table, params.alpha ** np.asarray(fit_levels, float),
                                            observable="phi2", min_pairs=0)
    except (NumericalFailure, DegenerateInput):
        expo, err = float("nan"), float("nan")
    return MCMCResult(table, expo, err, acceptance, widths, sweeps, burn_in)


def _batch_table(T1, T2, m2, levels, alpha, N, D, n_batches):
    """Batch means over the chain for Cov(phi, phi) and Cov(phi^2, phi^2)."""
    n = len(m2) - len(m2) % n_batches
    b1 = T1[:n].reshape(n_batches, -1, T1.shape[1]).mean(axis=1)
    b2 = T2[:n].reshape(n_batches, -1, T2.shape[1]).mean(axis=1)
    bm = m2[:n].reshape(n_batches, -1).mean(axis=1)
    g = m2.mean()
    cov1 = T1.mean(axis=0)
    cov2 = T2.mean(axis=0) - g * g
    se1 = b1.std(axis=0, ddof=1) / math.sqrt(n_batches)
    se2 = (b2 - 2.0 * g * bm[:, None]).std(axis=0, ddof=1) / math.sqrt(n_batches)
    n_leaves = N**D
    pairs = np.array([len(m2) * n_leaves * (N**j - N ** (j - 1)) for j in levels], dtype=float)
    return CorrelationTable(levels, alpha ** levels.astype(float), cov1, se1, cov2, se2, pairs,
                            {"depth": D, "branching": N, "batches": n_batches})
