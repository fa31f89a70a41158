"""One layer of the hierarchical RG acting on single-spin potentials.

A layer of the tree carries N = p^d fluctuation variables per block with the
zero-sum covariance ``I - J/N``.  Integrating them out and diluting the block
field by ``beta^{-1} = p^{-[phi]}`` gives the exact single-layer map.

Two evaluation routes for the block expectation:

* ``nested``: for N = 2^n the zero-sum Gaussian splits into n levels of
  independent pairwise (+t, -t) fluctuations with scales 2^{-(m+1)/2}, so the
  N-fold integral is n one-dimensional pair integrals.
* ``montecarlo``: direct sampling of the centred vector, any N.
"""

from dataclasses import dataclass
import math

import numpy as np
from numba import njit
from scipy.special import logsumexp

from .errors import NumericalFailure, UnsupportedBackend
from .funcs import SampledEvenFunction, symmetric_pair_integral
from .rng import parallel_map, stream


def _is_prime(n):
    if n < 2:
        return False
    return all(n % k for k in range(2, int(math.isqrt(n)) + 1))


@dataclass(frozen=True)
class RGParams:
    p: int = 2
    d: int = 3
    l: int = 1
    phi_dim: float = 0.75

    def __post_init__(self):
        if not _is_prime(self.p):
            raise ValueError(f"p must be prime, got {self.p}")
        if self.d < 1 or self.l < 1:
            raise ValueError("d and l must be >= 1")
        if not 0 < self.phi_dim < self.d / 2:
            raise ValueError(f"phi_dim must lie in (0, d/2), got {self.phi_dim}")

    @classmethod
    def bms(cls, epsilon, p=2, l=1):
        """d = 3 with [phi] = (3 - epsilon)/4."""
        if not 0 <= epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
        return cls(p=p, d=3, l=l, phi_dim=(3.0 - epsilon) / 4.0)

    @property
    def N(self):
        return self.p**self.d

    @property
    def alpha(self):
        return float(self.p)

    @property
    def beta(self):
        return self.p**self.phi_dim

    @property
    def L(self):
        return self.p**self.l

    @property
    def epsilon(self):
        return self.d - 4.0 * self.phi_dim

    @property
    def mass_eigenvalue(self):
        """Per-layer eigenvalue p^{d - 2[phi]} of :phi^2: at the Gaussian fixed point."""
        return self.p ** (self.d - 2.0 * self.phi_dim)

    def gaussian_eigenvalue(self, k, layers=1):
        return self.p ** ((self.d - k * self.phi_dim) * layers)

    @property
    def field_variance(self):
        """Single-site variance (1 - 1/N) / (1 - beta^-2) of the infinite hierarchical field."""
        return (1.0 - 1.0 / self.N) / (1.0 - self.beta**-2)

    def with_l(self, l):
        return RGParams(self.p, self.d, l, self.phi_dim)


def block_covariance(N):
    """Dense ``I - J/N``: the orthogonal projection onto the zero-sum hyperplane."""
    return np.eye(N) - np.full((N, N), 1.0 / N)


def haar_levels(N):
    n = int(round(math.log2(N)))
    if N < 2 or 2**n != N:
        raise UnsupportedBackend(f"nested backend needs N a power of two, got N={N}")
    return n


def haar_scales(N):
    """Pair-fluctuation scales sigma_m = 2^{-(m+1)/2}, m = 0 .. log2(N) - 1."""
    return [2.0 ** (-(m + 1) / 2.0) for m in range(haar_levels(N))]


def haar_covariance(N):
    """Covariance of the leaf values generated by the nested pair construction.

    Level m splits each group of 2^{m+1} leaves into two halves that move by
    +sigma_m t and -sigma_m t; the result must equal ``block_covariance(N)``.
    """
    n = haar_levels(N)
    cols = []
    for m, s in enumerate(haar_scales(N)):
        size = 2 ** (m + 1)
        for g in range(N // size):
            v = np.zeros(N)
            v[g * size: g * size + size // 2] = s
            v[g * size + size // 2: (g + 1) * size] = -s
            cols.append(v)
    A = np.column_stack(cols) if n else np.zeros((N, 0))
    return A @ A.T


def _check_haar(N):
    err = np.max(np.abs(haar_covariance(N) - block_covariance(N)))
    if err > 1e-12:
        raise NumericalFailure("haar_scales", f"pair scales miss the block covariance by {err:.3g}")


for _n in (2, 4, 8, 16, 32, 64):
    _check_haar(_n)


@dataclass(frozen=True)
class Nested:
    name = "nested"


@dataclass(frozen=True)
class MonteCarlo:
    n_samples: int = 10**6
    seed: int = 0
    chunk: int = 20000

    name = "montecarlo"

    def __post_init__(self):
        if self.n_samples < 1000:
            raise ValueError("montecarlo backend needs n_samples >= 1000")


NESTED = Nested()


def parse_backend(spec, n_samples=10**6, seed=0):
    if isinstance(spec, (Nested, MonteCarlo)):
        return spec
    if spec in ("nested", None):
        return NESTED
    if spec in ("mc", "montecarlo"):
        return MonteCarlo(n_samples, seed)
    raise UnsupportedBackend(f"unknown backend {spec!r}")


def _nested_block(F, N):
    G = F
    for s in haar_scales(N):
        G = symmetric_pair_integral(G, s)
    return G


def zero_sum_samples(rng, n, N):
    xi = rng.standard_normal((n, N))
    return xi - xi.mean(axis=1, keepdims=True)


def _mc_chunks(backend):
    sizes = [backend.chunk] * (backend.n_samples // backend.chunk)
    if backend.n_samples % backend.chunk:
        sizes.append(backend.n_samples % backend.chunk)
    return sizes


@njit(cache=True, nogil=True)
def _even_eval(coef, h, n, phi_max, y0, x0, b, c4, x):
    ax = abs(x)
    if ax > phi_max:
        return y0 + b * (ax * ax - x0 * x0) + c4 * (ax**4 - x0**4)
    i = int(ax / h)
    if i > n - 2:
        i = n - 2
    dx = ax - i * h
    return ((coef[0, i] * dx + coef[1, i]) * dx + coef[2, i]) * dx + coef[3, i]


@njit(cache=True, nogil=True)
def _mc_kernel(zeta, cs, coef, h, n, phi_max, y0, x0, b, c4):
    """Per grid point: log sum exp(-S) and log sum exp(-2S), S = sum_i W(zeta_i + c)."""
    ns, N = zeta.shape
    out1 = np.empty(cs.size)
    out2 = np.empty(cs.size)
    for j in range(cs.size):
        m = -np.inf
        s1 = 0.0
        s2 = 0.0
        for k in range(ns):
            S = 0.0
            for i in range(N):
                S += _even_eval(coef, h, n, phi_max, y0, x0, b, c4, zeta[k, i] + cs[j])
            v = -S
            if v > m:
                r = np.exp(m - v)
                s1 = s1 * r + 1.0
                s2 = s2 * r * r + 1.0
                m = v
            else:
                e = np.exp(v - m)
                s1 += e
                s2 += e * e
        out1[j] = m + np.log(s1)
        out2[j] = 2.0 * m + np.log(s2)
    return out1, out2


def _mc_block(F, N, backend):
    c = np.ascontiguousarray(F.nodes)
    sizes = _mc_chunks(backend)
    coef = np.ascontiguousarray(F._spline.c)
    tail = F._tail
    args = (coef, F.grid.spacing, F.grid.n_points, F.grid.phi_max,
            tail.y0, tail.x0, tail.b, tail.c)

    def run(i):
        zeta = zero_sum_samples(stream(backend.seed, i), sizes[i], N)
        return _mc_kernel(zeta, c, *args)

    parts = parallel_map(run, range(len(sizes)))
    n = backend.n_samples
    m1 = logsumexp([p[0] for p in parts], axis=0) - math.log(n)
    m2 = logsumexp([p[1] for p in parts], axis=0) - math.log(n)
    rel_var = np.maximum(np.exp(m2 - 2.0 * m1) - 1.0, 0.0)
    stderr = np.sqrt(rel_var / n)
    return SampledEvenFunction(F.grid, -m1), stderr


def zero_sum_block_integral(F, params, backend=NESTED):
    """G with exp(-G(c)) = E prod_i exp(-W(zeta_i + c)), zeta ~ N(0, I - J/N).

    Returns ``(G, stderr)``; ``stderr`` is the standard error of G per grid
    point (zeros for the exact nested route).
    """
    N = params.N
    if isinstance(backend, Nested):
        haar_levels(N)
        G = _nested_block(F, N)
        return G, np.zeros(F.grid.n_points)
    if isinstance(backend, MonteCarlo):
        G, se = _mc_block(F, N, backend)
        if not np.all(np.isfinite(G.logvals)):
            raise NumericalFailure("zero_sum_block_integral", "non-finite Monte Carlo estimate")
        return G, se
    raise UnsupportedBackend(f"unknown backend {backend!r}")


def dilute(G, beta):
    """psi -> G(psi / beta) sampled back on the grid."""
    return SampledEvenFunction(G.grid, G(G.grid.points / beta))


def rg_step(V, params, backend=NESTED):
    """One tree layer: returns ``(V', delta_b)`` with ``V'(0) = 0`` and ``delta_b = -Vtilde(0)``."""
    G, _ = zero_sum_block_integral(V, params, backend)
    Vt = dilute(G, params.beta)
    db = -float(Vt.logvals[0])
    return Vt.normalize(), db


def rg_step_composite(V, params, backend=NESTED):
    """``params.l`` layers; the returned delta_b is the sum of the per-layer values."""
    total = 0.0
    for _ in range(params.l):
        V, db = rg_step(V, params, backend)
        total += db
    return V, total
