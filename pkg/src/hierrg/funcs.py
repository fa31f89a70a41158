"""Sampled single-spin functions and one-dimensional Gaussian integrals.

Potentials are stored as ``W = -log f`` on a uniform grid.  Even functions
keep only ``phi >= 0``; deviation profiles, which may carry an odd part, live
on the symmetric grid ``[-phi_max, phi_max]``.

All Gaussian expectations use Gauss-Hermite rules that are re-centred on the
mode of the integrand and rescaled by its curvature.  The rule is exact when
the integrand is Gaussian (quadratic ``W``) and keeps full accuracy where the
integrand is far narrower than the Gaussian weight, e.g. quartic ``W`` at
large field values.
"""

from dataclasses import dataclass, field
from functools import cached_property, lru_cache
import csv
import math

import numpy as np
from numpy.polynomial import hermite, hermite_e
from scipy.interpolate import CubicSpline
from scipy.special import logsumexp

from .errors import DegenerateInput, NumericalFailure

TAIL_FRACTION = 0.05
MAX_WICK_DEGREE = 12


@dataclass(frozen=True)
class GridSpec:
    phi_max: float = 12.0
    n_points: int = 2048
    quad_nodes: int = 64

    def __post_init__(self):
        if not self.phi_max > 0:
            raise ValueError(f"phi_max must be positive, got {self.phi_max}")
        if int(self.n_points) != self.n_points or self.n_points < 16:
            raise ValueError(f"n_points must be an integer >= 16, got {self.n_points}")
        if int(self.quad_nodes) != self.quad_nodes or self.quad_nodes < 8:
            raise ValueError(f"quad_nodes must be an integer >= 8, got {self.quad_nodes}")

    @cached_property
    def points(self):
        pts = np.linspace(0.0, self.phi_max, self.n_points)
        pts.flags.writeable = False
        return pts

    @cached_property
    def full_points(self):
        pts = np.concatenate([-self.points[:0:-1], self.points])
        pts[self.n_points - 1] = 0.0
        pts.flags.writeable = False
        return pts

    @property
    def spacing(self):
        return self.phi_max / (self.n_points - 1)

    @property
    def zero_index(self):
        """Index of phi = 0 in ``full_points``."""
        return self.n_points - 1


@lru_cache(maxsize=None)
def _hermgauss(n):
    x, w = hermite.hermgauss(n)
    return x, np.log(w)


def _tail_size(n):
    return max(5, int(math.ceil(TAIL_FRACTION * n)))


class _EvenTail:
    """Extrapolation W(phi_m) + b (x^2 - phi_m^2) + c (x^4 - phi_m^4) beyond the grid.

    The quadratic term makes the extrapolation exact for quadratic and quartic
    potentials alike; ``c`` is clamped at zero, and ``b`` too whenever ``c`` is.
    """

    def __init__(self, xs, ys):
        n = _tail_size(len(xs))
        x, y = xs[-n:], ys[-n:]
        self.x0, self.y0 = float(xs[-1]), float(ys[-1])
        scale = self.x0
        u = (x / scale) ** 2
        A = np.column_stack([np.ones_like(u), u, u * u])
        a, b, c = np.linalg.lstsq(A, y, rcond=None)[0]
        if c < 0:
            a, b = np.linalg.lstsq(A[:, :2], y, rcond=None)[0]
            c = 0.0
            b = max(b, 0.0)
        self.b = b / scale**2
        self.c = c / scale**4

    def __call__(self, x, nu=0):
        b, c = self.b, self.c
        if nu == 0:
            return self.y0 + b * (x * x - self.x0**2) + c * (x**4 - self.x0**4)
        if nu == 1:
            return 2 * b * x + 4 * c * x**3
        if nu == 2:
            return 2 * b + 12 * c * x * x
        raise ValueError(nu)


class _PolyTail:
    """Degree-4 least-squares polynomial continuation anchored at the last grid value."""

    def __init__(self, xs, ys, side):
        n = _tail_size(len(xs))
        if side > 0:
            x, y = xs[-n:], ys[-n:]
            self.x0, self.y0 = float(xs[-1]), float(ys[-1])
        else:
            x, y = xs[:n], ys[:n]
            self.x0, self.y0 = float(xs[0]), float(ys[0])
        self.width = float(abs(x[-1] - x[0]))
        u = (x - self.x0) / self.width
        coef = np.polynomial.polynomial.polyfit(u, y, 4)
        coef[0] = self.y0
        self.poly = np.polynomial.Polynomial(coef)

    def __call__(self, x, nu=0):
        u = (x - self.x0) / self.width
        if nu == 0:
            return self.poly(u)
        return self.poly.deriv(nu)(u) / self.width**nu


class _SampledBase:
    """Shared evaluation machinery; subclasses define the nodes and symmetry."""

    even = False

    def __call__(self, x, nu=0):
        return evaluate(self, x, nu)

    def _check_finite(self, values):
        if not np.all(np.isfinite(values)):
            raise NumericalFailure(type(self).__name__, "non-finite sample values")

    @property
    def nodes(self):
        raise NotImplementedError

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phi", "W"])
            for x, y in zip(self.nodes, self.logvals):
                w.writerow([f"{x:.17g}", f"{y:.17g}"])


@dataclass(frozen=True, eq=False)
class SampledEvenFunction(_SampledBase):
    """Even function W on ``[0, phi_max]``; ``logvals[i] = W(points[i])``."""

    grid: GridSpec
    logvals: np.ndarray = field(repr=False)
    even = True

    def __post_init__(self):
        vals = np.array(self.logvals, dtype=float)
        if vals.shape != (self.grid.n_points,):
            raise ValueError(f"expected {self.grid.n_points} samples, got {vals.shape}")
        self._check_finite(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "logvals", vals)

    @classmethod
    def from_callable(cls, grid, fn):
        return cls(grid, fn(grid.points))

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(grid.n_points))

    @property
    def nodes(self):
        return self.grid.points

    @property
    def normalized(self):
        return self.logvals[0] == 0.0

    def normalize(self):
        return SampledEvenFunction(self.grid, self.logvals - self.logvals[0])

    def sup_norm(self):
        return float(np.max(np.abs(self.logvals)))

    def __add__(self, other):
        if isinstance(other, SampledEvenFunction):
            return SampledEvenFunction(self.grid, self.logvals + other.logvals)
        return SampledEvenFunction(self.grid, self.logvals + other)

    def __sub__(self, other):
        if isinstance(other, SampledEvenFunction):
            return SampledEvenFunction(self.grid, self.logvals - other.logvals)
        return SampledEvenFunction(self.grid, self.logvals - other)

    def __mul__(self, scalar):
        return SampledEvenFunction(self.grid, self.logvals * scalar)

    __rmul__ = __mul__

    def on_full_line(self):
        """The same function as a :class:`SampledFunction` on the symmetric grid."""
        return SampledFunction(self.grid, np.concatenate([self.logvals[:0:-1], self.logvals]))

    @cached_property
    def _spline(self):
        return CubicSpline(self.grid.points, self.logvals, bc_type=((1, 0.0), "not-a-knot"))

    @cached_property
    def _tail(self):
        return _EvenTail(self.grid.points, self.logvals)

    @classmethod
    def from_csv(cls, path, quad_nodes=64):
        phi, W = _read_csv(path)
        if phi[0] != 0.0:
            raise ValueError("even-function CSV must start at phi = 0")
        return cls(GridSpec(float(phi[-1]), len(phi), quad_nodes), W)


@dataclass(frozen=True, eq=False)
class SampledFunction(_SampledBase):
    """Function on the symmetric grid ``[-phi_max, phi_max]`` (no parity assumed)."""

    grid: GridSpec
    logvals: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.array(self.logvals, dtype=float)
        if vals.shape != (2 * self.grid.n_points - 1,):
            raise ValueError(f"expected {2 * self.grid.n_points - 1} samples, got {vals.shape}")
        self._check_finite(vals)
        vals.flags.writeable = False
        object.__setattr__(self, "logvals", vals)

    @classmethod
    def from_callable(cls, grid, fn):
        return cls(grid, fn(grid.full_points))

    @classmethod
    def zero(cls, grid):
        return cls(grid, np.zeros(2 * grid.n_points - 1))

    @property
    def nodes(self):
        return self.grid.full_points

    @property
    def at_zero(self):
        return float(self.logvals[self.grid.zero_index])

    def normalize(self):
        return SampledFunction(self.grid, self.logvals - self.at_zero)

    def sup_norm(self):
        return float(np.max(np.abs(self.logvals)))

    @cached_property
    def _spline(self):
        return CubicSpline(self.grid.full_points, self.logvals, bc_type="not-a-knot")

    @cached_property
    def _tails(self):
        return (_PolyTail(self.grid.full_points, self.logvals, -1),
                _PolyTail(self.grid.full_points, self.logvals, +1))

    @classmethod
    def from_csv(cls, path, quad_nodes=64):
        phi, W = _read_csv(path)
        n = (len(phi) + 1) // 2
        return cls(GridSpec(float(phi[-1]), n, quad_nodes), W)


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["phi", "W"]:
        raise ValueError(f"unexpected header {rows[0]}")
    data = np.array([[float(a), float(b)] for a, b in rows[1:]])
    return data[:, 0], data[:, 1]


def _uniform_spline(spline, x0, h, n, x, nu):
    """Evaluate a CubicSpline on uniform breakpoints by direct indexing (x inside range)."""
    i = np.clip(((x - x0) / h).astype(np.intp), 0, n - 2)
    dx = x - (x0 + i * h)
    c = spline.c
    c0, c1, c2, c3 = c[0][i], c[1][i], c[2][i], c[3][i]
    if nu == 0:
        return ((c0 * dx + c1) * dx + c2) * dx + c3
    if nu == 1:
        return (3.0 * c0 * dx + 2.0 * c1) * dx + c2
    if nu == 2:
        return 6.0 * c0 * dx + 2.0 * c1
    return spline(x, nu)


def evaluate(F, x, nu=0):
    """W(x) (or its ``nu``-th derivative) by cubic spline inside the grid, tail model outside.

    Total function: any real ``x``, scalar or array.
    """
    x = np.asarray(x, dtype=float)
    g = F.grid
    phi_max, h = g.phi_max, g.spacing
    if F.even:
        ax = np.abs(x)
        out = _uniform_spline(F._spline, 0.0, h, g.n_points, np.minimum(ax, phi_max), nu)
        outside = ax > phi_max
        if outside.any():
            out = np.where(outside, F._tail(ax, nu), out)
        if nu % 2 == 1:
            out = out * np.sign(x)
    else:
        out = _uniform_spline(F._spline, -phi_max, h, 2 * g.n_points - 1,
                              np.clip(x, -phi_max, phi_max), nu)
        if (np.abs(x) > phi_max).any():
            lo, hi = F._tails
            out = np.where(x < -phi_max, lo(x, nu), out)
            out = np.where(x > phi_max, hi(x, nu), out)
    return float(out) if out.ndim == 0 else out


# --- Gaussian integrals -----------------------------------------------------

def _adaptive_log_expectation(energy, d1, d2, var, n_nodes, shape, newton_iters=25,
                              start=None, curvature=None):
    """log E_{z~N(0,var)} exp(-energy(z)), one value per entry of ``shape``.

    ``energy``, ``d1``, ``d2`` take an array ``z`` of shape ``shape + (k,)`` and
    return values / first / second derivatives in z.  The Gauss-Hermite rule is
    centred at the mode of ``energy(z) + z^2 / (2 var)`` (found by Newton from
    ``start``) and scaled by the curvature there, never wider than the prior.
    """
    x, logw = _hermgauss(n_nodes)
    z = np.zeros(shape) if start is None else np.array(start, dtype=float)
    for _ in range(newton_iters):
        zz = z[..., None]
        g = d1(zz)[..., 0] + z / var
        h = np.maximum(d2(zz)[..., 0] + 1.0 / var, 1.0 / var)
        step = g / h
        step = np.clip(step, -3.0 * math.sqrt(var), 3.0 * math.sqrt(var))
        z = z - step
        if np.max(np.abs(step)) < 1e-12:
            break
    if curvature is None:
        curvature = d2(z[..., None])[..., 0] + 1.0 / var
    s = 1.0 / np.sqrt(np.maximum(curvature, 1.0 / var))
    nodes = z[..., None] + math.sqrt(2.0) * s[..., None] * x
    expo = logw + x * x - energy(nodes) - nodes * nodes / (2.0 * var)
    return logsumexp(expo, axis=-1) + np.log(s / math.sqrt(math.pi * var))


def _finite_or_fail(values, operation):
    if not np.all(np.isfinite(values)):
        raise NumericalFailure(operation, "non-finite output")
    return values


def gauss_smooth(F, v):
    """G with exp(-G(c)) = E_{z~N(0,v)} exp(-W(c+z)); not normalized."""
    if not v > 0:
        raise ValueError(f"variance must be positive, got {v}")
    c = F.nodes
    col = c[:, None]
    logI = _adaptive_log_expectation(
        lambda z: F(col + z), lambda z: F(col + z, 1), lambda z: F(col + z, 2),
        v, F.grid.quad_nodes, c.shape)
    G = _finite_or_fail(-logI, "gauss_smooth")
    return type(F)(F.grid, G)


def symmetric_pair_integral(F, sigma):
    """H with exp(-H(a)) = E_{t~N(0,1)} exp(-W(a + sigma t) - W(a - sigma t))."""
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    a = F.nodes[:, None]
    curv = 1.0 + 2.0 * sigma**2 * F(F.nodes, 2)
    logI = _adaptive_log_expectation(
        lambda t: F(a + sigma * t) + F(a - sigma * t), None, None,
        1.0, F.grid.quad_nodes, F.nodes.shape, newton_iters=0, curvature=curv)
    H = _finite_or_fail(-logI, "symmetric_pair_integral")
    return type(F)(F.grid, H)


def pair_integral(A, B, sigma, points, quad_nodes):
    """-log E_t exp(-A(a + sigma t) - B(a - sigma t)) at each ``a`` in ``points``.

    ``A`` and ``B`` are any callables with a ``nu`` derivative argument
    (sampled functions qualify).  Used for the marked-branch recursion, where
    the two members of a pair carry different potentials.
    """
    a = np.asarray(points, dtype=float)[:, None]
    logI = _adaptive_log_expectation(
        lambda t: A(a + sigma * t) + B(a - sigma * t),
        lambda t: sigma * (A(a + sigma * t, 1) - B(a - sigma * t, 1)),
        lambda t: sigma**2 * (A(a + sigma * t, 2) + B(a - sigma * t, 2)),
        1.0, quad_nodes, a.shape[:1])
    return _finite_or_fail(-logI, "pair_integral")


def tilted_pair_deviation(B, R, sigma, points, quad_nodes, both=False):
    """-log of the B-tilted expectation of exp(-R(a + sigma t) [- R(a - sigma t)]).

    With ``U = B + R`` this equals ``pair(U, B) - pair(B, B)`` (or
    ``pair(U, U) - pair(B, B)`` when ``both``), but it is computed through
    ``log1p``/``expm1`` so that tiny deviations keep full relative precision.
    ``B`` must be even; the rule is the curvature-scaled one of the bulk pair.
    """
    pts = np.asarray(points, dtype=float)
    a = pts[:, None]
    x, logw = _hermgauss(quad_nodes)
    curv = 1.0 + 2.0 * sigma**2 * B(pts, 2)
    s = 1.0 / np.sqrt(np.maximum(curv, 1.0))
    t = math.sqrt(2.0) * s[:, None] * x
    lw = logw + x * x - B(a + sigma * t) - B(a - sigma * t) - t * t / 2.0
    lw = lw - logsumexp(lw, axis=1, keepdims=True)
    r = R(a + sigma * t)
    if both:
        r = r + R(a - sigma * t)
    inner = np.sum(np.exp(lw) * np.expm1(-r), axis=1)
    if np.any(inner <= -1.0):
        # deviation too large for the log1p form; fall back to log-sum-exp
        val = -logsumexp(lw - r, axis=1)
    else:
        val = -np.log1p(inner)
    return _finite_or_fail(val, "tilted_pair_deviation")


# --- Wick coordinates ------------------------------------------------------

def wick(k, x):
    """Unit-variance Wick power :x^k:, i.e. the probabilists' Hermite polynomial He_k."""
    c = np.zeros(k + 1)
    c[k] = 1.0
    return hermite_e.hermeval(x, c)


@dataclass(frozen=True, eq=False)
class CouplingVector:
    """Coefficients c_0, c_2, ..., c_2K of W in the basis :phi^0:, :phi^2:, ..., :phi^2K:."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)

    @property
    def K(self):
        return len(self.coefficients) - 1

    def __getitem__(self, degree):
        """Coefficient of :phi^degree: (degree must be even)."""
        if degree % 2:
            raise KeyError(degree)
        j = degree // 2
        return float(self.coefficients[j]) if j <= self.K else 0.0

    def values(self, x):
        return sum(c * wick(2 * j, x) for j, c in enumerate(self.coefficients))

    def reconstruct(self, grid):
        return SampledEvenFunction(grid, self.values(grid.points))


def from_couplings(grid, couplings, normalize=True):
    """Even potential sum_k couplings[k] :phi^k: on ``grid``; ``couplings`` maps degree -> value."""
    vals = np.zeros(grid.n_points)
    for k, c in couplings.items():
        if k % 2:
            raise ValueError(f"odd degree {k} in an even potential")
        vals = vals + c * wick(k, grid.points)
    F = SampledEvenFunction(grid, vals)
    return F.normalize() if normalize else F


def _weighted_fit(x, y, degrees, operation):
    V = np.column_stack([wick(k, x) for k in degrees])
    sw = np.exp(-x * x / 4.0)
    A = V * sw[:, None]
    normal = A.T @ A
    cond = np.linalg.cond(normal)
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateInput(f"{operation}: normal equations ill-conditioned (cond={cond:.3g})")
    return np.linalg.lstsq(A, y * sw, rcond=None)[0]


def project_couplings(F, K):
    """Weighted least-squares coordinates of ``F`` in unit-variance Wick powers up to degree 2K."""
    if K < 0 or 2 * K > MAX_WICK_DEGREE:
        raise ValueError(f"need 0 <= 2K <= {MAX_WICK_DEGREE}, got K={K}")
    coef = _weighted_fit(F.grid.points, F.logvals, range(0, 2 * K + 1, 2), "project_couplings")
    return CouplingVector(coef)


def project_line(F, degree):
    """Wick coordinates c_0..c_degree (all parities) of a full-line function."""
    if degree < 0 or degree > MAX_WICK_DEGREE:
        raise ValueError(f"need 0 <= degree <= {MAX_WICK_DEGREE}")
    x = F.nodes
    y = F.logvals if hasattr(F, "logvals") else F(x)
    return _weighted_fit(x, y, range(degree + 1), "project_line")
