"""Smeared-field observables through the marked-branch deviation flow.

A test function supported on a ball of the tree turns into a potential
deviation carried by the blocks that meet the support.  Layer by layer the
deviation is integrated together with the bulk, and the change it causes in
the free-energy constant delta_b is collected.  The sum of those changes is
the cumulant generating function S^T(f) = log E exp(<f, phi>).

Below the support scale (UV layers) every site of a block carries the source;
above it (IR layers) only one site per block does.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.special import logsumexp

from .blockmap import NESTED, MonteCarlo, Nested, haar_scales, zero_sum_samples
from .errors import (CalibrationError, ConvergenceError, NonSummableError, NumericalFailure,
                     UnsupportedBackend)
from .funcs import SampledFunction, symmetric_pair_integral, tilted_pair_deviation
from .rng import stream

TERM_TOL = 1e-10


@dataclass(frozen=True)
class TestFunctionSpec:
    """f = t * indicator of a ball of radius alpha^support_level, coupled to phi (k=1) or phi^2 (k=2)."""
    __test__ = False

    k: int
    amplitude: float
    support_level: int = 0
    kappa: float = 0.0
    Y: float = 0.0

    def __post_init__(self):
        if self.k not in (1, 2):
            raise ValueError(f"k must be 1 or 2, got {self.k}")
        if self.support_level < 0:
            raise ValueError("support_level must be >= 0")
        if not math.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")

    def with_amplitude(self, t):
        return TestFunctionSpec(self.k, t, self.support_level, self.kappa, self.Y)

    def with_Y(self, Y):
        return TestFunctionSpec(self.k, self.amplitude, self.support_level, self.kappa, Y)


@dataclass
class DeviationState:
    W_dev: SampledFunction
    terms: list = field(default_factory=list)


# --- one layer -----------------------------------------------------------------

def _nested_deviation(V, W, N, all_marked):
    """-log(G_mixed / G_bulk) on the symmetric grid, threading the marked leaf through the Haar levels."""
    pts = V.grid.full_points
    B, R = V, W
    for s in haar_scales(N):
        R = SampledFunction(V.grid, tilted_pair_deviation(B, R, s, pts, V.grid.quad_nodes,
                                                          both=all_marked))
        B = symmetric_pair_integral(B, s)
    return R


def _mc_deviation(V, W, N, all_marked, backend, block=64):
    pts = V.grid.full_points
    sizes = [backend.chunk] * (backend.n_samples // backend.chunk)
    if backend.n_samples % backend.chunk:
        sizes.append(backend.n_samples % backend.chunk)
    lb = np.full(pts.size, -np.inf)
    lm = np.full(pts.size, -np.inf)
    for i, n in enumerate(sizes):
        zeta = zero_sum_samples(stream(backend.seed, i), n, N)
        for j0 in range(0, pts.size, block):
            c = pts[j0:j0 + block, None, None]
            x = zeta[None, :, :] + c
            S = np.sum(V(x), axis=2)
            dev = np.sum(W(x), axis=2) if all_marked else W(x[:, :, 0])
            lb[j0:j0 + block] = np.logaddexp(lb[j0:j0 + block], logsumexp(-S, axis=1))
            lm[j0:j0 + block] = np.logaddexp(lm[j0:j0 + block], logsumexp(-S - dev, axis=1))
    D = -(lm - lb)
    if not np.all(np.isfinite(D)):
        raise NumericalFailure("deviation_step", "non-finite Monte Carlo deviation")
    return SampledFunction(V.grid, D)


def deviation_step(V_bulk, W_dev, params, backend=NESTED, all_marked=False):
    """One layer of the marked-branch recursion.

    Returns ``(W_dev', delta_b_diff)`` with ``W_dev'(psi) = D(psi/beta) - D(0)``
    and ``delta_b_diff = -D(0) = log G_mixed(0) - log G_bulk(0)``, where
    ``D = -log(G_mixed / G_bulk)``.  With ``all_marked`` every site of the block
    carries the deviation instead of the first one only.
    """
    if abs(float(V_bulk.logvals[0])) > 1e-12:
        raise ValueError("V_bulk must be normalized")
    if isinstance(W_dev, SampledFunction):
        W = W_dev
    else:
        W = W_dev.on_full_line()
    if not np.any(W.logvals):
        return SampledFunction.zero(V_bulk.grid), 0.0
    if isinstance(backend, Nested):
        D = _nested_deviation(V_bulk, W, params.N, all_marked)
    elif isinstance(backend, MonteCarlo):
        D = _mc_deviation(V_bulk, W, params.N, all_marked, backend)
    else:
        raise UnsupportedBackend(f"unknown backend {backend!r}")
    d0 = D.at_zero
    Wn = D(V_bulk.grid.full_points / params.beta) - d0
    if not np.all(np.isfinite(Wn)) or not math.isfinite(d0):
        raise NumericalFailure("deviation_step", "non-finite deviation")
    return SampledFunction(V_bulk.grid, Wn), -d0


# --- the delta_b series ------------------------------------------------------------

def source_amplitude(spec, params, n_uv_layers):
    """Per-leaf source strength on the finest layer.

    k = 1: t * p^{-(d-[phi]) U};  k = 2: t * Z^U * p^{-(d-2[phi]) U} with Z = p^{kappa/2}.
    """
    U, p = n_uv_layers, params.p
    if spec.k == 1:
        return spec.amplitude * p ** (-(params.d - params.phi_dim) * U)
    Z = p ** (spec.kappa / 2.0)
    return spec.amplitude * Z**U * p ** (-(params.d - 2.0 * params.phi_dim) * U)


def initial_deviation(spec, params, grid, n_uv_layers):
    h = source_amplitude(spec, params, n_uv_layers)
    x = grid.full_points
    if spec.k == 1:
        return SampledFunction(grid, -h * x)
    return SampledFunction(grid, -h * (x * x - params.field_variance - spec.Y))


@dataclass
class CumulantResult:
    value: float
    terms: list
    multiplicities: list
    tail_bound: float
    steps: int


def cumulant_series(spec, bulk_trajectory, params, n_uv_layers=0, backend=NESTED, tol=TERM_TOL):
    """Run the deviation flow along ``bulk_trajectory`` and sum the weighted delta_b differences.

    ``bulk_trajectory[q]`` is the bulk potential integrated at step q.  The
    first ``n_uv_layers + support_level`` steps are UV steps, each block fully
    inside the support, counted ``N^(U+s-q-1)`` times.
    """
    traj = list(bulk_trajectory)
    if not traj:
        raise ValueError("empty bulk trajectory")
    U, s = int(n_uv_layers), spec.support_level
    n_uv = U + s
    if len(traj) <= n_uv:
        raise ValueError(f"trajectory of {len(traj)} steps does not reach past the support "
                         f"({n_uv} UV steps)")
    grid = traj[0].grid
    if spec.amplitude == 0:
        return CumulantResult(0.0, [0.0] * len(traj), [1] * len(traj), 0.0, 0)
    W = initial_deviation(spec, params, grid, U)
    terms, mult = [], []
    N = params.N
    for q, V in enumerate(traj):
        uv = q < n_uv
        W, term = deviation_step(V, W, params, backend, all_marked=uv)
        m = N ** (n_uv - q - 1) if uv else 1
        terms.append(term)
        mult.append(m)
        if not math.isfinite(term):
            raise NumericalFailure("cumulant_generating", f"non-finite term at step {q}")
        if not uv and abs(term) < tol and q > n_uv:
            break
        if not uv and q >= n_uv + 20 and abs(term) >= abs(terms[-2]):
            raise NonSummableError("cumulant_generating",
                                   f"terms not decaying after {q - n_uv} IR layers "
                                   f"(last {term:.3g})")
    weighted = [m * t for m, t in zip(mult, terms)]
    value = math.fsum(weighted)
    tail = 0.0
    if abs(terms[-1]) >= tol and len(terms) - n_uv >= 2 and terms[-2] != 0:
        r = abs(terms[-1] / terms[-2])
        tail = abs(terms[-1]) * r / (1.0 - r) if r < 1 else float("inf")
    return CumulantResult(value, terms, mult, tail, len(terms))


def cumulant_generating(spec, bulk_trajectory, params, n_uv_layers=0, backend=NESTED):
    """S^T(f) = sum_q (delta_b(V[f]) - delta_b(V[0])), f described by ``spec``."""
    return cumulant_series(spec, bulk_trajectory, params, n_uv_layers, backend).value


def t_cumulants(spec, bulk_trajectory, params, n_uv_layers=0, h=None, backend=NESTED):
    """First four t-derivatives of S^T(t f) at t = 0 by central differences with step ``h``."""
    h = spec.amplitude if h is None else h
    if not h > 0:
        raise ValueError("difference step must be positive")
    # one truncation depth for all amplitudes, else the stopping rule leaks into the differences
    traj = list(bulk_trajectory)
    n = cumulant_series(spec.with_amplitude(2 * h), traj, params, n_uv_layers, backend).steps
    S = {j: cumulant_series(spec.with_amplitude(j * h), traj[:n], params, n_uv_layers, backend,
                            tol=0.0).value for j in (-2, -1, 0, 1, 2)}
    return {
        1: (S[1] - S[-1]) / (2 * h),
        2: (S[1] - 2 * S[0] + S[-1]) / h**2,
        3: (S[2] - 2 * S[1] + 2 * S[-1] - S[-2]) / (2 * h**3),
        4: (S[2] - 4 * S[1] + 6 * S[0] - 4 * S[-1] + S[-2]) / h**4,
    }


# --- exact Gaussian reference --------------------------------------------------------

def gaussian_pair_form(params, depth, support_level, weight=1.0):
    """<f, C f> for f = weight on a ball of N^support_level leaves of a depth-``depth`` tree.

    Var(sum over the ball of phi): layers below the ball's level cancel by the
    zero sum, layer q >= s contributes N^{2s} beta^{-2q} (1 - 1/N).
    """
    N, b2 = params.N, params.beta**-2
    s = support_level
    if not 0 <= s < depth:
        raise ValueError("support level must lie in [0, depth)")
    var = sum(b2**q * (1.0 - 1.0 / N) for q in range(s, depth))
    return weight**2 * N ** (2 * s) * var


# --- Y calibration ---------------------------------------------------------------------

def _linear_part(spec, traj, params, U, t, backend):
    def d(h):
        return (cumulant_generating(spec.with_amplitude(h), traj, params, U, backend)
                - cumulant_generating(spec.with_amplitude(-h), traj, params, U, backend)) / (2 * h)
    # Richardson: remove the O(t^2) term of the symmetric difference
    return (4.0 * d(t / 2.0) - d(t)) / 3.0


def calibrate_Y(params, bulk_trajectory, kappa, t=0.05, depths=None, support_level=0,
                backend=NESTED, tol=1e-3):
    """Subtraction constant Y that removes the linear-in-t part of the phi^2 series.

    For UV depth B the linear coefficient is a(B) = H_B (m_B - C0 - Y) + const,
    with H_B the total source weight per unit t and m_B the mean of phi^2.
    Y is the least-squares slope of a against H over consecutive depths, with
    Y = 0 in the fit itself.
    """
    traj = list(bulk_trajectory)
    if depths is None:
        top = min(12, len(traj) - support_level - 2)
        depths = list(range(max(0, top - 9), top + 1))
    depths = sorted(int(b) for b in depths)
    if len(depths) < 3:
        raise CalibrationError("calibrate_Y", "need at least three UV depths")
    spec = TestFunctionSpec(2, t, support_level, kappa, 0.0)
    H, A = [], []
    for B in depths:
        # all depths share the IR part of the trajectory; deeper ones start earlier
        traj_B = traj[max(depths) - B:]
        H.append(params.N ** (B + support_level)
                 * source_amplitude(spec.with_amplitude(1.0), params, B))
        A.append(_linear_part(spec, traj_B, params, B, t, backend))
    H, A = np.array(H), np.array(A)
    dH, dA = np.diff(H), np.diff(A)
    Y = float(np.sum(dA * dH) / np.sum(dH * dH))
    resid = np.max(np.abs(dA - Y * dH))
    if resid > tol * max(np.max(np.abs(A)), abs(Y) * np.max(np.abs(dH))):
        raise CalibrationError("calibrate_Y",
                               f"linear part not explained by a constant Y (residual {resid:.3g})")
    return Y


# --- anomalous dimension from the phi^2 direction --------------------------------------

def phi2_growth(params, bulk_trajectory, fp=None, t=1e-4, backend=NESTED):
    """Amplitudes a_n of the :phi^2: tangent carried along the trajectory.

    With ``fp`` the amplitude is the component along the fixed point's unstable
    direction; otherwise the :phi^2: coupling of the tangent.
    """
    from .dynamics import Collocation, _unit_left
    from .funcs import from_couplings, project_couplings
    from .blockmap import rg_step_composite

    traj = list(bulk_trajectory)
    grid = traj[0].grid
    coll = fp.collocation if fp is not None else Collocation(grid)
    es = _unit_left(fp) if fp is not None else None
    u = from_couplings(grid, {2: 1.0})
    amps = []
    for n, V in enumerate(traj):
        if n:
            scale = max(float(np.max(np.abs(coll.coords(u)))), 1e-300)
            prev = traj[n - 1]
            V1, _ = rg_step_composite(prev, params, backend)
            Vp, _ = rg_step_composite(prev + u * (t / scale), params, backend)
            u = (Vp - V1) * (scale / t)
        amps.append(float(es @ coll.coords(u)) if es is not None
                    else project_couplings(u, 4)[2])
    return np.array(amps)


def kappa_from_phi2_flow(params, bulk_trajectory, fp=None, window=None, t=1e-4,
                         backend=NESTED, rtol=5e-3):
    """kappa_hat = 2 (d - 2[phi]) - 2 log_L(rate), rate the fitted growth of the phi^2 tangent."""
    a = phi2_growth(params, bulk_trajectory, fp, t, backend)
    if np.any(a == 0) or np.any(np.sign(a) != np.sign(a[0])):
        raise ConvergenceError("kappa_from_phi2_flow", "phi^2 amplitude changes sign", a.tolist())
    n = np.arange(a.size)
    lo, hi = (0, a.size) if window is None else window
    if hi - lo < 3:
        raise ConvergenceError("kappa_from_phi2_flow", "window too short", a.tolist())
    la = np.log(np.abs(a[lo:hi]))
    slope, icpt = np.polyfit(n[lo:hi], la, 1)
    rates = np.exp(np.diff(la))
    if np.max(np.abs(rates / math.exp(slope) - 1.0)) > rtol:
        raise ConvergenceError("kappa_from_phi2_flow",
                               "amplitude growth is not a clean exponential", rates.tolist())
    L = params.p**params.l
    return 2.0 * (params.d - 2.0 * params.phi_dim) - 2.0 * slope / math.log(L)
