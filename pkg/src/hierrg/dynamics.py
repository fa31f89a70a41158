"""The RG as a dynamical system on even single-spin potentials.

Flows, Newton fixed points with their linearization spectrum, continuation in
epsilon, critical-mass shooting, and the unstable-direction amplitudes
(wave operator and nonlinear scaling field) around a nontrivial fixed point.
"""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.interpolate import CubicSpline

from .blockmap import NESTED, RGParams, rg_step_composite
from .errors import (ConvergenceError, InconclusiveError, InvalidFixedPoint, NoBracketError,
                     NumericalFailure)
from .funcs import SampledEvenFunction, _EvenTail, from_couplings, project_couplings
from .rng import parallel_map

DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class FlowRecord:
    step: int
    couplings: object
    delta_b: float
    norm: float


@dataclass
class FlowResult:
    records: list
    diverged: bool = False
    potentials: list = field(default_factory=list)
    message: str = ""


def flow(V0, params, n_steps, backend=NESTED, K=4, keep_potentials=False):
    """Iterate the (composite) RG map ``n_steps`` times, recording couplings, delta_b and norms.

    Stops early with ``diverged=True`` once the sup-norm exceeds 1e6 or the map
    fails numerically.
    """
    records, pots = [], [V0] if keep_potentials else []
    V = V0
    for q in range(1, n_steps + 1):
        try:
            V, db = rg_step_composite(V, params, backend)
        except NumericalFailure as exc:
            return FlowResult(records, True, pots, str(exc))
        norm = V.sup_norm()
        if not math.isfinite(norm) or norm > DIVERGENCE_NORM:
            return FlowResult(records, True, pots, f"sup-norm {norm:.3g} at step {q}")
        records.append(FlowRecord(q, project_couplings(V, K), db, norm))
        if keep_potentials:
            pots.append(V)
    return FlowResult(records, False, pots)


class Collocation:
    """Reduced coordinates: values of V at ``n_c`` uniform points of ``[0, phi_coll]``.

    ``function`` maps coordinates back to the fine grid with a clamped cubic
    spline and the even quadratic-plus-quartic tail beyond ``phi_coll``.
    """

    def __init__(self, grid, n_c=33, phi_coll=10.0):
        if phi_coll > grid.phi_max:
            raise ValueError("collocation range exceeds the grid")
        self.grid = grid
        self.points = np.linspace(0.0, phi_coll, n_c)
        self.phi_coll = phi_coll

    def coords(self, F):
        return np.asarray(F(self.points), dtype=float)

    def function(self, x):
        x = np.asarray(x, dtype=float)
        spline = CubicSpline(self.points, x, bc_type=((1, 0.0), "not-a-knot"))
        tail = _EvenTail(self.points, x)
        phi = self.grid.points
        vals = np.where(phi <= self.phi_coll, spline(np.minimum(phi, self.phi_coll)), tail(phi))
        return SampledEvenFunction(self.grid, vals)


@dataclass
class FixedPointRecord:
    potential: SampledEvenFunction
    coords: np.ndarray
    residual: float
    eigenvalues: np.ndarray
    kind: str
    epsilon: float
    kappa: float
    layers: int
    params: RGParams
    jacobian: np.ndarray = field(repr=False)
    right_vectors: np.ndarray = field(repr=False)
    left_vectors: np.ndarray = field(repr=False)
    iterations: int = 0
    trace: list = field(default_factory=list, repr=False)
    collocation: Collocation = field(default=None, repr=False)

    @property
    def leading(self):
        return float(self.eigenvalues[0])

    def couplings(self, K=4):
        return project_couplings(self.potential, K)

    def unstable_count(self):
        return int(np.sum(self.eigenvalues > 1.0))

    def summary(self):
        return {
            "kind": self.kind,
            "epsilon": self.epsilon,
            "layers": self.layers,
            "residual": self.residual,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "kappa": self.kappa,
            "iterations": self.iterations,
            "couplings": [float(c) for c in self.couplings().coefficients],
        }


def _rg_coords(x, coll, params, backend):
    V = coll.function(x)
    V1, _ = rg_step_composite(V, params, backend)
    return coll.coords(V1)


def reduced_jacobian(x, coll, params, backend=NESTED, h=1e-5, base=None):
    """Forward-difference Jacobian of the reduced map x -> coords(RG(V(x)))."""
    f0 = _rg_coords(x, coll, params, backend) if base is None else base

    def column(j):
        xp = x.copy()
        xp[j] += h
        return (_rg_coords(xp, coll, params, backend) - f0) / h

    return np.column_stack(parallel_map(column, range(x.size))), f0


def _spectrum(DRG):
    vals, right = np.linalg.eig(DRG)
    order = np.argsort(-np.abs(vals), kind="stable")
    vals, right = vals[order], right[:, order]
    lvals, left = np.linalg.eig(DRG.T)
    # pair each left vector with the closest right eigenvalue
    idx = [int(np.argmin(np.abs(lvals - v))) for v in vals]
    left = left[:, idx]
    # fix the arbitrary sign: largest component of each right vector positive
    big = np.argmax(np.abs(right.real), axis=0)
    sign = np.sign(right.real[big, np.arange(right.shape[1])])
    sign[sign == 0] = 1.0
    return vals, right * sign, left


def find_fixed_point(guess, params, tol=1e-9, backend=NESTED, collocation=None,
                     max_iter=50, h=1e-5):
    """Newton iteration for RG(V*) = V* in reduced coordinates.

    Returns a :class:`FixedPointRecord` whose eigenvalues are those of the
    linearized map (finite-difference Jacobian + identity), in descending order.
    The constant mode is absent: normalization V(0) = 0 turns it into the zero
    eigenvalue of the phi = 0 coordinate.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    coll = collocation or Collocation(guess.grid)
    x = coll.coords(guess)
    x = x - x[0]
    n = x.size
    f = _rg_coords(x, coll, params, backend)
    R = f - x
    res = float(np.max(np.abs(R)))
    trace = [res]
    it = 0
    while res > tol:
        if it >= max_iter:
            raise ConvergenceError("find_fixed_point",
                                   f"no convergence in {max_iter} Newton steps (residual {res:.3g})",
                                   trace)
        J, _ = reduced_jacobian(x, coll, params, backend, h, base=f)
        J = J - np.eye(n)
        try:
            if np.linalg.cond(J) > 1e14:
                raise np.linalg.LinAlgError
            dx = np.linalg.solve(J, -R)
        except np.linalg.LinAlgError:
            raise ConvergenceError("find_fixed_point", "singular Jacobian", trace) from None
        step = 1.0
        for _ in range(12):
            xt = x + step * dx
            try:
                ft = _rg_coords(xt, coll, params, backend)
            except NumericalFailure:
                step *= 0.5
                continue
            rt = float(np.max(np.abs(ft - xt)))
            if rt < res or step < 1e-3:
                break
            step *= 0.5
        x, f, res = xt, ft, rt
        R = f - x
        trace.append(res)
        it += 1

    DRG, _ = reduced_jacobian(x, coll, params, backend, h, base=f)
    vals, right, left = _spectrum(DRG)
    if np.max(np.abs(vals.imag)) > 1e-6 * np.max(np.abs(vals)):
        # only the real parts are reported; keep going but say so in the trace
        trace.append(("complex-eigenvalues", float(np.max(np.abs(vals.imag)))))
    vals = vals.real
    right, left = right.real, left.real
    V = coll.function(x)
    if np.max(np.abs(x)) < 1e-12:
        kind = "gaussian"
    elif vals[0] < 1.0:
        kind = "high_temperature"
    else:
        kind = "nontrivial"
    if kind == "gaussian":
        V = SampledEvenFunction.zero(guess.grid)
    rec = FixedPointRecord(V, x, res, vals, kind, params.epsilon, float("nan"), params.l,
                           params, DRG, right, left, it, trace, coll)
    if kind == "nontrivial" and rec.leading > 1.0:
        rec.kappa = kappa_from_spectrum(rec, params)
    elif kind == "gaussian":
        rec.kappa = 0.0
    return rec


def fixed_point_seed(params, grid, g_probe=1e-3, backend=NESTED):
    """Lowest-order estimate of the nontrivial fixed point as g :phi^4: + mu :phi^2:.

    Reads the one-step response of the quartic and quadratic couplings to a
    small pure :phi^4: potential and solves the truncated fixed-point equations.
    """
    V = from_couplings(grid, {4: g_probe})
    V1, _ = rg_step_composite(V, params, backend)
    c = project_couplings(V1, 4)
    lam4 = params.gaussian_eigenvalue(4, params.l)
    lam2 = params.gaussian_eigenvalue(2, params.l)
    B = (lam4 * g_probe - c[4]) / g_probe**2
    if B <= 0 or lam4 <= 1.0:
        raise InvalidFixedPoint("no nontrivial fixed point expected for these parameters")
    g = (lam4 - 1.0) / B
    A = c[2] / g_probe
    mu = -A * g / (lam2 - 1.0)
    return from_couplings(grid, {4: g, 2: mu})


def continue_in_epsilon(eps_values, grid, tol=1e-9, p=2, l=1, backend=NESTED, collocation=None):
    """Nontrivial fixed-point branch for ascending epsilon, each solve seeded by the previous one."""
    eps = list(eps_values)
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps_values must be ascending")
    records, prev = [], None
    for e in eps:
        params = RGParams.bms(e, p=p, l=l)
        if e == 0.0:
            guesses = [SampledEvenFunction.zero(grid)]
        else:
            guesses = [fixed_point_seed(params, grid, backend=backend)]
            if prev is not None and prev.kind == "nontrivial":
                # the branch is O(epsilon): rescale the previous solution first
                guesses.insert(0, prev.potential * (e / prev.epsilon))
        rec, err = None, None
        for guess in guesses:
            try:
                rec = find_fixed_point(guess, params, tol, backend, collocation)
            except ConvergenceError as exc:
                err = exc
                continue
            if rec.kind == "nontrivial" or e == 0.0:
                break
        if rec is None:
            raise ConvergenceError("continue_in_epsilon", f"epsilon={e}: {err}", err.trace) from err
        if e > 0 and rec.kind != "nontrivial":
            raise ConvergenceError("continue_in_epsilon",
                                   f"epsilon={e}: Newton fell back onto the Gaussian fixed point",
                                   rec.trace)
        records.append(rec)
        prev = rec
    return records


def kappa_from_spectrum(fp, params):
    """kappa = 2 (d - 2[phi]) - 2 log_L(lambda_1), with L the scale of the map whose spectrum was taken."""
    lam = fp.leading
    if not lam > 1.0:
        raise InvalidFixedPoint(f"leading eigenvalue {lam} is not expanding")
    L = params.p**fp.layers
    return 2.0 * (params.d - 2.0 * params.phi_dim) - 2.0 * math.log(lam) / math.log(L)


# --- critical mass ------------------------------------------------------------

@dataclass
class Classification:
    label: int          # +1 high-temperature escape, -1 low-temperature escape, 0 undecided
    steps: int
    c2: list


def classify(V0, params, theta=1.0, max_steps=40, backend=NESTED):
    """Follow the flow until it escapes.

    High temperature: c_2 > theta.  Low temperature: c_2 < -theta, or a double
    well deeper than theta (min V < -theta).  The well test matters because on
    the low-temperature side c_2 of the normalized potential can turn back up
    before ever reaching -theta while the well keeps deepening.
    """
    V, c2s = V0, []
    for q in range(1, max_steps + 1):
        try:
            V, _ = rg_step_composite(V, params, backend)
        except NumericalFailure:
            # the map only breaks down deep in an escape; decide from the last trend
            last = c2s[-1] if c2s else 0.0
            return Classification(1 if last > 0 else -1, q, c2s)
        c2 = project_couplings(V, 4)[2]
        c2s.append(c2)
        if c2 < -theta or float(np.min(V.logvals)) < -theta:
            return Classification(-1, q, c2s)
        if c2 > theta:
            return Classification(1, q, c2s)
    return Classification(0, max_steps, c2s)


def bare_potential(grid, g, mu):
    return from_couplings(grid, {4: g, 2: mu})


@dataclass
class CriticalMuResult:
    mu_c: float
    bracket: tuple
    history: list

    @property
    def width(self):
        return self.bracket[1] - self.bracket[0]


def critical_mu(g, params, grid, tol=1e-8, theta=1.0, max_steps=40, bracket=None,
                backend=NESTED):
    """Bisection for the mass that puts g :phi^4: + mu :phi^2: on the critical surface."""
    if g == 0:
        return CriticalMuResult(0.0, (0.0, 0.0), [])
    if not 0 < g <= 1:
        raise ValueError(f"g must lie in (0, 1], got {g}")

    def label(mu):
        return classify(bare_potential(grid, g, mu), params, theta, max_steps, backend)

    lo, hi = bracket if bracket is not None else (-6.0 * g, 0.0)
    history = []
    c_lo, c_hi = label(lo), label(hi)
    history.append((lo, hi, c_lo.label, c_hi.label))
    width0 = hi - lo
    widen = 0
    while not (c_lo.label == -1 and c_hi.label == 1):
        if widen >= 10:
            raise NoBracketError("critical_mu", f"no sign change in [{lo}, {hi}] after widening")
        widen += 1
        if c_lo.label != -1:
            lo -= width0
            c_lo = label(lo)
        if c_hi.label != 1:
            hi += width0
            c_hi = label(hi)
        history.append((lo, hi, c_lo.label, c_hi.label))
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        c = label(mid)
        history.append((lo, hi, c.label, mid))
        if c.label == 0:
            raise InconclusiveError("critical_mu",
                                    f"mu={mid!r} unclassified after {max_steps} steps", c.c2)
        if c.label > 0:
            hi = mid
        else:
            lo = mid
    return CriticalMuResult(0.5 * (lo + hi), (lo, hi), history)


# --- unstable direction ---------------------------------------------------------

def _unit_left(fp):
    e, es = fp.right_vectors[:, 0], fp.left_vectors[:, 0]
    return es / float(es @ e)


def tangent_flow(V, W, params, n, t=1e-4, backend=NESTED, coll=None):
    """Propagate the direction W along the orbit of V by renormalized finite differences.

    Yields ``(k, V_k, u_k)`` for k = 0..n where ``u_k`` approximates
    D(RG^k)(V) W.  Each step perturbs by ``t`` in the normalized direction, so
    the perturbation never leaves the linear regime however large ``u_k`` grows.
    """
    coll = coll or Collocation(V.grid)
    u = W - float(W.logvals[0])
    yield 0, V, u
    for k in range(1, n + 1):
        scale = max(float(np.max(np.abs(coll.coords(u)))), 1e-300)
        V1, _ = rg_step_composite(V, params, backend)
        Vp, _ = rg_step_composite(V + u * (t / scale), params, backend)
        u = (Vp - V1) * (scale / t)
        V = V1
        yield k, V, u


def wave_amplitude(V, W, params, fp, t=1e-4, max_n=30, rtol=1e-4, backend=NESTED):
    """Unstable-direction amplitude of the compensated limit of RG^n(V + Z^n L^{-(d-2[phi])n} W).

    The compensation Z L^{-(d-2[phi])} equals 1/lambda_1, so the amplitude is
    lim_n <e1*, D(RG^n)(V) W> / lambda_1^n, with e1* the left eigenvector at
    ``fp`` normalized against the right one.
    """
    if np.max(np.abs(W.logvals - W.logvals[0])) == 0.0:
        return 0.0
    coll = fp.collocation
    es = _unit_left(fp)
    lam = fp.leading
    hist = []
    for k, _, u in tangent_flow(V, W, params, max_n, t, backend, coll):
        a = float(es @ coll.coords(u)) / lam**k
        hist.append(a)
        if len(hist) >= 3:
            a0, a1, a2 = hist[-3:]
            if abs(a2 - a1) <= rtol * abs(a1) and abs(a1 - a0) <= rtol * abs(a0):
                return a2
    raise ConvergenceError("wave_amplitude", f"no convergence by n={max_n}", hist)


def scaling_field(V, params, fp, max_n=30, rtol=1e-4, backend=NESTED, return_history=False):
    """z(V) = lim_n <e1*, RG^n(V) - V*> / lambda_1^n, the nonlinear unstable coordinate."""
    coll = fp.collocation
    es = _unit_left(fp)
    lam = fp.leading
    hist = []
    for n in range(max_n + 1):
        if n:
            V, _ = rg_step_composite(V, params, backend)
        hist.append(float(es @ (coll.coords(V) - fp.coords)) / lam**n)
        if len(hist) >= 3:
            a0, a1, a2 = hist[-3:]
            if abs(a2 - a1) <= rtol * abs(a1) and abs(a1 - a0) <= rtol * abs(a0):
                return (a2, hist) if return_history else a2
    raise ConvergenceError("scaling_field", f"no convergence by n={max_n}", hist)
