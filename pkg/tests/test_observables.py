import math

import numpy as np
import pytest

from hierrg.blockmap import MonteCarlo, RGParams
from hierrg.funcs import GridSpec, SampledEvenFunction, SampledFunction, from_couplings
from hierrg.observables import (TestFunctionSpec, calibrate_Y, cumulant_series, deviation_step,
                                gaussian_pair_form, initial_deviation, phi2_growth,
                                source_amplitude, t_cumulants)

GRID = GridSpec(10.0, 513)
P = RGParams.bms(0.1)
FREE = [SampledEvenFunction.zero(GRID)] * 40


def test_spec_validation():
    with pytest.raises(ValueError):
        TestFunctionSpec(3, 0.1)
    with pytest.raises(ValueError):
        TestFunctionSpec(1, 0.1, support_level=-1)
    with pytest.raises(ValueError):
        TestFunctionSpec(1, float("nan"))


def test_source_amplitudes():
    s1 = TestFunctionSpec(1, 0.3)
    assert source_amplitude(s1, P, 2) == pytest.approx(0.3 * 2 ** (-(3 - 0.725) * 2))
    s2 = TestFunctionSpec(2, 0.3, kappa=0.1)
    assert source_amplitude(s2, P, 2) == pytest.approx(0.3 * 2**0.1 * 2 ** (-(3 - 1.45) * 2))
    W = initial_deviation(TestFunctionSpec(2, 1.0, Y=0.2), P, GRID, 0)
    assert W.at_zero == pytest.approx(P.field_variance + 0.2)


def test_linear_deviation_closed_form():
    h = 0.3
    W = SampledFunction(GRID, -h * GRID.full_points)
    W1, db = deviation_step(FREE[0], W, P)
    x = GRID.full_points
    assert np.max(np.abs(W1.logvals - (-h * x / P.beta))[np.abs(x) < 8]) < 1e-12
    assert db == pytest.approx(0.5 * h * h * (1 - 1 / P.N), rel=1e-12)
    # every site marked: the block sum of fluctuations vanishes, so only the field shifts
    W2, db2 = deviation_step(FREE[0], W, P, all_marked=True)
    assert abs(db2) < 1e-13
    assert np.max(np.abs(W2.logvals - (-P.N * h * x / P.beta))[np.abs(x) < 8]) < 1e-10


def test_zero_deviation_short_circuit():
    W, db = deviation_step(FREE[0], SampledFunction.zero(GRID), P)
    assert db == 0.0 and not np.any(W.logvals)
    with pytest.raises(ValueError):
        deviation_step(FREE[0] + 1.0, SampledFunction.zero(GRID), P)


@pytest.mark.parametrize("U,s", [(0, 0), (0, 1), (1, 0), (2, 1)])
def test_gaussian_series_against_tree_oracle(U, s):
    spec = TestFunctionSpec(1, 0.1, s)
    res = cumulant_series(spec, FREE, P, U)
    h = source_amplitude(spec, P, U)
    oracle = 0.5 * gaussian_pair_form(P, len(FREE) - U, s + U, h)
    assert res.value == pytest.approx(oracle, rel=1e-7)
    assert res.multiplicities[:U + s] == [P.N ** (U + s - q - 1) for q in range(U + s)]


def test_uv_refinement_leaves_linear_source_invariant():
    a = cumulant_series(TestFunctionSpec(1, 0.1), FREE, P, 0).value
    b = cumulant_series(TestFunctionSpec(1, 0.1), FREE, P, 3).value
    assert a == pytest.approx(b, rel=1e-12)


def test_t_cumulants_of_free_field():
    spec = TestFunctionSpec(1, 0.1)
    c = t_cumulants(spec, FREE, P)
    var = gaussian_pair_form(P, len(FREE), 0)
    assert c[2] == pytest.approx(var, rel=1e-6)
    assert abs(c[1]) < 1e-10 and abs(c[3]) < 1e-8 and abs(c[4]) < 1e-6


def test_phi2_source_single_site_law():
    # one site of a depth-n free tree: S(t) = -1/2 log(1 - 2 t m_n) - t C0, m_n its variance
    spec = TestFunctionSpec(2, 1e-3)
    n = cumulant_series(spec.with_amplitude(2e-3), FREE, P).steps
    m = gaussian_pair_form(P, n, 0)
    c = t_cumulants(spec, FREE, P, h=1e-3)
    S = {j: -0.5 * math.log(1 - 2e-3 * j * m) - 1e-3 * j * P.field_variance for j in (-1, 0, 1)}
    # same stencil on the exact law, so the O(h^2) difference error cancels
    assert c[1] == pytest.approx((S[1] - S[-1]) / 2e-3, abs=1e-9)
    assert c[2] == pytest.approx((S[1] - 2 * S[0] + S[-1]) / 1e-6, rel=1e-6)
    assert c[2] == pytest.approx(2 * m * m, rel=1e-4)


def test_monte_carlo_deviation_agrees():
    small = GridSpec(6.0, 65)
    V = from_couplings(small, {2: 0.1, 4: 0.02})
    W = SampledFunction(small, -0.5 * small.full_points)
    _, db = deviation_step(V, W, P)
    _, db_mc = deviation_step(V, W, P, MonteCarlo(100000, 1))
    assert db_mc == pytest.approx(db, rel=0.05)


def test_calibrated_Y_vanishes_for_free_field():
    Y = calibrate_Y(P, FREE[:24], 0.0, depths=range(4, 10))
    assert abs(Y) < 1e-10


def test_phi2_growth_rate_in_free_field():
    a = phi2_growth(P, FREE[:6])
    assert np.allclose(a[1:] / a[:-1], P.mass_eigenvalue, rtol=1e-8)
    assert a[0] == pytest.approx(1.0)
    assert math.isfinite(a[-1])
