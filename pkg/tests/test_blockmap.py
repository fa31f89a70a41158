import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierrg.blockmap import (MonteCarlo, NESTED, RGParams, block_covariance, dilute,
                             haar_covariance, haar_scales, parse_backend, rg_step,
                             rg_step_composite, zero_sum_block_integral, zero_sum_samples)
from hierrg.errors import UnsupportedBackend
from hierrg.funcs import GridSpec, SampledEvenFunction
from hierrg.rng import set_threads, stream

GRID = GridSpec(10.0, 513)
SMALL = GridSpec(6.0, 129)


def test_params():
    p = RGParams.bms(0.1)
    assert p.N == 8 and p.phi_dim == pytest.approx(0.725) and p.epsilon == pytest.approx(0.1)
    assert p.gaussian_eigenvalue(4) == pytest.approx(2**0.1)
    assert p.gaussian_eigenvalue(2, layers=2) == pytest.approx(p.mass_eigenvalue**2)
    assert p.field_variance == pytest.approx((7 / 8) / (1 - 2**-1.45))
    for bad in ({"p": 4}, {"d": 0}, {"phi_dim": 2.0}):
        with pytest.raises(ValueError):
            RGParams(**bad)
    with pytest.raises(ValueError):
        RGParams.bms(1.5)


@pytest.mark.parametrize("N", [2, 4, 8, 16])
def test_haar_scales_reproduce_block_covariance(N):
    assert np.allclose(haar_covariance(N), block_covariance(N), atol=1e-14)
    assert haar_scales(N)[0] == pytest.approx(2**-0.5)


def test_nested_needs_power_of_two():
    V = SampledEvenFunction.zero(SMALL)
    with pytest.raises(UnsupportedBackend):
        zero_sum_block_integral(V, RGParams(p=3, d=1, phi_dim=0.25))


def test_parse_backend():
    assert parse_backend("nested") is NESTED
    mc = parse_backend("mc", 5000, 3)
    assert isinstance(mc, MonteCarlo) and mc.n_samples == 5000 and mc.seed == 3
    with pytest.raises(UnsupportedBackend):
        parse_backend("bogus")


def test_zero_sum_samples():
    z = zero_sum_samples(stream(0, 0), 200000, 8)
    assert np.max(np.abs(z.sum(axis=1))) < 1e-12
    assert np.max(np.abs(np.cov(z.T) - block_covariance(8))) < 0.01


@given(mu=st.floats(0.01, 0.5), eps=st.sampled_from([0.0, 0.1, 0.3]))
@settings(max_examples=10, deadline=None)
def test_quadratic_step_closed_form(mu, eps):
    p = RGParams.bms(eps)
    V = SampledEvenFunction.from_callable(GRID, lambda x: mu * x * x)
    V1, db = rg_step(V, p)
    x = GRID.points[1:300]
    assert np.max(np.abs(V1.logvals[1:300] / x**2 - p.N * mu / p.beta**2)) < 1e-9
    assert abs(db + (p.N - 1) / 2 * math.log(1 + 2 * mu)) < 1e-11


def test_zero_potential_is_fixed():
    V1, db = rg_step(SampledEvenFunction.zero(GRID), RGParams())
    assert V1.sup_norm() == 0.0 and abs(db) < 1e-14


def test_composite_is_repeated_step():
    V = SampledEvenFunction.from_callable(GRID, lambda x: 0.05 * x**2 + 0.01 * x**4)
    p = RGParams.bms(0.1)
    a, da = rg_step(V, p)
    b, db = rg_step(a, p)
    c, dc = rg_step_composite(V, p.with_l(2))
    assert np.array_equal(c.logvals, b.logvals) and dc == da + db


def test_dilute():
    V = SampledEvenFunction.from_callable(GRID, lambda x: x * x)
    assert np.allclose(dilute(V, 2.0).logvals, GRID.points**2 / 4, atol=1e-12)


def test_monte_carlo_deterministic_across_threads():
    V = SampledEvenFunction.from_callable(SMALL, lambda x: 0.1 * x**2 + 0.02 * x**4)
    mc = MonteCarlo(60000, 5)
    set_threads(1)
    a, sa = zero_sum_block_integral(V, RGParams(), mc)
    set_threads(4)
    b, sb = zero_sum_block_integral(V, RGParams(), mc)
    set_threads(None)
    assert np.array_equal(a.logvals, b.logvals) and np.array_equal(sa, sb)
    G, _ = zero_sum_block_integral(V, RGParams())
    assert np.max(np.abs(a.logvals - G.logvals) / np.where(sa > 0, sa, 1)) < 5
    with pytest.raises(ValueError):
        MonteCarlo(10)
