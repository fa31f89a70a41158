import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierrg.blockmap import RGParams
from hierrg.errors import DegenerateInput, MemoryGuardError
from hierrg.rng import set_threads
from hierrg.tree import (CorrelationTable, TreeAddress, empirical_covariances,
                         exact_covariance_at_level, exact_covariance_matrix,
                         exact_pair_covariance, fit_covariance_exponent, gaussian_correlations,
                         mcmc_perturbed_field, sample_gaussian_field, separation_level,
                         ultrametric_distance)

P = RGParams.bms(0.0)


def level_formula(params, D, j):
    N, b2 = params.N, params.beta**-2
    tail = (1 - 1 / N) * sum(b2**q for q in range(j, D))
    return tail if j == 0 else -b2 ** (j - 1) / N + tail


@pytest.mark.parametrize("D", [2, 3, 5])
def test_level_covariance_closed_form(D):
    for j in range(D + 1):
        assert exact_covariance_at_level(P, D, j) == pytest.approx(level_formula(P, D, j),
                                                                   rel=1e-14, abs=1e-16)


def test_covariance_matrix_annihilates_constants():
    # every layer's blocks sum to zero, so the total field vanishes identically
    C = exact_covariance_matrix(P, 3)
    assert np.max(np.abs(C @ np.ones(len(C)))) < 1e-12
    assert np.min(np.linalg.eigvalsh(C)) > -1e-12
    i, j = 5, 300
    assert C[i, j] == pytest.approx(exact_pair_covariance(P, 3, i, j))
    with pytest.raises(MemoryGuardError):
        exact_covariance_matrix(P, 5)


@given(st.lists(st.integers(0, 7), min_size=4, max_size=4),
       st.lists(st.integers(0, 7), min_size=4, max_size=4),
       st.lists(st.integers(0, 7), min_size=4, max_size=4))
@settings(max_examples=60, deadline=None)
def test_ultrametric_inequality(a, b, c):
    x, y, z = (TreeAddress(tuple(v), 8) for v in (a, b, c))
    dxy, dyz, dxz = (ultrametric_distance(u, v, 2.0) for u, v in ((x, y), (y, z), (x, z)))
    assert dxz <= max(dxy, dyz)
    assert dxy == ultrametric_distance(y, x, 2.0)
    assert (dxy == 0) == (x == y)
    assert dxy == (2.0 ** separation_level(x.index, y.index, 8) if dxy else 0.0)


def test_address_round_trip():
    a = TreeAddress.from_index(1234, 8, 4)
    assert a.digits == (2, 3, 2, 2) and a.index == 1234
    with pytest.raises(ValueError):
        TreeAddress((8,), 8)
    with pytest.raises(ValueError):
        ultrametric_distance(a, TreeAddress((1,), 8), 2.0)


def test_full_tree_samples_sum_to_zero_and_match_oracle():
    samples = sample_gaussian_field(P, 3, 3000, seed=4)
    V = np.stack([s.leaf_values for s in samples])
    assert np.max(np.abs(V.sum(axis=1))) < 1e-10
    table = empirical_covariances(samples, levels=[1, 2, 3])
    exact = np.array([exact_covariance_at_level(P, 3, j) for j in range(1, 4)])
    assert np.all(np.abs(table.cov_phi - exact) < 4 * table.cov_phi_stderr)
    var = np.mean(V * V)
    assert abs(var - exact_covariance_at_level(P, 3, 0)) < 0.02


def test_subset_sampling_uses_exact_law():
    D = 4
    samples = sample_gaussian_field(P, D, 4000, seed=1, branching=2)
    s0 = samples[0]
    assert s0.n_leaves == 16 and s0.branching == 2
    idx = [s0.leaf_index(k) for k in range(16)]
    assert idx[:3] == [0, 1, 8] and idx[-1] == 8**3 + 8**2 + 8 + 1
    V = np.stack([s.leaf_values for s in samples])
    C = V.T @ V / len(V)
    exact = np.array([[exact_pair_covariance(P, D, i, j) for j in idx] for i in idx])
    se = np.sqrt((np.diag(exact)[:, None] * np.diag(exact)[None, :] + exact**2) / len(V))
    assert np.max(np.abs(C - exact) / se) < 4.5


def test_streaming_estimator_matches_stored_samples():
    a = gaussian_correlations(P, 4, 50, seed=9, levels=[1, 2, 3])
    b = empirical_covariances(sample_gaussian_field(P, 4, 50, seed=9), levels=[1, 2, 3])
    assert np.allclose(a.cov_phi, b.cov_phi, rtol=1e-12)
    assert np.allclose(a.cov_phi2_stderr, b.cov_phi2_stderr, rtol=1e-12)


def test_sampling_deterministic_across_threads():
    set_threads(1)
    a = sample_gaussian_field(P, 3, 8, seed=2)
    set_threads(4)
    b = sample_gaussian_field(P, 3, 8, seed=2)
    set_threads(None)
    assert all(np.array_equal(x.leaf_values, y.leaf_values) for x, y in zip(a, b))


def test_memory_guard():
    with pytest.raises(MemoryGuardError):
        sample_gaussian_field(P, 12, 1, branching=8)
    with pytest.raises(MemoryGuardError):
        sample_gaussian_field(P, 6, 500)
    # the automatic choice falls back to a subset
    assert sample_gaussian_field(P, 9, 1)[0].branching == 3


def _exact_table(params, D):
    levels = np.arange(1, D + 1)
    c = np.array([exact_covariance_at_level(params, D, int(j)) for j in levels])
    tiny = np.full(D, 1e-12)
    return CorrelationTable(levels, 2.0**levels, c, tiny * c, 2 * c * c, tiny * c * c,
                            np.full(D, 1e9), {"depth": D})


def test_fit_on_exact_covariances():
    table = _exact_table(P, 10)
    expo, err = fit_covariance_exponent(table)
    # levels 2..7 survive; reference slope by polyfit
    x, y = np.log(2.0 ** np.arange(2, 8)), np.log(table.cov_phi[1:7])
    assert expo == pytest.approx(-np.polyfit(x, y, 1)[0], rel=1e-12)
    assert expo == pytest.approx(1.5154, abs=5e-4)
    e2, _ = fit_covariance_exponent(table, observable="phi2")
    assert e2 == pytest.approx(2 * expo, rel=1e-12)
    with pytest.raises(DegenerateInput):
        fit_covariance_exponent(table, distances=[2.0, 4.0])
    with pytest.raises(DegenerateInput):
        fit_covariance_exponent(table, distances=[2.0, 4.0, 8.0])
    with pytest.raises(ValueError):
        fit_covariance_exponent(table, distances=[2.0, 3.0, 8.0, 16.0])


def test_correlation_csv(tmp_path):
    _exact_table(P, 4).to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "distance,cov_phi,cov_phi_stderr,cov_phi2,cov_phi2_stderr"
    assert len(lines) == 5


def test_mcmc_free_field_against_oracle():
    res = mcmc_perturbed_field(P, None, 3, sweeps=3000, burn_in=300, seed=3)
    t = res.table
    exact = np.array([exact_covariance_at_level(P, 3, j) for j in t.levels])
    assert np.all(np.abs(t.cov_phi - exact) < 3.5 * t.cov_phi_stderr)
    assert np.all((res.acceptance > 0.2) & (res.acceptance < 0.5))
    again = mcmc_perturbed_field(P, None, 3, sweeps=3000, burn_in=300, seed=3)
    assert np.array_equal(again.table.cov_phi2, t.cov_phi2)


def test_mcmc_argument_checks():
    with pytest.raises(ValueError):
        mcmc_perturbed_field(P, None, 9, 100, 10)
    with pytest.raises(ValueError):
        mcmc_perturbed_field(P, None, 3, 10, 10)
