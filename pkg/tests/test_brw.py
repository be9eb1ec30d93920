import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brwconc import brw, mc
from brwconc.errors import DegenerateWeights
from brwconc.models import make_model
from brwconc.rng import RngSpec
from brwconc.transfer import weighted_marginal


def _ksat(u0=0.1, N=10, M=8):
    return make_model("rademacher", "ksat_like", N=N, n=M, M=M, u0=u0,
                      branching_params={"K": 2})


# reduction to the plain walk


def test_paths_engine_reduces_to_plain_walk():
    m = make_model(N=50, n=30, M=30)
    plain = mc.simulate_paths(m, 30, 1000, RngSpec(7))
    s = brw.weighted_paths(m, 30, 30, 1000, RngSpec(7))
    assert s.w is None and s.log_norm == 0.0
    assert np.array_equal(s.S, plain.S)


def test_population_engine_reduces_to_plain_walk():
    m = make_model(N=50, n=30, M=30)
    plain = mc.simulate_paths(m, 30, 1000, RngSpec(7))
    s = brw.population_sample(m, 30, 30, cap=1000, rng=RngSpec(7))
    assert s.w is None
    assert np.array_equal(s.S, plain.S)
    assert s.replicates[0].resample_log == []


def test_unit_branching_tail_equals_plain_tail():
    m = make_model(N=50, n=30, M=30)
    plain = mc.empirical_tail(mc.simulate_paths(m, 30, 2000, RngSpec(3)), 0.0, 6.0)
    w = brw.sample_tail(brw.weighted_paths(m, 30, 30, 2000, RngSpec(3)), 6.0, center=0.0)
    assert (w.p_hat, w.ci_low, w.ci_high) == (plain.p_hat, plain.ci_low, plain.ci_high)


def test_constant_function_has_expectation_one():
    est = brw.weighted_expectation(_ksat(), lambda u: np.ones_like(u), trials=5000, rng=1)
    assert est.value == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32), n=st.integers(0, 8))
def test_weights_are_normalised(seed, n):
    s = brw.weighted_paths(_ksat(), 8, n, 300, seed)
    assert s.w is not None and s.w.sum() == pytest.approx(1.0)
    assert np.all(s.w >= 0) and 1.0 <= s.ess <= 300 + 1e-9


# population mechanics


def test_constant_rate_two_doubles_population():
    m = make_model("rademacher", "constant", N=100, n=5, M=5, branching_params={"rate": 2.0})
    run = brw.simulate_population(m, 5, cap=None, rng=4, founders=1, offspring="poisson")
    # Poisson(2) offspring: check the mean growth over replicates instead of one run
    sizes = [brw.simulate_population(m, 5, cap=None, rng=RngSpec(4, r), founders=1)
             .final.count for r in range(400)]
    assert abs(np.mean(sizes) - 32.0) < 4 * np.std(sizes) / math.sqrt(400)
    assert run.summaries[0][1] == 1


def test_expected_mode_grows_weight_exactly():
    m = make_model("rademacher", "constant", N=100, n=5, M=5, branching_params={"rate": 2.0})
    run = brw.simulate_population(m, 5, cap=None, rng=4, founders=1, offspring="expected")
    assert run.final.count == 1
    assert run.log_Z == pytest.approx(5 * math.log(2.0))


def test_population_cap_is_respected():
    m = make_model("rademacher", "scatter", N=20, n=30, M=30)
    run = brw.simulate_population(m, 30, cap=1000, rng=2)
    for gen, count, *_ in run.summaries:
        assert count <= 2 * 1000 or gen == 0
    assert run.final.count <= 2000 and run.resample_log


def test_resampling_preserves_normaliser():
    m = make_model("rademacher", "scatter", N=20, n=30, M=30)
    exact = weighted_marginal(m).log_norm
    for offspring in ("expected", "poisson"):
        logs = [brw.simulate_population(m, 30, cap=1000, rng=RngSpec(2, r),
                                        offspring=offspring).log_Z for r in range(10)]
        assert _normaliser_agrees(logs, exact)


def _normaliser_agrees(logs, exact):
    z = np.exp(np.array(logs) - exact)
    return abs(z.mean() - 1.0) < 4 * z.std(ddof=1) / math.sqrt(len(z)) + 0.01


def test_systematic_resample_counts():
    w = np.array([0.5, 0.25, 0.25])
    idx = brw.systematic_resample(w, 4, np.random.default_rng(0))
    assert np.bincount(idx, minlength=3).tolist() == [2, 1, 1]


def test_extinction_is_reported():
    m = make_model("rademacher", "constant", N=100, n=30, M=30, branching_params={"rate": 0.2})
    run = brw.simulate_population(m, 30, cap=None, rng=1, founders=5)
    assert run.extinct_at is not None and run.log_Z == -math.inf
    with pytest.raises(DegenerateWeights):
        brw.population_sample(m, 30, 30, cap=None, rng=1, founders=5)


def test_population_is_reproducible():
    m = _ksat(0.1, N=10, M=8)
    a = brw.population_sample(m, cap=2000, rng=RngSpec(5), replicates=2)
    b = brw.population_sample(m, cap=2000, rng=RngSpec(5), replicates=2)
    assert np.array_equal(a.S, b.S) and np.array_equal(a.w, b.w)


# agreement with the exact weighted law


def test_paths_engine_matches_exact_law():
    m = _ksat(0.1, N=10, M=8)
    exact = weighted_marginal(m)
    est = brw.weighted_expectation(m, trials=50_000, rng=11)
    assert abs(est.value - exact.mean) < 4 * est.se
    assert est.log_norm == pytest.approx(exact.log_norm, abs=0.02)


def test_population_engine_matches_exact_law():
    m = _ksat(0.1, N=10, M=8)
    exact = weighted_marginal(m)
    est = brw.weighted_expectation(m, engine="population", cap=5000, replicates=8, rng=12)
    assert abs(est.value - exact.mean) < 4 * est.se + 1e-3


def test_weighted_tail_matches_exact_law():
    m = _ksat(0.1, N=10, M=8)
    exact = weighted_marginal(m)
    S = np.round(exact.u * 10) - 1
    center = float(np.dot(exact.prob, S))
    p = float(exact.prob[np.abs(S - center) >= 2.0].sum())
    t = brw.brw_tail(m, lam=2.0, trials=50_000, rng=13)
    assert t.ci_low - 0.01 <= p <= t.ci_high + 0.01


def test_ess_floor_raises():
    m = _ksat(0.5, N=10, M=60)
    with pytest.raises(DegenerateWeights):
        brw.weighted_expectation(m, trials=200, rng=1, ess_floor=150)


def test_unknown_engine():
    with pytest.raises(ValueError):
        brw.weighted_expectation(_ksat(), engine="nope")


def test_horizon_checks():
    m = _ksat()
    with pytest.raises(ValueError):
        brw.weighted_paths(m, 9)
    with pytest.raises(ValueError):
        brw.weighted_paths(m, 8, 9)


def test_tower_property():
    m = _ksat(0.1, N=10, M=8)
    t = brw.tower_check(m, 4, outer=2000, inner=100, direct_trials=50_000, rng=5)
    assert abs(t.z) < 4


# negative association


def test_jackknife_matches_direct_leave_one_out():
    rng = np.random.default_rng(0)
    fx, Z = rng.random(30), rng.random(30)
    margin, se = brw.jackknife_margin(fx, Z)
    assert margin == pytest.approx(fx.mean() * Z.mean() - (fx * Z).mean())
    loo = []
    for k in range(30):
        keep = np.arange(30) != k
        loo.append(fx[keep].mean() * Z[keep].mean() - (fx[keep] * Z[keep]).mean())
    loo = np.array(loo)
    assert se == pytest.approx(math.sqrt(29 / 30 * np.sum((loo - loo.mean()) ** 2)))


def _gauss(branching, **bp):
    return make_model("gaussian", branching, N=200, n=10, M=10, branching_params=bp)


def test_association_unit_branching_is_neutral():
    for r in brw.negative_association_test(_gauss("unit"), trials=20_000, rng=1):
        assert abs(r.margin) < 1e-12


def test_association_squeeze_holds():
    reps = brw.negative_association_test(_gauss("squeeze", delta=5.0), trials=20_000, rng=1)
    assert all(r.z > 3 for r in reps)


def test_association_scatter_fails():
    reps = {r.f: r for r in brw.negative_association_test(_gauss("scatter", delta=5.0),
                                                           trials=20_000, rng=1)}
    assert reps["x"].z < -3


def test_association_transfer_matches_product_sign():
    m = _gauss("squeeze", delta=5.0)
    a = brw.negative_association_test(m, trials=20_000, rng=2, z_method="product")
    assert a[0].z_method == "product" and a[0].margin > 0


def test_association_preconditions():
    m = _gauss("squeeze", delta=1.0)
    with pytest.raises(ValueError):
        brw.negative_association_test(m, i=3, trials=100)
    with pytest.raises(ValueError):
        brw.negative_association_test(m, i=10, trials=100, u_prev=0.0)


# variance comparison


def test_variance_comparison_unit_is_identical():
    v = brw.variance_comparison(make_model(N=50, n=20, M=20), trials=5000, rng=3)
    assert v.var_weighted == v.var_plain and v.separation == 0.0


def test_variance_comparison_squeeze_is_smaller():
    v = brw.variance_comparison(_gauss("squeeze", delta=5.0), trials=20_000, rng=3)
    assert v.separation < -3


def test_variance_comparison_scatter_is_larger():
    v = brw.variance_comparison(_gauss("scatter", delta=5.0), engine="population", cap=2000,
                                replicates=6, trials=20_000, rng=3)
    assert v.separation > 3
