import itertools
import math

import numpy as np
import pytest

from brwconc import recurrence
from brwconc.models import make_model
from brwconc.transfer import TransferOperator, weighted_marginal


def _enumerate(N, M, n, U0, K, clamp):
    """Exact weighted law of U_n for rademacher steps and m(u) = 1 - u^K."""
    law, total = {}, 0.0
    for steps in itertools.product((-1, 1), repeat=M):
        U, w, Un = U0, 1.0, None
        for k, s in enumerate(steps, 1):
            U = min(max(U + s, -clamp), clamp)
            w *= min(max(1.0 - (U / N) ** K, 0.0), 1.0)
            if k == n:
                Un = U
        p = w * 0.5 ** M
        law[Un] = law.get(Un, 0.0) + p
        total += p
    return law, total


@pytest.mark.parametrize("N,M,n,U0,K", [(10, 8, 5, 1, 2), (10, 8, 8, 1, 2),
                                        (4, 10, 6, 2, 2), (5, 12, 7, -1, 3)])
def test_lattice_matches_enumeration(N, M, n, U0, K):
    model = make_model("rademacher", "ksat_like", N=N, n=n, M=M, u0=U0 / N,
                       branching_params={"K": K})
    wm = weighted_marginal(model)
    law, total = _enumerate(N, M, n, U0, K, N)
    assert wm.log_norm == pytest.approx(math.log(total), rel=1e-12, abs=1e-12)
    got = {round(u * N): p for u, p in zip(wm.u, wm.prob) if p > 0}
    assert set(got) == {k for k, v in law.items() if v > 0}
    for k, v in law.items():
        if v > 0:
            assert got[k] == pytest.approx(v / total, rel=1e-10)


def test_descendant_weight_matches_enumeration():
    model = make_model("rademacher", "ksat_like", N=10, n=6, M=6, u0=0.1,
                       branching_params={"K": 2})
    op = TransferOperator(model, 1.0, 6)
    Z = op.descendant_weight(6)
    _, total = _enumerate(10, 6, 6, 1, 2, 10)
    assert float(Z(1.0)) == pytest.approx(total, rel=1e-12)
    assert float(op.descendant_weight(0)(3.0)) == 1.0


def test_unit_branching_recovers_plain_walk():
    model = make_model("rademacher", N=20, n=10, M=10)
    wm = weighted_marginal(model)
    assert wm.log_norm == pytest.approx(0.0, abs=1e-14)
    assert wm.mean == pytest.approx(0.0, abs=1e-14)
    assert wm.var == pytest.approx(10 / 400, rel=1e-12)


def test_constant_branching_only_changes_normalisation():
    model = make_model("rademacher", "constant", N=20, n=10, M=10,
                       branching_params={"rate": 2.0})
    wm = weighted_marginal(model)
    assert wm.log_norm == pytest.approx(10 * math.log(2.0), rel=1e-12)
    assert wm.var == pytest.approx(10 / 400, rel=1e-12)


def test_gaussian_unit_branching_matches_recurrence():
    model = make_model("gaussian", N=100, n=30, M=30, u0=0.2,
                       displacement_params={"drift": "linear", "a": -1.0, "sigma": 1.0})
    wm = weighted_marginal(model)
    assert wm.log_norm == pytest.approx(0.0, abs=1e-9)
    mp = recurrence.mean_path(model)
    assert wm.mean == pytest.approx(mp.values[-1], rel=1e-6)
    var = recurrence.variance_curve(model, mp).values[-1]
    assert wm.var == pytest.approx(var, rel=2e-3)


def test_gaussian_squeeze_shrinks_variance():
    plain = make_model("gaussian", N=200, n=40, M=40)
    sq = plain.with_branching(make_model("gaussian", "squeeze", N=200,
                                         branching_params={"delta": 5.0}).branching)
    assert weighted_marginal(sq).var < weighted_marginal(plain).var


def test_forward_mass_is_normalised():
    model = make_model("rademacher", "scatter", N=30, n=10, M=10)
    op = TransferOperator(model, 0.0, 10)
    rho, log_mass = op.forward(10)
    assert rho.sum() == pytest.approx(1.0) and np.all(rho >= 0)
    assert log_mass > 0


def test_preconditions():
    model = make_model(N=10, n=5, M=5)
    with pytest.raises(ValueError):
        weighted_marginal(model, n=6)
    with pytest.raises(ValueError):
        TransferOperator(model, 0.0, -1)
