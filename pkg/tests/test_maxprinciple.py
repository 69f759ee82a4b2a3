import math

import numpy as np
import pytest

from oracles import TERM_A, TERM_B, VALS_A, VALS_B, run_adjoint_reduction
from rsfbsde.kernel import MarkSpace, TimeGrid, generate_ensemble
from rsfbsde.maxprinciple import (AdjointBundle, AdjointProblem, boundary_conditions, hamiltonian,
                                  hamiltonian_gap, identity_check, mp_check, solve_adjoint_r,
                                  solve_all_adjoints, solve_candidate, spike_variation_experiment,
                                  synthetic_snapshot)
from rsfbsde.models import ControlPolicy, builtin, model_ensemble
from rsfbsde.regression import NodeContext, RegressionBasis

ODE_TOL = 1e-4


def _problem(vals, term, n=40, N=100, seed=0):
    g = TimeGrid(1.0, N)
    ens = generate_ensemble(g, MarkSpace((1.0, -1.0), (0.6, 0.4)), MarkSpace((1.0,), (0.5,)), n, seed)
    snap = synthetic_snapshot(n, 2, 1, 1.0, N, vals, term)
    base = lambda k: NodeContext(k, g.t(k), n, {"x": np.zeros(n)})
    return AdjointProblem(ens, base, snap, RegressionBasis(("x",), degree=2))


class TestTrivialAdjoints:
    def test_constant_m_alpha(self):
        prob = _problem({}, {"phi_x": 0.7, "pt_x": -0.4})
        B = solve_all_adjoints(prob)
        assert np.all(B.m == 0.7) and np.all(B.n1 == 0.0) and np.all(B.nt1 == 0.0)
        assert np.all(B.alpha == -0.4) and np.all(B.beta1 == 0.0)

    def test_r_identically_one(self):
        B = solve_all_adjoints(_problem({"b.x": 0.3, "l.x": 1.0}, {"phi_x": 1.0}))
        assert np.all(B.r == 1.0)

    def test_zero_driver_s_constant(self):
        prob = _problem({}, {"phi_x": 0.5, "pt_x": 0.2, "pt_y": 0.3})
        B = solve_all_adjoints(prob)
        assert np.allclose(B.s, 0.3, rtol=0, atol=1e-14)
        assert np.allclose(B.p[-1], 0.2 + 0.3 * 0.5, rtol=0, atol=1e-14)

    def test_P_zero(self):
        first = {k: v for k, v in VALS_B.items() if k.split(".")[0] in ("b", "g", "s1", "s2", "f1", "f2", "l")}
        B = solve_all_adjoints(_problem(first, {"phi_x": 1.0, "pt_x": 0.5}))
        assert np.all(B.P == 0.0)


def test_r_lognormal():
    c, n = 0.4, 20_000
    prob = _problem({"l.k1": c}, {}, n=n, N=50, seed=4)
    B = solve_adjoint_r(prob, AdjointBundle(info={}))
    W = sum(s.dW1 for _, s in prob.ens.steps())
    assert np.allclose(B.r[-1], np.exp(c * W - 0.5 * c * c), rtol=1e-10)
    assert abs(B.r[-1].mean() - 1.0) <= 3 * B.info["r_T_stderr"]


def test_r_positivity_loss_warns():
    prob = _problem({"l.kt1": -1.5}, {}, n=400)
    with pytest.warns(RuntimeWarning, match="positivity"):
        B = solve_adjoint_r(prob, AdjointBundle(info={}))
    assert B.info["r_nonpositive_events"] > 0


class TestOdeOracles:
    def test_snapshot_a_first_order(self):
        prob, B, ref = run_adjoint_reduction(VALS_A, TERM_A, full=False)
        assert np.max(np.abs(B.m.mean(axis=1) - ref["m"])) <= ODE_TOL
        assert np.max(np.abs(B.alpha.mean(axis=1) - ref["alpha"])) <= ODE_TOL
        assert np.max(np.ptp(B.m, axis=1)) == 0.0
        rT = B.r[-1]
        assert abs(rT.mean() - 1.0) <= 3 * rT.std(ddof=1) / math.sqrt(rT.size)

    def test_snapshot_b_all_five(self):
        prob, B, ref = run_adjoint_reduction(VALS_B, TERM_B)
        for key in ("m", "alpha", "s", "p", "P"):
            arr = getattr(B, key)
            assert np.max(np.ptp(arr, axis=1)) == 0.0, key
            assert np.max(np.abs(arr[:, 0] - ref[key])) <= ODE_TOL, key
        bc = boundary_conditions(prob, B)
        assert max(bc.values()) == 0.0, bc
        # convex reduction: positive terminal curvature and nonnegative quadratic sources
        assert np.all(B.P > 0)
        assert identity_check(prob, B, n_probes=50) <= 1e-12


@pytest.fixture(scope="module")
def lq_candidate():
    m = builtin("lq-exp")
    ens = model_ensemble(m, 1000, 7)
    return solve_candidate(m, ens, ControlPolicy("constant", value=-0.5))


def test_candidate_boundary_and_identities(lq_candidate):
    state, prob, B = lq_candidate
    bc = boundary_conditions(prob, B)
    assert max(bc.values()) == 0.0, bc
    assert identity_check(prob, B) <= 1e-12


def test_hamiltonian_self_difference(lq_candidate):
    state, prob, B = lq_candidate
    for k in (0, 37, state.grid.n_steps - 1):
        assert np.all(hamiltonian_gap(state, B, k, state.control(k), prob.snap) == 0.0)


def test_hamiltonian_zero_adjoints(lq_candidate):
    state, prob, _ = lq_candidate
    N, n = state.grid.n_steps + 1, state.n
    z = np.zeros((N, n))
    K1, K2 = state.model.marks1.K, state.model.marks2.K
    Z = AdjointBundle(m=z, n1=z, n2=z, nt1=np.zeros((N, n, K1)), nt2=np.zeros((N, n, K2)),
                      alpha=z, r=z, s=z, p=z, q1=z, q2=z, P=z, info={})
    for u in state.model.U:
        assert np.all(hamiltonian(state, Z, 5, u, prob.snap) == 0.0)


def test_single_control_passes():
    m = builtin("linear-test", {"U": (0.0,), "n_steps": 50})
    rep = mp_check(m, model_ensemble(m, 400, 2), ControlPolicy("constant", value=0.0))
    assert rep["min_residual"] == 0.0 and rep["pass"]


def test_null_spike_exact_zero():
    m = builtin("linear-test", {"n_steps": 64})
    rep = spike_variation_experiment(m, model_ensemble(m, 400, 3), 0.0,
                                     base=ControlPolicy("constant", value=0.0), predictor=False)
    assert all(r["dJ"] == 0.0 and r["sup_gap_sq"] == 0.0 for r in rep["rows"])
    assert rep["nonnegative_within_band"]


def test_spike_ladder_must_decrease():
    from rsfbsde.errors import ConfigError
    m = builtin("linear-test", {"n_steps": 64})
    with pytest.raises(ConfigError):
        spike_variation_experiment(m, model_ensemble(m, 10, 0), 1.0, eps_ladder=[0.1, 0.2])
