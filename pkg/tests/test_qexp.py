import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsfbsde.errors import ConfigError
from rsfbsde.fbsdep import solve_state
from rsfbsde.measure import running_cost_integral
from rsfbsde.models import ControlPolicy, Theta, builtin, linear, model_ensemble
from rsfbsde.qexp import QexpBracketSpec, bmo_energy_diagnostic, qexp_bracket, solve_qexp
from rsfbsde.regression import RegressionBasis

B3 = RegressionBasis(degree=3)


def _solved(model, n, seed, policy=None):
    pol = policy or model.default_policy or ControlPolicy("constant", value=model.U[0])
    st_ = solve_state(model, model_ensemble(model, n, seed), pol, B3, keep_Y=False)
    solve_qexp(st_, B3)
    return st_


class TestBracket:
    def test_zero(self):
        assert qexp_bracket(0.7, np.zeros(3), np.ones(3)) == 0.0

    def test_scalar_value(self):
        assert qexp_bracket(1.0, np.array([0.5]), np.array([2.0])) == pytest.approx(0.2974425, abs=5e-8)

    def test_small_theta_limit(self):
        kt, nu = np.array([0.3, -1.2, 2.0]), np.array([0.5, 0.2, 1.1])
        th = 1e-4
        ref = th / 2 * float(np.sum(kt ** 2 * nu))
        assert abs(qexp_bracket(th, kt, nu) - ref) / ref <= 1e-4

    def test_spec_rejects_nonpositive_theta(self):
        with pytest.raises(ConfigError):
            QexpBracketSpec(0.0, (1.0,))


@settings(max_examples=60, deadline=None)
@given(th=st.floats(1e-3, 3.0), a=st.floats(-3, 3), b=st.floats(-3, 3), w=st.floats(0, 1))
def test_bracket_convex_nonnegative(th, a, b, w):
    nu = np.array([0.7])
    fa = qexp_bracket(th, np.array([a]), nu)
    fb = qexp_bracket(th, np.array([b]), nu)
    fm = qexp_bracket(th, np.array([w * a + (1 - w) * b]), nu)
    assert fa >= 0 and fb >= 0
    assert fm <= w * fa + (1 - w) * fb + 1e-12 * (1 + abs(fa) + abs(fb))


def test_constant_solution():
    m = builtin("gaussian", {"n_steps": 50})
    m = m.with_params(phi_term=linear("phi_term", 0.8, ("x", "y")))
    st_ = _solved(m, 500, 1)
    for k in (0, 10, 49):
        ctx = st_.node(k)
        assert np.allclose(ctx["zeta"], 0.8, rtol=0, atol=1e-12)
        assert np.allclose(ctx["k1"], 0.0, atol=1e-12)
        assert np.allclose(ctx["kt1"], 0.0, atol=1e-12)


def test_gaussian_zeta0():
    # zeta_0 = x0 + theta sigma^2 T / 2; Euler is exact in law here, so n_steps
    # only enters through the regression
    x0, sig, th = 0.3, 1.0, 0.5
    m = builtin("gaussian", {"x0": x0, "sigma": sig, "theta": th, "n_steps": 200})
    st_ = _solved(m, 100_000, 2)
    assert abs(st_.zeta_sol.y0 - (x0 + th * sig ** 2 / 2)) <= 5e-3


def test_small_theta_risk_neutral_proxy():
    # no measure change (h = 0, lam = 1): zeta_0 -> E[int ltilde + phi_term] as theta -> 0
    m = builtin("linear-test", {"theta": 1e-3, "h0": 0.0, "hx": 0.0, "lam": 1.0, "n_steps": 100})
    st_ = _solved(m, 40_000, 3, ControlPolicy("constant", value=1.0))
    xT = st_.x[-1]
    rn = running_cost_integral(st_) + m.phi_term(Theta(x=xT, y=st_.y0 + 0.0 * xT))
    assert abs(st_.zeta_sol.y0 - rn.mean()) <= 1e-3


def test_bmo_zero_kappa():
    m = builtin("gaussian", {"n_steps": 50}).with_params(phi_term=linear("phi_term", 0.8, ("x", "y")))
    st_ = _solved(m, 500, 4)
    d = bmo_energy_diagnostic(st_)
    assert d["bmo_norm_sq"] == 0.0 and d["pass"]


def test_bmo_deterministic_kappa():
    # kappa1 = sigma exactly: norm = sigma^2 T at tau* = 0, and the n = 1
    # energy check sits on its bound
    sig = 0.7
    m = builtin("gaussian", {"sigma": sig, "n_steps": 100})
    st_ = _solved(m, 20_000, 5)
    d = bmo_energy_diagnostic(st_)
    assert d["by_node"][0]["estimate"] == pytest.approx(sig ** 2, rel=2e-2)
    assert d["bmo_norm_sq"] == pytest.approx(sig ** 2, rel=2e-2)
    e1 = d["energy"][0]
    assert e1["lhs"] == pytest.approx(e1["rhs"], rel=2e-2)
    assert d["energy"][1]["holds"]
