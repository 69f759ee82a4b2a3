import math

import numpy as np
import pytest

from rsfbsde.fbsdep import forward_euler
from rsfbsde.measure import (evolve_gamma_tilde, girsanov_shift, integrability_diagnostic,
                             martingale_check, rho_integrand, running_cost_integral)
from rsfbsde.models import REGISTRY, ControlPolicy, Theta, builtin, model_ensemble
from rsfbsde.risk import cost_direct


def _state(name, params=None, n=2000, seed=0, policy=None, keep_Y=True):
    m = builtin(name, params or {})
    ens = model_ensemble(m, n, seed)
    pol = policy or m.default_policy or ControlPolicy("constant", value=m.U[0])
    return forward_euler(m, ens, pol, keep_Y=keep_Y)


def test_trivial_measure_change():
    st = _state("gaussian", n=500)
    w = evolve_gamma_tilde(st)
    assert np.all(w.log_gamma == 0.0) and np.all(w.gamma_T == 1.0)


def test_lognormal_gamma():
    # c = b2 / sigma3 = 0.5, lambda = 1: Gamma_T = exp(c W2_T - c^2 T / 2)
    n = 100_000
    st = _state("linear-test", {"h0": 0.5, "hx": 0.0, "lam": 1.0, "n_steps": 100}, n=n, seed=3,
                keep_Y=False)
    w = evolve_gamma_tilde(st, every=50)
    W2 = np.zeros(n)
    for _, s in st.ens.steps():
        W2 += s.dW2
    assert np.allclose(w.log_gamma_T, 0.5 * W2 - 0.125, rtol=0, atol=1e-10)
    band = 3 * math.sqrt(math.exp(0.25) - 1) / math.sqrt(n)
    assert abs(w.gamma_T.mean() - 1.0) <= band


def test_euler_vs_exact_weak_gap_first_order():
    # E[ln(1 + c dW)] + c^2 dt / 2 = -3 c^4 dt^2 / 4 + ..., so the mean
    # log-weight gap is -3 c^4 T dt / 4: first order, halving with dt.
    # (The pathwise gap is O(sqrt dt) from sum(dW^2 - dt).)
    c, n = 2.0, 20_000
    gaps = []
    for N in (250, 500):
        st = _state("linear-test", {"h0": c, "hx": 0.0, "lam": 1.0, "n_steps": N}, n=n, seed=1,
                    keep_Y=False)
        we = evolve_gamma_tilde(st, "euler")
        wx = evolve_gamma_tilde(st, "exact")
        assert we.info["euler_nonpositive"] == 0
        d = we.log_gamma_T - wx.log_gamma_T
        gaps.append((d.mean(), d.std(ddof=1) / math.sqrt(n), 1.0 / N))
    for g, se, dt in gaps:
        assert abs(g - (-0.75 * c ** 4 * dt)) <= 3 * se + 0.75 * c ** 4 * dt * 0.5
    ratio = gaps[0][0] / gaps[1][0]
    assert 1.5 <= ratio <= 2.5


def test_drift_shift_values():
    st = _state("linear-test", {"sigma3": 2.0, "h0": 1.0, "hx": 0.0, "lam": 1.0}, n=10)
    c, comp = girsanov_shift(st, 3)
    assert np.all(c == 0.5)
    assert np.all(comp == 0.0)
    st0 = _state("linear-test", {"h0": 0.0, "hx": 0.0}, n=10)
    c0, comp0 = girsanov_shift(st0, 3)
    assert np.all(c0 == 0.0)
    assert np.allclose(comp0, (0.8 - 1.0) * 0.5)


def test_rho_trivial_and_deterministic():
    st = _state("gaussian", n=200)
    assert np.all(rho_integrand(st)["log_rho_T"] == 0.0)
    # ltilde = ru * u with u = 1, no observation drift, lambda = 1
    st = _state("linear-test", {"qx": 0.0, "h0": 0.0, "hx": 0.0, "lam": 1.0, "ru": 0.3, "u_bar": 1.0},
                n=200)
    lr = rho_integrand(st)["log_rho_T"]
    assert np.allclose(lr, st.model.theta * 0.3 * 1.0, rtol=0, atol=1e-12)


def test_rho_identity_linear_test():
    n = 100_000
    st = _state("linear-test", n=n, seed=5, keep_Y=False)
    m = st.model
    w = evolve_gamma_tilde(st, every=st.grid.n_steps)
    cd = cost_direct(st, w)
    rho = rho_integrand(st, every=st.grid.n_steps)
    xT = st.x[-1]
    phi = m.phi_term(Theta(x=xT, y=0.0 * xT))
    a = rho["log_rho_T"] + m.theta * phi
    J_rho = float(np.exp(a).mean())
    assert abs(J_rho - cd["J_direct"]) / cd["J_direct"] <= 3 * cd["stderr"] / cd["J_direct"]
    # same pathwise object: the two exponents agree to roundoff
    L = running_cost_integral(st)
    assert np.allclose(rho["log_rho_T"], w.log_gamma_T + m.theta * L, rtol=0, atol=1e-9)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_martingale_positivity_integrability(name):
    st = _state(name, n=4000, seed=2)
    w = evolve_gamma_tilde(st, every=max(1, st.grid.n_steps // 10))
    mc = martingale_check(w)
    assert mc["pass"], mc
    assert mc["min"] > 0
    assert integrability_diagnostic(st, w)["finite"]
