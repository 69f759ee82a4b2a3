import math

import numpy as np
import pytest

from rsfbsde.errors import ConfigError
from rsfbsde.fbsdep import forward_euler
from rsfbsde.models import ControlPolicy, builtin, linear, model_ensemble
from rsfbsde.zakai import (ObservationRecord, ZakaiOperators, ZakaiState, filter_cost, grid_filter,
                           initial_density, kalman_bucy, next_records, observations_from_state,
                           particle_filter, particle_mu, stable_dt, zakai_step)

ZERO = {"a": 0.0, "s1": 0.0, "s2": 0.0, "h": 0.0, "n_steps": 100}
KB = (-0.5, 0.6, 0.3, 1.0, 0.5, 0.5)


def _flin(**kw):
    return builtin("filter-linear", {"n_steps": 200, **kw})


class TestZeroModel:
    def test_particle_constant(self):
        m = _flin(**ZERO)
        r = particle_filter(m, next_records(m, 2, 0), 200, every=10)
        assert np.all(r["mu"]["1"] == 1.0)
        assert np.all(r["mu"]["x"] == 0.5)

    def test_grid_constant(self):
        m = _flin(**ZERO)
        rec = next_records(m, 1, 0)[0]
        xg = np.linspace(-2, 2, 81)
        ops = ZakaiOperators(m, xg)
        q0 = initial_density(xg, 0.5, 0.3)
        st = ZakaiState(xg, q0)
        for k in range(m.grid.n_steps):
            st = zakai_step(st, ops, k, m.grid.dt, rec.dW2[k], rec.dN2[k])
        assert np.array_equal(st.q, q0)


def test_transport_centre_of_mass():
    c = 0.8
    m = _flin(**ZERO).with_params(b1=linear("b1", c))
    rec = next_records(_flin(**ZERO), 1, 1)[0]
    g = grid_filter(m, rec, -3.0, 3.0, 601, init_width=0.3)
    mass = g["moments"][:, 0]
    com = g["moments"][:, 1] / mass
    t = m.grid.nodes
    dx = 6.0 / 600
    assert np.max(np.abs(mass - 1.0)) <= 1e-12
    assert np.max(np.abs(com - (0.5 + c * t))) <= 5 * (dx ** 2 + m.grid.dt)


class TestOperators:
    def test_jump_shift_conserves_mass(self):
        xg = np.linspace(-3, 3, 121)
        ops = ZakaiOperators(_flin(), xg)
        q = initial_density(xg, 0.0) + initial_density(xg, 1.02)
        out, leak = ops.shift_star(q, 0.37 + 0.0 * xg)
        assert leak == 0.0
        assert out.sum() == pytest.approx(q.sum(), rel=1e-13)
        # centre of mass moves by the shift
        com = (xg * q).sum() / q.sum()
        assert (xg * out).sum() / out.sum() == pytest.approx(com + 0.37, abs=1e-12)

    def test_I_star_identity(self):
        xg = np.linspace(-3, 3, 121)
        ops = ZakaiOperators(_flin(), xg)
        q = initial_density(xg, 0.2, 0.5)
        i_, leak = ops.I_star(q, np.ones_like(q), 0.0 * xg)
        assert np.all(i_ == 0.0) and leak == 0.0

    def test_stability_error(self):
        m = _flin(n_steps=10)
        xg = np.linspace(-3, 3, 601)
        assert stable_dt(m, xg) < m.grid.dt
        rec = next_records(m, 1, 0)[0]
        with pytest.raises(ConfigError, match="dt <="):
            grid_filter(m, rec, -3, 3, 601)


def test_record_csv_roundtrip(tmp_path):
    m = _flin(f2=0.3, f3=0.2, lam_lo=0.6)
    ens = model_ensemble(m, 20, 5)
    st = forward_euler(m, ens, ControlPolicy("constant", value=0.0))
    recs = observations_from_state(st, np.arange(20))
    i = next(j for j, r in enumerate(recs) if r.dN2.sum() > 1)
    rec = recs[i]
    assert np.allclose(rec.reconstruct_Y(m), st.Y[:, i], rtol=0, atol=1e-12)
    p = tmp_path / "obs.csv"
    rec.to_csv(p)
    back = ObservationRecord.from_csv(p)
    assert np.array_equal(back.dW2, rec.dW2) and np.array_equal(back.dN2, rec.dN2)
    assert np.array_equal(back.ycomp, rec.ycomp)
    assert np.allclose(back.reconstruct_Y(m), st.Y[:, i], rtol=0, atol=1e-12)


def test_record_csv_rejects_garbage(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError):
        ObservationRecord.from_csv(p)


def test_filter_cost_trivial():
    m = _flin(h=0.0, wx=0.0)
    r = particle_filter(m, next_records(m, 2, 3), 300)
    assert np.all(filter_cost(m, r) == 1.0)


def test_filter_cost_point_mass():
    # deterministic signal, no observation drift: e^{theta wx x_T}
    m = _flin(s1=0.0, s2=0.0, h=0.0)
    r = particle_filter(m, next_records(m, 1, 3), 50)
    xT = r["x_T"][0, 0]
    assert np.all(r["x_T"] == xT)
    assert xT == pytest.approx(0.5 * math.exp(-0.5), rel=2e-3)
    assert filter_cost(m, r)[0] == pytest.approx(math.exp(0.5 * xT), rel=1e-14)


def test_deterministic_tilt():
    # ltilde = lcoef x^2 on a frozen signal: mu_t(1) = exp(theta lcoef x0^2 t)
    m = _flin(a=0.0, s1=0.0, s2=0.0, h=0.0, lcoef=0.4)
    r = particle_mu(m, next_records(m, 1, 0)[0], 20, every=50)
    t = np.asarray(r["t"])
    assert np.allclose(r["mu"], np.exp(0.5 * 0.4 * 0.25 * t), rtol=1e-12)


@pytest.fixture(scope="module")
def gaussian_filters():
    m = _flin(n_steps=1000)
    recs = next_records(m, 3, 99)
    return m, recs, particle_filter(m, recs, 20_000, seed=7, every=100)


def test_kalman_bucy_degeneration(gaussian_filters):
    m, recs, r = gaussian_filters
    mo = r["moments"]
    for i, rec in enumerate(recs):
        kb = kalman_bucy(*KB, rec)
        for j, k in enumerate(r["checkpoints"]):
            if k == 0:
                continue
            assert abs(mo["mean"][j, i] - kb["mean"][k]) <= 3 * mo["mean_se"][j, i] + m.grid.dt
            assert abs(mo["var"][j, i] - kb["var"][k]) <= 3 * mo["var_se"][j, i] + m.grid.dt


def test_grid_vs_particle(gaussian_filters):
    m, recs, r = gaussian_filters
    for i, rec in enumerate(recs):
        st = grid_filter(m, rec, -4.0, 4.0, 241, init_width=2 * 8 / 240)["state"]
        for name, F in (("1", np.ones_like), ("x", lambda x: x), ("x2", lambda x: x * x)):
            tol = 3 * r["mu_se"][name][-1, i] + 0.01 * st.integrate(lambda x: np.abs(F(x)))
            assert abs(st.integrate(F) - r["mu"][name][-1, i]) <= tol, (i, name)
