"""Acceptance suite: one PASS/FAIL line per criterion (run with ``pytest -s`` to see them).

Resolutions, seeds and tolerances are pinned here; runtimes are measured on
this machine and asserted against the stated budgets."""
import math
import time

import numpy as np
import pytest

from oracles import TERM_A, TERM_B, VALS_A, VALS_B, coupled_linear_y0, run_adjoint_reduction
from rsfbsde import config as C
from rsfbsde.cli import dumps, run
from rsfbsde.fbsdep import forward_euler, solve_state
from rsfbsde.maxprinciple import boundary_conditions, mp_check, spike_variation_experiment
from rsfbsde.measure import evolve_gamma_tilde, martingale_check
from rsfbsde.models import REGISTRY, ControlPolicy, builtin, model_ensemble, qexp_bracket
from rsfbsde.invest import run_invest
from rsfbsde.qexp import solve_qexp
from rsfbsde.regression import RegressionBasis
from rsfbsde.risk import cost_direct, cost_recursive, nonlinear_expectation
from rsfbsde.zakai import grid_filter, kalman_bucy, next_records, particle_filter, tower_check

N_BIG = 100_000


def report(n, ok, detail):
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, f"criterion {n}: {detail}"


@pytest.fixture(scope="module")
def gaussian_large():
    # dt = 1e-3, 1e5 paths, cubic basis; only scalars leave the fixture
    t0 = time.perf_counter()
    m = builtin("gaussian", {"n_steps": 1000})
    st_ = solve_state(m, model_ensemble(m, N_BIG, 1), keep_Y=False)
    solve_qexp(st_, RegressionBasis(degree=3))
    w = evolve_gamma_tilde(st_, every=100)
    out = {"mc": martingale_check(w), "cd": cost_direct(st_, w), "cr": cost_recursive(st_),
           "theta": m.theta}
    out["runtime"] = time.perf_counter() - t0
    del st_, w
    return out


def test_criterion_01_risk_sensitive_equivalence(gaussian_large):
    g = gaussian_large
    ref = math.exp(0.125)
    j = g["cd"]["J_direct"]
    ez = math.exp(g["theta"] * g["cr"]["zeta0"])
    e1, e2 = abs(j - ref) / ref, abs(ez - ref) / ref
    ok = e1 <= 2e-2 and e2 <= 2e-2 and g["runtime"] <= 120
    report(1, ok, f"cost_direct rel err {e1:.2e}, exp(theta zeta0) rel err {e2:.2e} (tol 2e-2), "
                  f"runtime {g['runtime']:.0f}s (budget 120s)")


def _gamma_martingale(name):
    m = builtin(name)
    pol = m.default_policy or ControlPolicy("constant", value=m.U[0])
    st_ = forward_euler(m, model_ensemble(m, N_BIG, 2), pol, keep_Y=False)
    return martingale_check(evolve_gamma_tilde(st_, every=max(1, m.grid.n_steps // 10)))


def test_criterion_02_gamma_martingale(gaussian_large):
    parts, ok = [], True
    for name in sorted(REGISTRY):
        mc = gaussian_large["mc"] if name == "gaussian" else _gamma_martingale(name)
        ratio = abs(mc["mean_T"] - 1.0) / mc["stderr_T"] if mc["stderr_T"] > 0 else 0.0
        exact = abs(mc["mean_T"] - 1.0) <= 1e-12
        ok &= exact or ratio <= 4.0
        parts.append(f"{name} {ratio:.2f}")
    report(2, ok, "|mean Gamma_T - 1| / stderr at 1e5 paths (tol 4): " + ", ".join(parts))


def test_criterion_03_bracket():
    nu = np.array([0.5, 0.2, 1.1])
    zero = qexp_bracket(0.8, np.zeros(3), nu)
    kt = np.array([0.3, -1.2, 2.0])
    th = 1e-4
    ref = th / 2 * float(np.sum(kt ** 2 * nu))
    small = abs(qexp_bracket(th, kt, nu) - ref) / ref
    rng = np.random.default_rng(5)
    worst = -np.inf
    for _ in range(100):
        a, b = rng.uniform(-3, 3, (2, 3))
        w = rng.uniform()
        t_ = rng.uniform(0.01, 3)
        fa, fb = qexp_bracket(t_, a, nu), qexp_bracket(t_, b, nu)
        fm = qexp_bracket(t_, w * a + (1 - w) * b, nu)
        worst = max(worst, (fm - w * fa - (1 - w) * fb) / (1 + abs(fa) + abs(fb)))
    ok = zero == 0.0 and small <= 1e-4 and worst <= 1e-12
    report(3, ok, f"[0] = {zero}, small-theta rel err {small:.2e} (tol 1e-4), "
                  f"max convexity violation {worst:.1e} over 100 probes")


def test_criterion_04_coupled_picard():
    m = builtin("coupled-linear")
    st_ = solve_state(m, model_ensemble(m, 20_000, 9), None, RegressionBasis(degree=3))
    ratios = [h["ratio"] for h in st_.picard if h["ratio"] is not None]
    ref = coupled_linear_y0(m.params)
    err = abs(st_.y0 - ref) / abs(ref)
    ok = bool(ratios) and all(r < 1 for r in ratios) and err <= 1e-3
    report(4, ok, f"Picard ratios {[round(r, 4) for r in ratios]}, y0 {st_.y0:.6f} vs oracle {ref:.6f} "
                  f"(rel err {err:.1e}, tol 1e-3)")


def test_criterion_05_adjoint_oracles():
    worst, ptp, bcmax = 0.0, 0.0, 0.0
    prob, B, ref = run_adjoint_reduction(VALS_B, TERM_B)
    for key in ("m", "alpha", "s", "p", "P"):
        arr = getattr(B, key)
        ptp = max(ptp, float(np.max(np.ptp(arr, axis=1))))
        worst = max(worst, float(np.max(np.abs(arr[:, 0] - ref[key]))))
    bcmax = max(boundary_conditions(prob, B).values())
    _, BA, refA = run_adjoint_reduction(VALS_A, TERM_A, full=False)
    for key in ("m", "alpha"):
        worst = max(worst, float(np.max(np.abs(getattr(BA, key).mean(axis=1) - refA[key]))))
    ok = worst <= 1e-4 and bcmax == 0.0 and ptp == 0.0
    report(5, ok, f"sup-node error vs RK oracles {worst:.1e} (tol 1e-4) at dt = 1e-3, "
                  f"boundary residual {bcmax}, cross-path spread {ptp}")


def test_criterion_06_spike_variation():
    t0 = time.perf_counter()
    m = builtin("linear-test", {"n_steps": 1024})
    rep = spike_variation_experiment(m, model_ensemble(m, 4000, 11), 1.0,
                                     base=ControlPolicy("constant", value=0.0), predictor=False)
    slope = rep["slope_sup_gap_sq"]
    lq = builtin("lq-exp")
    rep2 = spike_variation_experiment(lq, model_ensemble(lq, 4000, 11), 0.0,
                                      base=ControlPolicy("constant", value=-0.5))
    lo = min(rep2["rows"], key=lambda r: r["dJ"] + 3 * r["stderr"])
    rt = time.perf_counter() - t0
    ok = 0.85 <= slope <= 1.15 and all(r["dJ"] >= -3 * r["stderr"] for r in rep2["rows"]) and rt <= 600
    report(6, ok, f"state-gap slope {slope:.3f} (band [0.85, 1.15]), at lq optimum smallest dJ "
                  f"{lo['dJ']:.3e} with stderr {lo['stderr']:.1e} (need dJ >= -3 stderr), "
                  f"runtime {rt:.0f}s (budget 600s)")


def test_criterion_07_optimal_condition():
    m = builtin("lq-exp")
    ens = model_ensemble(m, 4000, 7)
    at = mp_check(m, ens, ControlPolicy("constant", value=-0.5))
    off = mp_check(m, ens, ControlPolicy("constant", value=0.0))
    ok = at["pass"] and at["min_residual"] >= -5e-3 and (not off["pass"]) and off["min_residual"] <= -0.05
    report(7, ok, f"min residual at optimum {at['min_residual']:.4f} (>= -5e-3), "
                  f"at shifted control {off['min_residual']:.4f} (<= -0.05)")


def test_criterion_08_invest_identities():
    coarse = run_invest(n_paths=4000, n_steps=100, seed=1)
    fine = run_invest(n_paths=16_000, n_steps=200, seed=1)
    ok = (fine["p_alpha_r"] <= 5e-2 and fine["alpha_agreement"] <= 1e-2
          and fine["p_alpha_r"] < coarse["p_alpha_r"] and fine["alpha_agreement"] < coarse["alpha_agreement"])
    report(8, ok, f"|p - alpha r| {coarse['p_alpha_r']:.4f} -> {fine['p_alpha_r']:.4f} (tol 5e-2), "
                  f"alpha agreement {coarse['alpha_agreement']:.4f} -> {fine['alpha_agreement']:.4f} (tol 1e-2)")


def test_criterion_09_zakai():
    t0 = time.perf_counter()
    m = builtin("filter-linear")
    p = m.params
    recs = next_records(m, 8, 99)
    r = particle_filter(m, recs, 20_000, seed=7, every=100)
    mo = r["moments"]
    kb_worst = 0.0
    grid_worst = 0.0
    for i, rec in enumerate(recs):
        kb = kalman_bucy(p["a"], p["s1"], p["s2"], p["h"], p["sigma3"], p["x0"], rec)
        for j, k in enumerate(r["checkpoints"]):
            if k == 0:
                continue
            kb_worst = max(kb_worst,
                           abs(mo["mean"][j, i] - kb["mean"][k]) / (3 * mo["mean_se"][j, i] + m.grid.dt),
                           abs(mo["var"][j, i] - kb["var"][k]) / (3 * mo["var_se"][j, i] + m.grid.dt))
        st_ = grid_filter(m, rec, -4.0, 4.0, 241, init_width=2 * 8 / 240)["state"]
        for name, F in (("1", np.ones_like), ("x", lambda x: x), ("x2", lambda x: x * x)):
            tol = 3 * r["mu_se"][name][-1, i] + 0.01 * st_.integrate(lambda x: np.abs(F(x)))
            grid_worst = max(grid_worst, abs(st_.integrate(F) - r["mu"][name][-1, i]) / tol)
    del r
    tw = tower_check(m)
    rt = time.perf_counter() - t0
    ok = kb_worst <= 1.0 and grid_worst <= 1.0 and tw["pass"] and rt <= 600
    report(9, ok, f"(a) KB worst band ratio {kb_worst:.2f}, (b) grid/particle worst ratio {grid_worst:.2f} "
                  f"over {len(recs)} records, (c) tower gap {tw['gap']:.4f} vs tol {tw['tolerance']:.4f} "
                  f"over {tw['n_obs']} draws, runtime {rt:.0f}s (budget 600s)")


def test_criterion_10_nonlinear_expectation():
    xi = np.random.default_rng(0).standard_normal(1_000_000)
    parts, ok = [], True
    for th in (0.1, 0.5, 1.0):
        r = nonlinear_expectation(xi, th)
        z = abs(r["value"] - th / 2) / r["stderr"]
        ok &= z <= 3.0
        parts.append(f"theta {th}: {z:.2f} se")
    base = xi[:1000]
    v = [nonlinear_expectation(base, th)["value"] for th in (0.1, 0.5, 1.0, 2.0)]
    mono = all(a <= b for a, b in zip(v, v[1:]))
    shift = max(abs(nonlinear_expectation(base + c, 0.7)["value"] - nonlinear_expectation(base, 0.7)["value"] - c)
                for c in (-5.0, 0.3, 12.0))
    ok &= mono and shift <= 1e-12
    report(10, ok, ", ".join(parts) + f" (tol 3); monotone {mono}; translation error {shift:.1e}")


REPRO = [
    {"kind": "simulate", "model": {"name": "lq-exp"}, "ensemble": {"n_paths": 2000, "seed": 4}},
    {"kind": "solve", "model": {"name": "coupled-linear"}, "ensemble": {"n_paths": 2000, "seed": 4}},
    {"kind": "risk-equivalence", "model": {"name": "gaussian", "params": {"n_steps": 200}},
     "ensemble": {"n_paths": 4000, "seed": 4}},
    {"kind": "mp-check", "model": {"name": "lq-exp"}, "policy": {"kind": "constant", "value": -0.5},
     "ensemble": {"n_paths": 1000, "seed": 4}},
    {"kind": "spike", "model": {"name": "linear-test", "params": {"n_steps": 128}},
     "ensemble": {"n_paths": 500, "seed": 4}},
    {"kind": "invest", "model": {"name": "invest", "params": {"n_steps": 50}},
     "ensemble": {"n_paths": 1000, "seed": 4}},
    {"kind": "filter", "model": {"name": "filter-linear", "params": {"n_steps": 200}},
     "ensemble": {"n_paths": 10, "seed": 4}, "filter": {"n_particles": 2000, "n_x": 121}},
]


def test_criterion_11_reproducibility():
    same = []
    for d in REPRO:
        sa = run(C.validate(d))[0]
        a, b = dumps(sa), dumps(run(C.validate(d))[0])
        same.append(a == b and sa["status"] != "error")
    report(11, all(same), f"byte-identical JSON on repeat for {sum(same)}/{len(same)} experiment kinds")
