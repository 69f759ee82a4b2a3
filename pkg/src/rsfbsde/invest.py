"""Risk-sensitive investment with a factor-driven stock: market simulation
under the original measure, the transformed problem, the explicit adjoint
representation and the adjoint relations."""
from __future__ import annotations

import csv
import math

import numpy as np

from .errors import ConfigError, ModelError, SolverError
from .fbsdep import solve_state
from .maxprinciple import (AdjointProblem, solve_adjoint_r, solve_adjoint_spq,
                           solve_decouple_alphabeta, solve_decouple_mn)
from .measure import evolve_gamma_tilde
from .models import ControlPolicy, MarketParams, invest_model, model_ensemble
from .qexp import solve_qexp
from .regression import RegressionBasis
from .risk import cost_direct

STATE_FEATURES = ("inv:x", "aux")


def check_strategy(mp: MarketParams, policy: ControlPolicy, U=()):
    vals = [policy.value] if policy.kind == "constant" else list(getattr(policy, "values", [])) + list(U)
    for u in vals:
        if u < 0:
            raise ConfigError(f"strategy value {u} is negative (short selling is not admissible)")
        if 1.0 + u * mp.sigma_t <= 0:
            raise ConfigError(f"strategy value {u} makes 1 + u*sigma_t <= 0: wealth can jump below zero")


def simulate_market(mp: MarketParams, ens, policy: ControlPolicy) -> dict:
    """S, X, V and Y under the original measure with the unrotated Brownian
    pair (ens.dW1, ens.dW2) and N = the N2 driver of the ensemble.

    S: Euler for the diffusion part, exact jump factor (1 + sigma_t)^dN.
    Y is kept both as ln S and by its own SDE
    dY = (a3 + A1 X) dt + sigma dW + ln(1 + sigma_t) dNt.
    """
    check_strategy(mp, policy)
    grid = ens.grid
    N, dt, n = grid.n_steps, grid.dt, ens.n_paths
    sg = np.asarray(mp.sigma, dtype=float)
    lm = np.asarray(mp.Lam, dtype=float)
    nu = mp.nu
    S = np.empty((N + 1, n)); X = np.empty((N + 1, n)); V = np.empty((N + 1, n))
    Y = np.empty((N + 1, n))
    S[0], X[0], V[0], Y[0] = mp.s0, mp.x0, mp.v0, math.log(mp.s0)
    ljump = math.log1p(mp.sigma_t)
    for k, s in ens.steps():
        t = grid.t(k)
        u = policy(k, t, Y, s)
        dN = s.dN2[:, 0]
        sdw = sg[0] * s.dW1 + sg[1] * s.dW2
        mu = mp.a1 + mp.A1 * X[k]
        S[k + 1] = S[k] * (1.0 + mu * dt + sdw - mp.sigma_t * nu * dt) * (1.0 + mp.sigma_t) ** dN
        V[k + 1] = V[k] * (1.0 + u * (mu * dt + sdw - mp.sigma_t * nu * dt)) * (1.0 + u * mp.sigma_t) ** dN
        Y[k + 1] = Y[k] + (mp.a3 + mp.A1 * X[k]) * dt + sdw + ljump * (dN - nu * dt)
        X[k + 1] = X[k] + (mp.a2 + mp.A2 * X[k]) * dt + lm[0] * s.dW1 + lm[1] * s.dW2 + mp.Lam_t * (dN - nu * dt)
        if np.any(V[k + 1] <= 0) or np.any(S[k + 1] <= 0):
            bad = int(np.flatnonzero((V[k + 1] <= 0) | (S[k + 1] <= 0))[0])
            raise ModelError(f"wealth positivity violated at step {k}, path {bad} "
                             f"under strategy {policy.describe()}")
    gap = np.log(S) - Y
    return {"S": S, "X": X, "V": V, "Y": Y, "logS": np.log(S),
            "gap_mean_max": float(np.max(np.abs(gap.mean(axis=1)))),
            "gap_rms_max": float(np.max(np.sqrt(np.mean(gap ** 2, axis=1))))}


def log_wealth_oracle(mp: MarketParams, T=None):
    """E ln V_T for u = 1, sigma_t = 0, A1 = 0: ln v + (a1 - |sigma|^2/2) T."""
    T = mp.T if T is None else T
    return math.log(mp.v0) + (mp.a1 - 0.5 * mp.ss) * T


def transformed_system(model, ens, policy=None, basis=None, trunc=None):
    """Solve the transformed system under the simulation measure:
    state (V, X), zeta with zeta_T = -ln V_T."""
    mp = model.extra["market"]
    policy = policy or model.default_policy
    check_strategy(mp, policy)
    basis = basis or RegressionBasis(("log:x", "aux"), degree=3)
    state = solve_state(model, ens, policy, basis)
    if np.any(state.x <= 0):
        raise ModelError(f"wealth positivity violated under strategy {policy.describe()}")
    solve_qexp(state, basis, trunc)
    return state


def eta_coefficients(state, k) -> dict:
    """B1, B2 = (B21, B22), B3 at node k from the solved (kappa, kappa~)."""
    m = state.model
    mp = m.extra["market"]
    th_ = m.theta
    ctx = state.node(k)
    u = np.broadcast_to(np.asarray(ctx["u"], dtype=float), (state.n,))
    X = ctx["aux"]
    sn = math.sqrt(mp.ss)
    c = (mp.a3 + mp.A1 * X) / sn
    k1, k2 = ctx["k1"], ctx["k2"]
    ek = np.expm1(th_ * ctx["kt2"][:, 0])
    B1 = (mp.a1 - mp.a3) * u + u * sn * (th_ * k2 + c) + ek * mp.sigma_t * u * mp.nu
    B21 = th_ * k1
    B22 = u * sn + th_ * k2 + c
    B3 = mp.sigma_t * u + ek * (1.0 + mp.sigma_t * u)
    return {"B1": B1, "B21": B21, "B22": B22, "B3": B3, "c": c, "ek": ek}


def explicit_eta_alpha(state, features=STATE_FEATURES, basis=None, obs_lag=10) -> dict:
    """ln eta by its closed exponential form and alpha_t = E[-(eta_T/eta_t)/V_T | F_t]
    by regression, under both the full-state and the observation features."""
    m = state.model
    mp = m.extra["market"]
    grid = state.grid
    N, dt, n = grid.n_steps, grid.dt, state.n
    basis = basis or RegressionBasis(features, degree=3)
    le = np.zeros((N + 1, n))
    Bs = []
    for k, s in state.ens.steps():
        B = eta_coefficients(state, k)
        if np.any((s.dN2[:, 0] > 0) & (B["B3"] <= -1.0)):
            raise SolverError(f"B3 <= -1 at a jump event at step {k}: explicit form breaks down")
        l1 = np.log1p(np.maximum(B["B3"], -1.0 + 1e-300))
        le[k + 1] = (le[k] + (B["B1"] - 0.5 * (B["B21"] ** 2 + B["B22"] ** 2)
                              + (l1 - B["B3"]) * mp.nu) * dt
                     + B["B21"] * s.dW1 + B["B22"] * s.dW2 + l1 * s.dNt2[:, 0])
        Bs.append({key: float(np.mean(v)) for key, v in B.items()})
    VT = state.x[N]
    alpha = np.empty((N + 1, n))
    alpha_obs = np.empty((N + 1, n))
    alpha[N] = alpha_obs[N] = -1.0 / VT
    obs_basis = RegressionBasis(("Y", "dY"), degree=2)
    for k in range(N):
        target = -np.exp(le[N] - le[k]) / VT
        ctx = state.base_context(k)
        des = basis.prepare(ctx.features(basis.features))
        alpha[k] = des.fitted(des.solve(target))[:, 0]
        Yk = state.Y[k]
        F = np.stack([Yk, Yk - state.Y[max(k - obs_lag, 0)]], axis=1)
        d2 = obs_basis.prepare(F)
        alpha_obs[k] = d2.fitted(d2.solve(target))[:, 0]
    return {"log_eta": le, "alpha": alpha, "alpha_obs": alpha_obs, "B_means": Bs,
            "eta_min": float(np.exp(le.min()))}


def invest_adjoints(state, features=STATE_FEATURES, degree=3) -> tuple:
    """(m, n), (alpha, beta), r and (s, p, q) from the generic adjoint solvers."""
    basis = RegressionBasis(features, degree=degree)
    prob = AdjointProblem.from_state(state, basis, features)
    B = solve_decouple_mn(prob)
    solve_decouple_alphabeta(prob, B)
    solve_adjoint_r(prob, B)
    return prob, B


def r_coefficient_check(state, prob) -> float:
    """Max difference between the generic generator derivatives feeding r and
    the investment-specific assembly theta*kappa + c and e^{theta kappa~} - 1."""
    worst = 0.0
    th_ = state.model.theta
    for k in range(0, state.grid.n_steps, max(1, state.grid.n_steps // 20)):
        L = prob.snap(k)["l"]
        B = eta_coefficients(state, k)
        ctx = state.node(k)
        worst = max(worst, float(np.max(np.abs(L["k2"] - (th_ * ctx["k2"] + B["c"])))),
                    float(np.max(np.abs(L["k1"] - th_ * ctx["k1"]))),
                    float(np.max(np.abs(L["kt2"][:, 0] - B["ek"]))))
    return worst


def _rel_sup(a, b):
    """sup over nodes of RMS(a - b) / RMS(b)."""
    num = np.sqrt(np.mean((a - b) ** 2, axis=1))
    den = np.sqrt(np.mean(b ** 2, axis=1))
    return float(np.max(num / np.maximum(den, 1e-300)))


def condition_residual(state, B, obs_lag=10, every=5) -> dict:
    """E[{alpha (a1 - a3) + beta2 |sigma|} r V | F^S] by regression on the
    observation path, at every ``every``-th node."""
    mp = state.model.extra["market"]
    sn = math.sqrt(mp.ss)
    basis = RegressionBasis(("Y", "dY"), degree=2)
    rows = []
    for k in range(0, state.grid.n_steps, max(1, every)):
        val = (B.alpha[k] * (mp.a1 - mp.a3) + B.beta2[k] * sn) * B.r[k] * state.x[k]
        Y = state.Y
        F = np.stack([Y[k], Y[k] - Y[max(k - obs_lag, 0)]], axis=1)
        des = basis.prepare(F)
        fit = des.fitted(des.solve(val))[:, 0]
        rows.append({"t": state.grid.t(k), "mean": float(val.mean()),
                     "stderr": float(val.std(ddof=1) / math.sqrt(val.size)),
                     "fit_min": float(fit.min()), "fit_max": float(fit.max())})
    avg = float(np.mean([r["mean"] for r in rows]))
    sup = float(max(max(abs(r["fit_min"]), abs(r["fit_max"])) for r in rows))
    return {"rows": rows, "time_avg": avg, "sup_abs": sup}


def verify_relations(state, prob, B) -> dict:
    """p = alpha r and q = (theta kappa + c) alpha r + beta r, normalized by
    the RMS of alpha r (resp. the q-side), sup over nodes of the mean gap."""
    N = state.grid.n_steps
    if B.p is None:
        solve_adjoint_spq(prob, B)
    ar = B.alpha * B.r
    scale_p = np.sqrt(np.mean(ar ** 2, axis=1))
    gp = np.mean(np.abs(B.p - ar), axis=1) / np.maximum(scale_p, 1e-300)
    gq, gq1 = [], []
    th_ = state.model.theta
    for k in range(N):
        ctx = state.node(k)
        c = eta_coefficients(state, k)["c"]
        q2 = (th_ * ctx["k2"] + c) * ar[k] + B.beta2[k] * B.r[k]
        q1 = th_ * ctx["k1"] * ar[k] + B.beta1[k] * B.r[k]
        sc = np.sqrt(np.mean(q2 ** 2)) + np.sqrt(np.mean(ar[k] ** 2)) * 1e-3
        gq.append(float(np.mean(np.abs(B.q2[k] - q2)) / sc))
        gq1.append(float(np.mean(np.abs(B.q1[k] - q1)) / sc))
    return {"p_alpha_r": float(gp.max()), "q_relation": float(max(gq)), "q1_relation": float(max(gq1)),
            "p_alpha_r_by_node": gp.tolist()}


def run_invest(params=None, n_paths=4000, seed=0, n_steps=None, u=None, relations=True,
               features=STATE_FEATURES) -> dict:
    """One candidate strategy: zeta0, J' = E[Gamma e^{theta phi}], explicit and
    BSDE alpha, relations and the transformed-condition residual."""
    from .models import builtin
    p = dict(params or {})
    if n_steps is not None:
        p["n_steps"] = n_steps
    if u is not None:
        p["u_bar"] = u
    model = builtin("invest", p)
    ens = model_ensemble(model, n_paths, seed)
    state = transformed_system(model, ens)
    w = evolve_gamma_tilde(state, every=max(1, model.grid.n_steps // 10))
    cd = cost_direct(state, w)
    zeta0 = float(state.zeta_sol.y0)
    out = {"u": float(model.default_policy.value), "zeta0": zeta0, "zeta0_stderr": state.zeta_sol.stderr0,
           "J_prime": cd["J_direct"], "J_prime_stderr": cd["stderr"],
           "exp_theta_zeta0": math.exp(model.theta * zeta0)}
    prob, B = invest_adjoints(state, features)
    ex = explicit_eta_alpha(state, features)
    out["alpha_agreement"] = _rel_sup(ex["alpha"][:-1], B.alpha[:-1])
    out["alpha_obs_vs_full"] = _rel_sup(ex["alpha_obs"][:-1], ex["alpha"][:-1])
    out["r_coefficient_max_diff"] = r_coefficient_check(state, prob)
    out["r_T_mean"] = B.info["r_T_mean"]
    out["eta_min"] = ex["eta_min"]
    if relations:
        rel = verify_relations(state, prob, B)
        out.update({k: v for k, v in rel.items() if k != "p_alpha_r_by_node"})
    res = condition_residual(state, B)
    out["condition_time_avg"] = res["time_avg"]
    out["condition_sup_abs"] = res["sup_abs"]
    return out


def strategy_scan(params=None, n_paths=4000, seed=0, grid=None, n_steps=None) -> dict:
    """Transformed-condition residual over constant strategies and its zero crossing."""
    grid = list(grid or [0.25 * i for i in range(9)])
    rows = []
    for u in grid:
        r = run_invest(params, n_paths, seed, n_steps, u=u, relations=False)
        rows.append(r)
    res = np.array([r["condition_time_avg"] for r in rows])
    cross = None
    for i in range(len(grid) - 1):
        if res[i] == 0:
            cross = grid[i]
            break
        if np.sign(res[i]) != np.sign(res[i + 1]):
            cross = grid[i] + (grid[i + 1] - grid[i]) * res[i] / (res[i] - res[i + 1])
            break
    return {"rows": rows, "crossing": cross, "grid": grid}


def write_scan_csv(scan, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["u", "zeta0", "condition_residual", "alpha_agreement", "J_prime"])
        for r in scan["rows"]:
            w.writerow([f"{r['u']:.6g}", f"{r['zeta0']:.12g}", f"{r['condition_time_avg']:.12g}",
                        f"{r['alpha_agreement']:.6g}", f"{r['J_prime']:.12g}"])
