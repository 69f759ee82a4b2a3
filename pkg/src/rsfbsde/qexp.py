"""Quadratic-exponential backward solve for (zeta, kappa, kappa-tilde)."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SolverError
from .models import Kappa, Theta, TruncationPolicy, qexp_bracket
from .regression import BackwardSolution, RegressionBasis, backward_lsmc

__all__ = ["QexpBracketSpec", "qexp_bracket", "solve_qexp", "bmo_energy_diagnostic",
           "generator_sandwich", "TruncationPolicy"]


@dataclass(frozen=True)
class QexpBracketSpec:
    theta: float
    nu: tuple

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigError("theta must be > 0")

    def __call__(self, kt):
        return qexp_bracket(self.theta, kt, np.asarray(self.nu))


def zeta_driver(state, trunc: TruncationPolicy):
    m = state.model
    dc = state.dc
    dc.trunc = trunc

    def drv(k, ctx, y, z1, z2, zt1, zt2):
        th = state.theta(ctx)
        return dc.l(th, Kappa(z1, z2, zt1, zt2))
    return drv


def solve_qexp(state, basis: RegressionBasis, trunc: TruncationPolicy | None = None,
               features=None) -> BackwardSolution:
    """LSMC for -d zeta = l dt - kappa dW - int kappa~ dNt, zeta_T = phi_term(x_T, y0)."""
    m = state.model
    trunc = trunc if trunc is not None else TruncationPolicy()
    trunc.reset()
    y0 = float(state.y0)

    def terminal(ctx):
        return m.phi_term(Theta(x=ctx["x"], y=y0 + 0.0 * ctx["x"]))

    sol = backward_lsmc(state.ens, lambda k: state.node(k, zeta=False), terminal,
                        zeta_driver(state, trunc), basis, active=m.active, label="zeta",
                        features=features)
    frac = trunc.fraction
    sol.extra["clamp_fraction"] = frac
    sol.extra["clamp_activations"] = trunc.activations
    if frac > trunc.fail_frac:
        raise SolverError(f"truncation active on {frac:.1%} of jump-integrand evaluations; "
                          "the cap dominates the solution")
    if frac > trunc.warn_frac:
        warnings.warn(f"truncation active on {frac:.2%} of evaluations", RuntimeWarning)
    state.zeta_sol = sol
    return sol


def _kappa_sq(ctx, nu1, nu2):
    return (ctx["k1"] ** 2 + ctx["k2"] ** 2 + (ctx["kt1"] ** 2) @ nu1 + (ctx["kt2"] ** 2) @ nu2)


def bmo_energy_diagnostic(state, basis: RegressionBasis | None = None, every=10) -> dict:
    """Regression estimate of sup_tau E[int_tau^T |kappa|^2 ds | F_tau] and the
    energy inequality E[(int |kappa|^2)^n] <= n! * norm^n for n = 1, 2."""
    if state.zeta_sol is None:
        raise SolverError("zeta not solved")
    m = state.model
    basis = basis or RegressionBasis(degree=2)
    grid = state.grid
    N, dt, n = grid.n_steps, grid.dt, state.n
    nu1, nu2 = m.marks1.nu, m.marks2.nu
    ck = list(range(0, N, max(1, int(every))))
    cum = np.zeros(n)
    at = {}
    Fs = {}
    for k in range(N):
        if k in ck:
            at[k] = cum.copy()
            ctx = state.node(k, backward=False, zeta=False)
            Fs[k] = ctx.features(state.zeta_sol.features)
        ctx = state.node(k)
        cum = cum + _kappa_sq(ctx, nu1, nu2) * dt
    total = cum
    est = []
    for k in ck:
        R = total - at[k]
        if np.ptp(R) == 0:
            fit_max = float(R[0])
        else:
            des = basis.prepare(Fs[k])
            fit_max = float(np.max(des.fitted(des.solve(R))))
        est.append({"node": int(k), "t": grid.t(k), "estimate": max(fit_max, 0.0)})
    norm = max(e["estimate"] for e in est) if est else 0.0
    checks = []
    for p in (1, 2):
        lhs = float(np.mean(total ** p))
        rhs = math.factorial(p) * norm ** p
        checks.append({"n": p, "lhs": lhs, "rhs": rhs, "margin": rhs - lhs,
                       "holds": bool(lhs <= rhs * (1 + 1e-9) + 1e-300)})
    return {"bmo_norm_sq": norm, "by_node": est, "energy": checks,
            "pass": all(c["holds"] for c in checks)}


def generator_sandwich(model, dc, probes, kappas) -> dict:
    """Check -(a + b|y| + th/2 z^2 + [-zt]) <= l <= a + b|y| + th/2 z^2 + [zt]
    at probes using the model's own (alpha(t), beta)."""
    if model.qexp_bounds is None:
        return {"applicable": False}
    alpha, beta = model.qexp_bounds
    th_ = model.theta
    worst = -np.inf
    for p, kap in zip(probes, kappas):
        th = Theta(**p)
        val = dc.l(th, kap)
        zsq = np.asarray(kap.k1) ** 2 + np.asarray(kap.k2) ** 2
        up = (alpha(th.t) + beta * abs(p.get("y", 0.0)) + 0.5 * th_ * zsq
              + qexp_bracket(th_, kap.kt1, model.marks1.nu) + qexp_bracket(th_, kap.kt2, model.marks2.nu))
        lo = -(alpha(th.t) + beta * abs(p.get("y", 0.0)) + 0.5 * th_ * zsq
               + qexp_bracket(th_, -np.asarray(kap.kt1), model.marks1.nu)
               + qexp_bracket(th_, -np.asarray(kap.kt2), model.marks2.nu))
        worst = max(worst, float(np.max(val - up)), float(np.max(lo - val)))
    return {"applicable": True, "max_violation": worst, "pass": worst <= 1e-12}
