"""Density process of the observation measure change, the risk-sensitive
integrand rho and importance-weight summaries."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .models import Theta


@dataclass
class MeasureWeights:
    checkpoints: np.ndarray        # node indices
    log_gamma: np.ndarray          # (n_ck, n) log Gamma-tilde at checkpoints
    log_gamma_T: np.ndarray        # (n,)
    method: str = "exact"
    info: dict = field(default_factory=dict)

    @property
    def gamma_tilde(self):
        return np.exp(self.log_gamma)

    @property
    def gamma(self):
        return np.exp(-self.log_gamma)

    @property
    def gamma_T(self):
        return np.exp(self.log_gamma_T)


def _checkpoints(N, every):
    ck = list(range(0, N + 1, max(1, int(every))))
    if ck[-1] != N:
        ck.append(N)
    return np.asarray(ck)


def girsanov_shift(state, k):
    """(sigma3^-1 b2, (lam - 1) nu2) at node k: W2 drift shift and the
    per-atom compensator shift of N2."""
    ctx = state.node(k, zeta=False)
    th = state.theta(ctx)
    dc = state.dc
    c = np.broadcast_to(np.asarray(dc.c(th), dtype=float), (state.n,))
    lam = np.broadcast_to(dc.lam(th), (state.n, state.model.marks2.K))
    state.model.check_lambda(lam)
    return c, (lam - 1.0) * state.model.marks2.nu


def _shift_fields(state, k, need_theta):
    """c = sigma3^-1 b2 and lam at node k without building backward values
    unless b2 actually depends on them."""
    if need_theta:
        return girsanov_shift(state, k)
    m = state.model
    ctx = state.base_context(k)
    n = state.n
    zero = np.zeros(n)
    th = Theta(ctx.t, ctx["x"], zero, zero, zero, zero, zero, ctx["u"], ctx.get("aux", 0.0))
    c = np.broadcast_to(np.asarray(state.dc.c(th), dtype=float), (n,))
    lam = np.broadcast_to(state.dc.lam(th), (n, m.marks2.K))
    m.check_lambda(lam)
    return c, (lam - 1.0) * m.marks2.nu


def _b2_needs_backward(model):
    probe = Theta(t=0.0, x=0.3, y=0.7, z1=0.2, z2=-0.4, zt1=0.1, zt2=0.2, u=model.U[0], aux=0.1)
    g = model.b2.grad(probe)
    return any(np.any(np.asarray(g[v]) != 0) for v in ("y", "z1", "z2", "zt1", "zt2"))


def evolve_gamma_tilde(state, method="exact", every=1) -> MeasureWeights:
    """Advance log Gamma-tilde.

    exact: c dW2 - c^2 dt/2 + sum_j [dN2_j ln lam_j - (lam_j - 1) nu2_j dt]
    euler: Gamma *= 1 + c dW2 + sum_j (lam_j - 1) dNt2_j
    """
    if method not in ("exact", "euler"):
        raise ConfigError(f"unknown stepping method {method}")
    m = state.model
    grid = state.grid
    N, dt, n = grid.n_steps, grid.dt, state.n
    nu2 = m.marks2.nu
    ck = _checkpoints(N, every)
    out = np.zeros((len(ck), n))
    lg = np.zeros(n)
    G = np.ones(n)
    need = _b2_needs_backward(m)
    nonpos = 0
    ci = 1
    for k, s in state.ens.steps():
        c, shift = _shift_fields(state, k, need)
        lam = shift / np.where(nu2 > 0, nu2, 1.0) + 1.0
        if method == "exact":
            jump = np.where(s.dN2 > 0, s.dN2 * np.log(lam), 0.0).sum(axis=1)
            lg = lg + c * s.dW2 - 0.5 * c * c * dt + jump - shift.sum(axis=1) * dt
        else:
            G = G * (1.0 + c * s.dW2 + ((lam - 1.0) * s.dNt2).sum(axis=1))
            nonpos += int(np.count_nonzero(G <= 0))
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.where(G > 0, np.log(np.abs(G)), -np.inf)
        if ci < len(ck) and ck[ci] == k + 1:
            out[ci] = lg
            ci += 1
    w = MeasureWeights(ck, out, lg.copy(), method, {"euler_nonpositive": nonpos})
    return w


def weight_summary(w: MeasureWeights) -> list:
    rows = []
    for i, k in enumerate(w.checkpoints):
        g = np.exp(w.log_gamma[i])
        n = g.size
        se = float(g.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        ess = float(g.sum() ** 2 / (g ** 2).sum() / n) if np.any(g > 0) else 0.0
        rows.append({"node": int(k), "mean": float(g.mean()), "var": float(g.var()),
                     "min": float(g.min()), "stderr": se, "ess_frac": ess})
    return rows


def martingale_check(w: MeasureWeights, z=4.0) -> dict:
    rows = weight_summary(w)
    bad = [r["node"] for r in rows if r["node"] > 0 and abs(r["mean"] - 1.0) > z * max(r["stderr"], 1e-300)
           and abs(r["mean"] - 1.0) > 1e-12]
    gT = w.gamma_T
    se = float(gT.std(ddof=1) / np.sqrt(gT.size))
    return {"mean_T": float(gT.mean()), "stderr_T": se, "failing_nodes": bad,
            "min": float(np.exp(w.log_gamma.min())), "pass": not bad and bool(np.all(gT > 0))}


def rho_integrand(state, every=1, max_exponent=700.0) -> dict:
    """log rho_t from its own exponential formula:
    theta int ltilde - int c^2/2 + int sum (ln lam + 1 - lam) nu2 + int c dW2
    + int sum ln lam dNt2.  Paths whose exponent exceeds ``max_exponent``
    are flagged and excluded."""
    m = state.model
    grid = state.grid
    N, dt, n = grid.n_steps, grid.dt, state.n
    nu2 = m.marks2.nu
    th_ = m.theta
    need = _b2_needs_backward(m)
    uses_back = _ltilde_needs_backward(m)
    ck = _checkpoints(N, every)
    out = np.zeros((len(ck), n))
    lr = np.zeros(n)
    ci = 1
    for k, s in state.ens.steps():
        c, shift = _shift_fields(state, k, need)
        lam = shift / np.where(nu2 > 0, nu2, 1.0) + 1.0
        ctx = state.node(k, zeta=False) if uses_back else state.base_context(k)
        th = state.theta(ctx) if uses_back else Theta(ctx.t, ctx["x"], u=ctx["u"], aux=ctx.get("aux", 0.0))
        lt = np.broadcast_to(np.asarray(m.ltilde(th), dtype=float), (n,))
        lnl = np.log(lam)
        lr = (lr + th_ * lt * dt - 0.5 * c * c * dt + ((lnl + 1.0 - lam) * nu2).sum(axis=1) * dt
              + c * s.dW2 + (lnl * s.dNt2).sum(axis=1))
        if ci < len(ck) and ck[ci] == k + 1:
            out[ci] = lr
            ci += 1
    flagged = ~np.isfinite(lr) | (lr > max_exponent)
    return {"checkpoints": ck, "log_rho": out, "log_rho_T": lr, "flagged": flagged,
            "n_flagged": int(flagged.sum())}


def _ltilde_needs_backward(model):
    probe = Theta(t=0.0, x=0.3, y=0.7, z1=0.2, z2=-0.4, zt1=0.1, zt2=0.2, u=model.U[0], aux=0.1)
    g = model.ltilde.grad(probe)
    return any(np.any(np.asarray(g[v]) != 0) for v in ("y", "z1", "z2", "zt1", "zt2"))


def running_cost_integral(state) -> np.ndarray:
    m = state.model
    dt, n = state.grid.dt, state.n
    uses_back = _ltilde_needs_backward(m)
    acc = np.zeros(n)
    for k in range(state.grid.n_steps):
        ctx = state.node(k, zeta=False) if uses_back else state.base_context(k)
        th = state.theta(ctx) if uses_back else Theta(ctx.t, ctx["x"], u=ctx["u"], aux=ctx.get("aux", 0.0))
        acc += np.broadcast_to(np.asarray(m.ltilde(th), dtype=float), (n,)) * dt
    return acc


def integrability_diagnostic(state, weights: MeasureWeights | None = None) -> dict:
    """Mean under the observation measure of exp{int sum (1-lam)^2/lam nu2 dt}."""
    m = state.model
    dt, n = state.grid.dt, state.n
    nu2 = m.marks2.nu
    acc = np.zeros(n)
    for k in range(state.grid.n_steps):
        _, shift = _shift_fields(state, k, False)
        lam = shift / np.where(nu2 > 0, nu2, 1.0) + 1.0
        acc += (((1.0 - lam) ** 2 / lam) * nu2).sum(axis=1) * dt
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        v = np.exp(acc)
        if weights is not None:
            v = v * weights.gamma_T
        val = float(v.mean())
    return {"value": val, "finite": bool(np.isfinite(val))}
