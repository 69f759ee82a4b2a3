"""Forward Euler for (x, Y, aux), LSMC for y, and the Picard loop for the
coupled forward-backward system."""
from __future__ import annotations

import csv
import logging

import numpy as np

from .errors import BlowUpError, ConfigError, DivergenceError
from .models import ControlPolicy, DerivedCoefficients, ModelSpec, Theta, assemble_derived
from .regression import BackwardSolution, NodeContext, RegressionBasis, backward_lsmc

log = logging.getLogger(__name__)

BACK_KEYS = ("y", "z1", "z2", "zt1", "zt2")


class StatePath:
    """Forward arrays (x, Y, aux) plus backward solutions as regression maps.

    ``y_sol`` is the (x, y, z, zt) solve; ``zeta_sol`` the (zeta, kappa) solve.
    Path values of either are reconstructed node by node through
    :meth:`node`.
    """

    def __init__(self, model, ens, policy, x, Y, aux, dc=None):
        self.model = model
        self.ens = ens
        self.policy = policy
        self.x = x
        self.Y = Y
        self.aux = aux
        self.dc = dc if dc is not None else assemble_derived(model)
        self.y_sol: BackwardSolution | None = None
        self.zeta_sol: BackwardSolution | None = None
        self.y0: float = 0.0
        self.feedback = None
        self.picard: list = []
        self.extra: dict = {}
        self.u_hist: dict = {}  # per-path control arrays recorded by the forward pass

    @property
    def grid(self):
        return self.ens.grid

    @property
    def n(self):
        return self.ens.n_paths

    def control(self, k):
        k = min(k, self.grid.n_steps - 1)
        if k in self.u_hist:
            return self.u_hist[k]
        noise = self.ens.step(k) if getattr(self.policy, "needs_noise", False) else None
        return self.policy(k, self.grid.t(k), self.Y, noise)

    def base_context(self, k) -> NodeContext:
        data = {"x": self.x[k]}
        if self.Y is not None:
            data["Y"] = self.Y[k]
        if self.aux is not None:
            data["aux"] = self.aux[k]
        ctx = NodeContext(k, self.grid.t(k), self.n, data)
        ctx.add_lazy("u", lambda c: self.control(k))
        return ctx

    def node(self, k, backward=True, zeta=True) -> NodeContext:
        ctx = self.base_context(k)
        if backward:
            if self.y_sol is not None:
                sol = self.y_sol

                def yv(c, sol=sol):
                    return sol.values_at(k, c)
                ctx.add_lazy("_yv", yv)
                for key in BACK_KEYS:
                    ctx.add_lazy(key, lambda c, key=key: c["_yv"][key])
            elif self.feedback is not None:
                fb = self.feedback
                ctx.add_lazy("_yv", lambda c: fb(k, c))
                for key in BACK_KEYS:
                    ctx.add_lazy(key, lambda c, key=key: c["_yv"][key])
            else:
                n = self.n
                K1, K2 = self.ens.marks1.K, self.ens.marks2.K
                for key, val in (("y", np.zeros(n)), ("z1", np.zeros(n)), ("z2", np.zeros(n)),
                                 ("zt1", np.zeros((n, K1))), ("zt2", np.zeros((n, K2)))):
                    ctx.set(key, val)
        if zeta and self.zeta_sol is not None:
            sol = self.zeta_sol
            ctx.add_lazy("_zv", lambda c, sol=sol: sol.values_at(k, c))
            for key, src in (("zeta", "y"), ("k1", "z1"), ("k2", "z2"), ("kt1", "zt1"), ("kt2", "zt2")):
                ctx.add_lazy(key, lambda c, src=src: c["_zv"][src])
        return ctx

    def theta(self, ctx, u=None) -> Theta:
        m = self.model
        return Theta(t=ctx.t, x=ctx["x"], y=ctx["y"], z1=ctx["z1"], z2=ctx["z2"],
                     zt1=ctx["zt1"] @ m.marks1.nu, zt2=ctx["zt2"] @ m.marks2.nu,
                     u=ctx["u"] if u is None else u, aux=ctx.get("aux", 0.0))


def _context_builder(state, backward):
    return lambda k: state.node(k, backward=backward, zeta=False)


def forward_euler(model: ModelSpec, ens, policy: ControlPolicy | None = None, feedback=None,
                  keep_Y=True, dc: DerivedCoefficients | None = None) -> StatePath:
    """Euler-Maruyama under the reference measure.

    dx = b dt + sigma_i dW^i + sum_j f_i(e_j) dNt_i(e_j); jump counts above
    one in a step are applied one event at a time, re-evaluating f at the
    updated state.  dY = sigma3 dW2 + sum_j f3(e_j)(dN2_j - lam_j nu2_j dt).
    ``feedback(k, ctx)`` supplies backward values for coupled drifts.
    """
    m = model
    dc = dc if dc is not None else assemble_derived(m)
    if policy is None:
        policy = m.default_policy or ControlPolicy("constant", value=m.U[0])
    if policy.path_dependent and not keep_Y:
        raise ConfigError("observation-feedback policy needs the Y path")
    grid = ens.grid
    N, dt, n = grid.n_steps, grid.dt, ens.n_paths
    e1, e2 = m.marks1.e, m.marks2.e
    nu1, nu2 = m.marks1.nu, m.marks2.nu
    x = np.empty((N + 1, n))
    x[0] = m.x0
    Y = np.zeros((N + 1, n)) if keep_Y else None
    Ycur = np.zeros(n)
    A = None
    if m.aux is not None:
        A = np.empty((N + 1, n))
        A[0] = m.aux.x0
        j1 = np.asarray(m.aux.jump1 or (0.0,) * len(e1), dtype=float)
        j2 = np.asarray(m.aux.jump2 or (0.0,) * len(e2), dtype=float)
    state = StatePath(m, ens, policy, x, Y, A, dc)
    state.feedback = feedback
    zero = np.zeros(n)
    for k, s in ens.steps():
        t = grid.t(k)
        u = policy(k, t, Y, s)
        if np.ndim(u):
            state.u_hist[k] = u
        aux_k = A[k] if A is not None else 0.0
        if feedback is not None:
            ctx = NodeContext(k, t, n, {"x": x[k], "aux": aux_k, "u": u,
                                        **({"Y": Y[k]} if Y is not None else {})})
            fb = feedback(k, ctx)
            th = Theta(t, x[k], fb["y"], fb["z1"], fb["z2"], fb["zt1"] @ nu1, fb["zt2"] @ nu2, u, aux_k)
        else:
            th = Theta(t, x[k], zero, zero, zero, zero, zero, u, aux_k)
        xk = x[k]
        f1 = np.broadcast_to(m.f1(th, e1), (n, len(e1)))
        f2 = np.broadcast_to(m.f2(th, e2), (n, len(e2)))
        lam = np.broadcast_to(dc.lam(th), (n, len(e2)))
        m.check_lambda(lam)
        xn = (xk + dc.b(th) * dt + m.sigma1(th) * s.dW1 + m.sigma2(th) * s.dW2
              - (f1 @ nu1 + f2 @ nu2) * dt)
        xn = np.asarray(xn + np.zeros(n), dtype=float)
        for f, cnt, e, coef in ((f1, s.dN1, e1, m.f1), (f2, s.dN2, e2, m.f2)):
            top = int(cnt.max()) if cnt.size else 0
            if top == 0:
                continue
            xn = xn + (f * (cnt > 0)).sum(axis=1)
            xj = xk + (f * (cnt > 0)).sum(axis=1)
            for i in range(1, top):
                fi = np.broadcast_to(coef(th.replace(x=xj), e), (n, len(e)))
                step = (fi * (cnt > i)).sum(axis=1)
                xn = xn + step
                xj = xj + step
        if not np.all(np.isfinite(xn)):
            bad = int(np.flatnonzero(~np.isfinite(xn))[0])
            raise BlowUpError(f"state blew up at step {k}, path {bad}")
        x[k + 1] = xn
        f3 = np.asarray(m.f3(t, e2), dtype=float)
        Ycur = Ycur + m.sigma3(t) * s.dW2 + (s.dN2 * f3 - lam * f3 * nu2 * dt).sum(axis=1)
        if Y is not None:
            Y[k + 1] = Ycur
        if A is not None:
            a = m.aux
            A[k + 1] = (A[k] + a.drift(t, A[k]) * dt + a.d1 * s.dW1 + a.d2 * s.dW2
                        + s.dNt1 @ j1 + s.dNt2 @ j2)
    if Y is None:
        state.extra["Y_T"] = Ycur
    return state


def y_driver(state: StatePath):
    m = state.model

    def drv(k, ctx, y, z1, z2, zt1, zt2):
        th = Theta(ctx.t, ctx["x"], y, z1, z2, zt1 @ m.marks1.nu, zt2 @ m.marks2.nu,
                   ctx["u"], ctx.get("aux", 0.0))
        return m.g(th)
    return drv


def lsmc_backward(state: StatePath, basis: RegressionBasis, implicit=False) -> BackwardSolution:
    m = state.model
    if not m.solve_y:
        return None
    sol = backward_lsmc(state.ens, _context_builder(state, backward=False),
                        lambda ctx: m.phi(Theta(x=ctx["x"])), y_driver(state), basis,
                        active=m.active, implicit=implicit, label="y",
                        store=m.coupled)
    state.y_sol = sol
    state.y0 = sol.y0
    return sol


def _blend(fb_new, fb_old, w):
    if fb_old is None or w == 1.0:
        return fb_new

    def fb(k, ctx):
        a, b = fb_new(k, ctx), fb_old(k, ctx)
        return {key: w * a[key] + (1 - w) * b[key] for key in BACK_KEYS}
    return fb


def _sol_feedback(sol):
    def fb(k, ctx):
        return sol.values_at(k, ctx)
    return fb


def _snapshot(state, sol):
    """Per-node (x, y, z, zt) arrays of one Picard iterate."""
    N = state.grid.n_steps
    out = {"x": state.x.copy()}
    if sol is None:
        return out
    st = sol.stored
    for key in BACK_KEYS:
        out[key] = st[key]
    return out


def _gap(a, b):
    g = np.mean((a["x"] - b["x"]) ** 2, axis=1)
    for key in BACK_KEYS:
        if key in a and key in b:
            d = (a[key] - b[key]) ** 2
            g = g + (d.reshape(d.shape[0], d.shape[1], -1).sum(axis=2)).mean(axis=1)
    return float(g.max())


def picard_coupled(model, ens, policy, basis, max_iters=30, tol=1e-20, damping=1.0,
                   keep_Y=True, dc=None) -> StatePath:
    """Alternate forward Euler (with backward feedback) and LSMC.

    The gap is the maximum over nodes of the mean-square change in
    (x, y, z, zt) between successive iterates; three consecutive ratios
    gap_j / gap_{j-1} >= 1 raise DivergenceError.
    """
    if not 0 < damping <= 1:
        raise ConfigError("Picard damping must lie in (0, 1]")
    dc = dc if dc is not None else assemble_derived(model)
    m = model if model.coupled else model.with_params(coupled=True)
    fb = None
    prev = None
    history = []
    bad = 0
    state = None
    for j in range(max_iters + 1):
        try:
            state = forward_euler(m, ens, policy, feedback=fb, keep_Y=keep_Y, dc=dc)
        except BlowUpError as exc:
            if fb is None:
                raise
            # the decoupled start was finite: the correction map itself diverged
            raise DivergenceError(
                f"Picard iterate {j} blew up ({exc}); the coupled system is likely outside its "
                f"small-time regime, try a shorter horizon T={ens.grid.T}") from exc
        sol = lsmc_backward(state, basis)
        snap = _snapshot(state, sol)
        if prev is not None:
            gap = _gap(snap, prev)
            last = history[-1]["gap"] if history else None
            ratio = gap / last if last else (0.0 if gap == 0 else None)
            history.append({"iter": j, "gap": gap, "ratio": ratio, "y0": state.y0})
            log.info("picard iter %d gap %.3e ratio %s", j, gap, ratio)
            if ratio is not None and ratio >= 1.0:
                bad += 1
                if bad >= 3:
                    raise DivergenceError(
                        f"Picard iteration not contracting ({bad} consecutive ratios >= 1, last "
                        f"{ratio:.3g}); the coupled system is likely outside its small-time regime, "
                        f"try a shorter horizon T={ens.grid.T}")
            else:
                bad = 0
            if gap <= tol:
                break
        else:
            history.append({"iter": 0, "gap": None, "ratio": None, "y0": state.y0})
        prev = snap
        fb = _blend(_sol_feedback(sol), fb, damping)
    state.picard = history
    state.model = model
    return state


def solve_state(model, ens, policy=None, basis=None, keep_Y=True, picard=None, dc=None) -> StatePath:
    """Forward state and y-solve (Picard when the model is coupled)."""
    basis = basis or RegressionBasis()
    dc = dc if dc is not None else assemble_derived(model)
    if model.coupled:
        return picard_coupled(model, ens, policy, basis, keep_Y=keep_Y, dc=dc, **(picard or {}))
    state = forward_euler(model, ens, policy, keep_Y=keep_Y, dc=dc)
    lsmc_backward(state, basis)
    return state


def lp_estimate_diagnostic(state: StatePath, p=2.0) -> dict:
    """Left side E[sup|x|^p + sup|y|^p + (int z^2)^{p/2} + (int int zt^2 nu)^{p/2}]
    against the data term |x0|^p + E|phi(0)|^p + (int|b(0)|)^p + (int sigma(0)^2)^{p/2}."""
    if p < 2:
        raise ConfigError("p must be >= 2")
    m = state.model
    grid = state.grid
    N, dt, n = grid.n_steps, grid.dt, state.n
    nu1, nu2 = m.marks1.nu, m.marks2.nu
    supx = np.max(np.abs(state.x), axis=0)
    supy = np.zeros(n)
    iz = np.zeros(n)
    izt = np.zeros(n)
    ib = np.zeros(n)
    isg = np.zeros(n)
    for k in range(N):
        ctx = state.node(k, zeta=False)
        supy = np.maximum(supy, np.abs(ctx["y"]))
        iz += (ctx["z1"] ** 2 + ctx["z2"] ** 2) * dt
        izt += ((ctx["zt1"] ** 2) @ nu1 + (ctx["zt2"] ** 2) @ nu2) * dt
        th0 = Theta(t=ctx.t, x=np.zeros(n), u=ctx["u"], aux=ctx.get("aux", 0.0))
        ib += np.abs(state.dc.b(th0)) * dt
        isg += (m.sigma1(th0) ** 2 + m.sigma2(th0) ** 2) * dt + 0.0 * th0.x
    ctxN = state.node(N, zeta=False)
    supy = np.maximum(supy, np.abs(ctxN["y"]))
    lhs = float(np.mean(supx ** p + supy ** p + iz ** (p / 2) + izt ** (p / 2)))
    phi0 = float(np.abs(m.phi(Theta(x=0.0))))
    rhs = float(abs(m.x0) ** p + phi0 ** p + np.mean(ib ** p) + np.mean(isg ** (p / 2)))
    return {"p": p, "lhs": lhs, "data": rhs, "ratio": lhs / rhs if rhs > 0 else (0.0 if lhs == 0 else float("inf"))}


def write_backward_csv(sol: BackwardSolution, path, names=("y", "z1", "z2")):
    if sol is None:
        return
    t = sol.grid.nodes
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["t", f"mean_{names[0]}", f"mean_{names[1]}", f"mean_{names[2]}"]
        head += [f"mean_{names[0]}t1_{j}" for j in range(sol.K1)]
        head += [f"mean_{names[0]}t2_{j}" for j in range(sol.K2)]
        w.writerow(head)
        for k in range(len(t)):
            row = [f"{t[k]:.10g}", f"{sol.means['y'][k]:.12g}", f"{sol.means['z1'][k]:.12g}",
                   f"{sol.means['z2'][k]:.12g}"]
            row += [f"{v:.12g}" for v in sol.means["zt1"][k]]
            row += [f"{v:.12g}" for v in sol.means["zt2"][k]]
            w.writerow(row)
