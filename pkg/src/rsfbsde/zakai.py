"""Unnormalized risk-sensitive conditional measure: a particle estimator with
the observed drivers substituted, an explicit grid integrator of the
modified Zakai equation in density form, and the Kalman-Bucy oracle."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .fbsdep import forward_euler
from .kernel import PathEnsemble, StepNoise, TimeGrid
from .models import ControlPolicy, ModelSpec, Theta, assemble_derived


@dataclass
class ObservationRecord:
    """Observed drivers on the grid: W2 increments, N2 counts per atom and
    the Y path.  ``ycomp`` is the per-step compensator sum_j f3_j lam_j nu2_j dt
    of the path that generated the record."""
    grid: TimeGrid
    dW2: np.ndarray        # (N,)
    dN2: np.ndarray        # (N, K2) counts
    Y: np.ndarray          # (N+1,)
    ycomp: np.ndarray      # (N,)

    @property
    def events(self):
        ks, js = np.nonzero(self.dN2)
        return [(int(k), int(j), int(self.dN2[k, j])) for k, j in zip(ks, js)]

    def reconstruct_Y(self, model: ModelSpec):
        f3 = np.asarray([model.f3(self.grid.t(k), model.marks2.e) for k in range(self.grid.n_steps)], dtype=float)
        s3 = np.asarray([model.sigma3(self.grid.t(k)) for k in range(self.grid.n_steps)])
        inc = s3 * self.dW2 + (self.dN2 * f3).sum(axis=1) - self.ycomp
        return np.concatenate([[0.0], np.cumsum(inc)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kind", "t", "value", "aux"])
            w.writerow(["grid", repr(self.grid.T), self.grid.n_steps, self.dN2.shape[1]])
            for k in range(self.grid.n_steps):
                w.writerow(["inc", repr(self.grid.t(k)), repr(float(self.dW2[k])), repr(float(self.ycomp[k]))])
            for k, j, c in self.events:
                for _ in range(c):
                    w.writerow(["event", repr(self.grid.t(k)), j, ""])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["kind", "t"]:
            raise ConfigError(f"{path}: not an observation record")
        g = rows[1]
        if g[0] != "grid":
            raise ConfigError(f"{path}: missing grid row")
        grid = TimeGrid(float(g[1]), int(g[2]))
        K2 = int(g[3])
        N = grid.n_steps
        dW2 = np.zeros(N); yc = np.zeros(N); dN2 = np.zeros((N, K2), dtype=np.int64)
        k = 0
        for r in rows[2:]:
            if r[0] == "inc":
                dW2[k] = float(r[2]); yc[k] = float(r[3]); k += 1
            elif r[0] == "event":
                ke = grid.index_of(float(r[1]))
                j = int(r[2])
                if not 0 <= j < K2:
                    raise ConfigError(f"{path}: mark index {j} outside the mark space")
                dN2[min(ke, N - 1), j] += 1
            else:
                raise ConfigError(f"{path}: unknown row kind {r[0]}")
        if k != N:
            raise ConfigError(f"{path}: expected {N} increments, found {k}")
        rec = cls(grid, dW2, dN2, np.zeros(N + 1), yc)
        return rec


def observations_from_state(state, paths) -> list:
    """Records of the observation drivers of selected paths of a solved state."""
    m = state.model
    grid = state.grid
    N = grid.n_steps
    paths = np.atleast_1d(paths)
    dW2 = np.empty((N, paths.size)); dN2 = np.empty((N, paths.size, m.marks2.K), dtype=np.int64)
    yc = np.empty((N, paths.size))
    for k, s in state.ens.steps():
        dW2[k] = s.dW2[paths]
        dN2[k] = s.dN2[paths]
        th = Theta(t=grid.t(k), x=state.x[k][paths], u=0.0)
        lam = np.broadcast_to(state.dc.lam(th), (paths.size, m.marks2.K))
        f3 = np.asarray(m.f3(grid.t(k), m.marks2.e), dtype=float)
        yc[k] = (f3 * lam * m.marks2.nu).sum(axis=1) * grid.dt
    out = []
    for i, p in enumerate(paths):
        Y = state.Y[:, p] if state.Y is not None else np.zeros(N + 1)
        out.append(ObservationRecord(grid, dW2[:, i].copy(), dN2[:, i].copy(), Y.copy(), yc[:, i].copy()))
    return out


@dataclass
class ObservedEnsemble(PathEnsemble):
    """Particles in groups of ``per``: fresh (W1, N1) per particle, the
    group's observed (W2, N2) shared by every particle of the group."""
    obs_dW2: np.ndarray = None   # (N, G)
    obs_dN2: np.ndarray = None   # (N, G, K2)
    per: int = 1

    def _draw(self, k):
        s = super()._draw(k)
        dW2 = np.repeat(self.obs_dW2[k], self.per)
        dN2 = np.repeat(self.obs_dN2[k], self.per, axis=0)
        return StepNoise(s.dW1, dW2, s.dN1, dN2, s.dNt1, dN2 - self.marks2.nu * self.grid.dt)


def _stack(records):
    dW2 = np.stack([r.dW2 for r in records], axis=1)
    dN2 = np.stack([r.dN2 for r in records], axis=1)
    return dW2, dN2


def particle_filter(model: ModelSpec, records, n_particles, seed=0, policy=None,
                    test_functions=None, every=None, ess_warn=0.01, milstein=True) -> dict:
    """mu_t(F) = mean over particles of Gamma~_t exp{theta int ltilde} F(x_t)
    for every record at the checkpoint nodes.  Returns arrays (n_ck, G) per
    test function, plus weighted normalized moments and their stderr.
    ``milstein`` adds the pathwise correction of the log weight for the
    correlation between the signal and the observed W2 within a step; it has
    zero mean, so the weak (observation-averaged) law is unchanged."""
    if isinstance(records, ObservationRecord):
        records = [records]
    grid = model.grid
    N = grid.n_steps
    if records[0].grid != grid:
        raise ConfigError("observation grid differs from the model grid")
    fns = test_functions or {"1": lambda x: np.ones_like(x), "x": lambda x: x, "x2": lambda x: x * x}
    every = every or N
    ck = sorted(set(list(range(0, N + 1, every)) + [N]))
    G = len(records)
    P = int(n_particles)
    dW2, dN2 = _stack(records)
    ens = ObservedEnsemble(grid, model.marks1, model.marks2, G * P, int(seed),
                           obs_dW2=dW2, obs_dN2=dN2, per=P)
    dc = assemble_derived(model)
    state = forward_euler(model, ens, policy or model.default_policy or ControlPolicy("constant", value=model.U[0]),
                          keep_Y=False, dc=dc)
    th_ = model.theta
    nu2 = model.marks2.nu
    dt = grid.dt
    lw = np.zeros(G * P)
    out = {name: np.zeros((len(ck), G)) for name in fns}
    mom = {"mean": np.zeros((len(ck), G)), "var": np.zeros((len(ck), G)),
           "mean_se": np.zeros((len(ck), G)), "var_se": np.zeros((len(ck), G))}
    se = {name: np.zeros((len(ck), G)) for name in fns}
    ess_min = 1.0

    def record(i, k):
        nonlocal ess_min
        x = state.x[k].reshape(G, P)
        w = np.exp(lw).reshape(G, P)
        for name, F in fns.items():
            v = w * F(x)
            out[name][i] = v.mean(axis=1)
            se[name][i] = v.std(axis=1, ddof=1) / math.sqrt(P) if P > 1 else 0.0
        sw = w.sum(axis=1)
        mu = (w * x).sum(axis=1) / sw
        var = (w * (x - mu[:, None]) ** 2).sum(axis=1) / sw
        mom["mean"][i] = mu
        mom["var"][i] = var
        mom["mean_se"][i] = np.sqrt((w ** 2 * (x - mu[:, None]) ** 2).sum(axis=1)) / sw
        mom["var_se"][i] = np.sqrt((w ** 2 * ((x - mu[:, None]) ** 2 - var[:, None]) ** 2).sum(axis=1)) / sw
        ess = (sw ** 2 / (w ** 2).sum(axis=1)) / P
        ess_min = min(ess_min, float(ess.min()))

    ci = 0
    if ck[0] == 0:
        record(0, 0)
        ci = 1
    for k, s in ens.steps():
        th = Theta(t=grid.t(k), x=state.x[k], u=state.control(k))
        c = np.broadcast_to(np.asarray(dc.c(th), dtype=float), (G * P,))
        lam = np.broadcast_to(dc.lam(th), (G * P, model.marks2.K))
        lt = np.broadcast_to(np.asarray(model.ltilde(th), dtype=float), (G * P,))
        jump = np.where(s.dN2 > 0, s.dN2 * np.log(lam), 0.0).sum(axis=1)
        lw = lw + c * s.dW2 - 0.5 * c * c * dt + jump - ((lam - 1.0) * nu2).sum(axis=1) * dt + th_ * lt * dt
        if milstein:
            # x moves with the same dW2 inside the step: int (c(x_s) - c(x_k)) dW2
            # ~ c_x sigma2 (dW2^2 - dt) / 2 for a fixed observation record
            cx = np.asarray(model.b2.grad(th)["x"], dtype=float) / model.sigma3(th.t)
            lw = lw + 0.5 * cx * np.asarray(model.sigma2(th), dtype=float) * (s.dW2 ** 2 - dt)
        if ci < len(ck) and ck[ci] == k + 1:
            record(ci, k + 1)
            ci += 1
    if ess_min < ess_warn:
        warnings.warn(f"particle weights degenerate: min ESS fraction {ess_min:.3g}", RuntimeWarning)
    return {"checkpoints": ck, "t": [grid.t(k) for k in ck], "mu": out, "mu_se": se,
            "moments": mom, "ess_min": ess_min, "log_w": lw.reshape(G, P), "x_T": state.x[N].reshape(G, P)}


def particle_mu(model, observation, n_particles, F=None, seed=0, every=1):
    """mu_t(F) path for one observation record."""
    fns = {"F": F or (lambda x: np.ones_like(x))}
    r = particle_filter(model, [observation], n_particles, seed, test_functions=fns, every=every)
    return {"t": r["t"], "mu": r["mu"]["F"][:, 0], "stderr": r["mu_se"]["F"][:, 0], "ess_min": r["ess_min"]}


# --------------------------------------------------------------------------
# grid integrator


@dataclass
class ZakaiState:
    x: np.ndarray
    q: np.ndarray
    t: float = 0.0
    clipped: float = 0.0
    leaked: float = 0.0
    info: dict = field(default_factory=dict)

    @property
    def dx(self):
        return float(self.x[1] - self.x[0])

    def integrate(self, F):
        return float(np.sum(F(self.x) * self.q) * self.dx)

    def boundary_ratio(self):
        mx = float(np.max(np.abs(self.q)))
        return max(abs(self.q[0]), abs(self.q[-1])) / mx if mx > 0 else 0.0


def initial_density(xg, x0, width=0.0):
    """Unit mass at x0: split linearly between the two neighbouring nodes
    (width 0) or a Gaussian of std ``width`` renormalized on the grid."""
    dx = xg[1] - xg[0]
    if width > 0:
        q = np.exp(-0.5 * ((xg - x0) / width) ** 2)
        return q / (q.sum() * dx)
    q = np.zeros_like(xg)
    pos = (x0 - xg[0]) / dx
    i = int(np.clip(np.floor(pos), 0, len(xg) - 2))
    w = pos - i
    q[i] += (1 - w) / dx
    q[i + 1] += w / dx
    return q


class ZakaiOperators:
    """Adjoint (density) forms of L, M, A and I on a uniform grid with
    zero-flux boundaries; jump shifts scatter mass to the two nodes around
    x + f (transpose of linear interpolation)."""

    def __init__(self, model: ModelSpec, xg: np.ndarray):
        self.m = model
        self.x = np.asarray(xg, dtype=float)
        self.dx = float(self.x[1] - self.x[0])
        self.dc = assemble_derived(model)

    def coeffs(self, t, u):
        m = self.m
        th = Theta(t=t, x=self.x, u=u)
        n = self.x.size
        bc = lambda v: np.broadcast_to(np.asarray(v, dtype=float), (n,))
        return {"b1": bc(m.b1(th)), "s1": bc(m.sigma1(th)), "s2": bc(m.sigma2(th)),
                "c": bc(self.dc.c(th)), "l": bc(m.ltilde(th)),
                "f1": np.broadcast_to(m.f1(th, m.marks1.e), (n, m.marks1.K)),
                "f2": np.broadcast_to(m.f2(th, m.marks2.e), (n, m.marks2.K)),
                "lam": np.broadcast_to(self.dc.lam(th), (n, m.marks2.K))}

    def _div(self, flux_face):
        """-(F_{i+1/2} - F_{i-1/2}) / dx with zero boundary fluxes."""
        F = np.concatenate([[0.0], flux_face, [0.0]])
        return -(F[1:] - F[:-1]) / self.dx

    def ddx_star(self, v):
        """Density form of F -> F' v: -(v q)' with zero-flux ends."""
        face = 0.5 * (v[:-1] + v[1:])
        return self._div(face)

    def L_star(self, q, C):
        D = C["s1"] ** 2 + C["s2"] ** 2
        Dq = D * q
        diff_face = 0.5 * (Dq[1:] - Dq[:-1]) / self.dx
        b = C["b1"]
        central = 0.5 * (b[:-1] * q[:-1] + b[1:] * q[1:])
        # hybrid differencing: upwind faces where the cell Peclet number
        # |b| dx / (D / 2) exceeds 2, where central fluxes stop being monotone
        bf = 0.5 * (b[:-1] + b[1:])
        upwind = np.where(bf > 0, b[:-1] * q[:-1], b[1:] * q[1:])
        Df = 0.5 * (D[:-1] + D[1:])
        adv_face = np.where(np.abs(bf) * self.dx > Df, upwind, central)
        return self.m.theta * C["l"] * q + self._div(adv_face - diff_face)

    def DD(self, q, s):
        """(s (s q)')' on the compact stencil, zero flux at the ends."""
        sq = s * q
        face = 0.5 * (s[:-1] + s[1:]) * (sq[1:] - sq[:-1]) / self.dx
        return -self._div(face)

    def M_star(self, q, C):
        return C["c"] * q + self.ddx_star(C["s2"] * q)

    def shift_star(self, v, f):
        """Density of the push-forward of mass v under x -> x + f."""
        n = self.x.size
        # node index plus shift in cells: a zero shift stays exactly on the node
        pos = np.arange(n) + np.asarray(f, dtype=float) / self.dx
        # the last node sits in the last cell with weight 1, not off-grid
        lo = np.minimum(np.floor(pos), n - 2)
        w = pos - lo
        lo = lo.astype(np.int64)
        out_of = (pos < 0) | (pos > n - 1)
        leak = float(np.sum(v[out_of]) * self.dx)
        lo = np.where(pos > n - 1, n - 1, lo)
        lo_c = np.clip(lo, 0, n - 2)
        w = np.where(lo < 0, 0.0, np.where(lo > n - 2, 1.0, w))
        out = np.zeros(n)
        np.add.at(out, lo_c, (1 - w) * v)
        np.add.at(out, lo_c + 1, w * v)
        return out, leak

    def A_star(self, q, xi, f):
        s, leak = self.shift_star(xi * q, f)
        return s - xi * q - self.ddx_star(xi * f * q), leak

    def I_star(self, q, xi, f):
        s, leak = self.shift_star(xi * q, f)
        return s - q, leak


def _step_rate(ops, C):
    """dt-coefficient of the explicit bound: D/2 / dx^2 + |b1| / (2 dx)."""
    D = float(np.max(C["s1"] ** 2 + C["s2"] ** 2))
    return 0.5 * D / ops.dx ** 2 + 0.5 * float(np.max(np.abs(C["b1"]))) / ops.dx


def stable_dt(model, xg, u=0.0, t=0.0, bound=0.45):
    ops = ZakaiOperators(model, xg)
    rate = _step_rate(ops, ops.coeffs(t, u))
    return bound / rate if rate > 0 else math.inf


def zakai_step(state: ZakaiState, ops: ZakaiOperators, k, dt, dW2, dN2, u=0.0, bound=0.45) -> ZakaiState:
    """One splitting step: deterministic part (L* + A* - compensator of I*),
    Brownian part dW2 M*, then one I* update per observed event.  Negative
    values are clipped to zero and the clipped mass accumulated."""
    t = state.t
    C = ops.coeffs(t, u)
    rate = _step_rate(ops, C)
    if rate * dt > bound:
        raise ConfigError(f"explicit Zakai step unstable: need dt <= {bound / rate:.3g}")
    m = ops.m
    q = state.q
    leak = 0.0
    det = ops.L_star(q, C)
    nu1, nu2 = m.marks1.nu, m.marks2.nu
    for j in range(m.marks1.K):
        if nu1[j] > 0 and np.any(C["f1"][:, j] != 0):
            a, lk = ops.A_star(q, np.ones_like(q), C["f1"][:, j])
            det = det + nu1[j] * a
            leak += nu1[j] * dt * lk
    for j in range(m.marks2.K):
        if nu2[j] == 0:
            continue
        lamj, fj = C["lam"][:, j], C["f2"][:, j]
        a, lk1 = ops.A_star(q, lamj, fj)
        i_, lk2 = ops.I_star(q, lamj, fj)
        det = det + nu2[j] * (a - i_)
        leak += nu2[j] * dt * (lk1 + lk2)
    q1 = q + dt * det
    # dW2 M*q with M* = c - D, D q = (s2 q)'.  Single noise, so the Milstein
    # term 1/2 (dW^2 - dt) M*M*q gives strong order one; its c^2 part is
    # taken as the exact exponential factor the particle weights use.
    c = C["c"]
    Dq = -ops.ddx_star(C["s2"] * q1)
    cross = c * Dq - ops.ddx_star(C["s2"] * c * q1)
    q2 = (q1 * np.exp(c * dW2 - 0.5 * c * c * dt) - dW2 * Dq
          + 0.5 * (dW2 * dW2 - dt) * (ops.DD(q1, C["s2"]) - cross))
    for j in range(m.marks2.K):
        for _ in range(int(dN2[j])):
            i_, lk = ops.I_star(q2, C["lam"][:, j], C["f2"][:, j])
            q2 = q2 + i_
            leak += lk
    neg = q2 < 0
    clipped = float(-np.sum(q2[neg]) * ops.dx)
    q2 = np.where(neg, 0.0, q2)
    return ZakaiState(state.x, q2, t + dt, state.clipped + clipped, state.leaked + leak, state.info)


def grid_filter(model, record: ObservationRecord, x_min=-3.0, x_max=3.0, n_x=301, snapshots=(),
                policy=None, bound=0.45, init_width=0.0) -> dict:
    """Run the grid integrator along one record; moments at every node and
    density snapshots at requested times."""
    grid = model.grid
    xg = np.linspace(x_min, x_max, int(n_x))
    ops = ZakaiOperators(model, xg)
    st = ZakaiState(xg, initial_density(xg, model.x0, init_width))
    policy = policy or model.default_policy or ControlPolicy("constant", value=model.U[0])
    N, dt = grid.n_steps, grid.dt
    mom = np.zeros((N + 1, 3))
    snaps = {}
    want = {grid.index_of(t): t for t in snapshots}

    def moments(s):
        return [s.integrate(np.ones_like), s.integrate(lambda x: x), s.integrate(lambda x: x * x)]
    mom[0] = moments(st)
    bmax = 0.0
    for k in range(N):
        u = policy(k, grid.t(k), None, None)
        st = zakai_step(st, ops, k, dt, record.dW2[k], record.dN2[k], u, bound)
        mom[k + 1] = moments(st)
        bmax = max(bmax, st.boundary_ratio())
        if k + 1 in want:
            snaps[want[k + 1]] = st.q.copy()
    if bmax > 1e-6:
        warnings.warn(f"density reaches the grid boundary (ratio {bmax:.2e}); widen the grid", RuntimeWarning)
    return {"state": st, "moments": mom, "snapshots": snaps, "clipped": st.clipped, "leaked": st.leaked,
            "boundary_ratio": bmax}


def write_density_csv(x, q, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "q"])
        for a, b in zip(x, q):
            w.writerow([f"{a:.10g}", f"{b:.12g}"])


def filter_cost(model, source) -> float:
    """mu_T(e^{theta phi_term}) from a final ZakaiState or particle output."""
    th_ = model.theta

    def ephi(x):
        return np.exp(th_ * np.asarray(model.phi_term(Theta(x=x, y=0.0 * x)), dtype=float))
    if isinstance(source, ZakaiState):
        return source.integrate(ephi)
    w = np.exp(source["log_w"])
    return (w * ephi(source["x_T"])).mean(axis=1)


# --------------------------------------------------------------------------
# Kalman-Bucy oracle


def kalman_bucy(a, s1, s2, h, sigma3, x0, record: ObservationRecord, P0=0.0) -> dict:
    """dx = a x dt + s1 dW1 + s2 dW2, dY = h x dt + sigma3 dW2 (correlated noise).
    Gain K = (P h + s2 sigma3) / sigma3^2,
    P' = 2aP + s1^2 + s2^2 - (P h + s2 sigma3)^2 / sigma3^2.
    Under the reference measure dY = sigma3 dW2, so Y increments are
    sigma3 * record.dW2."""
    from scipy.integrate import solve_ivp
    grid = record.grid
    N, dt = grid.n_steps, grid.dt
    ts = grid.nodes

    def ric(t, P):
        return 2 * a * P + s1 ** 2 + s2 ** 2 - (P * h + s2 * sigma3) ** 2 / sigma3 ** 2
    sol = solve_ivp(ric, (0.0, grid.T), [P0], t_eval=ts, rtol=1e-10, atol=1e-12)
    P = sol.y[0]
    m = np.empty(N + 1)
    m[0] = x0
    dY = sigma3 * record.dW2
    for k in range(N):
        K = (P[k] * h + s2 * sigma3) / sigma3 ** 2
        m[k + 1] = m[k] + a * m[k] * dt + K * (dY[k] - h * m[k] * dt)
    return {"t": ts, "mean": m, "var": P}


def next_records(model, n, seed) -> list:
    """Observation records drawn under the reference measure (state path
    included so the compensator column matches the generating path)."""
    from .models import model_ensemble
    ens = model_ensemble(model, n, seed)
    st = forward_euler(model, ens, model.default_policy or ControlPolicy("constant", value=model.U[0]))
    return observations_from_state(st, np.arange(n))


def tower_check(model, n_obs=200, n_particles=500, n_direct=100_000, seed=0, chunk=25, z=3.0) -> dict:
    """Average of mu_T(e^{theta phi_term}) over observation records drawn
    under the reference measure against the direct risk-sensitive cost.
    Exact weights (no pathwise correction) so the identity holds in
    expectation for the discrete scheme."""
    from .measure import evolve_gamma_tilde
    from .models import model_ensemble
    from .risk import cost_direct
    pol = model.default_policy or ControlPolicy("constant", value=model.U[0])
    st_obs = forward_euler(model, model_ensemble(model, n_obs, seed + 1), pol)
    recs = observations_from_state(st_obs, np.arange(n_obs))
    # per-path direct samples on the generating paths: same expectation,
    # strongly correlated with the filter value of their own record
    own = np.exp(cost_direct(st_obs, evolve_gamma_tilde(st_obs))["samples_log"])
    vals = []
    for i in range(0, n_obs, chunk):
        r = particle_filter(model, recs[i:i + chunk], n_particles, seed=seed + 2 + i, milstein=False)
        vals.append(filter_cost(model, r))
    vals = np.concatenate(vals)
    avg = float(vals.mean())
    se_f = float(vals.std(ddof=1) / math.sqrt(vals.size))
    ens = model_ensemble(model, n_direct, seed + 10_000)
    st = forward_euler(model, ens, pol, keep_Y=False)
    cd = cost_direct(st, evolve_gamma_tilde(st))
    comb = math.sqrt(se_f ** 2 + cd["stderr"] ** 2)
    gap = abs(avg - cd["J_direct"])
    d = vals - own
    return {"filter_cost_mean": avg, "filter_cost_stderr": se_f, "J_direct": cd["J_direct"],
            "J_direct_stderr": cd["stderr"], "gap": gap, "combined_stderr": comb,
            "tolerance": z * comb, "n_obs": n_obs, "pass": bool(gap <= z * comb),
            "paired_diff": float(d.mean()), "paired_stderr": float(d.std(ddof=1) / math.sqrt(d.size)),
            "paired_pass": bool(abs(d.mean()) <= z * d.std(ddof=1) / math.sqrt(d.size))}
