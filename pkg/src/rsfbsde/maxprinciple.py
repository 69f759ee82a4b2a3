"""Adjoint processes along a frozen candidate trajectory, the Hamiltonian,
the optimal-condition scan and the spike-variation experiment.

Adjoint equations are solved with the same LSMC sweep as the state.  All of
them read generator/coefficient derivatives through a *snapshot provider*:
``snap(k, second=False)`` returns a dict of per-path derivative arrays at
node k (see :class:`DerivativeSnapshot` for the keys).  Synthetic providers
with deterministic coefficients give the ODE reductions used in tests.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AdjointError, ConfigError, SolverError
from .fbsdep import StatePath, solve_state
from .models import THETA_VARS, XY, ControlPolicy, Kappa, Theta, TruncationPolicy
from .qexp import solve_qexp
from .regression import NodeContext, RegressionBasis, backward_lsmc

log = logging.getLogger(__name__)

Z_KEYS = ("z1", "z2", "zt1", "zt2")


def _b(v, n, K=None):
    a = np.asarray(v, dtype=float)
    return np.broadcast_to(a, (n,) if K is None else (n, K))


def _bdict(d, n, K=None):
    return {key: _b(v, n, K) for key, v in d.items()}


class DerivativeSnapshot:
    """Derivative arrays of the assembled coefficients along a solved state.

    keys at k < N: 'b', 'g' (grad over x, y, z1, z2, zt1, zt2), 's1', 's2'
    (grad over x, y), 'f1', 'f2' (per atom, (n, K)), 'l' (grad incl. k1,
    k2 and per-atom densities kt1, kt2); with ``second=True`` also the
    Hessians 'bh', 'gh', 's1h', 's2h', 'f1h', 'f2h', 'lh'.
    keys at k = N: 'phi_x', 'phi_xx', 'pt_x', 'pt_y', 'pt_xx'.
    """

    def __init__(self, state: StatePath):
        if state.zeta_sol is None:
            raise AdjointError("candidate trajectory has no zeta solution")
        self.state = state
        self._key = None
        self._val = None

    def __call__(self, k, second=False):
        if self._key == (k, second):
            return self._val
        st = self.state
        m, dc, n = st.model, st.dc, st.n
        K1, K2 = m.marks1.K, m.marks2.K
        N = st.grid.n_steps
        if k == N:
            xT = st.x[N]
            tp = Theta(t=st.grid.T, x=xT, y=st.y0 + 0.0 * xT)
            D = {"phi_x": _b(m.phi.grad(Theta(x=xT))["x"], n),
                 "phi_xx": _b(m.phi.hess(Theta(x=xT))[("x", "x")], n),
                 "pt_x": _b(m.phi_term.grad(tp)["x"], n),
                 "pt_y": _b(m.phi_term.grad(tp)["y"], n),
                 "pt_xx": _b(m.phi_term.hess(tp)[("x", "x")], n)}
        else:
            ctx = st.node(k)
            th = st.theta(ctx)
            kap = Kappa(ctx["k1"], ctx["k2"], ctx["kt1"], ctx["kt2"])
            e1, e2 = m.marks1.e, m.marks2.e
            lg = dc.l_grad(th, kap)
            D = {"b": _bdict(dc.b_grad(th), n), "g": _bdict(m.g.grad(th), n),
                 "s1": _bdict(m.sigma1.grad(th), n), "s2": _bdict(m.sigma2.grad(th), n),
                 "f1": _bdict(m.f1.grad(th, e1), n, K1), "f2": _bdict(m.f2.grad(th, e2), n, K2),
                 "l": {**{v: _b(lg[v], n) for v in THETA_VARS + ("k1", "k2")},
                       "kt1": _b(lg["kt1"], n, K1), "kt2": _b(lg["kt2"], n, K2)}}
            if second:
                lh = dc.l_hess(th, kap)
                D.update({"bh": _bdict(dc.b_hess(th), n), "gh": _bdict(m.g.hess(th), n),
                          "s1h": _bdict(m.sigma1.hess(th), n), "s2h": _bdict(m.sigma2.hess(th), n),
                          "f1h": _bdict(m.f1.hess(th, e1), n, K1),
                          "f2h": _bdict(m.f2.hess(th, e2), n, K2),
                          "lh": {key: _b(v, n, K1 if key == ("kt1", "kt1") else
                                         (K2 if "kt2" in key else None))
                                 for key, v in lh.items()}})
        self._key, self._val = (k, second), D
        return D


def synthetic_snapshot(n, K1, K2, T, n_steps, values=None, terminal=None):
    """Deterministic snapshot provider for ODE reductions.

    ``values`` maps 'b.x', 'g.y', 'l.k1', 'bh.x.x', 'f1.x', ... to a
    constant or a function of t; missing entries are zero.  ``terminal``
    sets 'phi_x', 'pt_x', ...
    """
    values = dict(values or {})
    terminal = dict(terminal or {})
    dt = T / n_steps

    def val(key, t):
        v = values.get(key, 0.0)
        return v(t) if callable(v) else v

    def grads(prefix, vars, t, K=None):
        return {v: _b(val(f"{prefix}.{v}", t), n, K) for v in vars}

    def hess(prefix, vars, t, K=None):
        return {(a, c): _b(val(f"{prefix}.{min(a, c)}.{max(a, c)}", t), n, K)
                for a in vars for c in vars}

    def snap(k, second=False):
        if k == n_steps:
            return {key: _b(terminal.get(key, 0.0), n)
                    for key in ("phi_x", "phi_xx", "pt_x", "pt_y", "pt_xx")}
        t = k * dt
        D = {"b": grads("b", THETA_VARS, t), "g": grads("g", THETA_VARS, t),
             "s1": grads("s1", XY, t), "s2": grads("s2", XY, t),
             "f1": grads("f1", XY, t, K1), "f2": grads("f2", XY, t, K2),
             "l": {**grads("l", THETA_VARS + ("k1", "k2"), t),
                   "kt1": _b(val("l.kt1", t), n, K1), "kt2": _b(val("l.kt2", t), n, K2)}}
        if second:
            lv = THETA_VARS + ("k1", "k2")
            lh = hess("lh", lv, t)
            lh[("kt1", "kt1")] = _b(val("lh.kt1.kt1", t), n, K1)
            lh[("kt2", "kt2")] = _b(val("lh.kt2.kt2", t), n, K2)
            lh[("x", "kt2")] = _b(val("lh.kt2.x", t), n, K2)
            D.update({"bh": hess("bh", THETA_VARS, t), "gh": hess("gh", THETA_VARS, t),
                      "s1h": hess("s1h", XY, t), "s2h": hess("s2h", XY, t),
                      "f1h": hess("f1h", XY, t, K1), "f2h": hess("f2h", XY, t, K2), "lh": lh})
        return D
    return snap


# --------------------------------------------------------------------------
# building blocks shared by the adjoint drivers


def _Adiff(D, m):
    """sigma_ix + sigma_iy m for i = 1, 2."""
    return D["s1"]["x"] + D["s1"]["y"] * m, D["s2"]["x"] + D["s2"]["y"] * m


def _Fjump(D, m):
    """f_ix + f_iy m per atom for i = 1, 2."""
    mc = m[:, None]
    return D["f1"]["x"] + D["f1"]["y"] * mc, D["f2"]["x"] + D["f2"]["y"] * mc


def _lin(G, m, K, IK):
    return G["x"] + G["y"] * m + G["z1"] * K[0] + G["z2"] * K[1] + G["zt1"] * IK[0] + G["zt2"] * IK[1]


def _decouple_terms(D, m, n1, n2, nt1, nt2, nu1, nu2):
    A = _Adiff(D, m)
    F = _Fjump(D, m)
    K = (m * A[0] + n1, m * A[1] + n2)
    mc = m[:, None]
    Kt = (mc * F[0] + nt1 + nt1 * F[0], mc * F[1] + nt2 + nt2 * F[1])
    IK = (Kt[0] @ nu1, Kt[1] @ nu2)
    return A, F, K, Kt, IK


class AdjointProblem:
    """Ensemble, feature contexts, snapshot provider and basis for the
    adjoint solves along one frozen trajectory."""

    def __init__(self, ens, base, snap, basis: RegressionBasis, active=(True, True, True, True),
                 features=("x",), fp_sweeps=20, fp_tol=1e-10):
        self.ens = ens
        self.base = base
        self.snap = snap
        self.basis = basis
        self.active = tuple(active)
        self.features = tuple(features)
        self.fp_sweeps, self.fp_tol = fp_sweeps, fp_tol
        self.nu1, self.nu2 = ens.marks1.nu, ens.marks2.nu

    @classmethod
    def from_state(cls, state: StatePath, basis=None, features=None):
        m = state.model
        feats = features or (("x", "aux") if m.aux is not None else ("x",))
        basis = basis or RegressionBasis(feats, degree=2)
        return cls(state.ens, state.base_context, DerivativeSnapshot(state), basis,
                   active=m.active, features=feats)

    @property
    def N(self):
        return self.ens.grid.n_steps

    @property
    def n(self):
        return self.ens.n_paths


@dataclass
class AdjointBundle:
    """Stored (N+1, n) trajectories of all adjoints and the derived processes."""
    m: np.ndarray = None
    n1: np.ndarray = None
    n2: np.ndarray = None
    nt1: np.ndarray = None
    nt2: np.ndarray = None
    alpha: np.ndarray = None
    beta1: np.ndarray = None
    beta2: np.ndarray = None
    bt1: np.ndarray = None
    bt2: np.ndarray = None
    r: np.ndarray = None
    s: np.ndarray = None
    p: np.ndarray = None
    q1: np.ndarray = None
    q2: np.ndarray = None
    qt1: np.ndarray = None
    qt2: np.ndarray = None
    P: np.ndarray = None
    Q1: np.ndarray = None
    Q2: np.ndarray = None
    Qt1: np.ndarray = None
    Qt2: np.ndarray = None
    info: dict = field(default_factory=dict)

    def derived(self, k, D, dsig=(0.0, 0.0)):
        """K, K-tilde, K', K'-tilde, Delta, pi at node k."""
        nu1, nu2 = self.info["nu1"], self.info["nu2"]
        m = self.m[k]
        A, F, K, Kt, IK = _decouple_terms(D, m, self.n1[k], self.n2[k], self.nt1[k], self.nt2[k],
                                          nu1, nu2)
        out = {"K": K, "Kt": Kt, "IK": IK, "A": A, "F": F,
               "Delta": (m * dsig[0], m * dsig[1])}
        if self.alpha is not None:
            a = self.alpha[k]
            ac = a[:, None]
            out["Kp"] = (a * A[0] + self.beta1[k], a * A[1] + self.beta2[k])
            out["Ktp"] = (ac * F[0] + self.bt1[k] + self.bt1[k] * F[0],
                          ac * F[1] + self.bt2[k] + self.bt2[k] * F[1])
            out["pi"] = (a * dsig[0], a * dsig[1])
        return out


def _store(sol):
    st = sol.stored
    return st["y"], st["z1"], st["z2"], st["zt1"], st["zt2"]


def _ctx_with(prob, extra):
    def at(k):
        ctx = prob.base(k)
        for name, arr in extra.items():
            ctx.set(name, arr[k])
        return ctx
    return at


def solve_decouple_mn(prob: AdjointProblem, bundle: AdjointBundle | None = None) -> AdjointBundle:
    """-dm = {m[b_x + b_y m + b_z K + b_zt IK] + n_i A_i + [g_x + g_y m + g_z K + g_zt IK]
    + sum int nt_i F_i nu_i} dt - n dW - int nt dNt,  m_T = phi_x(x_T).

    m enters its own driver quadratically: within-step fixed point."""
    bundle = bundle or AdjointBundle()
    nu1, nu2 = prob.nu1, prob.nu2
    snap = prob.snap

    def drv(k, ctx, y, z1, z2, zt1, zt2):
        D = snap(k)
        A, F, K, Kt, IK = _decouple_terms(D, y, z1, z2, zt1, zt2, nu1, nu2)
        return (y * _lin(D["b"], y, K, IK) + z1 * A[0] + z2 * A[1] + _lin(D["g"], y, K, IK)
                + (zt1 * F[0]) @ nu1 + (zt2 * F[1]) @ nu2)

    sol = backward_lsmc(prob.ens, prob.base, lambda ctx: snap(prob.N)["phi_x"], drv, prob.basis,
                        active=prob.active, implicit=True, fp_sweeps=prob.fp_sweeps,
                        fp_tol=prob.fp_tol, label="m", store=True, features=prob.features)
    bundle.m, bundle.n1, bundle.n2, bundle.nt1, bundle.nt2 = _store(sol)
    bundle.info.update(nu1=nu1, nu2=nu2, m_sol=sol, sup_abs_m=float(np.max(np.abs(bundle.m))))
    return bundle


def _lterm(D, m, K, IK, Kp, Ktp, nu1, nu2):
    L = D["l"]
    return (_lin(L, m, K, IK) + L["k1"] * Kp[0] + L["k2"] * Kp[1]
            + (L["kt1"] * Ktp[0]) @ nu1 + (L["kt2"] * Ktp[1]) @ nu2)


def solve_decouple_alphabeta(prob: AdjointProblem, bundle: AdjointBundle) -> AdjointBundle:
    """-d alpha = {alpha[b_x + b_y m + b_z K + b_zt IK] + beta_i A_i + int bt_i F_i nu_i
    + l_x + l_y m + l_z K + l_zt IK + l_k K' + sum_j l_kt,j K'~_j nu_j} dt - beta dW - int bt dNt,
    alpha_T = phi_term,x(x_T, y0)."""
    if bundle.m is None:
        raise AdjointError("solve (m, n) first")
    nu1, nu2 = prob.nu1, prob.nu2
    snap = prob.snap
    B = bundle

    def drv(k, ctx, y, z1, z2, zt1, zt2):
        D = snap(k)
        m = B.m[k]
        A, F, K, Kt, IK = _decouple_terms(D, m, B.n1[k], B.n2[k], B.nt1[k], B.nt2[k], nu1, nu2)
        yc = y[:, None]
        Kp = (y * A[0] + z1, y * A[1] + z2)
        Ktp = (yc * F[0] + zt1 + zt1 * F[0], yc * F[1] + zt2 + zt2 * F[1])
        return (y * _lin(D["b"], m, K, IK) + z1 * A[0] + z2 * A[1]
                + (zt1 * F[0]) @ nu1 + (zt2 * F[1]) @ nu2 + _lterm(D, m, K, IK, Kp, Ktp, nu1, nu2))

    sol = backward_lsmc(prob.ens, prob.base, lambda ctx: snap(prob.N)["pt_x"], drv, prob.basis,
                        active=prob.active, implicit=True, fp_sweeps=prob.fp_sweeps,
                        fp_tol=prob.fp_tol, label="alpha", store=True, features=prob.features)
    B.alpha, B.beta1, B.beta2, B.bt1, B.bt2 = _store(sol)
    B.info["alpha_sol"] = sol
    return B


def solve_adjoint_r(prob: AdjointProblem, bundle: AdjointBundle) -> AdjointBundle:
    """dr = r_- [l_k1 dW1 + l_k2 dW2 + int l_kt dNt], r_0 = 1, stepped in
    Doleans-Dade form: exp{l_k dW - l_k^2 dt/2} prod (1 + l_kt)^dN exp{-sum l_kt nu dt}."""
    ens = prob.ens
    N, n, dt = prob.N, prob.n, ens.grid.dt
    nu1, nu2 = prob.nu1, prob.nu2
    r = np.empty((N + 1, n))
    r[0] = 1.0
    nonpos = 0
    for k, s in ens.steps():
        L = prob.snap(k)["l"]
        a1, a2 = L["k1"], L["k2"]
        j1, j2 = 1.0 + L["kt1"], 1.0 + L["kt2"]
        hit = ((s.dN1 > 0) & (j1 <= 0)).any(axis=1) | ((s.dN2 > 0) & (j2 <= 0)).any(axis=1)
        nonpos += int(np.count_nonzero(hit))
        jf = np.prod(np.where(s.dN1 > 0, j1 ** s.dN1, 1.0), axis=1) * \
            np.prod(np.where(s.dN2 > 0, j2 ** s.dN2, 1.0), axis=1)
        r[k + 1] = r[k] * np.exp(a1 * s.dW1 + a2 * s.dW2 - 0.5 * (a1 * a1 + a2 * a2) * dt
                                 - (L["kt1"] @ nu1 + L["kt2"] @ nu2) * dt) * jf
    if nonpos:
        warnings.warn(f"adjoint r lost positivity on {nonpos} jump events", RuntimeWarning)
    bundle.r = r
    bundle.info["r_nonpositive_events"] = nonpos
    bundle.info["r_T_mean"] = float(r[N].mean())
    bundle.info["r_T_stderr"] = float(r[N].std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return bundle


def _forward_s(prob, B, s0, p_arr, q):
    """ds = {r l_y + s g_y + p b_y + q_i sigma_iy + int qt f_y nu} dt
    + {r l_zi + s g_zi + p b_zi} dW_i + int {r l_zti + s g_zti + p b_zti} dNt_i."""
    ens = prob.ens
    N, n, dt = prob.N, prob.n, ens.grid.dt
    nu1, nu2 = prob.nu1, prob.nu2
    s = np.empty((N + 1, n))
    s[0] = s0
    q1, q2, qt1, qt2 = q
    for k, st in ens.steps():
        D = prob.snap(k)
        L, G, Bb = D["l"], D["g"], D["b"]
        r, sk, p = B.r[k], s[k], p_arr[k]
        drift = (r * L["y"] + sk * G["y"] + p * Bb["y"] + q1[k] * D["s1"]["y"] + q2[k] * D["s2"]["y"]
                 + (qt1[k] * D["f1"]["y"]) @ nu1 + (qt2[k] * D["f2"]["y"]) @ nu2)
        c = [r * L[z] + sk * G[z] + p * Bb[z] for z in Z_KEYS]
        s[k + 1] = (sk + drift * dt + c[0] * st.dW1 + c[1] * st.dW2
                    + c[2] * st.dNt1.sum(axis=1) + c[3] * st.dNt2.sum(axis=1))
    return s


def solve_adjoint_spq(prob: AdjointProblem, bundle: AdjointBundle, max_iters=20, tol=1e-12,
                      reg_features=None) -> AdjointBundle:
    """Coupled pair: s forward from s_0 = E[r_T phi_term,y], p backward with
    -dp = {r l_x + s g_x + p b_x + q_i sigma_ix + int qt f_x nu} dt - q dW - int qt dNt,
    p_T = r_T phi_term,x + s_T phi_x; alternated to a fixed point."""
    B = bundle
    if B.r is None:
        raise AdjointError("solve r first")
    N, n = prob.N, prob.n
    nu1, nu2 = prob.nu1, prob.nu2
    K1, K2 = prob.ens.marks1.K, prob.ens.marks2.K
    T = prob.snap(N)
    s0 = float(np.mean(B.r[N] * T["pt_y"]))
    feats = tuple(reg_features or prob.features + ("r", "s"))
    p_arr = np.zeros((N + 1, n))
    q = (np.zeros((N + 1, n)), np.zeros((N + 1, n)), np.zeros((N + 1, n, K1)), np.zeros((N + 1, n, K2)))
    hist = []
    prev = None
    bad = 0
    sol = None
    s = None
    for j in range(max_iters):
        s = _forward_s(prob, B, s0, p_arr, q)
        ctx_at = _ctx_with(prob, {"r": B.r, "s": s})

        def drv(k, ctx, y, z1, z2, zt1, zt2, s=s):
            D = prob.snap(k)
            return (B.r[k] * D["l"]["x"] + s[k] * D["g"]["x"] + y * D["b"]["x"]
                    + z1 * D["s1"]["x"] + z2 * D["s2"]["x"]
                    + (zt1 * D["f1"]["x"]) @ nu1 + (zt2 * D["f2"]["x"]) @ nu2)

        def term(ctx, s=s):
            return B.r[N] * T["pt_x"] + s[N] * T["phi_x"]

        sol = backward_lsmc(prob.ens, ctx_at, term, drv, prob.basis.with_features(feats),
                            active=prob.active, label="p", store=True, features=feats)
        p_arr, q1, q2, qt1, qt2 = _store(sol)
        q = (q1, q2, qt1, qt2)
        cur = np.concatenate([s.ravel(), p_arr.ravel()])
        if prev is not None:
            gap = float(np.mean((cur - prev) ** 2))
            ratio = gap / hist[-1]["gap"] if hist and hist[-1]["gap"] else None
            hist.append({"iter": j, "gap": gap, "ratio": ratio})
            if ratio is not None and ratio >= 1.0 and gap > tol:
                bad += 1
                if bad >= 3:
                    raise AdjointError("(s, p) Picard alternation is not contracting")
            else:
                bad = 0
            if gap <= tol:
                break
        else:
            hist.append({"iter": 0, "gap": None, "ratio": None})
        prev = cur
    B.s, B.p = s, p_arr
    B.q1, B.q2, B.qt1, B.qt2 = q
    B.info.update(s0=s0, spq_picard=hist, p_sol=sol)
    return B


def _qform(H, vec):
    out = 0.0
    keys = list(vec)
    for a in keys:
        for c in keys:
            h = H.get((a, c), 0.0)
            if np.any(np.asarray(h) != 0):
                out = out + h * vec[a] * vec[c]
    return out


def second_order_terms(D, B: AdjointBundle, k, nu1, nu2):
    """r Th1 D2l Th1' + s Th2 D2g Th2' + p Th2 D2b Th2' + q_i Th3 D2sigma_i Th3'
    + int qt_i Th3 D2f_i Th3' nu_i, with the l jump entries taken per atom."""
    d = B.derived(k, D)
    m = B.m[k]
    K, IK, Kp, Ktp = d["K"], d["IK"], d["Kp"], d["Ktp"]
    th2 = {"x": 1.0, "y": m, "z1": K[0], "z2": K[1], "zt1": IK[0], "zt2": IK[1]}
    th3 = {"x": 1.0, "y": m}
    lh = D["lh"]
    th1 = dict(th2, k1=Kp[0], k2=Kp[1])
    ql = _qform(lh, th1)
    jl = ((lh[("kt1", "kt1")] * Ktp[0] ** 2) @ nu1 + (lh[("kt2", "kt2")] * Ktp[1] ** 2) @ nu2
          + 2.0 * (lh[("x", "kt2")] * Ktp[1]) @ nu2)
    qf1 = D["f1h"][("x", "x")] + 2.0 * D["f1h"][("x", "y")] * m[:, None] + D["f1h"][("y", "y")] * m[:, None] ** 2
    qf2 = D["f2h"][("x", "x")] + 2.0 * D["f2h"][("x", "y")] * m[:, None] + D["f2h"][("y", "y")] * m[:, None] ** 2
    return (B.r[k] * (ql + jl) + B.s[k] * _qform(D["gh"], th2) + B.p[k] * _qform(D["bh"], th2)
            + B.q1[k] * _qform(D["s1h"], th3) + B.q2[k] * _qform(D["s2h"], th3)
            + (B.qt1[k] * qf1) @ nu1 + (B.qt2[k] * qf2) @ nu2), d


def solve_adjoint_PQ(prob: AdjointProblem, bundle: AdjointBundle, reg_features=None) -> AdjointBundle:
    """-dP = {second-order terms + 2P[b_x + b_y m + b_z K + b_zt IK] + P sum A_i^2 + 2 Q_i A_i
    + int P F^2 nu + int Qt (2F + F^2) nu} dt - Q dW - int Qt dNt,
    P_T = r_T phi_term,xx + s_T phi_xx."""
    B = bundle
    if B.p is None or B.alpha is None:
        raise AdjointError("solve the first-order adjoints first")
    N = prob.N
    nu1, nu2 = prob.nu1, prob.nu2
    T = prob.snap(N)
    feats = tuple(reg_features or prob.features + ("r", "s"))
    ctx_at = _ctx_with(prob, {"r": B.r, "s": B.s})

    def drv(k, ctx, y, z1, z2, zt1, zt2):
        D = prob.snap(k, second=True)
        so, d = second_order_terms(D, B, k, nu1, nu2)
        A, F = d["A"], d["F"]
        lin = _lin(D["b"], B.m[k], d["K"], d["IK"])
        return (so + 2.0 * y * lin + y * (A[0] ** 2 + A[1] ** 2) + 2.0 * (z1 * A[0] + z2 * A[1])
                + (y[:, None] * F[0] ** 2) @ nu1 + (y[:, None] * F[1] ** 2) @ nu2
                + (zt1 * (2.0 * F[0] + F[0] ** 2)) @ nu1 + (zt2 * (2.0 * F[1] + F[1] ** 2)) @ nu2)

    def term(ctx):
        return B.r[N] * T["pt_xx"] + B.s[N] * T["phi_xx"]

    sol = backward_lsmc(prob.ens, ctx_at, term, drv, prob.basis.with_features(feats),
                        active=prob.active, label="P", store=True, features=feats)
    B.P, B.Q1, B.Q2, B.Qt1, B.Qt2 = _store(sol)
    B.info["P_sol"] = sol
    return B


def solve_all_adjoints(prob: AdjointProblem) -> AdjointBundle:
    B = solve_decouple_mn(prob)
    solve_decouple_alphabeta(prob, B)
    solve_adjoint_r(prob, B)
    solve_adjoint_spq(prob, B)
    solve_adjoint_PQ(prob, B)
    return B


def boundary_conditions(prob: AdjointProblem, B: AdjointBundle) -> dict:
    """Max violation of each terminal/initial condition over all paths."""
    N = prob.N
    T = prob.snap(N)
    out = {"m_T": float(np.max(np.abs(B.m[N] - T["phi_x"]))),
           "alpha_T": float(np.max(np.abs(B.alpha[N] - T["pt_x"]))),
           "r_0": float(np.max(np.abs(B.r[0] - 1.0)))}
    if B.s is not None:
        out["s_0"] = float(np.max(np.abs(B.s[0] - np.mean(B.r[N] * T["pt_y"]))))
        out["p_T"] = float(np.max(np.abs(B.p[N] - (B.r[N] * T["pt_x"] + B.s[N] * T["phi_x"]))))
    if B.P is not None:
        out["P_T"] = float(np.max(np.abs(B.P[N] - (B.r[N] * T["pt_xx"] + B.s[N] * T["phi_xx"]))))
    return out


def identity_check(prob: AdjointProblem, B: AdjointBundle, n_probes=20, seed=0) -> float:
    """Re-verify K, K', Delta, pi against their defining formulas at random
    (node, path) probes; returns the max absolute mismatch."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in rng.integers(0, prob.N, size=n_probes):
        D = prob.snap(int(k))
        dsig = tuple(rng.normal(size=2))
        d = B.derived(int(k), D, dsig)
        i = int(rng.integers(0, prob.n))
        m, a = B.m[k][i], B.alpha[k][i]
        for j, (s, nn, bb) in enumerate(((D["s1"], B.n1, B.beta1), (D["s2"], B.n2, B.beta2))):
            A = s["x"][i] + s["y"][i] * m
            worst = max(worst, abs(d["K"][j][i] - (m * A + nn[k][i])),
                        abs(d["Kp"][j][i] - (a * A + bb[k][i])),
                        abs(d["Delta"][j][i] - m * dsig[j]), abs(d["pi"][j][i] - a * dsig[j]))
    return float(worst)


# --------------------------------------------------------------------------
# Hamiltonian


def hamiltonian(state: StatePath, B: AdjointBundle, k, u, snap=None) -> np.ndarray:
    """H at node k for the alternative control value u (scalar or per path)."""
    m_ = state.model
    dc = state.dc
    snap = snap or DerivativeSnapshot(state)
    D = snap(k)
    ctx = state.node(k)
    th = state.theta(ctx)
    thu = th.replace(u=u)
    s1b, s2b = m_.sigma1(th), m_.sigma2(th)
    s1u, s2u = m_.sigma1(thu), m_.sigma2(thu)
    ds = (s1u - s1b, s2u - s2b)
    m, al = B.m[k], B.alpha[k]
    r, s, p = B.r[k], B.s[k], B.p[k]
    D1, D2 = m * ds[0], m * ds[1]
    pi1, pi2 = al * ds[0], al * ds[1]
    thD = thu.replace(z1=th.z1 + D1, z2=th.z2 + D2)
    kap = Kappa(ctx["k1"] + pi1, ctx["k2"] + pi2, ctx["kt1"], ctx["kt2"])
    L, G, Bb = D["l"], D["g"], D["b"]
    br1 = B.q1[k] - (p * Bb["z1"] + s * G["z1"] + r * L["z1"]) * m - r * L["k1"] * al
    br2 = B.q2[k] - (p * Bb["z2"] + s * G["z2"] + r * L["z2"]) * m - r * L["k2"] * al
    H = (0.5 * B.P[k] * (ds[0] ** 2 + ds[1] ** 2) + p * dc.b(thD) + br1 * s1u + br2 * s2u
         + s * m_.g(thD) + r * dc.l(thD, kap))
    return np.broadcast_to(np.asarray(H, dtype=float), (state.n,))


def hamiltonian_gap(state, B, k, u, snap=None):
    """H(u) - H(u_bar) at node k."""
    snap = snap or DerivativeSnapshot(state)
    ub = state.control(k)
    return hamiltonian(state, B, k, u, snap) - hamiltonian(state, B, k, ub, snap)


# --------------------------------------------------------------------------
# candidate pipeline


def solve_candidate(model, ens, policy=None, basis=None, adjoint_basis=None, trunc=None,
                    features=None) -> tuple:
    """State, zeta and all adjoints along the trajectory of ``policy``."""
    basis = basis or RegressionBasis(("x", "aux") if model.aux is not None else ("x",), degree=3)
    state = solve_state(model, ens, policy, basis)
    solve_qexp(state, basis, trunc)
    prob = AdjointProblem.from_state(state, adjoint_basis, features)
    B = solve_all_adjoints(prob)
    return state, prob, B


def observation_features(state: StatePath, k, lag):
    Y = state.Y
    if Y is None:
        raise ConfigError("observation path not stored; rerun with keep_Y=True")
    return np.stack([Y[k], Y[k] - Y[max(k - lag, 0)]], axis=1)


def optimal_condition_scan(state: StatePath, B: AdjointBundle, every=10, lag=10, degree=2,
                           tol=5e-3, snap=None) -> dict:
    """Regress H(u) - H(u_bar) on observation features at scan nodes and
    report the worst fitted conditional mean over (t, u, path)."""
    m = state.model
    snap = snap or DerivativeSnapshot(state)
    basis = RegressionBasis(("Y", "dY"), degree=degree)
    rows = []
    N = state.grid.n_steps
    for k in range(0, N, max(1, int(every))):
        F = observation_features(state, k, lag)
        des = basis.prepare(F)
        ub = state.control(k)
        Hb = hamiltonian(state, B, k, ub, snap)
        for u in m.U:
            gap = hamiltonian(state, B, k, u, snap) - Hb
            if np.ptp(gap) == 0:
                fit = np.full(state.n, float(gap[0]))
            else:
                fit = des.fitted(des.solve(gap))[:, 0]
            se = float(gap.std(ddof=1) / math.sqrt(gap.size)) if gap.size > 1 else 0.0
            rows.append({"t": state.grid.t(k), "node": k, "u": float(u), "residual": float(fit.min()),
                         "mean": float(gap.mean()), "stderr": se,
                         "q01": float(np.quantile(fit, 0.01))})
    worst = min(rows, key=lambda r: r["residual"])
    return {"rows": rows, "min_residual": worst["residual"], "argmin": {"t": worst["t"], "u": worst["u"]},
            "improving_u": worst["u"] if worst["residual"] < -tol else None,
            "tol": tol, "pass": bool(worst["residual"] >= -tol),
            "features": ["Y_t", f"Y_t - Y_t-{lag}dt"], "degree": degree}


def mp_check(model, ens, policy=None, basis=None, scan=None) -> dict:
    state, prob, B = solve_candidate(model, ens, policy, basis)
    rep = optimal_condition_scan(state, B, **(scan or {}))
    rep["boundary"] = boundary_conditions(prob, B)
    rep["identities_max_err"] = identity_check(prob, B)
    rep["zeta0"] = float(state.zeta_sol.y0)
    rep["adjoint_means"] = {k: float(getattr(B, k)[0].mean()) for k in ("m", "alpha", "r", "s", "p", "P")}
    return rep


# --------------------------------------------------------------------------
# spike variation


class SpikePolicy(ControlPolicy):
    """u on [t_bar, t_bar + eps) except at steps where the path has a jump
    event on a driver listed in ``skip``; the baseline elsewhere."""

    def __init__(self, base: ControlPolicy, u, t_bar, eps, ens, skip=(True, True)):
        self.base = base
        self.kind = "spike"
        self.needs_noise = True
        self.U = base.U
        self.u = float(u)
        self.t_bar = float(t_bar)
        self.eps = float(eps)
        self.ens = ens
        self.skip = skip
        self.params = {"u": self.u, "t_bar": self.t_bar, "eps": self.eps}
        dt = ens.grid.dt
        self.k0 = int(round(t_bar / dt))
        self.k1 = self.k0 + max(1, int(round(eps / dt)))
        if self.k1 > ens.grid.n_steps:
            raise ConfigError("spike window extends past the horizon")

    @property
    def path_dependent(self):
        return self.base.path_dependent

    def in_window(self, k):
        return self.k0 <= k < self.k1

    def jump_mask(self, s):
        hit = np.zeros(self.ens.n_paths, dtype=bool)
        if self.skip[0]:
            hit |= s.dN1.sum(axis=1) > 0
        if self.skip[1]:
            hit |= s.dN2.sum(axis=1) > 0
        return hit

    def __call__(self, k, t, Yhist=None, noise=None):
        ub = self.base(k, t, Yhist, noise)
        if not self.in_window(k):
            return ub
        s = noise if noise is not None else self.ens.step(k)
        return np.where(self.jump_mask(s), ub, self.u)

    def describe(self):
        return {"kind": "spike", "base": self.base.describe(), **self.params}


def _slope(x, y):
    x, y = np.log(np.asarray(x)), np.log(np.asarray(y))
    A = np.stack([x, np.ones_like(x)], axis=1)
    c = np.linalg.lstsq(A, y, rcond=None)[0]
    return float(c[0])


def spike_variation_experiment(model, ens, u, t_bar=0.25, eps_ladder=None, base=None, basis=None,
                               predictor=True, noise_window=0.3, band_z=3.0) -> dict:
    """Delta J(eps) = zeta0(u^eps) - zeta0(u_bar) on shared noise, the
    first-order predictor sum_k E[H(u) - H(u_bar)] 1_window dt, and the
    state-gap order E[sup |x^eps - x_bar|^2]."""
    eps_ladder = list(eps_ladder or [2.0 ** -j for j in range(3, 8)])
    if any(b >= a for a, b in zip(eps_ladder, eps_ladder[1:])):
        raise ConfigError("eps ladder must be strictly decreasing")
    base = base or model.default_policy or ControlPolicy("constant", value=model.U[0])
    basis = basis or RegressionBasis(("x", "aux") if model.aux is not None else ("x",), degree=3)
    skip = (bool(model.active[2]), bool(model.active[3]))
    bar = solve_state(model, ens, base, basis)
    solve_qexp(bar, basis)
    snap = B = None
    if predictor:
        prob = AdjointProblem.from_state(bar)
        snap = prob.snap
        B = solve_all_adjoints(prob)
    z_bar = bar.zeta_sol
    dt = ens.grid.dt
    rows = []
    for eps in eps_ladder:
        pol = SpikePolicy(base, u, t_bar, eps, ens, skip)
        st = solve_state(model, ens, pol, basis)
        solve_qexp(st, basis)
        dJ = float(st.zeta_sol.y0 - z_bar.y0)
        d = st.zeta_sol.pathwise0 - z_bar.pathwise0
        se = float(d.std(ddof=1) / math.sqrt(d.size))
        gap2 = float(np.mean(np.max((st.x - bar.x) ** 2, axis=0)))
        jumped = np.zeros(ens.n_paths, dtype=bool)
        for k in range(pol.k0, pol.k1):
            jumped |= pol.jump_mask(ens.step(k))
        row = {"eps": eps, "dJ": dJ, "stderr": se, "sup_gap_sq": gap2,
               "jump_frac": float(jumped.mean()), "steps": pol.k1 - pol.k0}
        if predictor:
            pr = 0.0
            for k in range(pol.k0, pol.k1):
                mask = ~pol.jump_mask(ens.step(k))
                h = hamiltonian_gap(bar, B, k, u, snap)
                pr += float(np.mean(h * mask)) * dt
            row["predictor"] = pr
            row["dJ_minus_predictor"] = dJ - pr
        rows.append(row)
    dj = np.array([r["dJ"] for r in rows])
    se = np.array([r["stderr"] for r in rows])
    win = [i for i in range(len(rows)) if abs(dj[i]) > 0 and se[i] <= noise_window * abs(dj[i])]
    slope_J = _slope([rows[i]["eps"] for i in win], np.abs(dj[win])) if len(win) >= 2 else None
    gaps = np.array([r["sup_gap_sq"] for r in rows])
    slope_x = _slope(eps_ladder, gaps) if np.all(gaps > 0) else None
    mono = all(abs(dj[i + 1]) <= abs(dj[i]) + band_z * (se[i] + se[i + 1]) for i in range(len(rows) - 1))
    nonneg = bool(np.all(dj >= -band_z * se))
    return {"u": float(u), "t_bar": t_bar, "rows": rows, "slope_dJ": slope_J, "fit_window": win,
            "slope_sup_gap_sq": slope_x, "inconclusive": not mono, "nonnegative_within_band": nonneg,
            "zeta0_bar": float(z_bar.y0), "policy": base.describe()}
