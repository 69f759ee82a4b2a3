"""Model coefficients, the assembled drift/generator pair, policies and the
built-in model registry.

Coefficients are plain callables of a :class:`Theta` argument bundle with
mandatory gradient and Hessian callbacks.  Variables of the backward triple
enter through ``Theta`` as x, y, z1, z2, zt1, zt2 where ``zt_i`` is the
nu_i-integral of the jump integrand.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ModelError, RegistrationError
from .kernel import MarkSpace, TimeGrid

THETA_VARS = ("x", "y", "z1", "z2", "zt1", "zt2")
XY = ("x", "y")


class Theta:
    """Argument bundle (t, x, y, z1, z2, zt1, zt2, u, aux)."""
    __slots__ = ("t", "x", "y", "z1", "z2", "zt1", "zt2", "u", "aux")

    def __init__(self, t=0.0, x=0.0, y=0.0, z1=0.0, z2=0.0, zt1=0.0, zt2=0.0, u=0.0, aux=0.0):
        self.t, self.x, self.y = t, x, y
        self.z1, self.z2, self.zt1, self.zt2 = z1, z2, zt1, zt2
        self.u, self.aux = u, aux

    def replace(self, **kw):
        d = {s: getattr(self, s) for s in self.__slots__}
        d.update(kw)
        return Theta(**d)

    def get(self, v):
        return getattr(self, v)


def _ev(c, th, *a):
    return c(th, *a) if callable(c) else c


def _sym(d):
    out = {}
    for (a, b), v in d.items():
        out[(a, b)] = v
        out[(b, a)] = v
    return out


class Coef:
    """Scalar coefficient with value, gradient and Hessian callbacks."""

    def __init__(self, name, value, grad, hess, vars=THETA_VARS):
        if grad is None or hess is None:
            raise RegistrationError(f"coefficient {name}: derivative callbacks are mandatory")
        self.name, self._value, self._grad, self._hess = name, value, grad, hess
        self.vars = tuple(vars)

    def __call__(self, th):
        return self._value(th)

    def grad(self, th) -> dict:
        g = self._grad(th)
        return {v: g.get(v, 0.0) for v in self.vars}

    def hess(self, th) -> dict:
        h = _sym(self._hess(th))
        return {(a, b): h.get((a, b), 0.0) for a in self.vars for b in self.vars}


class MarkCoef(Coef):
    """Per-atom coefficient: callbacks take (th, e) and return (..., K)."""

    def __call__(self, th, e):
        return self._value(th, e)

    def grad(self, th, e) -> dict:
        g = self._grad(th, e)
        return {v: g.get(v, 0.0) for v in self.vars}

    def hess(self, th, e) -> dict:
        h = _sym(self._hess(th, e))
        return {(a, b): h.get((a, b), 0.0) for a in self.vars for b in self.vars}


def linear(name, const=0.0, vars=THETA_VARS, **slopes) -> Coef:
    """const + sum_v slope_v * v; const and slopes may be callables of Theta."""
    bad = set(slopes) - set(vars)
    if bad:
        raise RegistrationError(f"{name}: slopes for unknown variables {sorted(bad)}")

    def val(th):
        out = _ev(const, th)
        for v, c in slopes.items():
            out = out + _ev(c, th) * th.get(v)
        return out

    return Coef(name, val, lambda th: {v: _ev(c, th) for v, c in slopes.items()},
                lambda th: {}, vars)


def mark_linear(name, const=0.0, vars=XY, **slopes) -> MarkCoef:
    """Per-atom affine coefficient: const(th, e) + sum_v slope_v(th, e) * v."""

    def col(v, th):
        return np.asarray(th.get(v), dtype=float)[..., None]

    def val(th, e):
        out = np.asarray(_ev(const, th, e), dtype=float) + 0.0 * np.asarray(e, dtype=float)
        for v, c in slopes.items():
            out = out + np.asarray(_ev(c, th, e)) * col(v, th)
        return out

    def grad(th, e):
        z = 0.0 * np.asarray(e, dtype=float)
        return {v: np.asarray(_ev(c, th, e)) + z for v, c in slopes.items()}

    return MarkCoef(name, val, grad, lambda th, e: {}, vars)


def const_mark(name, value) -> MarkCoef:
    return mark_linear(name, const=value)


@dataclass(frozen=True)
class AuxProcess:
    """Exogenous scalar factor carried alongside x.

    d aux = drift(t, aux) dt + d1 dW1 + d2 dW2 + sum_j jump{1,2}_j dNt{1,2}_j
    (coefficients already expressed under the simulation measure).
    """
    x0: float
    drift: object
    d1: float = 0.0
    d2: float = 0.0
    jump1: tuple = ()
    jump2: tuple = ()


@dataclass
class ModelSpec:
    name: str
    theta: float
    U: tuple
    x0: float
    grid: TimeGrid
    marks1: MarkSpace
    marks2: MarkSpace
    b1: Coef
    sigma1: Coef
    sigma2: Coef
    f1: MarkCoef
    f2: MarkCoef
    g: Coef
    phi: Coef
    b2: Coef
    sigma3: object
    f3: object
    lam: MarkCoef
    ltilde: Coef
    phi_term: Coef
    l_low: float = 0.1
    aux: AuxProcess | None = None
    active: tuple = (True, True, True, True)
    solve_y: bool = True
    coupled: bool = False
    params: dict = field(default_factory=dict)
    note: str = ""
    probe_box: dict = field(default_factory=dict)
    qexp_bounds: object = None  # (alpha(t), beta) of the structure condition, if known
    default_policy: object = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise ConfigError(f"risk parameter theta must be > 0, got {self.theta}")
        if not (0 < self.l_low < 1):
            raise ConfigError("l_low must lie in (0, 1)")
        if len(self.U) < 1:
            raise ConfigError("control set U is empty")
        self.U = tuple(float(u) for u in self.U)
        s3 = self.sigma3(0.0)
        if not np.isfinite(s3) or s3 == 0:
            raise ConfigError("sigma3 must be invertible")
        for c, kind in ((self.b1, Coef), (self.g, Coef), (self.b2, Coef), (self.ltilde, Coef),
                        (self.sigma1, Coef), (self.sigma2, Coef), (self.phi, Coef),
                        (self.phi_term, Coef), (self.f1, MarkCoef), (self.f2, MarkCoef),
                        (self.lam, MarkCoef)):
            if not isinstance(c, kind):
                raise RegistrationError(f"{getattr(c, 'name', c)} must be a {kind.__name__}")

    def with_params(self, **kw):
        return replace(self, **kw)

    def check_lambda(self, lam):
        lam = np.asarray(lam)
        if np.any(lam < self.l_low - 1e-12) or np.any(lam > 1.0 + 1e-12):
            lo, hi = float(lam.min()), float(lam.max())
            raise ModelError(f"lambda outside [{self.l_low}, 1]: range [{lo:.4g}, {hi:.4g}]")
        return lam


# --------------------------------------------------------------------------
# assembled (b, l)


@dataclass
class TruncationPolicy:
    kmax: float = 10.0
    warn_frac: float = 0.01
    fail_frac: float = 0.25
    activations: int = 0
    evaluations: int = 0

    def __post_init__(self):
        if not self.kmax > 0:
            raise ConfigError("truncation cap must be > 0")

    def clamp(self, v):
        v = np.asarray(v, dtype=float)
        c = np.clip(v, -self.kmax, self.kmax)
        self.activations += int(np.count_nonzero(c != v))
        self.evaluations += int(v.size)
        return c

    @property
    def fraction(self):
        return self.activations / self.evaluations if self.evaluations else 0.0

    def reset(self):
        self.activations = self.evaluations = 0


@dataclass
class Kappa:
    k1: object = 0.0
    k2: object = 0.0
    kt1: object = 0.0  # (n, K1)
    kt2: object = 0.0  # (n, K2)


L_VARS = THETA_VARS + ("k1", "k2")


class DerivedCoefficients:
    """b = b1 - sigma2 sigma3^-1 b2 - int (lam-1) f2 nu2 and the generator l."""

    def __init__(self, model: ModelSpec, trunc: TruncationPolicy | None = None):
        self.m = model
        self.trunc = trunc if trunc is not None else TruncationPolicy()
        self.e1 = model.marks1.e
        self.e2 = model.marks2.e
        self.nu1 = model.marks1.nu
        self.nu2 = model.marks2.nu

    # ---- drift b
    def c(self, th):
        """sigma3^-1 b2: drift shift of W2 between the two measures."""
        return self.m.b2(th) / self.m.sigma3(th.t)

    def lam(self, th):
        return self.m.lam(th, self.e2)

    def b(self, th):
        m = self.m
        lam = self.lam(th)
        return (m.b1(th) - m.sigma2(th) * self.c(th)
                - ((lam - 1.0) * m.f2(th, self.e2)) @ self.nu2)

    def b_grad(self, th):
        m = self.m
        s3 = m.sigma3(th.t)
        gb1, gb2 = m.b1.grad(th), m.b2.grad(th)
        gs2 = m.sigma2.grad(th)
        gl = m.lam.grad(th, self.e2)
        gf2 = m.f2.grad(th, self.e2)
        s2, b2 = m.sigma2(th), m.b2(th)
        lam, f2 = self.lam(th), m.f2(th, self.e2)
        out = {}
        for v in THETA_VARS:
            d = gb1[v] - (gs2.get(v, 0.0) * b2 + s2 * gb2[v]) / s3
            if v in XY:
                dl = gl.get(v, 0.0)
                d = d - ((dl * f2 + (lam - 1.0) * gf2[v]) @ self.nu2)
            out[v] = d
        return out

    def b_hess(self, th):
        m = self.m
        s3 = m.sigma3(th.t)
        hb1, hb2 = m.b1.hess(th), m.b2.hess(th)
        gb2 = m.b2.grad(th)
        gs2, hs2 = m.sigma2.grad(th), m.sigma2.hess(th)
        s2, b2 = m.sigma2(th), m.b2(th)
        lam, f2 = self.lam(th), m.f2(th, self.e2)
        gl, hl = m.lam.grad(th, self.e2), m.lam.hess(th, self.e2)
        gf2, hf2 = m.f2.grad(th, self.e2), m.f2.hess(th, self.e2)
        out = {}
        for a in THETA_VARS:
            for c in THETA_VARS:
                d = hb1[(a, c)] - (hs2.get((a, c), 0.0) * b2 + gs2.get(a, 0.0) * gb2[c]
                                   + gs2.get(c, 0.0) * gb2[a] + s2 * hb2[(a, c)]) / s3
                if a in XY and c in XY:
                    la, lc = gl.get(a, 0.0), gl.get(c, 0.0)
                    lac = hl.get((a, c), 0.0)
                    d = d - ((lac * f2 + la * gf2[c] + lc * gf2[a]
                              + (lam - 1.0) * hf2[(a, c)]) @ self.nu2)
                out[(a, c)] = d
        return out

    # ---- generator l
    def _exp(self, kt):
        return np.exp(self.m.theta * self.trunc.clamp(kt))

    def l(self, th, kap: Kappa):
        m, th_ = self.m, self.m.theta
        kt1 = np.asarray(kap.kt1, dtype=float)
        kt2 = np.asarray(kap.kt2, dtype=float)
        e1, e2 = self._exp(kt1), self._exp(kt2)
        ck1 = self.trunc.clamp(kt1) if kt1.size else kt1
        ck2 = self.trunc.clamp(kt2) if kt2.size else kt2
        # clamp counted once above through _exp; undo the double count
        self.trunc.evaluations -= kt1.size + kt2.size
        self.trunc.activations -= int(np.count_nonzero(ck1 != kt1)) + int(np.count_nonzero(ck2 != kt2))
        lam = self.lam(th)
        br = ((e1 - th_ * ck1 - 1.0) @ self.nu1 + (e2 - th_ * ck2 - 1.0) @ self.nu2) / th_
        return (m.ltilde(th) + 0.5 * th_ * (kap.k1 ** 2 + kap.k2 ** 2) + br
                + self.c(th) * kap.k2 + ((lam - 1.0) * (e2 - 1.0)) @ self.nu2)

    def l_grad(self, th, kap: Kappa):
        """Gradient in Theta, k1, k2 and per-atom densities 'kt1', 'kt2'
        (derivative w.r.t. kt_j divided by nu_j)."""
        m, th_ = self.m, self.m.theta
        s3 = m.sigma3(th.t)
        gl = m.ltilde.grad(th)
        gb2 = m.b2.grad(th)
        e1 = self._exp(np.asarray(kap.kt1, dtype=float))
        e2 = self._exp(np.asarray(kap.kt2, dtype=float))
        lam = self.lam(th)
        glam = m.lam.grad(th, self.e2)
        out = {}
        for v in THETA_VARS:
            d = gl[v] + gb2[v] / s3 * kap.k2
            if v == "x":
                d = d + (glam["x"] * (e2 - 1.0)) @ self.nu2
            out[v] = d
        out["k1"] = th_ * kap.k1
        out["k2"] = th_ * kap.k2 + self.c(th)
        out["kt1"] = e1 - 1.0
        out["kt2"] = (e2 - 1.0) + (lam - 1.0) * th_ * e2
        return out

    def l_hess(self, th, kap: Kappa):
        """Second derivatives; per-atom entries are densities w.r.t. nu:
        ('kt1','kt1') diagonal (n,K1), ('x','kt2') (n,K2)."""
        m, th_ = self.m, self.m.theta
        s3 = m.sigma3(th.t)
        hl = m.ltilde.hess(th)
        hb2 = m.b2.hess(th)
        gb2 = m.b2.grad(th)
        e1 = self._exp(np.asarray(kap.kt1, dtype=float))
        e2 = self._exp(np.asarray(kap.kt2, dtype=float))
        lam = self.lam(th)
        glam = m.lam.grad(th, self.e2)
        hlam = m.lam.hess(th, self.e2)
        out = {}
        for a in THETA_VARS:
            for c in THETA_VARS:
                d = hl[(a, c)] + hb2[(a, c)] / s3 * kap.k2
                if a == "x" and c == "x":
                    d = d + (hlam[("x", "x")] * (e2 - 1.0)) @ self.nu2
                out[(a, c)] = d
            out[(a, "k2")] = out[("k2", a)] = gb2[a] / s3
            out[(a, "k1")] = out[("k1", a)] = 0.0
        out[("k1", "k1")] = out[("k2", "k2")] = th_
        out[("k1", "k2")] = out[("k2", "k1")] = 0.0
        out[("kt1", "kt1")] = th_ * e1
        out[("kt2", "kt2")] = th_ * e2 + (lam - 1.0) * th_ ** 2 * e2
        out[("x", "kt2")] = glam["x"] * th_ * e2
        return out


def assemble_derived(model: ModelSpec, trunc: TruncationPolicy | None = None) -> DerivedCoefficients:
    for c in (model.b1, model.g, model.b2, model.ltilde, model.sigma1, model.sigma2,
              model.phi, model.phi_term, model.f1, model.f2, model.lam):
        if getattr(c, "_grad", None) is None or getattr(c, "_hess", None) is None:
            raise RegistrationError(f"missing derivative callback for {c.name}")
    return DerivedCoefficients(model, trunc)


def qexp_bracket(theta, kt, nu):
    """(1/theta) sum_j [exp(theta kt_j) - 1 - theta kt_j] nu_j (last axis = atoms)."""
    kt = np.asarray(kt, dtype=float)
    x = theta * kt
    # expm1(x) - x loses digits for |x| << 1; switch to the series there
    small = np.abs(x) < 1e-3
    core = np.where(small, x * x / 2 + x ** 3 / 6 + x ** 4 / 24, np.expm1(x) - x)
    return (core / theta) @ np.asarray(nu, dtype=float)


# --------------------------------------------------------------------------
# derivative validation


def _fd_grad(fn, th, v, h):
    x0 = np.asarray(th.get(v), dtype=float)
    hp = h * (1.0 + np.abs(x0))
    return (fn(th.replace(**{v: x0 + hp})) - fn(th.replace(**{v: x0 - hp}))) / (2 * hp)


def validate_derivatives(model: ModelSpec, probe_points=None, tol=1e-6, h=1e-5, n_random=100, seed=0):
    """Compare gradient/Hessian callbacks with central differences."""
    if probe_points is None:
        probe_points = random_probes(model, n_random, seed)
    e1, e2 = model.marks1.e, model.marks2.e
    worst = {}

    def rel(a, b):
        a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
        return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))

    def check(label, fn, grad, hess, vars, th, loc):
        v0 = fn(th)
        if not np.all(np.isfinite(v0)):
            raise ModelError(f"{label} non-finite at probe {loc}")
        g = grad(th)
        H = hess(th)
        for v in vars:
            fd = _fd_grad(fn, th, v, h)
            key = f"{label}_{v}"
            worst[key] = max(worst.get(key, 0.0), rel(g[v], fd))
            for w in vars:
                fdh = _fd_grad(lambda t_: grad(t_)[w], th, v, h)
                key = f"{label}_{v}{w}"
                worst[key] = max(worst.get(key, 0.0), rel(H[(v, w)], fdh))

    ths = []
    for i, p in enumerate(probe_points):
        th = Theta(**p)
        ths.append(th)
        for c in (model.b1, model.g, model.b2, model.ltilde, model.sigma1, model.sigma2):
            check(c.name, c, c.grad, c.hess, c.vars, th, i)
        for c, e in ((model.f1, e1), (model.f2, e2), (model.lam, e2)):
            check(c.name, lambda t_, c=c, e=e: c(t_, e), lambda t_, c=c, e=e: c.grad(t_, e),
                  lambda t_, c=c, e=e: c.hess(t_, e), c.vars, th, i)
        for c in (model.phi, model.phi_term):
            check(c.name, c, c.grad, c.hess, c.vars, th, i)
    failing = sorted(k for k, v in worst.items() if v > tol)
    return {"max_rel_error": max(worst.values()) if worst else 0.0, "by_derivative": worst,
            "failing": failing, "pass": not failing, "n_probes": len(ths), "tol": tol}


def random_probes(model: ModelSpec, n=100, seed=0):
    rng = np.random.default_rng(seed)
    box = {"t": (0.0, model.grid.T), "x": (-1.0, 1.0), "y": (-1.0, 1.0), "z1": (-1.0, 1.0),
           "z2": (-1.0, 1.0), "zt1": (-0.5, 0.5), "zt2": (-0.5, 0.5), "aux": (-1.0, 1.0)}
    box.update(model.probe_box)
    out = []
    for _ in range(n):
        p = {k: float(rng.uniform(*v)) for k, v in box.items()}
        p["u"] = float(rng.choice(model.U))
        out.append(p)
    return out


# --------------------------------------------------------------------------
# control policies


class ControlPolicy:
    """u_k as a function of (t_k, observation path up to node k).

    kinds: 'constant' (value), 'piecewise' (times, values), 'feedback'
    (gain, offset, lag): u = nearest U element to offset + gain*Y_k
    (+ lag_gain * (Y_k - Y_{k-lag})).
    """

    def __init__(self, kind="constant", U=None, **params):
        if kind not in ("constant", "piecewise", "feedback"):
            raise ConfigError(f"unknown policy kind {kind}")
        self.kind = kind
        self.U = None if U is None else np.asarray(U, dtype=float)
        self.params = params
        if kind == "constant":
            self.value = float(params["value"])
        elif kind == "piecewise":
            self.times = np.asarray(params["times"], dtype=float)
            self.values = np.asarray(params["values"], dtype=float)
            if self.values.size != self.times.size + 1:
                raise ConfigError("piecewise policy needs len(values) == len(times) + 1")

    def _project(self, v):
        if self.U is None:
            return v
        idx = np.abs(np.asarray(v)[..., None] - self.U).argmin(axis=-1)
        return self.U[idx]

    def __call__(self, k, t, Yhist=None, noise=None):
        """Yhist: (k+1, n) observation values at nodes 0..k."""
        if self.kind == "constant":
            return self.value
        if self.kind == "piecewise":
            return float(self.values[np.searchsorted(self.times, t, side="right")])
        gain = self.params.get("gain", 1.0)
        off = self.params.get("offset", 0.0)
        lag = int(self.params.get("lag", 0))
        lg = self.params.get("lag_gain", 0.0)
        Yk = Yhist[k]
        v = off + gain * Yk
        if lag and lg:
            v = v + lg * (Yk - Yhist[max(k - lag, 0)])
        return self._project(v)

    @property
    def path_dependent(self):
        return self.kind == "feedback"

    def describe(self):
        return {"kind": self.kind, **{k: (list(v) if isinstance(v, (list, tuple, np.ndarray)) else v)
                                      for k, v in self.params.items()}}


def policy_from_config(d, U=None) -> ControlPolicy:
    d = dict(d)
    kind = d.pop("kind", "constant")
    return ControlPolicy(kind, U=U, **d)


# --------------------------------------------------------------------------
# built-in registry

REGISTRY = {}


def register(name, origin, doc, defaults):
    def deco(fn):
        REGISTRY[name] = {"builder": fn, "origin": origin, "doc": doc, "defaults": defaults}
        return fn
    return deco


def _marks(atoms, weights):
    return MarkSpace(tuple(atoms), tuple(weights))


def _grid(p):
    return TimeGrid(float(p["T"]), int(p["n_steps"]))


def _zero(name, vars=THETA_VARS):
    return linear(name, 0.0, vars)


def _merge(name, params):
    entry = REGISTRY.get(name)
    if entry is None:
        raise ConfigError(f"unknown model '{name}'; known: {sorted(REGISTRY)}")
    p = dict(entry["defaults"])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ConfigError(f"model '{name}': unknown parameters {sorted(unknown)}")
    p.update(params or {})
    for k, v in p.items():
        if isinstance(v, (list, tuple)):
            p[k] = tuple(float(a) for a in v)
        elif isinstance(v, bool) or v is None:
            pass
        elif isinstance(v, (int, float)):
            if not math.isfinite(float(v)):
                raise ConfigError(f"model '{name}': parameter {k} is not finite")
    return p


def builtin(name, params=None) -> ModelSpec:
    p = _merge(name, params)
    m = REGISTRY[name]["builder"](p)
    m.params = p
    return m


def list_models():
    return [{"name": k, "origin": v["origin"], "description": v["doc"],
             "parameters": {a: (list(b) if isinstance(b, tuple) else b) for a, b in v["defaults"].items()}}
            for k, v in sorted(REGISTRY.items())]


@register("gaussian", "invented test model",
          "dx = sigma dW1, no running cost, terminal cost x; closed-form risk-sensitive value",
          {"sigma": 1.0, "x0": 0.0, "theta": 0.5, "T": 1.0, "n_steps": 1000})
def _gaussian(p):
    sig = p["sigma"]
    return ModelSpec(
        name="gaussian", theta=p["theta"], U=(0.0,), x0=p["x0"], grid=_grid(p),
        marks1=_marks([1.0], [1.0]), marks2=_marks([1.0], [1.0]),
        b1=_zero("b1"), sigma1=linear("sigma1", sig, XY), sigma2=_zero("sigma2", XY),
        f1=const_mark("f1", 0.0), f2=const_mark("f2", 0.0), g=_zero("g"),
        phi=_zero("phi", ("x",)), b2=_zero("b2"), sigma3=lambda t: 1.0,
        f3=lambda t, e: 0.0 * e, lam=const_mark("lam", 1.0), ltilde=_zero("ltilde"),
        phi_term=linear("phi_term", 0.0, XY, x=1.0),
        active=(True, False, False, False), solve_y=False,
        note="Brownian state with linear terminal cost",
        qexp_bounds=(lambda t: 0.0, 0.0),
    )


@register("linear-test", "invented test model",
          "all coefficients affine; control enters drift, diffusion and running cost",
          {"x0": 0.5, "theta": 0.5, "T": 1.0, "n_steps": 200,
           "a0": 0.1, "ax": -0.3, "ay": 0.0, "au": 0.2,
           "s0": 0.3, "sx": 0.1, "su": 0.4, "s2": 0.2,
           "g1": 0.1, "g1x": 0.05, "g2": 0.15,
           "cx": 0.2, "cy": -0.1, "cz": 0.1,
           "phi_x": 1.0, "h0": 0.1, "hx": 0.3, "sigma3": 1.0, "f3": 0.1,
           "lam": 0.8, "qx": 0.2, "ru": 0.1, "wx": 1.0, "wy": 0.2,
           "U": (-1.0, 0.0, 1.0), "nu1": (0.6, 0.4), "e1": (1.0, -1.0),
           "nu2": (0.5,), "e2": (1.0,), "u_bar": 0.0})
def _linear_test(p):
    e1 = np.asarray(p["e1"])
    return ModelSpec(
        name="linear-test", theta=p["theta"], U=p["U"], x0=p["x0"], grid=_grid(p),
        marks1=_marks(p["e1"], p["nu1"]), marks2=_marks(p["e2"], p["nu2"]),
        b1=linear("b1", lambda th: p["a0"] + p["au"] * th.u, x=p["ax"], y=p["ay"]),
        sigma1=linear("sigma1", lambda th: p["s0"] + p["su"] * th.u, XY, x=p["sx"]),
        sigma2=linear("sigma2", p["s2"], XY),
        f1=mark_linear("f1", lambda th, e: p["g1"] * e, x=lambda th, e: p["g1x"] * np.abs(e)),
        f2=const_mark("f2", p["g2"]),
        g=linear("g", 0.0, x=p["cx"], y=p["cy"], z1=p["cz"]),
        phi=linear("phi", 0.0, ("x",), x=p["phi_x"]),
        b2=linear("b2", p["h0"], x=p["hx"]), sigma3=lambda t: p["sigma3"],
        f3=lambda t, e: p["f3"] * np.asarray(e), lam=const_mark("lam", p["lam"]),
        ltilde=linear("ltilde", lambda th: p["ru"] * th.u, x=p["qx"]),
        phi_term=linear("phi_term", 0.0, XY, x=p["wx"], y=p["wy"]),
        l_low=min(0.5, p["lam"]), coupled=p["ay"] != 0.0,
        note="affine jump-diffusion test model",
        default_policy=ControlPolicy("constant", value=p["u_bar"]),
    )


@register("coupled-linear", "invented test model",
          "weakly coupled FBSDE: dx = (b0 + c y) dt + sigma dW1, -dy = (a x + k y) dt - z dW1, y_T = x",
          {"x0": 1.0, "theta": 0.5, "T": 0.5, "n_steps": 500, "b0": 0.2, "c": 0.1,
           "sigma": 0.1, "a": 0.3, "k": 0.2})
def _coupled_linear(p):
    return ModelSpec(
        name="coupled-linear", theta=p["theta"], U=(0.0,), x0=p["x0"], grid=_grid(p),
        marks1=_marks([1.0], [1.0]), marks2=_marks([1.0], [1.0]),
        b1=linear("b1", p["b0"], y=p["c"]), sigma1=linear("sigma1", p["sigma"], XY),
        sigma2=_zero("sigma2", XY), f1=const_mark("f1", 0.0), f2=const_mark("f2", 0.0),
        g=linear("g", 0.0, x=p["a"], y=p["k"]), phi=linear("phi", 0.0, ("x",), x=1.0),
        b2=_zero("b2"), sigma3=lambda t: 1.0, f3=lambda t, e: 0.0 * e,
        lam=const_mark("lam", 1.0), ltilde=_zero("ltilde"),
        phi_term=linear("phi_term", 0.0, XY, x=1.0),
        active=(True, False, False, False), coupled=p["c"] != 0.0,
        note="linear forward-backward system coupled through the drift",
    )


@register("lq-exp", "invented test model",
          "dx = u dt + sigma dW1, running cost u^2/2, terminal cost c x; optimum u = -c",
          {"x0": 0.0, "theta": 0.5, "T": 1.0, "n_steps": 200, "sigma": 0.4, "c": 0.5,
           "h": 0.5, "sigma3": 1.0,
           "U": (-1.0, -0.75, -0.5, -0.25, 0.0, 0.25, 0.5), "u_bar": -0.5})
def _lq_exp(p):
    return ModelSpec(
        name="lq-exp", theta=p["theta"], U=p["U"], x0=p["x0"], grid=_grid(p),
        marks1=_marks([1.0], [1.0]), marks2=_marks([1.0], [1.0]),
        b1=linear("b1", lambda th: th.u), sigma1=linear("sigma1", p["sigma"], XY),
        sigma2=_zero("sigma2", XY), f1=const_mark("f1", 0.0), f2=const_mark("f2", 0.0),
        g=_zero("g"), phi=_zero("phi", ("x",)), b2=linear("b2", 0.0, x=p["h"]),
        sigma3=lambda t: p["sigma3"], f3=lambda t, e: 0.0 * e, lam=const_mark("lam", 1.0),
        ltilde=linear("ltilde", lambda th: 0.5 * th.u ** 2),
        phi_term=linear("phi_term", 0.0, XY, x=p["c"]),
        active=(True, True, False, False), solve_y=False,
        note="linear-quadratic exponential diffusion with a known optimum",
        default_policy=ControlPolicy("constant", value=p["u_bar"]),
    )


def _lam_filter(p):
    lo, amp = p["lam_lo"], p["lam_amp"]

    def val(th, e):
        x = np.asarray(th.x, dtype=float)[..., None]
        return lo + amp / (1.0 + x * x) + 0.0 * e

    def grad(th, e):
        x = np.asarray(th.x, dtype=float)[..., None]
        return {"x": -2.0 * amp * x / (1.0 + x * x) ** 2 + 0.0 * e}

    def hess(th, e):
        x = np.asarray(th.x, dtype=float)[..., None]
        return {("x", "x"): amp * (6.0 * x * x - 2.0) / (1.0 + x * x) ** 3 + 0.0 * e}

    return MarkCoef("lam", val, grad, hess, XY)


@register("filter-linear", "filtering application, linear-Gaussian degenerate case (optional jumps)",
          "OU signal observed in white noise; jump terms and quadratic running cost off by default",
          {"x0": 0.5, "theta": 0.5, "T": 1.0, "n_steps": 1000, "a": -0.5, "s1": 0.6, "s2": 0.3,
           "h": 1.0, "sigma3": 0.5, "lcoef": 0.0, "wx": 1.0,
           "f1": 0.0, "nu1": 0.5, "f2": 0.0, "nu2": 0.5, "f3": 0.0,
           "lam_lo": 1.0, "lam_amp": 0.0})
def _filter_linear(p):
    if not (0 < p["lam_lo"] and p["lam_lo"] + p["lam_amp"] <= 1.0 and p["lam_amp"] >= 0):
        raise ConfigError("filter-linear needs 0 < lam_lo and lam_lo + lam_amp <= 1")
    jumps1 = p["f1"] != 0.0
    jumps2 = p["f2"] != 0.0 or p["lam_amp"] != 0.0 or p["lam_lo"] != 1.0
    return ModelSpec(
        name="filter-linear", theta=p["theta"], U=(0.0,), x0=p["x0"], grid=_grid(p),
        marks1=_marks([1.0], [p["nu1"]]), marks2=_marks([1.0], [p["nu2"]]),
        b1=linear("b1", 0.0, x=p["a"]), sigma1=linear("sigma1", p["s1"], XY),
        sigma2=linear("sigma2", p["s2"], XY), f1=const_mark("f1", p["f1"]),
        f2=const_mark("f2", p["f2"]), g=_zero("g"), phi=_zero("phi", ("x",)),
        b2=linear("b2", 0.0, x=p["h"]), sigma3=lambda t: p["sigma3"],
        f3=lambda t, e: p["f3"] + 0.0 * np.asarray(e), lam=_lam_filter(p),
        ltilde=Coef("ltilde", lambda th: p["lcoef"] * th.x ** 2,
                    lambda th: {"x": 2.0 * p["lcoef"] * th.x},
                    lambda th: {("x", "x"): 2.0 * p["lcoef"] + 0.0 * th.x}),
        phi_term=linear("phi_term", 0.0, XY, x=p["wx"]),
        l_low=min(0.5, p["lam_lo"]) if p["lam_lo"] < 1 else 0.5,
        active=(True, True, jumps1, jumps2), solve_y=False,
        note="signal with linear observation drift",
    )


# ---- investment model -----------------------------------------------------


@dataclass(frozen=True)
class MarketParams:
    a1: float = 0.05
    a2: float = 0.0
    A1: float = 0.02
    A2: float = -0.5
    sigma: tuple = (0.16, 0.12)
    Lam: tuple = (0.1, 0.2)
    sigma_t: float = 0.1
    Lam_t: float = 0.05
    nu: float = 1.0
    s0: float = 1.0
    x0: float = 0.2
    v0: float = 1.0
    theta: float = 0.5
    T: float = 1.0

    def __post_init__(self):
        if self.sigma_t <= -1:
            raise ConfigError("jump size sigma_t must exceed -1")
        if self.ss <= 0:
            raise ConfigError("sigma sigma^T must be positive")
        if self.nu <= 0:
            raise ConfigError("jump intensity must be positive")
        if self.theta <= 0:
            raise ConfigError("theta must be > 0")

    @property
    def ss(self):
        s = np.asarray(self.sigma)
        return float(s @ s)

    @property
    def a3(self):
        return self.a1 - 0.5 * self.ss + (math.log1p(self.sigma_t) - self.sigma_t) * self.nu

    @property
    def proj(self):
        """Lambda sigma^T (sigma sigma^T)^-1."""
        return float(np.asarray(self.Lam) @ np.asarray(self.sigma)) / self.ss

    @property
    def a4(self):
        return self.a2 - self.proj * self.a3

    @property
    def A4(self):
        return self.A2 - self.proj * self.A1

    def rotation(self):
        """Orthonormal rows (e_perp, e_sigma); W2 is the observed direction."""
        s = np.asarray(self.sigma, dtype=float)
        e2 = s / np.linalg.norm(s)
        e1 = np.array([-e2[1], e2[0]])
        return np.stack([e1, e2])


@register("invest", "investment application: factor-driven stock with jumps, wealth under a constant-fraction strategy",
          "state x = wealth V, auxiliary factor X; observed direction of the Brownian pair is the stock's",
          {"a1": 0.05, "a2": 0.0, "A1": 0.02, "A2": -0.5, "sigma": (0.16, 0.12), "Lam": (0.1, 0.2),
           "sigma_t": 0.1, "Lam_t": 0.05, "nu": 1.0, "s0": 1.0, "x0": 0.2, "v0": 1.0,
           "theta": 0.5, "T": 1.0, "n_steps": 200, "u_bar": 0.5,
           "U": (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)})
def _invest(p):
    mp = MarketParams(**{k: p[k] for k in MarketParams.__dataclass_fields__})
    return invest_model(mp, n_steps=p["n_steps"], U=p["U"], u_bar=p["u_bar"])


def invest_model(mp: MarketParams, n_steps=200, U=(0.0, 0.5, 1.0), u_bar=0.5) -> ModelSpec:
    """Transformed investment problem as a ModelSpec.

    The Brownian pair is rotated so that W2 is the direction sigma/|sigma|
    seen by the stock; W1 is orthogonal.  Under the simulation measure
    dV/V = u[(a1 - a3) dt + |sigma| dW2 + sigma_t dNt] and the factor has
    drift a4 + A4 X.
    """
    R = mp.rotation()
    s_norm = math.sqrt(mp.ss)
    lam_rot = R @ np.asarray(mp.Lam, dtype=float)  # loadings of X on (W1, W2)
    b2 = linear("b2", lambda th: mp.a3 + mp.A1 * th.aux)
    sig3 = s_norm
    # b1 chosen so that b = b1 - sigma2 sigma3^-1 b2 = u V (a1 - a3)
    b1 = Coef("b1", lambda th: th.u * th.x * (mp.a1 - mp.a3) + th.u * th.x * (mp.a3 + mp.A1 * th.aux),
              lambda th: {"x": th.u * (mp.a1 + mp.A1 * th.aux)}, lambda th: {})
    aux = AuxProcess(x0=mp.x0, drift=lambda t, X: mp.a4 + mp.A4 * X, d1=float(lam_rot[0]),
                     d2=float(lam_rot[1]), jump1=(0.0,), jump2=(mp.Lam_t,))
    return ModelSpec(
        name="invest", theta=mp.theta, U=tuple(U), x0=mp.v0, grid=TimeGrid(mp.T, int(n_steps)),
        marks1=_marks([1.0], [1.0]), marks2=_marks([1.0], [mp.nu]),
        b1=b1, sigma1=_zero("sigma1", XY),
        sigma2=linear("sigma2", 0.0, XY, x=lambda th: th.u * s_norm),
        f1=const_mark("f1", 0.0),
        f2=mark_linear("f2", 0.0, x=lambda th, e: np.asarray(th.u, dtype=float)[..., None] * mp.sigma_t + 0.0 * e),
        g=_zero("g"), phi=_zero("phi", ("x",)), b2=b2, sigma3=lambda t: sig3,
        f3=lambda t, e: math.log1p(mp.sigma_t) + 0.0 * np.asarray(e), lam=const_mark("lam", 1.0),
        ltilde=_zero("ltilde"),
        phi_term=Coef("phi_term", lambda th: -np.log(th.x), lambda th: {"x": -1.0 / th.x},
                      lambda th: {("x", "x"): 1.0 / th.x ** 2}, XY),
        aux=aux, active=(True, True, False, True), solve_y=False,
        params={}, note="wealth with factor-dependent stock drift, jumps in both",
        probe_box={"x": (0.5, 2.0)}, default_policy=ControlPolicy("constant", value=u_bar),
        extra={"market": mp},
    )


def model_ensemble(model: ModelSpec, n_paths, seed, antithetic=False):
    from .kernel import generate_ensemble
    return generate_ensemble(model.grid, model.marks1, model.marks2, n_paths, seed, antithetic)
