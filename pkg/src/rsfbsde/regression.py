"""Cross-sectional least-squares regression and the generic LSMC backward sweep.

Every backward equation in the package (y, zeta, and all adjoints) is
advanced by :func:`backward_lsmc`.  The sweep stores the per-step regression
coefficients, not per-path values, so a solution can be re-evaluated at
node k on any set of paths that can supply the regression features.
"""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import AdjointError, SolverError

log = logging.getLogger(__name__)


class NodeContext:
    """Per-node bag of path arrays with lazily computed entries."""

    def __init__(self, k, t, n, data=None, lazy=None):
        self.k = k
        self.t = t
        self.n = n
        self._data = dict(data or {})
        self._lazy = dict(lazy or {})

    def __contains__(self, name):
        return name in self._data or name in self._lazy

    def __getitem__(self, name):
        if name in self._data:
            return self._data[name]
        if name in self._lazy:
            v = self._lazy.pop(name)(self)
            self._data[name] = v
            return v
        if name.startswith("log:"):
            return np.log(self[name[4:]])
        if name.startswith("inv:"):
            return 1.0 / np.asarray(self[name[4:]])
        if name == "logx":
            return np.log(self["x"])
        raise KeyError(name)

    def get(self, name, default=None):
        try:
            return self[name]
        except KeyError:
            return default

    def set(self, name, value):
        self._data[name] = value
        self._lazy.pop(name, None)

    def add_lazy(self, name, fn):
        self._lazy[name] = fn
        self._data.pop(name, None)

    def features(self, names) -> np.ndarray:
        cols = [np.broadcast_to(np.asarray(self[nm], dtype=float), (self.n,)) for nm in names]
        if not cols:
            return np.empty((self.n, 0))
        return np.stack(cols, axis=1)


def _exponents(d, degree, cross=True):
    out = []
    for tot in range(degree + 1):
        for e in itertools.product(range(tot + 1), repeat=d):
            if sum(e) == tot and (cross or sum(1 for v in e if v) <= 1):
                out.append(e)
    return out


@dataclass
class Fit:
    center: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    exps: list
    coef: np.ndarray  # (n_basis, m)
    ridge: float
    cond: float
    resid_rms: np.ndarray | None = None
    normal_resid: float = 0.0

    def design(self, F):
        return _design(F, self.center, self.scale, self.keep, self.exps)

    def predict(self, F) -> np.ndarray:
        return self.design(F) @ self.coef


def _design(F, center, scale, keep, exps):
    n = F.shape[0]
    Z = (F[:, keep] - center) / scale
    cols = [np.ones(n)]
    for e in exps[1:]:
        c = np.ones(n)
        for j, p in enumerate(e):
            if p:
                c = c * Z[:, j] ** p
        cols.append(c)
    return np.stack(cols, axis=1)


@dataclass
class RegressionBasis:
    """Polynomial basis of total degree <= degree in standardized features."""
    features: tuple = ("x",)
    degree: int = 3
    ridge: float = 1e-8
    cross: bool = True
    max_ridge: float = 1e-2
    cond_limit: float = 1e12

    def __post_init__(self):
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        self.features = tuple(self.features)

    def with_features(self, features):
        return RegressionBasis(tuple(features), self.degree, self.ridge, self.cross,
                               self.max_ridge, self.cond_limit)

    def prepare(self, F: np.ndarray) -> "Design":
        F = np.asarray(F, dtype=float)
        if F.ndim == 1:
            F = F[:, None]
        if not np.all(np.isfinite(F)):
            raise SolverError("non-finite regression features")
        n = F.shape[0]
        if F.shape[1]:
            center = F.mean(axis=0)
            scale = F.std(axis=0)
            keep = scale > 1e-12 * (1.0 + np.abs(center))
        else:
            center = scale = np.zeros(0)
            keep = np.zeros(0, dtype=bool)
        center, scale = center[keep], scale[keep]
        deg = self.degree if n > 1 else 0
        exps = _exponents(int(keep.sum()), deg, self.cross)
        B = _design(F, center, scale, keep, exps)
        return Design(self, B, center, scale, keep, exps)


class Design:
    def __init__(self, basis, B, center, scale, keep, exps):
        self.basis = basis
        self.B = B
        self.center, self.scale, self.keep, self.exps = center, scale, keep, exps
        n, p = B.shape
        self.n = n
        G = B.T @ B / n
        pen = np.ones(p)
        pen[0] = 0.0
        ridge = basis.ridge
        while True:
            Gr = G + ridge * np.diag(pen)
            cond = np.linalg.cond(Gr)
            if np.isfinite(cond) and cond <= basis.cond_limit:
                break
            if ridge >= basis.max_ridge:
                raise SolverError(f"regression design rank-deficient (cond={cond:.3g}) "
                                  f"even at ridge {ridge:.3g}")
            ridge = max(ridge * 100.0, 1e-10)
            warnings.warn(f"ridge escalated to {ridge:.1e} (cond {cond:.3g})", RuntimeWarning)
        self.ridge = ridge
        self.cond = float(cond)
        self.Gr = Gr
        self.R = ridge * np.diag(pen)
        self._chol = np.linalg.cholesky(Gr)

    def solve(self, Y: np.ndarray) -> Fit:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        rhs = self.B.T @ Y / self.n
        c = np.linalg.solve(self._chol.T, np.linalg.solve(self._chol, rhs))
        fitted = self.B @ c
        res = Y - fitted
        nr = float(np.max(np.abs(self.B.T @ res / self.n - self.R @ c))) if Y.size else 0.0
        return Fit(self.center, self.scale, self.keep, self.exps, c, self.ridge, self.cond,
                   np.sqrt(np.mean(res ** 2, axis=0)), nr)

    def fitted(self, fit: Fit) -> np.ndarray:
        return self.B @ fit.coef


# --------------------------------------------------------------------------
# backward sweep


@dataclass
class StepRecord:
    k: int
    fit_y: Fit
    fit_z: Fit | None  # columns: z1, z2, zt1_0.., zt2_0.. (already divided)
    layout: tuple


@dataclass
class BackwardSolution:
    """LSMC solution of -dY = G dt - Z1 dW1 - Z2 dW2 - sum Zt dNt, Y_N = terminal."""
    label: str
    grid: object
    K1: int
    K2: int
    records: list
    driver: object
    terminal_fn: object
    features: tuple
    implicit: bool
    fp_sweeps: int
    fp_tol: float
    y0: float
    y0_paths: np.ndarray
    pathwise0: np.ndarray
    means: dict
    diagnostics: list
    active: tuple
    stored: dict | None = None
    extra: dict = field(default_factory=dict)

    @property
    def stderr0(self) -> float:
        v = self.pathwise0
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0

    def _z_from(self, rec, X, n):
        K1, K2 = self.K1, self.K2
        z1 = np.zeros(n); z2 = np.zeros(n)
        zt1 = np.zeros((n, K1)); zt2 = np.zeros((n, K2))
        if rec.fit_z is not None:
            P = X @ rec.fit_z.coef
            for c, (kind, j) in enumerate(rec.layout):
                if kind == "W1":
                    z1 = P[:, c]
                elif kind == "W2":
                    z2 = P[:, c]
                elif kind == "N1":
                    zt1[:, j] = P[:, c]
                else:
                    zt2[:, j] = P[:, c]
        return z1, z2, zt1, zt2

    def values_at(self, k: int, ctx: NodeContext) -> dict:
        n = ctx.n
        if k == self.grid.n_steps:
            y = np.broadcast_to(np.asarray(self.terminal_fn(ctx), dtype=float), (n,))
            return {"y": y, "yhat": y, "z1": np.zeros(n), "z2": np.zeros(n),
                    "zt1": np.zeros((n, self.K1)), "zt2": np.zeros((n, self.K2))}
        rec = self.records[k]
        # both fits come from one Design, so they share the standardization
        X = rec.fit_y.design(ctx.features(self.features))
        yhat = (X @ rec.fit_y.coef)[:, 0]
        z1, z2, zt1, zt2 = self._z_from(rec, X, n)
        y = _advance(self.driver, k, ctx, yhat, z1, z2, zt1, zt2, self.grid.dt,
                     self.implicit, self.fp_sweeps, self.fp_tol, self.label)
        return {"y": y, "yhat": yhat, "z1": z1, "z2": z2, "zt1": zt1, "zt2": zt2}


def _advance(driver, k, ctx, yhat, z1, z2, zt1, zt2, dt, implicit, sweeps, tol, label):
    if driver is None:
        return yhat
    if not implicit:
        return yhat + dt * np.asarray(driver(k, ctx, yhat, z1, z2, zt1, zt2))
    y = yhat + dt * np.asarray(driver(k, ctx, yhat, z1, z2, zt1, zt2))
    for _ in range(sweeps):
        y_new = yhat + dt * np.asarray(driver(k, ctx, y, z1, z2, zt1, zt2))
        err = float(np.max(np.abs(y_new - y))) if y.size else 0.0
        y = y_new
        if err <= tol * (1.0 + float(np.max(np.abs(y)))):
            return y
    raise AdjointError(f"{label}: within-step fixed point did not converge at step {k} "
                       f"(last change {err:.3g})")


def backward_lsmc(ens, context_at, terminal_fn, driver, basis: RegressionBasis, *,
                  active=(True, True, True, True), implicit=False, fp_sweeps=20,
                  fp_tol=1e-10, label="y", store=False, features=None, nonfinite="raise"):
    """Generic explicit (or y-implicit) LSMC backward recursion.

    ``driver(k, ctx, y, z1, z2, zt1, zt2)`` returns the generator at node k;
    zt arrays are per atom with shape (n, K).  Martingale integrands are
    regressed on the centred regressand ``y_{k+1} - E[y_{k+1}|F_k]``.
    """
    grid = ens.grid
    N, dt, n = grid.n_steps, grid.dt, ens.n_paths
    K1, K2 = ens.marks1.K, ens.marks2.K
    nu1, nu2 = ens.marks1.nu, ens.marks2.nu
    feats = tuple(basis.features if features is None else features)
    layout = []
    if active[0]:
        layout.append(("W1", 0))
    if active[1]:
        layout.append(("W2", 0))
    if active[2]:
        layout += [("N1", j) for j in range(K1) if nu1[j] > 0]
    if active[3]:
        layout += [("N2", j) for j in range(K2) if nu2[j] > 0]
    layout = tuple(layout)

    ctxN = context_at(N)
    y_next = np.broadcast_to(np.asarray(terminal_fn(ctxN), dtype=float), (n,)).copy()
    if not np.all(np.isfinite(y_next)):
        raise SolverError(f"{label}: non-finite terminal values")
    v = y_next.copy()
    records = [None] * N
    diags = [None] * N
    means = {"y": np.zeros(N + 1), "z1": np.zeros(N + 1), "z2": np.zeros(N + 1),
             "zt1": np.zeros((N + 1, K1)), "zt2": np.zeros((N + 1, K2))}
    means["y"][N] = y_next.mean()
    stored = None
    if store:
        stored = {"y": np.empty((N + 1, n)), "z1": np.zeros((N + 1, n)), "z2": np.zeros((N + 1, n)),
                  "zt1": np.zeros((N + 1, n, K1)), "zt2": np.zeros((N + 1, n, K2))}
        stored["y"][N] = y_next
    for k in range(N - 1, -1, -1):
        ctx = context_at(k)
        s = ens.step(k)
        F = ctx.features(feats)
        des = basis.prepare(F)
        fy = des.solve(y_next)
        yhat = des.fitted(fy)[:, 0]
        if np.ptp(y_next) == 0.0:
            # constant target: keep it exact so the martingale part is exactly zero
            yhat = y_next.copy()
        resid = y_next - yhat
        z1 = np.zeros(n); z2 = np.zeros(n)
        zt1 = np.zeros((n, K1)); zt2 = np.zeros((n, K2))
        fz = None
        if layout:
            cols, scal = [], []
            for kind, j in layout:
                if kind == "W1":
                    cols.append(resid * s.dW1); scal.append(dt)
                elif kind == "W2":
                    cols.append(resid * s.dW2); scal.append(dt)
                elif kind == "N1":
                    cols.append(resid * s.dNt1[:, j]); scal.append(nu1[j] * dt)
                else:
                    cols.append(resid * s.dNt2[:, j]); scal.append(nu2[j] * dt)
            fz = des.solve(np.stack(cols, axis=1))
            fz.coef = fz.coef / np.asarray(scal)[None, :]
            P = des.fitted(fz)
            for c, (kind, j) in enumerate(layout):
                if kind == "W1":
                    z1 = P[:, c]
                elif kind == "W2":
                    z2 = P[:, c]
                elif kind == "N1":
                    zt1[:, j] = P[:, c]
                else:
                    zt2[:, j] = P[:, c]
        y = _advance(driver, k, ctx, yhat, z1, z2, zt1, zt2, dt, implicit, fp_sweeps, fp_tol, label)
        if not np.all(np.isfinite(y)):
            bad = int(np.flatnonzero(~np.isfinite(y))[0])
            raise SolverError(f"{label}: non-finite backward value at step {k}, path {bad}")
        g = (y - yhat) / dt
        v = v + dt * g - z1 * s.dW1 - z2 * s.dW2 - (s.dNt1 * zt1).sum(axis=1) - (s.dNt2 * zt2).sum(axis=1)
        records[k] = StepRecord(k, fy, fz, layout)
        diags[k] = {"step": k, "cond": des.cond, "ridge": des.ridge,
                    "resid_rms": float(fy.resid_rms[0]), "normal_resid": fy.normal_resid}
        means["y"][k] = y.mean(); means["z1"][k] = z1.mean(); means["z2"][k] = z2.mean()
        means["zt1"][k] = zt1.mean(axis=0); means["zt2"][k] = zt2.mean(axis=0)
        if store:
            stored["y"][k] = y; stored["z1"][k] = z1; stored["z2"][k] = z2
            stored["zt1"][k] = zt1; stored["zt2"][k] = zt2
        y_next = y
    return BackwardSolution(label, grid, K1, K2, records, driver, terminal_fn, feats, implicit,
                            fp_sweeps, fp_tol, float(y_next.mean()), y_next, v, means, diags,
                            tuple(active), stored)
