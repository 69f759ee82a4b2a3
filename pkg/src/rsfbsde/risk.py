"""Risk-sensitive cost estimated directly and recursively, their equivalence,
and the nonlinear expectation E_theta."""
from __future__ import annotations

import math
import warnings

import numpy as np

from .errors import ConfigError, SolverError
from .measure import MeasureWeights, running_cost_integral
from .models import Theta


def _log_mean_exp(a):
    a = np.asarray(a, dtype=float)
    mx = float(np.max(a))
    w = np.exp(a - mx)
    return mx, w


def cost_direct(state, weights: MeasureWeights, warn_frac=0.01) -> dict:
    """E_P[Gamma_T exp{theta int ltilde + theta phi_term(x_T, y0)}] with stderr."""
    m = state.model
    th_ = m.theta
    xT = state.x[-1]
    phiT = np.broadcast_to(np.asarray(m.phi_term(Theta(x=xT, y=state.y0 + 0.0 * xT)), dtype=float),
                           xT.shape)
    L = running_cost_integral(state)
    a = weights.log_gamma_T + th_ * (L + phiT)
    ok = np.isfinite(a) & (a < 700.0)
    excl = int((~ok).sum())
    frac = excl / a.size
    if frac > warn_frac:
        warnings.warn(f"{frac:.2%} of paths overflowed and were excluded", RuntimeWarning)
    if not ok.any():
        raise SolverError("every path overflowed in the direct cost estimator")
    mx, w = _log_mean_exp(a[ok])
    n = w.size
    mean = float(np.exp(mx) * w.mean())
    se = float(np.exp(mx) * w.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return {"J_direct": mean, "stderr": se, "excluded": excl, "excluded_frac": frac,
            "samples_log": a}


def cost_recursive(state, dispersion_factor=10.0) -> dict:
    sol = state.zeta_sol
    if sol is None:
        raise SolverError("zeta not solved")
    z0 = sol.y0_paths
    se = sol.stderr0
    disp = float(np.std(z0))
    warn = disp > dispersion_factor * max(se, 1e-300) and disp > 1e-12
    if warn:
        warnings.warn("zeta_0 varies across paths: regression basis too weak at the initial node",
                      RuntimeWarning)
    return {"zeta0": float(sol.y0), "stderr": se, "dispersion": disp, "nonmeasurable_warning": bool(warn)}


def equivalence_check(J, J_se, zeta0, zeta_se, theta, bias_band=0.0, z=3.0) -> dict:
    """Relative gap |J' - e^{theta zeta0}| / J' against z combined stderr plus a bias band."""
    ez = math.exp(theta * zeta0)
    gap = abs(J - ez) / J
    comb = math.sqrt(J_se ** 2 + (theta * ez * zeta_se) ** 2) / J
    tol = z * comb + bias_band
    return {"J_direct": J, "exp_theta_zeta0": ez, "gap": gap, "combined_stderr_rel": comb,
            "tolerance": tol, "pass": bool(gap <= tol)}


def nonlinear_expectation(xi, theta) -> dict:
    """(1/theta) ln mean e^{theta xi} by log-sum-exp, with a closed-form jackknife."""
    if theta == 0:
        raise ConfigError("theta must be nonzero")
    xi = np.asarray(xi, dtype=float).ravel()
    if xi.size == 0 or not np.all(np.isfinite(xi)):
        raise ConfigError("samples must be finite and nonempty")
    a = theta * xi
    mx, w = _log_mean_exp(a)
    n = xi.size
    S = w.sum()
    val = (mx + math.log(S / n)) / theta
    if n > 1:
        loo = (mx + np.log((S - w) / (n - 1))) / theta
        jm = loo.mean()
        se = math.sqrt((n - 1) / n * float(np.sum((loo - jm) ** 2)))
    else:
        se = 0.0
    return {"value": float(val), "stderr": se, "n": n, "theta": theta}
