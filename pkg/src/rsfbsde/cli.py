"""Command-line entry point: ``rsfbsde <subcommand> [--config FILE] [overrides]``.

Exit codes: 0 every enabled check passed, 1 a check failed, 2 configuration
error, 3 numerical failure.  The JSON summary goes to stdout and, with
``--out DIR``, to DIR/summary.json next to the experiment's CSV files.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
import warnings

import numpy as np

from . import config as C
from .errors import CheckFailure, ConfigError, RsError

log = logging.getLogger("rsfbsde")


# --------------------------------------------------------------------------
# output helpers


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(a) for k, a in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(a) for a in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


def dumps(summary) -> str:
    return json.dumps(_clean(summary), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return v


# --------------------------------------------------------------------------
# building blocks


def _model(cfg):
    from .models import builtin
    params = dict(cfg.model.params)
    if cfg.theta is not None:
        params["theta"] = cfg.theta
    return builtin(cfg.model.name, params)


def _basis(cfg, model):
    from .regression import RegressionBasis
    feats = cfg.basis.features or (["x", "aux"] if model.aux is not None else ["x"])
    return RegressionBasis(tuple(feats), cfg.basis.degree, cfg.basis.ridge)


def _policy(cfg, model):
    from .models import ControlPolicy, policy_from_config
    if cfg.policy is not None:
        try:
            return policy_from_config(cfg.policy, U=model.U)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid policy: {exc}") from None
    return model.default_policy or ControlPolicy("constant", value=model.U[0])


def _ensemble(cfg, model):
    from .models import model_ensemble
    e = cfg.ensemble
    return model_ensemble(model, e.n_paths, e.seed, e.antithetic)


# --------------------------------------------------------------------------
# experiments: each returns (results, checks)


def exp_simulate(cfg, out):
    from scipy.stats import norm

    from .fbsdep import forward_euler
    from .kernel import brownian_moments_check
    from .measure import evolve_gamma_tilde, martingale_check
    model = _model(cfg)
    ens = _ensemble(cfg, model)
    # family-wise 1e-3 false-alarm level over every per-step statistic
    nd = 2 + model.marks1.K + model.marks2.K
    n_tests = model.grid.n_steps * (4 + model.marks1.K + model.marks2.K + nd * (nd - 1) // 2)
    mom = brownian_moments_check(ens, z_crit=float(norm.isf(1e-3 / (2 * n_tests))))
    st = forward_euler(model, ens, _policy(cfg, model))
    N = model.grid.n_steps
    w = evolve_gamma_tilde(st, every=max(1, N // 10))
    mc = martingale_check(w, cfg.tolerances.martingale_z)
    xT = st.x[-1]
    res = {"x_T": {"mean": float(xT.mean()), "std": float(xT.std()),
                   "q05": float(np.quantile(xT, 0.05)), "q95": float(np.quantile(xT, 0.95))},
           "Y_T_mean": float(st.Y[-1].mean()), "driver_flags": len(mom["flags"]),
           "gamma_tilde": mc}
    if out:
        q = np.quantile(st.x, [0.05, 0.5, 0.95], axis=1)
        rows = [{"t": model.grid.t(k), "x_mean": float(st.x[k].mean()), "x_q05": q[0, k], "x_q50": q[1, k],
                 "x_q95": q[2, k], "Y_mean": float(st.Y[k].mean())} for k in range(N + 1)]
        _write_rows(os.path.join(out, "paths.csv"), ["t", "x_mean", "x_q05", "x_q50", "x_q95", "Y_mean"], rows)
    return res, {"driver_moments": mom["pass"], "gamma_martingale": mc["pass"]}


def exp_solve(cfg, out):
    from .fbsdep import solve_state, write_backward_csv
    from .qexp import bmo_energy_diagnostic, solve_qexp
    model = _model(cfg)
    ens = _ensemble(cfg, model)
    basis = _basis(cfg, model)
    st = solve_state(model, ens, _policy(cfg, model), basis)
    sol = solve_qexp(st, basis)
    bmo = bmo_energy_diagnostic(st)
    res = {"zeta0": float(sol.y0), "zeta0_stderr": sol.stderr0,
           "clamp_fraction": sol.extra.get("clamp_fraction", 0.0), "bmo": bmo}
    if st.y_sol is not None:
        res["y0"] = float(st.y0)
        res["y0_stderr"] = st.y_sol.stderr0
    if st.picard:
        res["picard"] = st.picard
    if out:
        write_backward_csv(st.y_sol, os.path.join(out, "backward_y.csv"))
        write_backward_csv(sol, os.path.join(out, "backward_zeta.csv"), ("zeta", "k1", "k2"))
    checks = {"energy_inequality": bmo["pass"]}
    if st.picard:
        checks["picard_contracting"] = all(h["ratio"] is None or h["ratio"] < 1 for h in st.picard)
    return res, checks


def exp_risk(cfg, out):
    from .fbsdep import solve_state
    from .measure import evolve_gamma_tilde, martingale_check
    from .qexp import solve_qexp
    from .risk import cost_direct, cost_recursive, equivalence_check
    model = _model(cfg)
    ens = _ensemble(cfg, model)
    basis = _basis(cfg, model)
    tol = cfg.tolerances
    st = solve_state(model, ens, _policy(cfg, model), basis, keep_Y=False)
    solve_qexp(st, basis)
    w = evolve_gamma_tilde(st, every=max(1, model.grid.n_steps // 10))
    mc = martingale_check(w, tol.martingale_z)
    cd = cost_direct(st, w)
    cr = cost_recursive(st)
    eq = equivalence_check(cd["J_direct"], cd["stderr"], cr["zeta0"], cr["stderr"], model.theta,
                           tol.bias_band, tol.z)
    res = {"J_direct": cd["J_direct"], "J_direct_stderr": cd["stderr"], "excluded_paths": cd["excluded"],
           "zeta0": cr["zeta0"], "zeta0_stderr": cr["stderr"], "nonmeasurable_warning": cr["nonmeasurable_warning"],
           "equivalence": eq, "gamma_tilde": mc}
    checks = {"equivalence": eq["pass"], "gamma_martingale": mc["pass"]}
    if model.name == "gaussian":
        p = model.params
        exact = math.exp(0.5 * model.theta ** 2 * p["sigma"] ** 2 * p["T"] + model.theta * p["x0"])
        rd = abs(cd["J_direct"] - exact) / exact
        rr = abs(math.exp(model.theta * cr["zeta0"]) - exact) / exact
        res["closed_form"] = {"value": exact, "rel_err_direct": rd, "rel_err_recursive": rr,
                              "tolerance": tol.closed_form_rel}
        checks["closed_form_direct"] = rd <= tol.closed_form_rel
        checks["closed_form_recursive"] = rr <= tol.closed_form_rel
    return res, checks


def exp_mp(cfg, out):
    from .maxprinciple import mp_check
    model = _model(cfg)
    ens = _ensemble(cfg, model)
    s = cfg.scan
    rep = mp_check(model, ens, _policy(cfg, model), _basis(cfg, model),
                   {"every": s.every, "lag": s.lag, "degree": s.degree, "tol": cfg.tolerances.residual})
    rows = rep.pop("rows")
    if out:
        _write_rows(os.path.join(out, "scan.csv"), ["t", "node", "u", "residual", "q01", "mean", "stderr"], rows)
    rep["n_rows"] = len(rows)
    bmax = max(rep["boundary"].values())
    return rep, {"optimal_condition": rep["pass"], "adjoint_boundary": bmax <= 1e-9}


def exp_spike(cfg, out):
    from .maxprinciple import spike_variation_experiment
    model = _model(cfg)
    ens = _ensemble(cfg, model)
    base = _policy(cfg, model)
    sp = cfg.spike
    u = sp.u
    if u is None:
        ub = getattr(base, "value", None)
        others = [v for v in model.U if ub is None or v != ub]
        u = others[0] if others else model.U[0]
    rep = spike_variation_experiment(model, ens, u, sp.t_bar, sp.eps_ladder, base, _basis(cfg, model),
                                     predictor=sp.predictor and len(model.U) > 1, band_z=cfg.tolerances.z)
    if out:
        _write_rows(os.path.join(out, "spike.csv"),
                    ["eps", "dJ", "stderr", "sup_gap_sq", "jump_frac", "steps", "predictor"], rep["rows"])
    tol = cfg.tolerances
    checks = {"variational_inequality": rep["nonnegative_within_band"]}
    sl = rep["slope_sup_gap_sq"]
    if sl is not None:
        checks["state_gap_order"] = tol.slope_lo <= sl <= tol.slope_hi
    else:
        rep["state_gap_order"] = "not applicable: the spike leaves the state unchanged"
    return rep, checks


def exp_invest(cfg, out):
    from .invest import run_invest, strategy_scan, write_scan_csv
    if cfg.model.name != "invest":
        raise ConfigError("the invest experiment needs model.name = invest")
    p = dict(cfg.model.params)
    if cfg.theta is not None:
        p["theta"] = cfg.theta
    e = cfg.ensemble
    iv = cfg.invest
    res = run_invest(p, e.n_paths, e.seed, u=iv.u, relations=iv.relations)
    tol = cfg.tolerances
    checks = {"alpha_agreement": res["alpha_agreement"] <= tol.alpha_agreement}
    if iv.relations:
        checks["p_alpha_r"] = res["p_alpha_r"] <= tol.p_alpha_r
    if iv.scan_grid:
        sc = strategy_scan(p, e.n_paths, e.seed, iv.scan_grid)
        res["scan"] = {"grid": sc["grid"], "crossing": sc["crossing"],
                       "condition_residual": [r["condition_time_avg"] for r in sc["rows"]],
                       "zeta0": [r["zeta0"] for r in sc["rows"]]}
        if out:
            write_scan_csv(sc, os.path.join(out, "invest_scan.csv"))
    return res, checks


def exp_filter(cfg, out):
    from . import zakai as Z
    model = _model(cfg)
    f = cfg.filter
    tol = cfg.tolerances
    seed = cfg.ensemble.seed
    if f.record:
        rec = Z.ObservationRecord.from_csv(f.record)
    else:
        rec = Z.next_records(model, 1, seed + 1)[0]
    N = model.grid.n_steps
    every = max(1, N // 20)
    pf = Z.particle_filter(model, [rec], f.n_particles, seed=seed + 2, every=every)
    ck = pf["checkpoints"]
    res = {"particle": {"mu_T": {k: float(v[-1, 0]) for k, v in pf["mu"].items()},
                        "mu_T_stderr": {k: float(v[-1, 0]) for k, v in pf["mu_se"].items()},
                        "ess_min": pf["ess_min"], "filter_cost": float(Z.filter_cost(model, pf)[0])},
           "n_events": len(rec.events)}
    checks = {}
    rows = [{"t": model.grid.t(k), "mean": pf["moments"]["mean"][i, 0], "mean_se": pf["moments"]["mean_se"][i, 0],
             "var": pf["moments"]["var"][i, 0], "var_se": pf["moments"]["var_se"][i, 0],
             "mu1": pf["mu"]["1"][i, 0]} for i, k in enumerate(ck)]
    p = model.params
    linear_gauss = (model.name == "filter-linear" and not model.active[2] and not model.active[3]
                    and p.get("lcoef", 0.0) == 0.0)
    if linear_gauss:
        kb = Z.kalman_bucy(p["a"], p["s1"], p["s2"], p["h"], p["sigma3"], p["x0"], rec)
        worst = 0.0
        for i, k in enumerate(ck):
            rows[i]["kb_mean"] = kb["mean"][k]
            rows[i]["kb_var"] = kb["var"][k]
            if k == 0:
                continue
            mo = pf["moments"]
            worst = max(worst, abs(mo["mean"][i, 0] - kb["mean"][k]) / (tol.z * mo["mean_se"][i, 0] + model.grid.dt),
                        abs(mo["var"][i, 0] - kb["var"][k]) / (tol.z * mo["var_se"][i, 0] + model.grid.dt))
        res["kalman_bucy"] = {"worst_band_ratio": worst, "band": "z*stderr + dt"}
        checks["kalman_bucy"] = worst <= 1.0
    if f.grid:
        dx = (f.x_max - f.x_min) / (f.n_x - 1)
        g = Z.grid_filter(model, rec, f.x_min, f.x_max, f.n_x, snapshots=f.snapshots,
                          init_width=f.init_width_cells * dx)
        st = g["state"]
        comp = {}
        ok = True
        fns = {"1": np.ones_like, "x": lambda x: x, "x2": lambda x: x * x}
        for name, F in fns.items():
            gv = st.integrate(F)
            pv = float(pf["mu"][name][-1, 0])
            band = tol.z * float(pf["mu_se"][name][-1, 0]) + tol.grid_band_rel * st.integrate(lambda x: np.abs(F(x)))
            comp[name] = {"grid": gv, "particle": pv, "tolerance": band, "pass": abs(gv - pv) <= band}
            ok &= comp[name]["pass"]
        res["grid"] = {"moments_T": comp, "clipped_mass": g["clipped"], "leaked_mass": g["leaked"],
                       "boundary_ratio": g["boundary_ratio"], "filter_cost": Z.filter_cost(model, st)}
        checks["grid_particle"] = bool(ok)
        for i, k in enumerate(ck):
            rows[i]["grid_mu1"] = g["moments"][k, 0]
            rows[i]["grid_mean"] = g["moments"][k, 1] / g["moments"][k, 0]
        if out:
            for t, q in g["snapshots"].items():
                Z.write_density_csv(st.x, q, os.path.join(out, f"density_t{t:.4f}.csv"))
            Z.write_density_csv(st.x, st.q, os.path.join(out, "density_T.csv"))
    if f.tower:
        tw = Z.tower_check(model, f.n_obs, f.tower_particles, f.n_direct, seed=seed + 100, z=tol.z)
        res["tower"] = tw
        checks["tower"] = tw["pass"]
    if out:
        rec.to_csv(os.path.join(out, "observation.csv"))
        _write_rows(os.path.join(out, "filter_moments.csv"),
                    ["t", "mean", "mean_se", "var", "var_se", "mu1", "kb_mean", "kb_var", "grid_mu1", "grid_mean"], rows)
    return res, checks


EXPERIMENTS = {"simulate": exp_simulate, "solve": exp_solve, "risk-equivalence": exp_risk,
               "mp-check": exp_mp, "spike": exp_spike, "invest": exp_invest, "filter": exp_filter}


def run(cfg: C.ExperimentConfig) -> tuple[dict, int]:
    """Execute one experiment; returns (summary, exit code)."""
    out = cfg.output
    if out:
        os.makedirs(out, exist_ok=True)
    summary = {"kind": cfg.kind, "config": C.resolved(cfg)}
    seen = []
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            res, checks = EXPERIMENTS[cfg.kind](cfg, out)
        for w in caught:
            msg = f"{w.category.__name__}: {w.message}"
            if msg not in seen:
                seen.append(msg)
        checks = {k: bool(v) for k, v in checks.items()}
        code = 0 if all(checks.values()) else CheckFailure.exit_code
        summary.update({"results": res, "checks": checks, "warnings": seen,
                        "status": "pass" if code == 0 else "fail", "exit_code": code})
    except RsError as exc:
        code = exc.exit_code
        summary.update({"status": "error", "exit_code": code,
                        "error": {"type": type(exc).__name__, "message": str(exc)}})
    if out:
        with open(os.path.join(out, "summary.json"), "w") as fh:
            fh.write(dumps(summary))
    return summary, code


# --------------------------------------------------------------------------
# argument parsing


def _parser():
    ap = argparse.ArgumentParser(prog="rsfbsde", description="Risk-sensitive jump FBSDE experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in C.KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--model", help="model name (overrides model.name)")
        p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                       help="model parameter override (repeatable)")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="any config override, dotted path (repeatable)")
        p.add_argument("--n-paths", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--theta", type=float)
        p.add_argument("--out", help="output directory for summary.json and CSVs")
        p.add_argument("--quiet", action="store_true", help="do not print the summary")
    lm = sub.add_parser("list-models")
    lm.add_argument("--format", choices=("json", "csv"), default="json")
    return ap


def build_config(args, kind) -> C.ExperimentConfig:
    d = C.load(args.config) if args.config else {}
    if d.get("kind", kind) != kind:
        raise ConfigError(f"config kind '{d['kind']}' does not match subcommand '{kind}'")
    d["kind"] = kind
    sets = list(args.set)
    if args.model:
        sets.append(f"model.name={args.model}")
    for item in args.param:
        sets.append(f"model.params.{item}")
    if args.n_paths is not None:
        sets.append(f"ensemble.n_paths={args.n_paths}")
    if args.seed is not None:
        sets.append(f"ensemble.seed={args.seed}")
    if args.theta is not None:
        sets.append(f"theta={args.theta!r}")
    if args.out:
        sets.append(f"output={args.out}")
    d = C.apply_overrides(d, sets)
    if "model" not in d:
        raise ConfigError("no model given: use --model or a config file with model.name")
    return C.validate(d)


def _list_models(fmt):
    from .models import list_models
    ms = list_models()
    if fmt == "json":
        sys.stdout.write(dumps(ms))
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["name", "origin", "description"])
        for m in ms:
            w.writerow([m["name"], m["origin"], m["description"]])
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("RSFBSDE_LOG", "WARNING"), format="%(levelname)s %(message)s")
    args = _parser().parse_args(argv)
    if args.command == "list-models":
        return _list_models(args.format)
    t0 = time.perf_counter()
    try:
        cfg = build_config(args, args.command)
    except ConfigError as exc:
        err = {"status": "error", "exit_code": exc.exit_code, "kind": args.command,
               "error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stdout.write(dumps(err))
        return exc.exit_code
    summary, code = run(cfg)
    if not args.quiet:
        sys.stdout.write(dumps(summary))
    log.info("%s finished in %.1fs with exit code %d", cfg.kind, time.perf_counter() - t0, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
