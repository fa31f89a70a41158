"""Command-line entry point: ``hierrg <command> [--config cfg.json] [flags]``.

Config is one flat JSON object; flags override it.  Every run writes its data
files plus ``provenance.json`` into ``--out``.
Exit codes: 0 success, 1 selftest failure, 2 config error, 3 numerical failure.
"""

import argparse
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .blockmap import NESTED, RGParams, parse_backend, rg_step, zero_sum_block_integral
from .errors import (ConfigError, DegenerateInput, HierRGError, MemoryGuardError, NumericalFailure,
                     UnsupportedBackend)
from .funcs import GridSpec, SampledEvenFunction, from_couplings, gauss_smooth
from .io import provenance, write_csv, write_json
from .rng import get_threads, set_threads

COMMON = {
    "preset": "bms", "p": 2, "d": 3, "l": 1, "epsilon": 0.1, "phi_dim": None,
    "phi_max": 12.0, "n_points": 2048, "quad_nodes": 64,
    "backend": "nested", "n_samples": 1000000, "seed": 0, "threads": None, "out": "out",
}

COMMANDS = {
    "flow": {"v0": "couplings", "v0_path": None, "g": 0.0, "mu": 0.0, "steps": 20, "K": 4},
    "fixpoint": {"eps_list": None, "guess": "seed", "guess_path": None, "guess_scale": 1.0,
                 "tol": 1e-9, "max_iter": 50, "n_coll": 33, "phi_coll": 10.0},
    "critical-mu": {"g": 0.2, "tol": 1e-8, "theta": 1.0, "max_steps": 40,
                    "mu_lo": None, "mu_hi": None},
    "sample": {"mode": "gaussian", "depth": 10, "replicas": 10000, "branching": None,
               "sweeps": 2000, "burn_in": 200, "batches": 20, "g": 0.0, "mu": 0.0,
               "leaf_potential": "couplings"},
    "observable": {"k": 1, "t": 0.1, "support_level": 0, "n_uv_layers": 0,
                   "bulk": "gaussian", "steps": 8, "g": 0.2, "kappa": None, "Y": 0.0,
                   "calibrate_y": False, "cumulants": False},
    "selftest": {"force_fail": False, "selftest_samples": 100000},
}

CHOICES = {
    "preset": ("bms", "custom"), "backend": ("nested", "mc", "montecarlo"),
    "v0": ("zero", "couplings", "csv"), "guess": ("zero", "seed", "csv"),
    "mode": ("gaussian", "mcmc"), "leaf_potential": ("couplings", "fixed_point"),
    "bulk": ("gaussian", "fixed_point", "critical"),
}


# --- configuration -----------------------------------------------------------------

def _resolve(command, file_cfg, overrides):
    allowed = dict(COMMON)
    allowed.update(COMMANDS[command])
    cfg = dict(allowed)
    for source in (file_cfg, overrides):
        unknown = sorted(set(source) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
        cfg.update({k: v for k, v in source.items() if v is not None})
    for key, options in CHOICES.items():
        if key in cfg and cfg[key] not in options:
            raise ConfigError(f"{key} must be one of {options}, got {cfg[key]!r}")
    return cfg


def build_params(cfg):
    try:
        if cfg["preset"] == "bms":
            return RGParams.bms(float(cfg["epsilon"]), p=int(cfg["p"]), l=int(cfg["l"]))
        d = int(cfg["d"])
        phi_dim = cfg["phi_dim"]
        if phi_dim is None:
            phi_dim = (d - float(cfg["epsilon"])) / 4.0
        return RGParams(int(cfg["p"]), d, int(cfg["l"]), float(phi_dim))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model parameters: {exc}") from exc


def build_grid(cfg):
    try:
        return GridSpec(float(cfg["phi_max"]), int(cfg["n_points"]), int(cfg["quad_nodes"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc


def build_backend(cfg):
    try:
        return parse_backend(cfg["backend"], int(cfg["n_samples"]), int(cfg["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid backend settings: {exc}") from exc


# --- commands -------------------------------------------------------------------------

def cmd_flow(cfg, out):
    from .dynamics import flow
    params, grid, backend = build_params(cfg), build_grid(cfg), build_backend(cfg)
    if cfg["v0"] == "zero":
        V0 = SampledEvenFunction.zero(grid)
    elif cfg["v0"] == "csv":
        if not cfg["v0_path"]:
            raise ConfigError("v0 = csv needs v0_path")
        V0 = SampledEvenFunction.from_csv(cfg["v0_path"], grid.quad_nodes).normalize()
    else:
        V0 = from_couplings(grid, {4: float(cfg["g"]), 2: float(cfg["mu"])})
    K = int(cfg["K"])
    res = flow(V0, params, int(cfg["steps"]), backend, K)
    header = ["step"] + [f"c{2 * j}" for j in range(K + 1)] + ["delta_b", "norm"]
    rows = [[r.step, *r.couplings.coefficients, r.delta_b, r.norm] for r in res.records]
    write_csv(os.path.join(out, "flow.csv"), header, rows)
    write_json(os.path.join(out, "summary.json"), {
        "steps_requested": int(cfg["steps"]), "steps_completed": len(res.records),
        "diverged": res.diverged, "message": res.message,
    })
    return 0


def _fp_summary(rec):
    s = rec.summary()
    s["unstable_count"] = rec.unstable_count()
    s["map"] = f"composite of {rec.layers} layer(s), L = p^{rec.layers}"
    return s


def cmd_fixpoint(cfg, out):
    from .dynamics import Collocation, continue_in_epsilon, find_fixed_point, fixed_point_seed
    grid, backend = build_grid(cfg), build_backend(cfg)
    try:
        coll = Collocation(grid, int(cfg["n_coll"]), float(cfg["phi_coll"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    tol = float(cfg["tol"])
    if cfg["eps_list"]:
        if cfg["preset"] != "bms":
            raise ConfigError("eps_list needs the bms preset")
        recs = continue_in_epsilon([float(e) for e in cfg["eps_list"]], grid, tol,
                                   p=int(cfg["p"]), l=int(cfg["l"]), backend=backend,
                                   collocation=coll)
        for rec in recs:
            rec.potential.to_csv(os.path.join(out, f"fixedpoint_eps{rec.epsilon:.6g}.csv"))
        write_json(os.path.join(out, "fixedpoint.json"), {"branch": [_fp_summary(r) for r in recs]})
        return 0
    params = build_params(cfg)
    if cfg["guess"] == "zero":
        guess = SampledEvenFunction.zero(grid)
    elif cfg["guess"] == "csv":
        if not cfg["guess_path"]:
            raise ConfigError("guess = csv needs guess_path")
        guess = SampledEvenFunction.from_csv(cfg["guess_path"], grid.quad_nodes).normalize()
    else:
        guess = fixed_point_seed(params, grid, backend=backend)
    guess = guess * float(cfg["guess_scale"])
    rec = find_fixed_point(guess, params, tol, backend, coll, int(cfg["max_iter"]))
    rec.potential.to_csv(os.path.join(out, "fixedpoint_potential.csv"))
    write_json(os.path.join(out, "fixedpoint.json"), _fp_summary(rec))
    return 0


def cmd_critical_mu(cfg, out):
    from .dynamics import critical_mu
    params, grid, backend = build_params(cfg), build_grid(cfg), build_backend(cfg)
    bracket = None
    if cfg["mu_lo"] is not None or cfg["mu_hi"] is not None:
        if cfg["mu_lo"] is None or cfg["mu_hi"] is None:
            raise ConfigError("give both mu_lo and mu_hi")
        bracket = (float(cfg["mu_lo"]), float(cfg["mu_hi"]))
    res = critical_mu(float(cfg["g"]), params, grid, float(cfg["tol"]), float(cfg["theta"]),
                      int(cfg["max_steps"]), bracket, backend)
    write_json(os.path.join(out, "mu_c.json"), {
        "g": float(cfg["g"]), "mu_c": res.mu_c, "bracket": list(res.bracket),
        "width": res.width,
        "history": [{"lo": h[0], "hi": h[1], "label_a": h[2], "label_b": h[3]}
                    for h in res.history],
    })
    return 0


def cmd_sample(cfg, out):
    from .tree import (exact_covariance_at_level, fit_covariance_exponent,
                       gaussian_correlations, mcmc_perturbed_field)
    params = build_params(cfg)
    D, seed = int(cfg["depth"]), int(cfg["seed"])
    if cfg["mode"] == "gaussian":
        table = gaussian_correlations(params, D, int(cfg["replicas"]), seed, cfg["branching"],
                                      levels=np.arange(1, D + 1))
        table.to_csv(os.path.join(out, "correlations.csv"))
        try:
            expo, err = fit_covariance_exponent(table)
        except DegenerateInput:
            expo, err = None, None
        exact = [exact_covariance_at_level(params, D, int(j)) for j in table.levels]
        write_json(os.path.join(out, "summary.json"), {
            "mode": "gaussian", "depth": D, "replicas": int(cfg["replicas"]),
            "branching": table.meta["branching"], "exponent": expo, "exponent_stderr": err,
            "expected_exponent": 2.0 * params.phi_dim,
            "exact_cov_phi": exact, "levels": table.levels,
        })
        return 0
    grid = build_grid(cfg)
    g, mu = float(cfg["g"]), float(cfg["mu"])
    if cfg["leaf_potential"] == "fixed_point":
        from .dynamics import find_fixed_point, fixed_point_seed
        V = find_fixed_point(fixed_point_seed(params, grid), params).potential
    else:
        V = None if g == 0 and mu == 0 else from_couplings(grid, {4: g, 2: mu})
    res = mcmc_perturbed_field(params, V, D, int(cfg["sweeps"]), int(cfg["burn_in"]), seed,
                               int(cfg["batches"]))
    res.table.to_csv(os.path.join(out, "correlations.csv"))
    write_json(os.path.join(out, "summary.json"), {
        "mode": "mcmc", "depth": D, "sweeps": res.sweeps, "burn_in": res.burn_in,
        "exponent_phi2": res.exponent_phi2, "exponent_phi2_stderr": res.exponent_phi2_stderr,
        "gaussian_exponent_phi2": 4.0 * params.phi_dim,
        "acceptance": res.acceptance, "widths": res.widths,
    })
    return 0


def _bulk(cfg, params, grid, backend):
    from .dynamics import bare_potential, critical_mu, find_fixed_point, fixed_point_seed, flow
    steps = int(cfg["steps"])
    if cfg["bulk"] == "gaussian":
        return [SampledEvenFunction.zero(grid)] * steps, None
    fp = find_fixed_point(fixed_point_seed(params, grid, backend=backend), params,
                          backend=backend)
    if cfg["bulk"] == "fixed_point":
        return [fp.potential] * steps, fp
    res = critical_mu(float(cfg["g"]), params, grid, tol=1e-12, backend=backend)
    fl = flow(bare_potential(grid, float(cfg["g"]), res.mu_c), params, steps - 1, backend,
              keep_potentials=True)
    if fl.diverged:
        raise NumericalFailure("observable", "critical bulk trajectory diverged")
    return fl.potentials, fp


def cmd_observable(cfg, out):
    from .observables import TestFunctionSpec, calibrate_Y, cumulant_series, t_cumulants
    params, grid, backend = build_params(cfg), build_grid(cfg), build_backend(cfg)
    traj, fp = _bulk(cfg, params, grid, backend)
    kappa = cfg["kappa"]
    if kappa is None:
        kappa = fp.kappa if fp is not None and math.isfinite(fp.kappa) else 0.0
    Y = float(cfg["Y"])
    if int(cfg["k"]) == 2 and cfg["calibrate_y"]:
        Y = calibrate_Y(params, traj, kappa, t=float(cfg["t"]),
                        support_level=int(cfg["support_level"]), backend=backend)
    try:
        spec = TestFunctionSpec(int(cfg["k"]), float(cfg["t"]), int(cfg["support_level"]),
                                kappa, Y)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    U = int(cfg["n_uv_layers"])
    res = cumulant_series(spec, traj, params, U, backend)
    weighted = [m * t for m, t in zip(res.multiplicities, res.terms)]
    partial = np.cumsum(weighted)
    write_csv(os.path.join(out, "series.csv"), ["q", "delta_b_diff", "partial_sum"],
              [[q, w, s] for q, (w, s) in enumerate(zip(weighted, partial))])
    summary = {"S_T": res.value, "tail_bound": res.tail_bound, "steps": res.steps,
               "k": spec.k, "t": spec.amplitude, "support_level": spec.support_level,
               "n_uv_layers": U, "kappa": kappa, "Y": Y}
    if cfg["cumulants"]:
        summary["cumulants"] = {str(k): v for k, v in
                                t_cumulants(spec, traj, params, U, backend=backend).items()}
    write_json(os.path.join(out, "cumulants.json"), summary)
    return 0


def selftest_checks(cfg):
    """(name, callable) pairs; each callable returns (passed, detail)."""
    from .dynamics import find_fixed_point
    grid = build_grid(cfg)

    def spectrum():
        worst = 0.0
        for eps in (0.0, 0.1):
            p = RGParams.bms(eps)
            rec = find_fixed_point(SampledEvenFunction.zero(grid), p)
            for k in (2, 4, 6):
                lam = p.gaussian_eigenvalue(k)
                worst = max(worst, float(np.min(np.abs(rec.eigenvalues / lam - 1.0))))
        return worst < 1e-4, f"max rel err {worst:.2e}"

    def quadratic():
        p = RGParams()
        V = SampledEvenFunction.from_callable(grid, lambda x: 0.1 * x * x)
        V1, db = rg_step(V, p)
        err_mu = float(np.max(np.abs(V1.logvals - 2**1.5 * 0.1 * grid.points**2)))
        err_db = abs(db + 3.5 * math.log(1.2))
        return max(err_mu, err_db) < 1e-8, f"mu' err {err_mu:.1e}, delta_b err {err_db:.1e}"

    def deconvolution():
        p = RGParams()
        worst = 0.0
        for W in _test_potentials(grid):
            G, _ = zero_sum_block_integral(W, p)
            lhs = gauss_smooth(G, 1.0 / p.N).logvals
            rhs = p.N * gauss_smooth(W, 1.0).logvals
            m = grid.points <= 6.0
            worst = max(worst, float(np.max(np.abs(lhs[m] - rhs[m]))))
        return worst < 1e-6, f"sup err {worst:.1e}"

    def backends():
        from .blockmap import MonteCarlo
        p, small = RGParams(), GridSpec(6.0, 129)
        worst = 0.0
        for W in _test_potentials(small):
            G, _ = zero_sum_block_integral(W, p)
            Gm, se = zero_sum_block_integral(
                W, p, MonteCarlo(int(cfg["selftest_samples"]), int(cfg["seed"])))
            worst = max(worst, float(np.max(np.abs(Gm.logvals - G.logvals) / se)))
        return worst < 3.0, f"max |z| {worst:.2f}"

    checks = [("gaussian spectrum", spectrum), ("quadratic closed form", quadratic),
              ("deconvolution identity", deconvolution), ("backend equivalence", backends)]
    if cfg["force_fail"]:
        checks.append(("forced failure", lambda: (False, "force_fail set")))
    return checks


def _test_potentials(grid):
    return [SampledEvenFunction.from_callable(grid, f) for f in
            (lambda x: 0.1 * x**2, lambda x: 0.02 * x**4, lambda x: 0.1 * x**2 + 0.02 * x**4)]


def cmd_selftest(cfg, out):
    rows, ok = [], True
    for name, check in selftest_checks(cfg):
        t0 = time.perf_counter()
        try:
            passed, detail = check()
        except HierRGError as exc:
            passed, detail = False, f"error: {exc}"
        rows.append((name, passed, detail, time.perf_counter() - t0))
        ok &= passed
    width = max(len(r[0]) for r in rows)
    for name, passed, detail, dt in rows:
        print(f"{name:<{width}}  {'PASS' if passed else 'FAIL'}  {detail}  ({dt:.1f}s)")
    write_json(os.path.join(out, "selftest.json"),
               {r[0]: {"passed": r[1], "detail": r[2]} for r in rows})
    return 0 if ok else 1


HANDLERS = {"flow": cmd_flow, "fixpoint": cmd_fixpoint, "critical-mu": cmd_critical_mu,
            "sample": cmd_sample, "observable": cmd_observable, "selftest": cmd_selftest}


# --- argument parsing -------------------------------------------------------------------

def _parse_list(text):
    return [float(x) for x in text.split(",") if x.strip()]


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text}")


FLAG_TYPES = {
    "p": int, "d": int, "l": int, "epsilon": float, "phi_dim": float, "phi_max": float,
    "n_points": int, "quad_nodes": int, "n_samples": int, "seed": int, "threads": int,
    "g": float, "mu": float, "steps": int, "K": int, "eps_list": _parse_list,
    "guess_scale": float, "tol": float, "max_iter": int, "n_coll": int, "phi_coll": float,
    "theta": float, "max_steps": int, "mu_lo": float, "mu_hi": float, "depth": int,
    "replicas": int, "branching": int, "sweeps": int, "burn_in": int, "batches": int,
    "k": int, "t": float, "support_level": int, "n_uv_layers": int, "kappa": float,
    "Y": float, "calibrate_y": _bool, "cumulants": _bool, "force_fail": _bool,
    "selftest_samples": int,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="hierrg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"hierrg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None, help="JSON config file")
        for key in list(COMMON) + list(keys):
            flag = "--" + key.replace("_", "-")
            kw = {"dest": key, "default": argparse.SUPPRESS}
            if key in CHOICES:
                kw["choices"] = CHOICES[key]
            elif key in FLAG_TYPES:
                kw["type"] = FLAG_TYPES[key]
            sp.add_argument(flag, **kw)
        # short alias for --depth
        if name == "sample":
            sp.add_argument("--D", dest="depth", type=int, default=argparse.SUPPRESS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    t_start = time.perf_counter()
    try:
        file_cfg = {}
        if config_path:
            try:
                with open(config_path, encoding="utf-8") as fh:
                    file_cfg = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise ConfigError("config must be a JSON object")
        cfg = _resolve(command, file_cfg, args)
        if command != "sample" or cfg["mode"] == "mcmc":
            build_grid(cfg)
        build_params(cfg)
        set_threads(cfg["threads"])
        out = cfg["out"]
        os.makedirs(out, exist_ok=True)
        rc = HANDLERS[command](cfg, out)
    except (ConfigError, MemoryGuardError, UnsupportedBackend) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalFailure as exc:
        print(f"numerical failure in {exc.operation}: {exc}", file=sys.stderr)
        trace = getattr(exc, "trace", None)
        if trace:
            print("trace: " + json.dumps([t if isinstance(t, (int, float)) else str(t)
                                          for t in trace]), file=sys.stderr)
        return 3
    except HierRGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    write_json(os.path.join(out, "provenance.json"),
               provenance(cfg, {"total": time.perf_counter() - t_start}, __version__,
                          get_threads()))
    return rc


if __name__ == "__main__":
    sys.exit(main())
