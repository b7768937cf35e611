"""Command-line entry point: ``hypocert <subcommand> [flags]``.

Every subcommand prints one JSON document (keys sorted) to stdout and writes
its artifacts into ``--out``.  Exit codes: 0 pass, 1 check failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import math
import os
import sys
import warnings
from importlib import resources
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import __version__, decay, disc, hypo, model, sampler, sphere
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("hypocert")

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
FAULTS = ("sign-flip", "zero-s", "noise-a")


# ---------------------------------------------------------------------------
# helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def load_schema(name: str) -> dict:
    """Shipped JSON schema, e.g. ``load_schema("certify")``."""
    fname = name if name.endswith(".json") else f"{name}.schema.json"
    return json.loads(resources.files("hypocert").joinpath("schemas", fname).read_text(encoding="utf-8"))


def build_potential(cfg: RunConfig) -> model.Potential:
    m = cfg.model
    if m["potential"] == "torus":
        pot = model.torus_potential(m["amplitude"], m["d"])
    else:
        pot = model.quadratic_potential(m["a"])
    if m["poincare"] is not None:
        pot = dataclasses.replace(pot, poincare_constant=float(m["poincare"]))
    return pot


def build_model(cfg: RunConfig) -> model.FiberModel:
    return model.FiberModel(cfg.model["d"], cfg.model["sigma"], build_potential(cfg))


def _xgrid(cfg: RunConfig, pot: model.Potential, n: Optional[int] = None) -> disc.XGrid:
    g = cfg.grid
    want = "torus" if pot.periodic else "box"
    if g["mode"] != want:
        raise ConfigError(f"grid.mode={g['mode']!r} does not match the {pot.name} potential (needs {want!r})")
    if pot.dim > 2:
        raise ConfigError("grid computations support d <= 2 only")
    return disc.XGrid(pot.dim, n or g["n_x"], g["mode"], g["half_width"])


def _lambda_source(cfg: RunConfig, pot: model.Potential):
    """(Λ, source) from config, closed form, or the configured grid."""
    if cfg.model["poincare"] is not None:
        return float(cfg.model["poincare"]), "config"
    if pot.poincare_constant is not None:
        return float(pot.poincare_constant), ("bakry-emery" if pot.name == "quadratic" else "closed-form")
    if "grid" not in cfg.sections_present:
        raise ConfigError(
            "missing input: Poincare constant (set model.poincare or add a [grid] section to compute it)"
        )
    return disc.poincare_constant(pot, _xgrid(cfg, pot)), "grid"


def _n2_elliptic(cfg: RunConfig, m: model.FiberModel, seed: int, xg=None, samples=None) -> float:
    xg = xg or _xgrid(cfg, m.potential)
    k = samples or cfg.certify["n2_samples"]
    # stream keyed on the sample count so a doubled run is an independent draw
    return disc.estimate_N2(m, xg, k, sampler.stream(seed, 7, k))


def _emit(doc: dict, cmd: str, args, cfg: RunConfig) -> None:
    meta = {
        "command": cmd,
        "version": __version__,
        "seed": args.seed,
        "config": cfg.as_dict(),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    out = dict(doc)
    out["metadata"] = meta
    text = json.dumps(_clean(out), sort_keys=True, indent=2)
    print(text)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, f"{cmd}.json"), "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _write(args, name: str, text: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


# ---------------------------------------------------------------------------
# subcommands


def cmd_verify_sphere(cfg: RunConfig, args) -> tuple[dict, int]:
    d = cfg.model["d"]
    if d == 2:
        quad = sphere.angle_grid(cfg.sampler["angle_nodes"])
    else:
        quad = sphere.monte_carlo(d, cfg.sampler["mc_nodes"], args.seed)
    checks = sphere.verify_identities(d, quad, seed=args.seed, fault=args.fault)
    items = [{"name": c.name, "violation": abs(c.value - c.exact), "tolerance": c.tolerance,
              "passed": c.passed} for c in checks]
    failed = [c.name for c in checks if not c.passed]
    doc = {"status": "fail" if failed else "pass", "quadrature": quad.kind, "d": d,
           "nodes": int(quad.nodes.shape[0]), "identities": items, "failed": failed}
    return doc, EXIT_FAIL if failed else EXIT_PASS


def _rate_block(lm, lM, n1, n2) -> dict:
    r = hypo.optimize_rate(lm, lM, n1, n2)
    return {"delta_star": r.delta, "eps_star": r.eps, "kappa": r.kappa, "kappa1": r.kappa1, "kappa2": r.kappa2}


def cmd_rates(cfg: RunConfig, args) -> tuple[dict, int]:
    pot = build_potential(cfg)
    lam, source = _lambda_source(cfg, pot)
    m = model.FiberModel(cfg.model["d"], cfg.model["sigma"], dataclasses.replace(pot, poincare_constant=lam))
    lm, lM, n1 = model.analytic_constants(m)
    doc = {"status": "pass", "lambda": lam, "lambda_source": source,
           "constants": {"lambda_m": lm, "lambda_M": lM, "n1": n1}, "notes": []}
    n2, n2_source = cfg.model["n2"], "supplied"
    if args.n2:
        est = _n2_elliptic(cfg, m, args.seed)
        doc["n2_elliptic"] = est
        if n2 is not None:
            note = hypo.compare_n2(n2, est)
            if note:
                doc["notes"].append(note)
        n2, n2_source = est, "elliptic"
    if n2 is None:
        doc["notes"].append("N2 not available: set model.n2 or pass --n2; optimizer skipped")
        doc["optimizer"] = None
        doc["n2_source"] = None
    else:
        doc["constants"]["n2"] = float(n2)
        doc["n2_source"] = n2_source
        doc["optimizer"] = _rate_block(lm, lM, n1, n2)
    return doc, EXIT_PASS


def _inject(ops: hypo.OperatorSet, fault: Optional[str], seed: int) -> hypo.OperatorSet:
    if fault == "zero-s":
        return dataclasses.replace(ops, S=ops.S * 0.0, label=ops.label + "+zero-s")
    if fault == "noise-a":
        rng = sampler.stream(seed, 99)
        noise = sp.random(ops.dim, ops.dim, density=min(1.0, 20.0 / ops.dim), random_state=rng) * 1e-3
        return dataclasses.replace(ops, A=(ops.A + noise).tocsr() if sp.issparse(ops.A) else ops.A + noise.toarray(),
                                   label=ops.label + "+noise-a")
    return ops


def _certify_grid(cfg: RunConfig, m: model.FiberModel, n_x: int, n_alpha: int, args, decay_check: bool):
    g = cfg.grid
    xg = _xgrid(cfg, m.potential, n_x)
    grid = disc.Grid2x1(xg, n_alpha)
    out = {"grid": {"mode": g["mode"], "n_x": n_x, "n_alpha": n_alpha, "size": grid.size}}
    if not xg.periodic:
        mass = xg.boundary_mass(m.potential)
        out["boundary_mass"] = mass
        if mass >= cfg.certify["boundary_mass"]:
            out["failure"] = f"boundary mass {mass:.3g} exceeds {cfg.certify['boundary_mass']:.1g}: enlarge the box"
            return out, None
    ops = _inject(disc.discretize_fiber(m, grid, g["stabilization"]), args.fault, args.seed)
    tol = {k: cfg.certify["tolerance"] for k in hypo.DEFAULT_TOL}
    report = hypo.check_structure(ops, tol)
    struct = dict(report.violations)
    failures = report.failures()
    B = mc = None
    if report.ok:
        B = hypo.build_B(ops, cfg.certify["method"])
        mc = hypo.measure_constants(ops, B)
        # microscopic coercivity belongs to the admissibility check
        struct["microscopic_coercivity"] = mc.lambda_m
        if not (mc.lambda_m > cfg.certify["tolerance"]):
            failures.append("microscopic_coercivity")
        if not (mc.lambda_M > cfg.certify["tolerance"]):
            failures.append("macroscopic_coercivity")
    out["structure"] = {"violations": struct, "failures": failures, "passed": not failures}
    out["instance_hash"] = ops.fingerprint()
    if failures:
        out["failure"] = "structure check failed: " + ", ".join(failures)
        return out, None
    out["measured"] = {"lambda_m": mc.lambda_m, "lambda_M": mc.lambda_M, "n1": mc.n1, "n2": mc.n2,
                       "n1_variants": mc.n1_variants, "n2_variants": mc.n2_variants,
                       "kernel_violations": mc.kernel_violations}
    notes = list(mc.notes)
    if args.n2:
        est = _n2_elliptic(cfg, m, args.seed, xg)
        out["n2_elliptic"] = est
        note = hypo.compare_n2(mc.n2, est)
        if note:
            notes.append(note)
    try:
        cert = hypo.HypoCertificate.from_constants(
            mc.lambda_m, mc.lambda_M, mc.n1, mc.n2,
            provenance={k: "measured" for k in ("lambda_m", "lambda_M", "n1", "n2")},
            tolerances=report.tolerances, instance_hash=ops.fingerprint(), seed=args.seed,
            notes=notes, n2_source="operator-norm",
        )
    except hypo.InfeasibleRateError as exc:
        out["failure"] = f"rate optimization infeasible: {exc}"
        return out, None
    out["certificate"] = cert.to_dict()
    if decay_check:
        rng = sampler.stream(args.seed, 3)
        G = rng.standard_normal((ops.dim, cfg.certify["n_g"]))
        rep = hypo.certify_decay(ops, cert, G, cfg.certify["times"], cfg.certify["slack"])
        out["decay"] = {"times": rep.times, "max_ratio": rep.max_ratio, "passed": rep.passed,
                        "slack": rep.slack, "max_ratio_by_time": rep.ratios.max(axis=1)}
        if not rep.passed:
            out["failure"] = f"decay bound violated: max ratio {rep.max_ratio:.6g}"
    return out, cert


def cmd_certify(cfg: RunConfig, args) -> tuple[dict, int]:
    m = build_model(cfg)
    if m.d != 2:
        raise ConfigError("certify discretizes d = 2 only")
    n_x, n_a = cfg.grid["n_x"], cfg.grid["n_alpha"]
    fine, cert = _certify_grid(cfg, m, n_x, n_a, args, decay_check=True)
    doc = {"result": fine}
    ok = "failure" not in fine
    if args.refine and ok:
        coarse, _ = _certify_grid(cfg, m, max(n_x // 2, disc.MIN_NODES), max(n_a // 2, disc.MIN_NODES),
                                  args, decay_check=False)
        doc["coarse"] = coarse
        if "measured" in coarse:
            doc["refinement"] = {
                k: {"coarse": coarse["measured"][k], "fine": fine["measured"][k],
                    "ratio": fine["measured"][k] / coarse["measured"][k]}
                for k in ("lambda_m", "lambda_M", "n1", "n2")
            }
    doc["status"] = "pass" if ok else "fail"
    return doc, EXIT_PASS if ok else EXIT_FAIL


def cmd_simulate(cfg: RunConfig, args) -> tuple[dict, int]:
    m = build_model(cfg)
    s = cfg.sampler
    x0, w0 = sampler.sample_equilibrium(m, sampler.stream(args.seed, 0, 1), 1)
    p0 = sampler.PhasePoint(x0[0], w0[0])
    traj = sampler.simulate(m, p0, sampler.SdeConfig(s["dt"], s["steps"], args.seed, s["stride"]))
    path = _write(args, "trajectory.csv", traj.to_csv())
    doc = {"status": "pass", "file": os.path.basename(path), "rows": int(traj.times.size),
           "params": {"d": m.d, "sigma": m.sigma, "potential": m.potential.name, "dt": s["dt"],
                      "steps": s["steps"], "stride": s["stride"], "seed": args.seed,
                      "x0": p0.x, "omega0": p0.omega}}
    return doc, EXIT_PASS


def _analytic_certificate(cfg: RunConfig, m: model.FiberModel, args, notes: list):
    try:
        lam, source = _lambda_source(cfg, m.potential)
    except ConfigError as exc:
        notes.append(f"no certificate: {exc}")
        return None
    mm = model.FiberModel(m.d, m.sigma, dataclasses.replace(m.potential, poincare_constant=lam))
    lm, lM, n1 = model.analytic_constants(mm)
    if args.n2:
        n2, n2_source = _n2_elliptic(cfg, mm, args.seed), "elliptic"
    elif cfg.model["n2"] is not None:
        n2, n2_source = cfg.model["n2"], "supplied"
    else:
        notes.append("no certificate: N2 unavailable (set model.n2 or pass --n2)")
        return None
    prov = {"lambda_m": "analytic", "lambda_M": f"analytic ({source})", "n1": "analytic", "n2": n2_source}
    return hypo.HypoCertificate.from_constants(lm, lM, n1, n2, provenance=prov, seed=args.seed,
                                               n2_source=n2_source)


def cmd_decay(cfg: RunConfig, args) -> tuple[dict, int]:
    m = build_model(cfg)
    s = cfg.sampler
    notes: list = []
    cert = _analytic_certificate(cfg, m, args, notes)
    curve = decay.decay_curve(m, decay.omega_component(0), s["times"], s["outer"], s["inner"],
                              s["dt"], args.seed, cert)
    path = _write(args, "decay.csv", curve.to_csv())
    doc = {"status": "pass", "file": os.path.basename(path), "observable": "omega_1",
           "params": curve.params, "clipped": curve.clipped, "mean_shift": curve.mean_shift,
           "mean_shift_se": curve.mean_shift_se, "notes": notes}
    try:
        fit = decay.fit_curve(curve)
        doc["fit"] = {"rate": fit.rate, "ci95": fit.ci, "points": fit.points}
    except ValueError as exc:
        doc["fit"] = None
        notes.append(f"rate fit skipped: {exc}")
    if not np.any(m.potential.gradient(np.zeros(m.d))) and m.potential.params.get("amplitude", None) == 0.0:
        doc["analytic_rate"] = m.sigma**2 * (m.d - 1) / 2.0
    code = EXIT_PASS
    if cert is not None:
        doc["certificate"] = cert.to_dict()
        excess = curve.envelope_excess()
        doc["max_excess_se"] = float(np.max(excess))
        if np.max(excess) > 3.0:
            doc["status"] = "fail"
            code = EXIT_FAIL
    return doc, code


def cmd_elliptic(cfg: RunConfig, args) -> tuple[dict, int]:
    m = build_model(cfg)
    n, k = cfg.grid["n_x"], cfg.certify["n2_samples"]
    base = _n2_elliptic(cfg, m, args.seed, _xgrid(cfg, m.potential, n), k)
    doc = {"status": "pass", "n2": base, "grid_n": n, "samples": k}
    ok = math.isfinite(base) and base > 0
    if args.refine:
        grid2 = _n2_elliptic(cfg, m, args.seed, _xgrid(cfg, m.potential, 2 * n), k)
        samp2 = _n2_elliptic(cfg, m, args.seed, _xgrid(cfg, m.potential, n), 2 * k)
        dg, ds = abs(grid2 / base - 1.0), abs(samp2 / base - 1.0)
        doc["refinement"] = {"grid_doubled": grid2, "samples_doubled": samp2,
                             "grid_rel_change": dg, "sample_rel_change": ds,
                             "grid_stable": dg <= 0.2, "sample_stable": ds <= 0.1}
        ok = ok and dg <= 0.2 and ds <= 0.1
    if not ok:
        doc["status"] = "fail"
    return doc, EXIT_PASS if ok else EXIT_FAIL


def cmd_gap(cfg: RunConfig, args) -> tuple[dict, int]:
    pot = build_potential(cfg)
    xg = _xgrid(cfg, pot)
    lam = disc.poincare_constant(pot, xg)
    doc = {"status": "pass", "poincare": lam, "grid": {"mode": xg.mode, "n": xg.n, "dim": xg.dim}}
    ref = pot.poincare_constant
    if cfg.model["poincare"] is None and ref is not None:
        doc["reference"] = ref
        doc["rel_error"] = abs(lam - ref) / ref
    ok = math.isfinite(lam) and lam > 0
    if not ok:
        doc["status"] = "fail"
    return doc, EXIT_PASS if ok else EXIT_FAIL


COMMANDS = {
    "verify-sphere": cmd_verify_sphere,
    "rates": cmd_rates,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "decay": cmd_decay,
    "elliptic": cmd_elliptic,
    "gap": cmd_gap,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI run configuration")
    common.add_argument("--seed", type=int, default=None, help="overrides sampler.seed")
    common.add_argument("--out", metavar="DIR", default=None, help="output directory (overrides output.dir)")
    common.add_argument("--n2", action="store_true", help="run the elliptic N2 estimator")
    common.add_argument("--refine", action="store_true", help="run a second resolution and report ratios")
    common.add_argument("--fault", choices=FAULTS, default=None, help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="hypocert", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = cfg.sampler["seed"]
        cfg.sampler["seed"] = args.seed
        if args.out is None:
            args.out = cfg.output["dir"]
        cfg.output["dir"] = args.out
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            doc, code = COMMANDS[args.command](cfg, args)
        if caught:
            doc.setdefault("warnings", [])
            doc["warnings"] += sorted({str(w.message) for w in caught})
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, hypo.InfeasibleRateError) as exc:
        # model/parameter errors surfaced by modules are configuration problems
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _emit(doc, args.command, args, cfg)
    if code != EXIT_PASS:
        print(f"{args.command}: check failed", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
