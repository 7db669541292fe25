"""Command-line front end.

Exit status is 0 on success, 1 for invalid input and 2 for numerical
failures; errors are reported as a JSON object on stderr.
"""

import argparse
import json
import logging
import os
import pickle
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import CalibrationConfig, calibrate, compute_weights, resolve_stabilization
from .core import ConstraintSpec, LinearRule, SourceSample, build_constraint_matrix, read_csv
from .exceptions import CalitrError, MissingFile, SchemaMismatch, ValidationError
from .io import canonical_json, read_json, read_table, write_json, write_table
from .nuisance import fit_nuisance
from .policy import GaConfig, ga_optimize
from .simulate import METHODS, ScenarioSpec, Truth, run_replications
from .value import PseudoOutcomes, variance_nonparametric, variance_parametric

logger = logging.getLogger("calitr")

DEFAULT_SEED = 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _existing(path):
    if not Path(path).exists():
        raise MissingFile(f"no such file: {path}")
    return path


def _stabilization(gamma, text):
    if text is None or text == "default":
        return resolve_stabilization(gamma)
    if text in ("none", "off"):
        return None
    if text == "auto":
        return "auto"
    try:
        return float(text)
    except ValueError:
        raise ValidationError(f"--stabilize expects auto, none, default or a number, got {text!r}") from None


def _config(args):
    skip = {"func", "quiet", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _load_sample(path):
    return read_csv(_existing(path), SourceSample)


def _load_constraints(path):
    return ConstraintSpec.from_json(_existing(path))


# --------------------------------------------------------------- commands


def cmd_calibrate(args):
    sample = _load_sample(args.data)
    spec = _load_constraints(args.constraints)
    cfg = CalibrationConfig(gamma=args.gamma, tol=args.tol, max_iter=args.max_iter,
                            stabilization=_stabilization(args.gamma, args.stabilize))
    sol = calibrate(build_constraint_matrix(sample, spec), cfg)
    write_table(args.out, ["i", "weight", "W"],
                [(i, w, W) for i, (w, W) in enumerate(zip(sol.weights, sol.W))],
                args.seed, _config(args))
    diag = sol.diagnostics()
    diag["constraints"] = spec.to_dict()
    write_json(args.diagnostics or f"{args.out}.json", diag, args.seed, _config(args))


def cmd_fit_nuisance(args):
    sample = _load_sample(args.data)
    fit = fit_nuisance(sample, args.mode, seed=args.seed)
    payload = {"mode": fit.mode, "n": sample.n}
    if fit.is_parametric:
        payload["eta"] = fit.eta_hat
        payload["theta"] = fit.theta_hat
    else:
        model_path = f"{args.out}.model.pkl"
        with open(model_path, "wb") as fh:
            pickle.dump(fit, fh, protocol=4)
        payload["model_file"] = os.path.basename(model_path)
        payload["propensity"] = {"kind": "kernel",
                                 "bandwidths": list(fit.propensity.bandwidths)}
        payload["outcome"] = {"kind": "forest", "trees": 200, "seed": args.seed}
    write_json(args.out, payload, args.seed, _config(args))


def _solve_weights(sample, args):
    if not args.constraints:
        return None
    spec = _load_constraints(args.constraints)
    cfg = CalibrationConfig(gamma=args.gamma,
                            stabilization=_stabilization(args.gamma, args.stabilize))
    return calibrate(build_constraint_matrix(sample, spec), cfg)


def _estimate(sample, rule, fit, po, sol):
    if fit.is_parametric:
        return variance_parametric(sample, rule, fit, sol)
    return variance_nonparametric(sample, rule, po, sol)


def cmd_learn(args):
    sample = _load_sample(args.data)
    seeds = np.random.SeedSequence(args.seed).generate_state(2)
    sol = _solve_weights(sample, args)                       # step 1
    fit = fit_nuisance(sample, args.mode, seed=int(seeds[0]))  # step 2
    po = PseudoOutcomes.from_fit(sample, fit)
    W = None if sol is None else sol.W
    ga = GaConfig(population_size=args.population, generations=args.generations,
                  restarts=args.restarts, seed=int(seeds[1]))
    result = ga_optimize(lambda B: po.values(B, W), sample.p, ga, vectorized=True)  # step 3
    est = _estimate(sample, result.rule, fit, po, sol)
    payload = {"beta": result.rule.beta, "value": est.value, "se": est.se,
               "mode": est.mode, "calibrated": sol is not None, "n": sample.n}
    write_json(args.out, payload, args.seed, _config(args))


def _weights_from_file(sample, path):
    _existing(path)
    header, rows = read_table(path)
    if header[:2] != ["i", "weight"]:
        raise ValidationError(f"{path}: expected columns i,weight,W")
    w = np.array([float(r[1]) for r in rows])
    if w.shape[0] != sample.n:
        raise ValidationError(f"{path}: {w.shape[0]} weights for {sample.n} rows")
    sidecar = Path(f"{path}.json")
    if sidecar.exists():
        diag = read_json(sidecar)
        spec = ConstraintSpec.from_dict(diag["constraints"])
        cfg = CalibrationConfig(gamma=float(diag["gamma"]),
                                stabilization=diag.get("a_n"))
        sol = compute_weights(build_constraint_matrix(sample, spec).G,
                              np.array(diag["lambda_hat"]), cfg)
        if np.max(np.abs(sol.weights - w)) > 1e-9:
            raise ValidationError(f"{path}: weights disagree with their diagnostics file")
        return sol
    warnings.warn("no diagnostics file next to the weights; multiplier uncertainty is ignored")
    return w


def cmd_evaluate(args):
    sample = _load_sample(args.data)
    rule = LinearRule(np.array(read_json(_existing(args.rule))["beta"], dtype=float))
    weights = _weights_from_file(sample, args.weights) if args.weights else None
    fit = fit_nuisance(sample, args.mode, seed=args.seed)
    po = PseudoOutcomes.from_fit(sample, fit)
    if weights is None or not isinstance(weights, np.ndarray):
        est = _estimate(sample, rule, fit, po, weights)
        payload = est.to_dict()
    else:
        W = sample.n * weights
        p = po.psi(rule.decide(sample.X))
        value = float(W @ p / sample.n)
        se = float(np.sqrt(np.mean((W * p - value) ** 2) / sample.n))
        payload = {"value": value, "se": se, "n": sample.n, "mode": fit.mode,
                   "calibrated": True, "beta": rule.beta,
                   "ci_lower": value - 1.959963984540054 * se,
                   "ci_upper": value + 1.959963984540054 * se}
    write_json(args.out, payload, args.seed, _config(args))


def cmd_simulate(args):
    methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
    spec = ScenarioSpec(args.scenario, args.design, args.n, args.n_target, args.seed)
    truth = None
    if args.truth_value is not None and args.truth_beta:
        truth = Truth(args.truth_value, LinearRule(np.array(
            [float(v) for v in args.truth_beta.split(",")])))
    ga = GaConfig(population_size=args.population, generations=args.generations,
                  restarts=args.restarts)

    def progress(done, total):
        if done == total or done % max(1, total // 10) == 0:
            logger.info("replication %d/%d", done, total)

    report = run_replications(spec, methods, args.reps, args.mode, ga=ga,
                              truth_target=truth, progress=progress)
    body = report.to_dict()
    write_json(args.out, body, args.seed, _config(args))
    if args.table:
        column = f"s{spec.scenario}_n{spec.n}"
        write_table(args.table, ["method", "statistic", column], report.table_rows(),
                    args.seed, _config(args), delimiter="\t")
    if args.emit_plot_data:
        rows = [(r["rep"], r["method"], r.get("value"), r.get("se"), r.get("target_value"),
                 r.get("pcd"), r.get("error") or "") for r in report.records]
        write_table(args.emit_plot_data,
                    ["rep", "method", "value", "se", "target_value", "pcd", "error"],
                    rows, args.seed, _config(args))


REPORT_FIELDS = ("value", "se", "n", "mode")


def cmd_report(args):
    if not args.estimates:
        raise ValidationError("report needs at least one estimate file")
    rows = []
    keys = None
    for path in args.estimates:
        est = read_json(_existing(path))
        missing = [k for k in REPORT_FIELDS if k not in est]
        if missing:
            raise SchemaMismatch(f"{path}: missing fields {missing}")
        k = sorted(set(est) - {"provenance"})
        if keys is not None and k != keys:
            raise SchemaMismatch(f"{path}: fields {k} differ from {keys}")
        keys = k
        half = 1.959963984540054 * float(est["se"])
        rows.append({"file": os.path.basename(path), "mode": est["mode"],
                     "value": float(est["value"]), "se": float(est["se"]), "n": int(est["n"]),
                     "ci_lower": float(est["value"]) - half,
                     "ci_upper": float(est["value"]) + half})
    header = ["file", "mode", "value", "se", "n", "ci_lower", "ci_upper"]
    if str(args.out).endswith(".json"):
        write_json(args.out, {"rows": rows}, args.seed, _config(args))
    else:
        write_table(args.out, header, [[r[h] for h in header] for r in rows],
                    args.seed, _config(args), delimiter="\t")


# ----------------------------------------------------------------- parser


def build_parser():
    parser = _Parser(prog="calitr", description="Calibrated treatment rule learning.")
    parser.add_argument("--version", action="version", version=f"calitr {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("calibrate", parents=[common], help="solve calibration weights")
    p.add_argument("--data", required=True)
    p.add_argument("--constraints", required=True)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--stabilize", default="default")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit-nuisance", parents=[common], help="fit propensity and outcome models")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=["I", "II"], default="I")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_nuisance)

    p = sub.add_parser("learn", parents=[common], help="learn a treatment rule")
    p.add_argument("--data", required=True)
    p.add_argument("--constraints")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--stabilize", default="default")
    p.add_argument("--mode", choices=["I", "II"], default="I")
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--generations", type=int, default=150)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("evaluate", parents=[common], help="estimate the value of a rule")
    p.add_argument("--data", required=True)
    p.add_argument("--rule", required=True)
    p.add_argument("--weights")
    p.add_argument("--mode", choices=["I", "II"], default="I")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("simulate", parents=[common], help="run a replication study")
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--design", default="observational")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--n-target", type=int, default=100_000)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--mode", choices=["I", "II"], default="I")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--population", type=int, default=100)
    p.add_argument("--generations", type=int, default=150)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--truth-value", type=float)
    p.add_argument("--truth-beta")
    p.add_argument("--out", required=True)
    p.add_argument("--table")
    p.add_argument("--emit-plot-data")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", parents=[common], help="merge estimate files")
    p.add_argument("estimates", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _emit_error(code, message, exit_code, extra=None):
    body = {"error": {"code": code, "message": message, "exit_code": exit_code}}
    if extra:
        body["error"].update(extra)
    sys.stderr.write(canonical_json(body))
    return exit_code


def main(argv=None):
    """Run one command and return its exit status."""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
    except CalitrError as exc:
        return _emit_error(exc.code, str(exc), exc.exit_code)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    logger.info("calitr %s %s config=%s", __version__, args.command,
                json.dumps(_config(args), sort_keys=True, default=str))
    try:
        args.func(args)
    except CalitrError as exc:
        extra = {k: v for k, v in exc.to_dict().items() if k not in ("code", "message")}
        return _emit_error(exc.code, str(exc), exc.exit_code, extra)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        return _emit_error("input.invalid", f"{type(exc).__name__}: {exc}", 1)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        return _emit_error("numerical.failure", f"{type(exc).__name__}: {exc}", 2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
