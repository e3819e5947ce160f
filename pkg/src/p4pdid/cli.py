"""
Batch command-line interface.

Every command writes into ``--out`` under fixed file names and always leaves
a ``manifest.json`` behind, also when it fails. Exit codes: 0 success, 1 I/O
problem, 2 invalid data, configuration or design, 3 numerical
non-convergence (outputs are still written and flagged in the manifest).

Timestamps in the manifest honour ``SOURCE_DATE_EPOCH`` so that seeded
reruns can be compared byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .core import StudyConfig, load_admissions, summarize, validate_did_assumptions
from .did import InteractionScheme, SchemeKind, build_design, fit_multivariate_mixed
from .effects import did_reduction, marginal_effects
from .exceptions import (ConfigError, P4PError, SeparationError, SingularMatrixError,
                         LineSearchError, RankError)
from .inference import cluster_bootstrap, coefficient_table, wilks_parallel_trend_test
from .riskadjust import (LogisticMixedSpec, collapse_to_panel, fit_logistic_mixed,
                         predict_probabilities, read_panel, write_panel)
from .sim import GeneratorTruth, recovery_study

logger = logging.getLogger("p4pdid")

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_NONCONVERGED = 3

PANEL_FILE = "panel.csv"
COEFFICIENTS_FILE = "coefficients.csv"
JOINT_TEST_FILE = "joint_test.json"
MARGINS_FILE = "margins.csv"
DID_SUMMARY_FILE = "did_summary.csv"
MANIFEST_FILE = "manifest.json"
BOOTSTRAP_FILE = "bootstrap.csv"
SUMMARY_FILE = "summary.csv"
VALIDATION_FILE = "validation.json"
RECOVERY_CSV = "recovery.csv"
RECOVERY_JSON = "recovery.json"


class _NumericalFailure(Exception):
    """Raised internally once outputs are written but some stage did not converge."""


def _default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
    else:
        moment = datetime.now(tz=timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


def file_digest(path) -> str:
    """SHA-256 of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """
    Provenance record of one command invocation.

    Input digests are taken before any computation. ``write`` is called in
    a ``finally`` block so the manifest exists on every exit path.
    """

    def __init__(self, command: str, out_dir: Path, seed: int, workers: int):
        self.command = command
        self.out_dir = out_dir
        self.data = {
            "command": command,
            "tool_version": __version__,
            "seed": int(seed),
            "workers_requested": int(workers),
            "started": _timestamp(),
            "config": None,
            "inputs": {},
            "stages": {},
            "outputs": {},
            "status": "running",
            "exit_code": None,
            "error": None,
        }

    def add_input(self, role: str, path) -> None:
        path = Path(path)
        self.data["inputs"][role] = {"path": path.name, "sha256": file_digest(path)}

    def stage(self, name: str, converged: bool, **extra) -> None:
        self.data["stages"][name] = {"converged": bool(converged), **extra}

    def add_output(self, name: str) -> None:
        self.data["outputs"][name] = file_digest(self.out_dir / name)

    def finish(self, code: int, error: Optional[str] = None) -> None:
        self.data["exit_code"] = int(code)
        self.data["status"] = {EXIT_OK: "ok", EXIT_NONCONVERGED: "non-converged"}.get(code, "failed")
        self.data["error"] = error
        self.data["finished"] = _timestamp()

    def write(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, pd.Series):
        return {str(k): v for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _load_config(args) -> StudyConfig:
    config = StudyConfig.from_json(args.config) if args.config else StudyConfig()
    if args.seed is not None:
        config = StudyConfig.from_dict({**config.to_dict(), "seed": int(args.seed)})
    return config


def _configure(args, manifest: RunManifest) -> StudyConfig:
    config = _load_config(args)
    manifest.data["config"] = config.to_dict()
    manifest.data["seed"] = config.seed
    return config


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# --------------------------------------------------------------------------- commands

def cmd_validate(args, manifest: RunManifest) -> int:
    config = _configure(args, manifest)
    path = _require_file(args.input)
    manifest.add_input("admissions", path)
    ds = load_admissions(path, config)
    report = validate_did_assumptions(ds, config.years)
    payload = {"ok": report.ok, **report.to_dict()}
    _write_json(manifest.out_dir / VALIDATION_FILE, payload)
    manifest.add_output(VALIDATION_FILE)
    manifest.stage("validate", True, switching_wards=len(report.switching_wards),
                   attrition_wards=len(report.attrition))
    if not report.ok:
        shown = ", ".join("/".join(w) for w in report.switching_wards[:5])
        print(f"error: {len(report.switching_wards)} ward(s) switch treatment status: {shown}",
              file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def cmd_adjust(args, manifest: RunManifest) -> int:
    config = _configure(args, manifest)
    path = _require_file(args.input)
    manifest.add_input("admissions", path)
    ds = load_admissions(path, config)

    specs = [LogisticMixedSpec(o, ward_covariates=config.ward_covariates, tol=config.glmm_tol,
                               max_iter=config.max_iter) for o in config.outcomes]
    if args.workers > 1 and len(specs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=min(args.workers, len(specs))) as pool:
            fitted = list(pool.map(_fit_outcome, [(ds, s) for s in specs]))
    else:
        fitted = [_fit_outcome((ds, s)) for s in specs]

    probs = {}
    separated = []
    for spec, (fit, err) in zip(specs, fitted):
        if err is not None:
            # one separated outcome does not stop the others
            separated.append(spec.outcome)
            manifest.stage(f"glmm:{spec.outcome}", False, error=err)
            print(f"error: {spec.outcome}: {err}", file=sys.stderr)
            continue
        manifest.stage(f"glmm:{spec.outcome}", fit.converged,
                       sigma_mu_sq=fit.sigma_mu_sq, sigma_nu_sq=fit.sigma_nu_sq,
                       loglik=fit.loglik, n_obs=fit.n_obs)
        probs[spec.outcome] = predict_probabilities(fit, ds).values
    if not probs:
        raise _NumericalFailure("no outcome could be fitted")
    panel = collapse_to_panel(ds, probs, config.first_year)
    write_panel(panel, manifest.out_dir / PANEL_FILE)
    manifest.add_output(PANEL_FILE)
    stages = manifest.data["stages"]
    if separated or not all(s["converged"] for s in stages.values()):
        bad = sorted(k.split(":", 1)[1] for k, s in stages.items() if not s["converged"])
        raise _NumericalFailure(f"outcome fits not converged: {', '.join(bad)}")
    return EXIT_OK


def _fit_outcome(args):
    ds, spec = args
    try:
        return fit_logistic_mixed(ds, spec), None
    except SeparationError as exc:
        return None, str(exc)


def cmd_did(args, manifest: RunManifest) -> int:
    config = _configure(args, manifest)
    B = config.bootstrap_replicates if args.B is None else int(args.B)
    if B != 0 and B < 100:
        raise ConfigError(f"bootstrap needs B >= 100 (or 0 to skip), got {B}")
    path = _require_file(args.panel)
    manifest.add_input("panel", path)
    panel = read_panel(path, config.first_year)
    scheme = InteractionScheme.coerce(args.scheme)
    manifest.data["scheme"] = scheme.name
    manifest.data["bootstrap_replicates"] = B

    design = build_design(panel, scheme, config=config)
    fit = fit_multivariate_mixed(design, weighted=config.weighted, tol=config.mvmm_tol,
                                 max_iter=config.max_iter, curvature=B > 0)
    manifest.stage("mvmm", fit.converged, iterations=fit.iterations, loglik=fit.loglik,
                   ridge=fit.ridge, sigma_alpha_sq=fit.sigma_alpha_sq)
    out = manifest.out_dir

    boot = None
    if B > 0:
        boot = cluster_bootstrap(design, scheme, B=B, seed=config.seed, config=config,
                                 workers=args.workers, fit=fit, weighted=config.weighted,
                                 tol=config.mvmm_tol, max_iter=config.max_iter)
        manifest.stage("bootstrap", boot.valid, n_failed=boot.n_failed, B=B)
        boot.to_csv(out / BOOTSTRAP_FILE)
        manifest.add_output(BOOTSTRAP_FILE)
    coefficient_table(fit, boot).to_csv(out / COEFFICIENTS_FILE, index=False, lineterminator="\n")
    manifest.add_output(COEFFICIENTS_FILE)

    if scheme.kind is SchemeKind.BASE:
        try:
            joint = wilks_parallel_trend_test(panel, scheme, config=config)
            payload = {"term": joint.term, "n": joint.n, **joint.to_dict()}
            manifest.stage("wilks", True)
        except RankError as exc:
            payload = {"error": str(exc)}
            manifest.stage("wilks", False, error=str(exc))
        _write_json(out / JOINT_TEST_FILE, payload)
        manifest.add_output(JOINT_TEST_FILE)

    margins = marginal_effects(fit, design)
    margins.to_csv(out / MARGINS_FILE)
    manifest.add_output(MARGINS_FILE)
    baseline = max(config.pre_years)
    summary = did_reduction(margins, baseline_year=baseline, post_years=config.post_years)
    summary.to_csv(out / DID_SUMMARY_FILE)
    manifest.add_output(DID_SUMMARY_FILE)

    if not all(s["converged"] for s in manifest.data["stages"].values()):
        bad = sorted(k for k, s in manifest.data["stages"].items() if not s["converged"])
        raise _NumericalFailure(f"stages not converged: {', '.join(bad)}")
    return EXIT_OK


def cmd_simulate(args, manifest: RunManifest) -> int:
    path = _require_file(args.truth)
    manifest.add_input("truth", path)
    truth = GeneratorTruth.from_json(path)
    if args.seed is not None:
        truth = GeneratorTruth.from_dict({**truth.to_dict(), "seed": int(args.seed)})
    manifest.data["seed"] = int(truth.seed)
    config = StudyConfig.from_json(args.config) if args.config else truth.study_config()
    manifest.data["config"] = config.to_dict()
    manifest.data["truth"] = truth.to_dict()
    report = recovery_study(truth, args.replicates, mode=args.mode, scheme=args.scheme,
                            bootstrap=args.bootstrap, config=config, workers=args.workers)
    report.to_csv(manifest.out_dir / RECOVERY_CSV)
    report.to_json(manifest.out_dir / RECOVERY_JSON)
    manifest.add_output(RECOVERY_CSV)
    manifest.add_output(RECOVERY_JSON)
    manifest.stage("recovery", report.n_failed == 0, replicates=args.replicates,
                   n_failed=report.n_failed)
    return EXIT_OK


def cmd_summarize(args, manifest: RunManifest) -> int:
    config = _configure(args, manifest)
    path = _require_file(args.input)
    manifest.add_input("admissions", path)
    ds = load_admissions(path, config)
    summarize(ds).to_csv(manifest.out_dir / SUMMARY_FILE)
    manifest.add_output(SUMMARY_FILE)
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _common_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="StudyConfig JSON file")
    parser.add_argument("--seed", type=int, default=default, help="random seed (overrides config)")
    parser.add_argument("--workers", type=int, default=default,
                        help="worker processes (default: available cores)")
    parser.add_argument("--out", default=default, help="output directory (default: .)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="p4pdid",
        description="Risk adjustment and difference-in-differences evaluation of a "
                    "ward-level pay-for-performance policy.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _common_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("validate", help="check schema and DID assumptions of admissions")
    p.add_argument("input", help="admissions CSV")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("adjust", help="fit the outcome GLMMs and write the ward-month panel")
    p.add_argument("input", help="admissions CSV")
    p.set_defaults(func=cmd_adjust)

    p = sub.add_parser("did", help="fit the DID model, bootstrap and joint pre-trend test")
    p.add_argument("panel", help="ward-month panel CSV")
    p.add_argument("--scheme", default="base",
                   choices=[k.value for k in SchemeKind], help="interaction scheme")
    p.add_argument("-B", "--bootstrap", dest="B", type=int, default=None,
                   help="bootstrap replicates (>= 100, 0 skips; default from config)")
    p.set_defaults(func=cmd_did)

    p = sub.add_parser("simulate", help="closed-loop parameter recovery study")
    p.add_argument("truth", help="generator truth JSON")
    p.add_argument("--replicates", type=int, default=200)
    p.add_argument("--mode", choices=("patient", "panel"), default="panel")
    p.add_argument("--scheme", default="base", choices=[k.value for k in SchemeKind])
    p.add_argument("--bootstrap", type=int, default=0,
                   help="inner bootstrap replicates per outer replicate (0: Wald intervals)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("summarize", help="yearly descriptive statistics of admissions")
    p.add_argument("input", help="admissions CSV")
    p.set_defaults(func=cmd_summarize)

    for name, sp in sub.choices.items():
        # the global flags are accepted after the command name as well
        _common_flags(sp, suppress=True)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, _NumericalFailure):
        return EXIT_NONCONVERGED
    if isinstance(exc, (SeparationError, SingularMatrixError, LineSearchError)):
        return EXIT_NONCONVERGED
    if isinstance(exc, P4PError):
        return EXIT_INVALID
    if isinstance(exc, (OSError, UnicodeDecodeError)):
        return EXIT_IO
    return EXIT_INVALID


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers is None:
        args.workers = _default_workers()
    if args.workers < 1:
        parser.error("--workers must be at least 1")
    out_dir = Path(args.out or ".")
    seed = args.seed if args.seed is not None else 0
    manifest = RunManifest(args.command, out_dir, seed, args.workers)
    code, error = EXIT_OK, None
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        code = args.func(args, manifest)
    except Exception as exc:  # every failure maps onto the exit-code contract
        code = _exit_code(exc)
        error = f"{type(exc).__name__}: {exc}"
        if code == EXIT_INVALID and not isinstance(exc, P4PError):
            logger.exception("unexpected failure")
        print(f"error: {exc}", file=sys.stderr)
    finally:
        manifest.finish(code, error)
        try:
            manifest.write()
        except OSError as exc:
            print(f"error: cannot write manifest: {exc}", file=sys.stderr)
            code = code or EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
