"""``mdelab``: config-driven experiment runner.

Usage::

    mdelab <command> --config <path> [--seed S] [--out DIR] [--threads K] [--only ID]

Exit status: 0 success, 1 usage error, 2 invalid config, 3 numerical
failure, 4 I/O error, 5 acceptance criteria failed (``verify``).
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .acceptance import CRITERIA, run_acceptance
from .config import COMMANDS, ExperimentConfig, build_spec, load_config
from .dos import dos_on_real_line, estimate_support, holder_check, support_bound
from .herm import SingularMatrixError
from .rmt import (GAPS_COLUMNS, LOCALLAW_COLUMNS, InsufficientStatisticsError, InvalidSpecError,
                  gap_statistics, gue_spec, local_law_experiment, rigidity_experiment)
from .self_energy import KernelError
from .solver import ConvergenceError, solve_at
from .stability import PerronError, StabilityBoundError, stability_diagnostics

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL, EXIT_IO, EXIT_CRITERIA = range(6)


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    def __init__(self, message: str, where: dict | None = None):
        super().__init__(message)
        self.where = where or {}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mdelab", description="Matrix Dyson equation experiments")
    p.add_argument("command", help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads for trials (env MDELAB_THREADS)")
    p.add_argument("--only", action="append", help="verify: run only these criteria (repeatable or comma list)")
    p.add_argument("--version", action="version", version=f"mdelab {__version__}")
    return p


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _num(x) -> str:
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, complex):
        return [_jsonable(obj.real), _jsonable(obj.imag)]
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n",
                    encoding="utf-8")


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# pipelines (each returns the list of written files and an exit status)
# ---------------------------------------------------------------------------


def _zetas(cfg: ExperimentConfig):
    return [z.value for z in cfg.zetas]


def run_solve(cfg: ExperimentConfig, out: Path, threads: int):
    data = build_spec(cfg.data, seed=cfg.seed).data_pair()
    scfg = cfg.solver.build()
    sols = []
    for z in _zetas(cfg):
        try:
            sol = solve_at(data, z, scfg)
        except ConvergenceError as exc:
            raise NumericalFailure(str(exc), {"zeta": z}) from exc
        M = sol.M
        sols.append({"zeta": z, "m_diag": [complex(v) for v in np.diag(M)], "avg": complex(sol.avg),
                     "rho": sol.rho, "residual": sol.residual, "iterations": sol.iterations,
                     "method": sol.method, "min_im_eig": sol.min_im_eig})
    path = out / "solve.json"
    write_json(path, {"N": cfg.data.N, "solutions": sols})
    return [path], EXIT_OK


def run_dos(cfg: ExperimentConfig, out: Path, threads: int):
    data = build_spec(cfg.data, seed=cfg.seed).data_pair()
    kappa = support_bound(data)
    curve = dos_on_real_line(data, cfg.tau.values(), cfg.eta, cfg.solver.build(), kappa=kappa,
                             mode=cfg.dos_mode)
    csv_path = out / "dos.csv"
    curve.to_csv(csv_path)
    est = estimate_support(curve, cfg.delta, kappa)
    summary = {"kappa": kappa, "kappa_minus": est.kappa_minus, "kappa_plus": est.kappa_plus,
               "gaps": est.gaps, "delta": cfg.delta, "empty": est.empty, "contained": est.contained,
               "mass": curve.mass(), "missing_points": int((~curve.converged).sum())}
    if curve.tau.size >= 10:
        hc = holder_check(curve)
        summary["holder"] = {"best_exponent": hc.best_exponent, "fits": hc.exponents}
    js = out / "support.json"
    write_json(js, summary)
    status = EXIT_OK if curve.converged.all() else EXIT_NUMERICAL
    return [csv_path, js], status


def run_stability(cfg: ExperimentConfig, out: Path, threads: int):
    data = build_spec(cfg.data, seed=cfg.seed).data_pair()
    points = []
    for z in _zetas(cfg):
        try:
            sol = solve_at(data, z, cfg.solver.build())
            diag = stability_diagnostics(sol, data.S)
        except (ConvergenceError, SingularMatrixError, PerronError, StabilityBoundError) as exc:
            raise NumericalFailure(str(exc), {"zeta": z}) from exc
        points.append({"zeta": z, **diag.__dict__})
    path = out / "stability.json"
    write_json(path, {"N": cfg.data.N, "points": points})
    return [path], EXIT_OK


def run_locallaw(cfg: ExperimentConfig, out: Path, threads: int):
    rep = local_law_experiment(lambda N: build_spec(cfg.data, N, cfg.seed), cfg.sizes(),
                               lambda N: complex(cfg.tau0, cfg.eta_for(N)), cfg.trials,
                               cfg.solver.build(), threads=threads)
    csv_path = out / "locallaw.csv"
    write_csv(csv_path, LOCALLAW_COLUMNS, ([r[c] for c in LOCALLAW_COLUMNS] for r in rep.rows))
    js = out / "locallaw.json"
    fit = lambda f: None if f is None else f.__dict__  # noqa: E731
    write_json(js, {"entry_slope": fit(rep.entry_slope), "trace_slope": fit(rep.trace_slope),
                    "medians": rep.medians, "failures": rep.failures, "trials": cfg.trials})
    return [csv_path, js], EXIT_NUMERICAL if rep.failures else EXIT_OK


def run_rigidity(cfg: ExperimentConfig, out: Path, threads: int):
    spec = build_spec(cfg.data, seed=cfg.seed)
    curve = dos_on_real_line(spec.data_pair(), cfg.tau.values(), cfg.eta, cfg.solver.build(), mode="march")
    if not curve.converged.all():
        bad = curve.tau[~curve.converged]
        raise NumericalFailure("density could not be computed on the whole grid", {"tau": bad.tolist()})
    rep = rigidity_experiment(spec, curve, cfg.delta, cfg.trials, threads=threads,
                              keep_eigenvalues=cfg.dump_eigenvalues)
    rows = []
    for t in range(cfg.trials):
        for j in np.flatnonzero(rep.bulk_mask):
            rows.append((t, float(rep.taus[j]), int(rep.indices[j]), float(rep.deviations[t, j])))
    csv_path = out / "rigidity.csv"
    write_csv(csv_path, ("trial", "tau", "index", "deviation"), rows)
    N = spec.N
    js = out / "rigidity.json"
    write_json(js, {"N": N, "trials": cfg.trials, "delta": cfg.delta,
                    "fractions_exceeding": rep.fractions_exceeding,
                    "fraction_within_10logN_over_N": rep.fraction_within(10 * np.log(N) / N),
                    "bulk_points": int(rep.bulk_mask.sum())})
    files = [csv_path, js]
    if cfg.dump_eigenvalues:
        ev = out / "eigenvalues.csv"
        write_csv(ev, ("trial", "index", "lambda"),
                  ((t, i + 1, float(v)) for t, lam in enumerate(rep.eigenvalues) for i, v in enumerate(lam)))
        files.append(ev)
    return files, EXIT_OK


def run_gaps(cfg: ExperimentConfig, out: Path, threads: int):
    spec = build_spec(cfg.data, seed=cfg.seed)
    lo, hi = cfg.window
    taus = np.linspace(lo - 0.2, hi + 0.2, int(round((hi - lo + 0.4) / 0.01)) + 1)
    curve = dos_on_real_line(spec.data_pair(), taus, cfg.eta, cfg.solver.build(), mode="march")
    ref = gue_spec(spec.N, seed=cfg.seed + 1)
    ref_curve = dos_on_real_line(ref.data_pair(), taus, cfg.eta, cfg.solver.build(), mode="march")
    try:
        st = gap_statistics(spec, cfg.trials, cfg.window, curve, reference=ref, reference_curve=ref_curve,
                            reference_trials=cfg.reference_trials, threads=threads)
    except InsufficientStatisticsError as exc:
        raise NumericalFailure(str(exc), {"window": list(cfg.window)}) from exc
    csv_path = out / "gaps.csv"
    write_csv(csv_path, GAPS_COLUMNS, st.rows)
    js = out / "gaps.json"
    write_json(js, {"ks_distance": st.ks_distance, "ks_pvalue": st.ks_pvalue, "n_gaps": int(st.unfolded.size),
                    "mean_unfolded": st.mean_unfolded, "reference": "gue", "window": list(cfg.window)})
    return [csv_path, js], EXIT_OK


def run_verify(cfg: ExperimentConfig, out: Path, threads: int, only=None):
    only = only or cfg.verify.only
    results = run_acceptance(cfg.verify.scale, only=only, threads=threads,
                             report=lambda line: print(line, flush=True))
    board = {"scale": cfg.verify.scale, "all_passed": all(r.passed for r in results),
             "criteria": {r.id: r.as_dict() for r in results}}
    path = out / "scoreboard.json"
    write_json(path, board)
    return [path], EXIT_OK if board["all_passed"] else EXIT_CRITERIA


PIPELINES = {"solve": run_solve, "dos": run_dos, "stability": run_stability, "locallaw": run_locallaw,
             "rigidity": run_rigidity, "gaps": run_gaps, "verify": run_verify}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def _threads(arg) -> int:
    if arg is not None:
        k = arg
    else:
        env = os.environ.get("MDELAB_THREADS", "").strip()
        if not env:
            return 1
        try:
            k = int(env)
        except ValueError:
            raise UsageError(f"MDELAB_THREADS must be an integer, got {env!r}") from None
    if k < 1:
        raise UsageError("thread count must be positive")
    return k


def _split_only(values):
    if not values:
        return None
    ids = [v.strip().upper() for item in values for v in item.split(",") if v.strip()]
    unknown = [c for c in ids if c not in CRITERIA]
    if unknown:
        raise UsageError(f"unknown criterion id(s): {', '.join(unknown)}")
    return ids


def _format_validation(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  {loc}: {err['msg']}")
    return "invalid config:\n" + "\n".join(lines)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command not in COMMANDS:
            raise UsageError(f"unknown command {args.command!r} (choose from {', '.join(COMMANDS)})")
        if args.only and args.command != "verify":
            raise UsageError("--only is only valid with 'verify'")
        only = _split_only(args.only)
        threads = _threads(args.threads)
    except UsageError as exc:
        print(f"mdelab: error: {exc}", file=sys.stderr)
        build_parser().print_usage(sys.stderr)
        return EXIT_USAGE

    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"mdelab: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(text)
        update = {"command": args.command}
        if args.seed is not None:
            update["seed"] = args.seed
        if args.out is not None:
            update["out"] = args.out
        cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **update})
        build_spec(cfg.data, seed=cfg.seed)  # model-level checks (kernel sizes, profiles)
    except ValidationError as exc:
        print(f"mdelab: {_format_validation(exc)}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KernelError, InvalidSpecError) as exc:
        print(f"mdelab: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".mdelab-write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        print(f"mdelab: output directory not writable: {exc}", file=sys.stderr)
        return EXIT_IO

    started = _now()
    failure = None
    files: list[Path] = []
    try:
        if args.command == "verify":
            files, status = run_verify(cfg, out, threads, only)
        else:
            files, status = PIPELINES[args.command](cfg, out, threads)
    except NumericalFailure as exc:
        failure = {"message": str(exc), **exc.where}
        status = EXIT_NUMERICAL
    except (ConvergenceError, SingularMatrixError, PerronError, StabilityBoundError,
            InsufficientStatisticsError) as exc:
        failure = {"message": str(exc)}
        for key in ("zeta", "eta"):
            if getattr(exc, key, None) is not None:
                failure[key] = getattr(exc, key)
        status = EXIT_NUMERICAL
    except OSError as exc:
        print(f"mdelab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if failure is not None:
        print(f"mdelab: numerical failure: {failure['message']}", file=sys.stderr)

    manifest = {"tool": "mdelab", "version": __version__, "command": args.command,
                "config_sha256": cfg.sha256(), "config": cfg.model_dump(mode="json"),
                "started": started, "finished": _now(), "status": status,
                "artifacts": {p.name: _sha256(p) for p in files}}
    if failure is not None:
        manifest["failure"] = failure
    try:
        write_json(out / "manifest.json", manifest)
    except OSError as exc:
        print(f"mdelab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return status


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
