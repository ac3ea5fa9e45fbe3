"""Acceptance battery AC1..AC12, shared by ``mdelab verify`` and the test suite.

Every criterion returns a :class:`CriterionResult` with the measured values
it was judged on.  ``scale="desk"`` uses the sizes the criteria prescribe;
``scale="quick"`` shrinks sizes and trial counts for smoke runs (statistical
criteria are then not expected to be meaningful).
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import herm
from .dos import dos_on_real_line, estimate_support, support_bound
from .rmt import (error_matrix, filter_spec, gap_statistics, gue_spec, goe_spec, local_law_experiment,
                  minor_resolvent, resolvent, rigidity_experiment, delocalization_check, sample,
                  ward_check)
from .self_energy import MeanField, random_flat_kernel
from .solver import (DataPair, SolverConfig, record_solves, semicircle_density, solve_at,
                     solve_perturbed)
from .stability import (compute_saturation, derivative_operator, fit_sandwich_bounds,
                        normalized_saturation, spectral_gap_verify, spectral_radius_identity_check)

CRITERIA = tuple(f"AC{i}" for i in range(1, 13))


@dataclass
class CriterionResult:
    id: str
    title: str
    passed: bool
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        return f"{self.id} {'PASS' if self.passed else 'FAIL'} {self.title}: {self.detail} [{self.seconds:.1f}s]"

    def as_dict(self) -> dict:
        return {"passed": self.passed, "title": self.title, "measured": self.measured,
                "seconds": self.seconds, "detail": self.detail}


SCALES = {
    "desk": dict(ac3_pairs=10, ac3_N=32, ac4_draws=20, ac7_draws=20, ac7_N=64,
                 ll_Ns=(256, 512, 1024, 2048), ll_trials=100, rig_N=1024, rig_trials=10,
                 deloc_trials=10, gap_N=1024, gap_trials=50),
    "quick": dict(ac3_pairs=2, ac3_N=12, ac4_draws=6, ac7_draws=4, ac7_N=32,
                  ll_Ns=(64, 128), ll_trials=4, rig_N=128, rig_trials=2,
                  deloc_trials=2, gap_N=256, gap_trials=4),
}


class _Context:
    """Shared state of one battery run (cached experiments, solve log)."""

    def __init__(self, scale: str, threads: int):
        if scale not in SCALES:
            raise ValueError(f"unknown scale {scale!r}")
        self.scale = scale
        self.p = SCALES[scale]
        self.threads = threads
        self.cache: dict = {}
        self.solve_log: list = []


def _wigner(N: int) -> DataPair:
    return DataPair(np.zeros((N, N)), MeanField(N))


def _flat_pair(N: int, rng: np.random.Generator, a_scale: float = 0.3) -> DataPair:
    return DataPair(herm.random_hermitian(N, rng, a_scale), random_flat_kernel(N, rng))


# ---------------------------------------------------------------------------
# deterministic criteria
# ---------------------------------------------------------------------------


def ac1(ctx: _Context) -> CriterionResult:
    t0 = time.perf_counter()
    taus = np.linspace(-1.8, 1.8, 73)
    curve = dos_on_real_line(_wigner(50), taus, eta_target=1e-3)
    err = float(np.max(np.abs(curve.rho_extrapolated - semicircle_density(taus))))
    rho0 = float(curve.rho_extrapolated[36])
    dt = time.perf_counter() - t0
    ok = err <= 1e-2 and abs(rho0 - 1 / np.pi) <= 1e-2 and dt < 10.0
    return CriterionResult("AC1", "semicircle oracle", ok,
                           {"max_error": err, "rho0": rho0, "runtime_s": dt},
                           detail=f"max|rho-rho_sc|={err:.2e}, rho(0)={rho0:.6f}, {dt:.2f}s")


def ac2(ctx: _Context) -> CriterionResult:
    # a small battery of its own, plus every solve recorded during this run
    with record_solves() as log:
        rng = np.random.default_rng(2)
        for z in (1j, 0.5 + 0.01j, 2.1 + 1e-3j):
            solve_at(_wigner(16), z)
        for _ in range(3):
            d = _flat_pair(8, rng)
            solve_at(d, complex(rng.uniform(-1, 1), 0.05))
    entries = ctx.solve_log + log
    worst_res = max(e[3] for e in entries)
    worst_im = min(e[4] for e in entries)
    ok = worst_res <= 1e-10 and worst_im > 0
    return CriterionResult("AC2", "residual contract", ok,
                           {"solves": len(entries), "max_residual": worst_res, "min_im_eig": worst_im},
                           detail=f"{len(entries)} solves, max residual {worst_res:.2e}, min Im eig {worst_im:.2e}")


def ac3(ctx: _Context) -> CriterionResult:
    rng = np.random.default_rng(3)
    N = ctx.p["ac3_N"]
    worst = -np.inf
    ok = True
    rows = []
    for _ in range(ctx.p["ac3_pairs"]):
        d = _flat_pair(N, rng)
        kappa = support_bound(d)
        taus = np.arange(-kappa - 1.0, kappa + 1.0 + 1e-9, 0.05)
        curve = dos_on_real_line(d, taus, eta_target=1e-3, kappa=kappa, mode="march")
        est = estimate_support(curve, 0.01)
        excess = max(-kappa - est.kappa_minus, est.kappa_plus - kappa) if not est.empty else -np.inf
        worst = max(worst, excess)
        ok &= bool(est.empty or excess <= 0.05)
        rows.append((kappa, est.kappa_minus, est.kappa_plus))
    return CriterionResult("AC3", "support containment", ok,
                           {"pairs": rows, "worst_excess": worst},
                           detail=f"worst excess over kappa {worst:.3f} (limit 0.05)")


def ac4(ctx: _Context) -> CriterionResult:
    rng = np.random.default_rng(4)
    results = []
    for i in range(ctx.p["ac4_draws"]):
        N = (4, 6, 8)[i % 3]
        d = _flat_pair(N, rng)
        zeta = complex(rng.uniform(-1, 1), rng.choice([0.1, 0.3, 1.0]))
        sat = compute_saturation(solve_at(d, zeta), d.S)
        T = normalized_saturation(sat)
        g, G = fit_sandwich_bounds(T)
        results.append(spectral_gap_verify(T, g, G))
    ok = all(r.passed for r in results)
    slack = min(r.theta_observed - r.theta_predicted for r in results)
    return CriterionResult("AC4", "spectral gap lemma", ok,
                           {"n": len(results), "passed": sum(r.passed for r in results), "min_slack": slack},
                           detail=f"{sum(r.passed for r in results)}/{len(results)} pass, "
                                  f"min(theta_obs - theta_pred) = {slack:.3e}")


def ac5(ctx: _Context) -> CriterionResult:
    rng = np.random.default_rng(5)
    errs = []
    skipped = 0
    for N in (4, 8, 12):
        for _ in range(3):
            d = _flat_pair(N, rng)
            kappa = support_bound(d)
            for eta in (0.1, 0.3, 1.0):
                sol = solve_at(d, complex(rng.uniform(-1, 1), eta))
                chk = spectral_radius_identity_check(compute_saturation(sol, d.S), sol, kappa)
                if chk.hypotheses_met:
                    errs.append(chk.rel_error)
                else:
                    skipped += 1
    wd = _wigner(8)
    wig = solve_at(wd, 1j)
    wig_err = spectral_radius_identity_check(compute_saturation(wig, wd.S), wig).rel_error
    worst = max(errs) if errs else np.nan
    ok = bool(errs) and worst <= 1e-8 and wig_err <= 1e-12
    return CriterionResult("AC5", "spectral radius identity", ok,
                           {"checked": len(errs), "skipped": skipped, "max_rel_error": worst,
                            "wigner_rel_error": wig_err},
                           detail=f"{len(errs)} pairs, max rel err {worst:.2e}; Wigner {wig_err:.2e}")


FD_STEPS = (1e-2, 1e-3)


def ac6(ctx: _Context) -> CriterionResult:
    N = 8
    d = _wigner(N)
    zeta = 0.3 + 0.1j
    sol = solve_at(d, zeta)
    deriv = derivative_operator(sol, d.S)
    rng = np.random.default_rng(6)
    cfg = SolverConfig(tol=1e-15)
    orders = []
    for _ in range(5):
        R = herm.random_hermitian(N, rng)
        R /= np.abs(R).max()
        exact = deriv.total(R)
        errs = []
        for t in FD_STEPS:
            gp = solve_perturbed(d, zeta, t * R, cfg, sol.M)
            gm = solve_perturbed(d, zeta, -t * R, cfg, sol.M)
            errs.append(float(np.abs((gp - gm) / (2 * t) - exact).max()))
        orders.append(float(np.log(errs[0] / errs[1]) / np.log(FD_STEPS[0] / FD_STEPS[1])))
    ok = min(orders) >= 1.9
    return CriterionResult("AC6", "derivative of the solution map", ok, {"orders": orders, "steps": FD_STEPS},
                           detail=f"min observed order {min(orders):.3f} over 5 directions")


def ac7(ctx: _Context) -> CriterionResult:
    N = ctx.p["ac7_N"]
    rng = np.random.default_rng(7)
    makers = (lambda: gue_spec(N, seed=70), lambda: goe_spec(N, seed=71),
              lambda: filter_spec(N, seed=72), lambda: filter_spec(N, beta=1, seed=73))
    specs = [m() for m in makers]
    ward = dres = schur = 0.0
    for i in range(ctx.p["ac7_draws"]):
        spec = specs[i % len(specs)]
        H = sample(spec, i).H
        zeta = complex(rng.uniform(-1.5, 1.5), rng.choice([0.01, 0.1, 1.0]))
        G = resolvent(H, zeta)
        ward = max(ward, ward_check(G, zeta))
        dres = max(dres, error_matrix(H, G, spec.bare, spec.self_energy, zeta)[1])
        B = rng.choice(N, size=2, replace=False)
        schur = max(schur, minor_resolvent(H, B, zeta, G=G).schur_residual)
    ok = ward <= 1e-10 and dres <= 1e-12 and schur <= 1e-10
    return CriterionResult("AC7", "exact identities", ok, {"ward": ward, "d_identity": dres, "schur": schur},
                           detail=f"Ward {ward:.1e}, D-identity {dres:.1e}, Schur {schur:.1e}")


# ---------------------------------------------------------------------------
# statistical criteria
# ---------------------------------------------------------------------------


def _local_law(ctx: _Context):
    if "locallaw" not in ctx.cache:
        out = {}
        for name, maker in (("gue", gue_spec), ("filter", filter_spec)):
            out[name] = local_law_experiment(lambda N, m=maker: m(N, seed=800), ctx.p["ll_Ns"],
                                             lambda N: complex(0.0, N ** -0.6), ctx.p["ll_trials"],
                                             threads=ctx.threads, compute_d=False)
        ctx.cache["locallaw"] = out
    return ctx.cache["locallaw"]


def _log_corrected_slope(rep) -> float:
    # informational: divide out the sqrt(log N^2) growth of a maximum over N^2 entries
    Ns = np.array(list(rep.medians))
    x = np.log([rep.medians[N]["n_eta"] for N in Ns])
    y = np.log([rep.medians[N]["lambda"] for N in Ns]) - 0.5 * np.log(4 * np.log(Ns))
    return float(np.polyfit(x, y, 1)[0])


def ac8(ctx: _Context) -> CriterionResult:
    reps = _local_law(ctx)
    slopes = {k: r.entry_slope.slope for k, r in reps.items()}
    ok = all(-0.65 <= s <= -0.35 for s in slopes.values())
    return CriterionResult("AC8", "entrywise local law scaling", ok,
                           {"slopes": slopes, "medians": {k: r.medians for k, r in reps.items()},
                            "ci": {k: (r.entry_slope.ci_low, r.entry_slope.ci_high) for k, r in reps.items()},
                            "log_corrected_slopes": {k: _log_corrected_slope(r) for k, r in reps.items()}},
                           detail=", ".join(f"{k} slope {s:.3f}" for k, s in slopes.items()) + " (band [-0.65,-0.35])")


def ac9(ctx: _Context) -> CriterionResult:
    reps = _local_law(ctx)
    slopes = {k: r.trace_slope.slope for k, r in reps.items()}
    ok = all(-1.3 <= s <= -0.7 for s in slopes.values())
    return CriterionResult("AC9", "averaged local law scaling", ok,
                           {"slopes": slopes,
                            "ci": {k: (r.trace_slope.ci_low, r.trace_slope.ci_high) for k, r in reps.items()}},
                           detail=", ".join(f"{k} slope {s:.3f}" for k, s in slopes.items()) + " (band [-1.3,-0.7])")


def _gue_curve(ctx: _Context, N: int):
    key = ("gue_curve", N)
    if key not in ctx.cache:
        taus = np.linspace(-2.1, 2.1, 421)
        ctx.cache[key] = dos_on_real_line(gue_spec(N).data_pair(), taus, eta_target=1e-3, mode="march")
    return ctx.cache[key]


def ac10(ctx: _Context) -> CriterionResult:
    N = ctx.p["rig_N"]
    curve = _gue_curve(ctx, N)
    taus = np.linspace(-1.9, 1.9, 77)
    rep = rigidity_experiment(gue_spec(N, seed=1000), curve, 0.05, ctx.p["rig_trials"], taus=taus,
                              threads=ctx.threads)
    frac = rep.fraction_within(10 * np.log(N) / N)
    ok = frac >= 0.9
    return CriterionResult("AC10", "rigidity", ok,
                           {"fraction_within": frac, "fractions_exceeding": rep.fractions_exceeding,
                            "bulk_points": int(rep.bulk_mask.sum())},
                           detail=f"{100 * frac:.1f}% of deviations <= 10 log N / N")


def ac11(ctx: _Context) -> CriterionResult:
    N = ctx.p["rig_N"]
    rep = delocalization_check(gue_spec(N, seed=1100), ctx.p["deloc_trials"], _gue_curve(ctx, N), 0.05,
                               threads=ctx.threads)
    ok = rep.fraction_within >= 0.99
    return CriterionResult("AC11", "delocalization", ok,
                           {"fraction_within": rep.fraction_within, "max": rep.max_value,
                            "vectors": int(rep.values.size), "fitted_C": rep.fitted_C},
                           detail=f"{100 * rep.fraction_within:.2f}% of {rep.values.size} bulk vectors <= 30 "
                                  f"(max {rep.max_value:.1f})")


def ac12(ctx: _Context) -> CriterionResult:
    N = ctx.p["gap_N"]
    trials = ctx.p["gap_trials"]
    window = (-0.5, 0.5)
    taus = np.linspace(-0.7, 0.7, 141)
    ref = gue_spec(N, seed=1201)
    ref_curve = dos_on_real_line(ref.data_pair(), taus, eta_target=1e-3, mode="march")
    corr = filter_spec(N, seed=1202)
    corr_curve = dos_on_real_line(corr.data_pair(), taus, eta_target=1e-3, mode="march")
    uni = gap_statistics(corr, trials, window, corr_curve, reference=ref, reference_curve=ref_curve,
                         threads=ctx.threads)
    null = gap_statistics(gue_spec(N, seed=1203), trials, window, ref_curve, reference=ref,
                          reference_curve=ref_curve, threads=ctx.threads)
    ok = uni.ks_distance <= 0.1 and null.ks_distance <= 0.03 and uni.unfolded.size >= 5000
    return CriterionResult("AC12", "gap universality", ok,
                           {"ks": uni.ks_distance, "null_ks": null.ks_distance, "gaps": int(uni.unfolded.size),
                            "mean_unfolded": uni.mean_unfolded, "null_mean_unfolded": null.mean_unfolded},
                           detail=f"KS {uni.ks_distance:.4f} (<=0.1), null KS {null.ks_distance:.4f} (<=0.03), "
                                  f"{uni.unfolded.size} gaps, mean {uni.mean_unfolded:.3f}")


_RUNNERS: dict[str, Callable[[_Context], CriterionResult]] = {
    "AC1": ac1, "AC2": ac2, "AC3": ac3, "AC4": ac4, "AC5": ac5, "AC6": ac6,
    "AC7": ac7, "AC8": ac8, "AC9": ac9, "AC10": ac10, "AC11": ac11, "AC12": ac12,
}


def run_criterion(cid: str, ctx: _Context) -> CriterionResult:
    t0 = time.perf_counter()
    try:
        with record_solves() as log:
            res = _RUNNERS[cid](ctx)
        ctx.solve_log.extend(log)
    except Exception as exc:  # a crash is a failed criterion, not a crashed battery
        res = CriterionResult(cid, "error", False, {"error": repr(exc)}, detail=f"raised {exc!r}")
    res.seconds = time.perf_counter() - t0
    return res


def run_acceptance(scale: str = "desk", only=None, threads: int = 1,
                   report: Callable[[str], None] | None = None) -> list[CriterionResult]:
    """Run the battery (AC2 last so it sees every recorded solve)."""
    ids = list(CRITERIA) if not only else [c.upper() for c in only]
    unknown = [c for c in ids if c not in _RUNNERS]
    if unknown:
        raise ValueError(f"unknown criteria: {', '.join(unknown)}")
    ctx = _Context(scale, threads)
    order = [c for c in ids if c != "AC2"] + (["AC2"] if "AC2" in ids else [])
    results = {}
    for cid in order:
        results[cid] = run_criterion(cid, ctx)
        if report is not None:
            report(results[cid].line())
    return [results[c] for c in ids]
