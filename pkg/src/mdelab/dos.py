"""Self-consistent density of states, its support and the eigenvalue index map."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .self_energy import cp_op_norm
from .solver import (ConvergenceError, DataPair, MdeSolution, SolverConfig, continuation_sweep,
                     default_eta_grid, solve_at)


def harmonic_dos(sol: MdeSolution) -> float:
    """``Im <M(zeta)> / pi``."""
    return float(sol.avg.imag / np.pi)


def support_bound(data: DataPair) -> float:
    """``||A|| + 2 ||S||^{1/2}``; the self-consistent spectrum lies in ``[-kappa, kappa]``."""
    return float(data.a_norm + 2.0 * np.sqrt(cp_op_norm(data.S)))


def richardson_zero(etas: Sequence[float], values: Sequence[float]) -> float:
    """Value at ``eta = 0`` of the quadratic through three ``(eta, value)`` points."""
    etas = np.asarray(etas, dtype=float)
    values = np.asarray(values, dtype=float)
    if etas.size != 3:
        raise ValueError("Richardson extrapolation needs exactly three points")
    # Lagrange basis evaluated at 0
    total = 0.0
    for i in range(3):
        others = [etas[j] for j in range(3) if j != i]
        total += values[i] * np.prod([-e for e in others]) / np.prod([etas[i] - e for e in others])
    return float(total)


@dataclass
class DosCurve:
    tau: np.ndarray
    eta: np.ndarray
    rho: np.ndarray
    rho_extrapolated: np.ndarray
    converged: np.ndarray
    extrapolated: bool = True

    @property
    def values(self) -> np.ndarray:
        """Best available density values (extrapolated when present)."""
        return self.rho_extrapolated if self.extrapolated else self.rho

    @property
    def step(self) -> float:
        return float(np.max(np.diff(self.tau))) if self.tau.size > 1 else 0.0

    def mass(self) -> float:
        ok = np.isfinite(self.values)
        return float(np.trapezoid(np.where(ok, self.values, 0.0), self.tau))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\r\n")
            w.writerow(["tau", "eta", "rho", "rho_extrapolated", "converged"])
            for row in zip(self.tau, self.eta, self.rho, self.rho_extrapolated, self.converged):
                w.writerow([_fmt(row[0]), _fmt(row[1]), _fmt(row[2]), _fmt(row[3]), int(bool(row[4]))])

    @classmethod
    def from_csv(cls, path) -> "DosCurve":
        cols = {k: [] for k in ("tau", "eta", "rho", "rho_extrapolated", "converged")}
        with open(path, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                for k in cols:
                    cols[k].append(float(rec[k]))
        return cls(*(np.array(cols[k]) for k in ("tau", "eta", "rho", "rho_extrapolated")),
                   np.array(cols["converged"], dtype=bool))


def _fmt(x) -> str:
    return format(float(x), ".17g")


def dos_on_real_line(data: DataPair, taus: Sequence[float], eta_target: float = 1e-3,
                     cfg: SolverConfig | None = None, extrapolate: bool = True,
                     ratio: float = 0.5, kappa: float | None = None, mode: str = "sweep") -> DosCurve:
    """Density of states on a grid of real energies.

    With ``mode="sweep"`` each energy is reached by a warm-started sweep down a
    geometric eta grid.  ``mode="march"`` sweeps only at the first energy (and
    after a failure) and then steps along the energy grid, warm-starting the
    three lowest eta levels from the neighbouring energy; this is several
    times cheaper on fine grids.  The value at ``eta_target`` and a
    three-point Richardson extrapolation to ``eta -> 0`` are reported.  Failed
    points are marked unconverged with NaN values; the curve is still returned.
    """
    if mode not in ("sweep", "march"):
        raise ValueError(f"unknown mode {mode!r}")
    if eta_target <= 0:
        raise ValueError("eta_target must be positive")
    taus = np.asarray(taus, dtype=float)
    if kappa is None:
        kappa = support_bound(data)
    grid = default_eta_grid(kappa, eta_target, ratio)
    n = taus.size
    rho = np.full(n, np.nan)
    rho_ex = np.full(n, np.nan)
    ok = np.zeros(n, dtype=bool)
    prev = None
    for i, tau in enumerate(taus):
        try:
            if mode == "march" and prev is not None:
                sweep = [solve_at(data, complex(tau, eta), cfg, warm_start=w) for eta, w in zip(grid[-3:], prev)]
            else:
                sweep = continuation_sweep(data, tau, grid, cfg)
        except ConvergenceError:
            prev = None
            continue
        prev = sweep[-3:]
        vals = [s.rho for s in sweep]
        rho[i] = vals[-1]
        if extrapolate and len(vals) >= 3:
            rho_ex[i] = max(0.0, richardson_zero(grid[-3:], vals[-3:]))
        else:
            rho_ex[i] = vals[-1]
        ok[i] = True
    return DosCurve(taus, np.full(n, eta_target), rho, rho_ex, ok, extrapolated=extrapolate)


@dataclass
class SupportEstimate:
    kappa_minus: float
    kappa_plus: float
    gaps: list = field(default_factory=list)
    delta: float = 0.01
    empty: bool = False
    contained: bool | None = None


def estimate_support(curve: DosCurve, delta: float = 0.01, kappa: float | None = None) -> SupportEstimate:
    """Outermost grid energies with density >= delta and the internal gaps between them.

    With ``kappa`` given, ``contained`` records whether the estimate lies in
    ``[-kappa - step, kappa + step]``.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    vals = np.where(np.isfinite(curve.values), curve.values, 0.0)
    bulk = vals >= delta
    if not np.any(bulk):
        return SupportEstimate(np.nan, np.nan, [], delta, empty=True, contained=True)
    idx = np.flatnonzero(bulk)
    lo, hi = idx[0], idx[-1]
    gaps = []
    start = None
    for i in range(lo, hi + 1):
        if not bulk[i] and start is None:
            start = i
        elif bulk[i] and start is not None:
            gaps.append((float(curve.tau[start]), float(curve.tau[i - 1])))
            start = None
    est = SupportEstimate(float(curve.tau[lo]), float(curve.tau[hi]), gaps, delta)
    if kappa is not None:
        step = curve.step
        est.contained = bool(-kappa - step <= est.kappa_minus and est.kappa_plus <= kappa + step)
    return est


def cumulative_mass(curve: DosCurve) -> np.ndarray:
    vals = np.where(np.isfinite(curve.values), curve.values, 0.0)
    dx = np.diff(curve.tau)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * dx * (vals[1:] + vals[:-1]))])
    total = cum[-1]
    return cum / total if total > 0 else cum


def quantile_index(curve: DosCurve, tau: float, N: int, round_tol: float = 1e-3) -> int:
    """``ceil(N * int_{-inf}^tau rho)`` with trapezoid quadrature on the curve grid.

    The mass is normalised by the total grid mass; ``round_tol`` (in index units)
    absorbs quadrature noise so that empty and full mass map to 0 and N.
    """
    F = np.interp(tau, curve.tau, cumulative_mass(curve), left=0.0, right=1.0)
    return int(min(N, max(0, math.ceil(N * F - round_tol))))


def quantile_indices(curve: DosCurve, taus, N: int, round_tol: float = 1e-3) -> np.ndarray:
    F = np.interp(np.asarray(taus, dtype=float), curve.tau, cumulative_mass(curve), left=0.0, right=1.0)
    return np.clip(np.ceil(N * F - round_tol), 0, N).astype(int)


@dataclass
class HolderReport:
    exponents: dict
    best_exponent: float | None


def holder_check(curve: DosCurve, exponents=(1 / 3, 1 / 2, 1.0), growth_limit: float = 1.25) -> HolderReport:
    """Empirical Hoelder moduli of the density over neighbouring grid pairs.

    For each exponent ``c`` the constant ``max |drho| / |dtau|^c`` is computed at
    spacings h, 2h and 4h; the constant counts as bounded when the finest one
    exceeds the largest coarse one by at most ``growth_limit`` (comparing with
    the largest coarse value keeps grid/edge alignment from faking growth).
    Informational only.
    """
    vals = np.where(np.isfinite(curve.values), curve.values, 0.0)
    if vals.size < 10:
        raise ValueError("holder_check needs at least 10 grid points")
    out = {}
    for c in exponents:
        consts = []
        for k in (1, 2, 4):
            t, v = curve.tau[::k], vals[::k]
            consts.append(float(np.max(np.abs(np.diff(v)) / np.abs(np.diff(t)) ** c)))
        growth = _ratio(consts[0], max(consts[1:]))
        out[float(c)] = {"constants": consts, "bounded": bool(growth <= growth_limit)}
    good = [c for c, r in out.items() if r["bounded"]]
    return HolderReport(out, max(good) if good else None)


def _ratio(a: float, b: float) -> float:
    if a == 0.0 and b == 0.0:
        return 1.0
    if b == 0.0:
        return np.inf
    return a / b
