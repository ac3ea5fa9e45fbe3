"""Correlated Gaussian Hermitian ensembles and empirical checks of their resolvents.

``H = A + W / sqrt(N)`` where ``W`` is a centred Gaussian Hermitian field with
second moments given by a :class:`~mdelab.self_energy.CovarianceKernel`.
Draws are keyed by ``(seed, trial)`` so results do not depend on the order in
which trials run.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from . import herm
from .dos import DosCurve, quantile_indices
from .herm import IndexMetric
from .kernels import moving_average
from .self_energy import CovarianceKernel, KernelError, KernelSelfEnergy, SelfEnergy
from .solver import ConvergenceError, DataPair, SolverConfig, solve_at


class InvalidSpecError(ValueError):
    pass


class InsufficientStatisticsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# ensembles
# ---------------------------------------------------------------------------


def bare_matrix(kind: str, N: int, values=None, amplitude: float = 1.0, length: float = 1.0,
                band: int | None = None) -> np.ndarray:
    """Deterministic part ``A``: ``zero``, ``diagonal`` or ``banded`` (exponential decay on the circle)."""
    if kind == "zero":
        return np.zeros((N, N), dtype=np.complex128)
    if kind == "diagonal":
        if values is None:
            raise InvalidSpecError("diagonal A needs values")
        vals = np.asarray(values, dtype=float)
        if vals.size != N:
            # short value lists are tiled in equal blocks
            vals = np.repeat(vals, int(np.ceil(N / vals.size)))[:N]
        return np.diag(vals).astype(np.complex128)
    if kind == "banded":
        d = IndexMetric.circle(N).distances
        A = amplitude * np.exp(-d / length)
        if band is not None:
            A = np.where(d <= band, A, 0.0)
        return A.astype(np.complex128)
    raise InvalidSpecError(f"unknown bare matrix kind {kind!r}")


@dataclass(frozen=True)
class EnsembleSpec:
    """Recipe for ``H = A + W/sqrt(N)``."""

    N: int
    kernel: CovarianceKernel
    A: np.ndarray | None = None
    metric: IndexMetric | None = None
    seed: int = 0
    name: str = "ensemble"

    def __post_init__(self):
        if self.kernel.N != self.N:
            raise InvalidSpecError("kernel size does not match N")
        if self.A is not None:
            A = np.asarray(self.A, dtype=np.complex128)
            if A.shape != (self.N, self.N) or not np.allclose(A, A.conj().T):
                raise InvalidSpecError("A must be Hermitian N x N")
            # exact Hermitian symmetry, so every draw is exactly Hermitian too
            A = np.triu(A) + np.triu(A, 1).conj().T
            A[np.diag_indices(self.N)] = A.diagonal().real
            object.__setattr__(self, "A", A)
        if self.kernel.phi is None and self.N > 64:
            raise InvalidSpecError("kernels without a filter realisation are limited to N <= 64")

    @property
    def beta(self) -> int:
        return self.kernel.beta

    @property
    def bare(self) -> np.ndarray:
        return np.zeros((self.N, self.N), dtype=np.complex128) if self.A is None else self.A

    @property
    def self_energy(self) -> SelfEnergy:
        return KernelSelfEnergy(self.kernel)

    def data_pair(self) -> DataPair:
        return DataPair(self.bare, self.self_energy, self.metric)

    def with_seed(self, seed: int) -> "EnsembleSpec":
        return EnsembleSpec(self.N, self.kernel, self.A, self.metric, seed, self.name)


METRIC_MAX_N = 1024


def default_metric(N: int, name: str = "circle") -> IndexMetric | None:
    """Dense distance tables are only built up to ``METRIC_MAX_N`` (decay checks are small-N tools)."""
    return IndexMetric.from_name(name, N) if N <= METRIC_MAX_N else None


def gue_spec(N: int, seed: int = 0, A=None) -> EnsembleSpec:
    return EnsembleSpec(N, CovarianceKernel.white(N, 2), A, default_metric(N), seed, "gue")


def goe_spec(N: int, seed: int = 0, A=None) -> EnsembleSpec:
    return EnsembleSpec(N, CovarianceKernel.white(N, 1), A, default_metric(N), seed, "goe")


DEFAULT_FILTER = np.array([[0.0, 0.25, 0.0], [0.25, 1.0, 0.25], [0.0, 0.25, 0.0]])


def filter_spec(N: int, phi=None, beta: int = 2, seed: int = 0, A=None, envelope=None,
                name: str = "filter") -> EnsembleSpec:
    """Finite-range correlated ensemble from a moving-average filter (unit energy by default)."""
    phi = DEFAULT_FILTER if phi is None else np.asarray(phi, dtype=float)
    phi = phi / np.linalg.norm(phi)
    k = CovarianceKernel.from_filter(N, phi, beta=beta, envelope=envelope, name=name)
    return EnsembleSpec(N, k, A, default_metric(N), seed, name)


def zero_spec(N: int, A=None, seed: int = 0) -> EnsembleSpec:
    return EnsembleSpec(N, CovarianceKernel.zero(N), A, default_metric(N), seed, "zero")


def flatness_constant(spec: EnsembleSpec, n_probes: int = 32, seed: int = 0) -> float:
    """Smallest ``E|u* W v|^2 = N u* S[vv*] u`` over random unit probes."""
    rng = np.random.default_rng(seed)
    S = spec.self_energy
    best = np.inf
    for _ in range(n_probes):
        u, v = (rng.standard_normal(spec.N) + 1j * rng.standard_normal(spec.N) for _ in range(2))
        u /= np.linalg.norm(u)
        v /= np.linalg.norm(v)
        best = min(best, float(spec.N * np.real(u.conj() @ S(herm.rank_one(v)) @ u)))
    return best


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleDraw:
    H: np.ndarray
    seed: int
    trial: int
    spec: EnsembleSpec = field(repr=False)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    """Counter-based stream for one draw."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


_COV_CACHE: dict = {}


def _covariance_factor(kernel: CovarianceKernel) -> np.ndarray:
    key = id(kernel)
    hit = _COV_CACHE.get(key)
    if hit is not None and hit[0] is kernel:
        return hit[1]
    C = kernel.real_covariance()
    lam, V = np.linalg.eigh(C)
    if lam[0] < -1e-10 * max(1.0, lam[-1]):
        raise InvalidSpecError(f"covariance is not positive semidefinite (min eigenvalue {lam[0]:.3e})")
    L = V * np.sqrt(np.clip(lam, 0.0, None))
    _COV_CACHE[key] = (kernel, L)
    return L


def sample_fluctuation(spec: EnsembleSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw ``W`` (without the ``1/sqrt(N)`` factor)."""
    k, N = spec.kernel, spec.N
    if k.phi is not None:
        if not np.any(k.phi):
            return np.zeros((N, N), dtype=np.complex128)
        white = k.phi.shape == (1, 1)
        if k.beta == 2:
            X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
            # the 1/sqrt(2) normalisations of X and of the symmetrisation are merged
            Y = k.phi[0, 0] * X if white else moving_average(X, k.phi)
            W = 0.5 * (Y + Y.conj().T)
        else:
            X = rng.standard_normal((N, N))
            Y = k.phi[0, 0] * X if white else moving_average(X, k.phi)
            W = ((Y + Y.T) / np.sqrt(2)).astype(np.complex128)
        if k.envelope is not None:
            W = W * k.envelope
        return W
    # general kernel: factorise the covariance of the real degrees of freedom
    L = _covariance_factor(k)
    z = L @ rng.standard_normal(L.shape[1])
    dof = k.real_dof_index()
    W = np.zeros((N, N), dtype=np.complex128)
    re = dof[:, 2] == 0
    W[dof[re, 0], dof[re, 1]] += z[re]
    W[dof[~re, 0], dof[~re, 1]] += 1j * z[~re]
    return herm.hermitian_from_upper(W)


def sample(spec: EnsembleSpec, trial: int) -> SampleDraw:
    """Draw ``H = A + W/sqrt(N)`` for ``(spec.seed, trial)``; ``H`` is exactly Hermitian."""
    W = sample_fluctuation(spec, trial_rng(spec.seed, trial))
    H = W / np.sqrt(spec.N)
    if spec.A is not None:
        H += spec.A
    return SampleDraw(H, spec.seed, trial, spec)


def check_spec(spec: EnsembleSpec, max_dim: int = 16) -> bool:
    """PSD check of the assembled covariance at small N (filter kernels are PSD by construction)."""
    if spec.kernel.phi is not None:
        return True
    if spec.N > 64:
        raise InvalidSpecError("general kernels are limited to N <= 64")
    _covariance_factor(spec.kernel)
    return True


@dataclass
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    trials: int

    def z_scores(self, reference: np.ndarray, rel_floor: float = 1e-12) -> np.ndarray:
        """Per-entry ``|mean - reference| / stderr``, real and imaginary parts separately.

        Differences below ``rel_floor * max|reference|`` count as zero, so parts
        that vanish identically (up to rounding) do not compare noise with noise.
        """
        d = np.asarray(self.mean - reference, dtype=np.complex128)
        floor = rel_floor * max(1.0, float(np.abs(reference).max()))

        def part(diff, se):
            diff = np.where(np.abs(diff) <= floor, 0.0, np.abs(diff))
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where(diff == 0.0, 0.0, diff / np.where(se > 0, se, 0.0))

        return np.maximum(part(d.real, np.real(self.stderr)), part(d.imag, np.imag(self.stderr)))


def mc_self_energy(spec: EnsembleSpec, R: np.ndarray, trials: int = 2000, start: int = 0) -> MonteCarloEstimate:
    """Monte-Carlo estimate of ``E (H-A) R (H-A)``; stderr carries real/imag parts separately."""
    R = np.asarray(R, dtype=np.complex128)
    acc = np.zeros_like(R)
    acc2r = np.zeros(R.shape)
    acc2i = np.zeros(R.shape)
    for t in range(start, start + trials):
        Wn = sample(spec, t).H - spec.bare
        X = Wn @ R @ Wn
        acc += X
        acc2r += X.real ** 2
        acc2i += X.imag ** 2
    mean = acc / trials
    var_r = np.maximum(acc2r / trials - mean.real ** 2, 0.0)
    var_i = np.maximum(acc2i / trials - mean.imag ** 2, 0.0)
    se = np.sqrt(var_r / trials) + 1j * np.sqrt(var_i / trials)
    return MonteCarloEstimate(mean, se, trials)


# ---------------------------------------------------------------------------
# resolvent diagnostics
# ---------------------------------------------------------------------------


class Resolvent:
    """Resolvents of one Hermitian matrix at many spectral parameters via one eigendecomposition."""

    def __init__(self, H: np.ndarray):
        self.H = np.asarray(H, dtype=np.complex128)
        self.evals, self.evecs = np.linalg.eigh(self.H)

    def __call__(self, zeta) -> np.ndarray:
        zeta = complex(zeta)
        if zeta.imag <= 0:
            raise ValueError("Im zeta must be positive")
        V = self.evecs
        return (V / (self.evals - zeta)) @ V.conj().T


def resolvent(H: np.ndarray, zeta, method: str = "eig") -> np.ndarray:
    """``G = (H - zeta)^{-1}``; ``method`` is ``eig`` or ``solve`` (direct inversion, one zeta)."""
    zeta = complex(zeta)
    if zeta.imag <= 0:
        raise ValueError("Im zeta must be positive")
    if method == "eig":
        return Resolvent(H)(zeta)
    if method == "solve":
        return np.linalg.inv(np.asarray(H, dtype=np.complex128) - zeta * np.eye(H.shape[0]))
    raise ValueError(f"unknown resolvent method {method!r}")


def ward_check(G: np.ndarray, zeta) -> float:
    """``max_x | sum_u |G_xu|^2 - Im G_xx / Im zeta |``."""
    zeta = complex(zeta)
    row = np.sum(np.abs(G) ** 2, axis=1)
    return float(np.max(np.abs(row - G.diagonal().imag / zeta.imag)))


def resolvent_identity_residual(G: np.ndarray, zeta) -> float:
    """``|| G - G^* - 2i Im zeta G^* G ||_max``."""
    zeta = complex(zeta)
    return float(np.abs(G - G.conj().T - 2j * zeta.imag * G.conj().T @ G).max())


def error_matrix(H: np.ndarray, G: np.ndarray, A: np.ndarray, S: SelfEnergy, zeta):
    """``D = -(S[G] + H - A) G`` and the residual of ``-1 = (zeta - A + S[G]) G + D``."""
    zeta = complex(zeta)
    SG = S(G)
    D = -(SG + H - A) @ G
    N = H.shape[0]
    res = np.eye(N) + (zeta * np.eye(N) - A + SG) @ G + D
    return D, float(np.abs(res).max())


@dataclass
class MinorResolvent:
    G_minor: np.ndarray
    keep: np.ndarray
    schur_residual: float
    M_minor: np.ndarray | None = None


def minor_resolvent(H: np.ndarray, B: Sequence[int], zeta, M: np.ndarray | None = None,
                    G: np.ndarray | None = None) -> MinorResolvent:
    """Resolvent of ``H`` with the rows and columns in ``B`` removed, plus the Schur check."""
    N = H.shape[0]
    B = np.unique(np.asarray(list(B), dtype=int))
    if B.size >= N:
        raise ValueError("B must be a proper subset of the index set")
    keep = np.setdiff1d(np.arange(N), B)
    zeta = complex(zeta)
    Hz = np.asarray(H, dtype=np.complex128) - zeta * np.eye(N)
    GB = np.linalg.inv(Hz[np.ix_(keep, keep)])
    if G is None:
        G = np.linalg.inv(Hz)
    Ginv = np.linalg.inv(G)
    schur = np.linalg.inv(Ginv[np.ix_(keep, keep)])
    res = float(np.abs(schur - GB).max())
    MB = None
    if M is not None:
        MB = np.linalg.inv(np.linalg.inv(M)[np.ix_(keep, keep)])
    return MinorResolvent(GB, keep, res, MB)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def _pmap(fn: Callable, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float


def fit_slope(x, y) -> SlopeFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    res = stats.linregress(x, y)
    if x.size > 2:
        half = stats.t.ppf(0.975, x.size - 2) * res.stderr
    else:
        half = np.nan
    return SlopeFit(float(res.slope), float(res.intercept), float(res.slope - half), float(res.slope + half))


LOCALLAW_COLUMNS = ("N", "re_zeta", "im_zeta", "trial", "lambda_max", "trace_err", "d_max", "ward_resid")


@dataclass
class LocalLawReport:
    rows: list
    entry_slope: SlopeFit | None
    trace_slope: SlopeFit | None
    medians: dict
    failures: list = field(default_factory=list)


def _local_law_trial(spec: EnsembleSpec, M: np.ndarray, avgM: complex, S: SelfEnergy, zeta, trial: int,
                     compute_d: bool = True) -> dict:
    H = sample(spec, trial).H
    G = resolvent(H, zeta, method="solve")
    d_max = float(np.abs(error_matrix(H, G, spec.bare, S, zeta)[0]).max()) if compute_d else float("nan")
    return {"N": spec.N, "re_zeta": zeta.real, "im_zeta": zeta.imag, "trial": trial,
            "lambda_max": float(np.abs(G - M).max()),
            "trace_err": float(abs(np.trace(G) / spec.N - avgM)),
            "d_max": d_max, "ward_resid": ward_check(G, zeta)}


def local_law_experiment(spec_for_N: Callable[[int], EnsembleSpec], Ns: Sequence[int],
                         zeta_for_N: Callable[[int], complex], trials: int,
                         cfg: SolverConfig | None = None, threads: int = 1,
                         compute_d: bool = True) -> LocalLawReport:
    """Entrywise and averaged resolvent errors against the MDE solution.

    For every ``N`` one ``zeta`` is used; the direct inverse is cheaper than an
    eigendecomposition there.  Slopes are fitted for log median error versus
    ``log(N Im zeta)``.  A solver failure drops that ``N`` only.  ``compute_d``
    switches off the error matrix (its ``d_max`` column is then NaN).
    """
    rows, failures, med = [], [], {}
    for N in Ns:
        spec = spec_for_N(N)
        zeta = complex(zeta_for_N(N))
        try:
            sol = solve_at(spec.data_pair(), zeta, cfg)
        except ConvergenceError as exc:
            failures.append({"N": N, "zeta": zeta, "error": str(exc)})
            continue
        M, avgM, S = sol.M, sol.avg, spec.self_energy
        out = _pmap(lambda t: _local_law_trial(spec, M, avgM, S, zeta, t, compute_d), range(trials), threads)
        rows.extend(out)
        med[N] = {"n_eta": N * zeta.imag,
                  "lambda": float(np.median([r["lambda_max"] for r in out])),
                  "trace": float(np.median([r["trace_err"] for r in out]))}
    entry = trace = None
    if len(med) >= 2:
        x = np.log([m["n_eta"] for m in med.values()])
        entry = fit_slope(x, np.log([m["lambda"] for m in med.values()]))
        trace = fit_slope(x, np.log([m["trace"] for m in med.values()]))
    return LocalLawReport(rows, entry, trace, med, failures)


RIGIDITY_THRESHOLDS = ("5/N", "10logN/N", "N^-0.9")


@dataclass
class RigidityReport:
    taus: np.ndarray
    indices: np.ndarray
    deviations: np.ndarray          # (trials, n_tau)
    bulk_mask: np.ndarray
    fractions_exceeding: dict
    eigenvalues: list = field(default_factory=list, repr=False)

    def fraction_within(self, threshold: float) -> float:
        d = self.deviations[:, self.bulk_mask]
        return float(np.mean(d <= threshold)) if d.size else np.nan


def rigidity_experiment(spec: EnsembleSpec, curve: DosCurve, delta: float, trials: int,
                        taus: Sequence[float] | None = None, threads: int = 1,
                        keep_eigenvalues: bool = False) -> RigidityReport:
    """Distance of ``lambda_{i(tau)}`` to ``tau`` on the bulk part of an energy grid."""
    N = spec.N
    taus = curve.tau if taus is None else np.asarray(taus, dtype=float)
    rho = np.interp(taus, curve.tau, np.where(np.isfinite(curve.values), curve.values, 0.0))
    idx = quantile_indices(curve, taus, N)
    mask = (rho >= delta) & (idx >= 1)

    def one(t):
        return np.linalg.eigvalsh(sample(spec, t).H)

    evs = _pmap(one, range(trials), threads)
    dev = np.full((trials, taus.size), np.nan)
    for k, lam in enumerate(evs):
        ok = idx >= 1
        dev[k, ok] = np.abs(lam[idx[ok] - 1] - taus[ok])
    thr = {"5/N": 5 / N, "10logN/N": 10 * np.log(N) / N, "N^-0.9": N ** -0.9}
    bulk = dev[:, mask]
    frac = {k: (float(np.mean(bulk > v)) if bulk.size else np.nan) for k, v in thr.items()}
    return RigidityReport(taus, idx, dev, mask, frac, evs if keep_eigenvalues else [])


@dataclass
class DelocalizationReport:
    values: np.ndarray
    max_value: float
    fraction_within: float
    bound: float
    fitted_C: float


def delocalization_check(spec: EnsembleSpec, trials: int, curve: DosCurve | None = None,
                         delta: float = 0.05, bound: float = 30.0, bulk_window=None,
                         threads: int = 1) -> DelocalizationReport:
    """``N max_x |u_x|^2`` for eigenvectors with eigenvalue in the bulk.

    The bulk is ``rho >= delta`` on ``curve``; without a curve all eigenvectors
    (or those inside ``bulk_window``) count.
    """
    N = spec.N

    def one(t):
        lam, V = np.linalg.eigh(sample(spec, t).H)
        if curve is not None:
            sel = np.interp(lam, curve.tau, np.where(np.isfinite(curve.values), curve.values, 0.0),
                            left=0.0, right=0.0) >= delta
        else:
            sel = np.ones(N, dtype=bool)
        if bulk_window is not None:
            sel &= (lam >= bulk_window[0]) & (lam <= bulk_window[1])
        return N * np.max(np.abs(V[:, sel]) ** 2, axis=0)

    vals = np.concatenate(_pmap(one, range(trials), threads))
    if vals.size == 0:
        raise InsufficientStatisticsError("no bulk eigenvectors selected")
    return DelocalizationReport(vals, float(vals.max()), float(np.mean(vals <= bound)), bound,
                                float(vals.max() / np.log(N) ** 2))


GAPS_COLUMNS = ("trial", "index", "gap", "unfolded_gap")


@dataclass
class GapStatistics:
    rows: list
    unfolded: np.ndarray
    mean_unfolded: float
    ks_distance: float | None = None
    ks_pvalue: float | None = None
    reference: np.ndarray | None = field(default=None, repr=False)


def unfolded_gaps(spec: EnsembleSpec, trials: Sequence[int], window: tuple, curve: DosCurve,
                  threads: int = 1) -> tuple[list, np.ndarray]:
    """Consecutive bulk gaps ``lambda_{i+1} - lambda_i`` with ``lambda_i`` in ``window``,
    unfolded by ``N rho(lambda_i)`` from the self-consistent density."""
    N = spec.N
    vals = np.where(np.isfinite(curve.values), curve.values, 0.0)

    def one(t):
        lam = np.linalg.eigvalsh(sample(spec, t).H)
        i = np.flatnonzero((lam[:-1] >= window[0]) & (lam[:-1] <= window[1]))
        g = lam[i + 1] - lam[i]
        u = g * N * np.interp(lam[i], curve.tau, vals)
        return [(t, int(k), float(a), float(b)) for k, a, b in zip(i, g, u)]

    rows = [r for chunk in _pmap(one, trials, threads) for r in chunk]
    return rows, np.array([r[3] for r in rows])


def gap_statistics(spec: EnsembleSpec, trials: int, window: tuple, curve: DosCurve,
                   reference: EnsembleSpec | None = None, reference_curve: DosCurve | None = None,
                   reference_trials: int | None = None, min_gaps: int = 50,
                   threads: int = 1) -> GapStatistics:
    """Pooled unfolded bulk gaps and their Kolmogorov-Smirnov distance to a reference ensemble."""
    if not window[0] < window[1]:
        raise ValueError("window must be an increasing interval")
    rows, unf = unfolded_gaps(spec, range(trials), window, curve, threads)
    if unf.size < min_gaps:
        raise InsufficientStatisticsError(f"only {unf.size} gaps pooled (need {min_gaps})")
    out = GapStatistics(rows, unf, float(unf.mean()))
    if reference is not None:
        _, ref = unfolded_gaps(reference, range(reference_trials or trials), window,
                               reference_curve or curve, threads)
        if ref.size < min_gaps:
            raise InsufficientStatisticsError(f"only {ref.size} reference gaps pooled")
        ks = stats.ks_2samp(unf, ref)
        out.ks_distance, out.ks_pvalue, out.reference = float(ks.statistic), float(ks.pvalue), ref
    return out


__all__ = [
    "EnsembleSpec", "SampleDraw", "sample", "gue_spec", "goe_spec", "filter_spec", "zero_spec",
    "bare_matrix", "resolvent", "Resolvent", "ward_check", "error_matrix", "minor_resolvent",
    "local_law_experiment", "rigidity_experiment", "delocalization_check", "gap_statistics",
    "mc_self_energy", "flatness_constant", "InvalidSpecError", "InsufficientStatisticsError", "KernelError",
]
