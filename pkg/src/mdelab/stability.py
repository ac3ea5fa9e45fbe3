"""Saturated self-energy, Perron structure, spectral gaps and stability of the MDE.

All matrix functions go through Hermitian eigendecompositions.  Dense
superoperator oracles are capped at ``N <= 16`` (``N^2 x N^2`` matrices).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from . import herm
from .herm import SingularMatrixError, SuperOperator, dense_superop, inner
from .self_energy import SelfEnergy
from .solver import MdeSolution, smallest_singular_value, stability_operator

IM_EIG_FLOOR = 1e-10
PERRON_MAX_ITER = 100_000


class PerronError(RuntimeError):
    pass


class StabilityBoundError(AssertionError):
    """A bound that holds unconditionally (far from the spectrum) was violated."""


def _hs(R: np.ndarray) -> float:
    """``||R||_hs`` for the normalised product."""
    return float(np.sqrt(np.vdot(R, R).real / R.shape[0]))


def _herm(R: np.ndarray) -> np.ndarray:
    return 0.5 * (R + R.conj().T)


# ---------------------------------------------------------------------------
# saturation
# ---------------------------------------------------------------------------


@dataclass
class SaturationData:
    W: np.ndarray
    U: np.ndarray
    F: SuperOperator
    F_mat: np.ndarray
    sp_radius: float
    gap: float
    sqrt_im: np.ndarray
    M: np.ndarray
    zeta: complex
    perron_iterations: int = 0
    gap_method: str = "dense"

    @property
    def N(self) -> int:
        return self.W.shape[0]

    def polar_residual(self) -> float:
        """``|| M - C_{sqrt Im M} C_W [U^*] ||_max``."""
        rec = self.sqrt_im @ self.W @ self.U.conj().T @ self.W @ self.sqrt_im
        return float(np.abs(self.M - rec).max())

    def unitarity_defect(self) -> float:
        return float(np.abs(self.U.conj().T @ self.U - np.eye(self.N)).max())

    def identity_residual(self) -> float:
        """``|| W^-2 - Im zeta C_W[Im M] - F[W^-2] ||_max`` (exact consequence of the MDE)."""
        Wm2 = np.linalg.inv(self.W @ self.W)
        im = self.sqrt_im @ self.sqrt_im
        return float(np.abs(Wm2 - self.zeta.imag * self.W @ im @ self.W - self.F(Wm2)).max())

    def perron_residual(self) -> float:
        return _hs(self.F(self.F_mat) - self.sp_radius * self.F_mat)


def saturation_factors(M: np.ndarray):
    """``sqrt(Im M)``, ``W`` and ``U`` for a matrix with positive definite imaginary part."""
    M = np.asarray(M, dtype=np.complex128)
    im = herm.im_part(M)
    lam, V = np.linalg.eigh(im)
    if lam.min() < IM_EIG_FLOOR:
        raise SingularMatrixError(f"Im M is ill-conditioned (min eigenvalue {lam.min():.3e})")
    sq = (V * np.sqrt(lam)) @ V.conj().T
    sq_inv = (V / np.sqrt(lam)) @ V.conj().T
    X = _herm(sq_inv @ herm.re_part(M) @ sq_inv)
    x, Q = np.linalg.eigh(X)
    W = (Q * (1 + x ** 2) ** 0.25) @ Q.conj().T
    phase = (x - 1j) / np.abs(x - 1j)
    U = (Q * phase) @ Q.conj().T
    return sq, W, U


def saturated_operator(sq: np.ndarray, W: np.ndarray, S: SelfEnergy) -> SuperOperator:
    """``F = C_W C_{sqrt Im M} S C_{sqrt Im M} C_W``."""
    L = W @ sq  # C_W C_sq [R] = (W sq) R (sq W)
    Lh = L.conj().T
    f = lambda R: L @ S(Lh @ R @ L) @ Lh  # noqa: E731
    return SuperOperator(W.shape[0], f, name="F", self_adjoint=True)


def perron_pair(F: SuperOperator, tol: float = 1e-13, max_iter: int = PERRON_MAX_ITER):
    """Top eigenpair of a positivity preserving self-adjoint map by projected power iteration.

    Starts at ``1 / ||1||_hs`` and clips negative eigenvalues after every
    step.  Returns ``(lambda, F_mat, iterations)`` with ``||F_mat||_hs = 1``.
    """
    N = F.dim
    R = np.eye(N, dtype=np.complex128)
    lam = 0.0
    for it in range(1, max_iter + 1):
        FR = _herm(F(R))
        lam = inner(R, FR).real
        if _hs(FR - lam * R) <= tol * max(abs(lam), 1e-300):
            return lam, R, it
        R = herm.project_psd(FR)
        nrm = _hs(R)
        if nrm == 0.0:
            return 0.0, np.eye(N, dtype=np.complex128), it
        R = R / nrm
    raise PerronError(f"Perron iteration did not converge in {max_iter} steps")


def _second_modulus(F: SuperOperator, lam: float, F_mat: np.ndarray, iters: int = 2000, seed: int = 0) -> float:
    """Largest |eigenvalue| of F on the complement of ``F_mat`` (Rayleigh estimate)."""
    rng = np.random.default_rng(seed)
    N = F.dim
    R = _herm(herm.random_complex(N, rng))
    R -= inner(F_mat, R) * F_mat
    R /= _hs(R)
    est = 0.0
    for _ in range(iters):
        FR = F(R)
        FR -= inner(F_mat, FR) * F_mat
        nrm = _hs(FR)
        if nrm < 1e-300:
            return 0.0
        if abs(nrm - est) <= 1e-10 * nrm:
            est = nrm
            break
        est = nrm
        R = FR / nrm
    return float(est)


def compute_saturation(sol: MdeSolution | np.ndarray, S: SelfEnergy, zeta: complex | None = None,
                       tol: float = 1e-13) -> SaturationData:
    """Build ``W``, ``U``, ``F`` and the Perron pair of ``F`` from a solution.

    Raises
    ------
    SingularMatrixError
        ``Im M`` has an eigenvalue below ``1e-10``.
    PerronError
        The power iteration did not settle within ``1e5`` steps.
    """
    if isinstance(sol, MdeSolution):
        M, zeta = sol.M, sol.zeta
    else:
        M = np.asarray(sol, dtype=np.complex128)
        if zeta is None:
            raise ValueError("zeta is required when passing a bare matrix")
    sq, W, U = saturation_factors(M)
    F = saturated_operator(sq, W, S)
    lam, F_mat, its = perron_pair(F, tol=tol)
    N = M.shape[0]
    if N <= herm.BRUTE_FORCE_CUTOFF:
        D = dense_superop(F)
        ev = np.linalg.eigvalsh(0.5 * (D + D.conj().T))
        mods = np.sort(np.abs(ev))[::-1]
        second = mods[1] if mods.size > 1 else 0.0
        top = max(ev.max(), lam)
        method = "dense"
    else:
        second = _second_modulus(F, lam, F_mat)
        top = lam
        method = "rayleigh"
    gap = 1.0 - second / top if top > 0 else 0.0
    return SaturationData(W, U, F, F_mat, float(lam), float(gap), sq, M, complex(zeta), its, method)


def psd_preservation_defect(F: SuperOperator, rng: np.random.Generator, trials: int = 100) -> float:
    """``max(0, -min eig F[vv*])`` over random ``v``."""
    worst = 0.0
    for _ in range(trials):
        v = rng.standard_normal(F.dim) + 1j * rng.standard_normal(F.dim)
        worst = max(worst, -herm.min_eig(_herm(F(herm.rank_one(v)))))
    return worst


@dataclass
class IdentityCheck:
    rel_error: float
    predicted: float
    hypotheses_met: bool
    note: str = ""


def spectral_radius_identity_check(sat: SaturationData, sol: MdeSolution | None = None,
                                   kappa: float | None = None) -> IdentityCheck:
    """Compare ``||F||_sp`` with ``1 - Im zeta <F_mat, C_W[Im M]> / <F_mat, W^-2>``.

    The identity is asserted only when ``||F||_sp >= 1/2`` and, if ``kappa``
    is given, ``|zeta| <= 3(1 + kappa)``; otherwise the result is flagged
    informational.
    """
    zeta = sol.zeta if sol is not None else sat.zeta
    im = sat.sqrt_im @ sat.sqrt_im
    Wm2 = np.linalg.inv(sat.W @ sat.W)
    num = inner(sat.F_mat, sat.W @ im @ sat.W).real
    den = inner(sat.F_mat, Wm2).real
    pred = 1.0 - num / den * zeta.imag
    rel = abs(sat.sp_radius - pred) / sat.sp_radius
    ok = sat.sp_radius >= 0.5 and (kappa is None or abs(zeta) <= 3 * (1 + kappa))
    return IdentityCheck(float(rel), float(pred), bool(ok), "" if ok else "hypothesis not met")


# ---------------------------------------------------------------------------
# spectral gap lemma
# ---------------------------------------------------------------------------


@dataclass
class GapBounds:
    gamma: float
    Gamma: float
    theta_predicted: float
    theta_observed: float
    top_eigenvalue: float = 1.0
    eigenmatrix_min: float = np.nan
    eigenmatrix_max: float = np.nan
    hypotheses_ok: bool = True
    spectrum_ok: bool = False
    eigenmatrix_ok: bool = False
    simple: bool = False
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.hypotheses_ok and self.spectrum_ok and self.eigenmatrix_ok and self.simple


def _probe_vectors(N: int, rng: np.random.Generator, n_random: int):
    vecs = [np.eye(N)[i] for i in range(N)]
    vecs += [rng.standard_normal(N) + 1j * rng.standard_normal(N) for _ in range(n_random)]
    return [v / np.linalg.norm(v) for v in vecs]


def fit_sandwich_bounds(T: SuperOperator, n_random: int = 32, seed: int = 0, refine_steps: int = 30):
    """Fit ``gamma, Gamma`` with ``gamma <R>1 <= T[R] <= Gamma <R>1`` on PSD matrices.

    Both extremes are attained on rank-one ``R = uu*``; starting from the
    identity, canonical and random probes, ``u`` and the test vector are
    optimised alternately (each step is an eigenvector problem), which
    tightens the probe values towards the true extremes.
    """
    N = T.dim
    rng = np.random.default_rng(seed)
    I = np.eye(N, dtype=np.complex128)
    ev = np.linalg.eigvalsh(_herm(T(I)))
    gamma, Gamma = ev[0], ev[-1]
    for u in _probe_vectors(N, rng, n_random):
        for pick, better in ((0, min), (-1, max)):
            uu = u
            best = None
            for _ in range(refine_steps):
                lam, V = np.linalg.eigh(_herm(T(herm.rank_one(uu))) * N)
                v = V[:, pick]
                val = lam[pick]
                # T self-adjoint: v* T[uu*] v = u* T[vv*] u
                lam2, V2 = np.linalg.eigh(_herm(T(herm.rank_one(v))) * N)
                uu = V2[:, pick]
                val = better(val, lam2[pick])
                if best is not None and abs(val - best) <= 1e-14 * max(1.0, abs(val)):
                    best = val
                    break
                best = val
            if pick == 0:
                gamma = min(gamma, best)
            else:
                Gamma = max(Gamma, best)
    return float(gamma), float(Gamma)


def check_sandwich_bounds(T: SuperOperator, gamma: float, Gamma: float, n_random: int = 32,
                          seed: int = 1, tol: float = 1e-10) -> bool:
    N = T.dim
    rng = np.random.default_rng(seed)
    probes = [np.eye(N, dtype=np.complex128)] + [herm.rank_one(v) for v in _probe_vectors(N, rng, n_random)]
    for R in probes:
        tr = herm.avg_trace(R).real
        ev = np.linalg.eigvalsh(_herm(T(R)))
        if ev[0] < gamma * tr - tol or ev[-1] > Gamma * tr + tol:
            return False
    return True


def spectral_gap_verify(T: SuperOperator, gamma: float, Gamma: float, tol: float = 1e-8,
                        check_probes: bool = True) -> GapBounds:
    """Check the spectral gap and eigenmatrix bounds for a normalised positive map.

    ``T`` must be self-adjoint with ``||T||_sp = 1`` and ``N <= 16``.  When
    the sandwich bounds fail on the probe family, a hypothesis failure is
    reported and nothing else is asserted.
    """
    N = T.dim
    if N > herm.BRUTE_FORCE_CUTOFF:
        raise MemoryError("spectral_gap_verify is a dense oracle (N <= 16)")
    theta = gamma ** 6 / (2 * Gamma ** 4) if Gamma > 0 else 0.0
    out = GapBounds(float(gamma), float(Gamma), float(theta), np.nan)
    if gamma <= 0 or gamma > Gamma or (check_probes and not check_sandwich_bounds(T, gamma, Gamma)):
        out.hypotheses_ok = False
        out.note = "sandwich bounds violated on probes"
        return out
    D = dense_superop(T)
    ev, V = np.linalg.eigh(0.5 * (D + D.conj().T))
    top = ev[-1]
    rest = ev[:-1]
    out.top_eigenvalue = float(top)
    second = float(np.max(np.abs(rest))) if rest.size else 0.0
    out.theta_observed = float(top - second)
    out.simple = bool(rest.size == 0 or rest.max() < top - tol)
    out.spectrum_ok = bool(abs(top - 1.0) <= tol and (rest.size == 0 or (
        rest.max() <= 1 - theta + tol and rest.min() >= -1 + theta - tol)))
    Tm = V[:, -1].reshape(N, N)
    Tm = Tm * np.exp(-1j * np.angle(np.trace(Tm)))
    Tm = _herm(Tm)
    Tm /= _hs(Tm)
    em = np.linalg.eigvalsh(Tm)
    out.eigenmatrix_min, out.eigenmatrix_max = float(em[0]), float(em[-1])
    out.eigenmatrix_ok = bool(em[0] >= gamma / np.sqrt(Gamma) - tol and em[-1] <= Gamma + tol)
    return out


def normalized_saturation(sat: SaturationData) -> SuperOperator:
    return sat.F.scaled(1.0 / sat.sp_radius)


# ---------------------------------------------------------------------------
# rotation-inversion
# ---------------------------------------------------------------------------


@dataclass
class RotationInversion:
    lhs: float
    rhs_without_C: float

    @property
    def ratio(self) -> float:
        if not np.isfinite(self.lhs):
            return np.inf
        return self.lhs / self.rhs_without_C


def rotation_inversion_bound(U: np.ndarray, T: SuperOperator, theta: float,
                             T_mat: np.ndarray | None = None) -> RotationInversion:
    """``||(C_U - T)^{-1}||_sp`` against ``1/theta * |1 - ||T|| <T_mat, C_U[T_mat]>|^{-1}`` (dense)."""
    N = T.dim
    if N > herm.BRUTE_FORCE_CUTOFF:
        raise MemoryError("rotation_inversion_bound is a dense oracle (N <= 16)")
    U = np.asarray(U, dtype=np.complex128)
    CU = SuperOperator(N, lambda R: U @ R @ U)
    DT = dense_superop(T)
    D = dense_superop(CU) - DT
    smin = np.linalg.svd(D, compute_uv=False)[-1]
    lhs = np.inf if smin <= 1e-15 * max(1.0, np.abs(D).max()) else 1.0 / smin
    ev, V = np.linalg.eigh(0.5 * (DT + DT.conj().T))
    t_norm = float(np.max(np.abs(ev)))
    if T_mat is None:
        T_mat = V[:, -1].reshape(N, N)
        T_mat = _herm(T_mat * np.exp(-1j * np.angle(np.trace(T_mat))))
        T_mat = T_mat / _hs(T_mat)
    overlap = inner(T_mat, U @ T_mat @ U)
    denom = theta * abs(1.0 - t_norm * overlap)
    rhs = np.inf if denom <= 1e-15 else 1.0 / denom
    return RotationInversion(float(lhs), float(rhs))


# ---------------------------------------------------------------------------
# linear stability and the derivative of the solution map
# ---------------------------------------------------------------------------


def cms_operator(M: np.ndarray, S: SelfEnergy) -> SuperOperator:
    M = np.asarray(M, dtype=np.complex128)
    Ms = M.conj().T
    return SuperOperator(M.shape[0], lambda R: M @ S(R) @ M, lambda R: S(Ms @ R @ Ms), name="C_M S")


@dataclass
class StabilityReport:
    norm: float
    cms_norm: float
    far_regime: bool
    condition: float


def linear_stability_norm(sol: MdeSolution, S: SelfEnergy) -> float:
    """``||(Id - C_M S)^{-1}||_sp``; ``inf`` when the operator is numerically singular."""
    smin = smallest_singular_value(stability_operator(sol.M, S))
    return float(np.inf) if smin <= 1e-14 else float(1.0 / smin)


def stability_report(sol: MdeSolution, S: SelfEnergy, kappa: float | None = None) -> StabilityReport:
    """Stability norm plus ``||C_M S||_sp``; far from the spectrum the latter must be <= 1/4.

    Raises
    ------
    StabilityBoundError
        ``|zeta| >= 3(1 + kappa)`` but ``||C_M S||_sp > 1/4``.
    """
    N = sol.N
    far = kappa is not None and abs(sol.zeta) >= 3 * (1 + kappa)
    if N <= herm.BRUTE_FORCE_CUTOFF:
        C = dense_superop(cms_operator(sol.M, S))
        sv = np.linalg.svd(np.eye(N * N) - C, compute_uv=False)
        cms = float(np.linalg.norm(C, 2))
        smin, smax = sv[-1], sv[0]
    else:
        cms = _power_sp_norm(cms_operator(sol.M, S))
        smin = smallest_singular_value(stability_operator(sol.M, S))
        smax = 1.0 + cms
    norm = np.inf if smin <= 1e-14 else 1.0 / smin
    if far and cms > 0.25 + 1e-12:
        raise StabilityBoundError(f"||C_M S||_sp = {cms:.6g} > 1/4 at |zeta| = {abs(sol.zeta):.4g}")
    return StabilityReport(float(norm), cms, bool(far), float(smax / smin) if smin > 0 else np.inf)


def _power_sp_norm(T: SuperOperator, iters: int = 500, tol: float = 1e-10, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    R = herm.random_complex(T.dim, rng)
    R /= _hs(R)
    est = 0.0
    for _ in range(iters):
        X = T.adjoint_apply(T(R))
        nrm = _hs(X)
        if nrm == 0:
            return 0.0
        new = np.sqrt(nrm)
        R = X / nrm
        if abs(new - est) <= tol * new:
            return float(new)
        est = new
    return float(est)


@dataclass
class DerivativeOperator:
    Z: SuperOperator
    total: SuperOperator
    M: np.ndarray = field(repr=False)

    def max_to_max_norm(self, n_probes: int = 20, seed: int = 0) -> float:
        """Largest ``||Z[R] + MR||_max`` over random Hermitian probes with ``||R||_max = 1``."""
        rng = np.random.default_rng(seed)
        best = 0.0
        N = self.M.shape[0]
        for _ in range(n_probes):
            R = herm.random_hermitian(N, rng)
            R /= np.abs(R).max()
            best = max(best, float(np.abs(self.total(R)).max()))
        return best


def derivative_operator(sol: MdeSolution, S: SelfEnergy) -> DerivativeOperator:
    """``Z[R] = C_M S (Id - C_M S)^{-1}[M R]`` and the derivative ``R -> Z[R] + M R``.

    The stability operator is LU-factorised densely for ``N <= 16`` and solved
    by GMRES otherwise.
    """
    M = sol.M
    N = M.shape[0]
    B = stability_operator(M, S)
    if N <= herm.BRUTE_FORCE_CUTOFF:
        lu = sla.lu_factor(dense_superop(B))
        if np.min(np.abs(np.diag(lu[0]))) < 1e-14:
            raise SingularMatrixError("stability operator is singular")
        solve = lambda X: sla.lu_solve(lu, X.reshape(-1)).reshape(N, N)  # noqa: E731
    else:
        op = spla.LinearOperator((N * N, N * N), matvec=lambda v: B(v.reshape(N, N)).reshape(-1),
                                 dtype=np.complex128)

        def solve(X):
            x, info = spla.gmres(op, X.reshape(-1), rtol=1e-12, atol=0.0, restart=80, maxiter=200)
            if info != 0:
                raise SingularMatrixError("GMRES failed on the stability operator")
            return x.reshape(N, N)

    def total(R):
        return solve(M @ R)

    def Z(R):
        return total(R) - M @ R

    return DerivativeOperator(SuperOperator(N, Z, name="Z"), SuperOperator(N, total, name="dG"), M)


def derivative_decay_report(deriv: DerivativeOperator, metric: herm.IndexMetric,
                            profile: herm.DecayProfile, n_probes: int = 5, seed: int = 0) -> dict:
    """Decay norms of ``Z[R]`` for delta probes ``R = E_xx`` and random ``||R||_max = 1`` probes."""
    N = deriv.M.shape[0]
    rng = np.random.default_rng(seed)
    probes = []
    for x in rng.choice(N, size=min(n_probes, N), replace=False):
        E = np.zeros((N, N), dtype=np.complex128)
        E[x, x] = 1.0
        probes.append(E)
    norms = [herm.decay_norm(deriv.Z(R), metric, profile) for R in probes]
    return {"norms": norms, "max": float(max(norms)), "finite": bool(np.all(np.isfinite(norms)))}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class StabilityDiagnostics:
    sp_radius: float
    gap_predicted: float
    gap_observed: float
    stability_norm: float
    polar_residual: float
    identity_residual: float

    def to_json(self) -> str:
        return json.dumps({k: _json_num(v) for k, v in asdict(self).items()}, indent=2, sort_keys=True)


def _json_num(v):
    v = float(v)
    if np.isfinite(v):
        return float(format(v, ".17g"))
    return str(v)


def stability_diagnostics(sol: MdeSolution, S: SelfEnergy) -> StabilityDiagnostics:
    sat = compute_saturation(sol, S)
    gap_pred = np.nan
    if sol.N <= herm.BRUTE_FORCE_CUTOFF:
        T = normalized_saturation(sat)
        g, G = fit_sandwich_bounds(T)
        gap_pred = g ** 6 / (2 * G ** 4) if g > 0 else 0.0
    return StabilityDiagnostics(sat.sp_radius, float(gap_pred), sat.gap, linear_stability_norm(sol, S),
                                sat.polar_residual(), sat.identity_residual())
