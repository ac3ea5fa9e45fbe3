"""Matrix Dyson Equation solver.

Solves ``-M^{-1} = zeta 1 - A + S[M]`` with ``Im M > 0`` by damped fixed-point
iteration followed by Newton polishing.  When the data pair has structure the
iteration runs in a smaller commutative algebra:

* ``diagonal``  - ``A`` diagonal and ``S`` maps diagonals to diagonals
  (the vector Dyson equation);
* ``circulant`` - ``A`` circulant and ``S`` translation invariant on the circle;
* ``dense``     - everything else.

Uniqueness of the solution with positive imaginary part makes the reduced
solution the solution.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from . import herm
from .herm import IndexMetric, SuperOperator
from .self_energy import SelfEnergy


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float = np.nan, zeta: complex | None = None,
                 eta: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.zeta = zeta
        self.eta = eta


class SpectralParamError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralParam:
    zeta: complex

    def __post_init__(self):
        z = complex(self.zeta)
        if not np.isfinite(z) or z.imag <= 0:
            raise SpectralParamError(f"spectral parameter must lie in the upper half plane, got {z}")
        object.__setattr__(self, "zeta", z)

    @property
    def eta(self) -> float:
        return self.zeta.imag

    @property
    def tau(self) -> float:
        return self.zeta.real


def as_zeta(z) -> complex:
    return SpectralParam(z.zeta if isinstance(z, SpectralParam) else z).zeta


@dataclass(frozen=True)
class DataPair:
    """Bare matrix ``A`` and self-energy ``S`` (plus an optional index metric)."""

    A: np.ndarray
    S: SelfEnergy
    metric: IndexMetric | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.complex128)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise herm.DimensionError("bare matrix must be square")
        if A.shape[0] != self.S.N:
            raise herm.DimensionError(f"A is {A.shape[0]}x{A.shape[0]} but S acts on N={self.S.N}")
        scale = max(1.0, float(np.abs(A).max())) if A.size else 1.0
        if not np.allclose(A, A.conj().T, atol=1e-12 * scale, rtol=0):
            raise ValueError("bare matrix must be Hermitian")
        A = herm.re_part(A)
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if self.metric is not None and self.metric.dim != A.shape[0]:
            raise herm.DimensionError("metric dimension does not match A")

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def a_norm(self) -> float:
        """``||A||`` (the constant bounding the bare matrix)."""
        return herm.op_norm(self.A)


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-11
    max_iter: int = 10_000
    damping: float = 1.0
    newton_switch: float = 1e-3
    method: str = "auto"
    min_damping: float = 2.0 ** -20

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.method not in ("auto", "dense", "diagonal", "circulant"):
            raise ValueError(f"unknown solver method {self.method!r}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be positive")


# ---------------------------------------------------------------------------
# algebras
# ---------------------------------------------------------------------------


class _DenseAlg:
    kind = "dense"

    def __init__(self, data: DataPair):
        self.N = data.N
        self.S = data.S
        self.A = np.array(data.A)
        self.one = np.eye(self.N, dtype=np.complex128)

    def scalar(self, z):
        return z * self.one

    def mul(self, X, Y):
        return X @ Y

    def inv(self, X):
        return np.linalg.inv(X)

    def apply_S(self, X):
        return self.S(X)

    def im_min(self, X):
        return float(np.linalg.eigvalsh(herm.im_part(X))[0])

    def max_norm(self, X):
        return float(np.abs(X).max())

    def op_norm(self, X):
        return herm.op_norm(X)

    def to_dense(self, X):
        return X

    def from_dense(self, X):
        return np.asarray(X, dtype=np.complex128)

    def avg(self, X):
        return complex(np.trace(X) / self.N)

    def shape(self):
        return (self.N, self.N)


class _DiagonalAlg(_DenseAlg):
    kind = "diagonal"

    def __init__(self, data: DataPair):
        self.N = data.N
        self.S = data.S
        self.A = np.diag(data.A).astype(np.complex128)
        self.one = np.ones(self.N, dtype=np.complex128)

    def mul(self, X, Y):
        return X * Y

    def inv(self, X):
        return 1.0 / X

    def apply_S(self, X):
        return self.S.diagonal_action(X)

    def im_min(self, X):
        return float(X.imag.min())

    def max_norm(self, X):
        return float(np.abs(X).max())

    def op_norm(self, X):
        return float(np.abs(X).max())

    def to_dense(self, X):
        return np.diag(X)

    def from_dense(self, X):
        return np.diag(np.asarray(X)).astype(np.complex128)

    def avg(self, X):
        return complex(np.mean(X))

    def shape(self):
        return (self.N,)


def circulant_symbol(R: np.ndarray):
    """First row ``c[p] = R[0, p]`` if ``R_xy = c[(y - x) % N]`` exactly, else ``None``."""
    R = np.asarray(R)
    N = R.shape[0]
    c = R[0]
    idx = (np.arange(N)[None, :] - np.arange(N)[:, None]) % N
    return c.astype(np.complex128) if np.array_equal(R, c[idx]) else None


def circulant_dense(c: np.ndarray) -> np.ndarray:
    N = c.shape[0]
    idx = (np.arange(N)[None, :] - np.arange(N)[:, None]) % N
    return c[idx]


class _CirculantAlg(_DenseAlg):
    """Circulants ``R_xy = c[(y-x) % N]``; eigenvalues ``lam_k = N ifft(c)[k]``."""

    kind = "circulant"

    def __init__(self, data: DataPair):
        self.N = data.N
        self.S = data.S
        self.A = circulant_symbol(data.A)
        self.one = np.zeros(self.N, dtype=np.complex128)
        self.one[0] = 1.0

    def _eig(self, c):
        return self.N * np.fft.ifft(c)

    def _from_eig(self, lam):
        return np.fft.fft(lam) / self.N

    def mul(self, X, Y):
        return self._from_eig(self._eig(X) * self._eig(Y))

    def inv(self, X):
        return self._from_eig(1.0 / self._eig(X))

    def apply_S(self, X):
        return self.S.circulant_action(X)

    def im_min(self, X):
        return float(self._eig(X).imag.min())

    def max_norm(self, X):
        return float(np.abs(X).max())

    def op_norm(self, X):
        return float(np.abs(self._eig(X)).max())

    def to_dense(self, X):
        return circulant_dense(X)

    def from_dense(self, X):
        c = circulant_symbol(X)
        if c is None:
            raise ValueError("warm start is not circulant")
        return c

    def avg(self, X):
        return complex(X[0])

    def shape(self):
        return (self.N,)


def select_method(data: DataPair, requested: str = "auto") -> str:
    if requested != "auto":
        return requested
    A = data.A
    if np.array_equal(A, np.diag(np.diag(A))) and data.S.preserves_diagonal:
        return "diagonal"
    if data.S.translation_invariant and circulant_symbol(A) is not None:
        return "circulant"
    return "dense"


_ALGEBRAS = {"dense": _DenseAlg, "diagonal": _DiagonalAlg, "circulant": _CirculantAlg}


# ---------------------------------------------------------------------------
# solutions
# ---------------------------------------------------------------------------


@dataclass
class MdeSolution:
    zeta: complex
    residual: float
    iterations: int
    method: str
    min_im_eig: float
    _value: np.ndarray = field(repr=False)
    _alg: object = field(repr=False)

    @property
    def M(self) -> np.ndarray:
        return self._alg.to_dense(self._value)

    @property
    def avg(self) -> complex:
        """``<M>``."""
        return self._alg.avg(self._value)

    @property
    def eta(self) -> float:
        return self.zeta.imag

    @property
    def N(self) -> int:
        return self._alg.N

    @property
    def op_norm(self) -> float:
        return self._alg.op_norm(self._value)

    @property
    def rho(self) -> float:
        return float(self.avg.imag / np.pi)


_SOLVE_LOG: list | None = None


@contextlib.contextmanager
def record_solves():
    """Collect ``(zeta, N, method, residual, min_im_eig)`` for every accepted solve."""
    global _SOLVE_LOG
    previous = _SOLVE_LOG
    _SOLVE_LOG = log = []
    try:
        yield log
    finally:
        _SOLVE_LOG = previous


def _log(sol: MdeSolution):
    if _SOLVE_LOG is not None:
        _SOLVE_LOG.append((sol.zeta, sol.N, sol.method, sol.residual, sol.min_im_eig))


# ---------------------------------------------------------------------------
# iteration
# ---------------------------------------------------------------------------


def _newton_direction(alg, B_inv, M, rhs):
    """Solve ``delta + B^{-1} S[delta] M = rhs``."""
    shape = alg.shape()
    n = int(np.prod(shape))

    def L(v):
        d = v.reshape(shape)
        return (d + alg.mul(alg.mul(B_inv, alg.apply_S(d)), M)).reshape(-1)

    if n <= herm.BRUTE_FORCE_CUTOFF ** 2:
        J = np.empty((n, n), dtype=np.complex128)
        e = np.zeros(n, dtype=np.complex128)
        for k in range(n):
            e[k] = 1.0
            J[:, k] = L(e)
            e[k] = 0.0
        return np.linalg.solve(J, rhs.reshape(-1)).reshape(shape)
    op = spla.LinearOperator((n, n), matvec=L, dtype=np.complex128)
    sol, info = spla.gmres(op, rhs.reshape(-1), rtol=1e-10, atol=0.0, restart=min(n, 60), maxiter=50)
    return sol.reshape(shape)


def _iterate(alg, zeta: complex, cfg: SolverConfig, M0, defect=None, check_positivity=True):
    one = alg.one
    z1 = alg.scalar(zeta) if alg.kind == "dense" else zeta * one
    base = z1 - alg.A
    rhs_one = one if defect is None else one + defect

    def B_of(M):
        return base + alg.apply_S(M)

    def resid(M, B=None):
        B = B_of(M) if B is None else B
        return alg.max_norm(rhs_one + alg.mul(B, M))

    def positive(M):
        return (not check_positivity) or alg.im_min(M) > 0

    M = M0
    res = resid(M)
    alpha = cfg.damping
    good_streak = 0
    slow_streak = 0
    newton_ok = True
    it = 0
    while it < cfg.max_iter:
        if res <= cfg.tol:
            return M, res, it
        it += 1
        B = B_of(M)
        if newton_ok and (res < cfg.newton_switch or slow_streak >= 5):
            slow_streak = 0
            B_inv = alg.inv(B)
            G = rhs_one + alg.mul(B, M)
            try:
                delta = _newton_direction(alg, B_inv, M, -alg.mul(B_inv, G))
            except np.linalg.LinAlgError:
                delta = None
            accepted = False
            if delta is not None and np.all(np.isfinite(delta)):
                t = 1.0
                for _ in range(12):
                    trial = M + t * delta
                    if positive(trial):
                        r_new = resid(trial)
                        if r_new < res:
                            M, res, accepted = trial, r_new, True
                            break
                    t *= 0.5
            if accepted:
                continue
            newton_ok = False  # fall back to fixed-point steps for this solve
        fp = -alg.mul(alg.inv(B), rhs_one)
        trial = (1 - alpha) * M + alpha * fp
        if not positive(trial) or not np.all(np.isfinite(trial)):
            alpha *= 0.5
            if alpha < cfg.min_damping:
                raise ConvergenceError("damping underflow: positivity of Im M could not be kept",
                                       residual=res, zeta=zeta)
            continue
        r_new = resid(trial)
        if r_new > res:
            good_streak = 0
            alpha = max(alpha * 0.5, cfg.min_damping)
        else:
            good_streak += 1
            if good_streak >= 5 and alpha < 1.0:
                alpha = min(1.0, 2 * alpha)
                good_streak = 0
        # a stalled contraction (typical close to the real axis) re-enables Newton
        slow_streak = slow_streak + 1 if r_new > 0.9 * res else 0
        if r_new < 0.5 * cfg.newton_switch or slow_streak >= 5:
            newton_ok = True
        M, res = trial, r_new
    raise ConvergenceError(f"no convergence after {cfg.max_iter} iterations (residual {res:.3e})",
                           residual=res, zeta=zeta)


def solve_at(data: DataPair, zeta, cfg: SolverConfig | None = None, warm_start=None) -> MdeSolution:
    """Solve the MDE at ``zeta`` in the upper half plane.

    ``warm_start`` may be a previous :class:`MdeSolution` or a matrix with
    positive definite imaginary part.
    """
    cfg = cfg or SolverConfig()
    zeta = as_zeta(zeta)
    method = select_method(data, cfg.method)
    if isinstance(warm_start, MdeSolution) and warm_start.method != method:
        warm_start = warm_start.M
    alg = _ALGEBRAS[method](data)
    if isinstance(warm_start, MdeSolution):
        M0 = warm_start._value.copy()
    elif warm_start is not None:
        M0 = alg.from_dense(warm_start)
        if alg.im_min(M0) <= 0:
            raise ValueError("warm start must have positive definite imaginary part")
    else:
        M0 = (-1.0 / zeta) * alg.one
    M, res, it = _iterate(alg, zeta, cfg, M0)
    sol = MdeSolution(zeta, res, it, method, alg.im_min(M), M, alg)
    if sol.min_im_eig <= 0:
        raise ConvergenceError("solution lost positivity of Im M", residual=res, zeta=zeta)
    _log(sol)
    return sol


def solve_perturbed(data: DataPair, zeta, D: np.ndarray, cfg: SolverConfig | None = None,
                    warm_start=None) -> np.ndarray:
    """Solve ``-1 = (zeta 1 - A + S[G]) G + D`` near the unperturbed solution (dense)."""
    cfg = replace(cfg or SolverConfig(), method="dense")
    zeta = as_zeta(zeta)
    alg = _DenseAlg(data)
    if warm_start is None:
        warm_start = solve_at(data, zeta, cfg).M
    M0 = np.array(warm_start.M if isinstance(warm_start, MdeSolution) else warm_start, dtype=np.complex128)
    G, _, _ = _iterate(alg, zeta, cfg, M0, defect=np.asarray(D, dtype=np.complex128), check_positivity=False)
    return G


def residual(M: np.ndarray, data: DataPair, zeta) -> float:
    """``|| 1 + (zeta 1 - A + S[M]) M ||_max``."""
    zeta = as_zeta(zeta)
    M = np.asarray(M, dtype=np.complex128)
    B = zeta * np.eye(data.N) - data.A + data.S(M)
    return float(np.abs(np.eye(data.N) + B @ M).max())


def default_eta_grid(kappa: float, eta_target: float, ratio: float = 0.5) -> np.ndarray:
    """Geometric grid from ``max(10, 2 kappa)`` down to ``eta_target`` (inclusive)."""
    if eta_target <= 0:
        raise ValueError("eta_target must be positive")
    top = max(10.0, 2.0 * kappa)
    etas = [top]
    while etas[-1] * ratio > eta_target * (1 + 1e-12):
        etas.append(etas[-1] * ratio)
    if etas[-1] != eta_target:
        etas.append(eta_target)
    return np.array(etas)


def continuation_sweep(data: DataPair, tau: float, eta_grid: Sequence[float],
                       cfg: SolverConfig | None = None, warm_start=None) -> list[MdeSolution]:
    """Solve along ``tau + i eta`` for a strictly descending ``eta_grid``, warm-starting each step."""
    etas = np.asarray(eta_grid, dtype=float)
    if etas.ndim != 1 or etas.size == 0 or np.any(etas <= 0) or np.any(np.diff(etas) >= 0):
        raise ValueError("eta grid must be strictly descending and positive")
    out = []
    prev = warm_start
    for eta in etas:
        try:
            sol = solve_at(data, complex(tau, eta), cfg, warm_start=prev)
        except ConvergenceError as exc:
            exc.eta = float(eta)
            raise
        out.append(sol)
        prev = sol
    return out


# ---------------------------------------------------------------------------
# stability operator
# ---------------------------------------------------------------------------


def stability_operator(M: np.ndarray, S: SelfEnergy) -> SuperOperator:
    """``R -> R - M S[R] M`` with adjoint ``R -> R - S[M^* R M^*]``."""
    M = np.asarray(M, dtype=np.complex128)
    Ms = M.conj().T
    return SuperOperator(M.shape[0], lambda R: R - M @ S(R) @ M, lambda R: R - S(Ms @ R @ Ms),
                         name="Id - C_M S")


def smallest_singular_value(T: SuperOperator, tol: float = 1e-10, max_iter: int = 500, seed: int = 0) -> float:
    """Smallest singular value of ``T`` (dense for small N, inverse iteration otherwise)."""
    N = T.dim
    if N <= herm.BRUTE_FORCE_CUTOFF:
        return float(np.linalg.svd(herm.dense_superop(T), compute_uv=False)[-1])
    n = N * N
    op = spla.LinearOperator((n, n), matvec=lambda v: T(v.reshape(N, N)).reshape(-1), dtype=np.complex128)
    opH = spla.LinearOperator((n, n), matvec=lambda v: T.adjoint_apply(v.reshape(N, N)).reshape(-1),
                              dtype=np.complex128)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    mu_old = 0.0
    for _ in range(max_iter):
        y, _ = spla.gmres(opH, v, rtol=1e-12, atol=0.0, restart=min(n, 80), maxiter=100)
        x, _ = spla.gmres(op, y, rtol=1e-12, atol=0.0, restart=min(n, 80), maxiter=100)
        mu = np.linalg.norm(x)
        v = x / mu
        if abs(mu - mu_old) <= tol * mu:
            break
        mu_old = mu
    return float(1.0 / np.sqrt(mu))


def vector_dyson_oracle(a: np.ndarray, s: np.ndarray, zeta: complex, beta: int = 2,
                        tol: float = 1e-13, max_iter: int = 200_000) -> np.ndarray:
    """Independent scalar iteration for diagonal data: ``-1/m_x = zeta - a_x + (S m)_x``.

    ``(S m)_x = (1/N) sum_u s_xu m_u`` (+ ``s_xx m_x / N`` for beta=1).  Used only
    as a test oracle, with damping 1/2 and plain loops over the components.
    """
    N = len(a)
    m = np.full(N, -1.0 / zeta, dtype=np.complex128)
    for _ in range(max_iter):
        new = np.empty(N, dtype=np.complex128)
        for x in range(N):
            acc = 0j
            for u in range(N):
                acc += s[x, u] * m[u]
            acc /= N
            if beta == 1:
                acc += s[x, x] * m[x] / N
            new[x] = -1.0 / (zeta - a[x] + acc)
        new = 0.5 * (m + new)
        if np.max(np.abs(new - m)) < tol:
            return new
        m = new
    raise ConvergenceError("vector oracle did not converge")


def semicircle_stieltjes(zeta: complex) -> complex:
    """``m_sc(zeta) = (-zeta + sqrt(zeta^2 - 4)) / 2`` on the upper-half-plane branch."""
    zeta = complex(zeta)
    root = np.sqrt(zeta * zeta - 4)
    m = (-zeta + root) / 2
    if m.imag < 0:
        m = (-zeta - root) / 2
    return complex(m)


def semicircle_density(tau):
    tau = np.asarray(tau, dtype=float)
    return np.sqrt(np.clip(4 - tau ** 2, 0.0, None)) / (2 * np.pi)


__all__: Iterable[str] = [
    "DataPair", "SpectralParam", "SolverConfig", "MdeSolution", "ConvergenceError", "solve_at",
    "solve_perturbed", "residual", "continuation_sweep", "default_eta_grid", "stability_operator",
    "smallest_singular_value", "record_solves", "select_method", "semicircle_stieltjes",
    "semicircle_density", "vector_dyson_oracle", "circulant_symbol", "circulant_dense",
]
