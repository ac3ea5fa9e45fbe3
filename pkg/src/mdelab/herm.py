"""Matrix algebra on C^{N x N} with the normalised trace inner product.

Throughout, ``<R, T> = tr(R^* T) / N`` and ``<R> = <1, R>``.  Superoperators
are linear maps on N x N matrices; :func:`dense_superop` materialises them in
the matrix-unit basis so that brute-force spectral computations are available
for small N.  Because the normalised product is a fixed multiple of the
Euclidean product on ``vec(R)``, operator norms and spectra computed from the
dense form need no further correction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BRUTE_FORCE_CUTOFF = 16
DENSE_SVD_CUTOFF = 512
DEFAULT_NU_MAX = 8


class SingularMatrixError(ValueError):
    pass


class InvalidProfileError(ValueError):
    pass


class DimensionError(ValueError):
    pass


def hermitian_from_upper(upper: np.ndarray) -> np.ndarray:
    """Build an exactly Hermitian matrix from the upper triangle of ``upper``.

    The diagonal is made real; the strict lower triangle is overwritten by the
    conjugate of the strict upper triangle.
    """
    U = np.triu(np.asarray(upper))
    H = U + np.triu(U, 1).conj().T
    idx = np.diag_indices_from(H)
    H[idx] = H[idx].real
    return H


def avg_trace(R: np.ndarray) -> complex:
    """Normalised trace ``tr(R) / N``."""
    R = np.asarray(R)
    return complex(np.trace(R) / R.shape[0])


def inner(R: np.ndarray, T: np.ndarray) -> complex:
    """Normalised inner product ``tr(R^* T) / N``."""
    R = np.asarray(R)
    return complex(np.vdot(R, T) / R.shape[0])


def matrix_norm(R: np.ndarray, kind: str = "op") -> float:
    """Matrix norms used throughout the package.

    ``op`` is the largest singular value, ``hs`` the norm of the normalised
    inner product, ``max`` the entrywise maximum and ``one_vee_inf`` the larger
    of the maximal absolute column and row sums.
    """
    R = np.asarray(R)
    if kind == "op":
        return op_norm(R)
    if kind == "hs":
        return float(np.linalg.norm(R) / np.sqrt(R.shape[0]))
    if kind == "max":
        return float(np.max(np.abs(R))) if R.size else 0.0
    if kind == "one_vee_inf":
        A = np.abs(R)
        return float(max(A.sum(axis=0).max(), A.sum(axis=1).max()))
    raise ValueError(f"unknown norm kind {kind!r}")


def op_norm(R: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> float:
    R = np.asarray(R)
    n = R.shape[0]
    if n <= DENSE_SVD_CUTOFF:
        return float(np.linalg.norm(R, 2)) if R.size else 0.0
    # power iteration on R^* R
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v /= np.linalg.norm(v)
    s_old = 0.0
    for _ in range(max_iter):
        w = R.conj().T @ (R @ v)
        s = np.linalg.norm(w)
        if s == 0.0:
            return 0.0
        v = w / s
        if abs(s - s_old) <= tol * s:
            break
        s_old = s
    return float(np.sqrt(s))


def is_psd(R: np.ndarray, tol: float = 0.0) -> bool:
    """True iff the smallest eigenvalue of the Hermitian part is >= -tol."""
    R = np.asarray(R)
    Rh = 0.5 * (R + R.conj().T)
    return bool(np.linalg.eigvalsh(Rh)[0] >= -tol)


def min_eig(R: np.ndarray) -> float:
    R = np.asarray(R)
    return float(np.linalg.eigvalsh(0.5 * (R + R.conj().T))[0])


def im_part(M: np.ndarray) -> np.ndarray:
    """``(M - M^*) / 2i``."""
    return (M - M.conj().T) / 2j


def re_part(M: np.ndarray) -> np.ndarray:
    """``(M + M^*) / 2``."""
    return (M + M.conj().T) / 2


def herm_func(R: np.ndarray, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply ``func`` to the eigenvalues of a Hermitian matrix."""
    R = np.asarray(R)
    w, V = np.linalg.eigh(0.5 * (R + R.conj().T))
    return (V * func(w)) @ V.conj().T


def sqrtm_psd(R: np.ndarray) -> np.ndarray:
    return herm_func(R, lambda w: np.sqrt(np.clip(w, 0.0, None)))


def project_psd(R: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues of the Hermitian part to zero."""
    return herm_func(R, lambda w: np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# index metrics and decay norms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexMetric:
    """Pseudometric on ``{0, ..., N-1}`` stored as a dense distance table."""

    distances: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        d = np.asarray(self.distances, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise DimensionError("distance table must be square")
        if np.any(d < 0) or np.any(np.isnan(d)):
            raise ValueError("distances must be nonnegative")
        if np.any(np.diag(d) != 0):
            raise ValueError("d(x, x) must vanish")
        if not np.array_equal(d, d.T):
            raise ValueError("distance table must be symmetric")
        object.__setattr__(self, "distances", d)

    @property
    def dim(self) -> int:
        return self.distances.shape[0]

    @classmethod
    def circle(cls, N: int) -> "IndexMetric":
        x = np.arange(N)
        diff = np.abs(x[:, None] - x[None, :])
        return cls(np.minimum(diff, N - diff).astype(float), name="circle")

    @classmethod
    def line(cls, N: int) -> "IndexMetric":
        x = np.arange(N)
        return cls(np.abs(x[:, None] - x[None, :]).astype(float), name="line")

    @classmethod
    def discrete(cls, N: int) -> "IndexMetric":
        d = np.full((N, N), np.inf)
        np.fill_diagonal(d, 0.0)
        return cls(d, name="discrete")

    @classmethod
    def from_name(cls, name: str, N: int) -> "IndexMetric":
        try:
            return {"circle": cls.circle, "line": cls.line, "discrete": cls.discrete}[name](N)
        except KeyError:
            raise ValueError(f"unknown metric {name!r}") from None

    def satisfies_triangle(self) -> bool:
        d = self.distances
        # d[x, y] <= min_z d[x, z] + d[z, y]
        through = np.min(d[:, :, None] + d[None, :, :], axis=1)
        return bool(np.all(d <= through + 1e-12))

    def ball_sizes(self, tau: float) -> np.ndarray:
        return np.sum(self.distances <= tau, axis=1)

    def volume_exponent(self) -> float:
        """Smallest P with ``|B_tau(x)| <= tau**P`` for all tau >= 2."""
        d = self.distances
        finite = np.unique(d[np.isfinite(d)])
        taus = np.unique(np.concatenate([[2.0], finite[finite >= 2.0]]))
        P = 0.0
        for tau in taus:
            P = max(P, np.log(self.ball_sizes(tau).max()) / np.log(tau))
        return float(P)


@dataclass(frozen=True)
class DecayProfile:
    """Sequence ``pi(0..nu_max)`` of positive decay constants."""

    values: np.ndarray = field(default_factory=lambda: np.ones(DEFAULT_NU_MAX + 1))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or v.size == 0:
            raise InvalidProfileError("profile must be a nonempty sequence")
        if np.any(~(v > 0)):
            raise InvalidProfileError("decay profile entries must be strictly positive")
        object.__setattr__(self, "values", v)

    @property
    def nu_max(self) -> int:
        return self.values.size - 1

    @classmethod
    def constant(cls, c: float, nu_max: int = DEFAULT_NU_MAX) -> "DecayProfile":
        return cls(np.full(nu_max + 1, float(c)))

    @classmethod
    def geometric(cls, c: float, base: float, nu_max: int = DEFAULT_NU_MAX) -> "DecayProfile":
        return cls(c * float(base) ** np.arange(nu_max + 1))

    @classmethod
    def factorial(cls, nu_max: int = DEFAULT_NU_MAX) -> "DecayProfile":
        from math import factorial

        return cls(np.array([factorial(k) for k in range(nu_max + 1)], dtype=float))


def decay_norm(R: np.ndarray, metric: IndexMetric, profile: DecayProfile) -> float:
    """Weighted max norm certifying faster-than-power-law off-diagonal decay.

    A value <= 1 certifies ``|r_xy| <= pi(nu) / (1 + d)^nu + pi(0) / N`` for
    every ``nu <= nu_max``.
    """
    if not isinstance(profile, DecayProfile):
        profile = DecayProfile(profile)
    R = np.asarray(R)
    N = R.shape[0]
    if metric.dim != N:
        raise DimensionError("metric dimension does not match matrix")
    absR = np.abs(R)
    if not np.any(absR):
        return 0.0
    d = metric.distances
    pi = profile.values
    best = 0.0
    with np.errstate(over="ignore", divide="ignore"):
        for nu, p in enumerate(pi):
            bound = p / (1.0 + d) ** nu + pi[0] / N
            best = max(best, float(np.max(absR / bound)))
    return best


# ---------------------------------------------------------------------------
# superoperators
# ---------------------------------------------------------------------------


class SuperOperator:
    """Linear map on N x N matrices with an adjoint w.r.t. the normalised product."""

    def __init__(self, dim: int, apply: Callable, adjoint: Callable | None = None,
                 name: str = "", self_adjoint: bool = False):
        self.dim = int(dim)
        self._apply = apply
        self._adjoint = apply if (adjoint is None and self_adjoint) else adjoint
        self.name = name
        self.self_adjoint = self_adjoint

    def __call__(self, R: np.ndarray) -> np.ndarray:
        return self._apply(np.asarray(R, dtype=np.complex128))

    apply = __call__

    def adjoint_apply(self, R: np.ndarray) -> np.ndarray:
        if self._adjoint is None:
            raise NotImplementedError(f"no adjoint registered for {self.name or 'operator'}")
        return self._adjoint(np.asarray(R, dtype=np.complex128))

    @property
    def adjoint(self) -> "SuperOperator":
        return SuperOperator(self.dim, self._adjoint, self._apply, name=f"{self.name}*",
                             self_adjoint=self.self_adjoint)

    def __matmul__(self, other: "SuperOperator") -> "SuperOperator":
        _check_dims(self, other)
        adj = None
        if self._adjoint is not None and other._adjoint is not None:
            adj = lambda R: other.adjoint_apply(self.adjoint_apply(R))  # noqa: E731
        return SuperOperator(self.dim, lambda R: self(other(R)), adj, name=f"({self.name})({other.name})")

    def __add__(self, other: "SuperOperator") -> "SuperOperator":
        _check_dims(self, other)
        adj = None
        if self._adjoint is not None and other._adjoint is not None:
            adj = lambda R: self.adjoint_apply(R) + other.adjoint_apply(R)  # noqa: E731
        return SuperOperator(self.dim, lambda R: self(R) + other(R), adj,
                             self_adjoint=self.self_adjoint and other.self_adjoint)

    def __sub__(self, other: "SuperOperator") -> "SuperOperator":
        return self + other.scaled(-1.0)

    def scaled(self, c: complex) -> "SuperOperator":
        adj = None
        if self._adjoint is not None:
            adj = lambda R: np.conj(c) * self.adjoint_apply(R)  # noqa: E731
        real = np.isreal(c)
        return SuperOperator(self.dim, lambda R: c * self(R), adj, name=f"{c}*{self.name}",
                             self_adjoint=self.self_adjoint and bool(real))


def _check_dims(a: SuperOperator, b: SuperOperator):
    if a.dim != b.dim:
        raise DimensionError(f"superoperator dims differ: {a.dim} vs {b.dim}")


def identity_op(N: int) -> SuperOperator:
    return SuperOperator(N, lambda R: R.copy(), name="Id", self_adjoint=True)


def sandwich(R: np.ndarray) -> SuperOperator:
    """``C_R[T] = R T R``; the adjoint is ``C_{R^*}``."""
    R = np.asarray(R, dtype=np.complex128)
    Rs = R.conj().T
    herm = np.allclose(R, Rs, atol=0, rtol=0)
    return SuperOperator(R.shape[0], lambda T: R @ T @ R, lambda T: Rs @ T @ Rs,
                         name="C_R", self_adjoint=herm)


def conjugate_sandwich(R: np.ndarray) -> SuperOperator:
    """``K_R[T] = R^* T R``; the adjoint is ``T -> R T R^*``."""
    R = np.asarray(R, dtype=np.complex128)
    Rs = R.conj().T
    return SuperOperator(R.shape[0], lambda T: Rs @ T @ R, lambda T: R @ T @ Rs, name="K_R")


def sandwich_inverse(R: np.ndarray) -> SuperOperator:
    """``C_R^{-1} = C_{R^{-1}}``."""
    R = np.asarray(R, dtype=np.complex128)
    if R.size == 0 or np.linalg.cond(R) > 1e14:
        raise SingularMatrixError("sandwich inverse requested for a (numerically) singular matrix")
    return sandwich(np.linalg.inv(R))


def mean_field_projection(N: int, scale: float = 1.0) -> SuperOperator:
    """``R -> scale <R> 1``."""
    eye = np.eye(N, dtype=np.complex128)
    return SuperOperator(N, lambda R: scale * (np.trace(R) / N) * eye, name="<.>1", self_adjoint=True)


def dense_superop(T: SuperOperator, cutoff: int = BRUTE_FORCE_CUTOFF, adjoint: bool = False) -> np.ndarray:
    """Materialise ``T`` as an N^2 x N^2 matrix in the matrix-unit basis.

    Column ``k = x*N + y`` holds ``vec(T[E_xy])`` with row-major ``vec``.
    """
    N = T.dim
    if N > cutoff:
        raise MemoryError(f"dense superoperator refused for N={N} > cutoff {cutoff}")
    out = np.empty((N * N, N * N), dtype=np.complex128)
    E = np.zeros((N, N), dtype=np.complex128)
    f = T.adjoint_apply if adjoint else T
    for k in range(N * N):
        x, y = divmod(k, N)
        E[x, y] = 1.0
        out[:, k] = np.asarray(f(E)).reshape(-1)
        E[x, y] = 0.0
    return out


def superop_from_dense(D: np.ndarray) -> SuperOperator:
    n2 = D.shape[0]
    N = int(round(np.sqrt(n2)))
    Dh = D.conj().T
    return SuperOperator(N, lambda R: (D @ R.reshape(-1)).reshape(N, N),
                         lambda R: (Dh @ R.reshape(-1)).reshape(N, N), name="dense",
                         self_adjoint=bool(np.allclose(D, Dh)))


def sp_norm_dense(D: np.ndarray) -> float:
    """Norm induced by ``||.||_hs`` for a dense superoperator."""
    return float(np.linalg.norm(D, 2))


def random_hermitian(N: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    X = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    return scale * (X + X.conj().T) / 2


def random_complex(N: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))


def rank_one(v: np.ndarray) -> np.ndarray:
    return np.outer(v, v.conj())


__all__: Sequence[str] = [
    "avg_trace", "inner", "matrix_norm", "op_norm", "is_psd", "min_eig", "im_part", "re_part",
    "herm_func", "sqrtm_psd", "project_psd", "IndexMetric", "DecayProfile", "decay_norm",
    "SuperOperator", "identity_op", "sandwich", "conjugate_sandwich", "sandwich_inverse",
    "mean_field_projection", "dense_superop", "superop_from_dense", "sp_norm_dense",
    "hermitian_from_upper", "SingularMatrixError", "InvalidProfileError", "DimensionError",
]
