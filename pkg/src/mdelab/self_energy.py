"""Self-energy operators ``S[R] = E (H - A) R (H - A)`` and their model parameters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import herm
from .herm import DecayProfile, IndexMetric, SuperOperator
from .kernels import banded_apply


class KernelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# covariance kernels
# ---------------------------------------------------------------------------


def filter_autocorrelation(phi: np.ndarray, N: int) -> np.ndarray:
    """Circular autocorrelation ``c(p, q) = sum_ab phi[a,b] phi[a-p, b-q]``.

    Returned as an ``(2r+1, 2r+1)`` table with ``r = 2f`` for a filter of
    half-width ``f``.
    """
    phi = np.asarray(phi, dtype=float)
    f = (phi.shape[0] - 1) // 2
    r = 2 * f
    if 2 * r + 1 > N:
        raise KernelError(f"filter half-width {f} too large for N={N} (need N >= {2 * r + 1})")
    pad = np.zeros((2 * r + 1, 2 * r + 1))
    pad[f:f + phi.shape[0], f:f + phi.shape[1]] = phi
    c = np.zeros_like(pad)
    for ip in range(2 * r + 1):
        for iq in range(2 * r + 1):
            shifted = np.roll(np.roll(pad, ip - r, axis=0), iq - r, axis=1)
            c[ip, iq] = np.sum(pad * shifted)
    return c


@dataclass(frozen=True)
class CovarianceKernel:
    """Translation-invariant banded second-moment data of a Hermitian fluctuation W.

    ``kappa(x,u;v,y) = E[w_xu w_vy] = env_xu env_vy (Kc[y-x, v-u] + Kd[v-x, y-u])``
    with circular offsets of modulus at most ``r``.  ``Kc`` is the conjugate
    pairing (it correlates ``w_xu`` with ``conj(w_yv)``), ``Kd`` the direct one.
    Complex Hermitian (beta=2) defaults have ``Kd = 0``.

    If ``phi`` is set the kernel is realised by the moving-average construction
    ``W = (Y + Y^*)/sqrt(2)`` (beta=2) or ``(Y + Y^T)/sqrt(2)`` (beta=1) with
    ``Y = phi * X`` and i.i.d. standard Gaussian ``X``.
    """

    N: int
    beta: int
    Kc: np.ndarray
    Kd: np.ndarray
    envelope: np.ndarray | None = None
    phi: np.ndarray | None = None
    name: str = "kernel"

    def __post_init__(self):
        if self.beta not in (1, 2):
            raise KernelError("beta must be 1 or 2")
        Kc = np.asarray(self.Kc, dtype=float)
        Kd = np.asarray(self.Kd, dtype=float)
        if Kc.shape != Kd.shape or Kc.ndim != 2 or Kc.shape[0] != Kc.shape[1] or Kc.shape[0] % 2 == 0:
            raise KernelError("pairing tables must be equal odd-sized square arrays")
        r = (Kc.shape[0] - 1) // 2
        if 2 * r + 1 > self.N:
            raise KernelError(f"range {r} too large for N={self.N}")
        for K, label in ((Kc, "Kc"), (Kd, "Kd")):
            if not (np.allclose(K, K.T) and np.allclose(K, K[::-1, ::-1])):
                raise KernelError(f"{label} violates the Hermitian pairing symmetries")
        if self.envelope is not None:
            env = np.asarray(self.envelope, dtype=float)
            if env.shape != (self.N, self.N) or not np.allclose(env, env.T) or np.any(env < 0):
                raise KernelError("envelope must be a symmetric nonnegative N x N array")
            object.__setattr__(self, "envelope", env)
        object.__setattr__(self, "Kc", Kc)
        object.__setattr__(self, "Kd", Kd)

    @property
    def r(self) -> int:
        return (self.Kc.shape[0] - 1) // 2

    @property
    def translation_invariant(self) -> bool:
        return self.envelope is None

    @classmethod
    def from_filter(cls, N: int, phi, beta: int = 2, envelope=None, name: str = "filter") -> "CovarianceKernel":
        phi = np.atleast_2d(np.asarray(phi, dtype=float))
        if phi.shape[0] != phi.shape[1] or phi.shape[0] % 2 == 0:
            raise KernelError("filter must be an odd-sized square array")
        c = filter_autocorrelation(phi, N)
        K = 0.5 * (c + c.T)
        Kd = K.copy() if beta == 1 else np.zeros_like(K)
        return cls(N, beta, K, Kd, envelope=envelope, phi=phi, name=name)

    @classmethod
    def white(cls, N: int, beta: int = 2, scale: float = 1.0, envelope=None) -> "CovarianceKernel":
        """Independent entries (GUE/GOE-type) with ``E|w_xy|^2 = scale``."""
        return cls.from_filter(N, [[np.sqrt(scale)]], beta=beta, envelope=envelope, name="white")

    @classmethod
    def zero(cls, N: int, beta: int = 2) -> "CovarianceKernel":
        return cls(N, beta, np.zeros((1, 1)), np.zeros((1, 1)), phi=np.zeros((1, 1)), name="zero")

    def env(self, x, y):
        if self.envelope is None:
            return 1.0
        return self.envelope[x, y]

    def _table(self, K, p, q):
        N, r = self.N, self.r
        p = (np.asarray(p) + N // 2) % N - N // 2
        q = (np.asarray(q) + N // 2) % N - N // 2
        inside = (np.abs(p) <= r) & (np.abs(q) <= r)
        return np.where(inside, K[np.clip(p + r, 0, 2 * r), np.clip(q + r, 0, 2 * r)], 0.0)

    def kappa(self, x, u, v, y):
        """``E[w_xu w_vy]``; accepts integer arrays."""
        val = self._table(self.Kc, np.subtract(y, x), np.subtract(v, u))
        val = val + self._table(self.Kd, np.subtract(v, x), np.subtract(y, u))
        out = self.env(x, u) * self.env(v, y) * val
        return out if np.ndim(out) else float(out)

    def kappa_tensor(self) -> np.ndarray:
        """Dense ``kappa[x, u, v, y]`` (small N only)."""
        N = self.N
        if N > 32:
            raise MemoryError("dense kernel tensor limited to N <= 32")
        x, u, v, y = np.meshgrid(*(np.arange(N),) * 4, indexing="ij")
        return self.kappa(x, u, v, y)

    def real_dof_index(self):
        """Upper-triangle entries and their real degrees of freedom.

        Returns an ``(n, 3)`` integer array of ``(x, y, part)`` with part 0 for
        the real part and 1 for the imaginary part (off-diagonal, beta=2 only).
        """
        dof = []
        for x in range(self.N):
            for y in range(x, self.N):
                dof.append((x, y, 0))
                if self.beta == 2 and x != y:
                    dof.append((x, y, 1))
        return np.array(dof, dtype=int)

    def real_covariance(self, max_dim: int = 64) -> np.ndarray:
        """Covariance of the real degrees of freedom of W."""
        if self.N > max_dim:
            raise MemoryError(f"real covariance assembly limited to N <= {max_dim}")
        dof = self.real_dof_index()
        x, u, a = (dof[:, k][:, None] for k in range(3))
        v, y, b = (dof[:, k][None, :] for k in range(3))
        e_zz = self.kappa(x, u, v, y)       # E z1 z2
        e_zzbar = self.kappa(x, u, y, v)    # E z1 conj(z2), conj(w_vy) = w_yv
        C = np.where((a == 0) & (b == 0), 0.5 * np.real(e_zz + e_zzbar), 0.0)
        C = np.where((a == 1) & (b == 1), 0.5 * np.real(e_zzbar - e_zz), C)
        C = np.where((a == 0) & (b == 1), 0.5 * np.imag(e_zz - e_zzbar), C)
        C = np.where((a == 1) & (b == 0), 0.5 * np.imag(e_zz + e_zzbar), C)
        return 0.5 * (C + C.T)

    def is_psd_covariance(self, tol: float = 1e-10, max_dim: int = 64) -> bool:
        C = self.real_covariance(max_dim=max_dim)
        return bool(np.linalg.eigvalsh(C)[0] >= -tol * max(1.0, np.abs(C).max()))

    def circulant_action(self, c: np.ndarray) -> np.ndarray:
        """Symbol of ``S[R]`` for circulant ``R_xy = c[(y-x) % N]``."""
        N, r = self.N, self.r
        out = np.zeros(N, dtype=np.complex128)
        offs = np.arange(-r, r + 1)
        cq = c[offs % N]
        out[offs % N] += self.Kc @ cq
        if np.any(self.Kd):
            # (1/N) sum_ab Kd[a,b] c[a+b-p]
            p = np.arange(N)
            for ia, a in enumerate(offs):
                for ib, b in enumerate(offs):
                    k = self.Kd[ia, ib]
                    if k != 0:
                        out += k * c[(a + b - p) % N] / N
        return out

    def preserves_diagonal(self) -> bool:
        r = self.r
        Kc_ok = np.all(self.Kc[np.arange(2 * r + 1) != r, r] == 0)
        offs = np.arange(-r, r + 1)
        Kd_ok = np.all(self.Kd[(offs[:, None] + offs[None, :]) != 0] == 0)
        return bool(Kc_ok and Kd_ok)


# ---------------------------------------------------------------------------
# self-energy operators
# ---------------------------------------------------------------------------


class SelfEnergy:
    """Base class.  Subclasses implement :meth:`apply`.

    ``diagonal_action`` and ``circulant_action`` return ``None`` when the
    operator does not preserve diagonal (resp. circulant) matrices; the solver
    uses them to pick a reduced representation.
    """

    kind = "abstract"

    def __init__(self, N: int):
        self.N = int(N)

    @property
    def dim(self) -> int:
        return self.N

    def apply(self, R: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, R):
        R = np.asarray(R, dtype=np.complex128)
        if R.shape != (self.N, self.N):
            raise herm.DimensionError(f"expected {self.N}x{self.N} input, got {R.shape}")
        return self.apply(R)

    def as_superop(self) -> SuperOperator:
        return SuperOperator(self.N, self.__call__, name=self.kind, self_adjoint=True)

    def diagonal_action(self, d: np.ndarray):
        return None

    def circulant_action(self, c: np.ndarray):
        return None

    @property
    def preserves_diagonal(self) -> bool:
        return False

    @property
    def translation_invariant(self) -> bool:
        return False

    def scaled(self, c: float) -> "SelfEnergy":
        raise NotImplementedError


class MeanField(SelfEnergy):
    kind = "mean_field"

    def __init__(self, N: int, scale: float = 1.0):
        super().__init__(N)
        if scale < 0:
            raise ValueError("mean-field scale must be nonnegative")
        self.scale = float(scale)

    def apply(self, R):
        return self.scale * (np.trace(R) / self.N) * np.eye(self.N, dtype=np.complex128)

    def diagonal_action(self, d):
        return np.full(self.N, self.scale * np.mean(d), dtype=np.complex128)

    def circulant_action(self, c):
        out = np.zeros(self.N, dtype=np.complex128)
        out[0] = self.scale * c[0]
        return out

    preserves_diagonal = property(lambda self: True)
    translation_invariant = property(lambda self: True)

    def scaled(self, c):
        return MeanField(self.N, self.scale * c)


class VarianceProfile(SelfEnergy):
    """Independent entries with ``E|w_xy|^2 = s_xy`` (``2 s_xx`` on the diagonal for beta=1)."""

    kind = "variance_profile"

    def __init__(self, s: np.ndarray, beta: int = 2):
        s = np.asarray(s, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("variance profile must be square")
        if not np.allclose(s, s.T) or np.any(s < 0):
            raise ValueError("variance profile must be symmetric and nonnegative")
        if beta not in (1, 2):
            raise ValueError("beta must be 1 or 2")
        super().__init__(s.shape[0])
        self.s = s
        self.beta = beta

    def apply(self, R):
        N = self.N
        out = np.diag(self.s @ np.diag(R) / N).astype(np.complex128)
        if self.beta == 1:
            out = out + self.s * R.T / N
        return out

    def diagonal_action(self, d):
        out = self.s @ d / self.N
        if self.beta == 1:
            out = out + np.diag(self.s) * d / self.N
        return out.astype(np.complex128)

    def _is_circulant(self) -> bool:
        first = self.s[0]
        return all(np.array_equal(np.roll(first, x), self.s[x]) for x in range(self.N))

    def circulant_action(self, c):
        if not self._is_circulant():
            return None
        f = self.s[0]
        out = np.zeros(self.N, dtype=np.complex128)
        out[0] = c[0] * f.mean()
        if self.beta == 1:
            out += f * c[(-np.arange(self.N)) % self.N] / self.N
        return out

    preserves_diagonal = property(lambda self: True)
    translation_invariant = property(lambda self: self._is_circulant())

    def scaled(self, c):
        return VarianceProfile(self.s * c, self.beta)


class KernelSelfEnergy(SelfEnergy):
    """``S[R]_xy = (1/N) sum_uv kappa(x,u;v,y) R_uv`` for a banded covariance kernel."""

    kind = "kernel"

    def __init__(self, kernel: CovarianceKernel, use_numba: bool | None = None):
        super().__init__(kernel.N)
        self.kernel = kernel
        self.use_numba = use_numba

    def apply(self, R):
        k = self.kernel
        return banded_apply(R, k.Kc, k.Kd, k.envelope, k.r, use_numba=self.use_numba)

    def diagonal_action(self, d):
        k = self.kernel
        if not k.preserves_diagonal():
            return None
        N, r = k.N, k.r
        if 2 * r + 1 > N:  # band wraps around; take the generic route
            return np.diag(self.apply(np.diag(d)))
        # S[diag d]_xx = (1/N) sum_u e(x,u) e(u,x) (Kc[0,0] + Kd[u-x, x-u]) d_u
        e2 = None if k.envelope is None else k.envelope * k.envelope.T
        out = k.Kc[r, r] * (np.full(N, d.sum()) if e2 is None else e2 @ d)
        x = np.arange(N)
        for p in range(-r, r + 1):
            kd = k.Kd[p + r, r - p]
            if kd != 0:
                u = (x + p) % N
                out = out + kd * (d[u] if e2 is None else e2[x, u] * d[u])
        return out / N

    def circulant_action(self, c):
        if not self.kernel.translation_invariant:
            return None
        return self.kernel.circulant_action(c)

    preserves_diagonal = property(lambda self: self.kernel.preserves_diagonal())
    translation_invariant = property(lambda self: self.kernel.translation_invariant)

    def scaled(self, c):
        k = self.kernel
        phi = None if k.phi is None else k.phi * np.sqrt(c)
        return KernelSelfEnergy(CovarianceKernel(k.N, k.beta, k.Kc * c, k.Kd * c, k.envelope, phi, k.name),
                                use_numba=self.use_numba)


class ZeroSelfEnergy(MeanField):
    kind = "zero"

    def __init__(self, N: int):
        super().__init__(N, 0.0)


# ---------------------------------------------------------------------------
# model parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlatnessBounds:
    p1: float
    P1: float
    flat: bool
    n_probes: int


def _probe_matrices(N: int, rng: np.random.Generator, n_random: int = 64):
    yield np.eye(N, dtype=np.complex128)
    for i in range(N):
        e = np.zeros(N, dtype=np.complex128)
        e[i] = 1.0
        yield herm.rank_one(e)
    for _ in range(n_random):
        v = rng.standard_normal(N) + 1j * rng.standard_normal(N)
        yield herm.rank_one(v)


def flatness_bounds(S: SelfEnergy, n_random: int = 64, seed: int = 0, tol: float = 1e-12) -> FlatnessBounds:
    """Probe-based estimates of ``p1 <R> 1 <= S[R] <= P1 <R> 1`` on PSD inputs.

    Probes: identity, canonical rank-one projectors, ``n_random`` random rank-one
    matrices.  The bounds are certified on the probe family only.
    """
    rng = np.random.default_rng(seed)
    lo, hi, n = np.inf, -np.inf, 0
    for R in _probe_matrices(S.N, rng, n_random):
        t = herm.avg_trace(R).real
        w = np.linalg.eigvalsh(herm.re_part(S(R)))
        lo = min(lo, w[0] / t)
        hi = max(hi, w[-1] / t)
        n += 1
    lo = max(lo, 0.0) if abs(lo) <= tol else lo
    return FlatnessBounds(float(lo), float(hi), bool(lo > tol), n)


@dataclass(frozen=True)
class SelfEnergyNorms:
    op_norm: float
    sp_norm: float

    def __post_init__(self):
        if self.sp_norm > self.op_norm * (1 + 1e-8) + 1e-12:
            raise AssertionError(f"||S||_sp={self.sp_norm} exceeds ||S||={self.op_norm}")


def sp_norm_power(T, N: int, tol: float = 1e-12, max_iter: int = 10_000, seed: int = 0) -> float:
    """``||T||_sp`` of a self-adjoint operator by power iteration on ``T^2``."""
    rng = np.random.default_rng(seed)
    R = np.eye(N, dtype=np.complex128) + 0.1 * herm.random_hermitian(N, rng) / np.sqrt(N)
    R /= np.linalg.norm(R)
    lam_old = 0.0
    for _ in range(max_iter):
        Q = T(T(R))
        lam = np.linalg.norm(Q)
        if lam == 0.0:
            return 0.0
        R = Q / lam
        if abs(lam - lam_old) <= tol * lam:
            break
        lam_old = lam
    return float(np.sqrt(lam))


def op_norm_power(S, N: int, max_iter: int = 200, tol: float = 1e-12) -> float:
    """Induced operator norm ``sup ||S[R]|| / ||R||`` by ascent over unitaries.

    Starting from ``R = 1`` the iterate is replaced by the unitary polar factor
    of ``S^*[x y^*]`` where ``(x, y)`` is the top singular pair of ``S[R]``;
    the objective ``Re x^* S[R] y`` never decreases.
    """
    R = np.eye(N, dtype=np.complex128)
    best = 0.0
    for _ in range(max_iter):
        Q = S(R)
        U, s, Vh = np.linalg.svd(Q)
        val = float(s[0])
        if val <= best * (1 + tol):
            best = max(best, val)
            break
        best = val
        G = S(np.outer(U[:, 0], Vh[0]))  # gradient of x^* S[R] y; S is self-adjoint
        P, _, Qh = np.linalg.svd(G)
        R = P @ Qh
    return best


def cp_op_norm(S: SelfEnergy) -> float:
    """``||S|| = ||S[1]||``, exact for the completely positive maps ``E W R W / N``."""
    N = S.N
    if S.preserves_diagonal:
        d = S.diagonal_action(np.ones(N, dtype=np.complex128))
        if not (isinstance(S, VarianceProfile) and S.beta == 1):
            return float(np.abs(d).max())
    if S.translation_invariant:
        c = np.zeros(N, dtype=np.complex128)
        c[0] = 1.0
        sym = S.circulant_action(c)
        return float(np.abs(N * np.fft.ifft(sym)).max())
    return herm.op_norm(S(np.eye(N, dtype=np.complex128)))


def self_energy_norms(S: SelfEnergy) -> SelfEnergyNorms:
    if S.N <= herm.BRUTE_FORCE_CUTOFF:
        sp = herm.sp_norm_dense(herm.dense_superop(S.as_superop()))
    else:
        sp = sp_norm_power(S, S.N)
    return SelfEnergyNorms(op_norm_power(S, S.N), sp)


@dataclass
class DecayReport:
    passed: bool
    values: dict = field(default_factory=dict)


def decay_check(S: SelfEnergy, metric: IndexMetric, profile: DecayProfile,
                n_random: int = 4, seed: int = 0) -> DecayReport:
    """Check ``||S[R]||_pi <= 1`` on probes with ``||R||_max = 1``."""
    rng = np.random.default_rng(seed)
    N = S.N
    probes = {"identity": np.eye(N), "ones": np.ones((N, N))}
    for i in range(n_random):
        probes[f"sign{i}"] = rng.choice([-1.0, 1.0], size=(N, N))
    values = {k: herm.decay_norm(S(R), metric, profile) for k, R in probes.items()}
    return DecayReport(all(v <= 1.0 for v in values.values()), values)


# ---------------------------------------------------------------------------
# spot checks and random data
# ---------------------------------------------------------------------------


def self_adjointness_defect(S: SelfEnergy, rng: np.random.Generator, trials: int = 5) -> float:
    worst = 0.0
    for _ in range(trials):
        R = herm.random_hermitian(S.N, rng)
        T = herm.random_hermitian(S.N, rng)
        worst = max(worst, abs(herm.inner(R, S(T)) - herm.inner(S(R), T)))
    return worst


def positivity_defect(S: SelfEnergy, rng: np.random.Generator, trials: int = 100) -> float:
    """Most negative eigenvalue of ``S[vv^*]`` over random unit ``v`` (0 if none)."""
    worst = 0.0
    for _ in range(trials):
        v = rng.standard_normal(S.N) + 1j * rng.standard_normal(S.N)
        v /= np.linalg.norm(v)
        worst = min(worst, herm.min_eig(S(herm.rank_one(v))))
    return -worst


def random_variance_profile(N: int, rng: np.random.Generator, lo: float = 0.5, hi: float = 1.5,
                            beta: int = 2) -> VarianceProfile:
    s = rng.uniform(lo, hi, size=(N, N))
    return VarianceProfile((s + s.T) / 2, beta=beta)


def random_filter(rng: np.random.Generator, half_width: int = 1, center: float = 1.0,
                  spread: float = 0.25) -> np.ndarray:
    """Real filter dominated by its centre tap, normalised to unit energy."""
    w = 2 * half_width + 1
    phi = rng.uniform(-spread, spread, size=(w, w))
    phi[half_width, half_width] = center
    return phi / np.linalg.norm(phi)


def random_flat_kernel(N: int, rng: np.random.Generator, half_width: int = 1, beta: int = 2,
                       envelope: bool = True) -> KernelSelfEnergy:
    """Random filter kernel with a random symmetric envelope; the range shrinks to fit small N."""
    half_width = min(half_width, max(0, (N - 1) // 4))
    phi = random_filter(rng, half_width)
    env = None
    if envelope:
        e = rng.uniform(0.8, 1.2, size=(N, N))
        env = (e + e.T) / 2
    return KernelSelfEnergy(CovarianceKernel.from_filter(N, phi, beta=beta, envelope=env, name="random"))
