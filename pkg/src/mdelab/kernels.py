"""Hot inner loops: banded covariance contraction and moving-average filtering.

Each kernel has a numba implementation (``*_nb``) and a vectorised numpy
implementation (``*_np``).  The public wrappers pick numba when it is enabled
(see :mod:`mdelab._accel`).  Both paths are kept importable so tests and the
benchmark can compare them directly.
"""
from __future__ import annotations

import numpy as np

from ._accel import NUMBA_ENABLED, njit

# ---------------------------------------------------------------------------
# S[R]_xy = (1/N) sum_{u,v} sigma_xu sigma_vy * (Kc[y-x, v-u] + Kd[v-x, y-u]) R_uv
# Offsets are circular and restricted to |offset| <= r.  Kc is the conjugate
# pairing table (E w_xu conj(w_yv)), Kd the direct one (E w_xu w_vy with (v,y)
# close to (x,u)); Kd vanishes for the default complex Hermitian ensembles.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _banded_apply_nb(R, Kc, Kd, sigma, r, use_direct):
    N = R.shape[0]
    w = 2 * r + 1
    out = np.zeros((N, N), dtype=np.complex128)
    for x in range(N):
        for ip in range(w):
            y = (x + ip - r) % N
            acc = 0j
            for iq in range(w):
                k = Kc[ip, iq]
                if k == 0:
                    continue
                q = iq - r
                part = 0j
                for u in range(N):
                    v = (u + q) % N
                    part += sigma[x, u] * sigma[v, y] * R[u, v]
                acc += k * part
            out[x, y] += acc / N
    if use_direct:
        for x in range(N):
            for y in range(N):
                acc = 0j
                for ia in range(w):
                    v = (x + ia - r) % N
                    for ib in range(w):
                        k = Kd[ia, ib]
                        if k == 0:
                            continue
                        u = (y - (ib - r)) % N
                        acc += k * sigma[x, u] * sigma[v, y] * R[u, v]
                out[x, y] += acc / N
    return out


@njit(cache=True)
def _banded_apply_flat_nb(R, Kc, Kd, r, use_direct):
    # unit envelope: sum over u collapses to circular diagonal sums of R
    N = R.shape[0]
    w = 2 * r + 1
    out = np.zeros((N, N), dtype=np.complex128)
    diag_sums = np.zeros(w, dtype=np.complex128)
    for iq in range(w):
        q = iq - r
        s = 0j
        for u in range(N):
            s += R[u, (u + q) % N]
        diag_sums[iq] = s
    for ip in range(w):
        acc = 0j
        for iq in range(w):
            acc += Kc[ip, iq] * diag_sums[iq]
        acc /= N
        for x in range(N):
            out[x, (x + ip - r) % N] += acc
    if use_direct:
        for x in range(N):
            for y in range(N):
                acc = 0j
                for ia in range(w):
                    v = (x + ia - r) % N
                    for ib in range(w):
                        k = Kd[ia, ib]
                        if k == 0:
                            continue
                        acc += k * R[(y - (ib - r)) % N, v]
                out[x, y] += acc / N
    return out


def _banded_apply_np(R, Kc, Kd, sigma, r, use_direct):
    N = R.shape[0]
    w = 2 * r + 1
    rows = np.arange(N)
    out = np.zeros((N, N), dtype=np.complex128)
    for iq in range(w):
        q = iq - r
        col = Kc[:, iq]
        if not np.any(col):
            continue
        rq = R[rows, (rows + q) % N]  # R[u, u+q]
        if sigma is None:
            t = np.full((N, N), rq.sum())
        else:
            # T[x, y] = sum_u sigma[x,u] R[u,u+q] sigma[u+q, y]
            t = (sigma * rq[None, :]) @ np.roll(sigma, -q, axis=0)
        for ip in range(w):
            if col[ip] == 0:
                continue
            cols = (rows + ip - r) % N
            out[rows, cols] += col[ip] * t[rows, cols] / N
    if use_direct:
        for ia in range(w):
            a = ia - r
            for ib in range(w):
                k = Kd[ia, ib]
                if k == 0:
                    continue
                b = ib - r
                # term[x, y] = sigma[x, y-b] sigma[x+a, y] R[y-b, x+a]
                rt = np.roll(np.roll(R.T, -a, axis=0), b, axis=1)
                if sigma is None:
                    out += k * rt / N
                else:
                    s1 = np.roll(sigma, b, axis=1)
                    s2 = np.roll(sigma, -a, axis=0)
                    out += k * s1 * s2 * rt / N
    return out


def banded_apply(R, Kc, Kd, sigma, r, use_numba=None):
    """Contract a matrix against a banded translation-invariant covariance.

    Parameters
    ----------
    R : (N, N) complex ndarray
    Kc, Kd : (2r+1, 2r+1) complex ndarray
        Conjugate and direct pairing tables indexed by offset + r.
    sigma : (N, N) real ndarray or None
        Symmetric entry envelope; ``None`` means all ones.
    r : int
        Interaction range.
    """
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    R = np.ascontiguousarray(R, dtype=np.complex128)
    Kc = np.ascontiguousarray(Kc, dtype=np.complex128)
    Kd = np.ascontiguousarray(Kd, dtype=np.complex128)
    use_direct = bool(np.any(Kd))
    if use_numba:
        if sigma is None:
            return _banded_apply_flat_nb(R, Kc, Kd, int(r), use_direct)
        return _banded_apply_nb(R, Kc, Kd, np.ascontiguousarray(sigma, dtype=np.float64), int(r), use_direct)
    return _banded_apply_np(R, Kc, Kd, sigma, int(r), use_direct)


# ---------------------------------------------------------------------------
# Circular 2-D moving average Y[x, y] = sum_{a,b} phi[a, b] X[x+a, y+b]
# ---------------------------------------------------------------------------


@njit(cache=True)
def _moving_average_nb(X, phi):
    B, N, _ = X.shape
    m = phi.shape[0]
    f = (m - 1) // 2
    out = np.zeros_like(X)
    for t in range(B):
        for ia in range(m):
            for ib in range(m):
                c = phi[ia, ib]
                if c == 0:
                    continue
                sb = (ib - f) % N
                for x in range(N):
                    xa = (x + ia - f) % N
                    # contiguous row update: out[t, x, y] += c X[t, xa, (y + sb) % N]
                    for y in range(N - sb):
                        out[t, x, y] += c * X[t, xa, y + sb]
                    for y in range(N - sb, N):
                        out[t, x, y] += c * X[t, xa, y + sb - N]
    return out


def _moving_average_np(X, phi):
    f = (phi.shape[0] - 1) // 2
    out = np.zeros_like(X)
    for ia in range(phi.shape[0]):
        for ib in range(phi.shape[1]):
            c = phi[ia, ib]
            if c != 0:
                out += c * np.roll(X, shift=(-(ia - f), -(ib - f)), axis=(-2, -1))
    return out


def moving_average(X, phi, use_numba=None):
    """Circular moving-average filter over the last two axes of ``X``.

    ``phi`` is a real ``(2f+1, 2f+1)`` filter indexed by offset + f.
    """
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    X = np.asarray(X)
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    squeeze = X.ndim == 2
    Xb = X[None] if squeeze else X
    if use_numba:
        out = _moving_average_nb(np.ascontiguousarray(Xb), phi)
    else:
        out = _moving_average_np(Xb, phi)
    return out[0] if squeeze else out
