import numpy as np
import pytest
from hypothesis import given, strategies as st

from mdelab import herm
from mdelab.herm import DecayProfile, IndexMetric
from mdelab.rmt import DEFAULT_FILTER, filter_spec, mc_self_energy
from mdelab.self_energy import (CovarianceKernel, KernelSelfEnergy, MeanField, VarianceProfile, ZeroSelfEnergy,
                                cp_op_norm, decay_check, filter_autocorrelation, flatness_bounds,
                                op_norm_power, positivity_defect, random_filter, random_flat_kernel,
                                random_variance_profile, self_adjointness_defect, self_energy_norms,
                                sp_norm_power)
from oracles import contract_kappa, dense_from_apply

seeds = st.integers(0, 2**31 - 1)


def _hermitian(rng, N):
    return herm.random_hermitian(N, rng)


def _kernels(N, rng):
    env = rng.uniform(0.7, 1.3, size=(N, N))
    env = (env + env.T) / 2
    phi = random_filter(rng, 1)
    return [CovarianceKernel.white(N, 2), CovarianceKernel.white(N, 1, 0.7),
            CovarianceKernel.from_filter(N, phi, beta=2), CovarianceKernel.from_filter(N, phi, beta=1),
            CovarianceKernel.from_filter(N, phi, beta=1, envelope=env),
            CovarianceKernel.white(N, 2, envelope=env)]


# --- application -------------------------------------------------------------


def test_mean_field_and_profile_examples(rng):
    N = 7
    assert np.allclose(MeanField(N)(np.eye(N)), np.eye(N))
    d = rng.normal(size=N)
    S = VarianceProfile(np.ones((N, N)), beta=2)
    assert np.allclose(S(np.diag(d)), d.mean() * np.eye(N))


def test_beta1_mean_field_identity_by_hand():
    # s == 1, beta = 1 at N = 3: S[R] = <R> 1 + R^T / N
    R = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]])
    out = VarianceProfile(np.ones((3, 3)), beta=1)(R)
    expected = (16.0 / 3) * np.eye(3) + R.T / 3
    assert np.allclose(out, expected, atol=1e-14)


@pytest.mark.parametrize("N", [5, 6])
def test_kernel_apply_matches_brute_force_tensor(N, rng, use_numba):
    for k in _kernels(N, rng):
        S = KernelSelfEnergy(k, use_numba=use_numba)
        R = rng.normal(size=(N, N)) + 1j * rng.normal(size=(N, N))
        assert np.abs(S(R) - contract_kappa(k.kappa_tensor(), R)).max() < 1e-13, k.name


def test_kernel_matches_monte_carlo_average():
    """Monte-Carlo oracle for E W R W / N at N = 24 with 10^5 draws."""
    spec = filter_spec(24, beta=1, seed=3)
    R = np.random.default_rng(0).normal(size=(24, 24))
    R = R + R.T
    est = mc_self_energy(spec, R, trials=100_000)
    z = est.z_scores(spec.self_energy(R))
    # max of ~600 |N(0,1)| sits near 3.2; demand 99% within 3 s.e. and no outliers
    assert np.mean(z <= 3.0) >= 0.99
    assert z.max() <= 4.5


def test_diagonal_and_circulant_reductions(rng):
    N = 9
    for k in _kernels(N, rng):
        S = KernelSelfEnergy(k)
        if S.preserves_diagonal:
            d = rng.normal(size=N) + 1j * rng.normal(size=N)
            assert np.allclose(S.diagonal_action(d), np.diag(S(np.diag(d))), atol=1e-14)
            assert np.allclose(S(np.diag(d)), np.diag(np.diag(S(np.diag(d)))), atol=1e-14)
        if S.translation_invariant:
            c = rng.normal(size=N) + 1j * rng.normal(size=N)
            C = np.array([[c[(y - x) % N] for y in range(N)] for x in range(N)])
            SC = S(C)
            sym = S.circulant_action(c)
            assert np.allclose(SC[0], sym, atol=1e-13)
    S = VarianceProfile(np.ones((N, N)), beta=1)
    c = rng.normal(size=N)
    C = np.array([[c[(y - x) % N] for y in range(N)] for x in range(N)])
    assert np.allclose(S(C)[0], S.circulant_action(c), atol=1e-14)


def test_dimension_mismatch_raises():
    with pytest.raises(herm.DimensionError):
        MeanField(4)(np.eye(3))


# --- kernel structure ---------------------------------------------------------


def test_filter_kernel_is_psd_covariance(rng):
    for beta in (1, 2):
        k = CovarianceKernel.from_filter(6, random_filter(rng, 1), beta=beta)
        assert k.is_psd_covariance()
        assert np.all(np.linalg.eigvalsh(k.real_covariance()) >= -1e-12)


def test_filter_autocorrelation_is_symmetric(rng):
    phi = random_filter(rng, 2)
    K = filter_autocorrelation(phi, 16)
    assert np.allclose(K, K[::-1, ::-1])
    assert K[K.shape[0] // 2, K.shape[1] // 2] == pytest.approx(np.sum(phi**2))


def test_kernel_hermitian_symmetry(rng):
    N = 5
    for k in _kernels(N, rng):
        T = k.kappa_tensor()
        # w_vy = conj(w_yv): kappa(x,u;v,y) = E[w_xu conj(w_yv)]; swapping both pairs conjugates
        assert np.allclose(T, np.conj(np.transpose(T, (3, 2, 1, 0))), atol=1e-14)


# --- flatness / norms / decay ---------------------------------------------------


def test_flatness_examples(rng):
    fb = flatness_bounds(MeanField(6))
    assert fb.p1 == pytest.approx(1.0) and fb.P1 == pytest.approx(1.0) and fb.flat
    fb = flatness_bounds(VarianceProfile(np.ones((6, 6)), beta=2))
    assert fb.p1 == pytest.approx(1.0) and fb.P1 == pytest.approx(1.0)
    v = rng.normal(size=6) + 1j * rng.normal(size=6)
    out = VarianceProfile(np.ones((6, 6)))(np.outer(v, v.conj()))
    assert np.allclose(out, (np.linalg.norm(v) ** 2 / 6) * np.eye(6))
    env = np.ones((6, 6))
    env[0, :] = env[:, 0] = 0.0
    fb = flatness_bounds(KernelSelfEnergy(CovarianceKernel.white(6, 2, envelope=env)))
    assert fb.p1 == 0.0 and not fb.flat


def test_norm_examples(rng):
    n = self_energy_norms(MeanField(5))
    assert n.sp_norm == pytest.approx(1.0) and n.op_norm == pytest.approx(1.0)
    n = self_energy_norms(MeanField(5, 2.5))
    assert n.sp_norm == pytest.approx(2.5) and n.op_norm == pytest.approx(2.5)
    S = random_flat_kernel(8, rng)
    dense = np.linalg.norm(dense_from_apply(S, 8), 2)
    assert sp_norm_power(S, 8) == pytest.approx(dense, rel=1e-8)


@given(seeds)
def test_cp_norm_matches_ascent(seed):
    rng = np.random.default_rng(seed)
    S = random_flat_kernel(6, rng, beta=int(rng.integers(1, 3)))
    assert cp_op_norm(S) == pytest.approx(op_norm_power(S, 6), rel=1e-6)
    assert self_energy_norms(S).sp_norm <= cp_op_norm(S) * (1 + 1e-8)


def test_decay_check_examples(rng):
    N = 16
    metric = IndexMetric.circle(N)
    assert decay_check(MeanField(N), metric, DecayProfile.constant(1.0)).passed
    phi = np.zeros((7, 7))
    phi[3, 3], phi[2, 3], phi[4, 3], phi[3, 2], phi[3, 4] = 1.0, 0.3, 0.3, 0.3, 0.3
    S = KernelSelfEnergy(CovarianceKernel.from_filter(N, phi, beta=2))
    rep = decay_check(S, metric, DecayProfile.constant(1.0))
    c = max(rep.values.values())  # max output magnitude relative to a unit profile
    assert decay_check(S, metric, DecayProfile.geometric(c, 4.0)).passed
    wide = KernelSelfEnergy(CovarianceKernel.from_filter(N, np.ones((7, 7)), beta=2))  # widest allowed at N = 16
    assert not decay_check(wide, metric, DecayProfile.constant(0.01)).passed


# --- invariants (property tests) ------------------------------------------------


@given(seeds, st.integers(3, 8), st.sampled_from(["mean_field", "profile1", "profile2", "kernel1", "kernel2"]))
def test_self_adjoint_and_positive(seed, N, kind):
    rng = np.random.default_rng(seed)
    S = {"mean_field": lambda: MeanField(N, rng.uniform(0.1, 2)),
         "profile1": lambda: random_variance_profile(N, rng, beta=1),
         "profile2": lambda: random_variance_profile(N, rng, beta=2),
         "kernel1": lambda: random_flat_kernel(N, rng, beta=1),
         "kernel2": lambda: random_flat_kernel(N, rng, beta=2)}[kind]()
    assert self_adjointness_defect(S, rng) < 1e-12
    assert positivity_defect(S, rng, trials=20) >= -1e-12


def test_zero_self_energy():
    assert np.allclose(ZeroSelfEnergy(4)(np.ones((4, 4))), 0)
    assert np.allclose(KernelSelfEnergy(CovarianceKernel.zero(4))(np.ones((4, 4))), 0)


def test_default_filter_kernel_flat():
    S = KernelSelfEnergy(CovarianceKernel.from_filter(12, DEFAULT_FILTER / np.linalg.norm(DEFAULT_FILTER)))
    fb = flatness_bounds(S)
    assert 0 < fb.p1 <= fb.P1
