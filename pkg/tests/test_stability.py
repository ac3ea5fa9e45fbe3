import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdelab import herm
from mdelab.dos import support_bound
from mdelab.herm import DecayProfile, IndexMetric, SuperOperator, dense_superop, mean_field_projection
from mdelab.self_energy import CovarianceKernel, KernelSelfEnergy, MeanField, ZeroSelfEnergy, random_flat_kernel
from mdelab.solver import DataPair, SolverConfig, solve_at, solve_perturbed
from mdelab.stability import (compute_saturation, derivative_decay_report, derivative_operator,
                              fit_sandwich_bounds, linear_stability_norm, normalized_saturation,
                              psd_preservation_defect, rotation_inversion_bound, saturation_factors,
                              spectral_gap_verify, spectral_radius_identity_check, stability_diagnostics,
                              stability_report)
from oracles import B_GOLD

seeds = st.integers(0, 2**31 - 1)


def wigner(N):
    return DataPair(np.zeros((N, N)), MeanField(N))


def random_pair(N, rng, a_scale=0.5):
    A = a_scale * herm.random_hermitian(N, rng) / np.sqrt(N)
    return DataPair(A, random_flat_kernel(N, rng))


def _top_dense(F, N):
    D = dense_superop(F)
    return np.linalg.eigvalsh(0.5 * (D + D.conj().T))[-1]


# --- saturation -------------------------------------------------------------------


def test_wigner_saturation_closed_form():
    N = 6
    sol = solve_at(wigner(N), 1j)
    sat = compute_saturation(sol, MeanField(N))
    assert np.allclose(sat.W, np.eye(N), atol=1e-12)
    assert np.allclose(sat.U, -1j * np.eye(N), atol=1e-12)
    assert sat.sp_radius == pytest.approx(B_GOLD**2, abs=1e-12)
    assert B_GOLD**2 == pytest.approx(0.38197, abs=1e-5)
    assert np.allclose(sat.F_mat, np.eye(N), atol=1e-10)
    R = herm.random_hermitian(N, np.random.default_rng(0))
    assert np.allclose(sat.F(R), B_GOLD**2 * np.trace(R) / N * np.eye(N), atol=1e-12)
    assert sat.polar_residual() <= 1e-12


def test_perron_pair_matches_dense_oracle(rng):
    N = 8
    d = random_pair(N, rng)
    sol = solve_at(d, 0.2 + 0.3j)
    sat = compute_saturation(sol, d.S)
    assert sat.sp_radius == pytest.approx(_top_dense(sat.F, N), abs=1e-8)
    assert herm.min_eig(sat.F_mat) > 0
    assert sat.perron_residual() <= 1e-8
    assert np.sqrt(np.vdot(sat.F_mat, sat.F_mat).real / N) == pytest.approx(1.0)


def test_saturation_rejects_singular_imaginary_part():
    with pytest.raises(herm.SingularMatrixError):
        saturation_factors(np.diag([1j, 1e-14j]))
    with pytest.raises(ValueError):
        compute_saturation(1j * np.eye(3), MeanField(3))


# --- spectral radius identity ----------------------------------------------------


def test_identity_wigner_exact():
    sol = solve_at(wigner(5), 1j)
    chk = spectral_radius_identity_check(compute_saturation(sol, MeanField(5)), sol)
    # b^2 = 1 - b
    assert chk.rel_error <= 1e-12 and chk.predicted == pytest.approx(1 - B_GOLD)


@pytest.mark.parametrize("eta", [0.1, 0.3, 1.0])
def test_identity_kernel_data(eta, rng):
    N = 8
    d = random_pair(N, rng)
    sol = solve_at(d, complex(0.2, eta))
    sat = compute_saturation(sol, d.S)
    assert sat.sp_radius == pytest.approx(_top_dense(sat.F, N), rel=1e-8)
    assert spectral_radius_identity_check(sat, sol, kappa=support_bound(d)).rel_error <= 1e-8


def test_identity_outside_hypotheses_is_informational():
    sol = solve_at(wigner(4), 50j)
    chk = spectral_radius_identity_check(compute_saturation(sol, MeanField(4)), sol)
    assert not chk.hypotheses_met and chk.note == "hypothesis not met"


# --- spectral gap -----------------------------------------------------------------


def test_gap_projection_example():
    N = 4
    res = spectral_gap_verify(mean_field_projection(N), 1.0, 1.0)
    assert res.theta_predicted == pytest.approx(0.5)
    assert res.theta_observed == pytest.approx(1.0)
    assert res.passed and res.eigenmatrix_min == pytest.approx(1.0) and res.eigenmatrix_max == pytest.approx(1.0)


@pytest.mark.parametrize("N", [4, 6, 8])
def test_gap_random_saturations(N):
    rng = np.random.default_rng(100 + N)
    for _ in range(7 if N < 8 else 6):  # 20 saturations in total
        d = random_pair(N, rng)
        sol = solve_at(d, complex(rng.uniform(-1, 1), rng.uniform(0.05, 1.0)))
        T = normalized_saturation(compute_saturation(sol, d.S))
        g, G = fit_sandwich_bounds(T)
        res = spectral_gap_verify(T, g, G)
        assert res.passed, res
        assert res.theta_observed >= res.theta_predicted - 1e-8


def test_gap_negative_control():
    N = 4
    D = np.diag([0.0, 1.0, 1.0, 1.0])
    T = SuperOperator(N, lambda R: np.trace(R) / N * D, name="zero row")
    res = spectral_gap_verify(T, 1.0, 1.0)
    assert not res.hypotheses_ok and not res.passed and "violated" in res.note
    assert fit_sandwich_bounds(T)[0] == pytest.approx(0.0, abs=1e-14)


# --- rotation-inversion ------------------------------------------------------------


@pytest.mark.parametrize("t", [0.2, 0.7])
def test_rotation_inversion_identity_rotation(t):
    N = 4
    T = mean_field_projection(N).scaled(t)
    theta = 0.5
    r = rotation_inversion_bound(np.eye(N), T, theta)
    assert r.lhs == pytest.approx(1 / (1 - t))
    assert r.rhs_without_C == pytest.approx(1 / (theta * (1 - t)))
    assert r.ratio == pytest.approx(theta)


@pytest.mark.parametrize("t", [0.2, 0.7])
def test_rotation_inversion_sign_flip(t):
    # C_U = -Id needs U = i 1 (U = -1 gives C_U = Id); the inverse of -(Id + tP) has norm 1
    N = 4
    theta = 0.5
    r = rotation_inversion_bound(1j * np.eye(N), mean_field_projection(N).scaled(t), theta)
    assert r.lhs == pytest.approx(1.0)
    assert r.rhs_without_C == pytest.approx(1 / (theta * (1 + t)))
    assert r.ratio <= 1.0


def test_rotation_inversion_random_pairs():
    rng = np.random.default_rng(11)
    N = 6
    ratios = []
    for _ in range(20):
        d = random_pair(N, rng)
        sol = solve_at(d, complex(rng.uniform(-1, 1), rng.uniform(0.05, 1.0)))
        sat = compute_saturation(sol, d.S)
        T = normalized_saturation(sat)
        g, G = fit_sandwich_bounds(T)
        theta = g**6 / (2 * G**4)
        ratios.append(rotation_inversion_bound(sat.U, sat.F, theta, sat.F_mat).ratio)
    assert max(ratios) <= 10


def test_rotation_inversion_singular_is_infinite():
    N = 3
    r = rotation_inversion_bound(np.eye(N), mean_field_projection(N), 0.5)
    assert np.isinf(r.lhs) and np.isinf(r.ratio)


# --- linear stability ----------------------------------------------------------------


def test_linear_stability_wigner():
    sol = solve_at(wigner(6), 1j)
    assert linear_stability_norm(sol, MeanField(6)) == pytest.approx(1.0, abs=1e-8)
    rep = stability_report(sol, MeanField(6))
    assert rep.norm == pytest.approx(1.0, abs=1e-10)
    assert rep.cms_norm == pytest.approx(B_GOLD**2, abs=1e-10)


def test_far_regime_bound(rng):
    N = 6
    for _ in range(5):
        d = random_pair(N, rng)
        kappa = support_bound(d)
        for angle in (0.1, np.pi / 2, np.pi - 0.1):
            z = 3 * (1 + kappa) * (1 + 1e-12) * np.exp(1j * angle)
            rep = stability_report(solve_at(d, z), d.S, kappa)
            assert rep.far_regime and rep.cms_norm <= 0.25 and rep.norm <= 4 / 3 + 1e-8


def test_edge_growth_is_monotone():
    d = wigner(4)
    norms = [linear_stability_norm(solve_at(d, complex(2.0, eta)), d.S) for eta in (0.1, 0.03, 0.01, 0.003, 0.001)]
    assert np.all(np.diff(norms) > 0)
    assert norms[-1] > 10


# --- derivative of the solution map -----------------------------------------------


def test_derivative_zero_self_energy(rng):
    N = 5
    A = herm.random_hermitian(N, rng)
    sol = solve_at(DataPair(A, ZeroSelfEnergy(N)), 0.3 + 0.5j)
    deriv = derivative_operator(sol, ZeroSelfEnergy(N))
    R = herm.random_hermitian(N, rng)
    assert np.abs(deriv.Z(R)).max() <= 1e-14
    assert np.allclose(deriv.total(R), sol.M @ R, atol=1e-14)


def test_derivative_finite_difference_order():
    N = 8
    d = wigner(N)
    zeta = 0.3 + 0.1j
    sol = solve_at(d, zeta)
    deriv = derivative_operator(sol, d.S)
    rng = np.random.default_rng(5)
    cfg = SolverConfig(tol=1e-15)
    steps = (1e-2, 1e-3)
    for _ in range(3):
        D = herm.random_hermitian(N, rng)
        D /= np.abs(D).max()
        exact = deriv.total(D)
        errs = []
        for t in steps:
            gp = solve_perturbed(d, zeta, t * D, cfg, sol.M)
            gm = solve_perturbed(d, zeta, -t * D, cfg, sol.M)
            errs.append(np.abs((gp - gm) / (2 * t) - exact).max())
        assert np.log(errs[0] / errs[1]) / np.log(steps[0] / steps[1]) >= 1.9


def test_derivative_decay_report_with_fitted_profile():
    N = 16
    rng = np.random.default_rng(2)
    env = rng.uniform(0.8, 1.2, (N, N))
    S = KernelSelfEnergy(CovarianceKernel.white(N, 2, envelope=(env + env.T) / 2))
    A = 0.3 * np.diag(np.cos(2 * np.pi * np.arange(N) / N))
    sol = solve_at(DataPair(A, S), 0.1 + 0.5j)
    deriv = derivative_operator(sol, S)
    metric = IndexMetric.circle(N)
    rep = derivative_decay_report(deriv, metric, DecayProfile.constant(1.0))
    assert rep["finite"] and len(rep["norms"]) == 5
    c = rep["max"]
    assert derivative_decay_report(deriv, metric, DecayProfile.constant(c * (1 + 1e-12)))["max"] <= 1.0


# --- invariants ----------------------------------------------------------------------


@settings(max_examples=15)
@given(seeds, st.floats(-1.5, 1.5), st.floats(0.05, 2.0))
def test_saturation_invariants(seed, tau, eta):
    rng = np.random.default_rng(seed)
    N = 5
    d = random_pair(N, rng)
    sol = solve_at(d, complex(tau, eta))
    sat = compute_saturation(sol, d.S)
    assert sat.unitarity_defect() <= 1e-10
    assert herm.min_eig(sat.W) > 0
    assert sat.polar_residual() <= 1e-10
    assert sat.identity_residual() <= 1e-8
    assert psd_preservation_defect(sat.F, rng, trials=100) <= 1e-12
    T = normalized_saturation(sat)
    g, G = fit_sandwich_bounds(T)
    assert spectral_gap_verify(T, g, G).passed


@settings(max_examples=10)
@given(seeds)
def test_perturbation_stability(seed):
    rng = np.random.default_rng(seed)
    N = 6
    d = random_pair(N, rng)
    zeta = complex(rng.uniform(-0.5, 0.5), 0.3)
    sol = solve_at(d, zeta)
    L = dense_superop(derivative_operator(sol, d.S).total)
    C = np.abs(L).sum(axis=1).max()  # max-to-max operator norm bound of the derivative
    D = herm.random_hermitian(N, rng)
    D *= 1e-3 / np.abs(D).max()
    G = solve_perturbed(d, zeta, D, SolverConfig(tol=1e-14), sol.M)
    assert np.abs(G - sol.M).max() <= 1.5 * C * 1e-3


def test_diagnostics_json():
    sol = solve_at(wigner(4), 1j)
    diag = stability_diagnostics(sol, MeanField(4))
    data = json.loads(diag.to_json())
    assert set(data) == {"sp_radius", "gap_predicted", "gap_observed", "stability_norm",
                         "polar_residual", "identity_residual"}
    assert data["sp_radius"] == pytest.approx(B_GOLD**2)
    assert data["gap_predicted"] == pytest.approx(0.5)
