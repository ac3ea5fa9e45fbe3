from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdelab import herm
from mdelab.dos import (DosCurve, cumulative_mass, dos_on_real_line, estimate_support, harmonic_dos,
                        holder_check, quantile_index, quantile_indices, richardson_zero, support_bound)
from mdelab.self_energy import MeanField, VarianceProfile, ZeroSelfEnergy, random_flat_kernel
from mdelab.solver import DataPair, SolverConfig, continuation_sweep, default_eta_grid, solve_at
from oracles import B_GOLD, rho_sc, semicircle_cdf, vector_dyson


def wigner(N=8):
    return DataPair(np.zeros((N, N)), MeanField(N))


@pytest.fixture(scope="module")
def wigner_curve():
    return dos_on_real_line(wigner(), np.linspace(-2.5, 2.5, 101), 1e-3)


@pytest.fixture(scope="module")
def fine_wigner_curve():
    return dos_on_real_line(wigner(), np.linspace(-2.2, 2.2, 441), 1e-3, mode="march")


def test_harmonic_dos_examples():
    assert harmonic_dos(SimpleNamespace(avg=1j)) == pytest.approx(1 / np.pi)
    assert harmonic_dos(solve_at(wigner(), 1j)) == pytest.approx(B_GOLD / np.pi, abs=1e-12)
    assert B_GOLD / np.pi == pytest.approx(0.19673, abs=1e-5)


def test_richardson_exact_for_quadratics():
    etas = [0.004, 0.002, 0.001]
    assert richardson_zero(etas, [3 + 2 * e - 5 * e**2 for e in etas]) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ValueError):
        richardson_zero([1.0, 2.0], [1.0, 2.0])


def test_wigner_curve_matches_semicircle(wigner_curve):
    assert np.max(np.abs(wigner_curve.values - rho_sc(wigner_curve.tau))) <= 1e-2
    assert wigner_curve.mass() == pytest.approx(1.0, abs=0.02)
    assert np.all(wigner_curve.values >= 0) and wigner_curve.converged.all()


def test_curve_at_target_matches_sweep_endpoint(wigner_curve):
    d = wigner()
    etas = default_eta_grid(support_bound(d), 1e-3)
    for j in (10, 50, 77):
        last = continuation_sweep(d, wigner_curve.tau[j], etas)[-1]
        assert wigner_curve.rho[j] == pytest.approx(harmonic_dos(last), abs=1e-12)


def test_march_mode_agrees_with_sweep(rng):
    d = DataPair(np.diag(rng.uniform(-1, 1, 6)), random_flat_kernel(6, rng))
    taus = np.linspace(-3, 3, 25)
    a = dos_on_real_line(d, taus, 1e-3)
    b = dos_on_real_line(d, taus, 1e-3, mode="march")
    assert np.max(np.abs(a.rho - b.rho)) < 1e-9
    with pytest.raises(ValueError):
        dos_on_real_line(d, taus, 1e-3, mode="bogus")


def test_deformed_wigner_symmetry():
    N = 8
    A = np.diag([1.0] * 4 + [-1.0] * 4)
    c = dos_on_real_line(DataPair(A, MeanField(N)), np.linspace(-3, 3, 61), 1e-3)
    assert np.allclose(c.values, c.values[::-1], atol=1e-9)


def test_support_bound_examples(rng):
    assert support_bound(wigner()) == pytest.approx(2.0)
    assert support_bound(DataPair(3 * np.eye(5), MeanField(5))) == pytest.approx(5.0)
    A = herm.random_hermitian(5, rng)
    assert support_bound(DataPair(A, ZeroSelfEnergy(5))) == pytest.approx(np.linalg.norm(A, 2))


def test_estimate_support_wigner(fine_wigner_curve):
    est = estimate_support(fine_wigner_curve, 0.05, kappa=2.0)
    # rho_sc >= 0.05 exactly on |tau| <= sqrt(4 - (0.1 pi)^2) = 1.9749
    edge = np.sqrt(4 - (0.1 * np.pi) ** 2)
    assert abs(est.kappa_plus - edge) <= 0.011 and abs(est.kappa_minus + edge) <= 0.011
    assert est.gaps == [] and est.contained
    assert estimate_support(fine_wigner_curve, 1.0).empty
    with pytest.raises(ValueError):
        estimate_support(fine_wigner_curve, 0.0)


def test_two_block_model_has_one_gap():
    N = 8
    a = np.array([-3.0] * 4 + [3.0] * 4)
    d = DataPair(np.diag(a), VarianceProfile(np.ones((N, N))))
    taus = np.linspace(-5.5, 5.5, 111)
    curve = dos_on_real_line(d, taus, 1e-3)
    est = estimate_support(curve, 0.01, kappa=support_bound(d))
    assert len(est.gaps) == 1 and est.gaps[0][0] < 0 < est.gaps[0][1]
    # oracle: the vector equation for the same diagonal data
    for t in (-3.0, 0.0, 3.0):
        m = vector_dyson(a, np.ones((N, N)), complex(t, 1e-3))
        assert curve.rho[np.argmin(np.abs(taus - t))] == pytest.approx(m.imag.mean() / np.pi, abs=1e-9)


def test_quantile_index_examples(fine_wigner_curve):
    c = fine_wigner_curve
    assert quantile_index(c, 0.0, 100) == 50
    assert quantile_index(c, -2.1, 100) == 0 and quantile_index(c, 2.1, 100) == 100
    # int_0^1 sqrt(4 - x^2) / (2 pi) dx = 1/6 + sqrt(3) / (4 pi)
    assert semicircle_cdf(1.0) == pytest.approx(0.5 + 1 / 6 + np.sqrt(3) / (4 * np.pi), abs=1e-12)
    assert quantile_index(c, 1.0, 1000) == int(np.ceil(1000 * semicircle_cdf(1.0))) == 805


def test_quantile_monotone(fine_wigner_curve):
    taus = np.linspace(-2.5, 2.5, 301)
    idx = quantile_indices(fine_wigner_curve, taus, 777)
    assert np.all(np.diff(idx) >= 0) and idx[0] == 0 and idx[-1] == 777
    F = cumulative_mass(fine_wigner_curve)
    assert F[0] == 0 and F[-1] == pytest.approx(1.0)


def test_holder_examples(fine_wigner_curve):
    c = fine_wigner_curve
    bulk = np.abs(c.tau) <= 1.5
    sub = DosCurve(c.tau[bulk], c.eta[bulk], c.rho[bulk], c.rho_extrapolated[bulk], c.converged[bulk])
    assert holder_check(sub).best_exponent == 1.0
    rep = holder_check(c)
    assert not rep.exponents[1.0]["bounded"] and rep.exponents[0.5]["bounded"]
    assert rep.best_exponent == 0.5
    z = np.zeros(20)
    zero = DosCurve(np.linspace(0, 1, 20), z + 1e-3, z, z, np.ones(20, bool))
    assert all(r["bounded"] for r in holder_check(zero).exponents.values())
    with pytest.raises(ValueError):
        holder_check(DosCurve(*(np.zeros(5),) * 4, np.ones(5, bool)))


def test_csv_roundtrip(tmp_path, wigner_curve):
    p = tmp_path / "dos.csv"
    wigner_curve.to_csv(p)
    raw = p.read_bytes()
    assert raw.startswith(b"tau,eta,rho,rho_extrapolated,converged\r\n")
    back = DosCurve.from_csv(p)
    for k in ("tau", "eta", "rho", "rho_extrapolated", "converged"):
        assert np.array_equal(getattr(back, k), getattr(wigner_curve, k))
    q = tmp_path / "again.csv"
    back.to_csv(q)
    assert q.read_bytes() == raw


def test_failed_points_are_marked_missing():
    d = wigner(4)
    c = dos_on_real_line(d, np.linspace(-1, 1, 5), 1e-3, cfg=SolverConfig(max_iter=2, method="dense"))
    assert not c.converged.any() and np.all(np.isnan(c.rho))


@settings(max_examples=8)
@given(st.integers(0, 2**31 - 1))
def test_support_within_kappa(seed):
    rng = np.random.default_rng(seed)
    N = 5
    A = 0.8 * herm.random_hermitian(N, rng) / np.sqrt(N)
    d = DataPair(A, random_flat_kernel(N, rng))
    kappa = support_bound(d)
    curve = dos_on_real_line(d, np.linspace(-kappa - 1, kappa + 1, 41), 1e-3, mode="march")
    est = estimate_support(curve, 0.01, kappa)
    assert est.empty or est.contained
