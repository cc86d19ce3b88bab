import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import simpson

from cavsense.channel import (
    GpgPhaseMatrix,
    NoiseRates,
    PulseBoundError,
    PulseGrid,
    SignMismatchError,
    adiabatic_phases,
    apply_channel,
    cavity_params_from_geometry,
    check_sign,
    delta_band,
    effective_dephasing_rates,
    effective_emission_rates,
    finite_time_phases,
    forward_alpha,
    gamma1,
    invert_zeta_to_eta,
    rates_from_cooperativity,
    sin2_pulse,
    zeta_from_alpha,
)
from cavsense.dicke import CollectiveBasis, SymmetricDensity, dicke_state, euler_matrix, ghz_state, pure_state


def test_rates_from_cooperativity():
    r = rates_from_cooperativity(100, 1.0)
    assert r.kappa == pytest.approx(0.1) and r.gamma == pytest.approx(0.1)
    r = rates_from_cooperativity(1e4, 1.0)
    assert r.kappa == pytest.approx(0.01) and r.gamma == pytest.approx(0.01)
    assert rates_from_cooperativity(math.inf, 1.0) == NoiseRates(0.0, 0.0)
    r = rates_from_cooperativity(25, 0.01)
    assert r.cooperativity == pytest.approx(25) and r.gamma_over_kappa == pytest.approx(0.01)
    with pytest.raises(ValueError):
        rates_from_cooperativity(-1, 1)


def test_rubidium_cavity():
    C, g, kappa = cavity_params_from_geometry(780e-9, 2e5, 2e-6, 40e-6, 2 * math.pi * 6e6)
    assert C == pytest.approx(1500, rel=0.10)
    assert kappa / (2 * math.pi) == pytest.approx(20e6, rel=0.15)
    # g = sqrt(C kappa gamma) at the quoted C and kappa
    assert math.sqrt(1500 * 2 * math.pi * 20e6 * 2 * math.pi * 6e6) / (2 * math.pi) == pytest.approx(424e6, rel=0.01)
    assert g / (2 * math.pi) == pytest.approx(400e6, rel=0.15)


def test_sign_check():
    check_sign(1.0, 0.5)
    check_sign(-1.0, -0.5)
    with pytest.raises(SignMismatchError):
        check_sign(1.0, -0.5)


def test_diagonal_is_pure_damping():
    rates = NoiseRates(0.1, 0.1)
    ph = adiabatic_phases(CollectiveBasis(6), 1.2, 0.7, rates).phases
    n = np.arange(7)
    assert np.allclose(np.diag(ph), 1j * n * 0.1 * 0.7 * 1.2)


def test_lossless_phases_are_real():
    ph = adiabatic_phases(CollectiveBasis(5), 0.9, 0.4, NoiseRates()).phases
    n = np.arange(6)
    assert np.allclose(ph, 0.9 * (n[:, None] ** 2 - n[None, :] ** 2))


def test_adiabatic_phase_value():
    ph = adiabatic_phases(CollectiveBasis(1), 1.56, 0.48, NoiseRates(0.1, 0.1)).phases
    assert ph[1, 0] == pytest.approx(1.56 + 1j * 1.56 * (0.1 / 0.96 + 0.024), abs=1e-12)
    assert abs(ph[1, 0] - (1.56 + 0.200j)) < 1e-3


def test_adiabatic_sign_flip_invariance():
    rates = NoiseRates(0.05, 0.2)
    b = CollectiveBasis(4)
    a = adiabatic_phases(b, 1.1, 0.6, rates).phases
    f = adiabatic_phases(b, -1.1, -0.6, rates).phases
    assert np.allclose(a.imag, f.imag) and np.allclose(a.real, -f.real)


def test_pulse_area_and_endpoints():
    phi, delta, T = 1.3, 0.8, 40.0
    p = sin2_pulse(phi, delta, T)
    assert p.zeta[0] == 0 and p.zeta[-1] == 0
    assert simpson(p.zeta.real**2, x=p.times) / delta == pytest.approx(phi, rel=1e-6)


def test_table_pulse_below_half_g():
    p = sin2_pulse(1.57, 2.03, 40.0)
    assert np.abs(p.zeta).max() < 0.5


def test_pulse_band():
    lo, hi = delta_band(1.57, 40.0)
    assert lo == pytest.approx(0.157, abs=1e-3) and hi == pytest.approx(2.39, abs=1e-2)
    with pytest.raises(PulseBoundError):
        sin2_pulse(1.57, 3.0, 40.0)
    with pytest.raises(PulseBoundError):
        sin2_pulse(1.57, 0.1, 40.0)


def test_pulse_csv_roundtrip(tmp_path):
    p = invert_zeta_to_eta(sin2_pulse(1.0, 0.9, 20.0), 0.9, 0.01, 12.0)
    p.to_csv(tmp_path / "p.csv")
    header = (tmp_path / "p.csv").read_text().splitlines()[0]
    assert header == "t,re_zeta,im_zeta,re_eta,im_eta"
    q = PulseGrid.from_csv(tmp_path / "p.csv")
    assert np.array_equal(q.zeta, p.zeta) and np.array_equal(q.eta, p.eta)


def test_finite_phases_lossless_convergence():
    b = CollectiveBasis(6)
    fin = finite_time_phases(b, 1.0, 0.9, NoiseRates(), T=40.0).phases
    n = np.arange(7)
    ideal = 1.0 * (n[:, None] ** 2 - n[None, :] ** 2)
    assert np.abs(fin - ideal).max() <= 0.01 * np.abs(ideal).max()
    assert fin[0, 0] == 0


def test_finite_phases_match_adiabatic():
    b = CollectiveBasis(10)
    rates = rates_from_cooperativity(1e4, 1.0)
    fin = finite_time_phases(b, 1.57, 0.44, rates, T=40.0).phases
    ad = adiabatic_phases(b, 1.57, 0.44, rates).phases
    assert np.abs(fin - ad).max() < 0.05


def test_identity_channel():
    b = CollectiveBasis(4)
    rho = ghz_state(b)
    out = apply_channel(GpgPhaseMatrix(b, np.zeros((5, 5))), rho)
    assert np.array_equal(out.mat, rho.mat)


def test_ghz_from_twisting():
    # exp(i pi/2 n^2) turns |+>^N into a GHZ state in the x basis; R_y(-pi/2) maps it onto |D_0>, |D_N>
    N = 4
    b = CollectiveBasis(N)
    plus = euler_matrix(N, 0, math.pi / 2, 0)[:, 0]
    ch = adiabatic_phases(b, math.pi / 2, 1.0, NoiseRates())
    rho = apply_channel(ch, pure_state(b, plus))
    U = euler_matrix(N, 0, -math.pi / 2, 0)
    out = U @ rho.mat @ U.conj().T
    best = 0.0
    for chi in np.linspace(0, 2 * math.pi, 721):
        ghz = np.zeros(N + 1, complex)
        ghz[0], ghz[-1] = 1, np.exp(1j * chi)
        ghz /= math.sqrt(2)
        best = max(best, np.vdot(ghz, out @ ghz).real)
    assert best == pytest.approx(1.0, abs=1e-10)


def test_damping_reduces_trace():
    b = CollectiveBasis(5)
    rates = NoiseRates(0.01, 0.05)
    out = apply_channel(adiabatic_phases(b, 1.0, 0.5, rates), dicke_state(b, 2))
    assert out.trace < 1
    assert apply_channel(adiabatic_phases(b, 1.0, 0.5, rates), dicke_state(b, 0)).trace == pytest.approx(1)


def test_inversion_zero_pulse():
    p = sin2_pulse(0.0, 1.0, 10.0)
    assert np.all(p.zeta == 0)
    assert np.all(invert_zeta_to_eta(p, 1.0, 0.1, 10.0).eta == 0)


def test_inversion_round_trip():
    p = sin2_pulse(1.57, 2.03, 40.0, n_samples=8001)
    kappa = rates_from_cooperativity(1e4, 0.01).kappa
    inv = invert_zeta_to_eta(p, 2.03, kappa, 12.0)
    alpha = forward_alpha(inv.eta, inv.times, 2.03, kappa)
    err = np.abs(zeta_from_alpha(alpha, 12.0) - p.zeta).max()
    assert err < 1e-6 * np.abs(p.zeta).max()
    # single-humped drive magnitude (the one-sided end stencils are excluded)
    mag = np.abs(inv.eta)[2:-2]
    turns = np.nonzero(np.diff(np.sign(np.diff(mag))))[0]
    assert len(turns) == 1 and abs(turns[0] - len(mag) / 2) < 0.01 * len(mag)


def test_gamma1_bounds():
    assert gamma1(0.0, 0.3) == 0
    with pytest.raises(PulseBoundError):
        gamma1(0.5, 0.3)


def test_effective_dephasing():
    assert effective_dephasing_rates(0.2, 0.7, 0.0) == pytest.approx((0.2, 0.0))
    gphi, gp = effective_dephasing_rates(0.2, 0.7, 0.5)
    assert gphi == pytest.approx(0.9 / 4) and gp == pytest.approx(0.9 / 4)
    z = math.sqrt(0.1)
    assert effective_dephasing_rates(1.0, 1.0, z)[1] == pytest.approx(0.2 * 1.0)


def test_effective_emission():
    assert effective_emission_rates(0.3, 0.0) == pytest.approx((0.0, 0.0))
    assert effective_emission_rates(0.3, 0.5) == pytest.approx((0.3 / 4, 0.3 / 4))
    z = 0.05
    exact = effective_emission_rates(1.0, z)[1]
    assert exact == pytest.approx(z**4, rel=0.01)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 1.5), st.floats(0.2, 2.0), st.floats(0.0, 0.2), st.floats(0.0, 0.2))
def test_channel_is_contractive(phi, delta, kappa, gamma):
    # the damped channel never increases trace or purity of a pure input
    b = CollectiveBasis(6)
    rng = np.random.default_rng(int(phi * 1e6))
    psi = rng.normal(size=7) + 1j * rng.normal(size=7)
    rho = pure_state(b, psi / np.linalg.norm(psi))
    out = apply_channel(adiabatic_phases(b, phi, delta, NoiseRates(kappa, gamma)), rho)
    assert out.trace <= 1 + 1e-12
    assert out.purity <= 1 + 1e-12
    out.check(trace_tol=1e-10)


@pytest.mark.parametrize("C", [1e4, 1e6])
def test_finite_phases_approach_adiabatic_monotonically(C):
    b = CollectiveBasis(10)
    rates = rates_from_cooperativity(C, 1.0)
    for phi, delta, Ts in ((1.57, 0.44, (20.0, 40.0, 80.0)), (1.0, 0.7, (10.0, 20.0, 40.0, 80.0))):
        ad = adiabatic_phases(b, phi, delta, rates).phases
        err = [np.abs(finite_time_phases(b, phi, delta, rates, T=T).phases - ad).max() for T in Ts]
        assert all(e2 < e1 for e1, e2 in zip(err, err[1:]))


def test_quadrature_converged_at_default_grid():
    b = CollectiveBasis(10)
    rates = rates_from_cooperativity(1e4, 1.0)
    a = finite_time_phases(b, 1.57, 0.44, rates, pulse=sin2_pulse(1.57, 0.44, 40.0)).phases
    c = finite_time_phases(b, 1.57, 0.44, rates, pulse=sin2_pulse(1.57, 0.44, 40.0, n_samples=8001)).phases
    assert np.abs(a - c).max() < 1e-8
