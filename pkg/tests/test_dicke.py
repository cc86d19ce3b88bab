import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from cavsense.dicke import (
    CollectiveBasis,
    SymmetricDensity,
    build_collective_operators,
    coherent_state,
    dicke_state,
    euler_matrix,
    ghz_state,
    husimi_q,
    parity_x_matrix,
    ry_matrix,
    spin_matrices,
)

angles = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)


def test_single_spin_jz():
    _, _, jz = spin_matrices(1)
    assert np.allclose(jz, np.diag([-0.5, 0.5]))


def test_spin_one_casimir():
    *_, j2 = build_collective_operators(CollectiveBasis(2))
    assert np.allclose(j2.mat, 2 * np.eye(3))


def test_commutator():
    jx, jy, jz = spin_matrices(10)
    assert np.abs(jx @ jy - jy @ jx - 1j * jz).max() < 1e-12


def test_bad_basis():
    with pytest.raises(ValueError):
        CollectiveBasis(0)
    with pytest.raises(ValueError):
        SymmetricDensity(CollectiveBasis(3), np.eye(3))


def test_euler_identity():
    assert np.allclose(euler_matrix(7, 0, 0, 0), np.eye(8), atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(angles, angles)
def test_ry_composition(a, b):
    assert np.abs(ry_matrix(9, a) @ ry_matrix(9, b) - ry_matrix(9, a + b)).max() < 1e-12


@settings(max_examples=20, deadline=None)
@given(angles, angles, angles)
def test_euler_matches_expm(a, b, c):
    jx, jy, jz = spin_matrices(6)
    ref = expm(-1j * a * jz) @ expm(-1j * b * jy) @ expm(-1j * c * jz)
    assert np.abs(euler_matrix(6, a, b, c) - ref).max() < 1e-11


def test_ry_pi_flips_dicke_states():
    d = ry_matrix(6, math.pi)
    for n in range(7):
        assert abs(abs(d[6 - n, n]) - 1) < 1e-12


def test_parity():
    N = 10
    P = parity_x_matrix(N)
    assert np.abs(P @ P - np.eye(N + 1)).max() < 1e-12
    assert abs(np.trace(P @ dicke_state(CollectiveBasis(N), 0).mat)) == 0
    assert abs(np.trace(parity_x_matrix(4) @ ghz_state(CollectiveBasis(4)).mat) - 1) < 1e-14


def test_parity_is_spin_flip_product():
    # brute-force X on every qubit restricted to the symmetric subspace
    N = 4
    jx, _, _ = spin_matrices(N)
    ref = expm(1j * math.pi * (jx - N / 2 * np.eye(N + 1)))
    assert np.abs(ref - parity_x_matrix(N)).max() < 1e-12


def test_husimi_pole_and_mixed():
    N = 8
    basis = CollectiveBasis(N)
    assert abs(husimi_q(dicke_state(basis, N), 0.0, 0.0) - 1) < 1e-14
    mixed = SymmetricDensity(basis, np.eye(N + 1) / (N + 1))
    th, ph = np.meshgrid(np.linspace(0, math.pi, 7), np.linspace(0, 6, 5))
    assert np.allclose(husimi_q(mixed, th, ph), 1 / (N + 1))


def test_husimi_matches_coherent_state_overlap():
    N = 5
    rng = np.random.default_rng(1)
    psi = rng.normal(size=N + 1) + 1j * rng.normal(size=N + 1)
    psi /= np.linalg.norm(psi)
    rho = SymmetricDensity(CollectiveBasis(N), np.outer(psi, psi.conj()))
    for th, ph in [(0.3, 1.1), (2.0, -0.7)]:
        ref = abs(np.vdot(coherent_state(N, th, ph), psi)) ** 2
        assert abs(husimi_q(rho, th, ph) - ref) < 1e-12


def test_husimi_normalization():
    # after the phi average Q is a degree-N polynomial in cos(theta): Gauss-Legendre is exact
    N = 8
    U = euler_matrix(N, 0.4, 1.2, -0.3)
    rho = SymmetricDensity(CollectiveBasis(N), U @ dicke_state(CollectiveBasis(N), 2).mat @ U.conj().T)
    u, w = np.polynomial.legendre.leggauss(N + 2)
    ph = np.linspace(0, 2 * math.pi, 2 * N + 3, endpoint=False)
    Q = husimi_q(rho, *np.meshgrid(np.arccos(u), ph, indexing="ij"))
    integral = (N + 1) / (4 * math.pi) * np.sum(w * Q.mean(axis=1)) * 2 * math.pi
    assert abs(integral - rho.trace) < 1e-12


def test_density_check():
    basis = CollectiveBasis(3)
    dicke_state(basis, 1).check()
    with pytest.raises(ValueError):
        SymmetricDensity(basis, np.diag([1.0, -0.5, 0.5, 0.0]).astype(complex)).check()
