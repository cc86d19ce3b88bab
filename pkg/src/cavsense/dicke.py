"""Collective-spin algebra on the symmetric Dicke subspace.

Basis index ``n`` counts spins in ``|1>``; ``Jz`` has eigenvalue ``n - N/2``.
All operators are dense ``(N+1, N+1)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln


@dataclass(frozen=True)
class CollectiveBasis:
    n_spins: int

    def __post_init__(self):
        if int(self.n_spins) != self.n_spins or self.n_spins < 1:
            raise ValueError(f"n_spins must be a positive integer, got {self.n_spins}")

    @property
    def dim(self) -> int:
        return self.n_spins + 1

    @property
    def j(self) -> float:
        return self.n_spins / 2


@dataclass(frozen=True, eq=False)
class SymmetricDensity:
    """Density matrix on the symmetric subspace; trace may be < 1 after lossy channels."""

    basis: CollectiveBasis
    mat: np.ndarray

    def __post_init__(self):
        if self.mat.shape != (self.basis.dim, self.basis.dim):
            raise ValueError(f"matrix shape {self.mat.shape} does not match basis dim {self.basis.dim}")

    @property
    def trace(self) -> float:
        return float(np.trace(self.mat).real)

    @property
    def purity(self) -> float:
        return float(np.vdot(self.mat, self.mat).real)

    def normalized(self) -> "SymmetricDensity":
        return SymmetricDensity(self.basis, self.mat / self.trace)

    def check(self, herm_tol=1e-12, psd_tol=-1e-10, trace_tol=1e-12) -> None:
        m = self.mat
        if np.max(np.abs(m - m.conj().T), initial=0.0) > herm_tol * max(1.0, np.abs(m).max()):
            raise ValueError("density matrix is not Hermitian")
        if np.linalg.eigvalsh(0.5 * (m + m.conj().T)).min() < psd_tol:
            raise ValueError("density matrix is not positive semidefinite")
        tr = self.trace
        if not 0 < tr <= 1 + trace_tol:
            raise ValueError(f"trace {tr} outside (0, 1]")


@dataclass(frozen=True, eq=False)
class CollectiveOperator:
    basis: CollectiveBasis
    mat: np.ndarray
    hermitian: bool = field(default=True)

    def __matmul__(self, other):
        if isinstance(other, CollectiveOperator):
            return CollectiveOperator(self.basis, self.mat @ other.mat, False)
        return self.mat @ other

    def dag(self) -> "CollectiveOperator":
        return CollectiveOperator(self.basis, self.mat.conj().T, self.hermitian)


def dicke_state(basis: CollectiveBasis, n: int) -> SymmetricDensity:
    mat = np.zeros((basis.dim, basis.dim), dtype=complex)
    mat[n, n] = 1.0
    return SymmetricDensity(basis, mat)


def pure_state(basis: CollectiveBasis, psi) -> SymmetricDensity:
    psi = np.asarray(psi, dtype=complex)
    return SymmetricDensity(basis, np.outer(psi, psi.conj()))


def ghz_state(basis: CollectiveBasis) -> SymmetricDensity:
    psi = np.zeros(basis.dim, dtype=complex)
    psi[0] = psi[-1] = 1 / np.sqrt(2)
    return pure_state(basis, psi)


@lru_cache(maxsize=None)
def _spin_matrices(n_spins: int):
    j = n_spins / 2
    mz = np.arange(n_spins + 1) - j
    # <m+1|J+|m>
    up = np.sqrt(j * (j + 1) - mz[:-1] * (mz[:-1] + 1))
    jp = np.diag(up, -1).astype(complex)
    jx = 0.5 * (jp + jp.T)
    jy = -0.5j * (jp - jp.T)
    jz = np.diag(mz).astype(complex)
    for a in (jx, jy, jz):
        a.flags.writeable = False
    return jx, jy, jz


def spin_matrices(n_spins: int):
    """Raw ``(Jx, Jy, Jz)`` arrays, cached and read-only."""
    return _spin_matrices(int(n_spins))


def build_collective_operators(basis: CollectiveBasis):
    jx, jy, jz = spin_matrices(basis.n_spins)
    j2 = jx @ jx + jy @ jy + jz @ jz
    return tuple(CollectiveOperator(basis, a) for a in (jx, jy, jz, j2))


@lru_cache(maxsize=None)
def _jy_eig(n_spins: int):
    _, jy, _ = _spin_matrices(n_spins)
    # Jy is diagonalised through the real antisymmetric -iJy; eigenvalues are exactly m.
    w, v = np.linalg.eigh(jy)
    w = np.round(2 * w) / 2
    v.flags.writeable = False
    return w, v


def ry_matrix(n_spins: int, angle: float) -> np.ndarray:
    """Wigner small-d matrix ``exp(-i angle Jy)`` (real)."""
    if angle == 0:
        return np.eye(n_spins + 1)
    w, v = _jy_eig(int(n_spins))
    d = (v * np.exp(-1j * angle * w)) @ v.conj().T
    return d.real.copy()


def rz_phases(n_spins: int, angle: float) -> np.ndarray:
    """Diagonal of ``exp(-i angle Jz)``."""
    return np.exp(-1j * angle * (np.arange(n_spins + 1) - n_spins / 2))


def euler_matrix(n_spins: int, a: float, b: float, c: float) -> np.ndarray:
    """``exp(-i a Jz) exp(-i b Jy) exp(-i c Jz)`` as a dense array."""
    return rz_phases(n_spins, a)[:, None] * ry_matrix(n_spins, b) * rz_phases(n_spins, c)[None, :]


def euler_rotation(basis: CollectiveBasis, alpha: float, beta: float, gamma: float) -> CollectiveOperator:
    return CollectiveOperator(basis, euler_matrix(basis.n_spins, alpha, beta, gamma), hermitian=False)


@lru_cache(maxsize=None)
def _parity_x(n_spins: int) -> np.ndarray:
    # exp(i pi (Jx - N/2)) = (-1)^N exp(i pi Jx); X^{(x)N} maps |D_n> -> |D_{N-n}> exactly.
    p = np.fliplr(np.eye(n_spins + 1)).astype(complex)
    p.flags.writeable = False
    return p


def parity_x_matrix(n_spins: int) -> np.ndarray:
    return _parity_x(int(n_spins))


def parity_x(basis: CollectiveBasis) -> CollectiveOperator:
    return CollectiveOperator(basis, parity_x_matrix(basis.n_spins))


def coherent_state(n_spins: int, theta: float, phi: float) -> np.ndarray:
    """Spin coherent state ``exp(-i phi Jz) exp(-i theta Jy) |D_N>``.

    ``theta = 0`` is the all-ones pole ``|D_N>``, ``theta = pi`` is ``|D_0>``.
    """
    return euler_matrix(n_spins, phi, theta, 0.0)[:, -1]


def husimi_q(state: SymmetricDensity, theta, phi):
    """``Q(theta, phi) = <theta,phi| rho |theta,phi>``; broadcasts over array inputs."""
    n = state.basis.n_spins
    theta, phi = np.broadcast_arrays(np.asarray(theta, float), np.asarray(phi, float))
    # closed-form coherent amplitudes: binomial-weighted cos/sin powers
    k = np.arange(n + 1)
    logc = 0.5 * (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1))
    th = theta[..., None]
    ph = phi[..., None]
    c = np.cos(th / 2)
    s = np.sin(th / 2)
    # <D_k| exp(-i theta Jy) |D_N> = C(N,k)^1/2 cos^k sin^(N-k), no extra signs
    mag = np.exp(logc) * s ** (n - k) * c**k
    amp = mag * np.exp(-1j * ph * (k - n / 2))
    q = np.einsum("...i,ij,...j->...", amp.conj(), state.mat, amp).real
    return q
