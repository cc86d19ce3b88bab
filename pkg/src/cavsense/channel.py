"""Geometric-phase-gate channel in the Dicke basis.

Units: the spin-cavity coupling ``g`` is 1; rates are in units of ``g`` and
times in units of ``1/g``.  The channel multiplies the density-matrix element
``rho_nm`` by ``exp(i phi_nm)``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .dicke import CollectiveBasis, SymmetricDensity


class SignMismatchError(ValueError):
    pass


class PulseBoundError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseRates:
    kappa: float = 0.0
    gamma: float = 0.0
    g: float = 1.0

    def __post_init__(self):
        if self.kappa < 0 or self.gamma < 0 or self.g <= 0:
            raise ValueError(f"invalid rates {self}")

    @property
    def cooperativity(self) -> float:
        if self.kappa == 0 or self.gamma == 0:
            return math.inf
        return self.g**2 / (self.kappa * self.gamma)

    @property
    def gamma_over_kappa(self) -> float:
        return self.gamma / self.kappa if self.kappa else math.inf


def rates_from_cooperativity(C: float, gamma_over_kappa: float) -> NoiseRates:
    """``C = g^2/(kappa gamma)`` with ``g = 1``; ``C = inf`` is the lossless channel."""
    if not C > 0 or not gamma_over_kappa > 0:
        raise ValueError("cooperativity and gamma/kappa must be positive")
    if math.isinf(C):
        return NoiseRates(0.0, 0.0)
    kappa = 1.0 / math.sqrt(C * gamma_over_kappa)
    return NoiseRates(kappa=kappa, gamma=gamma_over_kappa * kappa)


def cavity_params_from_geometry(wavelength, finesse, waist, length, gamma):
    """Cooperativity, coupling and cavity decay of a Fabry-Perot cavity.

    SI inputs (metres, rad/s for ``gamma``).  ``kappa`` and ``g`` are returned in
    rad/s; ``C = 3 lambda^2 F / (2 pi^3 w^2)``, ``kappa = pi c / (L F)``.
    """
    c_light = 299_792_458.0
    C = 3 * wavelength**2 * finesse / (2 * math.pi**3 * waist**2)
    kappa = math.pi * c_light / (length * finesse)
    g = math.sqrt(C * kappa * gamma)
    return C, g, kappa


def check_sign(phi: float, delta: float) -> None:
    if phi != 0 and delta != 0 and np.sign(phi) != np.sign(delta):
        raise SignMismatchError(f"phi={phi} and delta={delta} must share a sign")


def delta_band(phi: float, T: float, g: float = 1.0) -> tuple[float, float]:
    """Allowed ``|delta|`` interval ``(2 pi / T, 3 g^2 T / (32 |phi|))`` for a pulse of length ``T``."""
    hi = math.inf if phi == 0 else 3 * g**2 * T / (32 * abs(phi))
    return 2 * math.pi / T, hi


@dataclass(frozen=True, eq=False)
class GpgPhaseMatrix:
    basis: CollectiveBasis
    phases: np.ndarray
    residual: float = 0.0

    @property
    def factors(self) -> np.ndarray:
        return np.exp(1j * self.phases)


def _index_grids(n_spins: int):
    n = np.arange(n_spins + 1, dtype=float)
    return n[:, None], n[None, :]


def adiabatic_terms(n_spins: int):
    """The three fixed matrices ``(n^2-m^2, i(m-n)^2/2, i(m+n)/2)`` of the adiabatic phase."""
    n, m = _index_grids(n_spins)
    return n**2 - m**2, 0.5j * (m - n) ** 2, 0.5j * (m + n)


def adiabatic_coefficients(phi, delta, rates: NoiseRates):
    """Weights of the three adiabatic terms and their derivatives in ``(phi, delta)``.

    Uses ``|phi/delta|`` and ``|phi delta|`` so the damping stays non-negative for
    any signs; with ``sign(phi) = sign(delta)`` this is the usual expression.
    """
    g2 = rates.g**2
    sp = np.sign(phi) if phi != 0 else 1.0
    sd = np.sign(delta)
    ad = abs(delta)
    c = np.array([phi, rates.kappa * abs(phi) / ad, rates.gamma * abs(phi) * ad / g2])
    dphi = np.array([1.0, rates.kappa * sp / ad, rates.gamma * sp * ad / g2])
    ddelta = np.array([0.0, -rates.kappa * abs(phi) * sd / ad**2, rates.gamma * abs(phi) * sd / g2])
    return c, dphi, ddelta


def adiabatic_phases(basis: CollectiveBasis, phi: float, delta: float, rates: NoiseRates, strict=True) -> GpgPhaseMatrix:
    """Long-pulse limit ``phi [n^2-m^2 + i(m-n)^2 kappa/(2 delta) + i(m+n) gamma delta/(2 g^2)]``."""
    if strict:
        check_sign(phi, delta)
    if delta == 0:
        raise ValueError("delta must be nonzero")
    terms = adiabatic_terms(basis.n_spins)
    c, _, _ = adiabatic_coefficients(phi, delta, rates)
    return GpgPhaseMatrix(basis, c[0] * terms[0] + c[1] * terms[1] + c[2] * terms[2])


def apply_channel(phases: GpgPhaseMatrix, rho: SymmetricDensity) -> SymmetricDensity:
    if phases.basis != rho.basis:
        raise ValueError("basis mismatch between phase matrix and state")
    return SymmetricDensity(rho.basis, phases.factors * rho.mat)


# ---------------------------------------------------------------------------
# pulses


@dataclass(frozen=True, eq=False)
class PulseGrid:
    times: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray | None = None
    alpha: np.ndarray | None = None
    Delta: float | None = None
    dzeta_ddelta: np.ndarray | None = field(default=None, repr=False)

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def to_csv(self, path) -> None:
        eta = self.eta if self.eta is not None else np.zeros_like(self.zeta)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "re_zeta", "im_zeta", "re_eta", "im_eta"])
            for row in zip(self.times, self.zeta.real, self.zeta.imag, eta.real, eta.imag):
                w.writerow([repr(float(x)) for x in row])

    @classmethod
    def from_csv(cls, path) -> "PulseGrid":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        if header != ["t", "re_zeta", "im_zeta", "re_eta", "im_eta"]:
            raise ValueError(f"unexpected pulse CSV header {header}")
        return cls(body[:, 0], body[:, 1] + 1j * body[:, 2], eta=body[:, 3] + 1j * body[:, 4])


def default_samples(T: float) -> int:
    # ~100 samples per 1/g, odd count for Simpson panels
    return max(2 * math.ceil(50 * T), 200) + 1


def sin2_pulse(phi: float, delta: float, T: float, n_samples: int | None = None, g: float = 1.0, check_bounds=True) -> PulseGrid:
    """Cavity drive in the effective frame.

    ``Re zeta = -2 delta sqrt(2 phi / (3 delta T)) sin^2(pi t/T)`` and
    ``Im zeta = -d/dt Re zeta / delta`` (analytic derivative).
    """
    check_sign(phi, delta)
    if delta == 0:
        raise ValueError("delta must be nonzero")
    if check_bounds:
        lo, hi = delta_band(phi, T, g)
        if not lo < abs(delta) < hi:
            raise PulseBoundError(f"|delta|={abs(delta):.6g} outside ({lo:.6g}, {hi:.6g}) for T={T}")
    if n_samples is None:
        n_samples = default_samples(T)
    if n_samples % 2 == 0:
        n_samples += 1
    t = np.linspace(0.0, T, n_samples)
    w = math.pi / T
    s = np.sin(w * t) ** 2
    ds = w * np.sin(2 * w * t)
    amp = math.sqrt(2 * phi / (3 * delta * T)) if phi != 0 else 0.0
    zeta = amp * (-2 * delta * s + 2j * ds)
    zeta[0] = zeta[-1] = 0.0
    # amp ~ delta^{-1/2}
    damp = -0.5 * amp / delta
    dz = damp * (-2 * delta * s + 2j * ds) + amp * (-2 * s)
    dz[0] = dz[-1] = 0.0
    if np.abs(zeta).max() >= g / 2:
        raise PulseBoundError(f"max|zeta| = {np.abs(zeta).max():.6g} >= g/2")
    return PulseGrid(t, zeta, dzeta_ddelta=dz)


# ---------------------------------------------------------------------------
# finite-duration phases


def _exp_moments(z: complex, jmax: int = 2) -> np.ndarray:
    """``[int_0^1 s^j exp(z s) ds for j=0..jmax]``."""
    if abs(z) < 0.5:
        out = np.zeros(jmax + 1, dtype=complex)
        term = 1.0 + 0j
        for i in range(30):
            for j in range(jmax + 1):
                out[j] += term / (i + j + 1)
            term *= z / (i + 1)
        return out
    out = np.empty(jmax + 1, dtype=complex)
    ez = np.exp(z)
    out[0] = (ez - 1) / z
    for j in range(1, jmax + 1):
        out[j] = (ez - j * out[j - 1]) / z
    return out


def _propagate_linear(decay: complex, forcing: np.ndarray, h: float) -> np.ndarray:
    """Solve ``x' = -decay x + f(t)``, ``x(0) = 0`` on a uniform odd-length grid.

    ``f`` is interpolated quadratically over each pair of intervals and the
    convolution with ``exp(-decay t)`` is integrated exactly.
    """
    n = len(forcing)
    x = np.zeros(n, dtype=complex)
    # weights for L = h and L = 2h: int_0^L exp(-decay (L - s)) q(s) ds with q the
    # quadratic through (0, f0), (h, f1), (2h, f2); in u = s/h, q = sum_k c_k u^k
    out = []
    for L in (1, 2):
        z = decay * h * L
        # int_0^L exp(-decay h (L-u)) u^k h du = h e^{-z} int_0^L e^{decay h u} u^k du
        mom = _exp_moments(z, 2)  # int_0^1 s^j e^{z s} ds
        # int_0^L u^k e^{a u} du with a = decay h: substitute u = L s -> L^{k+1} mom_k(z)
        base = np.array([L ** (k + 1) * mom[k] for k in range(3)]) * h * np.exp(-z)
        out.append(base)
    # quadratic coefficients from samples: c0 = f0, c1 = (-3f0 + 4f1 - f2)/2, c2 = (f0 - 2f1 + f2)/2
    to_c = np.array([[1.0, 0.0, 0.0], [-1.5, 2.0, -0.5], [0.5, -1.0, 0.5]])
    w1 = out[0] @ to_c  # weights on (f0, f1, f2) for the first step
    w2 = out[1] @ to_c
    e1 = np.exp(-decay * h)
    f = np.asarray(forcing, dtype=complex)
    f0, f1, f2 = f[0:-2:2], f[1:-1:2], f[2::2]
    inc1 = w1[0] * f0 + w1[1] * f1 + w1[2] * f2
    inc2 = w2[0] * f0 + w2[1] * f1 + w2[2] * f2
    # x[2k+2] = e1^2 x[2k] + inc2[k]: first-order recurrence run through lfilter
    x[2::2] = lfilter([1.0], [1.0, -e1 * e1], inc2)
    x[1::2] = e1 * x[0:-2:2] + inc1
    return x


def _simpson(y: np.ndarray, h: float):
    return h / 3 * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum())


def gamma1(zeta_abs, gamma: float, g: float = 1.0):
    """Dressed excited-state loss ``gamma (1 - sqrt(1 - 4|zeta|^2/g^2)) / 2``."""
    x = 4 * np.abs(zeta_abs) ** 2 / g**2
    if np.any(x >= 1):
        raise PulseBoundError("|zeta| >= g/2 makes the dressed loss rate complex")
    # stable form of 1 - sqrt(1 - x)
    return gamma * (x / (1 + np.sqrt(1 - x))) / 2


@dataclass(frozen=True)
class ChannelScalars:
    """Finite-pulse channel summary.

    The cavity amplitude is linear in the excitation number, ``beta_n = n b(t)``, so
    ``phi_nm = (m-n)(m I* + n I) + i (m+n) G / 2`` with ``I = int zeta* b dt`` and
    ``G = int gamma_1 dt``.
    """

    I: complex
    G: float
    residual: float
    dI: tuple = (0j, 0j)
    dG: tuple = (0.0, 0.0)


def finite_channel_scalars(phi, delta, rates: NoiseRates, pulse: PulseGrid, derivatives=False) -> ChannelScalars:
    h = pulse.dt
    zeta = pulse.zeta
    decay = 1j * delta + rates.kappa / 2
    b = _propagate_linear(decay, -1j * zeta, h)
    I = _simpson(zeta.conj() * b, h)
    g1 = gamma1(np.abs(zeta), rates.gamma, rates.g)
    G = float(_simpson(g1, h))
    residual = float(abs(b[-1]))
    if not derivatives:
        return ChannelScalars(I, G, residual)
    # zeta ~ sqrt(phi): I ~ phi, d|zeta|^2/dphi = |zeta|^2/phi
    x = 4 * np.abs(zeta) ** 2 / rates.g**2
    dg1_dz2 = rates.gamma / (rates.g**2 * np.sqrt(1 - x))
    z2 = np.abs(zeta) ** 2
    dI_phi = I / phi
    dG_phi = float(_simpson(dg1_dz2 * z2, h)) / phi
    dz = pulse.dzeta_ddelta
    if dz is None:
        raise ValueError("pulse lacks the delta-derivative samples needed for gradients")
    db = _propagate_linear(decay, -1j * b - 1j * dz, h)
    dI_delta = _simpson(dz.conj() * b + zeta.conj() * db, h)
    dG_delta = float(_simpson(dg1_dz2 * 2 * (zeta.conj() * dz).real, h))
    return ChannelScalars(I, G, residual, (dI_phi, dI_delta), (dG_phi, dG_delta))


def phases_from_scalars(n_spins: int, I: complex, G: float) -> np.ndarray:
    n, m = _index_grids(n_spins)
    return (m - n) * (m * np.conj(I) + n * I) + 0.5j * (m + n) * G


def finite_time_phases(basis: CollectiveBasis, phi: float, delta: float, rates: NoiseRates, pulse: PulseGrid | None = None, T: float | None = None) -> GpgPhaseMatrix:
    """Exact phases of a finite pulse from the closed-form cavity amplitude.

    Either pass a pulse, or ``T`` to synthesise the sin^2 pulse for ``(phi, delta)``.
    """
    check_sign(phi, delta)
    if pulse is None:
        if T is None:
            raise ValueError("need a pulse or a duration")
        pulse = sin2_pulse(phi, delta, T)
    if phi == 0:
        return GpgPhaseMatrix(basis, np.zeros((basis.dim, basis.dim)), 0.0)
    s = finite_channel_scalars(phi, delta, rates, pulse)
    return GpgPhaseMatrix(basis, phases_from_scalars(basis.n_spins, s.I, s.G), s.residual)


# ---------------------------------------------------------------------------
# lab-frame drive


def invert_zeta_to_eta(pulse: PulseGrid, delta: float, kappa: float, Delta: float, g: float = 1.0) -> PulseGrid:
    """Recover the cavity drive ``eta(t)`` that produces ``zeta(t)``.

    ``zeta = g^2 alpha / sqrt(4 g^2 |alpha|^2 + Delta^2)`` inverts to
    ``|alpha| = Delta |zeta| / (g sqrt(g^2 - 4|zeta|^2))``; then
    ``eta = -alpha' - (i delta + kappa/2) alpha``.
    """
    if not Delta > 0:
        raise ValueError("Delta must be positive")
    za = np.abs(pulse.zeta)
    if np.any(za >= g / 2):
        raise PulseBoundError("|zeta| >= g/2: inversion is singular")
    alpha = pulse.zeta * Delta / (g * np.sqrt(g**2 - 4 * za**2))
    dalpha = np.gradient(alpha, pulse.times, edge_order=2)
    eta = -dalpha - (1j * delta + kappa / 2) * alpha
    return PulseGrid(pulse.times, pulse.zeta, eta=eta, alpha=alpha, Delta=Delta, dzeta_ddelta=pulse.dzeta_ddelta)


def zeta_from_alpha(alpha, Delta: float, g: float = 1.0):
    return g**2 * alpha / np.sqrt(4 * g**2 * np.abs(alpha) ** 2 + Delta**2)


def forward_alpha(eta: np.ndarray, times: np.ndarray, delta: float, kappa: float) -> np.ndarray:
    """Integrate ``alpha' = -eta - (i delta + kappa/2) alpha`` from ``alpha(0) = 0``."""
    h = times[1] - times[0]
    return _propagate_linear(1j * delta + kappa / 2, -eta, h)


# ---------------------------------------------------------------------------
# effective rates under dressing


def _dressing(zeta_abs, g):
    x = 4 * np.asarray(zeta_abs, float) ** 2 / g**2
    if np.any(x > 1):
        raise PulseBoundError("|zeta| > g/2")
    return x, np.sqrt(1 - x)


def effective_dephasing_rates(gamma_phi_1, gamma_phi_e, zeta_abs, g=1.0):
    x, r = _dressing(zeta_abs, g)
    gphi = gamma_phi_1 * (1 + r) ** 2 / 4 + gamma_phi_e * (1 - r) ** 2 / 4
    gp = (gamma_phi_1 + gamma_phi_e) * x / 4
    return gphi, gp


def effective_emission_rates(gamma, zeta_abs, g=1.0):
    x, r = _dressing(zeta_abs, g)
    return gamma * x / 4, gamma * (1 - r) ** 2 / 4
