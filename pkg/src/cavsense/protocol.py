"""State-preparation protocol, variance costs and their exact gradients.

Parameter vector layout (length ``3 + 5P + 1``)::

    [theta0_a, theta0_b, theta0_c,
     (theta_a, theta_b, theta_c, phi, delta) for each step,
     beta]

A step with ``phi == 0`` is an identity gate (no cavity pulse); its ``delta`` is
stored as ``None`` and enters the vector as 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar

from .channel import (
    NoiseRates,
    adiabatic_coefficients,
    adiabatic_terms,
    check_sign,
    finite_channel_scalars,
    phases_from_scalars,
    sin2_pulse,
)
from .dicke import (
    CollectiveBasis,
    SymmetricDensity,
    euler_matrix,
    parity_x_matrix,
    ry_matrix,
    rz_phases,
    spin_matrices,
)

DIVERGENT_VARIANCE = 1e6
# Var(M) below this fraction of <M^2> is indistinguishable from round-off
VARIANCE_FLOOR = 1e-10


@dataclass
class Step:
    theta: tuple[float, float, float]
    phi: float
    delta: float | None

    @property
    def is_identity(self) -> bool:
        return self.phi == 0


@dataclass
class ProtocolParams:
    theta0: tuple[float, float, float]
    steps: list[Step] = field(default_factory=list)
    beta: float = 0.0
    extra_final_rotation: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @property
    def n_params(self) -> int:
        return 3 + 5 * self.n_steps + 1

    def to_vector(self) -> np.ndarray:
        x = list(self.theta0)
        for s in self.steps:
            x += [*s.theta, s.phi, 0.0 if s.delta is None else s.delta]
        x.append(self.beta)
        return np.array(x, dtype=float)

    @classmethod
    def from_vector(cls, x, extra_final_rotation: float = 0.0) -> "ProtocolParams":
        x = np.asarray(x, dtype=float)
        P, rem = divmod(len(x) - 4, 5)
        if rem or P < 0:
            raise ValueError(f"vector length {len(x)} is not 3 + 5P + 1")
        steps = []
        for j in range(P):
            a, b, c, phi, delta = (float(v) for v in x[3 + 5 * j : 8 + 5 * j])
            steps.append(Step((a, b, c), phi, None if phi == 0 and delta == 0 else delta))
        return cls(tuple(float(v) for v in x[:3]), steps, float(x[-1]), extra_final_rotation)

    def to_dict(self) -> dict:
        return {
            "theta0": [float(v) for v in self.theta0],
            "steps": [{"theta": [float(v) for v in s.theta], "phi": float(s.phi), "delta": s.delta} for s in self.steps],
            "beta": float(self.beta),
            "extra_final_rotation": float(self.extra_final_rotation),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolParams":
        unknown = set(d) - {"theta0", "steps", "beta", "extra_final_rotation"}
        if unknown:
            raise ValueError(f"unknown protocol keys {sorted(unknown)}")
        theta0 = tuple(float(v) for v in d["theta0"])
        if len(theta0) != 3:
            raise ValueError("theta0 must have three angles")
        steps = []
        for s in d.get("steps", []):
            th = tuple(float(v) for v in s["theta"])
            if len(th) != 3:
                raise ValueError("step theta must have three angles")
            delta = s.get("delta")
            steps.append(Step(th, float(s["phi"]), None if delta is None else float(delta)))
        return cls(theta0, steps, float(d.get("beta", 0.0)), float(d.get("extra_final_rotation") or 0.0))

    def to_json(self) -> str:
        # json writes floats with repr, so the round trip is exact
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ProtocolParams":
        return cls.from_dict(json.loads(text))

    def validate(self) -> None:
        vals = [*self.theta0, self.beta, self.extra_final_rotation]
        for s in self.steps:
            vals += [*s.theta, s.phi]
            if s.delta is None:
                if s.phi != 0:
                    raise ValueError("a step with nonzero phi needs a detuning")
            else:
                vals.append(s.delta)
                check_sign(s.phi, s.delta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("non-finite protocol parameter")


@dataclass(frozen=True)
class SensingTask:
    """Measured observable and the axis of the sensed field.

    ``normalize`` divides every moment by ``tr(rho)``; off by default, so the
    trace lost to the lossy gate counts against the variance.
    """

    observable: str = "parity_x"
    field_axis: str = "z"
    normalize: bool = False

    def __post_init__(self):
        pairs = {"parity_x": "z", "jz2": "y"}
        if self.observable not in pairs:
            raise ValueError(f"unknown observable {self.observable!r}")
        if pairs[self.observable] != self.field_axis:
            raise ValueError(f"{self.observable} is paired with field axis {pairs[self.observable]!r}")


PARITY = SensingTask("parity_x", "z")
JZ2 = SensingTask("jz2", "y")


def task_from_name(name: str, normalize: bool = False) -> SensingTask:
    key = {"parity": "parity_x", "parity_x": "parity_x", "ghz": "parity_x", "jz2": "jz2", "dicke": "jz2"}[name.lower()]
    return SensingTask(key, "z" if key == "parity_x" else "y", normalize)


@dataclass
class CostResult:
    variance: float
    gradient: np.ndarray | None = None
    probe: SymmetricDensity | None = None
    trace_loss: float = 0.0
    divergent: bool = False
    beta: float = 0.0


# ---------------------------------------------------------------------------
# field rotation and observables


def field_rotation(n_spins: int, axis: str, angle: float) -> np.ndarray:
    if axis == "z":
        return np.diag(rz_phases(n_spins, angle))
    if axis == "y":
        return ry_matrix(n_spins, angle).astype(complex)
    raise ValueError(f"unsupported field axis {axis!r}")


def rotate_about_field(rho: np.ndarray, axis: str, angle: float) -> np.ndarray:
    if angle == 0:
        return rho
    R = field_rotation(rho.shape[0] - 1, axis, angle)
    return R @ rho @ R.conj().T


@lru_cache(maxsize=None)
def _observables(n_spins: int, observable: str):
    """Observables entering the cost plus their first and second field derivatives.

    ``ad(O) = i[H, O]`` gives ``d/dbeta tr(O rho(beta)) = tr(ad(O) rho(beta))``.
    """
    jx, jy, jz = spin_matrices(n_spins)
    eye = np.eye(n_spins + 1, dtype=complex)
    if observable == "parity_x":
        H, ops = jz, [eye, parity_x_matrix(n_spins)]
    else:
        z2 = jz @ jz
        H, ops = jy, [eye, z2, z2 @ z2]

    def ad(O):
        return 1j * (H @ O - O @ H)

    dm = ad(ops[1])
    base = ops + [dm]
    derivs = [ad(O) for O in base]
    return base, derivs


def _cost_from_moments(task: SensingTask, x: np.ndarray):
    """Variance and its partials with respect to the moment vector ``x``.

    ``x = (tr rho, <M>, [<M^2>,] d<M>/dbeta)``; ``<M^2> = tr rho`` for the parity.
    """
    if task.observable == "parity_x":
        t, a, d = x
        m2 = t * t if task.normalize else t
        num = m2 - a * a
        dnum = np.array([2 * t if task.normalize else 1.0, -2 * a, 0.0])
    else:
        t, q2, q4, d = x
        if task.normalize:
            num = t * q4 - q2 * q2
            m2 = t * q4
            dnum = np.array([q4, -2 * q2, t, 0.0])
        else:
            num = q4 - q2 * q2
            m2 = q4
            dnum = np.array([0.0, -2 * q2, 1.0, 0.0])
    # near an eigenstate of M both Var(M) and d<M>/dbeta are cancellation residue;
    # their ratio is meaningless there, so it counts as divergent
    if abs(d) < 1e-14 or num <= VARIANCE_FLOOR * abs(m2):
        return DIVERGENT_VARIANCE, np.zeros_like(x), True
    var = num / d**2
    if not var < DIVERGENT_VARIANCE:
        return DIVERGENT_VARIANCE, np.zeros_like(x), True
    grad = dnum / d**2
    grad[-1] += -2 * num / d**3
    return var, grad, False


def _moments(rho_beta: np.ndarray, ops) -> np.ndarray:
    return np.array([np.sum(O.T * rho_beta).real for O in ops])


def variance(probe: SymmetricDensity, beta: float, task: SensingTask) -> CostResult:
    """``(Delta beta)^2 = Var(M) / |d<M>/dbeta|^2`` on the probe rotated by ``beta`` about the field axis."""
    n = probe.basis.n_spins
    ops, _ = _observables(n, task.observable)
    rb = rotate_about_field(probe.mat, task.field_axis, beta)
    var, _, div = _cost_from_moments(task, _moments(rb, ops))
    return CostResult(var, probe=probe, trace_loss=1 - probe.trace, divergent=div, beta=beta)


def variance_parity(probe: SymmetricDensity, beta: float, normalize: bool = False) -> CostResult:
    """Case I: x-parity readout of a field along z."""
    return variance(probe, beta, SensingTask("parity_x", "z", normalize))


def jz2_moments(probe: SymmetricDensity, beta: float):
    """Closed-form ``<Jz^2(beta)>``, ``<Jz^4(beta)>`` and ``d<Jz^2(beta)>/dbeta``.

    Built from moments of the unrotated probe for ``rho(beta) = e^{-i beta Jy} rho e^{i beta Jy}``,
    under which ``Jz -> Jz cos(beta) - Jx sin(beta)`` in the Heisenberg picture.
    """
    jx, _, jz = spin_matrices(probe.basis.n_spins)
    rho = probe.mat

    def ev(O):
        return float(np.sum(O.T * rho).real)

    z2, x2 = jz @ jz, jx @ jx
    zx = jz @ jx + jx @ jz
    A = z2 @ zx + zx @ z2
    B = x2 @ zx + zx @ x2
    c, s = math.cos(beta), math.sin(beta)
    ez2, ex2, ezx = ev(z2), ev(x2), ev(zx)
    m2 = ez2 * c * c + ex2 * s * s - ezx * s * c
    m4 = (
        ev(z2 @ z2) * c**4
        + ev(x2 @ x2) * s**4
        + (ev(zx @ zx) + ev(z2 @ x2 + x2 @ z2)) * c * c * s * s
        - ev(A) * c**3 * s
        - ev(B) * c * s**3
    )
    dm2 = 2 * (ex2 - ez2) * c * s - ezx * (c * c - s * s)
    return m2, m4, dm2


def variance_jz2(probe: SymmetricDensity, beta: float, normalize: bool = False) -> CostResult:
    """Case II: ``Jz^2`` readout of a field along y, from the closed-form moments."""
    m2, m4, dm2 = jz2_moments(probe, beta)
    task = SensingTask("jz2", "y", normalize)
    var, _, div = _cost_from_moments(task, np.array([probe.trace, m2, m4, dm2]))
    return CostResult(var, probe=probe, trace_loss=1 - probe.trace, divergent=div, beta=beta)


# ---------------------------------------------------------------------------
# protocol evaluation


@dataclass(frozen=True)
class Duration:
    """Gate duration: ``T=None`` is the adiabatic (long-pulse) limit."""

    T: float | None = None
    n_samples: int | None = None

    @property
    def adiabatic(self) -> bool:
        return self.T is None


ADIABATIC = Duration()


def as_duration(d) -> Duration:
    if isinstance(d, Duration):
        return d
    if d is None or (isinstance(d, str) and d.lower() in ("adiabatic", "inf")) or d == math.inf:
        return ADIABATIC
    return Duration(float(d))


def gate_phases(n_spins: int, phi: float, delta: float, rates: NoiseRates, duration, derivatives: bool = False):
    """Phase matrix of one gate, and optionally its ``phi`` and ``delta`` derivatives."""
    duration = as_duration(duration)
    if duration.adiabatic:
        if delta == 0:
            raise ValueError("delta must be nonzero")
        terms = adiabatic_terms(n_spins)
        c, dphi, ddelta = adiabatic_coefficients(phi, delta, rates)
        ph = sum(ci * t for ci, t in zip(c, terms))
        if not derivatives:
            return ph
        return ph, sum(ci * t for ci, t in zip(dphi, terms)), sum(ci * t for ci, t in zip(ddelta, terms))
    pulse = sin2_pulse(phi, delta, duration.T, duration.n_samples, rates.g)
    sc = finite_channel_scalars(phi, delta, rates, pulse, derivatives=derivatives)
    ph = phases_from_scalars(n_spins, sc.I, sc.G)
    if not derivatives:
        return ph
    return (
        ph,
        phases_from_scalars(n_spins, sc.dI[0], sc.dG[0]),
        phases_from_scalars(n_spins, sc.dI[1], sc.dG[1]),
    )


def _initial(n_spins: int) -> np.ndarray:
    rho = np.zeros((n_spins + 1, n_spins + 1), dtype=complex)
    rho[0, 0] = 1.0
    return rho


def _forward(n_spins, params: ProtocolParams, rates, duration, derivatives=False):
    """Run the protocol; returns the list of states and per-step cached data."""
    U0 = euler_matrix(n_spins, *params.theta0)
    rho = U0 @ _initial(n_spins) @ U0.conj().T
    states = [rho]
    cache = []
    for s in params.steps:
        U = euler_matrix(n_spins, *s.theta)
        if s.is_identity:
            F = None
            dphi = ddelta = None
            sigma = rho
        else:
            out = gate_phases(n_spins, s.phi, s.delta, rates, duration, derivatives)
            ph, dphi, ddelta = out if derivatives else (out, None, None)
            F = np.exp(1j * ph)
            sigma = F * rho
        cache.append((U, F, dphi, ddelta, rho, sigma))
        rho = U @ sigma @ U.conj().T
        states.append(rho)
    return states, U0, cache


def trajectory(basis: CollectiveBasis, params: ProtocolParams, rates: NoiseRates, duration=ADIABATIC) -> list[SymmetricDensity]:
    """States after the initial rotation and after each step ``j = 1..P``."""
    states, _, _ = _forward(basis.n_spins, params, rates, duration)
    return [SymmetricDensity(basis, r) for r in states]


def prepare_probe(basis: CollectiveBasis, params: ProtocolParams, rates: NoiseRates, duration=ADIABATIC, field_axis: str | None = None) -> SymmetricDensity:
    """Final protocol state; with ``field_axis`` the extra final rotation is applied too."""
    rho = trajectory(basis, params, rates, duration)[-1].mat
    if field_axis is not None:
        rho = rotate_about_field(rho, field_axis, params.extra_final_rotation)
    return SymmetricDensity(basis, rho)


def _euler_grads(n_spins, angles, U, M):
    """``d/dangle tr(U M)`` for the three Euler angles, with ``U = Rz(a) Ry(b) Rz(c)``."""
    a, b, c = angles
    jz = np.arange(n_spins + 1) - n_spins / 2
    _, jy, _ = spin_matrices(n_spins)
    UM = U @ M
    ga = np.sum(-1j * jz * np.diag(UM))
    za = rz_phases(n_spins, a)
    zc = rz_phases(n_spins, c)
    dY = -1j * (jy @ ry_matrix(n_spins, b))
    dU_b = za[:, None] * dY * zc[None, :]
    gb = np.sum(dU_b.T * M)
    MU = M @ U
    gc = np.sum(-1j * jz * np.diag(MU))
    return np.array([ga, gb, gc])


def evaluate(basis: CollectiveBasis, params: ProtocolParams, rates: NoiseRates, task: SensingTask, duration=ADIABATIC, gradient: bool = True) -> CostResult:
    """Cost of a protocol and its exact gradient over the full parameter vector.

    The gradient is accumulated by back-propagating the cost's observable through
    the adjoint of each rotation and gate (reverse-mode chain rule).
    """
    n = basis.n_spins
    states, U0, cache = _forward(n, params, rates, duration, derivatives=gradient)
    rho = states[-1]
    b_eff = params.beta + params.extra_final_rotation
    R = field_rotation(n, task.field_axis, b_eff)
    rb = R @ rho @ R.conj().T
    ops, dops = _observables(n, task.observable)
    x = _moments(rb, ops)
    var, dvar_dx, div = _cost_from_moments(task, x)
    probe = SymmetricDensity(basis, rho)
    res = CostResult(var, probe=probe, trace_loss=1 - probe.trace, divergent=div, beta=params.beta)
    if not gradient:
        return res
    grad = np.zeros(params.n_params)
    if div:
        res.gradient = grad
        return res
    grad[-1] = float(dvar_dx @ _moments(rb, dops))
    # adjoint observable acting on the final state
    lam = R.conj().T @ sum(w * O for w, O in zip(dvar_dx, ops)) @ R
    for j in range(len(params.steps) - 1, -1, -1):
        U, F, dphi, ddelta, rho_prev, sigma = cache[j]
        M = sigma @ U.conj().T @ lam
        k = 3 + 5 * j
        grad[k : k + 3] = 2 * _euler_grads(n, params.steps[j].theta, U, M).real
        lam = U.conj().T @ lam @ U
        if F is not None:
            lt = lam.T
            grad[k + 3] = np.sum(lt * (1j * dphi * F * rho_prev)).real
            grad[k + 4] = np.sum(lt * (1j * ddelta * F * rho_prev)).real
            lam = lam * F.T
    rho_in = _initial(n)
    M = rho_in @ U0.conj().T @ lam
    grad[0:3] = 2 * _euler_grads(n, params.theta0, U0, M).real
    res.gradient = grad
    return res


def analytic_gradient(basis, params, rates, task, duration=ADIABATIC) -> CostResult:
    return evaluate(basis, params, rates, task, duration, gradient=True)


def best_beta(basis, params, rates, task, duration=ADIABATIC, span: float | None = None, n_grid: int = 401) -> float:
    """Field angle minimising the variance for a fixed probe (grid search plus refinement)."""
    probe = prepare_probe(basis, params, rates, duration, field_axis=task.field_axis)
    n = basis.n_spins
    span = span if span is not None else math.pi / n
    grid = np.linspace(-span, span, n_grid)
    vals = [variance(probe, b, task).variance for b in grid]
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    r = minimize_scalar(lambda b: variance(probe, b, task).variance, bounds=(lo, hi), method="bounded", options=dict(xatol=1e-12))
    return float(r.x) if r.fun <= vals[i] else float(grid[i])
