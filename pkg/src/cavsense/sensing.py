"""Signal acquisition under a collective field with local spin dephasing.

States are stored in the permutation-invariant block form
``rho = sum_j rho_j (x) 1_{d_j}``, one ``(2j+1)`` block per total spin ``j``
with multiplicity ``d_j``.  Blocks are keyed by ``2j`` and indexed by ``m``
ascending, so the ``j = N/2`` block is the symmetric Dicke matrix.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.linalg import null_space
from scipy.sparse.linalg import expm_multiply

from .dicke import CollectiveBasis, SymmetricDensity, ghz_state, dicke_state, rz_phases, ry_matrix, spin_matrices
from .protocol import DIVERGENT_VARIANCE, JZ2, VARIANCE_FLOOR, SensingTask


class PropagationError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def degeneracy(n_spins: int, twoj: int) -> int:
    """Multiplicity of total spin ``j = twoj/2`` among ``n_spins`` qubits."""
    if twoj < 0 or twoj > n_spins or (n_spins - twoj) % 2:
        return 0
    k = (n_spins - twoj) // 2
    return math.comb(n_spins, k) - (math.comb(n_spins, k - 1) if k > 0 else 0)


def spin_sectors(n_spins: int) -> list[int]:
    """Allowed ``2j`` values, largest first."""
    return list(range(n_spins, -1, -2))


@dataclass(eq=False)
class PIDensity:
    n_spins: int
    blocks: dict[int, np.ndarray]

    def __post_init__(self):
        for twoj in spin_sectors(self.n_spins):
            b = self.blocks.get(twoj)
            if b is None:
                self.blocks[twoj] = np.zeros((twoj + 1, twoj + 1), dtype=complex)
            elif b.shape != (twoj + 1, twoj + 1):
                raise ValueError(f"block 2j={twoj} has shape {b.shape}")

    @property
    def trace(self) -> float:
        return float(sum(degeneracy(self.n_spins, k) * np.trace(b).real for k, b in self.blocks.items()))

    @property
    def purity(self) -> float:
        return float(sum(degeneracy(self.n_spins, k) * np.vdot(b, b).real for k, b in self.blocks.items()))

    def expect(self, ops: dict[int, np.ndarray]) -> complex:
        return sum(degeneracy(self.n_spins, k) * np.sum(ops[k].T * b) for k, b in self.blocks.items())

    def check(self, trace_tol=1e-10, herm_tol=1e-12):
        for k, b in self.blocks.items():
            if np.abs(b - b.conj().T).max(initial=0.0) > herm_tol:
                raise ValueError(f"block 2j={k} is not Hermitian")
        if abs(self.trace - 1) > trace_tol:
            raise ValueError(f"trace {self.trace} != 1")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.blocks[k].ravel() for k in spin_sectors(self.n_spins)])

    @classmethod
    def from_vector(cls, n_spins: int, v: np.ndarray) -> "PIDensity":
        blocks, i = {}, 0
        for k in spin_sectors(n_spins):
            s = (k + 1) ** 2
            blocks[k] = v[i : i + s].reshape(k + 1, k + 1).copy()
            i += s
        return cls(n_spins, blocks)

    def symmetric_block(self) -> SymmetricDensity:
        return SymmetricDensity(CollectiveBasis(self.n_spins), self.blocks[self.n_spins].copy())


def embed_symmetric(state: SymmetricDensity) -> PIDensity:
    """Place a symmetric-subspace matrix in the ``j = N/2`` block."""
    n = state.basis.n_spins
    return PIDensity(n, {n: np.array(state.mat, dtype=complex)})


@dataclass(frozen=True)
class DephasingConfig:
    """Rates and times in units of the field coupling ``J``."""

    gamma_phi_over_J: float
    field_axis: str = "z"
    t_grid: tuple = tuple(np.linspace(0, 2, 41))

    def __post_init__(self):
        if not self.gamma_phi_over_J >= 0:
            raise ValueError("gamma_phi_over_J must be >= 0")
        if self.field_axis not in ("x", "y", "z"):
            raise ValueError(f"unknown field axis {self.field_axis!r}")
        t = np.asarray(self.t_grid, float)
        if t.ndim != 1 or len(t) == 0 or t[0] != 0 or np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must start at 0 and increase strictly")
        object.__setattr__(self, "t_grid", tuple(float(x) for x in t))


def _axis_op(twoj: int, axis: str) -> np.ndarray:
    jx, jy, jz = spin_matrices(twoj)
    return {"x": jx, "y": jy, "z": jz}[axis]


def _offsets(n_spins):
    off, i = {}, 0
    for k in spin_sectors(n_spins):
        off[k] = i
        i += (k + 1) ** 2
    return off, i


def _recoupling(twojp: int, m: np.ndarray):
    """Diagonal and off-diagonal entries of ``sigma_z`` on one spin, in the basis
    ``j = j' +- 1/2`` obtained by coupling that spin to a spin-``j'`` parent."""
    a = 2 * m / (twojp + 1)
    b = 2 * np.sqrt(np.clip(((twojp + 1) / 2) ** 2 - m * m, 0, None)) / (twojp + 1)
    return a, b


def pi_generator(n_spins: int, gamma_phi: float, axis: str | None, field: float = 1.0) -> sp.csr_matrix:
    """Sparse generator of ``-i[field J_axis, rho] + gamma_phi sum_i D[sigma_z^i / 2] rho``.

    Local dephasing keeps ``m, m'`` fixed and moves weight between ``j`` and
    ``j +- 1``.  Coefficients follow from recoupling one spin to the remaining
    ``N-1`` (sectors ``j' = j +- 1/2``) and averaging over which spin is chosen.
    """
    N = n_spins
    off, dim = _offsets(N)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    if axis is not None and field != 0:
        for k in spin_sectors(N):
            H = field * _axis_op(k, axis)
            d = k + 1
            eye = sp.identity(d, format="csr")
            blk = -1j * (sp.kron(sp.csr_matrix(H), eye) - sp.kron(eye, sp.csr_matrix(H.T)))
            blk = blk.tocoo()
            rows.append(blk.row + off[k])
            cols.append(blk.col + off[k])
            vals.append(blk.data)

    if gamma_phi:
        for k in spin_sectors(N):
            d = k + 1
            idx = off[k] + np.arange(d * d).reshape(d, d)
            add(idx, idx, np.full(idx.shape, -gamma_phi * N / 4, dtype=complex))
            dj = degeneracy(N, k)
            for kp in (k - 1, k + 1):
                dp = degeneracy(N - 1, kp)
                if dp == 0:
                    continue
                for K in (kp - 1, kp + 1):
                    if degeneracy(N, K) == 0:
                        continue
                    lo = min(k, K)
                    m = np.arange(-lo, lo + 1, 2) / 2
                    a, b = _recoupling(kp, m)
                    if K == k:
                        s = a if k == kp + 1 else -a
                    else:
                        s = -b
                    coef = gamma_phi / 4 * N * dp / dj * np.outer(s, s)
                    # block index of m within sector k: (m + j)
                    ik = (np.round(m + k / 2)).astype(int)
                    iK = (np.round(m + K / 2)).astype(int)
                    r = off[k] + ik[:, None] * (k + 1) + ik[None, :]
                    c = off[K] + iK[:, None] * (K + 1) + iK[None, :]
                    add(r, c, coef.astype(complex))
    if rows:
        L = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(dim, dim))
    else:
        L = sp.coo_matrix((dim, dim), dtype=complex)
    return L.tocsr()


def _propagate(L, v0, times, trace_fn, trace_tol=1e-8):
    out = [v0]
    v = v0
    tr0 = trace_fn(v0)
    for t0, t1 in zip(times[:-1], times[1:]):
        v = expm_multiply(L * (t1 - t0), v)
        if abs(trace_fn(v) - tr0) > trace_tol:
            raise PropagationError(f"trace drift {trace_fn(v) - tr0:.2e} at t={t1}")
        out.append(v)
    return out


def _trace_weights(n_spins):
    w = []
    for k in spin_sectors(n_spins):
        w.append(degeneracy(n_spins, k) * np.eye(k + 1).ravel())
    return np.concatenate(w)


def pi_propagate(state: PIDensity, cfg: DephasingConfig) -> list[PIDensity]:
    """States at every ``cfg.t_grid`` time (``t`` in units of ``1/J``)."""
    N = state.n_spins
    L = pi_generator(N, cfg.gamma_phi_over_J, cfg.field_axis)
    w = _trace_weights(N)
    vs = _propagate(L, state.to_vector(), np.asarray(cfg.t_grid), lambda v: (w @ v).real)
    return [PIDensity.from_vector(N, v) for v in vs]


def dephase(state: PIDensity, gamma_t: float) -> PIDensity:
    """Pure local dephasing (no field) for a dimensionless ``gamma_phi t``."""
    N = state.n_spins
    L = pi_generator(N, 1.0, None)
    w = _trace_weights(N)
    vs = _propagate(L, state.to_vector(), np.array([0.0, gamma_t]), lambda v: (w @ v).real)
    return PIDensity.from_vector(N, vs[-1])


# ---------------------------------------------------------------------------
# observables and variances


def _block_parity(n_spins: int, twoj: int) -> np.ndarray:
    # the product of sigma_x acts on sector j as (-1)^(N/2-j) times m -> -m
    return (-1) ** ((n_spins - twoj) // 2) * np.fliplr(np.eye(twoj + 1))


def _block_observables(n_spins: int, task: SensingTask):
    M, M2, ad = {}, {}, {}
    for k in spin_sectors(n_spins):
        H = _axis_op(k, task.field_axis)
        if task.observable == "parity_x":
            m = _block_parity(n_spins, k).astype(complex)
            m2 = np.eye(k + 1, dtype=complex)
        else:
            jz = _axis_op(k, "z")
            m = jz @ jz
            m2 = m @ m
        M[k], M2[k], ad[k] = m, m2, 1j * (H @ m - m @ H)
    return M, M2, ad


def _flat(ops, n_spins):
    return np.concatenate([degeneracy(n_spins, k) * ops[k].T.ravel() for k in spin_sectors(n_spins)])


@dataclass
class SensingSeries:
    t: np.ndarray
    variance: np.ndarray
    trace: np.ndarray
    purity: np.ndarray
    divergent: np.ndarray

    def as_pairs(self):
        return list(zip(self.t.tolist(), self.variance.tolist()))

    def to_csv(self, path, extra: dict | None = None):
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["Jt", "variance", "trace", "purity", *extra])
            for i in range(len(self.t)):
                w.writerow([repr(float(self.t[i])), repr(float(self.variance[i])), repr(float(self.trace[i])), repr(float(self.purity[i])), *(repr(float(v[i])) for v in extra.values())])


def _variance(m, m2, d):
    num = m2 - m * m
    if abs(d) < 1e-14 or num <= VARIANCE_FLOOR * abs(m2):
        return DIVERGENT_VARIANCE, True
    v = num / d**2
    return (v, False) if v < DIVERGENT_VARIANCE else (DIVERGENT_VARIANCE, True)


def variance_timeseries(probe: SymmetricDensity | PIDensity, task: SensingTask, cfg: DephasingConfig, derivative: str = "total") -> SensingSeries:
    """``(Delta beta)^2`` along the evolution with ``beta = J t``.

    ``derivative="total"`` differentiates the signal along the dephasing
    trajectory, ``d<M>/d(Jt)``, which is what the GHZ closed form uses;
    ``"field"`` keeps only the coherent part ``<i[J_axis, M]>``.  The two agree
    when ``gamma_phi = 0``.
    """
    if derivative not in ("total", "field"):
        raise ValueError("derivative must be 'total' or 'field'")
    if task.field_axis != cfg.field_axis:
        cfg = DephasingConfig(cfg.gamma_phi_over_J, task.field_axis, cfg.t_grid)
    if isinstance(probe, SymmetricDensity):
        probe = embed_symmetric(probe)
    # moments follow the task convention: raw (trace-decayed) or renormalised
    state = PIDensity(probe.n_spins, {k: b / probe.trace for k, b in probe.blocks.items()}) if task.normalize else probe
    N = state.n_spins
    L = pi_generator(N, cfg.gamma_phi_over_J, cfg.field_axis)
    w = _trace_weights(N)
    vs = _propagate(L, state.to_vector(), np.asarray(cfg.t_grid), lambda v: (w @ v).real)
    M, M2, ad = _block_observables(N, task)
    fm, fm2, fad = _flat(M, N), _flat(M2, N), _flat(ad, N)
    out = {k: [] for k in ("variance", "trace", "purity", "divergent")}
    for v in vs:
        m = (fm @ v).real
        m2 = (fm2 @ v).real
        d = (fm @ (L @ v)).real if derivative == "total" else (fad @ v).real
        var, div = _variance(m, m2, d)
        st = PIDensity.from_vector(N, v)
        out["variance"].append(var)
        out["divergent"].append(div)
        out["trace"].append(st.trace)
        out["purity"].append(st.purity)
    return SensingSeries(np.asarray(cfg.t_grid), *(np.array(out[k]) for k in ("variance", "trace", "purity", "divergent")))


def rotated_variance(state: PIDensity, task: SensingTask, beta: float) -> float:
    """Variance after a perfect field rotation by ``beta`` (no dephasing during it)."""
    N = state.n_spins
    M, M2, ad = _block_observables(N, task)
    m = m2 = d = 0.0
    for k, b in state.blocks.items():
        U = _field_rotation_block(k, task.field_axis, beta)
        r = U @ b @ U.conj().T
        dg = degeneracy(N, k)
        m += dg * np.sum(M[k].T * r).real
        m2 += dg * np.sum(M2[k].T * r).real
        d += dg * np.sum(ad[k].T * r).real
    return _variance(m, m2, d)[0]


def _field_rotation_block(twoj, axis, beta):
    if axis == "z":
        return np.diag(rz_phases(twoj, beta))
    if axis == "y":
        return ry_matrix(twoj, beta).astype(complex)
    jx = _axis_op(twoj, "x")
    w, v = np.linalg.eigh(jx)
    return (v * np.exp(-1j * beta * w)) @ v.conj().T


# ---------------------------------------------------------------------------
# closed forms and ideal probes


def ideal_ghz_probe(n_spins: int) -> SymmetricDensity:
    """GHZ state turned by ``pi/2N`` about ``z`` so the optimal working point is ``beta = 0``."""
    rho = ghz_state(CollectiveBasis(n_spins))
    ph = rz_phases(n_spins, math.pi / (2 * n_spins))
    return SymmetricDensity(rho.basis, ph[:, None] * rho.mat * ph.conj()[None, :])


def ideal_dicke_probe(n_spins: int) -> SymmetricDensity:
    if n_spins % 2:
        raise ValueError("the half-filled Dicke state needs even N")
    return dicke_state(CollectiveBasis(n_spins), n_spins // 2)


def ghz_variance_closed_form(N, gamma_phi, J, t):
    """``(Delta Jt)^2`` of the rotated GHZ probe under a ``z`` field and local dephasing."""
    t = np.asarray(t, float)
    x = N * J * t + math.pi / 2
    e = np.exp(N * gamma_phi * t)
    num = 1 - np.cos(x) ** 2 / e
    den = np.abs(np.sin(x) + gamma_phi / (2 * J) * np.cos(x)) ** 2
    return e / N**2 * num / den


def dicke_variance_closed_form(N, gamma_phi, t, Jt):
    """Half-filled Dicke probe dephased for ``t`` and then rotated by ``Jt`` about ``y``.

    Here ``gamma_phi`` damps a coherence between strings at Hamming distance
    ``d`` as ``exp(-d gamma_phi t)``.
    """
    if N % 2 or N < 2:
        raise ValueError("N must be even and >= 2")
    e2 = np.exp(2 * gamma_phi * np.asarray(t, float))
    tan2 = np.tan(np.asarray(Jt, float)) ** 2
    num = 16 * e2 * (2 * e2 + N) + (16 * e2**2 * (N - 1) + 16 * e2 * N * (N - 2) + N * (12 - 12 * N + N * N)) * tan2
    return num / (8 * N * (2 * e2 + N) ** 2)


def dicke_jx2_closed_form(N, gamma_phi, t):
    return 0.25 * (np.exp(-2 * gamma_phi * np.asarray(t, float)) * N * N / 2 + N)


def dicke_dephase_then_rotate(N: int, gamma_phi_t: float, Jt: float) -> float:
    """Simulated counterpart of :func:`dicke_variance_closed_form`.

    The closed form's per-coherence damping ``exp(-d gamma t)`` corresponds to
    the ``sigma_z/2`` master equation at rate ``2 gamma``.
    """
    st = dephase(embed_symmetric(ideal_dicke_probe(N)), 2 * gamma_phi_t)
    return rotated_variance(st, JZ2, Jt)


# ---------------------------------------------------------------------------
# full Hilbert space oracle (N <= 8)

MAX_BRUTE_FORCE = 8


def _check_small(n):
    if n > MAX_BRUTE_FORCE:
        raise ValueError(f"brute-force Lindblad limited to N <= {MAX_BRUTE_FORCE}, got {n}")


@lru_cache(maxsize=None)
def full_spin_operators(n_spins: int):
    """Collective ``(Jx, Jy, Jz)`` on ``2^N`` (bit ``i`` set means qubit ``i`` in ``|1>``)."""
    _check_small(n_spins)
    sx = sp.csr_matrix(np.array([[0, 1], [1, 0]], dtype=complex))
    # basis order (|0>, |1>); |1> is spin up
    sy = sp.csr_matrix(np.array([[0, 1j], [-1j, 0]], dtype=complex))
    sz = sp.csr_matrix(np.diag([-1.0, 1.0]).astype(complex))
    ops = []
    for s in (sx, sy, sz):
        tot = sp.csr_matrix((2**n_spins, 2**n_spins), dtype=complex)
        for i in range(n_spins):
            tot = tot + _local(s, i, n_spins)
        ops.append((0.5 * tot).tocsr())
    return tuple(ops)


def _local(op, i, n):
    # qubit i is bit i of the basis index, i.e. factor n-1-i in the kron product
    left = sp.identity(2 ** (n - 1 - i), format="csr")
    right = sp.identity(2**i, format="csr")
    return sp.kron(sp.kron(left, op), right, format="csr")


def local_dephasing_ops(n_spins: int, gamma_phi: float):
    _check_small(n_spins)
    sz = sp.csr_matrix(np.diag([-0.5, 0.5]).astype(complex))
    return [math.sqrt(gamma_phi) * _local(sz, i, n_spins) for i in range(n_spins)]


def brute_force_lindblad(n_spins: int, H, jump_ops, rho0, t_grid, rtol=1e-12, atol=1e-13):
    """Integrate the Lindblad equation on the full ``2^N`` space (DOP853); ``H=None`` means no Hamiltonian."""
    _check_small(n_spins)
    D = 2**n_spins
    H = sp.csr_matrix((D, D), dtype=complex) if H is None else sp.csr_matrix(H)
    jumps = [sp.csr_matrix(A) for A in jump_ops]
    AdA = sum((A.conj().T @ A for A in jumps), sp.csr_matrix((D, D), dtype=complex))
    Heff = (H - 0.5j * AdA).tocsr()

    def rhs(_, y):
        r = y.reshape(D, D)
        out = -1j * (Heff @ r)
        out = out + out.conj().T
        for A in jumps:
            out = out + A @ (A @ r.conj().T).conj().T
        return out.ravel()

    t_grid = np.asarray(t_grid, float)
    if len(t_grid) == 1:
        return [np.array(rho0, dtype=complex)]
    sol = solve_ivp(rhs, (t_grid[0], t_grid[-1]), np.asarray(rho0, complex).ravel(), method="DOP853", t_eval=t_grid, rtol=rtol, atol=atol)
    if not sol.success:
        raise PropagationError(sol.message)
    return [sol.y[:, i].reshape(D, D) for i in range(len(t_grid))]


@lru_cache(maxsize=None)
def _schur_basis(n_spins: int):
    """Per sector ``2j``: array ``(d_j, 2^N, 2j+1)`` of orthonormal multiplets built by
    lowering highest-weight vectors."""
    _check_small(n_spins)
    jx, jy, jz = full_spin_operators(n_spins)
    jp = (jx + 1j * jy).toarray()
    jm = (jx - 1j * jy).toarray()
    pop = np.array([bin(i).count("1") for i in range(2**n_spins)])
    out = {}
    for k in spin_sectors(n_spins):
        n_hi = (n_spins + k) // 2
        cols = np.flatnonzero(pop == n_hi)
        rows = np.flatnonzero(pop == n_hi + 1)
        if len(rows):
            ker = null_space(jp[np.ix_(rows, cols)])
        else:
            ker = np.eye(len(cols))
        vecs = np.zeros((ker.shape[1], 2**n_spins, k + 1), dtype=complex)
        j = k / 2
        for a in range(ker.shape[1]):
            v = np.zeros(2**n_spins, dtype=complex)
            v[cols] = ker[:, a]
            m = j
            vecs[a, :, k] = v
            for idx in range(k - 1, -1, -1):
                v = jm @ v / math.sqrt(j * (j + 1) - m * (m - 1))
                m -= 1
                vecs[a, :, idx] = v
        out[k] = vecs
    return out


def pi_to_full(state: PIDensity) -> np.ndarray:
    N = state.n_spins
    basis = _schur_basis(N)
    rho = np.zeros((2**N, 2**N), dtype=complex)
    for k, b in state.blocks.items():
        for V in basis[k]:
            rho += V @ b @ V.conj().T
    return rho


def symmetric_to_full(state: SymmetricDensity) -> np.ndarray:
    return pi_to_full(embed_symmetric(state))


def trace_distance(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    return 0.5 * float(np.abs(np.linalg.eigvalsh(0.5 * (d + d.conj().T))).sum())


def brute_force_dephasing(state: SymmetricDensity | PIDensity, cfg: DephasingConfig) -> list[np.ndarray]:
    """Full-space counterpart of :func:`pi_propagate`."""
    pi = state if isinstance(state, PIDensity) else embed_symmetric(state)
    N = pi.n_spins
    ops = dict(zip("xyz", full_spin_operators(N)))
    return brute_force_lindblad(N, ops[cfg.field_axis], local_dephasing_ops(N, cfg.gamma_phi_over_J), pi_to_full(pi), cfg.t_grid)


def full_variance(rho: np.ndarray, n_spins: int, task: SensingTask, drho: np.ndarray) -> float:
    """Variance from a full-space state and its derivative along the signal."""
    jx, jy, jz = (o.toarray() for o in full_spin_operators(n_spins))
    if task.observable == "parity_x":
        M = np.ones((1, 1))
        for _ in range(n_spins):
            M = np.kron(M, np.array([[0, 1], [1, 0]]))
        M2 = np.eye(2**n_spins)
    else:
        M = jz @ jz
        M2 = M @ M
    tr = np.trace(rho).real if task.normalize else 1.0
    m = np.trace(M @ rho).real / tr
    m2 = np.trace(M2 @ rho).real / tr
    d = np.trace(M @ drho).real / tr
    return _variance(m, m2, d)[0]


def fit_log_slope(t, y) -> float:
    """Least-squares slope of ``log y`` against ``t``."""
    return float(np.polyfit(np.asarray(t, float), np.log(np.asarray(y, float)), 1)[0])


def ghz_envelope_times(N: int, t_max: float) -> np.ndarray:
    """Times where ``cos(N J t + pi/2) = 0``; there the GHZ variance equals ``e^{N gamma t}/N^2``."""
    return np.arange(0, t_max + 1e-12, math.pi / N)
