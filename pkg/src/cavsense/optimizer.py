"""Multi-start BFGS minimisation of the protocol variance."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .channel import NoiseRates, delta_band
from .dicke import CollectiveBasis
from .protocol import ADIABATIC, DIVERGENT_VARIANCE, Duration, ProtocolParams, SensingTask, as_duration, evaluate


# ---------------------------------------------------------------------------
# BFGS


@dataclass
class BFGSResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str
    history: list[float] = field(default_factory=list)


def _cubic_min(a0, f0, d0, a1, f1, d1):
    if not all(map(math.isfinite, (f0, d0, f1, d1))):
        return None
    d_1 = d0 + d1 - 3 * (f0 - f1) / (a0 - a1)
    disc = d_1 * d_1 - d0 * d1
    if disc < 0:
        return None
    d_2 = math.copysign(math.sqrt(disc), a1 - a0)
    den = d1 - d0 + 2 * d_2
    if den == 0:
        return None
    return a1 - (a1 - a0) * (d1 + d_2 - d_1) / den


def line_search_wolfe(fun, x, f0, g0, p, c1=1e-4, c2=0.9, alpha0=1.0, max_iter=40):
    """Strong-Wolfe line search (bracketing then cubic-interpolating zoom).

    Returns ``(alpha, f, g, ok)``; on failure the best Armijo point found, or
    ``alpha = 0`` if there is none.
    """
    d0 = float(g0 @ p)
    best = (0.0, f0, g0)

    def phi(a):
        f, g = fun(x + a * p)
        return f, g, float(g @ p)

    def armijo(a, f):
        return f <= f0 + c1 * a * d0

    def zoom(lo, hi):
        nonlocal best
        (a_lo, f_lo, g_lo, d_lo), (a_hi, f_hi, _, d_hi) = lo, hi
        for _ in range(max_iter):
            width = a_hi - a_lo
            a = _cubic_min(a_lo, f_lo, d_lo, a_hi, f_hi, d_hi)
            if a is None or not (min(a_lo, a_hi) + 0.1 * abs(width) <= a <= max(a_lo, a_hi) - 0.1 * abs(width)):
                a = a_lo + 0.5 * width
            f, g, d = phi(a)
            if not np.isfinite(f) or not armijo(a, f) or f >= f_lo:
                a_hi, f_hi, d_hi = a, f if np.isfinite(f) else np.inf, d
            else:
                if f < best[1]:
                    best = (a, f, g)
                if abs(d) <= -c2 * d0:
                    return a, f, g, True
                if d * (a_hi - a_lo) >= 0:
                    a_hi, f_hi, d_hi = a_lo, f_lo, d_lo
                a_lo, f_lo, g_lo, d_lo = a, f, g, d
            if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
                break
        return best[0], best[1], best[2], False

    prev = (0.0, f0, g0, d0)
    a = alpha0
    for i in range(max_iter):
        f, g, d = phi(a)
        if not np.isfinite(f) or not armijo(a, f) or (i > 0 and f >= prev[1]):
            if not np.isfinite(f):
                f = np.inf
            return zoom(prev, (a, f, g, d))
        if f < best[1]:
            best = (a, f, g)
        if abs(d) <= -c2 * d0:
            return a, f, g, True
        if d >= 0:
            return zoom((a, f, g, d), prev)
        prev = (a, f, g, d)
        a *= 2.0
    return best[0], best[1], best[2], False


def bfgs_minimize(fun, x0, max_iters=1000, gtol=1e-8, c1=1e-4, c2=0.9) -> BFGSResult:
    """Dense inverse-Hessian BFGS; ``fun(x)`` returns ``(f, grad)``.

    Stops when ``max|grad| < gtol``.  A failed line search resets the Hessian
    once; a second failure ends the run with the best point so far.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    f, g = fun(x)
    history = [f]
    H = np.eye(n)
    fresh = True
    msg = "max_iters reached"
    converged = False
    k = 0
    f_prev = None
    for k in range(max_iters):
        if np.max(np.abs(g)) < gtol:
            converged, msg = True, "gradient tolerance reached"
            break
        p = -H @ g
        if g @ p >= 0:
            H, fresh = np.eye(n), True
            p = -g
        if f_prev is None:
            alpha0 = min(1.0, 1.0 / max(np.max(np.abs(g)), 1e-300))
        else:
            # step guess from the last decrease, as in Nocedal & Wright (3.60)
            alpha0 = min(1.0, 2.02 * (f - f_prev) / float(g @ p))
            alpha0 = alpha0 if alpha0 > 0 else 1.0
        alpha, f_new, g_new, ok = line_search_wolfe(fun, x, f, g, p, c1, c2, alpha0)
        if alpha == 0.0:
            if fresh:
                msg = "line search failed"
                break
            H, fresh = np.eye(n), True
            continue
        s = alpha * p
        y = g_new - g
        x = x + s
        f_prev = f
        f, g = f_new, g_new
        history.append(f)
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            r = 1.0 / sy
            Hy = H @ y
            H = H - r * (np.outer(s, Hy) + np.outer(Hy, s)) + (r * r * float(y @ Hy) + r) * np.outer(s, s)
            fresh = False
        if not ok and abs(history[-2] - f) <= 1e-15 * max(1.0, abs(f)):
            msg = "no further progress"
            break
    else:
        k = max_iters
    if np.max(np.abs(g)) < gtol:
        converged, msg = True, "gradient tolerance reached"
    return BFGSResult(x, f, g, k, converged, msg, history)


# ---------------------------------------------------------------------------
# protocol optimisation


@dataclass
class OptimizerConfig:
    max_iters: int = 2000
    gradient_tolerance: float = 1e-9
    c1: float = 1e-4
    c2: float = 0.9
    n_restarts: int | None = None
    rng_seed: int = 0
    duration: float | None = None
    delta_range: tuple[float, float] = (0.05, 20.0)
    # optional: draw the initial |delta| in the band of a pulse this long even in the adiabatic limit
    sampling_T: float | None = None
    # starts that land on the divergent sentinel have zero gradient and are redrawn
    max_redraws: int = 50
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")
        if self.n_restarts is not None and self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")

    def restarts_for(self, n_spins: int) -> int:
        return self.n_restarts if self.n_restarts is not None else max(n_spins, 20)


def _finite_band(phi, T, cap):
    lo, hi = delta_band(phi, T)
    hi = min(hi, cap)
    return lo, max(hi, lo * (1 + 1e-9))


def apply_sign_and_bounds(x_raw, duration=ADIABATIC, delta_cap: float = math.inf) -> ProtocolParams:
    """Physical parameters from an optimiser vector.

    The sign of each ``delta`` is set to the sign of its ``phi``; for finite
    pulses ``|delta|`` is also clamped into the allowed band.
    """
    x = np.array(x_raw, dtype=float)
    duration = as_duration(duration)
    P = (len(x) - 4) // 5
    for j in range(P):
        k = 3 + 5 * j
        phi, delta = x[k + 3], x[k + 4]
        sgn = 1.0 if phi >= 0 else -1.0
        mag = abs(delta)
        if not duration.adiabatic:
            lo, hi = _finite_band(phi, duration.T, delta_cap)
            mag = min(max(mag, lo * (1 + 1e-9)), hi * (1 - 1e-9))
        x[k + 4] = sgn * mag
    return ProtocolParams.from_vector(x)


class ProtocolObjective:
    """``x -> (variance, gradient)`` for a fixed spin number, task and noise.

    Adiabatic mode works directly on the physical vector (the gate depends on
    ``|phi/delta|`` and ``|phi delta|``, so signs need no constraint).  Finite mode
    maps each ``delta`` entry through a logistic onto the allowed band.
    """

    def __init__(self, basis: CollectiveBasis, task: SensingTask, rates: NoiseRates, duration=ADIABATIC, delta_cap: float = 20.0):
        self.basis = basis
        self.task = task
        self.rates = rates
        self.duration = as_duration(duration)
        self.delta_cap = delta_cap
        self.n_evals = 0

    def to_physical(self, u):
        u = np.asarray(u, dtype=float)
        if self.duration.adiabatic:
            return u.copy(), None
        x = u.copy()
        P = (len(u) - 4) // 5
        jac = []
        for j in range(P):
            k = 3 + 5 * j
            phi, z = u[k + 3], u[k + 4]
            sgn = 1.0 if phi >= 0 else -1.0
            lo, hi = _finite_band(phi, self.duration.T, self.delta_cap)
            sig = 0.5 * (1 + math.tanh(0.5 * z))
            x[k + 4] = sgn * (lo + (hi - lo) * sig)
            ddz = sgn * (hi - lo) * sig * (1 - sig)
            capped = hi >= self.delta_cap or phi == 0
            dhi = 0.0 if capped else -3 * self.duration.T * sgn / (32 * phi * phi)
            jac.append((k, ddz, sgn * sig * dhi))
        return x, jac

    def from_physical(self, x):
        """Inverse of :meth:`to_physical` (deltas clamped into the band first)."""
        u = np.asarray(x, dtype=float).copy()
        if self.duration.adiabatic:
            return u
        P = (len(u) - 4) // 5
        for j in range(P):
            k = 3 + 5 * j
            lo, hi = _finite_band(u[k + 3], self.duration.T, self.delta_cap)
            sig = (min(max(abs(u[k + 4]), lo), hi) - lo) / (hi - lo)
            sig = min(max(sig, 1e-6), 1 - 1e-6)
            u[k + 4] = math.log(sig / (1 - sig))
        return u

    def __call__(self, u):
        self.n_evals += 1
        x, jac = self.to_physical(u)
        params = ProtocolParams.from_vector(x)
        try:
            r = evaluate(self.basis, params, self.rates, self.task, self.duration)
        except (ValueError, FloatingPointError, ZeroDivisionError):
            return np.inf, np.zeros_like(x)
        g = r.gradient
        if jac:
            g = g.copy()
            for k, ddz, ddphi in jac:
                gd = g[k + 4]
                g[k + 4] = gd * ddz
                g[k + 3] += gd * ddphi
        return r.variance, g


@dataclass
class RestartRecord:
    seed: list[int]
    initial: list[float]
    final: list[float]
    variance: float
    iterations: int
    converged: bool
    message: str


@dataclass
class RestartReport:
    n_spins: int
    task: str
    kappa: float
    gamma: float
    n_steps: int
    duration: float | None
    config: dict
    records: list[RestartRecord]
    best_index: int
    all_diverged: bool = False

    @property
    def best(self) -> RestartRecord:
        return self.records[self.best_index]

    @property
    def best_variance(self) -> float:
        return self.best.variance

    @property
    def best_params(self) -> ProtocolParams:
        return ProtocolParams.from_vector(self.best.final)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["best_params"] = self.best_params.to_dict()
        d["best_variance"] = self.best_variance
        return d


def random_initial(rng: np.random.Generator, n_steps: int, delta_range=(0.05, 20.0), duration=ADIABATIC, sampling_T: float | None = None) -> np.ndarray:
    """Angles uniform in [-pi, pi], phi uniform in [-pi/2, pi/2], |delta| log-uniform; beta = 0.

    ``|delta|`` is drawn from the pulse band of ``duration`` (or of ``sampling_T``
    in the adiabatic limit) intersected with ``delta_range``.
    """
    duration = as_duration(duration)
    T = sampling_T if duration.adiabatic else duration.T
    x = [*rng.uniform(-math.pi, math.pi, 3)]
    for _ in range(n_steps):
        th = rng.uniform(-math.pi, math.pi, 3)
        phi = rng.uniform(-math.pi / 2, math.pi / 2)
        lo, hi = delta_range
        if T is not None:
            blo, bhi = _finite_band(phi, T, hi)
            lo, hi = max(lo, blo), min(hi, bhi)
        delta = math.copysign(math.exp(rng.uniform(math.log(lo), math.log(hi))), phi)
        x += [*th, phi, delta]
    x.append(0.0)
    return np.array(x)


def _polish(basis, task, rates, cfg: OptimizerConfig, x0):
    """BFGS from ``x0``: adiabatic first, then (finite mode) refined at the pulse duration."""
    duration = as_duration(cfg.duration)
    cap = cfg.delta_range[1]
    obj = ProtocolObjective(basis, task, rates, ADIABATIC, cap)
    res = bfgs_minimize(obj, x0, cfg.max_iters, cfg.gradient_tolerance, cfg.c1, cfg.c2)
    x, iters = res.x, res.iterations
    f, conv, msg = res.f, res.converged, res.message
    if not duration.adiabatic:
        fobj = ProtocolObjective(basis, task, rates, duration, cap)
        best = None
        # refine the adiabatic optimum and, independently, the raw start; keep the better
        for start in (x, x0):
            u0 = fobj.from_physical(apply_sign_and_bounds(start, duration, cap).to_vector())
            fres = bfgs_minimize(fobj, u0, cfg.max_iters, cfg.gradient_tolerance, cfg.c1, cfg.c2)
            iters += fres.iterations
            if best is None or fres.f < best.f:
                best = fres
        x = fobj.to_physical(best.x)[0]
        f, conv, msg = best.f, best.converged, best.message
    final = apply_sign_and_bounds(x, duration, cap).to_vector()
    if not np.isfinite(f):
        f = math.inf
    return final, float(f), int(iters), bool(conv), msg


def _run_restart(basis, task, rates, n_steps, cfg: OptimizerConfig, k: int) -> RestartRecord:
    seed = [int(cfg.rng_seed), k]
    rng = np.random.default_rng(seed)
    obj = ProtocolObjective(basis, task, rates, ADIABATIC, cfg.delta_range[1])
    for _ in range(cfg.max_redraws + 1):
        x0 = random_initial(rng, n_steps, cfg.delta_range, cfg.duration, cfg.sampling_T)
        if obj(x0)[0] < DIVERGENT_VARIANCE:
            break
    final, f, iters, conv, msg = _polish(basis, task, rates, cfg, x0)
    return RestartRecord(seed, x0.tolist(), final.tolist(), f, iters, conv, msg)


def multi_start(basis: CollectiveBasis, task: SensingTask, rates: NoiseRates, n_steps: int, cfg: OptimizerConfig | None = None, warm_starts=()) -> RestartReport:
    """Independent seeded BFGS runs; the restart ``k`` draws from ``default_rng([seed, k])``.

    ``warm_starts`` are extra initial vectors (e.g. optima of a neighbouring scan
    point) polished after the random restarts.
    """
    if n_steps < 1:
        raise ValueError("need at least one protocol step")
    cfg = cfg or OptimizerConfig()
    n = cfg.restarts_for(basis.n_spins)
    records = _map(cfg.threads, lambda k: _run_restart(basis, task, rates, n_steps, cfg, k), range(n))
    cfg_echo = asdict(cfg)
    cfg_echo["n_restarts"] = n
    rep = RestartReport(basis.n_spins, task.observable, rates.kappa, rates.gamma, n_steps, as_duration(cfg.duration).T, cfg_echo, records, 0)
    return add_warm_starts(rep, basis, task, rates, cfg, warm_starts)


def add_warm_starts(report: RestartReport, basis, task, rates, cfg: OptimizerConfig, starts) -> RestartReport:
    """Polish ``starts`` and append them to ``report``; warm records carry seed ``[seed, -1-i]``."""
    starts = [np.asarray(w, dtype=float) for w in starts]
    for w in starts:
        if len(w) != 4 + 5 * report.n_steps:
            raise ValueError(f"warm start has length {len(w)}, expected {4 + 5 * report.n_steps}")
    done = sum(1 for r in report.records if r.seed[1] < 0)

    def job(i):
        final, f, iters, conv, msg = _polish(basis, task, rates, cfg, starts[i])
        return RestartRecord([int(cfg.rng_seed), -1 - done - i], starts[i].tolist(), final.tolist(), f, iters, conv, msg)

    records = report.records + _map(cfg.threads, job, range(len(starts)))
    variances = [r.variance for r in records]
    return replace(
        report,
        records=records,
        best_index=int(np.argmin(variances)),
        all_diverged=all(not math.isfinite(v) or v >= DIVERGENT_VARIANCE for v in variances),
    )


def _map(threads, fn, items):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(k) for k in items]
