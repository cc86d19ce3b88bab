import numpy as np


def central_difference(f, x, h=1e-5, order=2):
    """Central differences; ``order=4`` uses the five-point stencil."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        if order == 2:
            g[i] = (f(x + e) - f(x - e)) / (2 * h)
        else:
            g[i] = (8 * (f(x + e) - f(x - e)) - (f(x + 2 * e) - f(x - 2 * e))) / (12 * h)
    return g


def random_protocol_vector(rng, n_steps, T=None):
    """Random physical vector with delta inside the pulse band for duration ``T``."""
    x = list(rng.uniform(-np.pi, np.pi, 3))
    for _ in range(n_steps):
        phi = rng.uniform(0.3, 1.5) * rng.choice([-1, 1])
        hi = 3.0 if T is None else min(3.0, 3 * T / (32 * abs(phi)))
        lo = 0.2 if T is None else max(0.2, 2 * np.pi / T)
        delta = np.sign(phi) * rng.uniform(lo * 1.1, hi * 0.9)
        x += [*rng.uniform(-np.pi, np.pi, 3), phi, delta]
    x.append(rng.uniform(-0.2, 0.2))
    return np.array(x)
