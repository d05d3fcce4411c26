"""Independent reference computations used only by the test-suite."""
from __future__ import annotations

from functools import lru_cache
from itertools import product

import numpy as np
from scipy.stats import norm


def quadrature_signature(path: np.ndarray, depth: int) -> list[np.ndarray]:
    """Iterated integrals of a piecewise-linear path by nested Gauss-Legendre quadrature.

    Integrates ``dS_J = S_{J[:-1]} dX^{J[-1]}`` segment by segment. Within a segment the
    integrand is a polynomial of degree < depth, so ``depth`` nodes are exact.
    """
    path = np.asarray(path, dtype=np.float64)
    dim = path.shape[1]
    vel = np.diff(path, axis=0)
    nodes, weights = np.polynomial.legendre.leggauss(max(depth, 1))

    @lru_cache(maxsize=None)
    def value(word: tuple[int, ...], seg: int, s: float) -> float:
        if not word:
            return 1.0
        start = 0.0 if seg == 0 else value(word, seg - 1, 1.0)
        if s == 0.0:
            return start
        rs = 0.5 * s * (nodes + 1.0)
        inner = sum(w * value(word[:-1], seg, float(r)) for w, r in zip(weights, rs))
        return start + 0.5 * s * inner * vel[seg, word[-1]]

    last = len(vel) - 1
    out = []
    for n in range(1, depth + 1):
        if last < 0:
            out.append(np.zeros(dim**n))
            continue
        out.append(np.array([value(w, last, 1.0) for w in product(range(dim), repeat=n)]))
    return out


def bs_call_price(s: float, k: float, sigma: float, tau: float) -> float:
    sd = sigma * np.sqrt(tau)
    d1 = (np.log(s / k) + 0.5 * sd**2) / sd
    return float(s * norm.cdf(d1) - k * norm.cdf(d1 - sd))


def bs_call_delta(s: float, k: float, sigma: float, tau: float) -> float:
    sd = sigma * np.sqrt(tau)
    return float(norm.cdf((np.log(s / k) + 0.5 * sd**2) / sd))


def central_differences(f, x: np.ndarray, coords, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference partials of scalar ``f`` at ``x`` for the given coordinates."""
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        out[n] = (f(xp) - f(xm)) / (2 * h)
    return out
