"""
Monte Carlo simulation of the rough Bergomi market.

The variance driver is the Riemann-Liouville process

    W^H_t = sqrt(2H) * int_0^t (t - s)^(H - 1/2) dW_s,

sampled either with the hybrid scheme (one exactly simulated near-singularity
integral per step, kernel evaluated at optimal points elsewhere) or by an exact
Cholesky factorization of the joint covariance of (W^H, W) on the grid.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .errors import ConfigError, NumericalError
from .seeding import path_generator


@dataclass(frozen=True)
class RBergomiParams:
    hurst: float = 0.1
    rho: float = -0.7
    eta: float = 1.9
    xi: float = 0.235**2
    s0: float = 1.0
    strike: float = 1.0
    maturity: float = 30 / 365
    t_fwd: float = 60 / 365

    def __post_init__(self):
        checks = [
            (0.0 < self.hurst <= 0.5, "hurst must lie in (0, 0.5]"),
            (-1.0 <= self.rho <= 1.0, "rho must lie in [-1, 1]"),
            (np.isfinite(self.eta), "eta must be finite"),
            (self.xi > 0, "xi must be positive"),
            (self.s0 > 0, "s0 must be positive"),
            (self.strike > 0, "strike must be positive"),
            (self.maturity > 0, "maturity must be positive"),
            (self.t_fwd > self.maturity, "t_fwd must exceed maturity"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"{msg} (got {asdict(self)})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int = 30
    maturity: float = 30 / 365

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.maturity <= 0:
            raise ConfigError(f"maturity must be positive, got {self.maturity}")

    @property
    def dt(self) -> float:
        return self.maturity / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.maturity, self.n_steps + 1)


class VolterraPaths(NamedTuple):
    wh: np.ndarray  # (n_paths, n_steps + 1), column 0 is zero
    dw: np.ndarray  # (n_paths, n_steps) increments of the driving Brownian motion
    near: np.ndarray | None  # hybrid scheme only: int_{t_j}^{t_j+1} (t_j+1 - s)^(H-1/2) dW_s


@dataclass
class MarketPaths:
    S: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    seed: int
    params: RBergomiParams
    grid: TimeGrid
    volterra: VolterraPaths

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    def instruments(self) -> np.ndarray:
        """Tradables stacked as ``(n_paths, n_steps + 1, 2)`` in the order (S, Theta)."""
        return np.stack([self.S, self.theta], axis=-1)

    def payoff(self) -> np.ndarray:
        return payoff_call(self.S[:, -1], self.params.strike)

    def to_csv(self, path) -> None:
        t = self.grid.times
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "step", "t", "S", "V", "Theta"])
            for p in range(self.n_paths):
                for k in range(self.grid.n_steps + 1):
                    w.writerow(
                        [p, k, repr(float(t[k])), repr(float(self.S[p, k])),
                         repr(float(self.V[p, k])), repr(float(self.theta[p, k]))]
                    )


# -- Volterra process -------------------------------------------------------------


def hybrid_pair_coefficients(hurst: float, dt: float) -> tuple[float, float, float]:
    """Map two standard normals to (dW, near-term integral): returns (sd_w, beta, sd_resid)."""
    a = hurst - 0.5
    var_w = dt
    cov = dt ** (a + 1) / (a + 1)
    var_near = dt ** (2 * a + 1) / (2 * a + 1)
    beta = cov / var_w
    resid = max(var_near - beta * cov, 0.0)
    return np.sqrt(var_w), beta, np.sqrt(resid)


@lru_cache(maxsize=64)
def hybrid_kernel_matrix(hurst: float, n_steps: int, dt: float) -> np.ndarray:
    """Matrix ``C`` with ``(dW @ C)[:, i-1] = sum_{m>=2} g(b_m dt) dW_{i-m}``."""
    a = hurst - 0.5
    m = np.arange(2, n_steps + 1, dtype=np.float64)
    if a == 0.0:
        g = np.ones_like(m)
    else:
        b = ((m ** (a + 1) - (m - 1) ** (a + 1)) / (a + 1)) ** (1.0 / a)
        g = (b * dt) ** a
    C = np.zeros((n_steps, n_steps))
    for j in range(n_steps):
        for i in range(j + 2, n_steps + 1):
            C[j, i - 1] = g[i - j - 2]
    C.setflags(write=False)
    return C


def _rl_cov(hurst: float, u: float, v: float) -> float:
    """2H * int_0^min(u,v) (u-s)^a (v-s)^a ds by adaptive quadrature with an algebraic weight."""
    a = hurst - 0.5
    lo, hi = min(u, v), max(u, v)
    if a == 0.0:
        return lo
    if lo == hi:
        val, _ = integrate.quad(lambda s: 1.0, 0.0, lo, weight="alg", wvar=(0.0, 2 * a))
    else:
        val, _ = integrate.quad(lambda s: (hi - s) ** a, 0.0, lo, weight="alg", wvar=(0.0, a),
                                epsabs=1e-14, epsrel=1e-12)
    return 2 * hurst * val


def _rl_cross(hurst: float, u: float, v: float) -> float:
    """Cov(W^H_u, W_v) = sqrt(2H) * int_0^min(u,v) (u-s)^a ds."""
    a = hurst - 0.5
    if a == 0.0:
        return min(u, v)
    if v >= u:
        val, _ = integrate.quad(lambda s: 1.0, 0.0, u, weight="alg", wvar=(0.0, a))
    else:
        val, _ = integrate.quad(lambda s: (u - s) ** a, 0.0, v, epsabs=1e-14, epsrel=1e-12)
    return np.sqrt(2 * hurst) * val


@lru_cache(maxsize=32)
def volterra_covariance(hurst: float, n_steps: int, maturity: float) -> np.ndarray:
    """Joint covariance of (W^H_{t_1..t_n}, W_{t_1..t_n})."""
    t = TimeGrid(n_steps, maturity).times[1:]
    n = n_steps
    cov = np.empty((2 * n, 2 * n))
    for i in range(n):
        for j in range(i, n):
            cov[i, j] = cov[j, i] = _rl_cov(hurst, t[i], t[j])
            cov[n + i, n + j] = cov[n + j, n + i] = min(t[i], t[j])
        for j in range(n):
            cov[i, n + j] = cov[n + j, i] = _rl_cross(hurst, t[i], t[j])
    cov.setflags(write=False)
    return cov


@lru_cache(maxsize=32)
def volterra_cholesky(hurst: float, n_steps: int, maturity: float) -> np.ndarray:
    cov = volterra_covariance(hurst, n_steps, maturity)
    jitter = 1e-12
    while jitter <= 1e-8 * (1 + 1e-9):
        try:
            L = np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
            L.setflags(write=False)
            return L
        except np.linalg.LinAlgError:
            jitter *= 10
    raise NumericalError(f"Volterra covariance not positive definite (H={hurst}, n={n_steps})")


def simulate_volterra(hurst: float, grid: TimeGrid, gaussians: np.ndarray, method: str = "hybrid") -> VolterraPaths:
    """Discretized W^H from standard normals.

    ``hybrid`` expects ``gaussians`` of shape ``(n_paths, n_steps, 2)``; ``cholesky``
    expects ``(n_paths, 2 * n_steps)``.
    """
    g = np.asarray(gaussians, dtype=np.float64)
    n = grid.n_steps
    if method == "hybrid":
        if g.shape[1:] != (n, 2):
            raise ValueError(f"hybrid needs gaussians of shape (n_paths, {n}, 2), got {g.shape}")
        sd_w, beta, sd_r = hybrid_pair_coefficients(hurst, grid.dt)
        dw = sd_w * g[..., 0]
        near = beta * dw + sd_r * g[..., 1]
        body = near + dw @ hybrid_kernel_matrix(hurst, n, grid.dt)
        wh = np.zeros((g.shape[0], n + 1))
        wh[:, 1:] = np.sqrt(2 * hurst) * body
        return VolterraPaths(wh, dw, near)
    if method == "cholesky":
        if g.shape[1:] != (2 * n,):
            raise ValueError(f"cholesky needs gaussians of shape (n_paths, {2 * n}), got {g.shape}")
        x = g @ volterra_cholesky(hurst, n, grid.maturity).T
        wh = np.zeros((g.shape[0], n + 1))
        wh[:, 1:] = x[:, :n]
        w = np.concatenate([np.zeros((g.shape[0], 1)), x[:, n:]], axis=1)
        return VolterraPaths(wh, np.diff(w, axis=1), None)
    raise ValueError(f"unknown method {method!r}")


# -- market -----------------------------------------------------------------------


def draw_normals(seed: int, n_paths: int, per_path: int, threads: int = 1) -> np.ndarray:
    """``(n_paths, per_path)`` standard normals; row ``i`` comes from substream ``(seed, i)``."""
    out = np.empty((n_paths, per_path))

    def fill(rows: range) -> None:
        for i in rows:
            out[i] = path_generator(seed, i).standard_normal(per_path)

    if threads <= 1 or n_paths < 2:
        fill(range(n_paths))
    else:
        bounds = np.linspace(0, n_paths, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, [range(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]))
    return out


def variance_from_volterra(params: RBergomiParams, grid: TimeGrid, wh: np.ndarray) -> np.ndarray:
    t = grid.times
    return params.xi * np.exp(params.eta * wh - 0.5 * params.eta**2 * t ** (2 * params.hurst))


def simulate_market(
    params: RBergomiParams,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    method: str = "hybrid",
    threads: int = 1,
) -> MarketPaths:
    """Simulate prices, variances and the forward-variance instrument.

    The price follows a log-Euler step driven by ``rho dW + sqrt(1 - rho^2) dW_perp``,
    where ``dW`` also drives W^H; the forward variance for maturity ``t_fwd`` follows
    ``Theta_{k+1} = Theta_k (1 + sqrt(2H) eta (t_fwd - t_k)^(H-1/2) dW_k)``.
    """
    if n_paths < 1:
        raise ConfigError(f"n_paths must be >= 1, got {n_paths}")
    n = grid.n_steps
    H = params.hurst
    z = draw_normals(seed, n_paths, 3 * n, threads)
    if method == "hybrid":
        vol = simulate_volterra(H, grid, z[:, : 2 * n].reshape(n_paths, n, 2), method)
    else:
        vol = simulate_volterra(H, grid, z[:, : 2 * n], method)
    dw_perp = np.sqrt(grid.dt) * z[:, 2 * n:]
    t = grid.times

    V = variance_from_volterra(params, grid, vol.wh)
    db = params.rho * vol.dw + np.sqrt(1 - params.rho**2) * dw_perp
    log_inc = np.sqrt(V[:, :-1]) * db - 0.5 * V[:, :-1] * grid.dt
    S = np.empty((n_paths, n + 1))
    S[:, 0] = params.s0
    S[:, 1:] = params.s0 * np.exp(np.cumsum(log_inc, axis=1))

    vol_coef = np.sqrt(2 * H) * params.eta * (params.t_fwd - t[:-1]) ** (H - 0.5)
    theta = np.empty((n_paths, n + 1))
    theta[:, 0] = params.xi
    theta[:, 1:] = params.xi * np.cumprod(1.0 + vol_coef * vol.dw, axis=1)

    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(V)) and np.all(np.isfinite(theta))):
        raise NumericalError("non-finite values in simulated market")
    return MarketPaths(S, V, theta, seed, params, grid, vol)


def payoff_call(s_t, strike: float) -> np.ndarray:
    return np.maximum(np.asarray(s_t, dtype=np.float64) - strike, 0.0)


def extract_features(paths: MarketPaths, with_time: bool = False) -> np.ndarray:
    """Per-date model inputs ``(n_paths, n_steps, d_feat)``: moneyness, volatility[, t/T].

    Row ``k`` only uses values observed at ``t_k``.
    """
    n = paths.grid.n_steps
    cols = [paths.S[:, :n] / paths.params.strike, np.sqrt(paths.V[:, :n])]
    if with_time:
        tt = paths.grid.times[:n] / paths.grid.maturity
        cols.append(np.broadcast_to(tt, (paths.n_paths, n)))
    return np.stack(cols, axis=-1)
