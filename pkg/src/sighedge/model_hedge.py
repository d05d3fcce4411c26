"""
Model hedge under rough Bergomi by inner Monte Carlo.

At date t_k the option price is a function u(t_k, S_k, Theta^{t_k}) of the spot and
of the Gaussian forward curve

    Theta^{t_k}_{t_i} = eta * E[W^H_{t_i} | F_{t_k}],    i > k,

which in the hybrid discretization is an exact partial sum over the stored driver
history. The hedge has two legs:

* spot delta: central difference of u in S (relative bump, common random numbers);
* pathwise Gateaux term: central difference of u along the curve direction
  a_i = (t_i - t_k)^(H - 1/2), scaled by (T - t_k)^(1/2 - H) to a position in the
  Gaussian instrument Theta^t_T, and converted to a position in the simulated
  forward-variance instrument of maturity t_fwd.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import NumericalError
from .rbergomi import MarketPaths, RBergomiParams, TimeGrid, hybrid_kernel_matrix, hybrid_pair_coefficients
from .seeding import INNER, derive_seed


@dataclass(frozen=True)
class ModelHedgeConfig:
    n_inner: int = 4096
    bump: float = 1e-4
    seed: int = 0
    martingale_correction: bool = True
    chunk_elements: int = 4_000_000

    def __post_init__(self):
        if self.n_inner < 2 or self.bump <= 0 or self.chunk_elements < 1:
            raise ValueError(f"invalid model-hedge config {self}")


@dataclass(frozen=True)
class HedgeState:
    """Information at grid date ``k``; ``curve[i]`` is Theta^{t_k} at ``t_{k+1+i}`` for ``i < n-1-k``."""

    k: int
    S: float
    V: float
    theta_fwd: float
    curve: np.ndarray


class HedgeRatios(NamedTuple):
    delta_s: np.ndarray
    delta_theta: np.ndarray  # position in Theta^t_T (Gaussian instrument), per the perfect-hedge formula
    delta_fwd: np.ndarray  # position in the traded forward variance of maturity t_fwd
    gateaux: np.ndarray
    price: np.ndarray
    delta_s_se: np.ndarray
    gateaux_se: np.ndarray
    price_se: np.ndarray


def conditional_curve(market: MarketPaths, k: int) -> np.ndarray:
    """``(n_paths, n_steps - 1 - k)`` Gaussian forward curve at date ``k`` from the stored drivers."""
    vol = market.volterra
    if vol.near is None:
        raise ValueError("model hedge needs hybrid-scheme drivers")
    p, g = market.params, market.grid
    n = g.n_steps
    C = hybrid_kernel_matrix(p.hurst, n, g.dt)
    # columns i-1 for i = k+1 .. n-1
    part = vol.dw[:, :k] @ C[:k, k:n - 1]
    return p.eta * np.sqrt(2 * p.hurst) * part


def state_at(market: MarketPaths, path: int, k: int) -> HedgeState:
    return HedgeState(k, float(market.S[path, k]), float(market.V[path, k]),
                      float(market.theta[path, k]), conditional_curve(market, k)[path])


def _inner_normals(cfg: ModelHedgeConfig, k: int, n_rem: int) -> np.ndarray:
    rng = np.random.default_rng(derive_seed(cfg.seed, INNER, k))
    return rng.standard_normal((cfg.n_inner, n_rem, 3))


def _terminal_prices(k, S, V, curve, params, grid, dw, near, dw_perp, martingale):
    """Terminal spot for each outer state (rows) and inner path (cols)."""
    n = grid.n_steps
    H, eta = params.hurst, params.eta
    t = grid.times
    n_rem = n - k
    C = hybrid_kernel_matrix(H, n, grid.dt)
    # fresh Volterra part at t_i for i = k+1..n-1
    if n_rem > 1:
        fresh = near[:, : n_rem - 1] + dw[:, : n_rem - 1] @ C[k: n - 1, k: n - 1]
        fresh = np.sqrt(2 * H) * fresh
        expo = curve[:, None, :] + eta * fresh[None] - 0.5 * eta**2 * t[k + 1: n] ** (2 * H)
        v_future = params.xi * np.exp(expo)
        v_all = np.concatenate([np.broadcast_to(V[:, None, None], v_future.shape[:2] + (1,)), v_future], axis=-1)
    else:
        v_all = np.broadcast_to(V[:, None, None], (len(S), dw.shape[0], 1))
    db = params.rho * dw + np.sqrt(1 - params.rho**2) * dw_perp
    log_growth = np.sum(np.sqrt(v_all) * db[None] - 0.5 * v_all * grid.dt, axis=-1)
    growth = np.exp(log_growth)
    if martingale:
        growth = growth / growth.mean(axis=1, keepdims=True)
    return S[:, None] * growth


def model_hedge_batch(k: int, S, V, theta_fwd, curve, params: RBergomiParams, grid: TimeGrid,
                      cfg: ModelHedgeConfig = ModelHedgeConfig()) -> HedgeRatios:
    """Hedge ratios for many states at the same date ``k``; arrays are per state."""
    n = grid.n_steps
    if not 0 <= k < n:
        raise ValueError(f"model hedge needs t_k < T, got k={k} with n_steps={n}")
    S = np.atleast_1d(np.asarray(S, dtype=np.float64))
    V = np.atleast_1d(np.asarray(V, dtype=np.float64))
    theta_fwd = np.atleast_1d(np.asarray(theta_fwd, dtype=np.float64))
    curve = np.asarray(curve, dtype=np.float64).reshape(len(S), n - 1 - k)

    n_rem = n - k
    z = _inner_normals(cfg, k, n_rem)
    sd_w, beta, sd_r = hybrid_pair_coefficients(params.hurst, grid.dt)
    dw = sd_w * z[..., 0]
    near = beta * dw + sd_r * z[..., 1]
    dw_perp = np.sqrt(grid.dt) * z[..., 2]

    t_k = grid.times[k]
    direction = (grid.times[k + 1: n] - t_k) ** (params.hurst - 0.5)
    h = cfg.bump
    K = params.strike
    mart = cfg.martingale_correction

    def terminal(s, v, c):
        return _terminal_prices(k, s, v, c, params, grid, dw, near, dw_perp, mart)

    rows = max(1, cfg.chunk_elements // (cfg.n_inner * n_rem))
    out = {name: np.empty(len(S)) for name in ("price", "price_se", "ds", "ds_se", "g", "g_se")}
    for lo in range(0, len(S), rows):
        sl = slice(lo, lo + rows)
        s, v, c = S[sl], V[sl], curve[sl]
        s_T = terminal(s, v, c)
        base = np.maximum(s_T - K, 0.0)
        # terminal spot is linear in the current spot, so spot bumps rescale the same paths
        d_s = (np.maximum(s_T * (1 + h) - K, 0.0) - np.maximum(s_T * (1 - h) - K, 0.0)) / (2 * h * s[:, None])
        up = np.maximum(terminal(s, v, c + h * direction) - K, 0.0)
        down = np.maximum(terminal(s, v, c - h * direction) - K, 0.0)
        d_g = (up - down) / (2 * h)
        for name, arr in (("price", base), ("ds", d_s), ("g", d_g)):
            out[name][sl] = arr.mean(axis=1)
            out[name + "_se"][sl] = arr.std(axis=1, ddof=1) / np.sqrt(cfg.n_inner)

    tau = grid.maturity - t_k
    delta_theta = tau ** (0.5 - params.hurst) * out["g"]
    delta_fwd = out["g"] / (theta_fwd * (params.t_fwd - t_k) ** (params.hurst - 0.5))
    res = HedgeRatios(out["ds"], delta_theta, delta_fwd, out["g"], out["price"],
                      out["ds_se"], out["g_se"], out["price_se"])
    for arr in res:
        if not np.all(np.isfinite(arr)):
            raise NumericalError("non-finite value in inner Monte Carlo")
    return res


def model_hedge(state: HedgeState, params: RBergomiParams, grid: TimeGrid,
                cfg: ModelHedgeConfig = ModelHedgeConfig()) -> HedgeRatios:
    """Hedge ratios (spot, forward variance) for a single state; fields are scalars."""
    res = model_hedge_batch(state.k, state.S, state.V, state.theta_fwd, state.curve[None], params, grid, cfg)
    return HedgeRatios(*(float(a[0]) for a in res))


class ModelHedgeStrategy:
    """``market -> deltas`` using the model hedge at every date of every path."""

    def __init__(self, cfg: ModelHedgeConfig = ModelHedgeConfig()):
        self.cfg = cfg

    def __call__(self, market: MarketPaths) -> np.ndarray:
        n = market.grid.n_steps
        deltas = np.empty((market.n_paths, n, 2))
        for k in range(n):
            r = model_hedge_batch(k, market.S[:, k], market.V[:, k], market.theta[:, k],
                                  conditional_curve(market, k), market.params, market.grid, self.cfg)
            deltas[:, k, 0] = r.delta_s
            deltas[:, k, 1] = r.delta_fwd
        return deltas
