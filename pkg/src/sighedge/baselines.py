"""Comparison hedgers, the Black-Scholes delta, and strategy evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import norm
from torch import nn

from .errors import ConfigError
from .rbergomi import MarketPaths, extract_features
from .sigformer import Encoder, SigFormer, SigFormerConfig, glorot_, signature_tokens
from .signature import signature_length


class SemiRecurrentHedger(nn.Module):
    """delta_k = F(X_k, delta_{k-1}); one shared two-hidden-layer ReLU network across dates."""

    def __init__(self, d_feat: int = 2, d_hedge: int = 2, hidden: int | None = None):
        super().__init__()
        hidden = hidden or d_hedge + 15
        self.d_hedge = d_hedge
        self.net = nn.Sequential(
            nn.Linear(d_feat + d_hedge, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, d_hedge),
        )
        for layer in self.net:
            if isinstance(layer, nn.Linear):
                glorot_(layer.weight)
                nn.init.zeros_(layer.bias)
        nn.init.zeros_(self.net[-1].weight)

    def forward(self, features) -> torch.Tensor:
        x = torch.as_tensor(features, dtype=self.net[0].weight.dtype)
        prev = x.new_zeros(x.shape[:-2] + (self.d_hedge,))
        out = []
        for k in range(x.shape[-2]):
            prev = self.net(torch.cat([x[..., k, :], prev], dim=-1))
            out.append(prev)
        return torch.stack(out, dim=-2)


class RecurrentHedger(nn.Module):
    """delta_k = F(X_k, delta_{k-1}, H_{k-1}) with a stack of ReLU recurrent cells."""

    def __init__(self, d_feat: int = 2, d_hedge: int = 2, hidden: int = 128, n_layers: int = 5):
        super().__init__()
        self.d_hedge = d_hedge
        self.hidden = hidden
        self.cells = nn.ModuleList(
            nn.RNNCell(d_feat + d_hedge if i == 0 else hidden, hidden, nonlinearity="relu")
            for i in range(n_layers)
        )
        self.head = nn.Linear(hidden, d_hedge)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features) -> torch.Tensor:
        x = torch.as_tensor(features, dtype=self.head.weight.dtype)
        batch = x.shape[:-2]
        flat = x.reshape(-1, *x.shape[-2:])
        states = [flat.new_zeros(flat.shape[0], self.hidden) for _ in self.cells]
        prev = flat.new_zeros(flat.shape[0], self.d_hedge)
        out = []
        for k in range(flat.shape[1]):
            h = torch.cat([flat[:, k], prev], dim=-1)
            for i, cell in enumerate(self.cells):
                states[i] = h = cell(h, states[i])
            prev = self.head(h)
            out.append(prev)
        return torch.stack(out, dim=1).reshape(*batch, flat.shape[1], self.d_hedge)


class SigLinear(nn.Module):
    """delta_k = <Sig(X_{0:k}), W> over all levels including the constant level 0."""

    def __init__(self, d_feat: int = 2, d_hedge: int = 2, sig_depth: int = 3):
        super().__init__()
        self.sig_depth = sig_depth
        self.weight = nn.Parameter(torch.zeros(signature_length(d_feat, sig_depth, with_level0=True), d_hedge))

    def features_to_sig(self, features) -> torch.Tensor:
        tokens = signature_tokens(features, self.sig_depth)
        ones = np.ones(tokens[0].shape[:-1] + (1,))
        return torch.as_tensor(np.concatenate([ones] + tokens, axis=-1), dtype=self.weight.dtype)

    def forward(self, features) -> torch.Tensor:
        sig = self.features_to_sig(features)
        if sig.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"signature length {sig.shape[-1]} != weight rows {self.weight.shape[0]}")
        return sig @ self.weight


class VanillaTransformer(nn.Module):
    """Causal encoder on linearly embedded raw features with sinusoidal positions."""

    def __init__(self, cfg: SigFormerConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.d_feat, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.ffn_width,
                               causal=True, positional_encoding=True, name="transformer")
        self.head = nn.Linear(cfg.d_model, cfg.d_hedge)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, features) -> torch.Tensor:
        if isinstance(features, np.ndarray):
            features = torch.as_tensor(features)
        x = features.to(self.head.weight.dtype)
        return self.head(self.encoder(x))


LEARNED_MODELS = ("sigformer", "transformer", "sig-linear", "rnn", "semi-recurrent")
ALL_MODELS = LEARNED_MODELS + ("model-hedge", "zero")


def build_model(name: str, model_cfg: dict | None = None, d_feat: int = 2, d_hedge: int = 2) -> nn.Module:
    """Instantiate a learned hedger from its name and architecture options."""
    opts = dict(model_cfg or {})
    if name in ("sigformer", "transformer"):
        cfg = SigFormerConfig(d_feat=d_feat, d_hedge=d_hedge, **opts)
        return SigFormer(cfg) if name == "sigformer" else VanillaTransformer(cfg)
    if name == "sig-linear":
        return SigLinear(d_feat, d_hedge, opts.get("sig_depth", 3))
    if name == "rnn":
        return RecurrentHedger(d_feat, d_hedge, opts.get("hidden", 128), opts.get("n_layers", 5))
    if name == "semi-recurrent":
        return SemiRecurrentHedger(d_feat, d_hedge, opts.get("hidden"))
    raise ConfigError(f"unknown learned model {name!r}; choose from {LEARNED_MODELS}")


# -- strategies and evaluation ----------------------------------------------------


def bs_delta(S, K, sigma, tau):
    """Black-Scholes call delta with zero rates."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(sigma <= 0) or np.any(tau <= 0):
        raise ValueError("bs_delta needs sigma > 0 and tau > 0")
    if np.any(np.asarray(S) <= 0) or np.any(np.asarray(K) <= 0):
        raise ValueError("bs_delta needs positive S and K")
    sd = sigma * np.sqrt(tau)
    return norm.cdf((np.log(np.asarray(S) / np.asarray(K)) + 0.5 * sd**2) / sd)


def zero_strategy(market: MarketPaths) -> np.ndarray:
    return np.zeros((market.n_paths, market.grid.n_steps, 2))


class ModelStrategy:
    """Adapts a learned hedger to ``market -> deltas``."""

    def __init__(self, model: nn.Module, with_time: bool = False, chunk: int = 2000):
        self.model = model
        self.with_time = with_time
        self.chunk = chunk

    def __call__(self, market: MarketPaths) -> np.ndarray:
        return self.from_features(extract_features(market, self.with_time))

    def from_features(self, features: np.ndarray) -> np.ndarray:
        outs = []
        with torch.no_grad():
            for lo in range(0, len(features), self.chunk):
                outs.append(self.model(features[lo:lo + self.chunk]).double().numpy())
        return np.concatenate(outs, axis=0)


QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


@dataclass
class EvalResult:
    pnl: np.ndarray
    summary: dict
    wealth: np.ndarray  # (n_steps + 1,) mean wealth; last entry is after paying the claim


def trading_gains(deltas: np.ndarray, instruments: np.ndarray) -> np.ndarray:
    """Per-step gains ``(n_paths, n_steps)`` summed over instruments."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape[:-1] != (instruments.shape[0], instruments.shape[1] - 1) or deltas.shape[-1] != instruments.shape[-1]:
        raise ValueError(f"deltas {deltas.shape} incompatible with instruments {instruments.shape}")
    return np.einsum("pkj,pkj->pk", deltas, np.diff(instruments, axis=1))


def summarize_pnl(pnl: np.ndarray) -> dict:
    return {
        "mean": float(np.mean(pnl)),
        "std": float(np.std(pnl)),
        "mse": float(np.mean(pnl**2)),
        "quantiles": {f"{q:g}": float(v) for q, v in zip(QUANTILES, np.quantile(pnl, QUANTILES))},
        "n_paths": int(len(pnl)),
    }


def evaluate_strategy(strategy, market: MarketPaths, p0: float) -> EvalResult:
    """PnL ``p0 + (delta . I)_T - Z`` per path, summary statistics, and mean wealth by date.

    ``strategy`` is either a callable ``market -> deltas`` or a deltas array of shape
    ``(n_paths, n_steps, n_instruments)``.
    """
    deltas = strategy(market) if callable(strategy) else strategy
    gains = trading_gains(deltas, market.instruments())
    z = market.payoff()
    pnl = p0 + gains.sum(axis=1) - z
    wealth = np.empty(market.grid.n_steps + 1)
    wealth[:-1] = p0 + np.concatenate([[0.0], np.cumsum(gains.mean(axis=0))[:-1]])
    wealth[-1] = pnl.mean()
    return EvalResult(pnl, summarize_pnl(pnl), wealth)
