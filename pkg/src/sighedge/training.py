"""
Quadratic hedging loss, gradients, Adam, and the fresh-batch training loop.

Gradients come from torch's reverse-mode autograd over the model's operations;
signatures of input features are constants of the graph. Parameters are addressed
through one flat vector whose layout follows ``model.named_parameters()``.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericalError
from .rbergomi import MarketPaths, RBergomiParams, TimeGrid, extract_features, simulate_market
from .seeding import PRICING, TEST, TRAIN, VALIDATION, derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


# -- flat parameter vector --------------------------------------------------------


def param_index(model: nn.Module) -> list[tuple[str, int, tuple[int, ...]]]:
    """``(name, offset, shape)`` of every parameter inside the flat vector."""
    out, offset = [], 0
    for name, p in model.named_parameters():
        out.append((name, offset, tuple(p.shape)))
        offset += p.numel()
    return out


def flatten_params(model: nn.Module) -> np.ndarray:
    return torch.cat([p.detach().reshape(-1).double() for p in model.parameters()]).numpy()


def set_flat_params(model: nn.Module, flat) -> None:
    flat = torch.as_tensor(np.asarray(flat), dtype=torch.float64)
    n = sum(p.numel() for p in model.parameters())
    if flat.numel() != n:
        raise ValueError(f"flat vector has {flat.numel()} entries, model has {n}")
    offset = 0
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(flat[offset: offset + p.numel()].reshape(p.shape).to(p.dtype))
            offset += p.numel()


# -- loss and gradient ------------------------------------------------------------


def hedging_loss(delta, instruments, payoff, p0: float) -> torch.Tensor:
    """Mean of ``(p0 + sum_k sum_j delta_kj (I_{k+1,j} - I_kj) - Z)^2`` in double precision."""
    delta = torch.as_tensor(delta).double()
    inst = torch.as_tensor(instruments, dtype=torch.float64)
    z = torch.as_tensor(payoff, dtype=torch.float64)
    if delta.shape[:-1] != (inst.shape[0], inst.shape[1] - 1) or delta.shape[-1] != inst.shape[-1]:
        raise ValueError(f"delta {tuple(delta.shape)} incompatible with instruments {tuple(inst.shape)}")
    if z.shape != (inst.shape[0],):
        raise ValueError(f"payoff shape {tuple(z.shape)} does not match {inst.shape[0]} paths")
    gains = (delta * (inst[:, 1:] - inst[:, :-1])).sum(dim=(1, 2))
    return ((p0 + gains - z) ** 2).mean()


def estimate_p0(payoff) -> float:
    z = np.asarray(payoff, dtype=np.float64)
    if z.size == 0:
        raise ValueError("estimate_p0 needs at least one payoff")
    return float(z.mean())


def grad(loss_fn, params) -> np.ndarray:
    """Reverse-mode gradient of the scalar ``loss_fn()`` w.r.t. ``params``.

    ``params`` is a module (flat layout of :func:`flatten_params`) or a sequence of
    tensors. Returns a float64 vector; parameters the loss ignores get zeros.
    """
    plist = list(params.parameters()) if isinstance(params, nn.Module) else list(params)
    loss = loss_fn()
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        raise TypeError("loss_fn must return a scalar tensor")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any differentiable operation")
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    return torch.cat([
        (g if g is not None else torch.zeros_like(p)).reshape(-1).double()
        for g, p in zip(grads, plist)
    ]).numpy()


# -- Adam -------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, moments, t: int, cfg: AdamConfig = AdamConfig()):
    """One bias-corrected Adam update; works on numpy arrays or torch tensors.

    Returns ``(new_params, (m, v))``.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m, v = moments
    m = cfg.beta1 * m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1**t)
    v_hat = v / (1 - cfg.beta2**t)
    return params - cfg.learning_rate * m_hat / (v_hat**0.5 + cfg.eps), (m, v)


# -- data -------------------------------------------------------------------------


@dataclass(frozen=True)
class MarketSpec:
    params: RBergomiParams = RBergomiParams()
    grid: TimeGrid = TimeGrid()
    with_time: bool = False
    method: str = "hybrid"
    threads: int = 1

    @property
    def d_feat(self) -> int:
        return 3 if self.with_time else 2


@dataclass
class HedgingData:
    features: np.ndarray
    instruments: np.ndarray
    payoff: np.ndarray

    @classmethod
    def from_market(cls, market: MarketPaths, with_time: bool) -> HedgingData:
        return cls(extract_features(market, with_time), market.instruments(), market.payoff())


def simulate(spec: MarketSpec, n_paths: int, seed: int) -> MarketPaths:
    return simulate_market(spec.params, spec.grid, n_paths, seed, spec.method, spec.threads)


def make_data(spec: MarketSpec, n_paths: int, seed: int) -> HedgingData:
    return HedgingData.from_market(simulate(spec, n_paths, seed), spec.with_time)


def dataset_loss(model: nn.Module, data: HedgingData, p0: float, chunk: int = 2000) -> float:
    total = 0.0
    n = len(data.payoff)
    with torch.no_grad():
        for lo in range(0, n, chunk):
            sl = slice(lo, lo + chunk)
            part = hedging_loss(model(data.features[sl]), data.instruments[sl], data.payoff[sl], p0)
            total += float(part) * len(data.payoff[sl])
    return total / n


def price_p0(spec: MarketSpec, base_seed: int, n_paths: int = 100_000) -> float:
    """Premium from an independent pricing batch, fixed before training."""
    return estimate_p0(simulate(spec, n_paths, derive_seed(base_seed, PRICING)).payoff())


# -- training ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 1000
    n_steps_train: int = 2000
    val_size: int = 10_000
    test_size: int = 10_000
    pricing_size: int = 100_000
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 50
    grad_clip: float | None = None

    def __post_init__(self):
        positive = ("learning_rate", "batch_size", "val_size", "test_size", "pricing_size", "eval_every", "eps")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be positive")
        if self.n_steps_train < 0:
            raise ConfigError("train.n_steps_train must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("train.grad_clip must be positive when set")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)


@dataclass
class TrainReport:
    model: str
    seed: int
    p0: float
    steps: list[int] = field(default_factory=list)
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    test_loss: float | None = None
    zero_strategy_test_loss: float | None = None
    test_payoff_variance: float | None = None
    wall_clock_seconds: float = 0.0
    grad_clip: float | None = None
    diverged: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_losses_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "val_loss"])
            for s, tr, va in zip(self.steps, self.train_losses, self.val_losses):
                w.writerow([s, repr(tr), repr(va)])


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


def train(model: nn.Module, spec: MarketSpec, cfg: TrainConfig, name: str = "model",
          p0: float | None = None, config_echo: dict | None = None) -> tuple[nn.Module, TrainReport]:
    """Fit ``model`` by Adam on fresh simulated batches.

    Batch ``s`` is simulated from ``derive_seed(seed, TRAIN, s)``; the validation,
    test and pricing sets have their own fixed seeds, so every variant trained with
    the same base seed sees identical data. Row ``s`` of the loss curve holds the
    loss of the parameters after ``s`` updates on batch ``s`` and on the validation set.
    """
    start = time.perf_counter()
    if p0 is None:
        p0 = price_p0(spec, cfg.seed, cfg.pricing_size)
    val = make_data(spec, cfg.val_size, derive_seed(cfg.seed, VALIDATION))
    report = TrainReport(name, cfg.seed, p0, grad_clip=cfg.grad_clip, config=config_echo or {})

    flat = torch.as_tensor(flatten_params(model))
    moments = (torch.zeros_like(flat), torch.zeros_like(flat))
    adam = cfg.adam
    n_params = flat.numel()
    if n_params == 0:
        raise ConfigError(f"model {name!r} has no trainable parameters")

    for s in range(cfg.n_steps_train + 1):
        batch = make_data(spec, cfg.batch_size, derive_seed(cfg.seed, TRAIN, s))
        final = s == cfg.n_steps_train

        def loss_fn():
            return hedging_loss(model(batch.features), batch.instruments, batch.payoff, p0)

        if final:
            with torch.no_grad():
                loss_val = float(loss_fn())
            g = None
        else:
            holder = {}

            def tracked():
                holder["loss"] = loss_fn()
                return holder["loss"]

            g = torch.as_tensor(grad(tracked, model))
            loss_val = float(holder["loss"].detach())

        if not np.isfinite(loss_val) or (g is not None and not torch.isfinite(g).all()):
            report.diverged = True
            report.wall_clock_seconds = time.perf_counter() - start
            raise TrainingDiverged(f"non-finite loss or gradient at step {s}", report)

        if s % cfg.eval_every == 0 or final:
            val_loss = dataset_loss(model, val, p0)
            report.steps.append(s)
            report.train_losses.append(loss_val)
            report.val_losses.append(val_loss)
            log.info("%s step %d train %.6g val %.6g", name, s, loss_val, val_loss)

        if g is not None:
            if cfg.grad_clip is not None:
                norm = float(torch.linalg.vector_norm(g))
                if norm > cfg.grad_clip:
                    g = g * (cfg.grad_clip / norm)
            flat, moments = adam_step(flat, g, moments, s + 1, adam)
            set_flat_params(model, flat)

    test = make_data(spec, cfg.test_size, derive_seed(cfg.seed, TEST))
    report.test_loss = dataset_loss(model, test, p0)
    report.zero_strategy_test_loss = float(np.mean((p0 - test.payoff) ** 2))
    report.test_payoff_variance = float(np.var(test.payoff))
    report.wall_clock_seconds = time.perf_counter() - start
    return model, report
