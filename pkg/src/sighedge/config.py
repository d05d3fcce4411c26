"""Experiment configuration: nested defaults, flat ``a.b.c`` overrides, validation, echo."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields

from .baselines import ALL_MODELS, LEARNED_MODELS, build_model
from .errors import ConfigError
from .model_hedge import ModelHedgeConfig
from .rbergomi import RBergomiParams, TimeGrid
from .sigformer import SigFormerConfig
from .training import MarketSpec, TrainConfig

SCHEMA_VERSION = 1

# Calendar-year parameter block used by the backtest when the config gives none.
MONTHLY_PARAMS = {
    "01": {"hurst": 0.071, "rho": -0.856, "eta": 2.267, "xi": 0.050**2},
    "02": {"hurst": 0.072, "rho": -0.843, "eta": 2.284, "xi": 0.050**2},
    "03": {"hurst": 0.051, "rho": -0.758, "eta": 2.507, "xi": 0.383**2},
    "04": {"hurst": 0.051, "rho": -0.837, "eta": 2.235, "xi": 0.050**2},
    "05": {"hurst": 0.064, "rho": -0.851, "eta": 2.207, "xi": 0.271**2},
    "06": {"hurst": 0.026, "rho": -0.749, "eta": 3.136, "xi": 0.471**2},
    "07": {"hurst": 0.069, "rho": -0.841, "eta": 2.319, "xi": 0.050**2},
    "08": {"hurst": 0.052, "rho": -0.806, "eta": 2.207, "xi": 0.172**2},
    "09": {"hurst": 0.092, "rho": -0.837, "eta": 2.264, "xi": 0.050**2},
    "10": {"hurst": 0.025, "rho": -0.733, "eta": 1.953, "xi": 0.068**2},
    "11": {"hurst": 0.067, "rho": -0.822, "eta": 1.976, "xi": 0.254**2},
    "12": {"hurst": 0.068, "rho": -0.835, "eta": 2.195, "xi": 0.050**2},
}

DEFAULTS: dict = {
    "seed": 0,
    "out": "out",
    "threads": 1,
    "market": {
        "hurst": 0.1, "rho": -0.7, "eta": 1.9, "xi": 0.235**2, "s0": 1.0, "strike": 1.0,
        "maturity": 30 / 365, "t_fwd": 60 / 365, "n_steps": 30, "with_time": False, "method": "hybrid",
    },
    "model": {"name": "sigformer", "options": {}},
    "train": {
        "learning_rate": 1e-4, "batch_size": 1000, "n_steps_train": 2000, "val_size": 10_000,
        "test_size": 10_000, "pricing_size": 100_000, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
        "eval_every": 50, "grad_clip": None,
    },
    "eval": {"n_paths": 10_000, "model_hedge_paths": 1000},
    "model_hedge": {"n_inner": 4096, "bump": 1e-4, "martingale_correction": True},
    "simulate": {"n_paths": 10_000, "write_paths": True},
    "backtest": {
        "input": None, "fwd_var_column": None, "vol_index_scale": 100.0,
        "pricing_size": 100_000, "months": MONTHLY_PARAMS,
    },
    "ablate": {
        "models": ["sigformer", "transformer", "sig-linear"],
        "sig_depths": [1, 2, 3, 4],
        "n_layers": [1, 2, 3, 4, 5],
    },
    "attention": {"path_index": 0},
}

_MODEL_OPTIONS = {
    "sigformer": {f.name for f in fields(SigFormerConfig)} - {"d_feat", "d_hedge"},
    "transformer": {f.name for f in fields(SigFormerConfig)} - {"d_feat", "d_hedge", "sig_depth", "causal", "positional_encoding"},
    "sig-linear": {"sig_depth"},
    "rnn": {"hidden", "n_layers"},
    "semi-recurrent": {"hidden"},
    "model-hedge": set(),
    "zero": set(),
}

# Sections whose contents are free-form maps rather than fixed keys.
_OPEN = {("model", "options"), ("backtest", "months")}


def _merge(base: dict, upd: dict, prefix: tuple = ()) -> None:
    for key, value in upd.items():
        path = prefix + (key,)
        if "." in key:
            _set_path(base, key, value)
            continue
        if path[:2] in _OPEN or prefix in _OPEN:
            base[key] = copy.deepcopy(value)
        elif key not in base:
            raise ConfigError(f"unknown config key {'.'.join(path)!r}")
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {'.'.join(path)!r} expects a mapping")
            _merge(base[key], value, path)
        else:
            base[key] = value


def _set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, part in enumerate(parts[:-1]):
        if tuple(parts[:i + 1]) in _OPEN:
            node = node.setdefault(part, {})
            continue
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    leaf = parts[-1]
    if tuple(parts[:-1]) not in _OPEN and not any(tuple(parts[:j]) in _OPEN for j in range(len(parts))):
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(node[leaf], dict) and not (tuple(parts) in _OPEN and isinstance(value, dict)):
            raise ConfigError(f"config key {dotted!r} is a section, not a value")
    node[leaf] = value


def parse_value(text: str):
    """``--set`` values are JSON when they parse, plain strings otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    market: MarketSpec
    model_name: str
    model_options: dict
    train: TrainConfig
    model_hedge: ModelHedgeConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def out(self) -> str:
        return self.raw["out"]

    def section(self, name: str) -> dict:
        return self.raw[name]

    def echo(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **self.raw}

    def write_echo(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.echo(), fh, indent=2, sort_keys=True)

    def with_model(self, name: str, options: dict | None = None) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        raw["model"] = {"name": name, "options": dict(options or {})}
        return validate(raw)


def _int(section: dict, key: str, where: str, minimum: int = 1) -> int:
    v = section[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{where}.{key} must be an integer >= {minimum}, got {v!r}")
    return v


def validate(raw: dict) -> ExperimentConfig:
    """Type-check every section and build the typed views; raises ConfigError."""
    if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int) or raw["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {raw['seed']!r}")
    _int(raw, "threads", "config")
    m = raw["market"]
    try:
        params = RBergomiParams(**{k: float(m[k]) for k in ("hurst", "rho", "eta", "xi", "s0", "strike", "maturity", "t_fwd")})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"market: {exc}") from exc
    grid = TimeGrid(_int(m, "n_steps", "market"), params.maturity)
    if m["method"] not in ("hybrid", "cholesky"):
        raise ConfigError(f"market.method must be 'hybrid' or 'cholesky', got {m['method']!r}")
    if not isinstance(m["with_time"], bool):
        raise ConfigError("market.with_time must be true or false")
    spec = MarketSpec(params, grid, m["with_time"], m["method"], raw["threads"])

    name = raw["model"]["name"]
    if name not in ALL_MODELS:
        raise ConfigError(f"model.name must be one of {ALL_MODELS}, got {name!r}")
    options = dict(raw["model"]["options"] or {})
    unknown = set(options) - _MODEL_OPTIONS[name]
    if unknown:
        raise ConfigError(f"options {sorted(unknown)} do not apply to model {name!r}")
    if name in LEARNED_MODELS:
        try:
            build_model(name, options, spec.d_feat)  # shape check before any run
        except TypeError as exc:
            raise ConfigError(f"model.options: {exc}") from exc

    t = dict(raw["train"])
    try:
        train = TrainConfig(seed=raw["seed"], **t)
    except TypeError as exc:
        raise ConfigError(f"train: {exc}") from exc
    for key in ("batch_size", "n_steps_train", "val_size", "test_size", "pricing_size", "eval_every"):
        _int(t, key, "train", 0 if key == "n_steps_train" else 1)

    mh = raw["model_hedge"]
    try:
        mh_cfg = ModelHedgeConfig(n_inner=_int(mh, "n_inner", "model_hedge", 2), bump=float(mh["bump"]),
                                  seed=raw["seed"], martingale_correction=bool(mh["martingale_correction"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    _int(raw["eval"], "n_paths", "eval")
    _int(raw["eval"], "model_hedge_paths", "eval")
    _int(raw["simulate"], "n_paths", "simulate")
    _int(raw["backtest"], "pricing_size", "backtest")
    if not float(raw["backtest"]["vol_index_scale"]) > 0:
        raise ConfigError("backtest.vol_index_scale must be positive")
    for month, block in raw["backtest"]["months"].items():
        missing = {"hurst", "rho", "eta", "xi"} - set(block)
        if missing:
            raise ConfigError(f"backtest.months.{month} lacks {sorted(missing)}")
    ab = raw["ablate"]
    bad = [x for x in ab["models"] if x not in LEARNED_MODELS]
    if bad:
        raise ConfigError(f"ablate.models contains non-learned models {bad}")
    if any(not isinstance(d, int) or d < 1 for d in ab["sig_depths"] + ab["n_layers"]):
        raise ConfigError("ablate sweeps must list positive integers")
    _int(raw["attention"], "path_index", "attention", 0)
    return ExperimentConfig(raw, spec, name, options, train, mh_cfg)


def load_config(path: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the JSON file (nested or flat keys), then ``overrides``."""
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        data.pop("schema_version", None)
        _merge(raw, data)
    for key, value in (overrides or {}).items():
        _set_path(raw, key, value)
    return validate(raw)
