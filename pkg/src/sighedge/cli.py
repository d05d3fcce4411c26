"""Command-line harness: simulate, train, evaluate, backtest, ablate, attention."""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
import time
from collections import OrderedDict

import numpy as np
import torch

from .baselines import ModelStrategy, build_model, evaluate_strategy, trading_gains, zero_strategy
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMA_VERSION, ExperimentConfig, load_config, parse_value
from .errors import ConfigError, NumericalError
from .model_hedge import ModelHedgeStrategy, model_hedge_batch
from .rbergomi import MarketPaths, RBergomiParams, TimeGrid, extract_features
from .seeding import INIT, TEST, VALIDATION, derive_seed
from .sigformer import collect_attention
from .training import (
    MarketSpec,
    TrainingDiverged,
    TrainReport,
    make_data,
    price_p0,
    simulate,
    train,
)

log = logging.getLogger("sighedge")

CHECKPOINT_NAME = "model.ckpt"


# -- small helpers ----------------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, **obj}, fh, indent=2, sort_keys=True)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def init_model(cfg: ExperimentConfig, name: str | None = None, options: dict | None = None):
    """Build a learned model with weights drawn from the INIT seed namespace."""
    name = name or cfg.model_name
    options = cfg.model_options if options is None else options
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, INIT))
        return build_model(name, options, cfg.market.d_feat)


def var_with_se(x: np.ndarray) -> tuple[float, float]:
    dev2 = (x - x.mean()) ** 2
    return float(x.var(ddof=1)), float(dev2.std(ddof=1) / np.sqrt(len(x)))


def test_market(cfg: ExperimentConfig, n_paths: int) -> MarketPaths:
    return simulate(cfg.market, n_paths, derive_seed(cfg.seed, TEST))


# -- commands ---------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, args) -> None:
    n = cfg.section("simulate")["n_paths"]
    market = simulate(cfg.market, n, cfg.seed)
    p, grid = cfg.market.params, cfg.market.grid
    if cfg.section("simulate")["write_paths"]:
        market.to_csv(os.path.join(cfg.out, "paths.csv"))
    wh = market.volterra.wh[:, 1:]  # column 0 is W^H_0 = 0
    var_wh = [var_with_se(wh[:, i]) for i in range(wh.shape[1])]
    s_t = market.S[:, -1]
    summary = {
        "n_paths": n,
        "seed": cfg.seed,
        "mean_S_T": float(s_t.mean()),
        "mean_S_T_se": float(s_t.std(ddof=1) / np.sqrt(n)),
        "var_S_T": float(s_t.var(ddof=1)),
        "var_WH_T": var_wh[-1][0],
        "var_WH_T_se": var_wh[-1][1],
        "var_WH_T_analytic": float(p.maturity ** (2 * p.hurst)),
        "var_WH_curve": [
            {"step": i + 1, "t": float(grid.times[i + 1]), "var": v, "se": se,
             "analytic": float(grid.times[i + 1] ** (2 * p.hurst))}
            for i, (v, se) in enumerate(var_wh)
        ],
        "mean_V": [float(x) for x in market.V.mean(axis=0)],
        "mean_V_se": [float(x) for x in market.V.std(axis=0, ddof=1) / np.sqrt(n)],
        # shifted by one sample so constant columns give exactly zero
        "var_V": [float(x) for x in (market.V - market.V[:1]).var(axis=0)],
        "xi": p.xi,
    }
    write_json(os.path.join(cfg.out, "summary.json"), summary)


def _zero_report(cfg: ExperimentConfig, p0: float) -> TrainReport:
    val = make_data(cfg.market, cfg.train.val_size, derive_seed(cfg.seed, VALIDATION))
    test = make_data(cfg.market, cfg.train.test_size, derive_seed(cfg.seed, TEST))
    zero_val = float(np.mean((p0 - val.payoff) ** 2))
    zero_test = float(np.mean((p0 - test.payoff) ** 2))
    rep = TrainReport("zero", cfg.seed, p0, steps=[0], train_losses=[zero_val], val_losses=[zero_val],
                      test_loss=zero_test, zero_strategy_test_loss=zero_test,
                      test_payoff_variance=float(np.var(test.payoff)), config=cfg.echo())
    return rep


def cmd_train(cfg: ExperimentConfig, args) -> None:
    name = cfg.model_name
    if name == "model-hedge":
        raise ConfigError("model-hedge has no trainable parameters; use `evaluate` directly")
    p0 = price_p0(cfg.market, cfg.seed, cfg.train.pricing_size)
    if name == "zero":
        report = _zero_report(cfg, p0)
    else:
        model = init_model(cfg)
        try:
            model, report = train(model, cfg.market, cfg.train, name, p0=p0, config_echo=cfg.echo())
        except TrainingDiverged as exc:
            exc.report.write_json(os.path.join(cfg.out, "train_report.json"))
            exc.report.write_losses_csv(os.path.join(cfg.out, "losses.csv"))
            raise
        save_checkpoint(os.path.join(cfg.out, CHECKPOINT_NAME), model, name, cfg.model_options,
                        cfg.market.d_feat, {"p0": p0, "with_time": cfg.market.with_time})
    report.write_json(os.path.join(cfg.out, "train_report.json"))
    report.write_losses_csv(os.path.join(cfg.out, "losses.csv"))


def _strategy(cfg: ExperimentConfig, checkpoint: str | None):
    """``(callable market -> deltas, p0 or None)`` for the configured model."""
    name = cfg.model_name
    if name == "zero":
        return zero_strategy, None
    if name == "model-hedge":
        return ModelHedgeStrategy(cfg.model_hedge), None
    if checkpoint is None:
        raise ConfigError(f"model {name!r} needs --checkpoint")
    model, header = load_checkpoint(checkpoint)
    if header["model"] != name:
        raise ConfigError(f"checkpoint holds {header['model']!r}, config asks for {name!r}")
    return ModelStrategy(model, header["meta"].get("with_time", False)), header["meta"].get("p0")


def cmd_evaluate(cfg: ExperimentConfig, args) -> None:
    strategy, p0 = _strategy(cfg, args.checkpoint)
    if p0 is None:
        p0 = price_p0(cfg.market, cfg.seed, cfg.train.pricing_size)
    n = cfg.section("eval")["n_paths"]
    if cfg.model_name == "model-hedge":
        n = min(n, cfg.section("eval")["model_hedge_paths"])
    market = test_market(cfg, n)
    res = evaluate_strategy(strategy, market, p0)
    zero = evaluate_strategy(zero_strategy, market, p0)
    write_csv(os.path.join(cfg.out, "pnl.csv"), ["path_id", "pnl"], enumerate(res.pnl))
    write_csv(os.path.join(cfg.out, "wealth.csv"), ["step", "t", "wealth"],
              ((k, market.grid.times[k], w) for k, w in enumerate(res.wealth)))
    write_json(os.path.join(cfg.out, "pnl_summary.json"),
               {"model": cfg.model_name, "p0": p0, "pnl": res.summary, "zero_strategy": zero.summary})


# -- backtest ---------------------------------------------------------------------


def read_market_csv(path: str, fwd_var_column: str | None) -> list[dict]:
    """Rows of ``date, underlying_price, vol_index`` (plus an optional forward-variance column)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read backtest input {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        need = {"date", "underlying_price", "vol_index"} | ({fwd_var_column} if fwd_var_column else set())
        missing = need - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"backtest input lacks columns {sorted(missing)}")
        rows = []
        for i, r in enumerate(reader):
            try:
                row = {"date": dt.date.fromisoformat(r["date"].strip()),
                       "price": float(r["underlying_price"]), "vol_index": float(r["vol_index"])}
                if fwd_var_column:
                    row["fwd_var"] = float(r[fwd_var_column])
            except ValueError as exc:
                raise ConfigError(f"backtest input row {i + 2}: {exc}") from exc
            if not (row["price"] > 0 and row["vol_index"] > 0) or (fwd_var_column and not row["fwd_var"] > 0):
                raise ConfigError(f"backtest input row {i + 2}: prices and vol index must be positive")
            if rows and row["date"] <= rows[-1]["date"]:
                raise ConfigError(f"backtest input row {i + 2}: dates must be strictly increasing")
            rows.append(row)
    if not rows:
        raise ConfigError("backtest input is empty")
    return rows


def _month_market(cfg: ExperimentConfig, block: dict, rows: list[dict], scale: float) -> MarketPaths:
    """Wrap one month of realized data as a single-path market in strike units."""
    base = cfg.market.params
    maturity = (rows[-1]["date"] - rows[0]["date"]).days / 365
    params = RBergomiParams(block["hurst"], block["rho"], block["eta"], block["xi"], 1.0, 1.0, maturity,
                            maturity + (base.t_fwd - base.maturity))
    grid = TimeGrid(len(rows) - 1, maturity)
    strike = rows[0]["price"]
    S = np.array([[r["price"] / strike for r in rows]])
    V = np.array([[(r["vol_index"] / scale) ** 2 for r in rows]])
    theta = np.array([[r.get("fwd_var", (r["vol_index"] / scale) ** 2) for r in rows]])
    return MarketPaths(S, V, theta, 0, params, grid, None)


class _RealizedModelHedge:
    """Model hedge on realized data: the Gaussian curve is the one implied by a flat
    forward-variance curve at the current variance level."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, market: MarketPaths) -> np.ndarray:
        p, g = market.params, market.grid
        n = g.n_steps
        deltas = np.empty((1, n, 2))
        for k in range(n):
            u = g.times[k + 1: n]
            curve = np.log(market.V[0, k] / p.xi) + 0.5 * p.eta**2 * u ** (2 * p.hurst)
            r = model_hedge_batch(k, market.S[0, k], market.V[0, k], market.theta[0, k], curve[None],
                                  p, g, self.cfg)
            deltas[0, k] = r.delta_s[0], r.delta_fwd[0]
        return deltas


def cmd_backtest(cfg: ExperimentConfig, args) -> None:
    bt = cfg.section("backtest")
    path = args.input or bt["input"]
    if not path:
        raise ConfigError("backtest needs an input CSV (--input or backtest.input)")
    rows = read_market_csv(path, bt["fwd_var_column"])
    if cfg.model_name == "model-hedge":
        strategy = _RealizedModelHedge(cfg.model_hedge)
    else:
        strategy, _ = _strategy(cfg, args.checkpoint)

    months: OrderedDict[str, list] = OrderedDict()
    for r in rows:
        months.setdefault(r["date"].strftime("%Y-%m"), []).append(r)
    scale = float(bt["vol_index_scale"])
    carried = 0.0
    daily, monthly = [], []
    for month, mrows in months.items():
        block = bt["months"].get(month[5:]) or bt["months"].get(month)
        if block is None:
            raise ConfigError(f"no model parameters for month {month}")
        if len(mrows) < 2:
            raise ConfigError(f"month {month} has fewer than two observations")
        market = _month_market(cfg, block, mrows, scale)
        spec = MarketSpec(market.params, market.grid, cfg.market.with_time, "hybrid", cfg.market.threads)
        p0 = price_p0(spec, cfg.seed, bt["pricing_size"])
        deltas = strategy(market)
        res = evaluate_strategy(deltas, market, p0)
        cum = np.concatenate([[0.0], np.cumsum(trading_gains(deltas, market.instruments())[0])])
        for r, c in zip(mrows[:-1], cum[:-1]):
            daily.append((r["date"].isoformat(), month, r["price"], carried + p0 + c))
        pnl = float(res.pnl[0])
        carried += pnl
        daily.append((mrows[-1]["date"].isoformat(), month, mrows[-1]["price"], carried))
        monthly.append((month, mrows[0]["price"], p0, float(market.payoff()[0]), pnl, carried))
    write_csv(os.path.join(cfg.out, "wealth.csv"), ["date", "month", "underlying_price", "wealth"], daily)
    write_csv(os.path.join(cfg.out, "monthly.csv"), ["month", "strike", "p0", "payoff", "pnl", "cumulative_pnl"], monthly)


# -- ablation ---------------------------------------------------------------------


def ablation_variants(cfg: ExperimentConfig) -> list[tuple[str, str, dict]]:
    """``(variant, model, options)``: the model trio, then depth and layer sweeps of SigFormer."""
    ab = cfg.section("ablate")
    base = cfg.model_options if cfg.model_name == "sigformer" else {}
    out = []
    for name in ab["models"]:
        opts = dict(base) if name == "sigformer" else (
            {k: v for k, v in base.items() if k in ("n_layers", "n_heads", "d_model", "d_ffn")} if name == "transformer"
            else {"sig_depth": base["sig_depth"]} if name == "sig-linear" and "sig_depth" in base else {})
        out.append((name, name, opts))
    for d in ab["sig_depths"]:
        out.append((f"sigformer-depth{d}", "sigformer", {**base, "sig_depth": d}))
    for n in ab["n_layers"]:
        out.append((f"sigformer-layers{n}", "sigformer", {**base, "n_layers": n}))
    return out


def cmd_ablate(cfg: ExperimentConfig, args) -> None:
    variants = ablation_variants(cfg)
    for _, name, opts in variants:  # validate the whole matrix before running anything
        cfg.with_model(name, opts)
    p0 = price_p0(cfg.market, cfg.seed, cfg.train.pricing_size)
    root = os.path.join(cfg.out, "ablate")
    os.makedirs(root, exist_ok=True)
    manifest, combined = [], []
    for variant, name, opts in variants:
        vcfg = cfg.with_model(name, opts)
        model = init_model(vcfg)
        _, report = train(model, vcfg.market, vcfg.train, variant, p0=p0, config_echo=vcfg.echo())
        report.write_losses_csv(os.path.join(root, f"{variant}.csv"))
        combined.extend((variant, s, a, b) for s, a, b in zip(report.steps, report.train_losses, report.val_losses))
        manifest.append({"variant": variant, "model": name, "options": opts, "test_loss": report.test_loss,
                         "zero_strategy_test_loss": report.zero_strategy_test_loss,
                         "wall_clock_seconds": report.wall_clock_seconds, "losses": f"ablate/{variant}.csv"})
    write_csv(os.path.join(cfg.out, "ablation_losses.csv"), ["variant", "step", "train_loss", "val_loss"], combined)
    clock = {m["variant"]: m["wall_clock_seconds"] for m in manifest}
    ratio = None
    if "sigformer-depth3" in clock and "sigformer-depth4" in clock:
        ratio = clock["sigformer-depth4"] / clock["sigformer-depth3"]
    # wall-clock lives only in the manifest; the loss CSVs stay byte-reproducible
    write_json(os.path.join(cfg.out, "ablation_manifest.json"), {
        "variants": manifest,
        "p0": p0,
        "validation_seed": derive_seed(cfg.seed, VALIDATION),
        "depth4_over_depth3_runtime": ratio,
    })


# -- attention --------------------------------------------------------------------


def cmd_attention(cfg: ExperimentConfig, args) -> None:
    if cfg.model_name not in ("sigformer", "transformer"):
        raise ConfigError("attention maps exist only for sigformer and transformer")
    if args.checkpoint is None:
        raise ConfigError("attention needs --checkpoint")
    model, header = load_checkpoint(args.checkpoint)
    if header["model"] != cfg.model_name:
        raise ConfigError(f"checkpoint holds {header['model']!r}, config asks for {cfg.model_name!r}")
    idx = args.path if args.path is not None else cfg.section("attention")["path_index"]
    if idx < 0:
        raise ConfigError("path index must be non-negative")
    # per-path random substreams: path idx is the same as in the full test set
    market = test_market(cfg, idx + 1)
    with_time = header["meta"].get("with_time", False)
    feats = extract_features(market, with_time)[idx]
    maps = collect_attention(model, feats[None])
    root = os.path.join(cfg.out, "attention")
    os.makedirs(root, exist_ok=True)
    n = feats.shape[0]
    for (layer, level), att in sorted(maps.items()):
        for h in range(att.shape[-3]):
            mat = att[0, h]
            write_csv(os.path.join(root, f"L{layer + 1}_S{level}_H{h + 1}.csv"),
                      ["query"] + [f"key_{j}" for j in range(n)],
                      ([i] + list(mat[i]) for i in range(n)))
    cols = ["step", "t", "moneyness", "vol"] + (["time_fraction"] if with_time else [])
    write_csv(os.path.join(root, "features.csv"), cols,
              ([k, market.grid.times[k]] + list(feats[k]) for k in range(n)))


# -- entry point ------------------------------------------------------------------


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "ablate": cmd_ablate,
    "attention": cmd_attention,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sighedge", description="Signature-transformer hedging under rough Bergomi.")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON config file (nested sections or flat dotted keys)")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--model", help="model name, overrides model.name")
    ap.add_argument("--checkpoint", help="checkpoint for evaluate/backtest/attention")
    ap.add_argument("--threads", type=int, help="simulation worker threads")
    ap.add_argument("--input", help="backtest market CSV")
    ap.add_argument("--path", type=int, help="test-path index for attention")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override any config key, e.g. --set train.n_steps_train=100")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = parse_value(value)
    if args.seed is not None:
        out["seed"] = args.seed
    if args.out is not None:
        out["out"] = args.out
    if args.threads is not None:
        out["threads"] = args.threads
    if args.model is not None:
        out["model.name"] = args.model
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        overrides = _overrides(args)
        cfg = load_config(args.config, overrides)
        os.makedirs(cfg.out, exist_ok=True)
        cfg.write_echo(os.path.join(cfg.out, "config.echo.json"))
        start = time.perf_counter()
        COMMANDS[args.command](cfg, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
