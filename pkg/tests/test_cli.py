import csv
import datetime as dt
import json

import numpy as np
import pytest

from sighedge.cli import main
from sighedge.rbergomi import RBergomiParams, TimeGrid
from sighedge.seeding import TEST, derive_seed
from sighedge.training import MarketSpec, simulate

SMALL = [
    "--set", "train.n_steps_train=4", "--set", "train.eval_every=2", "--set", "train.batch_size=64",
    "--set", "train.val_size=128", "--set", "train.test_size=128", "--set", "train.pricing_size=2000",
    "--set", "eval.n_paths=64", "--set", "market.n_steps=6", "--set", "market.maturity=0.0164383561643835",
    "--set", "market.t_fwd=0.1",
]
TINY_SF = ["--set", 'model.options={"sig_depth": 2, "n_layers": 1, "n_heads": 2, "d_model": 8}']


def run(*args):
    return main([str(a) for a in args])


def read(path):
    return path.read_bytes()


def test_simulate_outputs_and_determinism(tmp_path):
    for d in ("a", "b"):
        assert run("simulate", "--out", tmp_path / d, "--seed", 7, "--set", "simulate.n_paths=500",
                   "--threads", 1 if d == "a" else 3) == 0
    assert read(tmp_path / "a" / "paths.csv") == read(tmp_path / "b" / "paths.csv")
    s = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert s["schema_version"] == 1
    assert abs(s["var_WH_T"] - s["var_WH_T_analytic"]) < 3 * s["var_WH_T_se"]
    assert len(s["var_WH_curve"]) == 30
    assert json.loads((tmp_path / "a" / "config.echo.json").read_text())["seed"] == 7


def test_simulate_eta_zero_variance(tmp_path):
    assert run("simulate", "--out", tmp_path, "--set", "market.eta=0", "--set", "simulate.n_paths=50",
               "--set", "simulate.write_paths=false") == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert max(s["var_V"]) == 0.0
    assert not (tmp_path / "paths.csv").exists()


def test_exit_codes(tmp_path):
    assert run("train", "--out", tmp_path, "--set", "market.hurst=0.9") == 2
    assert run("train", "--out", tmp_path, "--model", "model-hedge") == 2
    assert run("evaluate", "--out", tmp_path, "--model", "rnn") == 2
    assert run("attention", "--out", tmp_path, "--model", "rnn") == 2
    assert run("train", "--out", tmp_path, "--set", "bogus=1") == 2
    assert run("train", "--out", tmp_path, "--set", "novalue") == 2
    with pytest.raises(SystemExit) as exc:
        run("fly")
    assert exc.value.code == 2


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    import sighedge.cli as cli
    from sighedge.errors import NumericalError

    def boom(cfg, args):
        raise NumericalError("synthetic")

    monkeypatch.setitem(cli.COMMANDS, "simulate", boom)
    assert run("simulate", "--out", tmp_path) == 3


def test_train_zero_reports_payoff_variance(tmp_path):
    assert run("train", "--model", "zero", "--out", tmp_path, *SMALL) == 0
    rep = json.loads((tmp_path / "train_report.json").read_text())
    assert rep["test_loss"] == rep["zero_strategy_test_loss"]
    # with p0 an independent estimate, E(p0 - Z)^2 = Var(Z) + (p0 - EZ)^2
    assert rep["test_loss"] >= rep["test_payoff_variance"]
    assert not (tmp_path / "model.ckpt").exists()


def test_train_evaluate_reproducible(tmp_path):
    for d in ("a", "b"):
        out = tmp_path / d
        assert run("train", "--model", "sig-linear", "--out", out, *SMALL, "--set", "train.learning_rate=0.01") == 0
        assert run("evaluate", "--model", "sig-linear", "--checkpoint", out / "model.ckpt", "--out", out, *SMALL,
                   "--threads", 1 if d == "a" else 4) == 0
    for name in ("losses.csv", "pnl.csv", "wealth.csv", "pnl_summary.json"):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name), name
    summary = json.loads((tmp_path / "a" / "pnl_summary.json").read_text())
    assert summary["pnl"]["mse"] < summary["zero_strategy"]["mse"]
    rows = list(csv.reader(open(tmp_path / "a" / "wealth.csv")))
    assert rows[0] == ["step", "t", "wealth"] and len(rows) == 8


def test_evaluate_zero_strategy(tmp_path):
    assert run("evaluate", "--model", "zero", "--out", tmp_path, *SMALL) == 0
    pnl = np.loadtxt(tmp_path / "pnl.csv", delimiter=",", skiprows=1)[:, 1]
    s = json.loads((tmp_path / "pnl_summary.json").read_text())
    p0 = s["p0"]
    spec = MarketSpec(RBergomiParams(maturity=0.0164383561643835, t_fwd=0.1), TimeGrid(6, 0.0164383561643835))
    z = simulate(spec, 64, derive_seed(0, TEST)).payoff()
    np.testing.assert_allclose(pnl, p0 - z, rtol=0, atol=1e-15)


def test_checkpoint_mismatch(tmp_path):
    assert run("train", "--model", "sig-linear", "--out", tmp_path, *SMALL) == 0
    assert run("evaluate", "--model", "rnn", "--checkpoint", tmp_path / "model.ckpt", "--out", tmp_path, *SMALL) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"nonsense")
    assert run("evaluate", "--model", "sig-linear", "--checkpoint", tmp_path / "junk.ckpt", "--out", tmp_path) == 2


def test_attention_dump(tmp_path):
    assert run("train", "--model", "sigformer", "--out", tmp_path, *SMALL, *TINY_SF) == 0
    assert run("attention", "--model", "sigformer", "--checkpoint", tmp_path / "model.ckpt", "--out", tmp_path,
               "--path", 3, *SMALL, *TINY_SF) == 0
    files = sorted(p.name for p in (tmp_path / "attention").iterdir())
    assert files == ["L1_S1_H1.csv", "L1_S1_H2.csv", "L1_S2_H1.csv", "L1_S2_H2.csv", "features.csv"]
    mat = np.loadtxt(tmp_path / "attention" / "L1_S2_H2.csv", delimiter=",", skiprows=1)[:, 1:]
    np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(mat[np.triu_indices(6, 1)] == 0.0)
    feats = np.loadtxt(tmp_path / "attention" / "features.csv", delimiter=",", skiprows=1)
    spec = MarketSpec(RBergomiParams(maturity=0.0164383561643835, t_fwd=0.1), TimeGrid(6, 0.0164383561643835))
    m = simulate(spec, 64, derive_seed(0, TEST))
    np.testing.assert_allclose(feats[:, 2], m.S[3, :-1])


def test_ablate_manifest(tmp_path):
    assert run("ablate", "--out", tmp_path, *SMALL, *TINY_SF, "--set", "ablate.sig_depths=[1,2]",
               "--set", "ablate.n_layers=[2]") == 0
    man = json.loads((tmp_path / "ablation_manifest.json").read_text())
    names = [v["variant"] for v in man["variants"]]
    assert names == ["sigformer", "transformer", "sig-linear", "sigformer-depth1", "sigformer-depth2",
                     "sigformer-layers2"]
    assert man["depth4_over_depth3_runtime"] is None
    rows = list(csv.DictReader(open(tmp_path / "ablation_losses.csv")))
    assert {r["variant"] for r in rows} == set(names)
    # shared validation set and frozen p0: every variant starts from the same zero-strategy loss
    first = {r["val_loss"] for r in rows if r["step"] == "0"}
    assert len(first) == 1


def write_market_csv(path, dates, prices, vols, fwd=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "underlying_price", "vol_index"] + (["fwd_var"] if fwd is not None else []))
        for i, d in enumerate(dates):
            row = [prices[i], vols[i]] + ([fwd[i]] if fwd is not None else [])
            w.writerow([d.isoformat()] + [repr(float(x)) for x in row])


def days(start, n):
    return [start + dt.timedelta(days=i) for i in range(n)]


def test_backtest_constant_prices_are_flat(tmp_path):
    d = days(dt.date(2022, 1, 3), 20) + days(dt.date(2022, 2, 1), 15)
    write_market_csv(tmp_path / "m.csv", d, [100.0] * 35, [25.0] * 35)
    assert run("backtest", "--model", "zero", "--input", tmp_path / "m.csv", "--out", tmp_path,
               "--set", "backtest.pricing_size=2000") == 0
    rows = list(csv.DictReader(open(tmp_path / "wealth.csv")))
    monthly = list(csv.DictReader(open(tmp_path / "monthly.csv")))
    assert [m["month"] for m in monthly] == ["2022-01", "2022-02"]
    p_jan = float(monthly[0]["p0"])
    jan = [float(r["wealth"]) for r in rows if r["month"] == "2022-01"]
    assert jan[:-1] == [p_jan] * 19
    assert jan[-1] == p_jan  # at the money: Z = 0
    assert float(monthly[1]["cumulative_pnl"]) == pytest.approx(p_jan + float(monthly[1]["p0"]), rel=1e-12)


def test_backtest_schema_errors(tmp_path):
    write_market_csv(tmp_path / "m.csv", days(dt.date(2022, 1, 3), 5)[::-1], [1.0] * 5, [20.0] * 5)
    assert run("backtest", "--model", "zero", "--input", tmp_path / "m.csv", "--out", tmp_path) == 2
    write_market_csv(tmp_path / "n.csv", days(dt.date(2022, 1, 3), 5), [1.0, 1.0, -1.0, 1.0, 1.0], [20.0] * 5)
    assert run("backtest", "--model", "zero", "--input", tmp_path / "n.csv", "--out", tmp_path) == 2
    (tmp_path / "o.csv").write_text("date,price\n2022-01-01,1\n")
    assert run("backtest", "--model", "zero", "--input", tmp_path / "o.csv", "--out", tmp_path) == 2
    write_market_csv(tmp_path / "p.csv", days(dt.date(2022, 1, 3), 5), [1.0] * 5, [20.0] * 5)
    assert run("backtest", "--model", "zero", "--input", tmp_path / "p.csv", "--out", tmp_path,
               "--set", "backtest.months={}") == 2
    assert run("backtest", "--model", "zero", "--out", tmp_path) == 2


def test_backtest_matches_evaluate_on_simulated_path(tmp_path):
    """A simulated path fed through the backtest reproduces the evaluate PnL."""
    p = RBergomiParams()
    month = json.dumps({"01": {"hurst": p.hurst, "rho": p.rho, "eta": p.eta, "xi": p.xi}})
    common = ["--set", "train.n_steps_train=3", "--set", "train.batch_size=64", "--set", "train.val_size=64",
              "--set", "train.test_size=64", "--set", "train.pricing_size=3000", "--set", "eval.n_paths=4",
              "--set", "backtest.pricing_size=3000", "--set", f"backtest.months={month}",
              "--set", "backtest.fwd_var_column=fwd_var", "--set", "train.learning_rate=0.01"]
    assert run("train", "--model", "sig-linear", "--out", tmp_path, *common) == 0
    ckpt = tmp_path / "model.ckpt"
    assert run("evaluate", "--model", "sig-linear", "--checkpoint", ckpt, "--out", tmp_path, *common) == 0
    pnl = np.loadtxt(tmp_path / "pnl.csv", delimiter=",", skiprows=1)[:, 1]
    m = simulate(MarketSpec(), 4, derive_seed(0, TEST))
    path = 2
    write_market_csv(tmp_path / "sim.csv", days(dt.date(2022, 1, 1), 31), list(m.S[path]),
                     list(100 * np.sqrt(m.V[path])), list(m.theta[path]))
    out = tmp_path / "bt"
    assert run("backtest", "--model", "sig-linear", "--checkpoint", ckpt, "--input", tmp_path / "sim.csv",
               "--out", out, *common) == 0
    monthly = list(csv.DictReader(open(out / "monthly.csv")))
    assert len(monthly) == 1
    assert float(monthly[0]["pnl"]) == pytest.approx(pnl[path], abs=1e-12)
