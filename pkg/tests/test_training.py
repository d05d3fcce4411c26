import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sighedge.baselines import build_model
from sighedge.errors import ConfigError, NumericalError
from sighedge.rbergomi import TimeGrid
from sighedge.seeding import TEST, derive_seed
from sighedge.training import (
    AdamConfig,
    MarketSpec,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    estimate_p0,
    flatten_params,
    grad,
    hedging_loss,
    make_data,
    param_index,
    set_flat_params,
    train,
)

SPEC = MarketSpec(grid=TimeGrid(6, 6 / 365))
QUICK = TrainConfig(n_steps_train=6, eval_every=3, batch_size=64, val_size=128, test_size=128,
                    pricing_size=2000, learning_rate=1e-2, seed=4)


def test_loss_matches_numpy():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(5, 3, 2))
    inst = rng.normal(size=(5, 4, 2))
    z = rng.normal(size=5)
    gains = sum(d[:, k] * (inst[:, k + 1] - inst[:, k]) for k in range(3)).sum(axis=1)
    expected = np.mean((0.3 + gains - z) ** 2)
    assert float(hedging_loss(torch.as_tensor(d), inst, z, 0.3)) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        hedging_loss(torch.as_tensor(d[:, :2]), inst, z, 0.3)


def test_loss_accumulates_in_double():
    d = torch.zeros(2, 1, 1, dtype=torch.float32, requires_grad=True)
    loss = hedging_loss(d, np.zeros((2, 2, 1)), np.array([1.0, 3.0]), 2.0)
    assert loss.dtype == torch.float64


def test_estimate_p0():
    assert estimate_p0([1.0, 2.0, 6.0]) == 3.0
    with pytest.raises(ValueError):
        estimate_p0([])


def test_grad_errors_and_unused_parameters():
    a = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
    b = torch.nn.Parameter(torch.tensor([5.0], dtype=torch.float64))
    g = grad(lambda: (a**2).sum(), [a, b])
    np.testing.assert_array_equal(g, [2.0, 4.0, 0.0])
    with pytest.raises(RuntimeError):
        grad(lambda: torch.tensor(1.0), [a])
    with pytest.raises(TypeError):
        grad(lambda: a * 2, [a])


def test_flat_round_trip():
    m = build_model("rnn", {"hidden": 4, "n_layers": 2})
    x = flatten_params(m)
    idx = param_index(m)
    assert idx[-1][1] + int(np.prod(idx[-1][2])) == len(x)
    set_flat_params(m, np.arange(len(x), dtype=np.float64))
    np.testing.assert_array_equal(flatten_params(m), np.arange(len(x), dtype=np.float32))
    with pytest.raises(ValueError):
        set_flat_params(m, np.zeros(3))


def test_adam_first_step_is_signed_learning_rate():
    cfg = AdamConfig(learning_rate=0.1)
    g = np.array([3.0, -0.01, 0.0])
    p, (m, v) = adam_step(np.zeros(3), g, (np.zeros(3), np.zeros(3)), 1, cfg)
    np.testing.assert_allclose(p[:2], [-0.1, 0.1], rtol=1e-6)
    assert p[2] == 0.0
    np.testing.assert_allclose(m, 0.1 * g)
    with pytest.raises(ValueError):
        adam_step(p, g, (m, v), 0, cfg)


def test_adam_works_on_tensors():
    p, _ = adam_step(torch.ones(2), torch.ones(2), (torch.zeros(2), torch.zeros(2)), 1, AdamConfig(0.5))
    torch.testing.assert_close(p, torch.full((2,), 0.5))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4))
def test_adam_minimises_quadratic(target):
    target = np.array(target)
    p = np.zeros_like(target)
    moments = (np.zeros_like(p), np.zeros_like(p))
    # constant-step Adam hovers at the step scale, so decay the step
    for t in range(1, 3001):
        lr = 0.05 / (1 + t / 100)
        p, moments = adam_step(p, 2 * (p - target), moments, t, AdamConfig(learning_rate=lr))
    np.testing.assert_allclose(p, target, atol=5e-3)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"batch_size": 0}, {"n_steps_train": -1},
                                {"beta1": 1.0}, {"grad_clip": -1.0}, {"eval_every": 0}])
def test_train_config_rejects(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def _fresh(name="sig-linear"):
    torch.manual_seed(0)
    return build_model(name, {"sig_depth": 2} if name == "sig-linear" else {"hidden": 8})


def test_train_rows_and_determinism():
    _, r1 = train(_fresh(), SPEC, QUICK)
    _, r2 = train(_fresh(), SPEC, QUICK)
    assert r1.steps == [0, 3, 6]
    assert r1.train_losses == r2.train_losses and r1.val_losses == r2.val_losses
    assert r1.test_loss == r2.test_loss
    test = make_data(SPEC, QUICK.test_size, derive_seed(QUICK.seed, TEST))
    assert r1.zero_strategy_test_loss == pytest.approx(np.mean((r1.p0 - test.payoff) ** 2), rel=1e-14)
    # zero-initialised output: the first row is the zero-strategy loss on the validation set
    assert r1.val_losses[0] > r1.val_losses[-1]


def test_report_files(tmp_path):
    _, rep = train(_fresh(), SPEC, QUICK, name="sig-linear")
    rep.write_losses_csv(tmp_path / "losses.csv")
    rep.write_json(tmp_path / "r.json")
    lines = (tmp_path / "losses.csv").read_text().splitlines()
    assert lines[0] == "step,train_loss,val_loss"
    assert float(lines[1].split(",")[1]) == rep.train_losses[0]
    assert '"schema_version": 1' in (tmp_path / "r.json").read_text()


def test_shared_p0_is_used():
    _, rep = train(_fresh(), SPEC, QUICK, p0=0.5)
    assert rep.p0 == 0.5


def test_gradient_clipping_limits_first_update():
    cfg = TrainConfig(**{**QUICK.__dict__, "n_steps_train": 1, "grad_clip": 1e-12})
    m = _fresh()
    before = flatten_params(m)
    train(m, SPEC, cfg)
    # Adam normalises the step, so the clipped update still has size lr per active coordinate
    assert np.max(np.abs(flatten_params(m) - before)) <= cfg.learning_rate * (1 + 1e-6)


class _Exploding(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.calls = 0

    def forward(self, features):
        self.calls += 1
        x = torch.as_tensor(features)
        out = torch.zeros(x.shape[:-1] + (2,), dtype=torch.float64) + self.w
        return out * (float("nan") if self.calls > 4 else 1.0)


def test_divergence_raises_with_partial_report():
    cfg = TrainConfig(**{**QUICK.__dict__, "eval_every": 1})
    with pytest.raises(TrainingDiverged) as exc:
        train(_Exploding(), SPEC, cfg)
    rep = exc.value.report
    assert rep.diverged and len(rep.steps) >= 1
    assert isinstance(exc.value, NumericalError)
