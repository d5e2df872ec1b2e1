import csv
import math

import numpy as np
import pytest

from pact import autodiff as ad
from pact.models import AdaptiveRnnSpec, GridModelSpec, ResidualStackSpec, build_model
from pact.stochastic import EstimatorState, RngStream
from pact.train import (Adam, DivergenceError, SGDMomentum, TrainConfig, estimator_config, evaluate,
                        loss_act, loss_reinforce, loss_relaxed, make_dataset, make_optimizer, metrics_header,
                        sweep_tau, train, variance_bench)
from helpers import check_grads


def quadratic_grad(p, a):
    p.zero_grad()
    with ad.new_tape():
        (0.5 * (p * p * a).sum()).backward()


def test_sgd_momentum_closed_form():
    a = np.array([1.0, 3.0, -0.5])
    x0 = np.array([0.4, -1.0, 2.0])
    p = ad.parameter(x0.copy())
    opt = SGDMomentum([p], momentum=0.9)
    quadratic_grad(p, a)
    opt.step(0.1)
    g0 = a * x0
    x1 = x0 - 0.1 * g0
    np.testing.assert_allclose(p.value, x1, rtol=0, atol=1e-15)
    quadratic_grad(p, a)
    opt.step(0.1)
    np.testing.assert_allclose(p.value, x1 - 0.1 * (0.9 * g0 + a * x1), rtol=0, atol=1e-15)


def test_sgd_weight_decay_adds_to_gradient():
    p = ad.parameter(np.array([2.0]))
    p.adjoint[...] = 0.0
    SGDMomentum([p], momentum=0.9, weight_decay=0.1).step(0.5)
    np.testing.assert_allclose(p.value, [2.0 - 0.5 * 0.2], atol=1e-15)


def test_adam_matches_published_update():
    a = np.array([1.0, 3.0, -0.5])
    x = np.array([0.4, -1.0, 2.0])
    p = ad.parameter(x.copy())
    opt = Adam([p])
    m = v = np.zeros(3)
    for t in (1, 2, 3):
        quadratic_grad(p, a)
        g = a * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        opt.step(1e-3)
        np.testing.assert_allclose(p.value, x, rtol=0, atol=1e-12)


def test_optimizer_defaults():
    r = TrainConfig(estimator="reinforce").resolved("residual")
    assert (r.optimizer, r.lr) == ("adam", 1e-3)
    c = TrainConfig(estimator="concrete").resolved("residual")
    assert (c.optimizer, c.lr, c.momentum) == ("sgd", 0.1, 0.9)
    assert TrainConfig().resolved("grid").lr == 0.03
    assert TrainConfig(lr=0.5).resolved("grid").lr == 0.5
    assert TrainConfig(estimator="reinforce", optimizer="sgd").resolved().lr == 0.1
    with pytest.raises(ValueError):
        make_optimizer([], TrainConfig())


def test_estimator_config_for_variance_arms():
    cfg = TrainConfig(lr=0.02, steps=10)
    rein = estimator_config(cfg, "reinforce").resolved("grid")
    conc = estimator_config(cfg, "concrete").resolved("grid")
    assert (rein.optimizer, rein.lr) == ("adam", 1e-3)
    assert (conc.optimizer, conc.lr) == ("sgd", 0.02)
    conc = estimator_config(TrainConfig(optimizer="adam", lr=1e-4), "concrete", 5).resolved("grid")
    assert (conc.optimizer, conc.lr, conc.steps) == ("sgd", 0.03, 5)


def test_learning_rate_milestones():
    cfg = TrainConfig(steps=100).resolved("residual")
    lrs = [cfg.lr_at(s) for s in (0, 59, 60, 74, 75, 89, 90, 99)]
    np.testing.assert_allclose(lrs, [0.1, 0.1, 0.01, 0.01, 1e-3, 1e-3, 1e-4, 1e-4], rtol=1e-12)


SPEC = ResidualStackSpec(blocks=2, max_iters=3, width=6)


def forward_batch(mode, seed=0, n=16, **kw):
    model = build_model(SPEC, seed=seed)
    rng = np.random.default_rng(seed)
    for name, t in model.params.items():
        if name.endswith(".w") and model.tags[name] == "phi":
            t.value = rng.normal(size=t.shape)
    ds = make_dataset(SPEC, seed, n)
    x, y = ds.batch(0)
    return model, x, y


@pytest.mark.parametrize("mode,loss", [("relaxed", loss_relaxed), ("act", loss_act)])
def test_loss_decomposes_into_parts(mode, loss):
    model, x, y = forward_batch(mode)
    res = model.forward(x, mode, RngStream(0, 3))
    parts = loss(model, res, y, 0.05)
    assert abs(parts.loss.item() - (-(parts.loglik - parts.penalty))) <= 1e-10
    assert parts.objective == pytest.approx(parts.loss.item(), abs=1e-10)


def test_reinforce_objective_decomposes():
    model, x, y = forward_batch("discrete")
    res = model.forward(x, "discrete", RngStream(0, 3), full_horizon=True)
    parts = loss_reinforce(model, res, y, 0.05, EstimatorState("reinforce"))
    assert abs(parts.objective - (-(parts.loglik - parts.penalty))) <= 1e-10


def test_zero_penalty_loss_is_cross_entropy():
    model, x, y = forward_batch("relaxed")
    res = model.forward(x, "relaxed", RngStream(0, 3))
    parts = loss_relaxed(model, res, y, 0.0)
    assert parts.loss.item() == ad.softmax_cross_entropy(res.logp, y).mean().item()
    assert parts.penalty == 0.0


def test_doubling_tau_doubles_penalty():
    model, x, y = forward_batch("relaxed")
    res = model.forward(x, "relaxed", RngStream(0, 3))
    a, b = loss_relaxed(model, res, y, 0.03), loss_relaxed(model, res, y, 0.06)
    assert b.penalty == pytest.approx(2 * a.penalty, rel=1e-15)
    assert b.loglik == a.loglik


def test_penalty_gradient_matches_finite_differences():
    model, x, y = forward_batch("relaxed")
    heads = [t for n, t in model.params.items() if model.tags[n] == "phi"]

    def penalty():
        res = model.forward(x, "relaxed", RngStream(0, 3), clip=0.0)
        return 0.05 * model.expected_cost(res.traces).mean()
    assert check_grads(penalty, heads) <= 0.0


def test_losses_reject_wrong_mode():
    model, x, y = forward_batch("relaxed")
    relaxed = model.forward(x, "relaxed", RngStream(0, 3))
    discrete = model.forward(x, "discrete", RngStream(0, 3))
    with pytest.raises(ValueError):
        loss_relaxed(model, discrete, y, 0.01)
    with pytest.raises(ValueError):
        loss_act(model, relaxed, y, 0.01)
    with pytest.raises(ValueError):
        loss_reinforce(model, relaxed, y, 0.01, EstimatorState("reinforce"))


def test_saturated_heads_leave_no_score_gradient():
    model, x, y = forward_batch("discrete")
    for name, t in model.params.items():
        if model.tags[name] == "phi":
            t.value = np.full(t.shape, 30.0) if name.endswith(".b") else np.zeros(t.shape)
    model.zero_grad()
    with ad.new_tape():
        res = model.forward(x, "discrete", RngStream(0, 3), full_horizon=True)
        loss_reinforce(model, res, y, 0.0, EstimatorState("reinforce", baseline=0.3)).loss.backward()
    assert np.linalg.norm(model.grad_vector("phi")) < 1e-6


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


def test_metrics_file_layout(tmp_path):
    cfg = TrainConfig(steps=12, batch_size=16, log_every=5, probe_window=4)
    run = train(SPEC, cfg, metrics_path=tmp_path / "m.csv")
    rows = read_csv(tmp_path / "m.csv")
    assert rows[0] == ["step", "loss", "loglik", "penalty", "mean_n_block1", "mean_n_block2", "flops",
                       "accuracy", "grad_logvar", "wall_ms"]
    assert [r[0] for r in rows[1:]] == ["0", "5", "10", "11"]
    assert rows[1][8] == "" and rows[3][8] != ""
    assert all(r[9] == "" for r in rows[1:])
    for r, m in zip(rows[1:], run.metrics):
        assert float(r[1]) == m.loss
        assert abs(m.loss - (-(m.loglik - m.penalty))) <= 1e-10
    assert metrics_header(AdaptiveRnnSpec())[4:6] == ["mean_n_block1", "flops"]


def test_wall_time_column_when_requested(tmp_path):
    train(SPEC, TrainConfig(steps=2, batch_size=8, record_wall_time=True), metrics_path=tmp_path / "m.csv")
    assert all(float(r[9]) > 0 for r in read_csv(tmp_path / "m.csv")[1:])


@pytest.mark.parametrize("estimator", ["concrete", "reinforce", "act"])
def test_training_is_deterministic(estimator, tmp_path):
    cfg = TrainConfig(estimator=estimator, steps=15, batch_size=16, log_every=3, seed=5)
    for name in ("a", "b"):
        train(SPEC, cfg, metrics_path=tmp_path / f"{name}.csv", checkpoint_path=tmp_path / f"{name}.pact")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.pact").read_bytes() == (tmp_path / "b.pact").read_bytes()
    train(SPEC, TrainConfig(estimator=estimator, steps=15, batch_size=16, log_every=3, seed=6),
          metrics_path=tmp_path / "c.csv")
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_divergence_writes_diagnostic_row(tmp_path):
    with np.errstate(all="ignore"), pytest.raises(DivergenceError):
        train(SPEC, TrainConfig(steps=200, lr=1e6, log_every=1000), metrics_path=tmp_path / "m.csv")
    last = read_csv(tmp_path / "m.csv")[-1]
    assert last[1] == "nan" or not math.isfinite(float(last[1]))


def test_training_reduces_loss():
    run = train(SPEC, TrainConfig(steps=300, batch_size=32, log_every=50))
    first, last = run.metrics[0], run.metrics[-1]
    assert last.loss < first.loss - 0.5
    assert last.accuracy > 0.6


@pytest.mark.parametrize("estimator", ["concrete", "reinforce", "act"])
def test_rnn_and_grid_train_steps(estimator):
    for spec in (AdaptiveRnnSpec(hidden=6), GridModelSpec(blocks=2, channels=2)):
        run = train(spec, TrainConfig(estimator=estimator, steps=2, batch_size=4, log_every=1))
        assert len(run.metrics) == 2 and all(math.isfinite(m.loss) for m in run.metrics)


def test_untrained_classifier_scores_chance():
    model = build_model(SPEC)
    model.params["cls.w"].value = np.zeros_like(model.params["cls.w"].value)
    ds = make_dataset(SPEC, 3, 64)
    ev = evaluate(model, "thresholded", ds, 2000, seed=3)
    assert abs(ev["accuracy"] - 0.25) <= 3 * math.sqrt(0.25 * 0.75 / 2000)
    assert ev["loglik"] == pytest.approx(-math.log(4), abs=1e-12)


def test_evaluate_reports_and_flags_cross_family():
    model = build_model(SPEC)
    ds = make_dataset(SPEC, 0, 64)
    rows = {m: evaluate(model, m, ds, 300, seed=1, trained_with="concrete")
            for m in ("relaxed", "discrete", "thresholded", "act")}
    assert rows["act"]["note"] and not rows["discrete"]["note"]
    assert rows["thresholded"]["mean_n"] == 3.0
    for r in rows.values():
        assert set(r) == {"mode", "accuracy", "loglik", "mean_n", "expected_n", "flops", "note"}
        assert 1.0 <= r["mean_n"] <= 3.0
    again = evaluate(model, "discrete", ds, 300, seed=1)
    assert again["accuracy"] == rows["discrete"]["accuracy"] and again["flops"] == rows["discrete"]["flops"]


def test_trained_relaxed_checkpoint_mode_ordering():
    run = train(SPEC, TrainConfig(steps=400, batch_size=32, tau=0.05))
    ds = make_dataset(SPEC, 0, 32)
    ev = {m: evaluate(run.model, m, ds, 1000) for m in ("relaxed", "discrete", "thresholded")}
    assert ev["thresholded"]["flops"] <= ev["relaxed"]["flops"]
    assert ev["thresholded"]["mean_n"] <= ev["relaxed"]["mean_n"]


def test_sweep_rows_and_variance_validation():
    rows = sweep_tau(SPEC, TrainConfig(steps=3, batch_size=8), [0.0, 0.5], eval_size=50)
    assert [r["tau"] for r in rows] == [0.0, 0.5]
    assert set(rows[0]) == {"tau", "accuracy", "flops", "mean_n"}
    with pytest.raises(ValueError):
        variance_bench(GridModelSpec(), [4, 4], TrainConfig(steps=1))


def test_variance_bench_rows():
    spec = GridModelSpec(blocks=2, max_iters=2, channels=2)
    rows = variance_bench(spec, [1, 16], TrainConfig(steps=4, batch_size=4, log_every=1, probe_window=2),
                          eval_size=20)
    assert {(r["M"], r["estimator"]) for r in rows} == {(320, "reinforce"), (320, "concrete"),
                                                        (2, "reinforce"), (2, "concrete")}
    assert {r["optimizer"] for r in rows if r["estimator"] == "reinforce"} == {"adam"}
    assert {r["optimizer"] for r in rows if r["estimator"] == "concrete"} == {"sgd"}
    for r in rows:
        if r["step"] >= 1:
            assert math.isfinite(r["grad_logvar"])
