"""Objectives, optimizers, training and evaluation loops."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from pydantic import ConfigDict

from . import autodiff as ad
from .autodiff import Tensor
from .data import TASKS, Dataset
from .models import ForwardResult, GridModelSpec, Model, build_model, save_checkpoint
from .stochastic import EstimatorState, RngStream, VarianceProbe, reinforce_surrogate

log = logging.getLogger(__name__)

NOISE_STREAM = 3
EVAL_STREAM = 4
TRAIN_MODE = {"concrete": "relaxed", "reinforce": "discrete", "act": "act"}
ADAM_LR = 1e-3
# the grid CNN has no normalization layers and diverges at 0.1
SGD_LR = {"residual": 0.1, "grid": 0.03, "rnn": 0.1}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class TrainConfig:
    __pydantic_config__ = ConfigDict(extra="forbid")
    estimator: Literal["concrete", "reinforce", "act"] = "concrete"
    optimizer: Literal["auto", "sgd", "adam"] = "auto"
    lr: float | None = None
    momentum: float = 0.9
    milestones: tuple[float, ...] = (0.6, 0.75, 0.9)
    lr_decay: float = 0.1
    weight_decay: float = 0.0
    batch_size: int = 64
    steps: int = 2000
    tau: float = 0.01
    temperature: float = 2.0 / 3.0
    clip: float = 0.01
    act_eps: float = 0.01
    seed: int = 0
    log_every: int = 50
    probe_window: int = 16
    probe_params: Literal["all", "phi", "theta"] = "all"
    record_wall_time: bool = False

    def resolved(self, model_kind: str | None = None) -> "TrainConfig":
        """Fill in optimizer and learning rate from the estimator and model kind."""
        opt = self.optimizer
        if opt == "auto":
            opt = "adam" if self.estimator == "reinforce" else "sgd"
        lr = self.lr
        if lr is None:
            lr = ADAM_LR if opt == "adam" else SGD_LR.get(model_kind, 0.1)
        return dataclasses.replace(self, optimizer=opt, lr=lr)

    def block_kw(self) -> dict:
        return {"temperature": self.temperature, "clip": self.clip, "act_eps": self.act_eps}

    def lr_at(self, step: int) -> float:
        """Learning rate after the milestone decays; call on a resolved config."""
        lr = self.resolved().lr
        for frac in self.milestones:
            if step >= int(round(frac * self.steps)):
                lr *= self.lr_decay
        return lr


# -- optimizers ------------------------------------------------------------------


class SGDMomentum:
    """v <- momentum * v + g;  theta <- theta - lr * v."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def step(self, lr: float):
        for p, v in zip(self.params, self.velocity):
            g = p.adjoint + self.weight_decay * p.value
            v *= self.momentum
            v += g
            p.value = np.asarray(p.value - lr * v)


class Adam:
    def __init__(self, params: Sequence[Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.adjoint + self.weight_decay * p.value
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.value = np.asarray(p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps))


def make_optimizer(params, cfg: TrainConfig):
    """Optimizer for a resolved config."""
    if cfg.lr is None or cfg.optimizer == "auto":
        raise ValueError("make_optimizer needs a resolved TrainConfig")
    if cfg.optimizer == "adam":
        return Adam(params, weight_decay=cfg.weight_decay)
    return SGDMomentum(params, cfg.momentum, cfg.weight_decay)


# -- objectives ------------------------------------------------------------------


@dataclass
class LossParts:
    loss: Tensor
    loglik: float          # batch mean of log p(y | z, x)
    penalty: float         # batch mean of sum_k tau_k N_k (or rho_k for ACT)
    objective: float       # -(loglik - penalty)
    loglik_vec: np.ndarray = field(repr=False, default=None)


def _check_mode(result: ForwardResult, expected: str):
    for tr in result.traces:
        if tr.mode != expected:
            raise ValueError(f"traces come from {tr.mode!r} mode, this objective needs {expected!r}")


def _parts(loss, ll: Tensor, pen: Tensor) -> LossParts:
    llv, pv = float(ll.value.mean()), float(pen.value.mean())
    return LossParts(loss, llv, pv, -(llv - pv), ll.value.copy())


def loss_relaxed(model: Model, result: ForwardResult, y, tau: float) -> LossParts:
    """-log p(y | z_hat, x) + sum_k tau_k N_k, averaged over the batch."""
    _check_mode(result, "relaxed")
    ll = model.log_likelihood(result, y)
    pen = tau * model.expected_cost(result.traces)
    return _parts((pen - ll).mean(), ll, pen)


def loss_act(model: Model, result: ForwardResult, y, tau: float) -> LossParts:
    """-log p(y | z_hat, x) + sum_k tau_k rho_k."""
    _check_mode(result, "act")
    ll = model.log_likelihood(result, y)
    pen = tau * model.expected_cost(result.traces, "ponder")
    return _parts((pen - ll).mean(), ll, pen)


def loss_reinforce(model: Model, result: ForwardResult, y, tau: float, state: EstimatorState) -> LossParts:
    """Surrogate for discrete traces; ``loss`` is differentiated, ``objective`` logged."""
    _check_mode(result, "discrete")
    ll = model.log_likelihood(result, y)
    pen = tau * model.expected_cost(result.traces)
    surrogate = reinforce_surrogate(ll, model.log_q(result.traces), pen, state)
    return _parts(surrogate, ll, pen)


# -- metrics ---------------------------------------------------------------------


def num_block_columns(spec) -> int:
    return 1 if spec.kind == "rnn" else spec.blocks


def metrics_header(spec) -> list[str]:
    k = num_block_columns(spec)
    return (["step", "loss", "loglik", "penalty"] + [f"mean_n_block{i}" for i in range(1, k + 1)]
            + ["flops", "accuracy", "grad_logvar", "wall_ms"])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isinf(v) and v < 0 else repr(v)


@dataclass
class RunMetrics:
    step: int
    loss: float
    loglik: float
    penalty: float
    mean_n: list[float]
    flops: float
    accuracy: float
    grad_logvar: float | None = None
    wall_ms: float | None = None

    def to_row(self) -> list[str]:
        return ([_fmt(self.step), _fmt(self.loss), _fmt(self.loglik), _fmt(self.penalty)]
                + [_fmt(n) for n in self.mean_n]
                + [_fmt(self.flops), _fmt(self.accuracy), _fmt(self.grad_logvar), _fmt(self.wall_ms)])


def block_means(model: Model, result: ForwardResult, field_name: str = "expected") -> list[float]:
    if model.spec.kind == "rnn":
        return [float(np.mean([getattr(t, field_name).value.mean() for t in result.traces]))]
    return [float(getattr(t, field_name).value.mean()) for t in result.traces]


# -- training --------------------------------------------------------------------


def make_dataset(spec, seed: int, batch_size: int) -> Dataset:
    return Dataset(TASKS[spec.task](), seed, batch_size)


@dataclass
class TrainResult:
    model: Model
    metrics: list[RunMetrics]
    config: TrainConfig
    diverged: bool = False


def train(spec, cfg: TrainConfig, dataset: Dataset | None = None, *, metrics_path=None,
          checkpoint_path=None, extra_meta: dict | None = None) -> TrainResult:
    """Train ``spec`` under ``cfg``; deterministic for a given seed.

    A non-finite loss appends a diagnostic row to the metrics file and raises
    :class:`DivergenceError`.
    """
    cfg = cfg.resolved(spec.kind)
    model = build_model(spec, seed=cfg.seed)
    dataset = dataset or make_dataset(spec, cfg.seed, cfg.batch_size)
    opt = make_optimizer(list(model.params.values()), cfg)
    state = EstimatorState("reinforce" if cfg.estimator == "reinforce" else "concrete",
                           temperature=cfg.temperature)
    probe = VarianceProbe(cfg.probe_window)
    probe_tag = None if cfg.probe_params == "all" else cfg.probe_params
    mode = TRAIN_MODE[cfg.estimator]
    rows: list[RunMetrics] = []
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(metrics_header(spec))
    try:
        for step in range(cfg.steps):
            t0 = time.perf_counter()
            x, y = dataset.batch(step)
            model.zero_grad()
            with ad.new_tape():
                res = model.forward(x, mode, RngStream(cfg.seed, NOISE_STREAM, step),
                                    full_horizon=(mode == "discrete"), **cfg.block_kw())
                if cfg.estimator == "concrete":
                    parts = loss_relaxed(model, res, y, cfg.tau)
                elif cfg.estimator == "act":
                    parts = loss_act(model, res, y, cfg.tau)
                else:
                    parts = loss_reinforce(model, res, y, cfg.tau, state)
                if not np.isfinite(parts.loss.value).all():
                    row = RunMetrics(step, parts.objective, parts.loglik, parts.penalty,
                                     [math.nan] * num_block_columns(spec), res.flops, math.nan)
                    rows.append(row)
                    if writer:
                        writer.writerow(row.to_row())
                    raise DivergenceError(f"non-finite loss at step {step}")
                parts.loss.backward()
            opt.step(cfg.lr_at(step))
            if cfg.estimator == "reinforce":
                state.update(parts.loglik)
            logvar = probe.push(model.grad_vector(probe_tag))
            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                row = RunMetrics(step, parts.objective, parts.loglik, parts.penalty,
                                 block_means(model, res), res.flops, float(model.correct(res, y).mean()),
                                 logvar,
                                 (time.perf_counter() - t0) * 1e3 if cfg.record_wall_time else None)
                rows.append(row)
                if writer:
                    writer.writerow(row.to_row())
        if not all(np.isfinite(p.value).all() for p in model.params.values()):
            raise DivergenceError(f"non-finite parameters after step {cfg.steps - 1}")
    finally:
        if fh:
            fh.close()
    if checkpoint_path is not None:
        meta = {"estimator": cfg.estimator, "seed": cfg.seed, "steps": cfg.steps, "tau": cfg.tau}
        meta.update(extra_meta or {})
        save_checkpoint(checkpoint_path, model, meta)
    return TrainResult(model, rows, cfg)


def write_metrics(path, spec, rows: Sequence[RunMetrics]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(metrics_header(spec))
        for r in rows:
            w.writerow(r.to_row())


# -- evaluation ------------------------------------------------------------------

EVAL_COLUMNS = ["mode", "accuracy", "loglik", "mean_n", "expected_n", "flops", "note"]


def evaluate(model: Model, mode: str, dataset: Dataset, n: int = 2000, *, seed: int = 0,
             temperature: float = 2.0 / 3.0, clip: float = 0.01, act_eps: float = 0.01,
             trained_with: str | None = None) -> dict:
    """Accuracy, mean executed iterations per latent, and FLOPs per example.

    ``mean_n`` counts executed iterations (the realized z in discrete and
    thresholded modes); ``expected_n`` is the analytic N from the heads.
    """
    correct = ll = flops = executed = expected = 0.0
    count = 0
    with ad.no_grad():
        for i, (x, y) in enumerate(dataset.test_batches(n)):
            res = model.forward(x, mode, RngStream(seed, EVAL_STREAM, i), temperature=temperature,
                                clip=clip, act_eps=act_eps)
            b = len(y)
            correct += float(model.correct(res, y).sum())
            ll += float(model.log_likelihood(res, y).value.sum())
            flops += res.flops * b
            executed += res.executed_iterations * b
            expected += float(np.mean([t.expected.value.mean() for t in res.traces])) * b
            count += b
    note = ""
    if trained_with is not None and (trained_with == "act") != (mode == "act"):
        note = f"cross-family: trained with {trained_with}, evaluated as {mode}"
    return {"mode": mode, "accuracy": correct / count, "loglik": ll / count, "mean_n": executed / count,
            "expected_n": expected / count, "flops": flops / count, "note": note}


def write_rows(path, columns: Sequence[str], rows: Sequence[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) if not isinstance(r[c], str) else r[c] for c in columns])


# -- experiments -----------------------------------------------------------------

SWEEP_COLUMNS = ["tau", "accuracy", "flops", "mean_n"]
VARIANCE_COLUMNS = ["grouping", "M", "estimator", "optimizer", "step", "grad_logvar", "final_accuracy", "flops"]


def sweep_tau(spec, cfg: TrainConfig, taus: Sequence[float], *, eval_mode: str = "discrete",
              eval_size: int = 2000) -> list[dict]:
    rows = []
    for tau in taus:
        run = train(spec, dataclasses.replace(cfg, tau=float(tau)))
        ds = make_dataset(spec, cfg.seed, cfg.batch_size)
        ev = evaluate(run.model, eval_mode, ds, eval_size, seed=cfg.seed, **cfg.block_kw())
        rows.append({"tau": float(tau), "accuracy": ev["accuracy"], "flops": ev["flops"], "mean_n": ev["mean_n"]})
        log.info("tau=%g accuracy=%.4f flops=%.1f mean_n=%.3f", tau, ev["accuracy"], ev["flops"], ev["mean_n"])
    return rows


def estimator_config(cfg: TrainConfig, estimator: str, steps: int | None = None) -> TrainConfig:
    """Config for one arm of the variance benchmark."""
    if estimator == "reinforce":
        return dataclasses.replace(cfg, estimator=estimator, optimizer="adam", lr=None, steps=steps or cfg.steps)
    lr = cfg.lr if cfg.optimizer in ("auto", "sgd") else None
    return dataclasses.replace(cfg, estimator=estimator, optimizer="sgd", lr=lr, steps=steps or cfg.steps)


def variance_bench(spec: GridModelSpec, groupings: Sequence[int], cfg: TrainConfig, steps: int | None = None, *,
                   eval_size: int = 1000) -> list[dict]:
    """Train REINFORCE and Concrete for every grouping; gradient-variance curves.

    REINFORCE always uses Adam (learning rate 1e-3); Concrete uses SGD with
    momentum at ``cfg.lr`` (or the model default).
    """
    specs = [dataclasses.replace(spec, grouping=int(n)) for n in groupings]
    ms = [s.num_latents for s in specs]
    if len(set(ms)) != len(ms):
        raise ValueError(f"groupings {list(groupings)} do not give distinct latent counts {ms}")
    rows = []
    for s, m in zip(specs, ms):
        for est in ("reinforce", "concrete"):
            run_cfg = estimator_config(cfg, est, steps or cfg.steps).resolved(s.kind)
            run = train(s, run_cfg)
            ds = make_dataset(s, cfg.seed, cfg.batch_size)
            ev = evaluate(run.model, "discrete", ds, eval_size, seed=cfg.seed, **cfg.block_kw())
            for r in run.metrics:
                rows.append({"grouping": s.grouping, "M": m, "estimator": est, "optimizer": run_cfg.optimizer,
                             "step": r.step, "grad_logvar": r.grad_logvar, "final_accuracy": ev["accuracy"],
                             "flops": ev["flops"]})
            log.info("M=%d %s accuracy=%.4f flops=%.1f", m, est, ev["accuracy"], ev["flops"])
    return rows
