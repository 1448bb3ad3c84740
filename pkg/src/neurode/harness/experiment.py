"""Model construction, training and evaluation for the synthetic tasks."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import autograd as ag
from ..autograd import Tensor, no_grad
from ..models import CNF, HamiltonianField, NeuralODE, StableField
from ..nn import (GalLinear, DepthCat, Linear, Module, Sequential, Tanh, flatten_params,
                  load_checkpoint, save_checkpoint, unflatten_params)
from ..odeint import SolverError, dump_trajectory
from ..sensitivity import kinetic_integrand
from .config import ExperimentConfig
from .data import generate_dataset

logger = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    def __init__(self, message: str, report: "MetricsReport"):
        super().__init__(message)
        self.report = report


@dataclass
class MetricsReport:
    config: dict
    num_parameters: int
    initial_loss: float
    losses: list = field(default_factory=list)
    nfe_forward: list = field(default_factory=list)
    nfe_backward: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    status: str = "ok"

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


class SGD:
    """Plain SGD with heavy-ball momentum: ``v = mu v + g``, ``p -= lr v``."""

    def __init__(self, params, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class ExperimentModel(Module):
    """The continuous-depth model plus the task head (if any)."""

    def __init__(self, ode: Module, head: Optional[Module]):
        super().__init__()
        self.ode = ode
        self.head = head

    @property
    def neural_ode(self) -> NeuralODE:
        return self.ode.ode if isinstance(self.ode, CNF) else self.ode


def _scalar_net(dim: int, hidden: int, rng) -> Module:
    return Sequential(Linear(dim, hidden, rng=rng), Tanh(), Linear(hidden, 1, rng=rng))


def build_field(cfg: ExperimentConfig, state_dim: int, rng) -> Module:
    m = cfg.model
    width = state_dim // m.order
    if m.variant == "node":
        layers = [DepthCat(1)] if m.depth_cat else []
        layers += [Linear(state_dim + int(m.depth_cat), m.hidden, rng=rng), Tanh(),
                   Linear(m.hidden, width, rng=rng)]
        return Sequential(*layers)
    if m.variant == "galerkin":
        span = tuple(cfg.solver.span)
        return Sequential(GalLinear(state_dim, m.hidden, m.n_terms, span, rng=rng), Tanh(),
                          GalLinear(m.hidden, width, m.n_terms, span, rng=rng))
    if m.variant == "hamiltonian":
        return HamiltonianField(_scalar_net(state_dim, m.hidden, rng))
    return StableField(_scalar_net(state_dim, m.hidden, rng))


class Experiment:
    """Everything one config determines: data, model, random streams."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        seed = cfg.seed
        self.init_rng = np.random.default_rng([seed, 1])
        self.batch_rng = np.random.default_rng([seed, 2])
        self.noise_rng = np.random.default_rng([seed, 3])
        s0, s1 = cfg.solver.span
        self.x, self.y = generate_dataset(cfg.task, cfg.n_samples, seed, cfg.noise, horizon=s1 - s0)
        m, sv = cfg.model, cfg.solver
        state_dim = 2 + m.augment_dims
        fld = build_field(cfg, state_dim, self.init_rng)
        integrand = kinetic_integrand if cfg.integral_loss is not None else None
        ode_kwargs = dict(sensitivity=cfg.sensitivity, solver=sv.method, span=(s0, s1),
                          rtol=sv.rtol, atol=sv.atol, step_size=sv.step_size, max_steps=sv.max_steps)
        if cfg.task == "density_gaussians":
            ode = CNF(fld, 2, trace=m.trace, trace_samples=m.trace_samples, rng=self.noise_rng,
                      augment_dims=m.augment_dims, integrand=integrand, **ode_kwargs)
            head = None
        else:
            ode = NeuralODE(fld, order=m.order, augment_dims=m.augment_dims,
                            integral_loss=integrand, **ode_kwargs)
            head = Linear(state_dim, 2, rng=self.init_rng) if cfg.task.startswith("classify") else None
        self.model = ExperimentModel(ode, head)

    # -- losses -------------------------------------------------------------------------

    def _kinetic(self) -> Optional[Tensor]:
        if self.cfg.integral_loss is None:
            return None
        return ag.mean(self.model.neural_ode.integral)

    def loss(self, x: np.ndarray, y) -> tuple[Tensor, dict]:
        task = self.cfg.task
        xt = Tensor(x)
        extra = {}
        if task == "density_gaussians":
            logp = self.model.ode.log_prob(xt)
            loss = -ag.mean(logp)
            extra["nll"] = loss.item()
        else:
            z = self.model.ode(xt)
            if task == "oscillator_regression":
                diff = z[:, 0] - Tensor(y)
                loss = ag.mean(ag.square(diff))
                extra["mse"] = loss.item()
            else:
                logits = self.model.head(z)
                onehot = np.eye(2)[y]
                picked = ag.sum(logits * Tensor(onehot), axis=1)
                loss = ag.mean(ag.logsumexp(logits, axis=1) - picked)
                extra["accuracy"] = float(np.mean(np.argmax(logits.data, axis=1) == y))
        kinetic = self._kinetic()
        if kinetic is not None:
            extra["kinetic"] = kinetic.item()
            loss = loss + kinetic * self.cfg.integral_loss.weight
        return loss, extra

    def metrics(self) -> dict:
        """Full-dataset metrics without touching parameters."""
        with no_grad():
            loss, extra = self.loss(self.x, self.y)
        out = {"loss": loss.item()}
        out.update(extra)
        return out

    def nfe(self) -> tuple[int, int]:
        node = self.model.neural_ode
        return node.nfe_forward, node.nfe_backward

    def trajectory(self, n_points: int = 21, max_batch: int = 64):
        node = self.model.neural_ode
        s0, s1 = self.cfg.solver.span
        with no_grad():
            return node.trajectory(Tensor(self.x[:max_batch]), np.linspace(s0, s1, n_points))


def _batches(exp: Experiment, steps: int, batch_size: int):
    n = exp.x.shape[0]
    for _ in range(steps):
        if batch_size >= n:
            yield np.arange(n)
        else:
            yield np.sort(exp.batch_rng.choice(n, size=batch_size, replace=False))


def train(cfg: ExperimentConfig, out_dir=None, dump_traj: bool = False) -> MetricsReport:
    """Minibatch SGD with momentum; writes metrics.json and checkpoint.json when ``out_dir`` is set."""
    start = time.perf_counter()
    exp = Experiment(cfg)
    model = exp.model
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = MetricsReport(cfg.to_dict(), model.param_count(), math.nan)

    def fail(msg: str, last_good: np.ndarray):
        report.status = "failed"
        report.wall_time = time.perf_counter() - start
        if out is not None:
            unflatten_params(model, last_good)
            save_checkpoint(model, out / "checkpoint.json")
            report.write(out / "metrics.json")
        raise NumericalFailure(msg, report)

    last_good = flatten_params(model)
    try:
        report.initial_loss = exp.metrics()["loss"]
    except (SolverError, FloatingPointError) as exc:
        fail(f"initial evaluation failed: {exc}", last_good)
    opt = SGD(model.parameters(), cfg.optimizer.lr, cfg.optimizer.momentum)
    y = exp.y
    for step, idx in enumerate(_batches(exp, cfg.optimizer.steps, cfg.optimizer.batch_size)):
        model.zero_grad()
        try:
            loss, _ = exp.loss(exp.x[idx], None if y is None else y[idx])
            value = loss.item()
            if not math.isfinite(value):
                fail(f"non-finite loss at step {step}", last_good)
            ag.backward(loss)
        except (SolverError, FloatingPointError) as exc:
            fail(f"solver failure at step {step}: {exc}", last_good)
        last_good = flatten_params(model)
        opt.step()
        fwd, bwd = exp.nfe()
        report.losses.append(value)
        report.nfe_forward.append(fwd)
        report.nfe_backward.append(bwd)
        if step % 100 == 0:
            logger.info("step %d loss %.6f nfe %d/%d", step, value, fwd, bwd)
    try:
        report.final = exp.metrics()
    except (SolverError, FloatingPointError) as exc:
        fail(f"final evaluation failed: {exc}", last_good)
    report.wall_time = time.perf_counter() - start
    if out is not None:
        save_checkpoint(model, out / "checkpoint.json")
        report.write(out / "metrics.json")
        if dump_traj:
            dump_trajectory(exp.trajectory(), out / "trajectory.jsonl")
    return report


def evaluate(checkpoint, cfg: ExperimentConfig, out_dir=None) -> MetricsReport:
    """Metrics of a saved model on the config's dataset; parameters are not modified."""
    start = time.perf_counter()
    exp = Experiment(cfg)
    load_checkpoint(exp.model, checkpoint)
    report = MetricsReport(cfg.to_dict(), exp.model.param_count(), math.nan)
    try:
        report.final = exp.metrics()
    except (SolverError, FloatingPointError) as exc:
        report.status = "failed"
        raise NumericalFailure(f"evaluation failed: {exc}", report) from exc
    report.initial_loss = report.final["loss"]
    report.wall_time = time.perf_counter() - start
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report.write(Path(out_dir) / "metrics.json")
    return report
