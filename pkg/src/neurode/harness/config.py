"""Experiment configuration: JSON in, validated dataclasses out.

Unknown keys anywhere in the document are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

TASKS = ("classify_moons", "classify_circles", "density_gaussians", "oscillator_regression")
VARIANTS = ("node", "galerkin", "hamiltonian", "stable")


class ConfigError(ValueError):
    pass


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}; allowed {sorted(known)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ModelSpec:
    variant: str = "node"
    hidden: int = 64
    augment_dims: int = 0
    order: int = 1
    n_terms: int = 2
    depth_cat: bool = True
    trace: str = "exact"
    trace_samples: int = 1


@dataclass
class SolverSpec:
    method: str = "dopri5"
    rtol: float = 1e-4
    atol: float = 1e-4
    step_size: Optional[float] = None
    span: list = field(default_factory=lambda: [0.0, 1.0])
    max_steps: int = 10_000


@dataclass
class IntegralLossSpec:
    kind: str = "kinetic"
    weight: float = 0.0


@dataclass
class OptimizerSpec:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 500
    batch_size: int = 128


@dataclass
class ExperimentConfig:
    task: str = "classify_moons"
    n_samples: int = 512
    noise: Optional[float] = None
    model: ModelSpec = field(default_factory=ModelSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    sensitivity: str = "adjoint"
    integral_loss: Optional[IntegralLossSpec] = None
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}; allowed {sorted(known)}")
        raw = dict(data)
        raw["model"] = _build(ModelSpec, raw.get("model"), "model")
        raw["solver"] = _build(SolverSpec, raw.get("solver"), "solver")
        raw["optimizer"] = _build(OptimizerSpec, raw.get("optimizer"), "optimizer")
        il = raw.get("integral_loss")
        raw["integral_loss"] = None if il is None else _build(IntegralLossSpec, il, "integral_loss")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        m, s, o = self.model, self.solver, self.optimizer
        checks = [
            (self.task in TASKS, f"unknown task {self.task!r}; valid tasks: {list(TASKS)}"),
            (isinstance(self.n_samples, int) and self.n_samples > 0, "n_samples must be a positive integer"),
            (self.noise is None or self.noise >= 0, "noise must be non-negative"),
            (m.variant in VARIANTS, f"unknown model variant {m.variant!r}; valid: {list(VARIANTS)}"),
            (m.hidden > 0 and m.augment_dims >= 0 and m.order >= 1 and m.n_terms >= 0,
             "model sizes must be non-negative (hidden, order positive)"),
            (m.trace in ("exact", "hutchinson") and m.trace_samples >= 1, "trace must be exact|hutchinson"),
            (s.method in ("euler", "rk4", "dopri5"), f"unknown solver method {s.method!r}"),
            (s.rtol > 0 and s.atol > 0, "solver tolerances must be positive"),
            (s.step_size is None or s.step_size > 0, "step_size must be positive"),
            (isinstance(s.span, list) and len(s.span) == 2 and s.span[1] > s.span[0], "span must be [s0, s1] with s1 > s0"),
            (self.sensitivity in ("autograd", "adjoint"), "sensitivity must be autograd or adjoint"),
            (o.lr > 0 and 0 <= o.momentum < 1 and o.steps >= 0 and o.batch_size > 0, "invalid optimizer settings"),
            (isinstance(self.seed, int), "seed must be an integer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.integral_loss is not None:
            if self.integral_loss.kind != "kinetic":
                raise ConfigError(f"unknown integral loss {self.integral_loss.kind!r}; only 'kinetic'")
            if self.integral_loss.weight < 0:
                raise ConfigError("integral loss weight must be non-negative")
        state_dim = 2 + m.augment_dims
        if m.variant in ("hamiltonian", "stable") and m.order != 1:
            raise ConfigError(f"{m.variant} fields are first order")
        if m.variant == "hamiltonian" and state_dim % 2:
            raise ConfigError("hamiltonian variant needs an even state dimension")
        if state_dim % m.order:
            raise ConfigError(f"state dimension {state_dim} not divisible by order {m.order}")
        if self.task == "density_gaussians" and m.order != 1:
            raise ConfigError("density task supports first-order flows only")
