"""Continuous-depth models built from :mod:`neurode.nn` vector fields.

:class:`DEFunc` adapts a network into a solver-ready field: it packs
higher-order dynamics into a first-order system and appends accumulator
columns for the divergence (CNFs) and for integral costs.
:class:`NeuralODE` owns the solver settings and the sensitivity method.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor, enable_grad, is_grad_enabled, no_grad
from .nn import Module
from .odeint import DepthSpan, SolverConfig, SolveStats, Trajectory, reverse_field, solve
from .sensitivity import IntegralLoss, odeint_adjoint

MAX_EXACT_TRACE_DIM = 64
DIVERGENCE_MODES = ("none", "exact", "hutchinson")
SENSITIVITIES = ("autograd", "adjoint")


class SingularMassMatrixError(ValueError):
    def __init__(self, index: int, cond: float):
        super().__init__(f"mass matrix at batch index {index} is singular (condition number {cond:.3g})")
        self.index = index


# -- divergence --------------------------------------------------------------------------


def _trace_exact(fz: Tensor, z: Tensor, create_graph: bool) -> Tensor:
    d = z.shape[1]
    if d > MAX_EXACT_TRACE_DIM:
        raise ValueError(f"exact trace limited to d <= {MAX_EXACT_TRACE_DIM} (got {d}); use hutchinson")
    total = Tensor(np.zeros(z.shape[0]))
    for i in range(d):
        row = ag.grad(ag.sum(fz[:, i]), z, create_graph=create_graph)
        total = total + row[:, i]
    return total


def _trace_hutchinson(fz: Tensor, z: Tensor, noise: np.ndarray, create_graph: bool) -> Tensor:
    total = Tensor(np.zeros(z.shape[0]))
    for eps in noise:
        e = Tensor(eps)
        vjp = ag.grad(fz, z, grad_outputs=e, create_graph=create_graph)
        total = total + ag.sum(vjp * e, axis=1)
    return total * (1.0 / len(noise))


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


def _with_input_grad(z: Tensor) -> Tensor:
    return z if z.requires_grad else z.detach().requires_grad_()


def divergence_exact(f, s, z) -> Tensor:
    """Exact trace of df/dz, one reverse pass per state dimension. ``f`` is called as ``f(s, z)``."""
    z = ag.as_tensor(z)
    create = is_grad_enabled()
    with enable_grad():
        zz = _with_input_grad(z)
        return _trace_exact(f(s, zz), zz, create)


def divergence_hutchinson(f, s, z, n_samples: int, rng: np.random.Generator) -> Tensor:
    """Unbiased trace estimate averaged over ``n_samples`` Rademacher probes."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    z = ag.as_tensor(z)
    create = is_grad_enabled()
    with enable_grad():
        zz = _with_input_grad(z)
        return _trace_hutchinson(f(s, zz), zz, rademacher(rng, (n_samples,) + z.shape), create)


# -- energy-based fields ----------------------------------------------------------------------


class EnergyField(Module):
    """Vector field derived from a scalar network ``net(z, s) -> [B, 1]``."""

    depth_aware = True
    kind = "energy"

    def __init__(self, net: Module):
        super().__init__()
        self.net = net

    def energy(self, z, s=None) -> Tensor:
        E = self.net(ag.as_tensor(z), s)
        if E.ndim != 2 or E.shape[1] != 1:
            raise ShapeError(f"scalar network must return [B, 1], got {E.shape}")
        return E

    def _grad_energy(self, z: Tensor, s, create: bool):
        zz = _with_input_grad(z)
        return ag.grad(ag.sum(self.energy(zz, s)), zz, create_graph=create), zz

    def extra_repr(self):
        return f"kind={self.kind}"


class HamiltonianField(EnergyField):
    """``(dH/dp, -dH/dq)`` for a state laid out as ``(q, p)``."""

    kind = "hamiltonian"

    def forward(self, z, s=None):
        if z.shape[1] % 2:
            raise ShapeError(f"Hamiltonian field needs an even state dimension, got {z.shape[1]}")
        n = z.shape[1] // 2
        create = is_grad_enabled()
        with enable_grad():
            dH, _ = self._grad_energy(z, s, create)
            out = ag.concat([dH[:, n:], -dH[:, :n]], axis=1)
        return out if create else out.detach()


class StableField(EnergyField):
    """Gradient flow ``-dE/dz``; the energy cannot increase along solutions."""

    kind = "stable"

    def forward(self, z, s=None):
        create = is_grad_enabled()
        with enable_grad():
            dE, _ = self._grad_energy(z, s, create)
            out = -dE
        return out if create else out.detach()


class LagrangianField(EnergyField):
    """Euler-Lagrange dynamics ``(qdot, qddot)`` for a state laid out as ``(q, qdot)``.

    ``qddot = M^{-1} (dL/dq - (d^2L/dqdot dq) qdot)`` with ``M = d^2L/dqdot^2``.
    """

    kind = "lagrangian"
    max_condition = 1e12

    def forward(self, z, s=None):
        if z.shape[1] % 2:
            raise ShapeError(f"Lagrangian field needs an even state dimension, got {z.shape[1]}")
        n = z.shape[1] // 2
        B = z.shape[0]
        create = is_grad_enabled()
        with enable_grad():
            dL, zz = self._grad_energy(z, s, True)
            rows = [ag.grad(ag.sum(dL[:, n + i]), zz, create_graph=create) for i in range(n)]
            hess = ag.stack(rows, axis=1)  # [B, n, 2n]: row i holds d(dL/dqdot_i)/dz
            mass = hess[:, :, n:]
            cross = hess[:, :, :n]
            conds = np.linalg.cond(mass.data)
            bad = np.flatnonzero(~(conds <= self.max_condition))
            if bad.size:
                raise SingularMassMatrixError(int(bad[0]), float(conds[bad[0]]))
            qdot = zz[:, n:]
            coriolis = ag.reshape(ag.matmul(cross, ag.reshape(qdot, (B, n, 1))), (B, n))
            qddot = ag.solve(mass, dL[:, :n] - coriolis)
            out = ag.concat([qdot, qddot], axis=1)
        return out if create else out.detach()


# -- DEFunc ------------------------------------------------------------------------------


class DEFunc(Module):
    """Solver-facing wrapper ``f(s, z)`` around a network ``m(x, s)``.

    State layout: ``[x (order * width) | -divergence | integral]`` where the
    trailing accumulator columns exist only when enabled. Accumulators never
    feed back into the dynamics.
    """

    def __init__(self, m: Module, order: int = 1, augment_dims: int = 0,
                 divergence: str = "none", integrand=None, trace_samples: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        if order < 1:
            raise ValueError("order must be a positive integer")
        if augment_dims < 0:
            raise ValueError("augment_dims must be non-negative")
        if divergence not in DIVERGENCE_MODES:
            raise ValueError(f"divergence must be one of {DIVERGENCE_MODES}")
        if divergence == "hutchinson" and rng is None:
            raise ValueError("hutchinson divergence needs an explicit rng")
        if trace_samples < 1:
            raise ValueError("trace_samples must be positive")
        self.m = m
        self.order = order
        self.augment_dims = augment_dims
        self.divergence = divergence
        self.integrand = integrand
        self.trace_samples = trace_samples
        self.rng = rng
        self.noise = None
        self.nfe = 0

    @property
    def n_accumulators(self) -> int:
        return int(self.divergence != "none") + int(self.integrand is not None)

    def begin_solve(self, batch: int, dim: int) -> None:
        """Draw the Hutchinson probes used for the whole upcoming solve."""
        if self.divergence == "hutchinson":
            self.noise = rademacher(self.rng, (self.trace_samples, batch, dim))

    @contextmanager
    def using_noise(self, noise):
        prev = self.noise
        self.noise = noise
        try:
            yield
        finally:
            self.noise = prev

    def dynamics(self, s, x: Tensor) -> Tensor:
        if self.order == 1:
            return self.m(x, s)
        if x.shape[1] % self.order:
            raise ShapeError(f"state dim {x.shape[1]} not divisible by order {self.order}")
        w = x.shape[1] // self.order
        top = self.m(x, s)
        if top.shape[1] != w:
            raise ShapeError(f"order-{self.order} field must return width {w}, got {top.shape}")
        return ag.concat([x[:, w:], top], axis=1)

    def __call__(self, s, z):
        self.nfe += 1
        k = self.n_accumulators
        if k == 0:
            return self.dynamics(s, z)
        B = z.shape[0]
        x = z[:, :-k]
        parts = []
        if self.divergence != "none":
            create = is_grad_enabled()
            with enable_grad():
                xx = _with_input_grad(x)
                dx = self.dynamics(s, xx)
                if self.divergence == "exact":
                    div = _trace_exact(dx, xx, create)
                else:
                    div = _trace_hutchinson(dx, xx, self.noise, create)
            if not create:
                dx, div = dx.detach(), div.detach()
            x = xx if create else x
            parts = [dx, ag.reshape(-div, (B, 1))]
        else:
            dx = self.dynamics(s, x)
            parts = [dx]
        if self.integrand is not None:
            parts.append(ag.reshape(self.integrand(s, x, dx), (B, 1)))
        return ag.concat(parts, axis=1)

    def extra_repr(self):
        extras = []
        if self.order != 1:
            extras.append(f"order={self.order}")
        if self.divergence != "none":
            extras.append(f"divergence={self.divergence}")
        return ", ".join(extras)


# -- NeuralODE ----------------------------------------------------------------------------


class NeuralODE(Module):
    """``z(s1)`` of ``dz/ds = f(s, z)`` started from the (zero-augmented) input."""

    def __init__(self, field: Module, *, sensitivity: str = "autograd", solver: str = "dopri5",
                 span=(0.0, 1.0), rtol: float = 1e-4, atol: float = 1e-4,
                 step_size: Optional[float] = None, max_steps: int = 10_000,
                 order: int = 1, augment_dims: int = 0,
                 integral_loss=None, norm_accumulators: bool = False):
        super().__init__()
        if sensitivity not in SENSITIVITIES:
            raise ValueError(f"sensitivity must be one of {SENSITIVITIES}")
        if isinstance(field, DEFunc):
            defunc = field
        else:
            integrand = integral_loss.integrand if isinstance(integral_loss, IntegralLoss) else integral_loss
            defunc = DEFunc(field, order=order, augment_dims=augment_dims, integrand=integrand)
        self.defunc = defunc
        self.sensitivity = sensitivity
        self.span = span if isinstance(span, DepthSpan) else DepthSpan(float(span[0]), float(span[1]))
        self.solver = SolverConfig(method=solver, rtol=rtol, atol=atol, h_init=step_size,
                                   max_steps=max_steps)
        self.norm_accumulators = norm_accumulators
        self.nfe_forward = 0
        self.nfe_backward = 0
        self.last_stats = SolveStats()
        self.integral = None

    @property
    def nfe(self) -> int:
        return self.nfe_forward + self.nfe_backward

    def _count_backward(self, stats: SolveStats) -> None:
        self.nfe_backward += stats.nfe

    def pack(self, x) -> Tensor:
        """Zero-augment and append zeroed accumulator columns."""
        x = ag.as_tensor(x)
        if x.ndim != 2:
            raise ShapeError(f"NeuralODE expects a [B, d] input, got {x.shape}")
        B = x.shape[0]
        extra = self.defunc.augment_dims + self.defunc.n_accumulators
        if extra == 0:
            return x
        return ag.concat([x, Tensor(np.zeros((B, extra)))], axis=1)

    def solve_packed(self, zp: Tensor, depths) -> Tensor:
        """Integrate a packed state through ``depths``; returns [L, B, n] points."""
        k = self.defunc.n_accumulators
        error_dims = None if (self.norm_accumulators or k == 0) else zp.shape[1] - k
        self.defunc.begin_solve(zp.shape[0], zp.shape[1] - k)
        if self.sensitivity == "adjoint" and is_grad_enabled():
            noise = self.defunc.noise
            pts, stats = odeint_adjoint(self.defunc, zp, depths, self.solver, error_dims=error_dims,
                                        on_backward=self._count_backward,
                                        backward_context=lambda: self.defunc.using_noise(noise))
        else:
            traj = solve(self.defunc, zp, DepthSpan.from_points(depths), self.solver,
                         error_dims=error_dims)
            pts, stats = traj.points, traj.stats
        self.nfe_forward += stats.nfe
        self.last_stats = stats
        return pts

    def _split(self, z: Tensor) -> Tensor:
        k = self.defunc.n_accumulators
        if self.defunc.integrand is not None:
            self.integral = z[..., -1]
        return z[..., : z.shape[-1] - k] if k else z

    def forward(self, x):
        pts = self.solve_packed(self.pack(x), self.span.points)
        return self._split(pts[-1])

    def trajectory(self, x, s_span) -> Trajectory:
        depths = [float(p) for p in np.asarray(s_span, dtype=np.float64).reshape(-1)]
        zp = self.pack(x)
        if len(depths) == 1:
            return Trajectory(self._split(ag.stack([zp], axis=0)), tuple(depths), SolveStats())
        pts = self.solve_packed(zp, depths)
        return Trajectory(self._split(pts), tuple(depths), self.last_stats)

    def summary(self) -> dict:
        return {
            "order": self.defunc.order,
            "solver": self.solver.method,
            "integration_interval": [self.span.s0, self.span.s1],
            "tolerances": {"relative": self.solver.rtol, "absolute": self.solver.atol},
            "num_parameters": self.param_count(),
            "nfe": float(self.nfe),
            "sensitivity": self.sensitivity,
            "augment_dims": self.defunc.augment_dims,
            "integral_loss": None if self.defunc.integrand is None else getattr(
                self.defunc.integrand, "__name__", type(self.defunc.integrand).__name__),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary())

    def __repr__(self):
        info = self.summary()
        return (
            "Neural DE:\n"
            f"\t- order: {info['order']}\n"
            f"\t- solver: {info['solver']}\n"
            f"\t- integration interval: {self.span.s0} to {self.span.s1}\n"
            f"\t- tolerances: relative {self.solver.rtol} absolute {self.solver.atol}\n"
            f"\t- num_parameters: {info['num_parameters']}\n"
            f"\t- NFE: {info['nfe']}\n\n"
            f"Integral loss: {info['integral_loss']}\n\n"
            f"DEFunc:\n {self.defunc!r}"
        )


# -- continuous normalizing flows --------------------------------------------------------------


def standard_normal_logpdf(z: Tensor) -> Tensor:
    d = z.shape[1]
    return ag.sum(ag.square(z), axis=1) * -0.5 - 0.5 * d * np.log(2.0 * np.pi)


class CNF(Module):
    """Density model: data is carried to a standard normal along the flow.

    The trailing accumulator starts at 0 at the data end and integrates
    ``-div f``, so ``log p(x) = log N(z(s1)) - accumulator(s1)``.
    """

    def __init__(self, field: Module, dim: int, *, trace: str = "exact", trace_samples: int = 1,
                 rng: Optional[np.random.Generator] = None, augment_dims: int = 0,
                 integrand=None, **ode_kwargs):
        super().__init__()
        self.dim = dim
        if trace not in ("exact", "hutchinson"):
            raise ValueError("trace must be 'exact' or 'hutchinson'")
        defunc = DEFunc(field, augment_dims=augment_dims, divergence=trace,
                        trace_samples=trace_samples, rng=rng, integrand=integrand)
        self.ode = NeuralODE(defunc, **ode_kwargs)

    @property
    def defunc(self) -> DEFunc:
        return self.ode.defunc

    def log_prob(self, x) -> Tensor:
        x = ag.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"CNF over dim {self.dim} got input shape {x.shape}")
        zp = self.ode.pack(x)
        end = self.ode.solve_packed(zp, self.ode.span.points)[-1]
        D = zp.shape[1] - self.defunc.n_accumulators
        if self.defunc.integrand is not None:
            self.ode.integral = end[:, D + 1]
        logp = standard_normal_logpdf(end[:, :D]) - end[:, D]
        if not np.all(np.isfinite(logp.data)):
            bad = np.flatnonzero(~np.isfinite(logp.data))
            raise FloatingPointError(f"non-finite log-probability at batch indices {bad.tolist()}")
        return logp

    def sample(self, n: int, rng: np.random.Generator) -> Tensor:
        """Push base samples through the reversed flow (no divergence accumulation)."""
        D = self.dim + self.defunc.augment_dims
        z = rng.standard_normal((n, D))
        span = self.ode.span
        back = reverse_field(self.defunc.dynamics, span.s0, span.s1)
        with no_grad():
            traj = solve(back, Tensor(z), DepthSpan(0.0, span.length), self.ode.solver)
        self.ode.nfe_forward += traj.stats.nfe
        return traj.points[-1]
