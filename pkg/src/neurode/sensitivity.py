"""Gradients of Neural ODE losses.

Two routes are provided:

* backprop through the solver: the forward solve is recorded on the tape
  and differentiated exactly as discretized (memory grows with the number
  of steps);
* the continuous adjoint: the forward solve runs without a tape, then the
  joint system (z, a, g_theta) is integrated backward in depth with
  ``dz/ds = f``, ``da/ds = -a^T df/dz - dl/dz``, ``dg/ds = -a^T df/dtheta - dl/dtheta``.
  Each vector-Jacobian product is taken on a small tape built and dropped
  inside one field evaluation, so retained memory does not depend on the
  step count.

A "model" here is any callable ``f(s, z)`` exposing ``parameters()``.
"""

from __future__ import annotations

from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor, enable_grad, no_grad
from .odeint import DepthSpan, SolverConfig, SolveStats, solve

Integrand = Callable[[float, Tensor, Tensor], Tensor]


@dataclass
class IntegralLoss:
    """``integrand(s, z, dz)`` returns one value per batch element; ``dz = f(s, z)``."""

    integrand: Integrand
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")

    def weight(self, batch: int) -> float:
        return 1.0 if self.reduction == "sum" else 1.0 / batch


def kinetic_integrand(s, z, dz) -> Tensor:
    """Squared norm of the vector field, the usual kinetic-energy regularizer."""
    return ag.sum(ag.square(dz), axis=1)


@dataclass
class GradResult:
    loss: float
    dtheta: np.ndarray
    dz0: np.ndarray
    forward_stats: SolveStats = field(default_factory=SolveStats)
    backward_stats: SolveStats = field(default_factory=SolveStats)
    peak_nodes: int = 0


def _as_span(span) -> DepthSpan:
    if span is None:
        return DepthSpan()
    return span if isinstance(span, DepthSpan) else DepthSpan(float(span[0]), float(span[-1]))


def _flat(gs: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([g.data.reshape(-1) for g in gs]) if gs else np.zeros(0)


# -- backprop through the solver ------------------------------------------------------


def grad_backprop(model, z0, span=None, cfg: Optional[SolverConfig] = None, *,
                  terminal: Optional[Callable[[Tensor], Tensor]] = None,
                  integral: Optional[IntegralLoss] = None) -> GradResult:
    """Loss and exact gradients of the discretized solution.

    The integral term is the trapezoidal rule over the accepted solver steps.
    """
    if terminal is None and integral is None:
        raise ValueError("need a terminal loss, an integral loss, or both")
    span = _as_span(span)
    cfg = cfg or SolverConfig()
    params = list(model.parameters())
    ag.node_stats.reset_peak()
    z0t = Tensor(np.array(ag.as_tensor(z0).data, copy=True), requires_grad=True)
    with enable_grad():
        traj = solve(model, z0t, span, cfg, record_steps=integral is not None)
        loss = Tensor(0.0)
        if terminal is not None:
            loss = loss + terminal(traj.points[-1])
        if integral is not None:
            vals = [integral.integrand(s, z, model(s, z)) for s, z in traj.steps]
            acc = None
            for (sa, _), (sb, _), la, lb in zip(traj.steps, traj.steps[1:], vals, vals[1:]):
                piece = (la + lb) * (0.5 * (sb - sa))
                acc = piece if acc is None else acc + piece
            loss = loss + ag.sum(acc) * integral.weight(z0t.shape[0])
        gs = ag.grad(loss, [z0t] + params)
    return GradResult(loss.item(), _flat(gs[1:]), gs[0].data, traj.stats, SolveStats(),
                      ag.node_stats.peak)


# -- adjoint ----------------------------------------------------------------------------------


def _adjoint_field(model, params, s_hi: float, shape: tuple,
                   integral: Optional[IntegralLoss], weights: Optional[np.ndarray]):
    nz = int(np.prod(shape))

    def aug(tau, Y):
        y = Y.data
        s = s_hi - tau
        z = y[:nz].reshape(shape)
        a = y[nz:2 * nz].reshape(shape)
        with enable_grad():
            zt = Tensor(z, requires_grad=True)
            fz = model(s, zt)
            outs, cots = [fz], [Tensor(a)]
            if integral is not None:
                outs.append(integral.integrand(s, zt, fz))
                cots.append(Tensor(weights))
            gs = ag.grad(outs, [zt] + params, cots)
        return Tensor(np.concatenate([-fz.data.reshape(-1)] + [g.data.reshape(-1) for g in gs]))

    return aug


def adjoint_sweep(model, params, depths: Sequence[float], states: np.ndarray,
                  cotangents: np.ndarray, cfg: SolverConfig,
                  integral: Optional[IntegralLoss] = None,
                  integral_weights: Optional[np.ndarray] = None):
    """Integrate the adjoint system backward through consecutive eval depths.

    ``states[i]`` is the forward solution at ``depths[i]`` and ``cotangents[i]``
    the loss gradient with respect to it; cotangents enter the adjoint as
    jumps at each depth. Returns ``(a(s0), g_theta, stats)``.
    """
    shape = states.shape[1:]
    nz = int(np.prod(shape))
    stats = SolveStats()
    a = np.array(cotangents[-1], dtype=np.float64)
    g_theta = np.zeros(sum(p.size for p in params))
    with no_grad():
        for i in range(len(depths) - 1, 0, -1):
            s_lo, s_hi = depths[i - 1], depths[i]
            aug = _adjoint_field(model, params, s_hi, shape, integral, integral_weights)
            y0 = Tensor(np.concatenate([states[i].reshape(-1), a.reshape(-1), g_theta]))
            traj = solve(aug, y0, DepthSpan(0.0, s_hi - s_lo), cfg)
            stats.merge(traj.stats)
            y = traj.points.data[-1]
            a = y[nz:2 * nz].reshape(shape) + cotangents[i - 1]
            g_theta = y[2 * nz:]
    return a, g_theta, stats


def _adjoint(model, z0, span, cfg, terminal, integral) -> GradResult:
    span = _as_span(span)
    cfg = cfg or SolverConfig()
    params = list(model.parameters())
    ag.node_stats.reset_peak()
    z0 = np.array(ag.as_tensor(z0).data, dtype=np.float64, copy=True)
    B = z0.shape[0]
    weights = None
    with no_grad():
        if integral is None:
            traj = solve(model, Tensor(z0), span, cfg)
            z1 = traj.points.data[-1]
            value = 0.0
        else:
            # the integral rides the ODE as one accumulator column per sample
            def rider(s, zc):
                z = zc[:, :-1]
                fz = model(s, z)
                return ag.concat([fz, ag.reshape(integral.integrand(s, z, fz), (B, 1))], axis=1)

            zc0 = np.concatenate([z0.reshape(B, -1), np.zeros((B, 1))], axis=1)
            traj = solve(rider, Tensor(zc0), span, cfg, error_dims=zc0.shape[1] - 1)
            end = traj.points.data[-1]
            z1 = end[:, :-1].reshape(z0.shape)
            value = float(end[:, -1].sum()) * integral.weight(B)
            weights = np.full(B, integral.weight(B))
    if terminal is not None:
        with enable_grad():
            z1t = Tensor(z1, requires_grad=True)
            L = terminal(z1t)
            a1 = ag.grad(L, z1t).data
        value += L.item()
    else:
        a1 = np.zeros_like(z1)
    a0, g_theta, bstats = adjoint_sweep(model, params, (span.s0, span.s1), np.stack([z0, z1]),
                                        np.stack([np.zeros_like(z0), a1]), cfg, integral, weights)
    return GradResult(value, g_theta, a0, traj.stats, bstats, ag.node_stats.peak)


def grad_adjoint(model, z0, span=None, cfg: Optional[SolverConfig] = None, *,
                 terminal: Callable[[Tensor], Tensor]) -> GradResult:
    """Adjoint gradients of a terminal loss ``terminal(z(s1))``."""
    return _adjoint(model, z0, span, cfg, terminal, None)


def grad_adjoint_integral(model, z0, integral: IntegralLoss, span=None,
                          cfg: Optional[SolverConfig] = None, *,
                          terminal: Optional[Callable[[Tensor], Tensor]] = None) -> GradResult:
    """Adjoint gradients of ``integral`` (plus an optional terminal loss).

    The integrand's z-gradient forces the adjoint and its parameter
    gradient is accumulated alongside ``a^T df/dtheta``.
    """
    return _adjoint(model, z0, span, cfg, terminal, integral)


# -- adjoint as a tape operation ----------------------------------------------------------------


def odeint_adjoint(model, z0: Tensor, depths: Sequence[float], cfg: SolverConfig, *,
                   error_dims: Optional[int] = None,
                   on_backward: Optional[Callable[[SolveStats], None]] = None,
                   backward_context: Optional[Callable] = None):
    """Solve without recording the forward pass; gradients come from :func:`adjoint_sweep`.

    Returns ``(points, stats)`` where ``points`` [L, B, n] is a single tape node
    whose inputs are ``z0`` and the model parameters.
    """
    params = list(model.parameters())
    depths = tuple(float(d) for d in depths)
    with no_grad():
        traj = solve(model, z0.detach(), DepthSpan.from_points(depths), cfg, error_dims=error_dims)
    pts = traj.points.data

    def bw(g, needs):
        if ag.is_grad_enabled():
            raise NotImplementedError("the adjoint backward pass is not itself differentiable")
        with (backward_context() if backward_context else nullcontext()):
            a0, g_theta, stats = adjoint_sweep(model, params, depths, pts, g.data, cfg)
        if on_backward is not None:
            on_backward(stats)
        out = [Tensor(a0)]
        offset = 0
        for p in params:
            out.append(Tensor(g_theta[offset:offset + p.size].reshape(p.shape)))
            offset += p.size
        return tuple(out)

    return ag.custom_op(pts, "odeint_adjoint", (z0, *params), bw), traj.stats
