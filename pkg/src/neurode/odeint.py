"""Batched explicit Runge-Kutta solvers with NFE accounting.

Fixed-step ``euler`` and ``rk4`` take ``ceil(span / h)`` uniform steps per
segment. ``dopri5`` is the Dormand-Prince 5(4) pair with first-same-as-last
reuse: one evaluation to start, then six fresh evaluations per attempted
step, so ``nfe == 1 + 6 * (accepted + rejected)`` for every adaptive solve.

States are :class:`~neurode.autograd.Tensor` values, so solving with a
tape active records the whole discretization (backprop through the solver).
Step-size decisions use plain arrays and are constants to the tape.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor

VectorField = Callable[[float, Tensor], Tensor]

METHODS = ("euler", "rk4", "dopri5")


class SolverError(RuntimeError):
    """Solver failure; ``stats`` holds the counters up to the failure."""

    def __init__(self, message: str, stats: "SolveStats"):
        super().__init__(f"{message} ({stats})")
        self.stats = stats


class MaxStepsExceeded(SolverError):
    pass


class StepSizeUnderflow(SolverError):
    pass


class NonFiniteStateError(SolverError):
    def __init__(self, depth: float, stats: "SolveStats"):
        super().__init__(f"non-finite state at depth s={depth:.6g}", stats)
        self.depth = depth


@dataclass(frozen=True)
class DepthSpan:
    s0: float = 0.0
    s1: float = 1.0
    eval_points: Optional[tuple] = None

    def __post_init__(self):
        if not self.s1 > self.s0:
            raise ValueError(f"depth span needs s1 > s0, got [{self.s0}, {self.s1}]")
        if self.eval_points is not None:
            pts = tuple(float(p) for p in self.eval_points)
            object.__setattr__(self, "eval_points", pts)
            if any(b <= a for a, b in zip(pts, pts[1:])):
                raise ValueError("eval_points must be strictly increasing")
            if pts[0] < self.s0 or pts[-1] > self.s1:
                raise ValueError("eval_points must lie inside the span")

    @property
    def points(self) -> tuple:
        return self.eval_points if self.eval_points is not None else (float(self.s0), float(self.s1))

    @property
    def length(self) -> float:
        return self.s1 - self.s0

    @classmethod
    def from_points(cls, points) -> "DepthSpan":
        pts = [float(p) for p in np.asarray(points, dtype=np.float64).reshape(-1)]
        return cls(pts[0], pts[-1], tuple(pts))


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings. ``h_init`` doubles as the step size of the fixed-step methods.

    Unset step bounds resolve against the span length ``L``: ``h_init = 0.01 L``,
    ``h_min = 1e-12 L``, ``h_max = L``.
    """

    method: str = "dopri5"
    rtol: float = 1e-4
    atol: float = 1e-4
    h_init: Optional[float] = None
    h_min: Optional[float] = None
    h_max: Optional[float] = None
    max_steps: int = 10_000
    adaptive: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        lo = self.h_min if self.h_min is not None else 0.0
        hi = self.h_max if self.h_max is not None else math.inf
        if self.h_init is not None and not (lo <= self.h_init <= hi and self.h_init > 0):
            raise ValueError("need h_min <= h_init <= h_max and h_init > 0")
        if lo > hi:
            raise ValueError("need h_min <= h_max")

    @property
    def is_adaptive(self) -> bool:
        return self.method == "dopri5" and self.adaptive

    def resolved(self, length: float) -> tuple[float, float, float]:
        h_max = self.h_max if self.h_max is not None else length
        h_min = self.h_min if self.h_min is not None else 1e-12 * length
        h_init = self.h_init if self.h_init is not None else 0.01 * length
        return min(max(h_init, h_min), h_max), h_min, h_max


@dataclass
class SolveStats:
    nfe: int = 0
    accepted_steps: int = 0
    rejected_steps: int = 0

    def merge(self, other: "SolveStats") -> None:
        self.nfe += other.nfe
        self.accepted_steps += other.accepted_steps
        self.rejected_steps += other.rejected_steps


@dataclass
class Trajectory:
    """Solution samples ``points`` [length, batch, dim] at ``depths``."""

    points: Tensor
    depths: tuple
    stats: SolveStats
    steps: Optional[list] = field(default=None, repr=False)

    @property
    def shape(self) -> tuple:
        return self.points.shape

    def __len__(self):
        return len(self.depths)


# -- tableaus ---------------------------------------------------------------------

_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_DP_E = tuple(b5 - b4 for b5, b4 in zip(_DP_B5, _DP_B4))


def _lincomb(z: Tensor, h: float, coeffs, ks) -> Tensor:
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = k * (h * c)
        acc = term if acc is None else acc + term
    return z if acc is None else z + acc


class _Counted:
    def __init__(self, f: VectorField, stats: SolveStats, shape: tuple):
        self.f = f
        self.stats = stats
        self.shape = shape

    def __call__(self, s, z):
        self.stats.nfe += 1
        out = self.f(s, z)
        if out.shape != self.shape:
            raise ShapeError(f"vector field returned shape {out.shape} for state shape {self.shape}")
        return out


def euler_step(f: VectorField, s: float, z: Tensor, h: float) -> Tensor:
    return z + f(s, z) * h


def rk4_step(f: VectorField, s: float, z: Tensor, h: float) -> Tensor:
    k1 = f(s, z)
    k2 = f(s + 0.5 * h, z + k1 * (0.5 * h))
    k3 = f(s + 0.5 * h, z + k2 * (0.5 * h))
    k4 = f(s + h, z + k3 * h)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def dopri5_step(f: VectorField, s: float, z: Tensor, h: float, k1: Optional[Tensor] = None):
    """One Dormand-Prince step.

    Returns ``(z_next, err, k_last)``: the 5th-order solution, the difference
    between the 5th- and 4th-order solutions, and ``f(s + h, z_next)`` for
    reuse as the next step's first stage. Six fresh evaluations when ``k1``
    is supplied, seven otherwise.
    """
    if h <= 0:
        raise ValueError("dopri5_step needs h > 0")
    ks = [f(s, z) if k1 is None else k1]
    for i in range(1, 7):
        zi = _lincomb(z, h, _DP_A[i], ks)
        if i == 6:
            z_next = zi
        ks.append(f(s + _DP_C[i] * h, zi))
    err = _lincomb(Tensor(np.zeros(z.shape)), h, _DP_E, [k.detach() for k in ks])
    return z_next, err, ks[6]


def error_ratio(err, z, z_next, rtol: float, atol: float) -> float:
    """RMS of the error scaled by ``atol + rtol * max(|z|, |z_next|)``."""
    e = np.asarray(err.data if isinstance(err, Tensor) else err)
    a = np.asarray(z.data if isinstance(z, Tensor) else z)
    b = np.asarray(z_next.data if isinstance(z_next, Tensor) else z_next)
    if e.size == 0:
        return 0.0
    scale = atol + rtol * np.maximum(np.abs(a), np.abs(b))
    return float(np.sqrt(np.mean((e / scale) ** 2)))


def adapt_step(err, z, z_next, h: float, cfg: SolverConfig, h_min: float = 0.0,
               h_max: float = math.inf) -> tuple[bool, float]:
    """Accept iff the error ratio r <= 1; next step ``h * clamp(0.9 r^(-1/5), 0.2, 5)``."""
    r = error_ratio(err, z, z_next, cfg.rtol, cfg.atol)
    h_min = cfg.h_min if cfg.h_min is not None else h_min
    h_max = cfg.h_max if cfg.h_max is not None else h_max
    if r == 0.0:
        factor = 5.0
    elif not math.isfinite(r):
        factor = 0.2
    else:
        factor = min(5.0, max(0.2, 0.9 * r ** -0.2))
    return r <= 1.0, min(max(h * factor, h_min), h_max)


# -- drivers ----------------------------------------------------------------------------


def _check_finite(z: Tensor, depth: float, stats: SolveStats) -> None:
    if not np.all(np.isfinite(z.data)):
        raise NonFiniteStateError(depth, stats)


def _integrate(f: VectorField, z0: Tensor, depths: Sequence[float], cfg: SolverConfig,
               stats: SolveStats, error_dims: Optional[int], record: Optional[list]) -> list:
    """Integrate across consecutive ``depths``, carrying solver state between segments."""
    total = depths[-1] - depths[0]
    h, h_min, h_max = cfg.resolved(total)
    fc = _Counted(f, stats, z0.shape)
    sel = (slice(None), slice(0, error_dims)) if error_dims is not None else slice(None)

    def err_view(x):
        return x.data[sel] if x.data.ndim >= 2 else x.data

    points = [z0]
    z, s = z0, depths[0]
    if record is not None:
        record.append((s, z))
    k1 = None
    steps = 0
    for target in depths[1:]:
        if not cfg.is_adaptive:
            n = max(1, math.ceil((target - s) / h - 1e-9))
            hh = (target - s) / n
            for i in range(n):
                if cfg.method == "euler":
                    z = euler_step(fc, s, z, hh)
                elif cfg.method == "rk4":
                    z = rk4_step(fc, s, z, hh)
                else:
                    z, _, _ = dopri5_step(fc, s, z, hh)
                s = target if i == n - 1 else s + hh
                stats.accepted_steps += 1
                _check_finite(z, s, stats)
                if record is not None:
                    record.append((s, z))
            points.append(z)
            continue

        while s < target:
            if steps >= cfg.max_steps:
                raise MaxStepsExceeded(f"exceeded max_steps={cfg.max_steps} at s={s:.6g}", stats)
            remaining = target - s
            clipped = h >= remaining or remaining - h < 1e-10 * total
            h_try = remaining if clipped else h
            if k1 is None:
                k1 = fc(s, z)
            z_next, err, k_last = dopri5_step(fc, s, z, h_try, k1)
            steps += 1
            _check_finite(z_next, s + h_try, stats)
            accept, h_new = adapt_step(err_view(err), err_view(z), err_view(z_next), h_try, cfg, h_min, h_max)
            if accept:
                stats.accepted_steps += 1
                s = target if clipped else s + h_try
                z, k1 = z_next, k_last
                h = max(h, h_new) if clipped else h_new
                if record is not None:
                    record.append((s, z))
            else:
                stats.rejected_steps += 1
                if h_try <= h_min * (1 + 1e-12):
                    raise StepSizeUnderflow(f"step size fell below h_min={h_min:.3g} at s={s:.6g}", stats)
                h = h_new
        points.append(z)
    return points


def solve(f: VectorField, z0, span=None, cfg: Optional[SolverConfig] = None, *,
          error_dims: Optional[int] = None, record_steps: bool = False) -> Trajectory:
    """Solve ``dz/ds = f(s, z)`` from ``z0`` over ``span``.

    ``error_dims`` restricts the adaptive error norm to the leading state
    columns (used to keep accumulator columns out of step control).
    With ``record_steps`` every accepted ``(s, z)`` is kept in ``Trajectory.steps``.
    """
    span = span if isinstance(span, DepthSpan) else (DepthSpan() if span is None else DepthSpan.from_points(span))
    cfg = cfg or SolverConfig()
    z0 = ag.as_tensor(z0)
    stats = SolveStats()
    record = [] if record_steps else None
    depths = span.points
    lead = depths[0] > span.s0  # eval points may start after s0; z0 is then not returned
    pts = _integrate(f, z0, ((span.s0,) if lead else ()) + depths, cfg, stats, error_dims, record)
    if lead:
        pts = pts[1:]
    return Trajectory(ag.stack(pts, axis=0), tuple(depths), stats, record)


def trajectory_eval(f: VectorField, z0, eval_points, cfg: Optional[SolverConfig] = None, *,
                    error_dims: Optional[int] = None) -> Trajectory:
    """Solution at each of ``eval_points`` (sorted); the first point is the initial depth."""
    pts = [float(p) for p in np.asarray(eval_points, dtype=np.float64).reshape(-1)]
    if not pts:
        raise ValueError("eval_points must be non-empty")
    z0 = ag.as_tensor(z0)
    if len(pts) == 1:
        return Trajectory(ag.stack([z0], axis=0), (pts[0],), SolveStats())
    return solve(f, z0, DepthSpan.from_points(pts), cfg, error_dims=error_dims)


def reverse_field(f: VectorField, s0: float, s1: float) -> VectorField:
    """Field of ``y(tau) = z(s1 - tau)``: integrating it over [0, s1 - s0] runs ``f`` backward."""
    del s0

    def g(tau, y):
        return -f(s1 - tau, y)

    return g


# -- trajectory dumps -----------------------------------------------------------------------


def dump_trajectory(traj: Trajectory, path) -> None:
    """JSON lines: one ``{"s", "z"}`` record per depth, then a ``{"stats"}`` trailer."""
    with open(path, "w") as fh:
        for s, z in zip(traj.depths, traj.points.data):
            fh.write(json.dumps({"s": float(s), "z": z.tolist()}) + "\n")
        fh.write(json.dumps({"stats": asdict(traj.stats)}) + "\n")


def load_trajectory(path) -> Trajectory:
    lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines or "stats" not in lines[-1]:
        raise ValueError(f"{path}: missing stats trailer")
    records, trailer = lines[:-1], lines[-1]
    points = np.array([r["z"] for r in records], dtype=np.float64)
    return Trajectory(Tensor(points), tuple(r["s"] for r in records), SolveStats(**trailer["stats"]))
