"""Layers and containers used to parametrize vector fields.

Modules are called as ``module(x, s)``; the depth ``s`` is forwarded only to
depth-aware layers (``DepthCat``, ``GalLinear`` and containers holding
them), so ordinary layers never see it.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Parameter, ShapeError, Tensor

_default_rng = np.random.default_rng(0)


def manual_seed(seed: int) -> None:
    """Reseed the generator used when a layer is built without an explicit ``rng``."""
    global _default_rng
    _default_rng = np.random.default_rng(seed)


def _rng(rng):
    return _default_rng if rng is None else rng


class CheckpointError(ValueError):
    """A checkpoint that cannot be loaded into the given module."""


class Module:
    """Base container tracking parameters and submodules in registration order."""

    depth_aware = False

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if "_params" not in self.__dict__:
            raise RuntimeError(f"{type(self).__name__}.__init__ must call super().__init__()")
        self._params.pop(name, None)
        self._modules.pop(name, None)
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, x, s=None):
        if self.depth_aware:
            return self.forward(x, s)
        return self.forward(x)

    def forward(self, *args):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def extra_repr(self) -> str:
        return ""

    def __repr__(self):
        lines = [f"{type(self).__name__}({self.extra_repr()}"]
        if self._modules:
            for name, m in self._modules.items():
                child = repr(m).replace("\n", "\n  ")
                lines.append(f"  ({name}): {child}")
            lines.append(")")
            return "\n".join(lines)
        return lines[0] + ")"


class Linear(Module):
    """Affine map ``x W^T + b`` with uniform(-1/sqrt(in), 1/sqrt(in)) initialization."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True, rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        bound = 1.0 / math.sqrt(in_features)
        r = _rng(rng)
        self.weight = Parameter(r.uniform(-bound, bound, size=(out_features, in_features)))
        self.bias = Parameter(r.uniform(-bound, bound, size=(out_features,))) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Linear expects trailing extent {self.in_features}, got input shape {x.shape}")
        out = ag.matmul(x, ag.transpose(self.weight))
        if self.bias is not None:
            out = out + self.bias
        return out

    def extra_repr(self):
        return f"in_features={self.in_features}, out_features={self.out_features}, bias={self.bias is not None}"


class Tanh(Module):
    def forward(self, x):
        return ag.tanh(x)


class Softplus(Module):
    def forward(self, x):
        return ag.softplus(x)


class Lambda(Module):
    """Wrap a plain function of ``x`` (or of ``(x, s)`` when ``depth_aware``)."""

    def __init__(self, fn: Callable, depth_aware: bool = False):
        super().__init__()
        self.fn = fn
        self.depth_aware = depth_aware

    def forward(self, *args):
        return self.fn(*args)


class Sequential(Module):
    depth_aware = True

    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i):
        return list(self._modules.values())[i]

    def forward(self, x, s=None):
        for i, layer in enumerate(self._modules.values()):
            try:
                x = layer(x, s)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({type(layer).__name__}): {exc}") from exc
        return x


class DepthCat(Module):
    """Append the depth ``s`` as an extra trailing column of a [B, d] state."""

    depth_aware = True

    def __init__(self, dim: int = 1):
        super().__init__()
        if dim not in (1, -1):
            raise ValueError("DepthCat concatenates along the feature axis (dim=1)")
        self.dim = dim

    def forward(self, x, s=None):
        if x.ndim != 2:
            raise ShapeError(f"DepthCat expects a rank-2 [B, d] input, got shape {x.shape}")
        if s is None:
            raise ValueError("DepthCat needs the depth s")
        col = Tensor(np.full((x.shape[0], 1), float(s)))
        return ag.concat([x, col], axis=1)


class FourierBasis:
    """Constant term followed by ``n_terms`` (cos, sin) pairs, periodic over the depth span."""

    def __init__(self, n_terms: int, span=(0.0, 1.0)):
        if n_terms < 0:
            raise ValueError("n_terms must be non-negative")
        self.n_terms = n_terms
        self.s0, self.s1 = float(span[0]), float(span[1])
        if self.s1 <= self.s0:
            raise ValueError("span must be increasing")
        self.period = self.s1 - self.s0

    def __len__(self):
        return 2 * self.n_terms + 1

    def _angles(self, s):
        k = np.arange(1, self.n_terms + 1)
        return 2.0 * np.pi * k * (float(s) - self.s0) / self.period, 2.0 * np.pi * k / self.period

    def __call__(self, s) -> np.ndarray:
        ang, _ = self._angles(s)
        out = np.empty(len(self))
        out[0] = 1.0
        out[1::2] = np.cos(ang)
        out[2::2] = np.sin(ang)
        return out

    def derivative(self, s) -> np.ndarray:
        ang, w = self._angles(s)
        out = np.zeros(len(self))
        out[1::2] = -w * np.sin(ang)
        out[2::2] = w * np.cos(ang)
        return out


class GalLinear(Module):
    """Linear layer whose weight and bias are Fourier expansions in depth.

    ``W(s) = sum_k C_k psi_k(s)`` and ``b(s) = sum_k c_k psi_k(s)``.  Only the
    constant-term coefficients are randomly initialized; higher harmonics
    start at zero so the layer begins depth-invariant.
    """

    depth_aware = True

    def __init__(self, in_features: int, out_features: int, n_terms: int = 2,
                 span=(0.0, 1.0), rng=None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.basis = FourierBasis(n_terms, span)
        K = len(self.basis)
        bound = 1.0 / math.sqrt(in_features)
        r = _rng(rng)
        w = np.zeros((K, out_features, in_features))
        b = np.zeros((K, out_features))
        w[0] = r.uniform(-bound, bound, size=(out_features, in_features))
        b[0] = r.uniform(-bound, bound, size=out_features)
        self.weight_coeffs = Parameter(w)
        self.bias_coeffs = Parameter(b)

    def _psi(self, s) -> Tensor:
        tol = 1e-9 * self.basis.period
        if s is None or not (self.basis.s0 - tol <= float(s) <= self.basis.s1 + tol):
            raise ValueError(f"GalLinear depth {s} outside span [{self.basis.s0}, {self.basis.s1}]")
        return Tensor(self.basis(s).reshape(1, -1))

    def weight_at(self, s) -> Tensor:
        K = len(self.basis)
        flat = ag.reshape(self.weight_coeffs, (K, self.out_features * self.in_features))
        return ag.reshape(ag.matmul(self._psi(s), flat), (self.out_features, self.in_features))

    def bias_at(self, s) -> Tensor:
        return ag.reshape(ag.matmul(self._psi(s), self.bias_coeffs), (self.out_features,))

    def forward(self, x, s=None):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"GalLinear expects trailing extent {self.in_features}, got input shape {x.shape}")
        return ag.matmul(x, ag.transpose(self.weight_at(s))) + self.bias_at(s)

    def extra_repr(self):
        return (f"in_features={self.in_features}, out_features={self.out_features}, "
                f"n_terms={self.basis.n_terms}")


# -- parameter vectors and checkpoints ------------------------------------------------


def flatten_params(module: Module) -> np.ndarray:
    params = module.parameters()
    if not params:
        return np.zeros(0)
    return np.concatenate([p.data.reshape(-1) for p in params])


def unflatten_params(module: Module, theta) -> None:
    """Write a flat parameter vector back in registration order."""
    theta = np.asarray(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64).reshape(-1)
    params = module.parameters()
    total = sum(p.size for p in params)
    if theta.size != total:
        raise ValueError(f"parameter vector has length {theta.size}, module needs {total}")
    offset = 0
    for p in params:
        p.data[...] = theta[offset:offset + p.size].reshape(p.shape)
        offset += p.size


def flatten_grads(module: Module) -> np.ndarray:
    parts = [np.zeros(p.size) if p.grad is None else np.asarray(p.grad).reshape(-1) for p in module.parameters()]
    return np.concatenate(parts) if parts else np.zeros(0)


def state_dict(module: Module) -> list[dict]:
    return [{"name": name, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in module.named_parameters()]


def load_state_dict(module: Module, records) -> None:
    """Validate every record against ``module`` before writing anything."""
    if not isinstance(records, list):
        raise CheckpointError("checkpoint must be a list of parameter records")
    named = list(module.named_parameters())
    if len(records) != len(named):
        raise CheckpointError(f"checkpoint has {len(records)} parameters, module has {len(named)}")
    staged = []
    for rec, (name, p) in zip(records, named):
        if not isinstance(rec, dict) or set(rec) != {"name", "shape", "values"}:
            raise CheckpointError(f"malformed record for {name}")
        if rec["name"] != name:
            raise CheckpointError(f"expected parameter {name}, found {rec['name']}")
        if tuple(rec["shape"]) != p.shape:
            raise CheckpointError(f"shape mismatch at {name}: checkpoint {tuple(rec['shape'])}, module {p.shape}")
        try:
            values = np.asarray(rec["values"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise CheckpointError(f"non-numeric values at {name}") from exc
        if values.ndim != 1 or values.size != p.size:
            raise CheckpointError(f"value count mismatch at {name}: {values.size} vs {p.size}")
        staged.append((p, values.reshape(p.shape)))
    for p, values in staged:
        p.data[...] = values


def save_checkpoint(module: Module, path) -> None:
    Path(path).write_text(json.dumps(state_dict(module)))


def load_checkpoint(module: Module, path) -> None:
    try:
        records = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    load_state_dict(module, records)
