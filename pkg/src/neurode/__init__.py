"""Continuous-depth models: Neural ODEs and their variants on a small numpy autodiff core."""

from .autograd import Parameter, Tensor, enable_grad, grad, no_grad
from .models import (
    CNF,
    DEFunc,
    HamiltonianField,
    LagrangianField,
    NeuralODE,
    StableField,
    divergence_exact,
    divergence_hutchinson,
)
from .nn import DepthCat, GalLinear, Linear, Module, Sequential, Softplus, Tanh
from .odeint import DepthSpan, SolverConfig, Trajectory, solve, trajectory_eval
from .sensitivity import IntegralLoss, grad_adjoint, grad_adjoint_integral, grad_backprop

__version__ = "0.1.0"

__all__ = [
    "CNF", "DEFunc", "DepthCat", "DepthSpan", "GalLinear", "HamiltonianField", "IntegralLoss",
    "LagrangianField", "Linear", "Module", "NeuralODE", "Parameter", "Sequential", "Softplus",
    "SolverConfig", "StableField", "Tanh", "Tensor", "Trajectory", "divergence_exact",
    "divergence_hutchinson", "enable_grad", "grad", "grad_adjoint", "grad_adjoint_integral",
    "grad_backprop", "no_grad", "solve", "trajectory_eval",
]
