"""Synthetic datasets, fully determined by ``(task, n, seed)``."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .config import TASKS, ConfigError

DEFAULT_NOISE = {
    "classify_moons": 0.1,
    "classify_circles": 0.05,
    "density_gaussians": 0.2,
    "oscillator_regression": 0.0,
}


def make_moons(n: int, noise: float, rng: np.random.Generator):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1),
    ])
    y = np.concatenate([np.zeros(n_out), np.ones(n_in)]).astype(np.int64)
    x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def make_circles(n: int, noise: float, rng: np.random.Generator, factor: float = 0.5):
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, 2 * np.pi, n_out, endpoint=False)
    t_in = np.linspace(0.0, 2 * np.pi, n_in, endpoint=False)
    x = np.concatenate([
        np.stack([np.cos(t_out), np.sin(t_out)], axis=1),
        factor * np.stack([np.cos(t_in), np.sin(t_in)], axis=1),
    ])
    y = np.concatenate([np.zeros(n_out), np.ones(n_in)]).astype(np.int64)
    x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return x[perm], y[perm]


def make_gaussian_ring(n: int, std: float, rng: np.random.Generator, radius: float = 2.0, k: int = 8):
    angles = 2 * np.pi * np.arange(k) / k
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    idx = rng.integers(0, k, size=n)
    return centers[idx] + std * rng.standard_normal((n, 2))


def oscillator_targets(q0, v0, horizon: float):
    """Position at ``horizon`` of the unit harmonic oscillator started at ``(q0, v0)``."""
    return np.cos(horizon) * q0 + np.sin(horizon) * v0


def generate_dataset(task: str, n: int, seed: int, noise: Optional[float] = None,
                     horizon: float = 1.0):
    """Return ``(inputs, targets)``; ``targets`` is ``None`` for the density task."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; valid tasks: {list(TASKS)}")
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng([seed, 0])
    noise = DEFAULT_NOISE[task] if noise is None else noise
    if task == "classify_moons":
        return make_moons(n, noise, rng)
    if task == "classify_circles":
        return make_circles(n, noise, rng)
    if task == "density_gaussians":
        return make_gaussian_ring(n, noise, rng), None
    x = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = oscillator_targets(x[:, 0], x[:, 1], horizon)
    if noise:
        y = y + noise * rng.standard_normal(n)
    return x, y
