"""End-to-end acceptance checks, one class per criterion.

Each class accumulates the wall time of its tests and closes with a budget
check, so a criterion passes only if it is both correct and fast enough.
"""

import contextlib
import math
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest

from neurode import autograd as ag
from neurode.autograd import Tensor
from neurode.harness import ExperimentConfig, train
from neurode.models import (CNF, HamiltonianField, LagrangianField, NeuralODE, StableField,
                            divergence_exact, divergence_hutchinson, standard_normal_logpdf)
from neurode.nn import (DepthCat, GalLinear, Lambda, Linear, Module, Sequential, Softplus, Tanh,
                        flatten_params, unflatten_params)
from neurode.odeint import DepthSpan, SolverConfig, solve
from neurode.sensitivity import (IntegralLoss, grad_adjoint, grad_adjoint_integral, grad_backprop,
                                 kinetic_integrand)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

_elapsed = defaultdict(float)


@pytest.fixture(autouse=True)
def _clock(request):
    marker = request.node.get_closest_marker("criterion")
    start = time.perf_counter()
    yield
    if marker is not None:
        _elapsed[marker.args[0]] += time.perf_counter() - start


def check_budget(number, seconds):
    assert _elapsed[number] < seconds, f"took {_elapsed[number]:.1f}s, budget {seconds}s"


class Field(Module):
    """Solver-facing ``f(s, z)`` around a depth-aware network ``net(z, s)``."""

    def __init__(self, net):
        super().__init__()
        self.net = net

    def __call__(self, s, z):
        return self.net(z, s)


def scalar_net(d, hidden, rng):
    return Sequential(Linear(d, hidden, rng=rng), Tanh(), Linear(hidden, 1, rng=rng))


def fixed(method, h):
    return SolverConfig(method=method, h_init=h, adaptive=False)


# -- 1 ------------------------------------------------------------------------------------------


@pytest.mark.criterion(1, "API contract of the reference stack")
class TestCriterion1:
    def model(self, **kw):
        rng = np.random.default_rng(0)
        return NeuralODE(Sequential(DepthCat(1), Linear(3, 64, rng=rng), Tanh(), Linear(64, 2, rng=rng)), **kw)

    def test_parameter_count(self):
        m = self.model()
        assert m.param_count() == 386
        assert m.summary()["num_parameters"] == 386

    @pytest.mark.parametrize("sensitivity", ["autograd", "adjoint"])
    def test_shapes(self, sensitivity):
        m = self.model(sensitivity=sensitivity)
        x = Tensor(np.random.default_rng(1).standard_normal((128, 2)))
        assert m(x).shape == (128, 2)
        assert m.trajectory(x, np.linspace(0.0, 1.0, 50)).points.shape == (50, 128, 2)

    def test_defaults(self):
        m = self.model()
        assert m.solver.method == "dopri5"
        assert m.solver.rtol == 1e-4 and m.solver.atol == 1e-4
        assert (m.span.s0, m.span.s1) == (0.0, 1.0)

    def test_runtime(self):
        check_budget(1, 10)


# -- 2 ------------------------------------------------------------------------------------------


def global_error(method, h):
    traj = solve(lambda s, z: z, Tensor(np.ones((1, 1))), DepthSpan(0.0, 1.0), fixed(method, h))
    return abs(traj.points.data[-1, 0, 0] - math.e)


@pytest.mark.criterion(2, "solver convergence orders")
class TestCriterion2:
    @pytest.mark.parametrize("method,order,tol", [("euler", 1, 0.2), ("rk4", 4, 0.3)])
    def test_slope(self, method, order, tol):
        hs = np.array([0.1, 0.05, 0.025, 0.0125])
        errs = np.array([global_error(method, h) for h in hs])
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert abs(slope - order) <= tol, slope

    def test_dopri5_rotation(self):
        rot = lambda s, z: ag.concat([-z[:, 1:2], z[:, 0:1]], axis=1)
        traj = solve(rot, Tensor(np.array([[1.0, 0.0]])), DepthSpan(0.0, math.pi / 2), SolverConfig())
        np.testing.assert_allclose(traj.points.data[-1, 0], [0.0, 1.0], atol=1e-3)

    def test_runtime(self):
        check_budget(2, 30)


# -- 3 ------------------------------------------------------------------------------------------


def random_model(seed):
    """A random depth-aware MLP field with d <= 4 and at most 500 parameters."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 5))
    hidden = int(rng.integers(4, 17))
    act = Tanh if rng.random() < 0.5 else Softplus
    layers = [DepthCat(1)] if rng.random() < 0.6 else []
    layers += [Linear(d + len(layers), hidden, rng=rng), act()]
    if rng.random() < 0.5:
        layers += [Linear(hidden, hidden, rng=rng), Tanh()]
    layers.append(Linear(hidden, d, rng=rng))
    model = Field(Sequential(*layers))
    z0 = rng.standard_normal((3, d))
    weights = Tensor(rng.standard_normal((3, d)))
    s1 = float(rng.uniform(0.5, 1.5))
    terminal = lambda z: ag.sum(z * weights) + ag.sum(ag.square(z)) * 0.5
    return model, z0, DepthSpan(0.0, s1), terminal


def terminal_loss(model, z0, span, cfg, terminal):
    with ag.no_grad():
        return terminal(solve(model, Tensor(z0), span, cfg).points[-1]).item()


def fd_gradients(model, z0, span, cfg, terminal, h=1e-5):
    theta = flatten_params(model)
    dtheta = np.zeros_like(theta)
    for i in range(theta.size):
        vals = []
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[i] += sign * h
            unflatten_params(model, t)
            vals.append(terminal_loss(model, z0, span, cfg, terminal))
        dtheta[i] = (vals[0] - vals[1]) / (2 * h)
    unflatten_params(model, theta)
    dz0 = np.zeros_like(z0)
    for idx in np.ndindex(z0.shape):
        vals = []
        for sign in (1.0, -1.0):
            z = z0.copy()
            z[idx] += sign * h
            vals.append(terminal_loss(model, z, span, cfg, terminal))
        dz0[idx] = (vals[0] - vals[1]) / (2 * h)
    return dtheta, dz0


def assert_grad_close(actual, expected, rtol=1e-3):
    # elementwise rtol; the absolute floor only covers entries many orders below the largest one
    floor = 1e-6 * max(np.max(np.abs(expected)), 1e-12)
    np.testing.assert_allclose(actual, expected, rtol=rtol, atol=floor)


N_MODELS = 20
FD_SOLVER = fixed("rk4", 0.05)
FINE_SOLVER = fixed("rk4", 1e-3)


@pytest.mark.criterion(3, "gradient correctness on random models")
class TestCriterion3:
    def test_models_in_range(self):
        for seed in range(N_MODELS):
            model, z0, _, _ = random_model(seed)
            assert z0.shape[1] <= 4 and model.param_count() <= 500

    @pytest.mark.parametrize("seed", range(N_MODELS))
    def test_backprop_and_adjoint_match_fd(self, seed):
        model, z0, span, terminal = random_model(seed)
        fd_theta, fd_z0 = fd_gradients(model, z0, span, FD_SOLVER, terminal)
        for method in (grad_backprop, grad_adjoint):
            res = method(model, z0, span, FD_SOLVER, terminal=terminal)
            assert_grad_close(res.dtheta, fd_theta)
            assert_grad_close(res.dz0, fd_z0)

    @pytest.mark.parametrize("seed", range(N_MODELS))
    def test_backprop_matches_adjoint_fine(self, seed):
        model, z0, span, terminal = random_model(seed)
        bp = grad_backprop(model, z0, span, FINE_SOLVER, terminal=terminal)
        adj = grad_adjoint(model, z0, span, FINE_SOLVER, terminal=terminal)
        assert_grad_close(adj.dtheta, bp.dtheta)
        assert_grad_close(adj.dz0, bp.dz0)

    def test_runtime(self):
        check_budget(3, 300)


# -- 4 ------------------------------------------------------------------------------------------


@pytest.mark.criterion(4, "adjoint memory independent of step count")
class TestCriterion4:
    @pytest.mark.parametrize("seed", range(3))
    def test_peak_nodes_flat(self, seed):
        model, z0, span, terminal = random_model(seed)
        peaks = [grad_adjoint(model, z0, span, fixed("rk4", h), terminal=terminal).peak_nodes
                 for h in (1e-1, 1e-2, 1e-3)]
        assert max(peaks) - min(peaks) <= 1, peaks

    def test_backprop_grows(self):
        model, z0, span, terminal = random_model(0)
        peaks = [grad_backprop(model, z0, span, fixed("rk4", h), terminal=terminal).peak_nodes
                 for h in (1e-1, 1e-2)]
        assert peaks[1] > 5 * peaks[0]

    def test_runtime(self):
        check_budget(4, 60)


# -- 5 ------------------------------------------------------------------------------------------


class ScalarLinear(Module):
    def __init__(self, theta):
        super().__init__()
        self.theta = ag.Parameter(np.array([theta]))

    def __call__(self, s, z):
        return z * self.theta


def integral_of_square(theta):
    """Integral over [0, 1] of exp(theta s)^2."""
    return math.expm1(2 * theta) / (2 * theta)


def integral_adjoint_grad(theta):
    il = IntegralLoss(lambda s, z, dz: ag.sum(ag.square(z), axis=1))
    return grad_adjoint_integral(ScalarLinear(theta), np.array([[1.0]]), il,
                                 cfg=SolverConfig(rtol=1e-8, atol=1e-8))


@pytest.mark.criterion(5, "integral-loss adjoint against a closed form")
class TestCriterion5:
    @pytest.mark.parametrize("theta", [0.5, 1.0])
    def test_matches_closed_form(self, theta):
        h = 1e-5
        fd = (integral_of_square(theta + h) - integral_of_square(theta - h)) / (2 * h)
        res = integral_adjoint_grad(theta)
        assert res.loss == pytest.approx(integral_of_square(theta), rel=1e-6)
        np.testing.assert_allclose(res.dtheta, [fd], rtol=1e-3)

    @pytest.mark.xfail(strict=True, reason="(e^{2t}-1)/2 drops the 1/t factor of the integral")
    @pytest.mark.parametrize("theta", [0.5, 1.0])
    def test_uncorrected_formula(self, theta):
        formula = lambda t: math.expm1(2 * t) / 2
        h = 1e-5
        fd = (formula(theta + h) - formula(theta - h)) / (2 * h)
        np.testing.assert_allclose(integral_adjoint_grad(theta).dtheta, [fd], rtol=1e-3)

    def test_runtime(self):
        check_budget(5, 60)


# -- 6 ------------------------------------------------------------------------------------------


def field_of(module):
    return lambda s, z: module(z, s)


class HarmonicLagrangian(Module):
    """L = qdot^2 / 2 - q^2 / 2 for a single degree of freedom."""

    def forward(self, z, s=None):
        return ag.reshape((ag.square(z[:, 1]) - ag.square(z[:, 0])) * 0.5, (z.shape[0], 1))


@pytest.mark.criterion(6, "energy-based fields")
class TestCriterion6:
    @pytest.mark.parametrize("seed,d", [(0, 2), (1, 2), (2, 4), (3, 4)])
    def test_hamiltonian_conservation(self, seed, d):
        rng = np.random.default_rng(seed)
        H = HamiltonianField(scalar_net(d, 16, rng))
        z0 = rng.standard_normal((4, d))
        tol = 1e-6
        with ag.no_grad():
            traj = solve(field_of(H), Tensor(z0), DepthSpan.from_points(np.linspace(0, 10, 101)),
                         SolverConfig(rtol=tol, atol=tol))
            energy = np.stack([H.energy(Tensor(p)).data[:, 0] for p in traj.points.data])
        drift = np.max(np.abs(energy - energy[0]))
        assert drift <= 100 * tol, drift

    @pytest.mark.parametrize("seed", range(3))
    def test_stable_energy_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        E = StableField(scalar_net(3, 16, rng))
        tol = 1e-8
        with ag.no_grad():
            traj = solve(field_of(E), Tensor(rng.standard_normal((4, 3))),
                         DepthSpan.from_points(np.linspace(0, 5, 51)), SolverConfig(rtol=tol, atol=tol))
            energy = np.stack([E.energy(Tensor(p)).data[:, 0] for p in traj.points.data])
        assert np.all(np.diff(energy, axis=0) <= tol)
        assert np.all(energy[-1] < energy[0])

    def test_lagrangian_oscillator(self):
        L = LagrangianField(HarmonicLagrangian())
        s = np.linspace(0, 2 * math.pi, 41)
        with ag.no_grad():
            traj = solve(field_of(L), Tensor(np.array([[1.0, 0.0]])), DepthSpan.from_points(s),
                         SolverConfig(rtol=1e-8, atol=1e-8))
        np.testing.assert_allclose(traj.points.data[:, 0, 0], np.cos(s), atol=1e-3)

    def test_runtime(self):
        check_budget(6, 120)


# -- 7 ------------------------------------------------------------------------------------------


@pytest.mark.criterion(7, "continuous normalizing flows")
class TestCriterion7:
    def test_zero_field_is_base_density(self):
        cnf = CNF(Lambda(lambda x: x * 0.0), 2)
        x = Tensor(np.random.default_rng(0).standard_normal((16, 2)))
        with ag.no_grad():
            np.testing.assert_array_equal(cnf.log_prob(x).data, standard_normal_logpdf(x).data)

    @pytest.mark.parametrize("seed", range(2))
    def test_normalization_1d(self, seed):
        rng = np.random.default_rng(seed)
        net = Sequential(Linear(1, 16, rng=rng), Tanh(), Linear(16, 1, rng=rng))
        cnf = CNF(net, 1, rtol=1e-7, atol=1e-7)
        grid = np.linspace(-12.0, 12.0, 2401)
        with ag.no_grad():
            density = np.exp(cnf.log_prob(Tensor(grid[:, None])).data)
        assert abs(np.trapezoid(density, grid) - 1.0) < 1e-2

    @pytest.mark.parametrize("seed", range(3))
    def test_hutchinson_unbiased(self, seed):
        rng = np.random.default_rng(seed)
        net = Sequential(Linear(3, 16, rng=rng), Tanh(), Linear(16, 3, rng=rng))
        f = lambda s, z: net(z)
        z = rng.standard_normal((1, 3))
        exact = divergence_exact(f, 0.0, Tensor(z)).item()
        with ag.no_grad():
            # one independent probe per row of a batch of identical points
            draws = divergence_hutchinson(f, 0.0, Tensor(np.repeat(z, 10_000, axis=0)), 1, rng).data
        se = draws.std(ddof=1) / math.sqrt(draws.size)
        assert se > 0
        assert abs(draws.mean() - exact) <= 4 * se

    def test_hutchinson_diagonal_single_sample(self):
        rng = np.random.default_rng(0)
        w, b = Tensor(rng.standard_normal(4)), Tensor(rng.standard_normal(4))
        f = lambda s, z: ag.tanh(z * w + b)
        z = Tensor(rng.standard_normal((8, 4)))
        exact = divergence_exact(f, 0.0, z).data
        for _ in range(5):
            est = divergence_hutchinson(f, 0.0, z, 1, rng).data
            np.testing.assert_array_equal(est, exact)

    def test_runtime(self):
        check_budget(7, 180)


# -- 8 ------------------------------------------------------------------------------------------


class LagrangianNet(Module):
    """Unit mass kinetic term plus a small learned potential, so the mass matrix stays regular."""

    def __init__(self, d, rng):
        super().__init__()
        self.potential = scalar_net(d, 8, rng)

    def forward(self, z, s=None):
        n = z.shape[1] // 2
        kinetic = ag.reshape(ag.sum(ag.square(z[:, n:]), axis=1) * 0.5, (z.shape[0], 1))
        return kinetic + self.potential(z) * 0.1


def make_field(kind, dim, rng, order=1):
    width = dim // order
    if kind == "depthcat":
        return Sequential(DepthCat(1), Linear(dim + 1, 8, rng=rng), Tanh(), Linear(8, width, rng=rng))
    if kind == "galerkin":
        return Sequential(GalLinear(dim, 8, 2, rng=rng), Tanh(), GalLinear(8, width, 2, rng=rng))
    if kind == "hamiltonian":
        return HamiltonianField(scalar_net(dim, 8, rng))
    if kind == "stable":
        return StableField(scalar_net(dim, 8, rng))
    return LagrangianField(LagrangianNet(dim, rng))


FIELDS = ("depthcat", "galerkin", "hamiltonian", "stable", "lagrangian")
MODIFIERS = ("plain", "augmented", "second_order", "integral_loss", "cnf_exact", "cnf_hutchinson",
             "augmented_cnf")
ENERGY = ("hamiltonian", "stable", "lagrangian")


def supported(kind, modifier):
    # energy fields define their own first-order dynamics
    return not (kind in ENERGY and modifier == "second_order")


def inference_only(kind, modifier):
    # a differentiable trace of Lagrangian dynamics would be a third nested derivative
    return kind == "lagrangian" and "cnf" in modifier


COMBOS = [(k, m, s) for k in FIELDS for m in MODIFIERS for s in ("autograd", "adjoint") if supported(k, m)]


@pytest.mark.criterion(8, "composition matrix")
class TestCriterion8:
    @pytest.mark.parametrize("kind,modifier,sensitivity", COMBOS)
    def test_forward(self, kind, modifier, sensitivity):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((5, 2)))
        opts = dict(sensitivity=sensitivity, rtol=1e-3, atol=1e-3)
        aug = 2 if modifier.startswith("augmented") else 0
        if "cnf" in modifier:
            trace = "hutchinson" if modifier == "cnf_hutchinson" else "exact"
            model = CNF(make_field(kind, 2 + aug, rng), 2, trace=trace, rng=np.random.default_rng(1),
                        augment_dims=aug, **opts)
            with ag.no_grad() if inference_only(kind, modifier) else contextlib.nullcontext():
                out = model.log_prob(x)
            assert out.shape == (5,)
        else:
            order = 2 if modifier == "second_order" else 1
            integral = kinetic_integrand if modifier == "integral_loss" else None
            model = NeuralODE(make_field(kind, 2 + aug, rng, order), order=order, augment_dims=aug,
                              integral_loss=integral, **opts)
            out = model(x)
            assert out.shape == (5, 2 + aug)
            if integral is not None:
                assert model.integral.shape == (5,)
        assert np.all(np.isfinite(out.data))

    def test_lagrangian_cnf_gradients_exceed_nesting_cap(self):
        rng = np.random.default_rng(0)
        model = CNF(make_field("lagrangian", 2, rng), 2, rtol=1e-3, atol=1e-3)
        with pytest.raises(ag.NestingError):
            model.log_prob(Tensor(rng.standard_normal((5, 2))))

    def test_runtime(self):
        check_budget(8, 60)


# -- 9 ------------------------------------------------------------------------------------------


@pytest.mark.criterion(9, "desk-scale training")
class TestCriterion9:
    def test_moons_accuracy(self):
        cfg = ExperimentConfig.load(CONFIGS / "moons.json")
        assert cfg.optimizer.steps <= 2000
        report = train(cfg)
        assert report.final["accuracy"] >= 0.95

    def test_density_monotone(self):
        cfg = ExperimentConfig.load(CONFIGS / "density.json")
        assert cfg.optimizer.steps == 200 and cfg.seed == 0
        assert cfg.optimizer.batch_size >= cfg.n_samples  # full batch, so the loss is the NLL
        report = train(cfg)
        assert len(report.losses) == 200
        assert np.all(np.diff(report.losses) < 0)

    def test_runtime(self):
        check_budget(9, 600)
