"""Hessian spectra of plain and noise-smoothed losses, plus the noise experiments.

Losses are callables mapping a 1-D parameter Tensor to a scalar Tensor.
Hessian-vector products are central differences of reverse-mode gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ConvergenceError, NumericError
from .samplers import NoiseBuffer, seed_sequence
from .tensor import Tensor

LossFn = Callable[[Tensor], Tensor]


def gradient(loss: LossFn, theta) -> np.ndarray:
    _, g = T.value_and_grad(loss, np.asarray(theta, dtype=np.float64))
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient")
    return g


def default_step(theta) -> float:
    return 1e-5 * (1.0 + float(np.linalg.norm(theta)))


def hvp(loss: LossFn, theta, v, h: float | None = None) -> np.ndarray:
    """(grad J(theta + h v) - grad J(theta - h v)) / 2h."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not np.linalg.norm(v) > 0:
        raise ContractError("hvp direction must be non-zero")
    h = default_step(theta) if h is None else h
    return (gradient(loss, theta + h * v) - gradient(loss, theta - h * v)) / (2.0 * h)


def dense_hessian(loss: LossFn, theta, h: float | None = None) -> np.ndarray:
    """Column-by-column Hessian from hvp on the unit vectors, symmetrised."""
    theta = np.asarray(theta, dtype=np.float64)
    eye = np.eye(theta.size)
    cols = np.stack([hvp(loss, theta, eye[i], h) for i in range(theta.size)], axis=1)
    return 0.5 * (cols + cols.T)


def power_iteration(op: Callable[[np.ndarray], np.ndarray], dim: int, max_iter: int = 5000, tol: float = 1e-6,
                    seed: int = 0) -> float:
    """Largest eigenvalue of a symmetric linear operator.

    Plain power iteration finds the eigenvalue of largest magnitude; if that
    one is negative, a second run on ``op - mu I`` recovers the largest. The
    stopping rule is a relative eigen-residual ``|op(v) - mu v| <= tol |mu|``.
    """
    rng = np.random.default_rng(seed)

    def run(shift: float) -> float:
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        mu = 0.0
        for _ in range(max_iter):
            w = op(v) - shift * v
            mu = float(v @ w)
            norm = float(np.linalg.norm(w))
            if not math.isfinite(norm):
                raise NumericError("operator produced non-finite values")
            scale = max(abs(mu), abs(shift), 1e-300)
            if norm <= 1e-12 * max(abs(shift), 1.0):
                return 0.0
            if np.linalg.norm(w - mu * v) <= tol * scale:
                return mu
            v = w / norm
        raise ConvergenceError(f"power iteration did not converge in {max_iter} iterations", v, mu)

    dominant = run(0.0)
    if dominant >= 0:
        return dominant
    return dominant + run(dominant)


def lambda_max(loss: LossFn, theta, max_iter: int = 5000, tol: float = 1e-6, h: float | None = None,
               seed: int = 0) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    return power_iteration(lambda v: hvp(loss, theta, v, h), theta.size, max_iter, tol, seed)


@dataclass
class HessianProbe:
    loss: LossFn
    theta: np.ndarray
    sigma: float
    n_samples: int = 100
    seed: int = 0
    max_iter: int = 5000
    tol: float = 1e-6

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=np.float64))
        if self.sigma < 0:
            raise ContractError("sigma must be non-negative")
        if self.n_samples < 1:
            raise ContractError("n_samples must be at least 1")

    def perturbations(self) -> np.ndarray:
        rng = np.random.default_rng(seed_sequence(self.seed, 3))
        return self.sigma * rng.standard_normal((self.n_samples, self.theta.size))


def smoothed_lambda_max(probe: HessianProbe, min_samples: int = 30) -> float:
    """lambda_max of v -> mean_i H(theta + gamma_i) v over fixed perturbation draws."""
    if probe.n_samples < min_samples:
        raise ContractError(f"smoothed_lambda_max needs at least {min_samples} samples")
    points = probe.theta + probe.perturbations()

    def op(v):
        return np.mean([hvp(probe.loss, p, v) for p in points], axis=0)

    return power_iteration(op, probe.theta.size, probe.max_iter, probe.tol, probe.seed)


def pointwise_lambda_max(probe: HessianProbe) -> np.ndarray:
    return np.array([
        lambda_max(probe.loss, p, probe.max_iter, probe.tol, seed=probe.seed)
        for p in probe.theta + probe.perturbations()
    ])


class SmoothingCheck(NamedTuple):
    smoothed: float
    pointwise_max: float
    holds: bool


def smoothing_check(probe: HessianProbe, rtol: float = 1e-5) -> SmoothingCheck:
    """Is lambda_max of the averaged operator at most the largest pointwise lambda_max?

    ``rtol`` absorbs the power-iteration and finite-difference error.
    """
    smoothed = smoothed_lambda_max(probe)
    top = float(pointwise_lambda_max(probe).max())
    return SmoothingCheck(smoothed, top, smoothed <= top + rtol * max(abs(top), 1.0))


def gradient_lipschitz_ratio(loss: LossFn, dim: int, n_pairs: int = 1000, seed: int = 0,
                             radius: float = 1.0) -> float:
    """max |grad J(x) - grad J(y)| / |x - y| over random pairs in a box."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_pairs):
        x, y = rng.uniform(-radius, radius, (2, dim))
        best = max(best, float(np.linalg.norm(gradient(loss, x) - gradient(loss, y)) / np.linalg.norm(x - y)))
    return best


# -- toy losses -------------------------------------------------------------------------


def quadratic_loss(a: np.ndarray) -> LossFn:
    """J = 1/2 theta^T A theta."""
    a = np.asarray(a, dtype=np.float64)
    a = T.constant(0.5 * (a + a.T))

    def loss(theta: Tensor) -> Tensor:
        col = T.reshape(theta, (-1, 1))
        return T.scale(T.tsum(col.T @ a @ col), 0.5)

    return loss


def quartic_loss(theta: Tensor) -> Tensor:
    """J = sum(theta^4)."""
    return T.tsum(T.power(theta, 4.0))


def factorization_loss(target: float = 1.0) -> LossFn:
    """J = 1/2 (theta_1 theta_2 - target)^2, a degree-4 scalar matrix-factorisation loss."""

    def loss(theta: Tensor) -> Tensor:
        prod = T.getitem(theta, 0) * T.getitem(theta, 1)
        return T.scale(T.square(prod - target), 0.5)

    return loss


def mlp_loss(n_in: int = 3, hidden: int = 4, n_out: int = 2, n_points: int = 8, seed: int = 0):
    """Cross-entropy of a tiny tanh MLP on fixed random data; returns (loss, theta0, dim)."""
    rng = np.random.default_rng(seed)
    x = T.constant(rng.standard_normal((n_points, n_in)))
    y = rng.integers(0, n_out, n_points)
    shapes = [(hidden, n_in), (hidden,), (n_out, hidden), (n_out,)]
    sizes = [int(np.prod(s)) for s in shapes]
    offsets = np.cumsum([0] + sizes)

    def loss(theta: Tensor) -> Tensor:
        w1, b1, w2, b2 = (T.reshape(T.getitem(theta, slice(offsets[i], offsets[i + 1])), shapes[i])
                          for i in range(4))
        h = T.tanh(T.add_bias(x @ w1.T, b1))
        return T.softmax_cross_entropy(T.add_bias(h @ w2.T, b2), y)

    dim = int(offsets[-1])
    return loss, rng.standard_normal(dim) * 0.5, dim


# -- noise experiments ---------------------------------------------------------------------


@dataclass
class LRSensitivityRow:
    learning_rate: float
    seed: int
    clean_converged: bool
    noisy_converged: bool
    clean_final: float
    noisy_final: float
    degenerate: bool


@dataclass
class LRSensitivityTable:
    initial_loss: float
    rows: list = field(default_factory=list)

    def frontier(self, variant: str, seed: int) -> float:
        """Largest learning rate on the ladder that converged for this seed (0 if none)."""
        key = f"{variant}_converged"
        ok = [r.learning_rate for r in self.rows if r.seed == seed and getattr(r, key) and not r.degenerate]
        return max(ok, default=0.0)

    def seeds(self) -> list:
        return sorted({r.seed for r in self.rows})

    def noisy_at_least_clean(self) -> int:
        return sum(self.frontier("noisy", s) >= self.frontier("clean", s) for s in self.seeds())


def _descend(loss: LossFn, theta0: np.ndarray, lr: float, steps: int, sigma: float, rng, n_noise: int,
             blowup: float) -> float:
    theta = theta0.copy()
    for _ in range(steps):
        if sigma > 0:
            g = np.mean([gradient(loss, theta + sigma * rng.standard_normal(theta.size)) for _ in range(n_noise)],
                        axis=0)
        else:
            g = gradient(loss, theta)
        theta = theta - lr * g
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > blowup:
            return float("inf")
    with T.no_grad():
        return float(loss(Tensor(theta)).item())


def lr_sensitivity_experiment(loss: LossFn, theta0, learning_rates, sigma: float, seeds=(0, 1, 2, 3, 4),
                              steps: int = 100, n_noise: int = 1, blowup: float = 1e6) -> LRSensitivityTable:
    """Gradient descent with and without Gaussian parameter noise over a learning-rate ladder.

    The noisy variant steps along grad J(theta + gamma), gamma ~ N(0, sigma^2 I),
    averaged over ``n_noise`` draws. A run converges when the clean loss at its
    final iterate is below the initial loss; lr = 0 rows are flagged degenerate.
    """
    lrs = [float(v) for v in learning_rates]
    if lrs != sorted(lrs):
        raise ContractError("learning rates must be sorted ascending")
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=np.float64))
    with T.no_grad():
        initial = float(loss(Tensor(theta0)).item())
    table = LRSensitivityTable(initial)
    for seed in seeds:
        for lr in lrs:
            rng = np.random.default_rng(seed_sequence(seed, 5))
            clean = _descend(loss, theta0, lr, steps, 0.0, rng, n_noise, blowup)
            noisy = _descend(loss, theta0, lr, steps, sigma, rng, n_noise, blowup)
            degenerate = lr == 0.0
            table.rows.append(LRSensitivityRow(
                lr, seed, degenerate or clean < initial, degenerate or noisy < initial, clean, noisy, degenerate
            ))
    return table


class OutputShiftTable(NamedTuple):
    epsilons: np.ndarray
    shifts: np.ndarray
    slope: float  # least squares through the origin
    max_deviation: float  # max relative deviation from slope * eps (eps > 0 only)
    note: str


def output_shift_experiment(model, x, epsilons, seed: int = 0) -> OutputShiftTable:
    """|train-mode output - eval-mode output| / |x| for each eps with the base noise held fixed."""
    eps = np.asarray(list(epsilons), dtype=np.float64)
    if np.any(eps > 1e-2) or np.any(eps < 0):
        raise ContractError("epsilon values must lie in [0, 1e-2]")
    x = np.asarray(x, dtype=np.float64)
    x_norm = float(np.linalg.norm(x))
    if x_norm == 0:
        return OutputShiftTable(eps, np.full(eps.shape, np.nan), float("nan"), float("nan"), "skipped: |X| = 0")
    layers = model.mixture_layers()
    if not layers:
        raise ContractError("model has no mixture layers")
    saved = {name: (layer.spec.epsilon, layer.buffer) for name, layer in layers.items()}
    shifts = []
    try:
        with T.no_grad():
            model.eval()
            base = model(x).values
            model.train()
            for value in eps:
                for i, layer in enumerate(layers.values()):
                    layer.spec.epsilon = float(value)
                    layer.buffer = NoiseBuffer(layer.spec.noise_shape, seed_sequence(seed, 6, i),
                                               capacity=layer.buffer.capacity)
                shifts.append(float(np.linalg.norm(model(x).values - base)) / x_norm)
    finally:
        for name, layer in layers.items():
            layer.spec.epsilon, layer.buffer = saved[name]
    shifts = np.asarray(shifts)
    slope = float(eps @ shifts / (eps @ eps)) if np.any(eps > 0) else 0.0
    pos = eps > 0
    deviation = float(np.max(np.abs(shifts[pos] - slope * eps[pos]) / (slope * eps[pos]))) if pos.any() and slope > 0 else 0.0
    return OutputShiftTable(eps, shifts, slope, deviation, "")

