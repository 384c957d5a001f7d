"""Estimator moment experiments and the ``analyze`` report.

The moment functions run the real layer code (without gradient tracking) and
accumulate running sums, so 1e5 draws need no large arrays.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from . import tensor as T
from .layer import LoraPair, MixtureConfig, MixtureSpec, adapter_output, stochastic_estimate
from .models import build_model, init_base
from .samplers import NoiseBuffer, seed_sequence
from .smoothing import (
    HessianProbe,
    factorization_loss,
    lr_sensitivity_experiment,
    mlp_loss,
    output_shift_experiment,
    quartic_loss,
    smoothing_check,
)


def make_spec(p: int = 4, q: int = 3, n_components: int = 4, epsilon: float = 5e-3, dof: int | None = None,
              v=None, alpha=None, seed: int = 0, **kwargs) -> tuple[MixtureSpec, NoiseBuffer]:
    """A mixture spec with a random mean and the requested V / alpha, plus its noise buffer."""
    rng = np.random.default_rng(seed_sequence(seed, 4))
    config = MixtureConfig(n_components=n_components, epsilon=epsilon, dof=dof, **kwargs)
    spec = MixtureSpec.create(T.parameter(rng.normal(0.0, 0.02, (p, q))), config)
    if v is not None:
        spec.v_raw.values = T.inverse_softplus(np.asarray(v, dtype=np.float64))
    if alpha is not None:
        spec.alpha_raw.values = T.inverse_softplus(np.asarray(alpha, dtype=np.float64))
    return spec, NoiseBuffer(spec.noise_shape, seed_sequence(seed, 5))


class RunningMoments:
    """Streaming mean, entrywise variance and per-column covariance of matrix draws."""

    def __init__(self, shape):
        self.n = 0
        self.total = np.zeros(shape)
        self.squares = np.zeros(shape)
        p = shape[0]
        self.outer = np.zeros((p, p))

    def add(self, d: np.ndarray) -> None:
        self.n += 1
        self.total += d
        self.squares += d * d
        self.outer += d @ d.T  # sum over columns of column outer products

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.n

    @property
    def se(self) -> np.ndarray:
        var = (self.squares / self.n - self.mean ** 2) * self.n / (self.n - 1)
        return np.sqrt(var / self.n)

    def column_covariance(self, n_columns: int) -> np.ndarray:
        """Second moment of one column, averaged over columns (the mean is zero by construction)."""
        return self.outer / (self.n * n_columns)


def estimator_moments(spec: MixtureSpec, buf: NoiseBuffer, n_draws: int) -> RunningMoments:
    """Moments of W_eff - mu over ``n_draws`` estimates."""
    moments = RunningMoments(spec.mu.shape)
    mu = spec.mu.values
    with T.no_grad():
        for _ in range(n_draws):
            moments.add(stochastic_estimate(spec, buf).weight.values - mu)
    return moments


def output_moments(pair: LoraPair, spec: MixtureSpec, buf: NoiseBuffer, x: np.ndarray, n_draws: int) -> RunningMoments:
    """Moments of train-mode output minus eval-mode output for a fixed input batch."""
    with T.no_grad():
        base = adapter_output(x, pair, spec.mu).values
        moments = RunningMoments(base.shape)
        for _ in range(n_draws):
            moments.add(adapter_output(x, pair, stochastic_estimate(spec, buf).weight).values - base)
    return moments


def predicted_column_covariance(spec: MixtureSpec) -> np.ndarray:
    """eps^2 * E[sum pi^2] * E[Sigma] for alpha = 1: eps^2 * 2/(N+1) * dof * diag(V)."""
    n = spec.n_components
    factor = 1.0 if spec.normalize_wishart else float(spec.dof)
    return spec.epsilon ** 2 * (2.0 / (n + 1)) * factor * np.diag(T.softplus_values(spec.v_raw.values))


def covariance_law_table(ns=(2, 4, 8), n_draws: int = 100_000, p: int = 4, q: int = 3, epsilon: float = 5e-3,
                         dof: int | None = None, v=None, seed: int = 0) -> list:
    rows = []
    for n in ns:
        spec, buf = make_spec(p, q, n, epsilon, dof, v=v, seed=seed)
        moments = estimator_moments(spec, buf, n_draws)
        measured = moments.column_covariance(q)
        predicted = predicted_column_covariance(spec)
        diag_rel = np.abs(np.diag(measured) / np.diag(predicted) - 1.0)
        rows.append({
            "N": n, "predicted_diag": np.diag(predicted).tolist(), "measured_diag": np.diag(measured).tolist(),
            "max_rel_err": float(diag_rel.max()), "mean_variance": float(np.mean(np.diag(measured))),
        })
    return rows


def two_layer_model(seed: int = 0, width: int = 16, rank: int = 8, activation: str = "identity",
                    b_std: float = 0.1):
    """Two wrapped width x width layers with non-zero B, so the mixture noise reaches the output."""
    base = init_base("mlp", in_dim=width, n_classes=width, hidden=(width,), seed=seed, activation=activation)
    model = build_model("mlp", "monteclora", rank, base=base, seed=seed)
    rng = np.random.default_rng(seed_sequence(seed, 8))
    for layer in model.adapters().values():
        layer.pair.b.values = rng.normal(0.0, b_std, layer.pair.b.shape)
    return model


# -- analyze subcommand -----------------------------------------------------------------


def run_analysis(out_dir, quick: bool = False, seed: int = 0, mixture: MixtureConfig | None = None) -> dict:
    out = Path(out_dir)
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    n_draws = 5_000 if quick else 100_000
    n_samples = 30 if quick else 100
    tables = {}

    quartic = smoothing_check(HessianProbe(quartic_loss, [0.0], 0.5, n_samples=n_samples, seed=seed))
    loss, theta, _ = mlp_loss(seed=seed)
    mlp = smoothing_check(HessianProbe(loss, theta, 0.3, n_samples=n_samples, seed=seed))
    tables["smoothing"] = {
        "quartic": quartic._asdict(), "quartic_analytic": 12 * 0.5 ** 2, "mlp": mlp._asdict(),
    }

    lrs = [0.0, 0.01, 0.03, 0.1, 0.3, 1.0]
    lr_tables = {}
    for name, fn, theta0 in (("quartic", quartic_loss, [1.0]), ("factorization", factorization_loss(), [2.0, 0.3])):
        table = lr_sensitivity_experiment(fn, theta0, lrs, 0.3, steps=100, n_noise=8)
        lr_tables[name] = {
            "initial_loss": table.initial_loss,
            "frontiers": {str(s): {"clean": table.frontier("clean", s), "noisy": table.frontier("noisy", s)}
                          for s in table.seeds()},
            "noisy_at_least_clean": table.noisy_at_least_clean(),
            "rows": [vars(r) for r in table.rows],
        }
    tables["lr_sensitivity"] = lr_tables

    model = two_layer_model(seed)
    x = np.random.default_rng(seed_sequence(seed, 9)).standard_normal((8, 16))
    eps = [0.0, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3]
    shift = output_shift_experiment(model, x, eps, seed=seed)
    tables["output_shift"] = {
        "epsilons": shift.epsilons.tolist(), "shifts": shift.shifts.tolist(), "slope": shift.slope,
        "max_deviation": shift.max_deviation, "ratio_1e-4": float(shift.shifts[2] / shift.shifts[1]),
    }

    tables["covariance_law"] = covariance_law_table(n_draws=n_draws, seed=seed)

    (out / "analysis.json").write_text(json.dumps(tables, indent=2, sort_keys=True, default=float) + "\n")
    _plot_analysis(tables, plots)
    return tables


def _plot_analysis(tables: dict, plots: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    s = tables["output_shift"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(s["epsilons"], s["shifts"], "o-", label="measured")
    ax.plot(s["epsilons"], [s["slope"] * e for e in s["epsilons"]], "--", label="linear fit")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("|Y_bar - Y| / |X|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plots / "output_shift.png", dpi=100)
    plt.close(fig)

    rows = tables["covariance_law"]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ns = [r["N"] for r in rows]
    ax.plot(ns, [np.mean(r["measured_diag"]) for r in rows], "o-", label="measured")
    ax.plot(ns, [np.mean(r["predicted_diag"]) for r in rows], "x--", label="predicted")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("components N")
    ax.set_ylabel("column variance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plots / "covariance_law.png", dpi=100)
    plt.close(fig)

    fig, axes = plt.subplots(1, len(tables["lr_sensitivity"]), figsize=(8, 3.2), squeeze=False)
    for ax, (name, t) in zip(axes[0], tables["lr_sensitivity"].items()):
        seeds = sorted(t["frontiers"])
        ax.plot(seeds, [t["frontiers"][k]["clean"] for k in seeds], "o", label="clean")
        ax.plot(seeds, [t["frontiers"][k]["noisy"] for k in seeds], "x", label="noisy")
        ax.set_yscale("log")
        ax.set_title(name)
        ax.set_xlabel("seed")
    axes[0][0].set_ylabel("largest convergent lr")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(plots / "lr_sensitivity.png", dpi=100)
    plt.close(fig)
