"""Loss assembly, optimizers, the training loop and evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .samplers import seed_sequence
from .tensor import Tensor

DIVERGENCE_FACTOR = 10.0


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    steps: int = 300
    optimizer: str = "adam"  # adam | sgd
    seed: int = 0
    eval_every: int = 0  # 0: evaluate once at the end
    schedule: str = "constant"  # constant | linear (decay to zero)
    clip_norm: float = 1.0
    cooperative: bool = True  # include the cooperative loss
    posthoc_after: int | None = None  # step at which mixture layers switch to posthoc mode

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be non-negative", "learning_rate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive", "batch_size")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative", "steps")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "optimizer")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown schedule {self.schedule!r}", "schedule")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive", "clip_norm")


@dataclass
class RunRecord:
    config: dict
    losses: list
    val_nll: float
    val_acc: float
    wall_s: float = 0.0
    diverged: bool = False
    history: list = field(default_factory=list)  # (step, val_nll, val_acc)
    failed: bool = False
    error: str = ""

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def final_train_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "config": self.config,
            "losses": [float(v) for v in self.losses],
            "val_nll": float(self.val_nll),
            "val_acc": float(self.val_acc),
            "diverged": bool(self.diverged),
            "history": [list(h) for h in self.history],
        }
        if self.failed:
            out["failed"] = True
            out["error"] = self.error
        if include_timing:
            out["wall_s"] = float(self.wall_s)
        return out

    def to_json(self, include_timing: bool = False) -> str:
        # Wall time is left out by default so identical runs serialize identically.
        return json.dumps(self.to_dict(include_timing), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            config=data["config"], losses=list(data["losses"]), val_nll=data["val_nll"], val_acc=data["val_acc"],
            wall_s=data.get("wall_s", 0.0), diverged=data["diverged"],
            history=[tuple(h) for h in data.get("history", [])],
            failed=data.get("failed", False), error=data.get("error", ""),
        )


def is_diverged(losses) -> bool:
    if not losses:
        return False
    if not all(math.isfinite(v) for v in losses):
        return True
    return losses[-1] > DIVERGENCE_FACTOR * losses[0]


# -- optimizers ------------------------------------------------------------------------


class SGD:
    def __init__(self, params, lr: float):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.requires_grad and p.grad is not None:
                p.values = p.values - lr * p.grad


class Adam:
    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = [0] * len(self.params)

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.t[i] += 1
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t[i])
            v_hat = self.v[i] / (1 - self.beta2 ** self.t[i])
            p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str, params, lr: float):
    return Adam(params, lr) if name == "adam" else SGD(params, lr)


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm and math.isfinite(norm):
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -- loss ----------------------------------------------------------------------------


def total_loss(task_nll, kl_sum=None, n_layers: int = 0, eta: float = 0.0, coop_sum=None) -> Tensor:
    """NLL + eta * kl_sum / n_layers + cooperative loss."""
    loss = T.as_tensor(task_nll)
    if kl_sum is not None and eta != 0.0:
        if n_layers < 1:
            raise ContractError("n_layers must be at least 1 when a KL term is present")
        loss = loss + T.scale(kl_sum, eta / n_layers)
    if coop_sum is not None:
        loss = loss + coop_sum
    return loss


def model_loss(model, x, y, cooperative: bool = True) -> tuple[Tensor, Tensor]:
    """Training objective for one batch; returns (total, task NLL)."""
    nll = T.softmax_cross_entropy(model(x), y)
    layers = list(model.mixture_layers().values())
    if not layers:
        return nll, nll
    eta = layers[0].spec.kl_weight
    kl_sum = None
    if eta != 0.0:
        terms = [layer.kl() for layer in layers]
        kl_sum = sum(terms[1:], terms[0])
    coop = None
    if cooperative:
        terms = [layer.cooperative() for layer in layers]
        coop = sum(terms[1:], terms[0])
    return total_loss(nll, kl_sum, len(layers), eta, coop), nll


# -- training ------------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    batch_size = min(batch_size, n)
    order = rng.permutation(n)
    pos = 0
    while True:
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def evaluate(model, data) -> tuple[float, float]:
    """Mean NLL and accuracy with the adapters in evaluation mode (no sampling)."""
    if len(data) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    flags = {name: layer.training for name, layer in model.layers.items()}
    model.eval()
    try:
        with T.no_grad():
            logits = model(data.x).values
    finally:
        for name, layer in model.layers.items():
            layer.training = flags[name]
    m = logits.max(axis=1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    nll = float(-logp[np.arange(len(data)), data.y].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == data.y))
    return nll, acc


def train(model, data, cfg: TrainConfig, config_snapshot: dict | None = None) -> RunRecord:
    """Minimise the batch objective for ``cfg.steps`` steps; deterministic given cfg.seed."""
    start = time.perf_counter()
    params = model.trainable_parameters()
    if model.mixture_layers():
        # Include mixture tensors even if they are frozen now; the optimizer skips them until they train.
        for name, layer in model.mixture_layers().items():
            for key, tensor in layer.spec.parameters().items():
                params.setdefault(f"{name}/{key}", tensor)
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    plist = list(params.values())
    batches = _batches(len(data.train), cfg.batch_size, np.random.default_rng(seed_sequence(cfg.seed, 7)))
    model.train()
    losses, history = [], []
    diverged = False
    for step in range(cfg.steps):
        if cfg.posthoc_after is not None and step == cfg.posthoc_after:
            model.set_mixture_mode("posthoc")
        idx = next(batches)
        T.zero_grad(plist)
        loss, _ = model_loss(model, data.train.x[idx], data.train.y[idx], cfg.cooperative)
        value = loss.item()
        losses.append(value)
        if not math.isfinite(value):
            diverged = True
            break
        loss.backward()
        clip_grad_norm(plist, cfg.clip_norm)
        lr = cfg.learning_rate
        if cfg.schedule == "linear":
            lr = cfg.learning_rate * (1.0 - step / cfg.steps)
        opt.step(lr)
        if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            history.append((step + 1, *evaluate(model, data.val)))
    T.zero_grad(plist)
    val_nll, val_acc = evaluate(model, data.val)
    snapshot = config_snapshot if config_snapshot is not None else asdict(cfg)
    return RunRecord(
        config=snapshot, losses=losses, val_nll=val_nll, val_acc=val_acc,
        wall_s=time.perf_counter() - start, diverged=diverged or is_diverged(losses), history=history,
    )
