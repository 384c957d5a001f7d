"""Toy classifiers with optional LoRA / MonteCLoRA adapters on their linear layers."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, PretrainError
from .layer import LoraLinear, MixtureConfig
from .samplers import seed_sequence
from .tensor import Tensor

ARCHS = ("mlp", "attention")
MODES = ("full", "lora", "monteclora")


class Linear:
    """Dense layer ``x W^T + b`` applied to the last axis of a 2-D or 3-D input."""

    def __init__(self, weight, bias=None, trainable: bool = True):
        self.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        self.bias = None if bias is None else (bias if isinstance(bias, Tensor) else Tensor(bias))
        self.set_trainable(trainable)
        self.training = True

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def set_trainable(self, flag: bool) -> None:
        self.weight.requires_grad = flag
        if self.bias is not None:
            self.bias.requires_grad = flag

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else T.reshape(x, (-1, x.shape[-1]))
        out = flat @ self.weight.T
        if self.bias is not None:
            out = T.add_bias(out, self.bias)
        return out if x.ndim == 2 else T.reshape(out, lead + (out.shape[-1],))

    def parameters(self) -> dict:
        params = {"W": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def copy(self) -> "Linear":
        bias = None if self.bias is None else self.bias.values.copy()
        return Linear(self.weight.values.copy(), bias, trainable=self.weight.requires_grad)


class ToyModel:
    """An MLP or a one-block single-head attention classifier.

    ``layers`` is an ordered name -> layer map. For the MLP every layer but the
    last is followed by the activation. The attention model uses the layers
    ``embed``, ``query``, ``key``, ``value``, ``out`` and then an MLP head.
    """

    def __init__(self, arch: str, layers: dict, n_classes: int, activation: str = "tanh", mode: str = "full"):
        if arch not in ARCHS:
            raise ConfigError(f"arch must be one of {list(ARCHS)}, got {arch!r}", "arch")
        self.arch = arch
        self.layers = dict(layers)
        self.n_classes = n_classes
        self.activation = activation
        self.mode = mode

    # -- forward ---------------------------------------------------------------------

    def _act(self, x: Tensor) -> Tensor:
        if self.activation == "identity":
            return x
        return T.relu(x) if self.activation == "relu" else T.tanh(x)

    def _head(self, h: Tensor, names: list) -> Tensor:
        for i, name in enumerate(names):
            h = self.layers[name](h)
            if i < len(names) - 1:
                h = self._act(h)
        return h

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if self.arch == "mlp":
            return self._head(x, list(self.layers))
        h = self.layers["embed"](x)
        q, k, v = self.layers["query"](h), self.layers["key"](h), self.layers["value"](h)
        scores = T.scale(q @ T.transpose(k, (0, 2, 1)), 1.0 / math.sqrt(q.shape[-1]))
        attended = T.softmax(scores, axis=-1) @ v
        h = h + self.layers["out"](attended)
        pooled = T.mean(h, axis=1)
        head = [n for n in self.layers if n not in ("embed", "query", "key", "value", "out")]
        return self._head(pooled, head)

    def predict(self, x) -> np.ndarray:
        with T.no_grad():
            return np.argmax(self(x).values, axis=1)

    # -- modes and parameters -------------------------------------------------------

    def train(self) -> "ToyModel":
        for layer in self.layers.values():
            layer.training = True
        return self

    def eval(self) -> "ToyModel":
        for layer in self.layers.values():
            layer.training = False
        return self

    def named_parameters(self) -> dict:
        out = {}
        for name, layer in self.layers.items():
            for key, tensor in layer.parameters().items():
                out[f"{name}/{key}"] = tensor
        return out

    def trainable_parameters(self) -> dict:
        return {k: t for k, t in self.named_parameters().items() if t.requires_grad}

    def num_trainable(self) -> int:
        return sum(t.size for t in self.trainable_parameters().values())

    def adapters(self) -> dict:
        return {n: l for n, l in self.layers.items() if isinstance(l, LoraLinear)}

    def mixture_layers(self) -> dict:
        return {n: l for n, l in self.adapters().items() if l.spec is not None}

    def buffers(self) -> list:
        return [l.buffer for l in self.mixture_layers().values()]

    def set_mixture_mode(self, mode: str) -> None:
        from .layer import set_mode

        for layer in self.mixture_layers().values():
            set_mode(layer.spec, mode)

    def freeze(self) -> "ToyModel":
        for layer in self.layers.values():
            if isinstance(layer, Linear):
                layer.set_trainable(False)
        return self

    def clone(self) -> "ToyModel":
        layers = {}
        for name, layer in self.layers.items():
            if not isinstance(layer, Linear):
                raise ConfigError("only unwrapped models can be cloned", "mode")
            layers[name] = layer.copy()
        return ToyModel(self.arch, layers, self.n_classes, self.activation, self.mode)


# -- construction --------------------------------------------------------------------


def _dense(rng: np.random.Generator, n_in: int, n_out: int) -> Linear:
    weight = rng.standard_normal((n_out, n_in)) / math.sqrt(n_in)
    return Linear(weight, np.zeros(n_out))


def init_base(arch: str = "mlp", in_dim: int = 16, n_classes: int = 4, hidden=(64, 64), width: int = 16,
              head_hidden: int = 64, seed: int = 0, activation: str = "tanh") -> ToyModel:
    """Randomly initialised, fully trainable base model."""
    if arch not in ARCHS:
        raise ConfigError(f"arch must be one of {list(ARCHS)}, got {arch!r}", "arch")
    rng = np.random.default_rng(seed_sequence(seed, 0))
    layers = {}
    if arch == "mlp":
        dims = [in_dim, *hidden, n_classes]
        for i in range(len(dims) - 2):
            layers[f"fc{i}"] = _dense(rng, dims[i], dims[i + 1])
        layers["head"] = _dense(rng, dims[-2], dims[-1])
    else:
        layers["embed"] = _dense(rng, in_dim, width)
        for name in ("query", "key", "value", "out"):
            layers[name] = _dense(rng, width, width)
        layers["fc0"] = _dense(rng, width, head_hidden)
        layers["head"] = _dense(rng, head_hidden, n_classes)
    return ToyModel(arch, layers, n_classes, activation, mode="full")


def adapter_targets(model: ToyModel, placement, rank: int) -> list:
    """Layer names that receive adapters.

    ``all``: every linear layer wide enough for the rank. ``attention``: the
    query/key/value projections only. A list selects layers by name.
    """
    if isinstance(placement, (list, tuple)):
        unknown = [n for n in placement if n not in model.layers]
        if unknown:
            raise ConfigError(f"unknown layers for placement: {unknown}", "placement")
        names = list(placement)
    elif placement == "all":
        names = [n for n, l in model.layers.items() if min(l.in_features, l.out_features) >= rank]
    elif placement == "attention":
        if model.arch != "attention":
            raise ConfigError("attention placement needs the attention architecture", "placement")
        names = ["query", "key", "value"]
    else:
        raise ConfigError(f"unknown placement {placement!r}", "placement")
    for name in names:
        layer = model.layers[name]
        if rank > min(layer.in_features, layer.out_features):
            raise ConfigError(
                f"rank {rank} exceeds min(n_in, n_out) = {min(layer.in_features, layer.out_features)} for {name}",
                "rank",
            )
    if not names:
        raise ConfigError(f"rank {rank} is too large for every layer", "rank")
    return names


def build_model(arch: str = "mlp", mode: str = "lora", rank: int = 8, mixture: MixtureConfig | None = None,
                base: ToyModel | None = None, seed: int = 0, placement="all", lora_alpha: float | None = None,
                init_std: float = 0.02, **base_kwargs) -> ToyModel:
    """Wrap a (copied) base model for full fine-tuning, LoRA or MonteCLoRA.

    The base weights are copied, so the ``base`` object itself never changes.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {list(MODES)}, got {mode!r}", "mode")
    base = base if base is not None else init_base(arch, seed=seed, **base_kwargs)
    model = base.clone()
    model.mode = mode
    if mode == "full":
        for layer in model.layers.values():
            layer.set_trainable(True)
        return model
    model.freeze()
    if mode == "monteclora" and mixture is None:
        mixture = MixtureConfig()
    for index, name in enumerate(adapter_targets(model, placement, rank)):
        dense = model.layers[name]
        model.layers[name] = LoraLinear.wrap(
            dense.weight.values, None if dense.bias is None else dense.bias.values, rank=rank,
            mixture=mixture if mode == "monteclora" else None, seed=seed_sequence(seed, 10 + index),
            init_std=init_std, lora_alpha=lora_alpha,
        )
    return model


def pretrain_base(model: ToyModel, data, steps: int = 1500, lr: float = 1e-2, batch_size: int = 64,
                  seed: int = 0, min_accuracy: float | None = 0.95) -> ToyModel:
    """Fully train ``model`` on the source task, check validation accuracy, then freeze it."""
    from .trainer import TrainConfig, evaluate, train

    if model.mode != "full":
        raise ConfigError("pretraining needs a full-mode model", "mode")
    if steps > 0:
        cfg = TrainConfig(learning_rate=lr, batch_size=batch_size, steps=steps, optimizer="adam", seed=seed)
        train(model, data, cfg)
        if min_accuracy is not None:
            _, acc = evaluate(model, data.val)
            if acc < min_accuracy:
                raise PretrainError(
                    f"base reached {acc:.3f} validation accuracy (< {min_accuracy}); pretrain for more steps"
                )
    return model.freeze()
