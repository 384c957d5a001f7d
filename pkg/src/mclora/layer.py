"""Monte Carlo mixture estimate of a LoRA down-projection.

The LoRA-A matrix ``mu`` (shape ``(r, n_in)``) is replaced during training by

    W_eff = mu + eps * sum_k pi_k S_k

where Sigma ~ Wishart(diag(V), dof), pi ~ Dirichlet(alpha) and the columns of
each S_k are independent N(0, Sigma) draws. V and alpha are kept positive by
storing unconstrained values mapped through softplus. In evaluation mode the
layer uses ``mu`` directly and consumes no noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from . import tensor as T
from .divergences import kl_dirichlet, kl_gaussian_simplified, kl_wishart_simplified
from .errors import ConfigError, DimensionError
from .samplers import (
    DEFAULT_BUFFER_SIZE,
    DirichletPrior,
    NoiseBuffer,
    NoiseShape,
    WishartPrior,
    sample_dirichlet,
    sample_wishart,
)
from .tensor import Tensor

MODES = ("standard", "sparse", "posthoc")


@dataclass
class MixtureConfig:
    """Hyperparameters used to create one :class:`MixtureSpec` per wrapped layer."""

    n_components: int = 4
    epsilon: float = 5e-3
    kl_weight: float = 1e-5
    dof: int | None = None  # None: the rank r
    alpha_init: str = "ones"  # ones | random
    mode: str = "standard"
    outer_samples: int = 1
    covariance: str = "full"  # full | diagonal
    dirichlet: str = "surrogate"  # surrogate | gamma
    normalize_wishart: bool = False
    gaussian_kl: str = "draw"  # draw | expected
    buffer_size: int = DEFAULT_BUFFER_SIZE

    def __post_init__(self):
        _check_choice("mode", self.mode, MODES)
        _check_choice("alpha_init", self.alpha_init, ("ones", "random"))
        _check_choice("covariance", self.covariance, ("full", "diagonal"))
        _check_choice("dirichlet", self.dirichlet, ("surrogate", "gamma"))
        _check_choice("gaussian_kl", self.gaussian_kl, ("draw", "expected"))
        if self.n_components < 1:
            raise ConfigError("n_components must be at least 1", "n_components")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative", "epsilon")
        if self.outer_samples < 1:
            raise ConfigError("outer_samples must be at least 1", "outer_samples")


def _check_choice(key: str, value, choices) -> None:
    if value not in choices:
        raise ConfigError(f"{key} must be one of {list(choices)}, got {value!r}", key)


@dataclass
class MixtureSpec:
    mu: Tensor  # (p, q); each of the q columns is a p-dim Gaussian draw
    v_raw: Tensor  # (p,)
    alpha_raw: Tensor  # (N,)
    epsilon: float = 5e-3
    kl_weight: float = 1e-5
    dof: int | None = None
    mode: str = "standard"
    outer_samples: int = 1
    covariance: str = "full"
    dirichlet: str = "surrogate"
    normalize_wishart: bool = False
    gaussian_kl: str = "draw"

    def __post_init__(self):
        if self.dof is None:
            self.dof = self.p
        _check_choice("mode", self.mode, MODES)
        if self.v_raw.shape != (self.p,):
            raise DimensionError(f"V has shape {self.v_raw.shape}, expected ({self.p},)")

    @classmethod
    def create(cls, mu, config: MixtureConfig | None = None, rng: np.random.Generator | None = None) -> "MixtureSpec":
        config = config or MixtureConfig()
        mu = mu if isinstance(mu, Tensor) else T.parameter(mu)
        p = mu.shape[0]
        if config.alpha_init == "random":
            rng = rng or np.random.default_rng(0)
            # U(0,1) draws, kept away from 0 so the softplus inverse stays finite.
            alpha0 = np.maximum(rng.random(config.n_components), 1e-6)
        else:
            alpha0 = np.ones(config.n_components)
        return cls(
            mu=mu,
            v_raw=T.parameter(T.inverse_softplus(np.ones(p))),
            alpha_raw=T.parameter(T.inverse_softplus(alpha0)),
            epsilon=config.epsilon,
            kl_weight=config.kl_weight,
            dof=config.dof,
            mode=config.mode,
            outer_samples=config.outer_samples,
            covariance=config.covariance,
            dirichlet=config.dirichlet,
            normalize_wishart=config.normalize_wishart,
            gaussian_kl=config.gaussian_kl,
        )

    @property
    def p(self) -> int:
        return self.mu.shape[0]

    @property
    def q(self) -> int:
        return self.mu.shape[1]

    @property
    def n_components(self) -> int:
        return self.alpha_raw.shape[0]

    @property
    def V(self) -> Tensor:
        return T.softplus(self.v_raw)

    @property
    def alpha(self) -> Tensor:
        return T.softplus(self.alpha_raw)

    @property
    def noise_shape(self) -> NoiseShape:
        return NoiseShape(self.p, self.q, self.dof, self.n_components)

    def parameters(self) -> dict:
        return {"mu": self.mu, "V_raw": self.v_raw, "alpha_raw": self.alpha_raw}

    def metadata(self) -> dict:
        return {
            "N": self.n_components,
            "epsilon": self.epsilon,
            "kl_weight": self.kl_weight,
            "dof": self.dof,
            "mode": self.mode,
            "outer_samples": self.outer_samples,
            "covariance": self.covariance,
            "dirichlet": self.dirichlet,
            "normalize_wishart": self.normalize_wishart,
            "gaussian_kl": self.gaussian_kl,
        }


class Estimate(NamedTuple):
    weight: Tensor
    pi: Tensor  # sampled mixture weights (first outer sample)
    sigma: Tensor  # sampled covariance (first outer sample)
    pis: list
    sigmas: list


def sparsify(pi) -> Tensor:
    """One-hot vector at argmax(pi); ties go to the lowest index."""
    values = pi.values if isinstance(pi, Tensor) else np.asarray(pi, dtype=np.float64)
    out = np.zeros_like(values)
    out[int(np.argmax(values))] = 1.0
    return T.constant(out)


def cooperative_loss(pi) -> Tensor:
    pi = T.as_tensor(pi)
    return T.tsum(pi * pi)


def _cholesky_factor(spec: MixtureSpec, sigma: Tensor) -> Tensor:
    if spec.covariance == "diagonal":
        return T.diag(T.sqrt(T.diagonal(sigma)))
    return T.cholesky(sigma)


def stochastic_estimate(spec: MixtureSpec, buf: NoiseBuffer) -> Estimate:
    """One Monte Carlo estimate of the LoRA-A matrix (averaged over ``outer_samples``)."""
    v, alpha = spec.V, spec.alpha
    wishart = WishartPrior(v, spec.dof)
    dirichlet = DirichletPrior(alpha)
    p, q, n = spec.p, spec.q, spec.n_components
    weights, pis, sigmas = [], [], []
    for _ in range(spec.outer_samples):
        record = buf.next()
        sigma = sample_wishart(wishart, record.wishart, normalize=spec.normalize_wishart)
        pi = sample_dirichlet(dirichlet, record.uniforms, exact=spec.dirichlet == "gamma")
        pis.append(pi)
        sigmas.append(sigma)
        if spec.epsilon == 0.0:
            weights.append(spec.mu)
            continue
        mix = sparsify(pi) if spec.mode == "sparse" else pi
        chol = _cholesky_factor(spec, sigma)
        # sum_k pi_k (E_k L^T) computed as (sum_k pi_k E_k) L^T; identical by linearity.
        noise = Tensor._from_values(record.gaussian.reshape(n, q * p))
        combined = T.reshape(T.reshape(mix, (1, n)) @ noise, (q, p))
        stochastic = T.transpose(combined @ chol.T)
        weights.append(spec.mu + T.scale(stochastic, spec.epsilon))
    weight = weights[0]
    if len(weights) > 1:
        weight = T.scale(T.tsum(T.stack(weights), axis=0), 1.0 / len(weights))
    return Estimate(weight, pis[0], sigmas[0], pis, sigmas)


def layer_kl(spec: MixtureSpec, sigma_draw) -> Tensor:
    """Gaussian + Wishart + Dirichlet KL terms for one layer."""
    v, alpha = spec.V, spec.alpha
    if spec.gaussian_kl == "expected":
        factor = 1.0 if spec.normalize_wishart else float(spec.dof)
        target = T.scale(T.diag(v), factor)
    else:
        target = sigma_draw
    kl_n = kl_gaussian_simplified(target)
    kl_w = kl_wishart_simplified(v, spec.dof)
    kl_d = kl_dirichlet(alpha, np.ones(spec.n_components))
    return kl_n + kl_w + kl_d


def set_mode(spec: MixtureSpec, mode: str) -> None:
    _check_choice("mode", mode, MODES)
    spec.mode = mode
    spec.mu.requires_grad = mode != "posthoc"
    spec.v_raw.requires_grad = True
    spec.alpha_raw.requires_grad = True


def extra_param_count(spec: MixtureSpec) -> int:
    return spec.v_raw.size + spec.alpha_raw.size


# -- LoRA pair and the wrapped linear layer ------------------------------------


@dataclass
class LoraPair:
    w0: Tensor  # (n_out, n_in), frozen
    a: Tensor  # (r, n_in)
    b: Tensor  # (n_out, r), zero-initialised
    bias: Tensor | None = None  # (n_out,), frozen
    scaling: float = 2.0

    def __post_init__(self):
        n_out, n_in = self.w0.shape
        r = self.a.shape[0]
        if self.a.shape != (r, n_in) or self.b.shape != (n_out, r):
            raise DimensionError(f"LoRA shapes disagree: W0 {self.w0.shape}, A {self.a.shape}, B {self.b.shape}")
        if r > min(n_in, n_out):
            raise ConfigError(f"rank {r} exceeds min(n_in, n_out) = {min(n_in, n_out)}", "rank")
        self.w0.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @classmethod
    def create(cls, w0, bias=None, rank: int = 8, rng: np.random.Generator | None = None,
               init_std: float = 0.02, lora_alpha: float | None = None) -> "LoraPair":
        rng = rng or np.random.default_rng(0)
        w0 = T.constant(w0.values if isinstance(w0, Tensor) else w0)
        n_out, n_in = w0.shape
        if rank > min(n_in, n_out):
            raise ConfigError(f"rank {rank} exceeds min(n_in, n_out) = {min(n_in, n_out)}", "rank")
        lora_alpha = 2.0 * rank if lora_alpha is None else lora_alpha
        a = T.parameter(rng.normal(0.0, init_std, size=(rank, n_in)))
        b = T.parameter(np.zeros((n_out, rank)))
        if bias is not None:
            bias = T.constant(bias.values if isinstance(bias, Tensor) else bias)
        return cls(w0=w0, a=a, b=b, bias=bias, scaling=lora_alpha / rank)


def _as_matrix(x: Tensor) -> tuple[Tensor, tuple | None]:
    if x.ndim == 2:
        return x, None
    lead = x.shape[:-1]
    return T.reshape(x, (-1, x.shape[-1])), lead


def adapter_output(x, pair: LoraPair, a_eff: Tensor) -> Tensor:
    """x W0^T + bias + scaling * (x A^T) B^T, for 2-D or stacked 3-D inputs."""
    x = T.as_tensor(x)
    flat, lead = _as_matrix(x)
    if flat.shape[1] != pair.w0.shape[1]:
        raise DimensionError(f"input width {flat.shape[1]} does not match layer input {pair.w0.shape[1]}")
    base = flat @ pair.w0.T
    if pair.bias is not None:
        base = T.add_bias(base, pair.bias)
    delta = (flat @ a_eff.T) @ pair.b.T
    out = base + T.scale(delta, pair.scaling)
    if lead is not None:
        out = T.reshape(out, lead + (out.shape[-1],))
    return out


def adapter_forward(x, pair: LoraPair, spec: MixtureSpec | None = None,
                    buf: NoiseBuffer | None = None, training: bool = True) -> Tensor:
    if spec is None or not training:
        a_eff = pair.a if spec is None else spec.mu
        return adapter_output(x, pair, a_eff)
    return adapter_output(x, pair, stochastic_estimate(spec, buf).weight)


class LoraLinear:
    """A frozen linear layer with a LoRA update, optionally MonteCLoRA-wrapped."""

    def __init__(self, pair: LoraPair, spec: MixtureSpec | None = None, buffer: NoiseBuffer | None = None):
        if spec is not None:
            if spec.mu is not pair.a:
                raise ConfigError("mixture mean must be the LoRA-A tensor", "mu")
            if buffer is None:
                raise ConfigError("a mixture layer needs a noise buffer", "buffer")
        self.pair = pair
        self.spec = spec
        self.buffer = buffer
        self.training = True
        self.last_estimate: Estimate | None = None

    @classmethod
    def wrap(cls, w0, bias=None, rank: int = 8, mixture: MixtureConfig | None = None, seed=0,
             init_std: float = 0.02, lora_alpha: float | None = None) -> "LoraLinear":
        from .samplers import seed_sequence

        init_rng = np.random.default_rng(seed_sequence(seed, 1))
        pair = LoraPair.create(w0, bias, rank=rank, rng=init_rng, init_std=init_std, lora_alpha=lora_alpha)
        if mixture is None:
            return cls(pair)
        spec = MixtureSpec.create(pair.a, mixture, rng=init_rng)
        set_mode(spec, mixture.mode)
        buffer = NoiseBuffer(spec.noise_shape, seed_sequence(seed, 2), capacity=mixture.buffer_size)
        return cls(pair, spec, buffer)

    @property
    def in_features(self) -> int:
        return self.pair.w0.shape[1]

    @property
    def out_features(self) -> int:
        return self.pair.w0.shape[0]

    def __call__(self, x) -> Tensor:
        if self.spec is not None and self.training:
            self.last_estimate = stochastic_estimate(self.spec, self.buffer)
            return adapter_output(x, self.pair, self.last_estimate.weight)
        return adapter_output(x, self.pair, self.pair.a)

    def parameters(self) -> dict:
        params = {"W0": self.pair.w0}
        if self.pair.bias is not None:
            params["bias"] = self.pair.bias
        if self.spec is not None:
            params.update(self.spec.parameters())
        else:
            params["mu"] = self.pair.a
        params["B"] = self.pair.b
        return params

    def kl(self) -> Tensor:
        est = self.last_estimate
        terms = [layer_kl(self.spec, sigma) for sigma in est.sigmas]
        return terms[0] if len(terms) == 1 else T.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))

    def cooperative(self) -> Tensor:
        pis = self.last_estimate.pis
        terms = [cooperative_loss(pi) for pi in pis]
        return terms[0] if len(terms) == 1 else T.scale(sum(terms[1:], terms[0]), 1.0 / len(terms))


# -- checkpoints ---------------------------------------------------------------------

_METADATA_KEY = "__metadata__"


def save_checkpoint(path, layers: Mapping[str, LoraLinear], extra: dict | None = None) -> Path:
    """Write ``<layer>/mu``, ``<layer>/V_raw``, ... plus a JSON metadata record to an .npz archive."""
    path = Path(path)
    arrays = {}
    meta = {"layers": {}, "extra": extra or {}}
    for name, layer in layers.items():
        pair = layer.pair
        arrays[f"{name}/mu"] = pair.a.values
        arrays[f"{name}/B"] = pair.b.values
        arrays[f"{name}/W0"] = pair.w0.values
        if pair.bias is not None:
            arrays[f"{name}/bias"] = pair.bias.values
        entry = {"rank": pair.rank, "scaling": pair.scaling}
        if layer.spec is not None:
            arrays[f"{name}/V_raw"] = layer.spec.v_raw.values
            arrays[f"{name}/alpha_raw"] = layer.spec.alpha_raw.values
            entry.update(layer.spec.metadata())
        meta["layers"][name] = entry
    arrays[_METADATA_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        arrays = {k: data[k].copy() for k in data.files if k != _METADATA_KEY}
        meta = json.loads(bytes(data[_METADATA_KEY]).decode())
    return arrays, meta


def restore_checkpoint(layers: Mapping[str, LoraLinear], path) -> dict:
    """Copy checkpointed values into existing layers in place; returns the metadata."""
    arrays, meta = load_checkpoint(path)
    for name, layer in layers.items():
        for key, tensor in layer.parameters().items():
            tensor.values = arrays[f"{name}/{key}"].copy()
        if layer.spec is not None:
            info = meta["layers"][name]
            layer.spec.epsilon = info["epsilon"]
            layer.spec.kl_weight = info["kl_weight"]
            layer.spec.dof = info["dof"]
            set_mode(layer.spec, info["mode"])
    return meta


def mixture_config_dict(config: MixtureConfig) -> dict:
    return asdict(config)
