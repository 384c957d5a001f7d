"""Pathwise-differentiable samplers and the base-noise buffer.

Every sampler here is a deterministic transform of parameter-free base noise
(standard normals or uniforms), so gradients flow from the sample back to the
distribution parameters. Base noise comes from :class:`NoiseBuffer`, which
pre-generates a fixed number of records and hands them out one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import gammainccinv

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor

UNIFORM_CLAMP = 1e-12
DEFAULT_BUFFER_SIZE = 15


@dataclass
class WishartPrior:
    """Wishart prior with diagonal scale ``scale_diag`` and ``dof`` degrees of freedom."""

    scale_diag: Tensor
    dof: int

    def __post_init__(self):
        self.scale_diag = T.as_tensor(self.scale_diag)
        if self.scale_diag.ndim != 1:
            raise DimensionError(f"scale_diag must be a vector, got shape {self.scale_diag.shape}")
        if np.any(~(self.scale_diag.values > 0)):
            raise DomainError("Wishart scale entries must be positive")
        if self.dof < self.dim:
            raise ContractError(f"Wishart dof {self.dof} is smaller than dimension {self.dim}")

    @property
    def dim(self) -> int:
        return self.scale_diag.shape[0]


@dataclass
class DirichletPrior:
    concentration: Tensor

    def __post_init__(self):
        self.concentration = T.as_tensor(self.concentration)
        if self.concentration.ndim != 1:
            raise DimensionError("Dirichlet concentration must be a vector")
        if np.any(~(self.concentration.values > 0)):
            raise DomainError("Dirichlet concentration entries must be positive")

    @property
    def size(self) -> int:
        return self.concentration.shape[0]


def cholesky_spd(s) -> Tensor:
    """Lower-triangular L with L L^T = s; differentiable when ``s`` is a Tensor."""
    return T.cholesky(s)


def sample_gaussian_matrix(mean, chol, noise) -> Tensor:
    """Rows of ``mean + noise @ chol.T``: each row is an independent N(mean_row, L L^T) draw."""
    mean, chol, noise = T.as_tensor(mean), T.as_tensor(chol), T.as_tensor(noise)
    if noise.shape != mean.shape:
        raise DimensionError(f"noise shape {noise.shape} does not match mean shape {mean.shape}")
    if chol.ndim != 2 or chol.shape != (mean.shape[-1], mean.shape[-1]):
        raise DimensionError(f"Cholesky factor {chol.shape} does not fit mean {mean.shape}")
    return mean + noise @ chol.T


def sample_wishart(prior: WishartPrior, noise, normalize: bool = False) -> Tensor:
    """Sigma = L (G^T G) L^T with L = diag(sqrt(V)) and G the (dof, p) standard-normal noise.

    With ``normalize`` the draw is divided by dof so that E[Sigma] = diag(V).
    """
    g = np.asarray(noise.values if isinstance(noise, Tensor) else noise, dtype=np.float64)
    p = prior.dim
    if g.shape != (prior.dof, p):
        raise DimensionError(f"Wishart noise must have shape {(prior.dof, p)}, got {g.shape}")
    standard = g.T @ g
    root = T.sqrt(prior.scale_diag)
    outer = T.reshape(root, (p, 1)) @ T.reshape(root, (1, p))
    sigma = outer * Tensor._from_values(standard)
    if normalize:
        sigma = T.scale(sigma, 1.0 / prior.dof)
    return sigma


def sample_dirichlet(prior: DirichletPrior, uniforms, exact: bool = False) -> Tensor:
    """Mixture weights from uniforms via y_i = alpha_i * (-log u_i), pi = y / sum(y).

    The surrogate is an exact Gamma(alpha_i) draw only when alpha_i = 1. With
    ``exact`` the forward value uses the exact Gamma quantile of the same
    uniform, while the gradient is the surrogate's (straight-through).
    """
    u = np.clip(np.asarray(uniforms, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    if u.shape != (prior.size,):
        raise DimensionError(f"expected {prior.size} uniforms, got shape {u.shape}")
    base = -np.log(u)
    alpha = prior.concentration
    y = alpha * Tensor._from_values(base)
    if exact:
        gamma = gammainccinv(alpha.values, u)
        y = y + Tensor._from_values(gamma - alpha.values * base)
    return y / T.tsum(y)


# -- base noise ------------------------------------------------------------------


class NoiseShape(NamedTuple):
    """Dimensions of one base-noise record for a mixture layer with a (p, q) mean."""

    p: int
    q: int
    dof: int
    n_components: int


class NoiseRecord(NamedTuple):
    wishart: np.ndarray  # (dof, p) standard normals
    gaussian: np.ndarray  # (n_components, q, p) standard normals
    uniforms: np.ndarray  # (n_components,) in [0, 1)


def seed_sequence(seed, *path: int) -> np.random.SeedSequence:
    """Deterministic child seed for (seed, worker, layer, ...)."""
    if isinstance(seed, np.random.SeedSequence):
        entropy = list(np.atleast_1d(seed.entropy)) + list(seed.spawn_key)
        return np.random.SeedSequence(entropy + [int(p) for p in path])
    return np.random.SeedSequence([int(seed)] + [int(p) for p in path])


class NoiseBuffer:
    """Fixed-size cache of pre-generated base noise with O(1) lookups.

    The three noise kinds come from independent child streams, and a refill
    draws ``capacity`` records from each stream in one call. Because numpy
    generators fill arrays sequentially, the buffered stream is identical to
    generating the records one by one (``capacity=1``).
    """

    def __init__(self, shape: NoiseShape, seed=0, capacity: int = DEFAULT_BUFFER_SIZE):
        if capacity < 1:
            raise ContractError("buffer capacity must be at least 1")
        self.shape = NoiseShape(*shape)
        self.capacity = int(capacity)
        root = seed if isinstance(seed, np.random.SeedSequence) else seed_sequence(seed)
        wishart_ss, gaussian_ss, uniform_ss = root.spawn(3)
        self._wishart_rng = np.random.default_rng(wishart_ss)
        self._gaussian_rng = np.random.default_rng(gaussian_ss)
        self._uniform_rng = np.random.default_rng(uniform_ss)
        self._records: list[NoiseRecord] = []
        self.cursor = 0
        self.refills = 0
        self.consumed = 0

    def _refill(self) -> None:
        p, q, dof, n = self.shape
        k = self.capacity
        wishart = self._wishart_rng.standard_normal((k, dof, p))
        gaussian = self._gaussian_rng.standard_normal((k, n, q, p))
        uniforms = self._uniform_rng.random((k, n))
        self._records = [NoiseRecord(wishart[i], gaussian[i], uniforms[i]) for i in range(k)]
        self.cursor = 0
        self.refills += 1

    def next(self) -> NoiseRecord:
        if self.cursor >= len(self._records):
            self._refill()
        record = self._records[self.cursor]
        # Drop the reference so a consumed record is never handed out again.
        self._records[self.cursor] = None
        self.cursor += 1
        self.consumed += 1
        return record

    def __iter__(self):
        return self

    def __next__(self) -> NoiseRecord:
        return self.next()


def buffer_next(buf: NoiseBuffer) -> NoiseRecord:
    return buf.next()
