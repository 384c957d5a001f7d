"""Closed-form KL divergences for the Gaussian, Wishart and Dirichlet priors.

Each function accepts Tensors (to stay on the differentiation graph) or plain
arrays, and returns a scalar Tensor. Log-determinants always go through a
Cholesky factor.
"""

from __future__ import annotations

import numpy as np

from . import special
from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor


def _positive_vector(x, name: str) -> Tensor:
    x = T.as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"{name} must be a vector, got shape {x.shape}")
    if np.any(~(x.values > 0)):
        raise DomainError(f"{name} entries must be positive")
    return x


def kl_gaussian_simplified(sigma) -> Tensor:
    """KL(N(mu, sigma) || N(mu, I)) = 1/2 (tr sigma - ln|sigma| - p)."""
    sigma = T.as_tensor(sigma)
    p = sigma.shape[0]
    return T.scale(T.trace(sigma) - T.logdet_spd(sigma) - float(p), 0.5)


def kl_gaussian_general(mu1, sigma1, mu2, sigma2) -> Tensor:
    """KL(N(mu1, sigma1) || N(mu2, sigma2))."""
    mu1, sigma1, mu2, sigma2 = (T.as_tensor(x) for x in (mu1, sigma1, mu2, sigma2))
    p = mu1.shape[0]
    if mu2.shape != (p,) or sigma1.shape != (p, p) or sigma2.shape != (p, p):
        raise DimensionError(
            f"shapes disagree: mu1 {mu1.shape}, sigma1 {sigma1.shape}, mu2 {mu2.shape}, sigma2 {sigma2.shape}"
        )
    # sigma2 is treated as a fixed reference; its inverse enters as a constant.
    inv2 = np.linalg.inv(sigma2.values)
    inv2 = T.as_tensor(0.5 * (inv2 + inv2.T))
    diff = T.reshape(mu2 - mu1, (p, 1))
    quad = T.tsum(diff.T @ inv2 @ diff)
    tr = T.trace(inv2 @ sigma1)
    logdet = T.logdet_spd(sigma1) - T.logdet_spd(sigma2)
    return T.scale(quad + tr - logdet - float(p), 0.5)


def kl_wishart_simplified(scale_diag, dof: int) -> Tensor:
    """KL(W(V, n) || W(I, n)) = 1/2 (n (-ln|V|) + n tr V - n p) for diagonal V."""
    v = _positive_vector(scale_diag, "Wishart scale")
    p = v.shape[0]
    n = float(dof)
    return T.scale(T.scale(-T.tsum(T.log(v)), n) + T.scale(T.tsum(v), n) - n * p, 0.5)


def kl_wishart_general(scale1, dof1, scale2, dof2) -> Tensor:
    """KL(W_p(V1, n1) || W_p(V2, n2)) for diagonal scales given as vectors."""
    v1 = _positive_vector(scale1, "Wishart scale V1")
    v2 = _positive_vector(scale2, "Wishart scale V2")
    p = v1.shape[0]
    if v2.shape != (p,):
        raise DimensionError(f"scale shapes disagree: {v1.shape} vs {v2.shape}")
    n1, n2 = float(dof1), float(dof2)
    if n1 < p or n2 < p:
        raise ContractError(f"degrees of freedom ({dof1}, {dof2}) must be at least p={p}")
    logdet1 = T.tsum(T.log(v1))
    logdet2 = T.tsum(T.log(v2))
    trace_term = T.tsum(v1 / v2)
    constants = (
        2.0 * (special.multigammaln(n2 / 2.0, p) - special.multigammaln(n1 / 2.0, p))
        + (n1 - n2) * special.multidigamma(n1 / 2.0, p)
        - n1 * p
    )
    return T.scale(T.scale(logdet2 - logdet1, n2) + T.scale(trace_term, n1) + constants, 0.5)


def kl_dirichlet(alpha1, alpha2) -> Tensor:
    """KL(Dir(alpha1) || Dir(alpha2))."""
    a1 = _positive_vector(alpha1, "alpha1")
    a2 = _positive_vector(alpha2, "alpha2")
    if a1.shape != a2.shape:
        raise DimensionError(f"concentration shapes disagree: {a1.shape} vs {a2.shape}")
    s1 = T.tsum(a1)
    s2 = T.tsum(a2)
    log_norm = T.lgamma(s1) - T.lgamma(s2) + T.tsum(T.lgamma(a2) - T.lgamma(a1))
    return log_norm + T.tsum((a1 - a2) * (T.digamma(a1) - T.digamma(s1)))
