"""Random gradient-check instances shared by the unit and acceptance tests.

Each builder takes a Generator and returns ``(f, x)`` where ``f`` maps a
Tensor to a scalar Tensor. Outputs are contracted with a fixed random weight
so every entry of the op's output reaches the scalar.
"""

import numpy as np

from mclora import tensor as T
from mclora.divergences import (
    kl_dirichlet,
    kl_gaussian_general,
    kl_gaussian_simplified,
    kl_wishart_general,
    kl_wishart_simplified,
)
from mclora.layer import MixtureConfig, MixtureSpec, stochastic_estimate
from mclora.samplers import (
    DirichletPrior,
    NoiseBuffer,
    WishartPrior,
    cholesky_spd,
    sample_dirichlet,
    sample_gaussian_matrix,
    sample_wishart,
)


def rel_err(a, b) -> float:
    """Norm-wise relative error of ``a`` against reference ``b``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def grad_error(f, x, h=1e-4) -> float:
    _, g = T.value_and_grad(f, x)
    return rel_err(g, T.finite_diff_grad(f, x, h))


def _away_from_zero(rng, shape, low=0.05):
    x = rng.uniform(low, 2.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _spd(m):
    return m @ T.transpose(m) + T.constant(np.eye(m.shape[0]))


# -- tensor ops ----------------------------------------------------------------------

def _unary(op, domain="any", shape=(3, 4)):
    def build(rng):
        if domain == "positive":
            x = rng.uniform(0.2, 2.0, shape)
        elif domain == "nonzero":
            x = _away_from_zero(rng, shape)
        else:
            x = rng.uniform(-2.0, 2.0, shape)
        w = rng.normal(size=op(T.constant(x)).shape)
        return (lambda t: T.tsum(op(t) * T.constant(w))), x

    return build


def _binary(op, side, other_domain="any", shape=(3, 4), other_shape=None):
    def build(rng):
        other_shape_ = other_shape or shape
        if other_domain == "positive":
            other = rng.uniform(0.5, 2.0, other_shape_)
        else:
            other = rng.uniform(-2.0, 2.0, other_shape_)
        x = rng.uniform(-2.0, 2.0, shape)
        c = T.constant(other)
        fn = (lambda t: op(t, c)) if side == 0 else (lambda t: op(c, t))
        w = rng.normal(size=fn(T.constant(x)).shape)
        return (lambda t: T.tsum(fn(t) * T.constant(w))), x

    return build


def _matmul_batched(rng):
    x = rng.uniform(-2, 2, (2, 3, 4))
    b = T.constant(rng.uniform(-2, 2, (2, 4, 5)))
    w = T.constant(rng.normal(size=(2, 3, 5)))
    return (lambda t: T.tsum((t @ b) * w)), x


def _div_denominator(rng):
    x = rng.uniform(0.5, 2.0, (3, 4))
    num = T.constant(rng.uniform(-2, 2, (3, 4)))
    w = T.constant(rng.normal(size=(3, 4)))
    return (lambda t: T.tsum((num / t) * w)), x


def _cholesky(rng):
    x = rng.uniform(-2, 2, (3, 3))
    w = T.constant(np.tril(rng.normal(size=(3, 3))))
    return (lambda t: T.tsum(T.cholesky(_spd(t)) * w)), x


def _logdet(rng):
    return (lambda t: T.logdet_spd(_spd(t))), rng.uniform(-2, 2, (3, 3))


def _cross_entropy(rng):
    labels = rng.integers(0, 4, 5)
    return (lambda t: T.softmax_cross_entropy(t, labels)), rng.uniform(-2, 2, (5, 4))


def _fan_out(rng):
    # one tensor feeding several consumers
    return (lambda t: T.tsum(T.exp(t) * t + T.tanh(t) @ T.transpose(t))), rng.uniform(-2, 2, (3, 3))


TENSOR_CASES = {
    "add": _binary(T.add, 0),
    "add_rhs": _binary(T.add, 1),
    "sub": _binary(T.sub, 0),
    "sub_rhs": _binary(T.sub, 1),
    "mul": _binary(T.mul, 0),
    "mul_rhs": _binary(T.mul, 1),
    "div": _binary(T.div, 0, other_domain="positive"),
    "div_rhs": _div_denominator,
    "scale": _unary(lambda t: T.scale(t, -1.7)),
    "add_bias": _binary(T.add_bias, 1, shape=(4,), other_shape=(3, 4)),
    "neg": _unary(T.neg),
    "exp": _unary(T.exp),
    "log": _unary(T.log, "positive"),
    "sqrt": _unary(T.sqrt, "positive"),
    "power": _unary(lambda t: T.power(t, 1.7), "positive"),
    "square": _unary(T.square),
    "tanh": _unary(T.tanh),
    "relu": _unary(T.relu, "nonzero"),
    "softplus": _unary(T.softplus),
    "lgamma": _unary(T.lgamma, "positive"),
    "digamma": _unary(T.digamma, "positive"),
    "tsum_axis": _unary(lambda t: T.tsum(t, axis=0)),
    "mean_axis": _unary(lambda t: T.mean(t, axis=1, keepdims=True)),
    "reshape": _unary(lambda t: T.reshape(t, (2, 6))),
    "transpose": _unary(lambda t: T.transpose(t, (1, 0))),
    "getitem": _unary(lambda t: T.getitem(t, (slice(0, 2), [0, 3]))),
    "stack": _unary(lambda t: T.stack([t, T.square(t)])),
    "diag": _unary(T.diag, shape=(4,)),
    "diagonal": _unary(T.diagonal, shape=(4, 4)),
    "trace": _unary(T.trace, shape=(4, 4)),
    "matmul": _binary(T.matmul, 0, shape=(3, 4), other_shape=(4, 2)),
    "matmul_rhs": _binary(T.matmul, 1, shape=(4, 2), other_shape=(3, 4)),
    "matmul_batched": _matmul_batched,
    "cholesky": _cholesky,
    "logdet_spd": _logdet,
    "softmax": _unary(lambda t: T.softmax(t, axis=-1)),
    "log_softmax": _unary(lambda t: T.log_softmax(t, axis=0)),
    "softmax_cross_entropy": _cross_entropy,
    "fan_out": _fan_out,
}


# -- samplers: pathwise gradients with the base noise held fixed -------------------------

def _wishart_v(rng):
    p = int(rng.integers(1, 5))
    dof = p + int(rng.integers(0, 3))
    noise = rng.standard_normal((dof, p))
    w = T.constant(rng.normal(size=(p, p)))
    return (lambda v: T.tsum(sample_wishart(WishartPrior(v, dof), noise) * w)), rng.uniform(0.3, 2.0, p)


def _wishart_normalized(rng):
    noise = rng.standard_normal((3, 3))
    w = T.constant(rng.normal(size=(3, 3)))
    return (lambda v: T.tsum(sample_wishart(WishartPrior(v, 3), noise, normalize=True) * w)), rng.uniform(0.3, 2, 3)


def _dirichlet_alpha(rng):
    n = int(rng.integers(2, 6))
    u = rng.random(n)
    w = T.constant(rng.normal(size=n))
    return (lambda a: T.tsum(sample_dirichlet(DirichletPrior(a), u) * w)), rng.uniform(0.3, 3.0, n)


def _gaussian_mean(rng):
    chol = np.linalg.cholesky(np.eye(3) + 0.3)
    noise = rng.standard_normal((4, 3))
    return (lambda m: T.tsum(T.square(sample_gaussian_matrix(m, chol, noise)))), rng.uniform(-2, 2, (4, 3))


def _gaussian_chol(rng):
    mean = rng.normal(size=(4, 3))
    noise = rng.standard_normal((4, 3))
    w = T.constant(rng.normal(size=(4, 3)))

    def f(m):
        return T.tsum(sample_gaussian_matrix(mean, cholesky_spd(_spd(m)), noise) * w)

    return f, rng.uniform(-2, 2, (3, 3))


def _wishart_to_gaussian(rng):
    """V -> Sigma -> L -> S chained the way the mixture layer uses them."""
    noise_w = rng.standard_normal((3, 3))
    noise_g = rng.standard_normal((5, 3))
    w = T.constant(rng.normal(size=(5, 3)))

    def f(v):
        sigma = sample_wishart(WishartPrior(v, 3), noise_w)
        return T.tsum(sample_gaussian_matrix(np.zeros((5, 3)), cholesky_spd(sigma), noise_g) * w)

    return f, rng.uniform(0.3, 2.0, 3)


def _estimator(target):
    def build(rng):
        mu0 = rng.normal(size=(3, 4))
        config = MixtureConfig(n_components=3, epsilon=0.3)
        spec = MixtureSpec.create(T.parameter(mu0), config, rng)
        spec.v_raw.values = rng.normal(size=3)
        spec.alpha_raw.values = rng.normal(size=3)
        record = NoiseBuffer(spec.noise_shape, seed=int(rng.integers(1 << 30))).next()
        w = T.constant(rng.normal(size=(3, 4)))

        class Fixed:
            def next(self):
                return record

        def f(t):
            saved = getattr(spec, target)
            setattr(spec, target, t)
            try:
                return T.tsum(stochastic_estimate(spec, Fixed()).weight * w)
            finally:
                setattr(spec, target, saved)

        return f, getattr(spec, target).values.copy()

    return build


SAMPLER_CASES = {
    "wishart_scale": _wishart_v,
    "wishart_normalized": _wishart_normalized,
    "dirichlet_concentration": _dirichlet_alpha,
    "gaussian_mean": _gaussian_mean,
    "gaussian_cholesky": _gaussian_chol,
    "wishart_to_gaussian": _wishart_to_gaussian,
    "estimator_mu": _estimator("mu"),
    "estimator_v_raw": _estimator("v_raw"),
    "estimator_alpha_raw": _estimator("alpha_raw"),
}


# -- KL closed forms ---------------------------------------------------------------------

def _kl_gauss_simple(rng):
    return (lambda m: kl_gaussian_simplified(_spd(m))), rng.uniform(-1, 1, (3, 3))


def _kl_gauss_general_mu(rng):
    s1, s2 = (np.eye(3) + 0.2 * np.ones((3, 3))), np.diag(rng.uniform(0.5, 2, 3))
    mu2 = rng.normal(size=3)
    return (lambda m: kl_gaussian_general(m, s1, mu2, s2)), rng.normal(size=3)


def _kl_gauss_general_sigma(rng):
    mu1, mu2 = rng.normal(size=(2, 3))
    s2 = np.diag(rng.uniform(0.5, 2, 3))
    return (lambda m: kl_gaussian_general(mu1, _spd(m), mu2, s2)), rng.uniform(-1, 1, (3, 3))


def _kl_wishart_simple(rng):
    p = int(rng.integers(1, 5))
    return (lambda v: kl_wishart_simplified(v, p + 1)), rng.uniform(0.3, 3.0, p)


def _kl_wishart_general(rng):
    v2 = rng.uniform(0.3, 3.0, 3)
    return (lambda v: kl_wishart_general(v, 4, v2, 5)), rng.uniform(0.3, 3.0, 3)


def _kl_dirichlet(rng):
    n = int(rng.integers(2, 6))
    a2 = rng.uniform(0.3, 3.0, n)
    return (lambda a: kl_dirichlet(a, a2)), rng.uniform(0.3, 3.0, n)


KL_CASES = {
    "kl_gaussian_simplified": _kl_gauss_simple,
    "kl_gaussian_general_mean": _kl_gauss_general_mu,
    "kl_gaussian_general_cov": _kl_gauss_general_sigma,
    "kl_wishart_simplified": _kl_wishart_simple,
    "kl_wishart_general": _kl_wishart_general,
    "kl_dirichlet": _kl_dirichlet,
}
