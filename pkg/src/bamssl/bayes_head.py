"""Variational Gaussian final layer with a unit-Gaussian prior.

Weights and biases are both variational: ``theta = mu + softplus(rho) * eps``.
Every sampling operation accepts explicit noise so tests can pin ``eps``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, StateError
from .nn_core import ParamTensor, softmax


def softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class VariationalLinear:
    """Final layer with posterior N(mu, softplus(rho)^2) over every weight and bias."""

    def __init__(self, mu_w, rho_w, mu_b, rho_b, name="bayes"):
        mu_w = np.asarray(mu_w, dtype=np.float64)
        rho_w = np.asarray(rho_w, dtype=np.float64)
        mu_b = np.asarray(mu_b, dtype=np.float64)
        rho_b = np.asarray(rho_b, dtype=np.float64)
        if mu_w.shape != rho_w.shape or mu_b.shape != rho_b.shape:
            raise ConfigurationError("mu and rho shapes must match")
        if mu_w.ndim != 2 or mu_b.shape != (mu_w.shape[1],):
            raise ConfigurationError(f"bad layer shapes {mu_w.shape}, {mu_b.shape}")
        self.mu_w = ParamTensor(mu_w, f"{name}.mu_w", decay=False)
        self.rho_w = ParamTensor(rho_w, f"{name}.rho_w", decay=False)
        self.mu_b = ParamTensor(mu_b, f"{name}.mu_b", decay=False)
        self.rho_b = ParamTensor(rho_b, f"{name}.rho_b", decay=False)
        self.name = name
        self._cache = None

    @classmethod
    def init(cls, n_in, n_out, rng, rho_init=-3.0, name="bayes"):
        bound = math.sqrt(3.0 / n_in)
        mu_w = rng.uniform(-bound, bound, size=(n_in, n_out))
        return cls(
            mu_w,
            np.full((n_in, n_out), rho_init),
            np.zeros(n_out),
            np.full(n_out, rho_init),
            name,
        )

    @property
    def in_dim(self):
        return self.mu_w.shape[0]

    @property
    def out_dim(self):
        return self.mu_w.shape[1]

    def params(self):
        return [self.mu_w, self.rho_w, self.mu_b, self.rho_b]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    @property
    def sigma_w(self):
        return softplus(self.rho_w.value)

    @property
    def sigma_b(self):
        return softplus(self.rho_b.value)

    def draw_noise(self, rng):
        return rng.standard_normal(self.mu_w.shape), rng.standard_normal(self.mu_b.shape)

    def sample(self, rng=None, eps=None):
        """Return ``(W, b, eps)``; pass ``eps=(eps_w, eps_b)`` to fix the noise."""
        if eps is None:
            if rng is None:
                raise ConfigurationError("need an rng or explicit eps")
            eps = self.draw_noise(rng)
        eps_w, eps_b = eps
        w = self.mu_w.value + self.sigma_w * eps_w
        b = self.mu_b.value + self.sigma_b * eps_b
        return w, b, (eps_w, eps_b)

    def forward(self, v, rng=None, eps=None):
        """One sampled-weight pass, cached for ``backward``. Returns logits."""
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.in_dim:
            raise ConfigurationError(f"input {v.shape} incompatible with in-dim {self.in_dim}")
        w, b, eps = self.sample(rng, eps)
        self._cache = (v, w, eps)
        return v @ w + b

    def backward(self, upstream):
        """Reparameterization-path grads into mu/rho; returns grad wrt the input."""
        if self._cache is None:
            raise StateError("backward called before forward")
        v, w, (eps_w, eps_b) = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        gw = v.T @ g
        gb = g.sum(axis=0)
        self.mu_w.grad += gw
        self.mu_b.grad += gb
        self.rho_w.grad += gw * eps_w * _sigmoid(self.rho_w.value)
        self.rho_b.grad += gb * eps_b * _sigmoid(self.rho_b.value)
        return g @ w.T

    def mean_forward(self, v):
        return np.asarray(v, dtype=np.float64) @ self.mu_w.value + self.mu_b.value

    def kl(self):
        return kl_to_prior(self)

    def kl_backward(self, scale=1.0):
        """Accumulate ``scale * dKL/dparams``."""
        for mu, rho in ((self.mu_w, self.rho_w), (self.mu_b, self.rho_b)):
            sigma = softplus(rho.value)
            mu.grad += scale * mu.value
            rho.grad += scale * (sigma - 1.0 / sigma) * _sigmoid(rho.value)


def sample_weights(layer, rng=None, eps=None):
    """Draw one concrete ``(W, b)`` from the layer posterior."""
    w, b, _ = layer.sample(rng, eps)
    return w, b


def kl_to_prior(layer):
    """Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over all weights and biases."""
    total = 0.0
    for mu, rho in ((layer.mu_w, layer.rho_w), (layer.mu_b, layer.rho_b)):
        s2 = softplus(rho.value) ** 2
        total += 0.5 * float(np.sum(mu.value**2 + s2 - 1.0 - np.log(s2)))
    return total


@dataclass
class PosteriorPredictive:
    mean: np.ndarray
    std: np.ndarray
    samples_used: int


def bayes_predict(layer, embeddings, M, rng=None, noise=None):
    """Monte-Carlo posterior predictive over ``M`` weight samples.

    ``std`` is the population standard deviation (divide by M) per class.
    ``noise``, if given, is a sequence of M ``(eps_w, eps_b)`` pairs.
    """
    if M < 2:
        raise ConfigurationError("bayes_predict needs M >= 2")
    if noise is not None and len(noise) != M:
        raise ConfigurationError(f"expected {M} noise pairs, got {len(noise)}")
    v = np.asarray(embeddings, dtype=np.float64)
    outs = []
    for m in range(M):
        w, b, _ = layer.sample(rng, None if noise is None else noise[m])
        outs.append(softmax(v @ w + b))
    outs = np.stack(outs)
    return PosteriorPredictive(outs.mean(axis=0), outs.std(axis=0), M)


def elbo_terms(layer, data_nll, kl_coefficient, dataset_size):
    """Per-example negative ELBO: ``data_nll + coef * KL / N``.

    Returns ``(negative_elbo, data_term, kl_term)``.
    """
    if dataset_size <= 0:
        raise ConfigurationError("dataset_size must be positive")
    if not 0.0 <= kl_coefficient <= 1.0:
        raise ConfigurationError("kl_coefficient must lie in [0, 1]")
    kl_term = kl_coefficient * kl_to_prior(layer) / dataset_size
    data_term = float(data_nll)
    return data_term + kl_term, data_term, kl_term
