"""Representation-learning SSL: soft nearest-neighbour pseudo-labels over a
labeled support set, the symmetric sharpened consistency loss with mean-entropy
maximization, and SWA/EMA weight aggregation for the target network.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bayes_head import kl_to_prior
from .errors import ConfigurationError, InputError
from .ssl_methods import sharpen, sharpen_backward

AGGREGATION_MODES = ("off", "swa", "ema")


@dataclass
class SupportSet:
    embeddings: np.ndarray
    labels: np.ndarray  # one-hot rows
    tau_p: float = 0.1

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.tau_p <= 0:
            raise ConfigurationError("tau_p must be positive")
        if len(self.embeddings) != len(self.labels):
            raise InputError("support embeddings and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)) or not np.all(
            self.labels.sum(axis=1) == 1
        ):
            raise InputError("support labels must be one-hot rows")
        if np.any(self.labels.sum(axis=0) == 0):
            raise InputError("every class needs at least one support sample")


def one_hot(labels, k):
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _unit(x, what, allow_zero=False):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        if not allow_zero:
            raise InputError(f"zero-norm {what} embedding")
        # a zero row stays zero: uniform similarity, finite gradient
        norms = np.where(norms == 0, 1.0, norms)
    return x / norms, norms


def snn_forward(z, support, allow_zero=False):
    """Soft nearest-neighbour distributions plus the cache needed by ``snn_backward``.

    ``allow_zero`` accepts zero-norm embeddings (they get uniform similarity)
    instead of raising; training uses it since augmentations can zero an input.
    """
    z = np.asarray(z, dtype=np.float64)
    zn, z_norm = _unit(z, "query", allow_zero)
    sn, s_norm = _unit(support.embeddings, "support", allow_zero)
    logits = zn @ sn.T / support.tau_p
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    q = w @ support.labels
    return q, (zn, z_norm, sn, s_norm, w, support)


def snn_classify(z, support, allow_zero=False):
    return snn_forward(z, support, allow_zero)[0]


def snn_backward(cache, upstream):
    """Returns grads with respect to the query and the support embeddings."""
    zn, z_norm, sn, s_norm, w, support = cache
    g_w = upstream @ support.labels.T
    g_logit = w * (g_w - (w * g_w).sum(axis=1, keepdims=True)) / support.tau_p
    g_zn = g_logit @ sn
    g_sn = g_logit.T @ zn
    g_z = (g_zn - zn * (zn * g_zn).sum(axis=1, keepdims=True)) / z_norm
    g_s = (g_sn - sn * (sn * g_sn).sum(axis=1, keepdims=True)) / s_norm
    return g_z, g_s


def paws_loss(q1_pred, q2_pred, q1_target, q2_target, t):
    """Symmetric CE: view-1 predictions against sharpened view-2 targets and vice versa.

    Targets are treated as constants. Returns ``(loss, d/dq1_pred, d/dq2_pred)``.
    """
    q1_pred = np.asarray(q1_pred, dtype=np.float64)
    q2_pred = np.asarray(q2_pred, dtype=np.float64)
    s1 = sharpen(q1_target, t)
    s2 = sharpen(q2_target, t)
    n = len(q1_pred)
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = -np.where(s2 > 0, s2 * np.log(q1_pred), 0.0).sum()
        l2 = -np.where(s1 > 0, s1 * np.log(q2_pred), 0.0).sum()
        g1 = np.where(s2 > 0, -s2 / q1_pred, 0.0) / (2 * n)
        g2 = np.where(s1 > 0, -s1 / q2_pred, 0.0) / (2 * n)
    return float((l1 + l2) / (2 * n)), g1, g2


def me_max(q_bar):
    """Negative entropy of the mean prediction; minimizing it spreads mass over classes."""
    q_bar = np.asarray(q_bar, dtype=np.float64)
    nz = q_bar[q_bar > 0]
    return float(np.sum(nz * np.log(nz)))


def me_max_backward(preds, t):
    """Value and gradient of ``me_max(mean(sharpen(preds, t)))`` with respect to ``preds``."""
    s = sharpen(preds, t)
    q_bar = s.mean(axis=0)
    g_bar = np.log(q_bar) + 1.0
    g_s = np.broadcast_to(g_bar / len(preds), s.shape)
    return me_max(q_bar), sharpen_backward(preds, t, g_s)


def gamma_schedule(epoch, total_epochs, kind="linear_warmup", gamma_max=0.996,
                   warmup_epochs=50, start_gap=0.05):
    """EMA momentum schedule.

    ``linear_warmup``: 0 -> ``gamma_max`` over ``warmup_epochs`` then flat.
    ``one_minus_cosine``: ``1 - start_gap`` rising to 1 at ``total_epochs``.
    """
    if epoch < 0:
        raise ConfigurationError("epoch must be non-negative")
    if kind == "linear_warmup":
        if warmup_epochs <= 0:
            return gamma_max
        return min(epoch / warmup_epochs, 1.0) * gamma_max
    if kind == "one_minus_cosine":
        frac = min(epoch / total_epochs, 1.0) if total_epochs > 0 else 1.0
        return 1.0 - start_gap * (1.0 + math.cos(math.pi * frac)) / 2.0
    if kind == "constant":
        return gamma_max
    raise ConfigurationError(f"unknown gamma schedule {kind!r}")


class WeightAggregate:
    """Non-trainable aggregate ``theta_g`` of the encoder weights."""

    def __init__(self, theta_f, mode="off", T_swa=0):
        if mode not in AGGREGATION_MODES:
            raise ConfigurationError(f"unknown aggregation mode {mode!r}")
        self.theta_g = [np.array(v, dtype=np.float64, copy=True) for v in theta_f]
        self.mode = mode
        self.T_swa = T_swa
        self.n_a = 0
        self.gamma = 0.0

    def _check(self, theta_f):
        if len(theta_f) != len(self.theta_g) or any(
            np.shape(a) != b.shape for a, b in zip(theta_f, self.theta_g)
        ):
            raise ConfigurationError("theta_f does not match the aggregate's shapes")

    def copy_from(self, theta_f):
        self._check(theta_f)
        for g, f in zip(self.theta_g, theta_f):
            g[...] = f

    def update(self, theta_f, epoch, gamma=None):
        if self.mode == "swa":
            swa_update(self, theta_f, epoch)
        elif self.mode == "ema":
            ema_update(self, theta_f, self.gamma if gamma is None else gamma)
        else:
            self.copy_from(theta_f)
        return self


def swa_update(agg, theta_f, epoch):
    """Running mean from ``T_swa`` on; before that the weights are just copied."""
    agg._check(theta_f)
    if epoch < agg.T_swa:
        agg.copy_from(theta_f)
        return agg
    n = agg.n_a
    for g, f in zip(agg.theta_g, theta_f):
        g[...] = (n * g + f) / (n + 1)
    agg.n_a = n + 1
    return agg


def ema_update(agg, theta_f, gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError("gamma must lie in [0, 1]")
    agg._check(theta_f)
    agg.gamma = gamma
    for g, f in zip(agg.theta_g, theta_f):
        if gamma == 0.0:
            g[...] = f
        elif gamma != 1.0:
            g[...] = gamma * g + (1.0 - gamma) * f
    return agg


def bam_paws_embed(layer, v, M, rng=None, noise=None):
    """Average of ``M`` sampled linear-layer outputs (no softmax)."""
    if M < 1:
        raise ConfigurationError("M must be at least 1")
    if noise is not None and len(noise) != M:
        raise ConfigurationError(f"expected {M} noise pairs, got {len(noise)}")
    v = np.asarray(v, dtype=np.float64)
    acc = np.zeros((len(v), layer.out_dim))
    for m in range(M):
        w, b, _ = layer.sample(rng, None if noise is None else noise[m])
        acc += v @ w + b
    return acc / M


class PawsModel:
    """Encoder MLP with an optional variational final layer, plus the target copy.

    ``target`` holds theta_g; it is loaded from the aggregate before producing
    pseudo-labels and never receives gradients.
    """

    def __init__(self, net, bayes=None, aggregation="off", T_swa=0):
        self.net = net
        self.bayes = bayes
        self.target = net.clone()
        self.aggregate = WeightAggregate(net.state(), aggregation, T_swa)

    @property
    def is_bayes(self):
        return self.bayes is not None

    def zero_grads(self):
        self.net.zero_grads()
        if self.bayes is not None:
            self.bayes.zero_grads()

    def forward(self, x, rng=None):
        _, out = self.net.forward(x)
        if self.bayes is None:
            return out
        return self.bayes.forward(out, rng)

    def backward(self, upstream):
        if self.bayes is not None:
            upstream = self.bayes.backward(upstream)
        self.net.backward(upstream)

    def target_embed(self, x, M=1, rng=None):
        """Embeddings from the aggregate weights; averaged over M samples if variational."""
        self.target.load_state(self.aggregate.theta_g)
        v = self.target.predict(x)
        if self.bayes is None:
            return v
        return bam_paws_embed(self.bayes, v, M, rng)

    def update_aggregate(self, epoch, gamma=None):
        self.aggregate.update(self.net.state(), epoch, gamma)


@dataclass
class PawsStepLoss:
    consistency: float
    me_max: float
    kl: float
    total: float
    targets: np.ndarray  # unsharpened target distributions, both views stacked


def paws_step_loss(model, x1, x2, xs, ys, *, tau_p=0.1, t=0.25, me_max_weight=1.0,
                   M=1, kl_coefficient=0.0, dataset_size=1, rng=None):
    """Assemble the PAWS objective for one batch and accumulate gradients.

    ``x1``/``x2`` are two views of the unlabeled batch, ``xs``/``ys`` the labeled
    support inputs and one-hot labels.
    """
    n = len(x1)
    z = model.forward(np.concatenate([x1, x2, xs]), rng)
    z1, z2, zs = z[:n], z[n:2 * n], z[2 * n:]
    support = SupportSet(zs, ys, tau_p)
    p1, c1 = snn_forward(z1, support, allow_zero=True)
    p2, c2 = snn_forward(z2, support, allow_zero=True)

    tz = model.target_embed(np.concatenate([x1, x2, xs]), M, rng)
    target_support = SupportSet(tz[2 * n:], ys, tau_p)
    q1 = snn_classify(tz[:n], target_support, allow_zero=True)
    q2 = snn_classify(tz[n:2 * n], target_support, allow_zero=True)

    cons, g_p1, g_p2 = paws_loss(p1, p2, q1, q2, t)
    reg, g_me = me_max_backward(np.concatenate([p1, p2]), t)
    g_p1 = g_p1 + me_max_weight * g_me[:n]
    g_p2 = g_p2 + me_max_weight * g_me[n:]

    g_z1, g_s1 = snn_backward(c1, g_p1)
    g_z2, g_s2 = snn_backward(c2, g_p2)
    model.backward(np.concatenate([g_z1, g_z2, g_s1 + g_s2]))

    kl = 0.0
    if model.is_bayes and kl_coefficient > 0:
        scale = kl_coefficient / dataset_size
        kl = scale * kl_to_prior(model.bayes)
        model.bayes.kl_backward(scale)
    total = cons + me_max_weight * reg + kl
    return PawsStepLoss(cons, reg, kl, total, np.concatenate([q1, q2]))
