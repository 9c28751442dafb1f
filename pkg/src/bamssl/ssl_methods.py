"""Threshold-mediated SSL objectives and their Bayesian-model-averaging variants.

Covers sharpening, confidence/variance pseudo-label selection with a moving
average of batch quantile thresholds, the masked unlabeled loss, and the
combined labeled + unlabeled (+ KL) step objective.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .bayes_head import VariationalLinear, bayes_predict, kl_to_prior
from .errors import ConfigurationError, InputError
from .nn_core import Network, softmax, softmax_cross_entropy

THRESHOLD_QUEUE = 50


@dataclass(frozen=True)
class MethodPreset:
    name: str
    mu: int
    lam: float
    tau: float
    t: float | None  # None means hard (argmax) pseudo-labels
    augmentation: str  # "symmetric" (weak/weak) or "asymmetric" (weak/strong)
    selection: str = "confidence"  # or "variance"

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigurationError(f"{self.name}: tau must lie in [0, 1]")
        if self.t is not None and not 0.0 < self.t <= 1.0:
            raise ConfigurationError(f"{self.name}: t must lie in (0, 1]")
        if self.mu < 1 or self.lam < 0:
            raise ConfigurationError(f"{self.name}: need mu >= 1 and lam >= 0")
        if self.augmentation not in ("symmetric", "asymmetric"):
            raise ConfigurationError(f"unknown augmentation {self.augmentation!r}")
        if self.selection not in ("confidence", "variance"):
            raise ConfigurationError(f"unknown selection {self.selection!r}")

    @property
    def hard(self):
        return self.t is None

    @property
    def bayes(self):
        return self.name.startswith("BAM-")

    def describe(self):
        t = "hard" if self.t is None else f"{self.t:g}"
        return (
            f"{self.name}: mu={self.mu} tau={self.tau:g} t={t} lambda={self.lam:g} "
            f"aug={self.augmentation} select={self.selection}"
        )


def preset_catalog():
    base = [
        MethodPreset("PL", mu=1, lam=1.0, tau=0.95, t=None, augmentation="symmetric"),
        MethodPreset("UDA", mu=7, lam=1.0, tau=0.8, t=0.4, augmentation="asymmetric"),
        MethodPreset("FM", mu=7, lam=1.0, tau=0.95, t=None, augmentation="asymmetric"),
    ]
    bam = []
    for p in base:
        # BAM-UDA softens sharpening; everything else is kept identical
        t = 0.9 if p.name == "UDA" else p.t
        bam.append(
            MethodPreset(
                "BAM-" + p.name, p.mu, p.lam, p.tau, t, p.augmentation, selection="variance"
            )
        )
    return {p.name: p for p in base + bam}


def get_preset(name):
    catalog = preset_catalog()
    try:
        return catalog[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown method {name!r}; choose from {sorted(catalog)}"
        ) from None


def sharpen(q, t=None, hard=False):
    """Temperature sharpening ``q**(1/t) / sum``; ``hard`` (or t=None) gives argmax one-hots."""
    q = np.asarray(q, dtype=np.float64)
    squeeze = q.ndim == 1
    q2 = np.atleast_2d(q)
    if np.any(q2.sum(axis=1) <= 0):
        raise InputError("cannot sharpen a row with zero mass")
    if hard or t is None:
        out = np.zeros_like(q2)
        out[np.arange(len(q2)), q2.argmax(axis=1)] = 1.0
    else:
        if t <= 0:
            raise ConfigurationError("sharpening temperature must be positive")
        if t == 1.0:
            out = q2 / q2.sum(axis=1, keepdims=True)
        else:
            with np.errstate(divide="ignore"):
                z = np.log(q2) / t
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            out = e / e.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def sharpen_backward(q, t, upstream):
    """Vector-Jacobian product of ``sharpen(q, t)`` for soft sharpening."""
    q = np.asarray(q, dtype=np.float64)
    s = sharpen(q, t)
    inner = (upstream * s).sum(axis=-1, keepdims=True)
    return s * (upstream - inner) / (t * q)


def select_by_confidence(q, tau):
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    return q.max(axis=1) >= tau


@dataclass
class SelectionState:
    """Recent batch thresholds; the effective threshold is their mean."""

    capacity: int = THRESHOLD_QUEUE
    recent_thresholds: deque = field(default_factory=deque)

    def __post_init__(self):
        self.recent_thresholds = deque(self.recent_thresholds, maxlen=self.capacity)

    def push(self, value):
        self.recent_thresholds.append(float(value))

    @property
    def threshold(self):
        if not self.recent_thresholds:
            return math.nan
        return float(np.mean(self.recent_thresholds))


def variance_scores(pp):
    """Predictive variance at the predicted class of the posterior mean."""
    c = pp.mean.argmax(axis=1)
    return pp.std[np.arange(len(c)), c] ** 2


def select_by_variance(pp, state, Q_effective):
    """Push the batch Q-quantile of variance scores and accept scores <= mean of the queue."""
    if not 0.0 < Q_effective <= 1.0:
        raise ConfigurationError("Q must lie in (0, 1]")
    scores = variance_scores(pp)
    if scores.size == 0:
        raise InputError("empty batch")
    state.push(np.quantile(scores, Q_effective))
    return scores <= state.threshold, state


def pseudo_targets(q_weak, preset):
    return sharpen(q_weak, preset.t, hard=preset.hard)


def unlabeled_loss(q_weak, strong_logits, mask, preset):
    """Masked CE between sharpened weak-view pseudo-labels and strong-view predictions.

    Averaged over the whole unlabeled batch, accepted or not. ``q_weak`` must
    already be detached. Returns ``(loss, dloss/dstrong_logits)``.
    """
    strong_logits = np.asarray(strong_logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if q_weak.shape != strong_logits.shape or mask.shape != (len(q_weak),):
        raise ConfigurationError("weak/strong/mask shapes disagree")
    if not mask.any():
        return 0.0, np.zeros_like(strong_logits)
    targets = pseudo_targets(q_weak, preset)
    return softmax_cross_entropy(strong_logits, targets, weights=mask.astype(float))


def q_warmup(epoch, target_Q, start=0.1, warmup_epochs=10):
    """Linear ramp of the variance quantile from ``start`` to ``target_Q``."""
    if target_Q < start:
        raise ConfigurationError(f"target Q {target_Q} below warm-up start {start}")
    if epoch < 0:
        raise ConfigurationError("epoch must be non-negative")
    if warmup_epochs <= 0 or epoch >= warmup_epochs:
        return target_Q
    return start + (target_Q - start) * epoch / warmup_epochs


def kl_coefficient_schedule(epoch, ramp_epochs):
    """One-minus-cosine ramp of the KL weight from 0 to 1 over ``ramp_epochs``."""
    if ramp_epochs <= 0:
        return 1.0
    frac = min(max(epoch, 0.0) / ramp_epochs, 1.0)
    return 0.5 * (1.0 - math.cos(math.pi * frac))


class Classifier:
    """Backbone MLP followed by either a deterministic or a variational head.

    Without ``bayes`` the network's own last layer is the head and its output
    is the logits; with ``bayes`` the network is a pure encoder.
    """

    def __init__(self, net: Network, bayes: VariationalLinear | None = None):
        if bayes is not None and net.out_dim != bayes.in_dim:
            raise ConfigurationError("encoder width does not match variational head")
        self.net = net
        self.bayes = bayes

    @property
    def is_bayes(self):
        return self.bayes is not None

    def forward(self, x, rng=None):
        _, out = self.net.forward(x)
        if self.bayes is None:
            return out
        return self.bayes.forward(out, rng)

    def backward(self, upstream):
        if self.bayes is not None:
            upstream = self.bayes.backward(upstream)
        self.net.backward(upstream)

    def embed(self, x):
        return self.net.predict(x)

    def predict_proba(self, x, M=10, rng=None):
        """Class probabilities; posterior-predictive mean for a variational head."""
        out = self.net.predict(x)
        if self.bayes is None:
            return softmax(out)
        return bayes_predict(self.bayes, out, M, rng).mean

    def zero_grads(self):
        self.net.zero_grads()
        if self.bayes is not None:
            self.bayes.zero_grads()


@dataclass
class StepLoss:
    labeled: float
    unlabeled: float
    kl: float
    total: float
    mask: np.ndarray
    pseudo_probs: np.ndarray
    threshold: float


def combined_step_loss(
    model,
    labeled_x,
    labels,
    weak_x,
    strong_x,
    preset,
    *,
    state=None,
    Q=0.95,
    M=10,
    kl_coefficient=1.0,
    dataset_size=1,
    rng=None,
    lam=None,
    confidence_floor=None,
):
    """Compute ``L_l + lam * L_u (+ KL)`` and accumulate its gradients into ``model``.

    Pseudo-labels come from the weak view without gradient: the posterior
    mean for variational models, a single softmax otherwise. With variance
    selection, ``confidence_floor`` additionally requires max-prob >= floor.
    """
    lam = preset.lam if lam is None else lam
    if preset.bayes and not model.is_bayes:
        raise ConfigurationError(f"{preset.name} needs a variational head")
    n_l = len(labeled_x)

    if model.is_bayes:
        pp = bayes_predict(model.bayes, model.embed(weak_x), M, rng)
        q_weak = pp.mean
    else:
        pp = None
        q_weak = softmax(model.net.predict(weak_x))

    if preset.selection == "variance":
        if state is None:
            raise ConfigurationError("variance selection needs a SelectionState")
        mask, _ = select_by_variance(pp, state, Q)
        threshold = state.threshold
        if confidence_floor is not None:
            mask &= select_by_confidence(q_weak, confidence_floor)
    else:
        mask = select_by_confidence(q_weak, preset.tau)
        threshold = preset.tau

    logits = model.forward(np.concatenate([labeled_x, strong_x]), rng)
    l_loss, g_l = softmax_cross_entropy(logits[:n_l], labels)
    u_loss, g_u = unlabeled_loss(q_weak, logits[n_l:], mask, preset)
    model.backward(np.concatenate([g_l, lam * g_u]))

    kl = 0.0
    if model.is_bayes:
        if dataset_size <= 0:
            raise ConfigurationError("dataset_size must be positive")
        scale = kl_coefficient / dataset_size
        kl = scale * kl_to_prior(model.bayes)
        model.bayes.kl_backward(scale)

    # the logged unlabeled term is already weighted, so the three parts sum to the total
    u_term = lam * u_loss
    total = l_loss + u_term + kl
    return StepLoss(l_loss, u_term, kl, total, mask, q_weak, threshold)
