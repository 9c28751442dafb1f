"""Calibration and pseudo-labeling diagnostics.

ECE with equal-width confidence bins, purity rate and mean max-probability of
pseudo-labels, the checkpoint convergence report, and assembly of the
PAC-Bayes generalization bound for a variational posterior.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, InputError

CONVERGENCE_WINDOW = 20


@dataclass
class ReliabilityBin:
    low: float
    high: float
    count: int
    accuracy: float
    confidence: float


@dataclass
class ReliabilityReport:
    bins: list
    ece: float
    accuracy: float

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_low", "bin_high", "count", "accuracy", "confidence"])
            for b in self.bins:
                w.writerow([repr(b.low), repr(b.high), b.count, repr(b.accuracy), repr(b.confidence)])


def confidence_bin(conf, n_bins):
    """Index of the bin ((m-1)/M, m/M] holding ``conf``; confidence 0 goes to the first bin."""
    edges = np.array([m / n_bins for m in range(1, n_bins + 1)])
    idx = np.searchsorted(edges, np.asarray(conf), side="left")
    return np.clip(idx, 0, n_bins - 1)


def ece(probabilities, labels, n_bins=10):
    """Expected calibration error over ``n_bins`` equal-width max-probability bins."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise InputError("ece needs a non-empty (n, K) probability matrix")
    if len(labels) != len(probs):
        raise InputError("labels and probabilities differ in length")
    n = len(probs)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    which = confidence_bin(conf, n_bins)
    bins = []
    total = 0.0
    for m in range(n_bins):
        sel = which == m
        count = int(sel.sum())
        if count:
            acc = float(correct[sel].mean())
            cf = float(conf[sel].mean())
            total += count / n * abs(acc - cf)
        else:
            acc = cf = 0.0
        bins.append(ReliabilityBin(m / n_bins, (m + 1) / n_bins, count, acc, cf))
    return ReliabilityReport(bins, min(max(total, 0.0), 1.0), float(correct.mean()))


def purity_rate(accept_mask, pseudo_labels, true_labels):
    """Accuracy of the accepted pseudo-labels, or None when nothing was accepted.

    ``pseudo_labels`` may be class indices or per-class distributions.
    """
    mask = np.asarray(accept_mask, dtype=bool)
    pseudo = np.asarray(pseudo_labels)
    true = np.asarray(true_labels)
    if not (len(mask) == len(pseudo) == len(true)):
        raise InputError("mask, pseudo-labels and true labels differ in length")
    if pseudo.ndim == 2:
        pseudo = pseudo.argmax(axis=1)
    accepted = int(mask.sum())
    if accepted == 0:
        return None
    return int((pseudo[mask] == true[mask]).sum()) / accepted


def mean_max_prob(probabilities):
    probs = np.atleast_2d(np.asarray(probabilities, dtype=np.float64))
    if len(probs) == 0:
        raise InputError("mean_max_prob of an empty batch")
    # fsum makes the value independent of summation order
    return math.fsum(probs.max(axis=1)) / len(probs)


@dataclass
class ConvergenceReport:
    accuracy: float
    ece: float
    index: int


def convergence_report(history, window=CONVERGENCE_WINDOW):
    """Median accuracy of ``window`` checkpoints centred on the best one.

    ``history`` is a sequence of (accuracy, ece). The window is clipped to the
    history and shifted to keep its length where possible. The reported ECE
    belongs to the window checkpoint whose accuracy is the (lower) median;
    ties resolve to the earliest such checkpoint.
    """
    hist = [(float(a), float(e)) for a, e in history]
    if not hist:
        raise InputError("convergence_report needs at least one checkpoint")
    n = len(hist)
    best = max(range(n), key=lambda i: (hist[i][0], -i))
    size = min(window, n)
    start = min(max(best - size // 2, 0), n - size)
    idx = list(range(start, start + size))
    accs = [hist[i][0] for i in idx]
    median_acc = float(np.median(accs))
    # checkpoint carrying the lower-middle accuracy in sorted order (stable, so earliest on ties)
    order = sorted(idx, key=lambda i: hist[i][0])
    pick = order[(size - 1) // 2]
    return ConvergenceReport(median_acc, hist[pick][1], pick)


@dataclass
class BoundReport:
    negative_elbo_term: float
    divergence_term: float
    confidence_term: float
    slack_term: float
    total_bound: float
    delta: float
    s2: float
    N: int
    N_u: int


def pseudo_log_ratio(prob_samples, pseudo_labels, true_labels):
    """Monte-Carlo E_q[(1/N_u) sum log p(yhat|x)/p(y|x)] from per-sample class probabilities.

    ``prob_samples`` has shape (M, N_u, K): predictive probabilities under M posterior draws.
    """
    p = np.asarray(prob_samples, dtype=np.float64)
    yhat = np.asarray(pseudo_labels)
    y = np.asarray(true_labels)
    if p.ndim != 3 or p.shape[1] != len(yhat) or len(yhat) != len(y):
        raise InputError("prob_samples must be (M, N_u, K) matching the label arrays")
    if p.shape[1] == 0:
        return 0.0
    rows = np.arange(p.shape[1])
    same = yhat == y
    logr = np.log(p[:, rows, yhat]) - np.log(p[:, rows, y])
    logr[:, same] = 0.0
    return float(logr.mean())


def pac_bayes_bound(negative_elbo, pseudo_log_ratio_mc, N, N_u, delta=0.05, s2=1.0):
    """Generalization bound: -ELBO/N - E[log-ratio] + log(1/delta)/N + s2/2."""
    if delta <= 0 or delta > 1:
        raise ConfigurationError("delta must lie in (0, 1]")
    if N <= 0 or N_u < 0 or N_u > N:
        raise ConfigurationError("need N > 0 and 0 <= N_u <= N")
    if s2 < 0:
        raise ConfigurationError("s2 must be non-negative")
    elbo_term = negative_elbo / N
    div = 0.0 if N_u == 0 else -float(pseudo_log_ratio_mc)
    conf = math.log(1.0 / delta) / N
    slack = s2 / 2.0
    total = elbo_term + div + conf + slack
    return BoundReport(elbo_term, div, conf, slack, total, delta, s2, N, N_u)
