"""Experiment orchestration: data setup, training loops, metrics logging, reports."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import data as ds
from .bayes_head import VariationalLinear, kl_to_prior
from .calibration import (
    convergence_report,
    ece,
    mean_max_prob,
    pac_bayes_bound,
    pseudo_log_ratio,
    purity_rate,
)
from .errors import ConfigurationError, InputError
from .nn_core import SGD, Adam, Network, cosine_lr, softmax
from .paws import PawsModel, bam_paws_embed, gamma_schedule, one_hot, paws_step_loss, snn_classify, SupportSet
from .ssl_methods import (
    Classifier,
    MethodPreset,
    SelectionState,
    combined_step_loss,
    get_preset,
    kl_coefficient_schedule,
    q_warmup,
)

log = logging.getLogger(__name__)

SCHEMA_LINE = "#schema=1"
STREAMS = {"data": 0, "init": 1, "sampler": 2, "augment": 3, "bnn": 4, "eval": 5}


def make_rngs(seed):
    """Independent named generators derived from one master seed."""
    return {
        name: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))
        for name, key in STREAMS.items()
    }


@dataclass
class MetricsRow:
    step: int
    epoch: int
    labeled_loss: float | None = None
    unlabeled_loss: float | None = None
    kl_loss: float | None = None
    accepted_fraction: float | None = None
    purity_rate: float | None = None
    mean_max_prob: float | None = None
    threshold_value: float | None = None
    test_accuracy: float | None = None
    test_ece: float | None = None

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def check_finite(self):
        for k, v in asdict(self).items():
            if isinstance(v, float) and not math.isfinite(v):
                raise FloatingPointError(f"non-finite {k} at step {self.step} (epoch {self.epoch})")


def _cell(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA_LINE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsRow.columns())
        for r in rows:
            w.writerow([_cell(v) for v in asdict(r).values()])


def read_metrics(path):
    """Parse a metrics CSV back into MetricsRow objects."""
    try:
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if first != SCHEMA_LINE:
                raise InputError(f"{path}: missing {SCHEMA_LINE} header")
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != MetricsRow.columns():
                raise InputError(f"{path}: unexpected columns {header}")
            rows = []
            for n, rec in enumerate(reader, start=3):
                if len(rec) != len(header):
                    raise InputError(f"{path}: row {n} has {len(rec)} fields")
                try:
                    vals = {
                        k: (int(v) if k in ("step", "epoch") else (float(v) if v != "" else None))
                        for k, v in zip(header, rec)
                    }
                except ValueError:
                    raise InputError(f"{path}: row {n} is not numeric") from None
                rows.append(MetricsRow(**vals))
    except FileNotFoundError:
        raise InputError(f"metrics file not found: {path}") from None
    return rows


def checkpoint_history(rows):
    return [(r.epoch, r.test_accuracy, r.test_ece) for r in rows if r.test_accuracy is not None]


def report_from_rows(rows):
    hist = checkpoint_history(rows)
    if not hist:
        raise InputError("no checkpoint rows in metrics")
    rep = convergence_report([(a, e) for _, a, e in hist])
    return {
        "accuracy": rep.accuracy,
        "ece": rep.ece,
        "checkpoint_index": rep.index,
        "checkpoint_epoch": hist[rep.index][0],
    }


# ----------------------------------------------------------------------------- setup


def build_split(cfg, rng):
    d = cfg.data
    seed = int(rng.integers(2**31))
    if d.source == "csv":
        dataset = ds.load_csv(d.csv_path, d.label_column, d.normalize)
    elif d.source == "moons":
        dataset = ds.make_moons(d.n_per_class * 2, d.moons_noise, seed)
    else:
        dataset = ds.make_blobs(d.K, d.n_per_class, d.d, d.separation, seed, d.blob_std)
    if d.long_tail_alpha > 1:
        counts = ds.long_tail_counts(dataset.K, d.n_max, d.long_tail_alpha)
        return ds.curate_long_tail(dataset, counts, seed, 0.1, d.test_per_class)
    kw = {"label_fraction": d.label_fraction} if d.label_fraction > 0 else {
        "labels_per_class": d.labels_per_class}
    if d.test_fraction > 0:
        kw["test_fraction"] = d.test_fraction
    else:
        kw["test_per_class"] = d.test_per_class
    return ds.split_ssl(dataset, seed=seed, **kw)


def resolve_preset(cfg):
    base = get_preset(cfg.experiment.method)
    s = cfg.ssl
    return MethodPreset(
        base.name,
        mu=cfg.optim.mu or base.mu,
        lam=base.lam if s.lam < 0 else s.lam,
        tau=base.tau if s.tau < 0 else s.tau,
        t=base.t if s.t < 0 else s.t,
        augmentation=base.augmentation,
        selection=base.selection,
    )


def build_classifier(cfg, d_in, K, rng, bayes):
    hidden = cfg.hidden_sizes
    act = cfg.model.activation
    if bayes:
        if not hidden:
            raise ConfigurationError("a variational head needs at least one hidden layer")
        # encoder ends in the activation; the variational layer is the head
        net = Network.mlp([d_in] + hidden, rng, act, n_head=0, final_activation=act)
        head = VariationalLinear.init(hidden[-1], K, rng, cfg.model.rho_init)
        return Classifier(net, head)
    return Classifier(Network.mlp([d_in] + hidden + [K], rng, act, n_head=1))


def build_paws_model(cfg, d_in, rng, bayes):
    hidden = cfg.hidden_sizes
    act = cfg.model.activation
    p = cfg.paws
    T_swa = p.T_swa if p.T_swa >= 0 else cfg.experiment.epochs // 2
    if bayes:
        if not hidden:
            raise ConfigurationError("a variational head needs at least one hidden layer")
        net = Network.mlp([d_in] + hidden, rng, act, n_head=0, final_activation=act)
        head = VariationalLinear.init(hidden[-1], cfg.model.embed_dim, rng, cfg.model.rho_init)
        return PawsModel(net, head, p.aggregation, T_swa)
    net = Network.mlp([d_in] + hidden + [cfg.model.embed_dim], rng, act, n_head=1)
    return PawsModel(net, None, p.aggregation, T_swa)


class _LabeledCycler:
    """Endless shuffled passes over the labeled set."""

    def __init__(self, n, rng):
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.order, self.pos = self.rng.permutation(self.n), 0
            j = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + j])
            self.pos += j
        return np.array(out, dtype=np.int64)


# ----------------------------------------------------------------------------- steps


@dataclass
class StepDetail:
    row: MetricsRow
    mask: np.ndarray
    pseudo_probs: np.ndarray
    true_labels: np.ndarray


def training_step_threshold(model, optimizers, split, lab_idx, unl_idx, preset, state, cfg,
                            rngs, *, step, epoch_pos, lr_scale):
    """One optimizer step of the (BAM-)threshold objective; returns the step's metrics."""
    weak, strong = ds.default_policies(**_aug_kwargs(cfg))
    ra = rngs["augment"]
    x_l = ds.augment(split.labeled_x[lab_idx], weak, ra)
    x_u = split.unlabeled_x[unl_idx]
    x_uw = ds.augment(x_u, weak, ra)
    x_us = ds.augment(x_u, strong if preset.augmentation == "asymmetric" else weak, ra)
    b = cfg.bam
    Q = q_warmup(epoch_pos, b.Q, b.q_start, b.q_warmup_epochs)
    kl_coef = kl_coefficient_schedule(epoch_pos, b.kl_ramp_epochs)
    floor = cfg.ssl.confidence_floor if cfg.ssl.confidence_floor >= 0 else None

    model.zero_grads()
    res = combined_step_loss(
        model, x_l, split.labeled_y[lab_idx], x_uw, x_us, preset,
        state=state, Q=Q, M=b.M, kl_coefficient=kl_coef,
        dataset_size=len(split.labeled_y) + len(split.unlabeled_y),
        rng=rngs["bnn"], confidence_floor=floor,
    )
    for opt in optimizers:
        opt.step(opt.lr * lr_scale)

    true = split.unlabeled_y[unl_idx]
    row = MetricsRow(
        step=step,
        epoch=int(epoch_pos) + 1,
        labeled_loss=res.labeled,
        unlabeled_loss=res.unlabeled,
        kl_loss=res.kl,
        accepted_fraction=float(res.mask.mean()),
        purity_rate=purity_rate(res.mask, res.pseudo_probs, true),
        mean_max_prob=mean_max_prob(res.pseudo_probs),
        threshold_value=res.threshold,
    )
    row.check_finite()
    return StepDetail(row, res.mask, res.pseudo_probs, true)


def training_step_paws(model, optimizer, split, unl_idx, cfg, rngs, *, step, epoch_pos, epoch,
                       lr_scale, update_aggregate=True):
    """One PAWS step: symmetric consistency + me-max, then the aggregate update."""
    p = cfg.paws
    _, strong = ds.default_policies(**_aug_kwargs(cfg))
    weak, _ = ds.default_policies(**_aug_kwargs(cfg))
    ra = rngs["augment"]
    x_u = split.unlabeled_x[unl_idx]
    x1 = ds.augment(x_u, strong, ra)
    x2 = ds.augment(x_u, strong, ra)
    sup = ds.class_balanced_support(split.labeled_y, p.support_per_class, split.K, rngs["sampler"])
    xs = ds.augment(split.labeled_x[sup], weak, ra)
    ys = one_hot(split.labeled_y[sup], split.K)
    kl_coef = kl_coefficient_schedule(epoch_pos, p.kl_ramp_epochs) if model.is_bayes else 0.0

    model.zero_grads()
    res = paws_step_loss(
        model, x1, x2, xs, ys, tau_p=p.tau_p, t=p.t, me_max_weight=p.me_max_weight,
        M=cfg.bam.M, kl_coefficient=kl_coef,
        dataset_size=len(split.labeled_y) + len(split.unlabeled_y), rng=rngs["bnn"],
    )
    optimizer.step(optimizer.lr * lr_scale)
    gamma = None
    if update_aggregate:
        if model.aggregate.mode == "ema":
            gamma = gamma_schedule(epoch_pos, cfg.experiment.epochs, p.gamma_schedule,
                                   p.gamma_max, p.gamma_warmup_epochs, p.gamma_start_gap)
        model.update_aggregate(epoch, gamma)

    n = len(unl_idx)
    pseudo = 0.5 * (res.targets[:n] + res.targets[n:])
    true = split.unlabeled_y[unl_idx]
    mask = np.ones(n, dtype=bool)
    row = MetricsRow(
        step=step,
        epoch=epoch + 1,
        unlabeled_loss=res.consistency + p.me_max_weight * res.me_max,
        kl_loss=res.kl,
        accepted_fraction=1.0,
        purity_rate=purity_rate(mask, pseudo, true),
        mean_max_prob=mean_max_prob(pseudo),
        threshold_value=gamma,
    )
    row.check_finite()
    return StepDetail(row, mask, pseudo, true)


def _aug_kwargs(cfg):
    a = cfg.augment
    return dict(weak_sigma=a.weak_sigma, strong_sigma=a.strong_sigma,
                scale_range=a.scale_range, dropout=a.dropout)


# ----------------------------------------------------------------------------- evaluation


def evaluate_threshold(model, split, cfg, rng):
    probs = model.predict_proba(split.test_x, cfg.bam.eval_M, rng)
    rep = ece(probs, split.test_y)
    return rep.accuracy, rep.ece


def paws_embed_eval(model, x, cfg, rng):
    if model.is_bayes:
        model.target.load_state(model.aggregate.theta_g)
        return bam_paws_embed(model.bayes, model.target.predict(x), cfg.bam.eval_M, rng)
    return model.target_embed(x)


def evaluate_paws(model, split, cfg, rng):
    """Soft-NN prediction from the aggregate encoder with the whole labeled set as support."""
    zs = paws_embed_eval(model, split.labeled_x, cfg, rng)
    zt = paws_embed_eval(model, split.test_x, cfg, rng)
    support = SupportSet(zs, one_hot(split.labeled_y, split.K), cfg.paws.tau_p)
    rep = ece(snn_classify(zt, support, allow_zero=True), split.test_y)
    return rep.accuracy, rep.ece


def epoch_row(step, epoch, details, acc, err):
    """Pool one epoch of step details into a single MetricsRow."""
    row = MetricsRow(step=step, epoch=epoch, test_accuracy=acc, test_ece=err)
    if details:
        n = len(details)
        row.labeled_loss = (
            math.fsum(d.row.labeled_loss for d in details) / n
            if details[0].row.labeled_loss is not None else None
        )
        row.unlabeled_loss = math.fsum(d.row.unlabeled_loss for d in details) / n
        row.kl_loss = math.fsum(d.row.kl_loss for d in details) / n
        mask = np.concatenate([d.mask for d in details])
        probs = np.concatenate([d.pseudo_probs for d in details])
        true = np.concatenate([d.true_labels for d in details])
        row.accepted_fraction = int(mask.sum()) / len(mask)
        row.purity_rate = purity_rate(mask, probs, true)
        row.mean_max_prob = mean_max_prob(probs)
        row.threshold_value = details[-1].row.threshold_value
    row.check_finite()
    return row


# ----------------------------------------------------------------------------- runs


def run_experiment(cfg, recorder=None, write=True):
    """Train the configured method end to end and write metrics + summary.

    ``recorder``, if given, is called with ``(epoch, StepDetail)`` after every
    training step (used to audit logged diagnostics).
    """
    cfg.validate()
    rngs = make_rngs(cfg.experiment.seed)
    split = build_split(cfg, rngs["data"])
    if len(split.unlabeled_y) == 0:
        raise ConfigurationError("split left no unlabeled data")
    method = cfg.experiment.method
    paws_family = method in ("PAWS", "BAM-PAWS")
    d_in = split.labeled_x.shape[1]
    epochs = cfg.experiment.epochs
    o = cfg.optim

    if paws_family:
        model = build_paws_model(cfg, d_in, rngs["init"], method == "BAM-PAWS")
        params = model.net.params() + (model.bayes.params() if model.is_bayes else [])
        optimizers = [SGD(params, o.lr, o.momentum, o.weight_decay, o.nesterov)]
        batch = cfg.paws.batch_size
        evaluate = lambda: evaluate_paws(model, split, cfg, rngs["eval"])  # noqa: E731
    else:
        preset = resolve_preset(cfg)
        model = build_classifier(cfg, d_in, split.K, rngs["init"], preset.bayes)
        if model.is_bayes:
            optimizers = [
                SGD(model.net.params(), o.lr, o.momentum, o.weight_decay, o.nesterov),
                Adam(model.bayes.params(), o.bayes_lr),
            ]
        else:
            optimizers = [SGD(model.net.params(), o.lr, o.momentum, o.weight_decay, o.nesterov)]
        state = SelectionState()
        batch = preset.mu * o.batch_size
        evaluate = lambda: evaluate_threshold(model, split, cfg, rngs["eval"])  # noqa: E731

    n_u = len(split.unlabeled_y)
    steps_per_epoch = math.ceil(n_u / batch)
    total_steps = epochs * steps_per_epoch
    labeled = _LabeledCycler(len(split.labeled_y), rngs["sampler"])

    acc, err = evaluate()
    rows = [epoch_row(0, 0, [], acc, err)]
    step = 0
    for epoch in range(epochs):
        order = rngs["sampler"].permutation(n_u)
        details = []
        for s in range(steps_per_epoch):
            unl_idx = order[np.arange(s * batch, (s + 1) * batch) % n_u]
            scale = cosine_lr(step, total_steps, 1.0) if o.schedule == "cosine" else 1.0
            epoch_pos = epoch + s / steps_per_epoch
            if paws_family:
                per_iter = cfg.paws.swa_update_every == "iteration" or model.aggregate.mode != "swa"
                last = s == steps_per_epoch - 1
                det = training_step_paws(
                    model, optimizers[0], split, unl_idx, cfg, rngs, step=step + 1,
                    epoch_pos=epoch_pos, epoch=epoch, lr_scale=scale,
                    update_aggregate=per_iter or last,
                )
            else:
                det = training_step_threshold(
                    model, optimizers, split, labeled.take(o.batch_size), unl_idx, preset,
                    state, cfg, rngs, step=step + 1, epoch_pos=epoch_pos, lr_scale=scale,
                )
            step += 1
            details.append(det)
            if recorder is not None:
                recorder(epoch + 1, det)
        if (epoch + 1) % cfg.experiment.eval_every == 0 or epoch + 1 == epochs:
            acc, err = evaluate()
        else:
            acc = err = None
        rows.append(epoch_row(step, epoch + 1, details, acc, err))
        log.debug("epoch %d acc=%s ece=%s", epoch + 1, acc, err)

    summary = {
        "method": method,
        "seed": cfg.experiment.seed,
        "epochs": epochs,
        "steps": step,
        "n_labeled": int(len(split.labeled_y)),
        "n_unlabeled": int(n_u),
        "n_test": int(len(split.test_y)),
        "final_accuracy": rows[-1].test_accuracy,
        "final_ece": rows[-1].test_ece,
        "convergence": report_from_rows(rows),
    }
    if not paws_family and model.is_bayes:
        summary["bound"] = asdict(bound_report(model, split, cfg, rngs["eval"]))

    if write:
        out = cfg.experiment.out_dir
        os.makedirs(out, exist_ok=True)
        summary["metrics_path"] = os.path.join(out, "metrics.csv")
        summary["summary_path"] = os.path.join(out, "summary.json")
        write_metrics(summary["metrics_path"], rows)
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(cfg.to_ini())
        with open(summary["summary_path"], "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    summary["rows"] = rows
    return summary


def bound_report(model, split, cfg, rng):
    """PAC-Bayes bound evaluated on the training pool with the hidden labels.

    The negative ELBO uses true labels over labeled + unlabeled data; the
    divergence term compares posterior-mean pseudo-labels with the true labels.
    """
    M = cfg.bam.eval_M
    x = np.concatenate([split.labeled_x, split.unlabeled_x])
    y = np.concatenate([split.labeled_y, split.unlabeled_y])
    v = model.embed(x)
    samples = np.stack([softmax(v @ w + b) for w, b, _ in
                        (model.bayes.sample(rng) for _ in range(M))])
    rows = np.arange(len(y))
    nll = -float(np.log(samples[:, rows, y]).sum(axis=1).mean())
    neg_elbo = nll + kl_to_prior(model.bayes)
    n_l = len(split.labeled_y)
    u = samples[:, n_l:, :]
    yhat = u.mean(axis=0).argmax(axis=1)
    ratio = pseudo_log_ratio(u, yhat, split.unlabeled_y)
    return pac_bayes_bound(neg_elbo, ratio, len(y), len(split.unlabeled_y),
                           cfg.bam.bound_delta, cfg.bam.bound_s2)
