"""Synthetic datasets, SSL splits, long-tailed curation, augmentations and CSV I/O."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InputError


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    class_names: list = field(default_factory=list)

    @property
    def K(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def __len__(self):
        return len(self.labels)


@dataclass
class DatasetSplit:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    unlabeled_y: np.ndarray  # hidden; diagnostics only
    test_x: np.ndarray
    test_y: np.ndarray
    K: int
    labeled_idx: np.ndarray = None
    unlabeled_idx: np.ndarray = None
    test_idx: np.ndarray = None

    @property
    def class_counts(self):
        return np.bincount(self.unlabeled_y, minlength=self.K)


def make_blobs(K=4, n_per_class=100, d=2, separation=3.0, seed=0, std=1.0):
    """Isotropic Gaussian classes with centres evenly spaced on a circle of radius ``separation``.

    For d > 2 the centres lie in the first two coordinates.
    """
    if K < 2 or n_per_class < 1 or d < 2:
        raise ConfigurationError("need K >= 2, n_per_class >= 1, d >= 2")
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(K) / K
    centres = np.zeros((K, d))
    centres[:, 0] = separation * np.cos(angles)
    centres[:, 1] = separation * np.sin(angles)
    labels = np.repeat(np.arange(K), n_per_class)
    inputs = centres[labels] + std * rng.standard_normal((K * n_per_class, d))
    return Dataset(inputs, labels)


def make_moons(n=200, noise=0.1, seed=0):
    """Two interleaving half circles, ``n // 2`` points each."""
    if n < 2:
        raise ConfigurationError("need n >= 2")
    rng = np.random.default_rng(seed)
    h = n // 2
    t0 = np.pi * rng.uniform(size=h)
    t1 = np.pi * rng.uniform(size=h)
    x0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    x1 = np.stack([1 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    inputs = np.concatenate([x0, x1]) + noise * rng.standard_normal((2 * h, 2))
    labels = np.repeat([0, 1], h)
    return Dataset(inputs, labels)


def split_ssl(dataset, labels_per_class=None, label_fraction=None, test_fraction=0.2, seed=0,
              test_per_class=None):
    """Stratified labeled/unlabeled/test split, deterministic in ``seed``.

    Per class: a ``test_fraction`` share (rounded), or exactly
    ``test_per_class`` samples, goes to test, then
    ``labels_per_class`` (or ``round(label_fraction * remaining)``, at least 1)
    is labeled, and the rest is unlabeled.
    """
    if (labels_per_class is None) == (label_fraction is None):
        raise ConfigurationError("give exactly one of labels_per_class / label_fraction")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    K = dataset.K
    lab, unl, tst = [], [], []
    for c in range(K):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        if test_per_class is not None:
            n_test = test_per_class
        else:
            n_test = int(round(test_fraction * len(idx)))
        if n_test > len(idx):
            raise ConfigurationError(f"class {c} has only {len(idx)} samples for {n_test} test points")
        rest = idx[n_test:]
        if labels_per_class is not None:
            n_lab = labels_per_class
        else:
            n_lab = max(1, int(round(label_fraction * len(rest))))
        if n_lab > len(rest) or n_lab < 1:
            raise ConfigurationError(f"class {c} has only {len(rest)} trainable samples for {n_lab} labels")
        tst.append(idx[:n_test])
        lab.append(rest[:n_lab])
        unl.append(rest[n_lab:])
    return _assemble(dataset, np.concatenate(lab), np.concatenate(unl), np.concatenate(tst), K)


def _assemble(dataset, lab, unl, tst, K):
    lab, unl, tst = (np.sort(a).astype(np.int64) for a in (lab, unl, tst))
    x, y = dataset.inputs, dataset.labels
    return DatasetSplit(x[lab], y[lab], x[unl], y[unl], x[tst], y[tst], K, lab, unl, tst)


def long_tail_counts(K, n_max, alpha):
    """Exponential profile ``n_i = round(n_max * alpha**(-i / (K-1)))``."""
    if K < 2:
        raise ConfigurationError("need K >= 2")
    if alpha < 1:
        raise ConfigurationError("imbalance ratio must be >= 1")
    return [int(round(n_max * alpha ** (-i / (K - 1)))) for i in range(K)]


def labeled_count(n_i, fraction=0.1):
    return max(1, int(round(fraction * n_i)))


def curate_long_tail(dataset, counts, seed=0, label_fraction=0.1, test_per_class=0):
    """Long-tailed split: class i gets exactly ``counts[i]`` unlabeled samples plus
    ``max(1, round(label_fraction * counts[i]))`` disjoint labeled ones.

    ``test_per_class`` samples per class are set aside first so the test set
    stays balanced.
    """
    K = len(counts)
    rng = np.random.default_rng(seed)
    lab, unl, tst = [], [], []
    for c, n_c in enumerate(counts):
        idx = np.flatnonzero(dataset.labels == c)
        n_l = labeled_count(n_c, label_fraction)
        need = test_per_class + n_l + n_c
        if len(idx) < need:
            raise ConfigurationError(f"class {c} has {len(idx)} samples, needs {need}")
        idx = idx[rng.permutation(len(idx))]
        tst.append(idx[:test_per_class])
        lab.append(idx[test_per_class:test_per_class + n_l])
        unl.append(idx[test_per_class + n_l:need])
    return _assemble(dataset, np.concatenate(lab), np.concatenate(unl), np.concatenate(tst), K)


@dataclass(frozen=True)
class AugmentPolicy:
    kind: str = "weak"
    noise_sigma: float = 0.05
    scale_range: float = 0.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise ConfigurationError(f"unknown augmentation kind {self.kind!r}")
        if self.noise_sigma < 0 or self.scale_range < 0 or not 0 <= self.dropout <= 1:
            raise ConfigurationError("invalid augmentation parameters")


def default_policies(weak_sigma=0.05, strong_sigma=0.2, scale_range=0.2, dropout=0.1):
    weak = AugmentPolicy("weak", weak_sigma)
    strong = AugmentPolicy("strong", strong_sigma, scale_range, dropout)
    if not weak.noise_sigma < strong.noise_sigma:
        raise ConfigurationError("weak noise must be strictly below strong noise")
    return weak, strong


def augment(inputs, policy, rng):
    """Gaussian jitter; strong policies then rescale features and drop some to zero."""
    x = np.asarray(inputs, dtype=np.float64)
    out = x.copy()
    if policy.noise_sigma > 0:
        out = out + policy.noise_sigma * rng.standard_normal(x.shape)
    if policy.kind == "strong":
        if policy.scale_range > 0:
            out = out * rng.uniform(1 - policy.scale_range, 1 + policy.scale_range, size=x.shape)
        if policy.dropout > 0:
            out = out * (rng.uniform(size=x.shape) >= policy.dropout)
    return out


def load_csv(path, label_column="label", normalize=False):
    """Numeric feature CSV with a header row and one label column (any text)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InputError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_column not in header:
        raise InputError(f"{path}: no label column {label_column!r} in header")
    li = header.index(label_column)
    feats, raw = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        vals = []
        for j, cell in enumerate(row):
            if j == li:
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise InputError(f"{path}: row {r} column {header[j]!r} is not numeric: {cell!r}") from None
        feats.append(vals)
        raw.append(row[li].strip())
    if not feats:
        raise InputError(f"{path}: no data rows")
    x = np.array(feats, dtype=np.float64)
    names = _ordered_labels(raw)
    lookup = {n: i for i, n in enumerate(names)}
    y = np.array([lookup[v] for v in raw], dtype=np.int64)
    if normalize:
        sd = x.std(axis=0)
        sd[sd == 0] = 1.0
        x = (x - x.mean(axis=0)) / sd
    return Dataset(x, y, names)


def _ordered_labels(raw):
    uniq = sorted(set(raw))
    try:
        # numeric labels sort numerically
        return sorted(uniq, key=float)
    except ValueError:
        return uniq


def write_split_csv(path, split, feature_names=None):
    """Export a split as CSV: features, ``label``, ``split`` in {labeled, unlabeled, test}."""
    d = split.labeled_x.shape[1] if len(split.labeled_x) else split.unlabeled_x.shape[1]
    names = feature_names or [f"x{i}" for i in range(d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names) + ["label", "split"])
        for tag, xs, ys in (
            ("labeled", split.labeled_x, split.labeled_y),
            ("unlabeled", split.unlabeled_x, split.unlabeled_y),
            ("test", split.test_x, split.test_y),
        ):
            for x, y in zip(xs, ys):
                w.writerow([repr(float(v)) for v in x] + [int(y), tag])


def read_split_csv(path):
    """Inverse of ``write_split_csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[-2:] != ["label", "split"]:
        raise InputError(f"{path}: expected trailing label,split columns")
    parts = {"labeled": ([], []), "unlabeled": ([], []), "test": ([], [])}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} is ragged")
        if row[-1] not in parts:
            raise InputError(f"{path}: row {r} has unknown split {row[-1]!r}")
        try:
            parts[row[-1]][0].append([float(v) for v in row[:-2]])
            parts[row[-1]][1].append(int(row[-2]))
        except ValueError:
            raise InputError(f"{path}: row {r} is not numeric") from None
    d = len(header) - 2
    arrs = {k: (np.array(x, dtype=np.float64).reshape(-1, d), np.array(y, dtype=np.int64))
            for k, (x, y) in parts.items()}
    K = int(max((a[1].max() for a in arrs.values() if len(a[1])), default=-1)) + 1
    return DatasetSplit(*arrs["labeled"], *arrs["unlabeled"], *arrs["test"], K)


def class_balanced_support(labels, per_class, K, rng):
    """Indices of ``per_class`` labeled samples per class, with replacement when scarce."""
    out = []
    for c in range(K):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            raise InputError(f"class {c} has no labeled sample")
        out.append(rng.choice(idx, size=per_class, replace=len(idx) < per_class))
    return np.concatenate(out)
