"""Small dense-network engine: MLP forward/backward, losses, optimizers, schedules.

Everything is float64 numpy. Layers are plain affine maps followed by an
elementwise activation; the network caches activations on ``forward`` so a
later ``backward`` can accumulate parameter gradients.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, StateError

ACTIVATIONS = ("relu", "tanh", "identity")


class ParamTensor:
    """A trainable array with a gradient buffer of the same shape."""

    def __init__(self, value, name: str = "", decay: bool = True):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.shape})"


def _activate(kind, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    return x


def _activate_grad(kind, pre, post, upstream):
    if kind == "relu":
        return upstream * (pre > 0)
    if kind == "tanh":
        return upstream * (1.0 - post**2)
    return upstream


class Dense:
    """Affine layer ``y = act(x @ W + b)`` with W of shape (in, out)."""

    def __init__(self, weight, bias, activation="identity", name="dense"):
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}")
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ConfigurationError(
                f"{name}: weight {weight.shape} and bias {bias.shape} disagree"
            )
        self.weight = ParamTensor(weight, f"{name}.weight")
        self.bias = ParamTensor(bias, f"{name}.bias", decay=False)
        self.activation = activation
        self.name = name

    @classmethod
    def init(cls, n_in, n_out, rng, activation="identity", name="dense"):
        # He-style uniform fan-in scaling
        bound = math.sqrt(6.0 / n_in) if activation == "relu" else math.sqrt(3.0 / n_in)
        w = rng.uniform(-bound, bound, size=(n_in, n_out))
        return cls(w, np.zeros(n_out), activation, name)

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def params(self):
        return [self.weight, self.bias]

    def forward(self, x):
        pre = x @ self.weight.value + self.bias.value
        return pre, _activate(self.activation, pre)

    def backward(self, x, pre, post, upstream):
        g = _activate_grad(self.activation, pre, post, upstream)
        self.weight.grad += x.T @ g
        self.bias.grad += g.sum(axis=0)
        return g @ self.weight.value.T


class Network:
    """Sequential MLP whose layers are split into ``backbone`` and ``head`` groups.

    The last ``n_head`` layers form the head; a network with ``n_head=0`` is a
    pure encoder (used as the backbone in front of a variational head).
    """

    def __init__(self, layers, n_head=1):
        if not layers:
            raise ConfigurationError("network needs at least one layer")
        for a, b in zip(layers[:-1], layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigurationError(
                    f"layer {a.name} outputs {a.out_dim} but {b.name} expects {b.in_dim}"
                )
        if not 0 <= n_head <= len(layers):
            raise ConfigurationError(f"n_head={n_head} out of range")
        self.layers = list(layers)
        split = len(layers) - n_head
        self.groups = {
            "backbone": [p for layer in layers[:split] for p in layer.params()],
            "head": [p for layer in layers[split:] for p in layer.params()],
        }
        self._cache = None

    @classmethod
    def mlp(cls, sizes, rng, activation="relu", n_head=1, final_activation="identity"):
        """Build an MLP with layer widths ``sizes`` (input first, output last)."""
        if len(sizes) < 2:
            raise ConfigurationError("sizes must list input and output widths")
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = activation if i < len(sizes) - 2 else final_activation
            layers.append(Dense.init(a, b, rng, act, name=f"layer{i}"))
        return cls(layers, n_head=n_head)

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def params(self):
        return self.groups["backbone"] + self.groups["head"]

    def zero_grads(self):
        for p in self.params():
            p.zero_grad()

    def _run(self, inputs):
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"input shape {x.shape} incompatible with in-dim {self.in_dim}"
            )
        trace = []
        for layer in self.layers:
            pre, post = layer.forward(x)
            trace.append((x, pre, post))
            x = post
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("non-finite network output")
        return x, trace

    def forward(self, inputs):
        """Evaluate and keep activations for ``backward``. Returns (activations, logits)."""
        out, trace = self._run(inputs)
        self._cache = trace
        return [post for _, _, post in trace], out

    def predict(self, inputs):
        """Evaluate without recording anything; the result carries no gradient."""
        return self._run(inputs)[0]

    def backward(self, upstream):
        """Accumulate parameter grads for d(loss)/d(output) = ``upstream``.

        Returns the gradient with respect to the network input.
        """
        if self._cache is None:
            raise StateError("backward called before forward")
        g = np.asarray(upstream, dtype=np.float64)
        if g.shape != self._cache[-1][2].shape:
            raise ConfigurationError(
                f"upstream shape {g.shape} does not match output {self._cache[-1][2].shape}"
            )
        for layer, (x, pre, post) in zip(reversed(self.layers), reversed(self._cache)):
            g = layer.backward(x, pre, post, g)
        return g

    def state(self):
        """Copies of all parameter values, in ``params()`` order."""
        return [p.value.copy() for p in self.params()]

    def load_state(self, values):
        params = self.params()
        if len(values) != len(params):
            raise ConfigurationError("state length mismatch")
        for p, v in zip(params, values):
            if p.value.shape != np.shape(v):
                raise ConfigurationError(f"shape mismatch for {p.name}")
            p.value[...] = v

    def clone(self):
        layers = [
            Dense(l.weight.value.copy(), l.bias.value.copy(), l.activation, l.name)
            for l in self.layers
        ]
        return Network(layers, n_head=len(self.groups["head"]) // 2)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def as_distribution_targets(targets, n, k):
    """Turn hard labels or soft rows into an (n, k) target matrix."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ConfigurationError(f"{t.shape[0]} labels for {n} rows")
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise ConfigurationError("hard labels must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ConfigurationError(f"hard label outside [0, {k})")
        out = np.zeros((n, k))
        out[np.arange(n), t] = 1.0
        return out
    t = t.astype(np.float64)
    if t.shape != (n, k):
        raise ConfigurationError(f"soft targets {t.shape} do not match logits {(n, k)}")
    if n and np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-9:
        raise ConfigurationError("soft target rows must sum to 1")
    return t


def softmax_cross_entropy(logits, targets, weights=None, denom=None):
    """Mean cross-entropy of softmax(logits) against hard or soft targets.

    ``weights`` optionally masks rows; ``denom`` overrides the divisor (default n).
    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n, k = logits.shape
    t = as_distribution_targets(targets, n, k)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    d = n if denom is None else denom
    if d == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    per_row = -(t * logp).sum(axis=1)
    loss = float((w * per_row).sum() / d)
    grad = (np.exp(logp) - t) * (w / d)[:, None]
    return max(loss, 0.0), grad


def stop_gradient(values):
    """Detached copy: same numbers, no link back to any cached forward pass."""
    return np.array(values, dtype=np.float64, copy=True)


class SGD:
    """SGD with (optionally Nesterov) momentum and decoupled-from-bias weight decay."""

    def __init__(self, params, lr, momentum=0.0, weight_decay=0.0, nesterov=False):
        if lr <= 0:
            raise ConfigurationError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            if self.momentum:
                v *= self.momentum
                v += g
                g = g + self.momentum * v if self.nesterov else v
            p.value -= lr * g


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ConfigurationError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad**2
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0, state=None):
    """Functional single SGD update; ``state`` is the momentum buffer list (created if None)."""
    opt = SGD(params, lr, momentum=momentum, weight_decay=weight_decay)
    if state is not None:
        opt.velocity = state
    opt.step()
    return opt.velocity


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
    """Functional Adam update. ``state`` is a previous return value or None."""
    opt = Adam(params, lr, beta1, beta2, eps)
    if state is not None:
        opt.m, opt.v, opt.t = state
    opt.step()
    return opt.m, opt.v, opt.t


def cosine_lr(step, total_steps, base_lr):
    """Half-cosine decay from ``base_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))
