"""Training regimes for the small MLP backbone.

Three regimes share one weighted categorical cross-entropy loss and differ
only in targets, class weights, and how negative samples are handled:

* ``softmax``  -- K outputs, one-hot targets, negatives filtered out.
* ``garbage``  -- K+1 outputs, negatives become class K+1, class-balancing
  weights w_c = N / (C * N_c).
* ``eos``      -- K outputs, uniform targets 1/C on negative samples,
  unit weights everywhere (entropic open-set loss).

The backbone is a fully-connected ReLU network; the final layer is linear,
so logits are exactly `W phi + b` for the penultimate activations phi.
Training is plain mini-batch Adam, deterministic for a given seed, and the
final-epoch model is always returned (no validation-based selection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SeededRng, softmax
from .serialization import load_container, save_container

__all__ = [
    "REGIME_KINDS",
    "TrainingRegime",
    "BackboneModel",
    "one_hot_targets",
    "eos_targets",
    "garbage_class_weights",
    "batch_targets",
    "weighted_cce_loss",
    "regime_loss",
    "loss_gradient",
    "train",
    "extract",
    "save_backbone",
    "load_backbone",
]

REGIME_KINDS = ("softmax", "garbage", "eos")
LOG_EPS = 1e-12  # lower clamp inside the loss log


@dataclass
class TrainingRegime:
    """Regime choice plus optimizer hyperparameters."""

    kind: str
    hidden_sizes: tuple = (64, 64)
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValueError(f"unknown regime kind {self.kind!r}; expected one of {REGIME_KINDS}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if not self.hidden_sizes:
            raise ValueError("at least one hidden layer is required")


@dataclass
class BackboneModel:
    """MLP weights. `weights[i]` has shape (fan_in, fan_out); ReLU between
    hidden layers, no nonlinearity after the final layer."""

    weights: list
    biases: list
    n_known: int
    regime: str = "softmax"

    @property
    def n_outputs(self):
        return self.weights[-1].shape[1]

    @property
    def embedding_dim(self):
        return self.weights[-1].shape[0]

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    def forward(self, x):
        """Deep features (penultimate ReLU activations) and logits per row."""
        acts, logits = forward_caches(self, x)
        return acts[-1], logits

    def copy(self):
        return BackboneModel(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            n_known=self.n_known,
            regime=self.regime,
        )


def forward_caches(model, x):
    """All layer activations for backprop: returns (acts, logits) where
    acts[0] is the input and acts[-1] the embedding phi."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if a.shape[1] != model.input_dim:
        raise ValueError(f"input dim {a.shape[1]} != model dim {model.input_dim}")
    acts = [a]
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.maximum(a @ w + b, 0.0)
        acts.append(a)
    logits = a @ model.weights[-1] + model.biases[-1]
    return acts, logits


def backprop_hidden(model, acts, d_phi):
    """Gradients of the hidden layers given the gradient at the embedding.

    Returns (d_weights, d_biases) lists covering the hidden layers only
    (the final linear layer is handled by the caller).
    """
    d_ws = [None] * (len(model.weights) - 1)
    d_bs = [None] * (len(model.weights) - 1)
    grad = d_phi
    for i in range(len(model.weights) - 2, -1, -1):
        grad = grad * (acts[i + 1] > 0.0)
        d_ws[i] = acts[i].T @ grad
        d_bs[i] = grad.sum(axis=0)
        if i > 0:
            grad = grad @ model.weights[i].T
    return d_ws, d_bs


def one_hot_targets(label, n_outputs):
    """One-hot target vector for 1-based class `label` (1 <= label <= C)."""
    if not 1 <= label <= n_outputs:
        raise ValueError(f"label {label} out of range for {n_outputs} outputs")
    t = np.zeros(n_outputs, dtype=np.float64)
    t[label - 1] = 1.0
    return t


def eos_targets(n_outputs):
    """Uniform target vector 1/C used for negative samples under EOS."""
    if n_outputs < 1:
        raise ValueError("need at least one output")
    return np.full(n_outputs, 1.0 / n_outputs, dtype=np.float64)


def garbage_class_weights(counts):
    """Class-balancing weights w_c = N / (C * N_c) from per-class counts."""
    n_c = np.asarray(counts, dtype=np.float64)
    if n_c.ndim != 1 or n_c.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if np.any(n_c <= 0):
        raise ValueError("every class needs at least one sample")
    total = n_c.sum()
    return total / (n_c.size * n_c)


def batch_targets(kind, labels, n_outputs, n_known):
    """Per-sample target rows for a regime: one-hot for knowns, and for
    negatives either one-hot at K+1 (garbage) or uniform (eos)."""
    labels = np.asarray(labels)
    t = np.zeros((labels.size, n_outputs), dtype=np.float64)
    for i, tau in enumerate(labels):
        if tau <= n_known:
            t[i, tau - 1] = 1.0
        elif kind == "garbage":
            t[i, n_known] = 1.0
        elif kind == "eos":
            t[i, :] = 1.0 / n_outputs
        else:
            raise ValueError(f"regime {kind!r} cannot target label {tau} > K={n_known}")
    return t


def weighted_cce_loss(probs, targets, weights=None):
    """-(1/N) sum_n sum_c w_c t_nc log y_nc, with log clamped at 1e-12."""
    y = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    t = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if y.shape != t.shape:
        raise ValueError(f"shape mismatch: probs {y.shape} vs targets {t.shape}")
    row_sums = y.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("probability rows must sum to 1 (within 1e-6)")
    w = np.ones(y.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (y.shape[1],):
        raise ValueError(f"weights shape {w.shape} does not match {y.shape[1]} classes")
    return float(-(np.sum(w * t * np.log(np.maximum(y, LOG_EPS)))) / y.shape[0])


def _regime_setup(regime, labels, n_known):
    """Filtered index set, output count, and class weights for a regime."""
    labels = np.asarray(labels)
    if regime.kind == "softmax":
        keep = np.flatnonzero(labels <= n_known)
        n_outputs = n_known
        weights = np.ones(n_outputs)
    elif regime.kind == "garbage":
        keep = np.arange(labels.size)
        n_outputs = n_known + 1
        counts = np.array([np.sum(labels == c) for c in range(1, n_known + 1)]
                          + [np.sum(labels > n_known)], dtype=np.float64)
        if np.any(counts == 0):
            raise ValueError("garbage regime requires samples for every class incl. negatives")
        weights = garbage_class_weights(counts)
    else:  # eos
        keep = np.arange(labels.size)
        n_outputs = n_known
        weights = np.ones(n_outputs)
    return keep, n_outputs, weights


def _logit_gradient(y, targets, weights):
    # d loss / d z for softmax + weighted CCE, averaged over the batch
    s = targets @ weights  # per-row sum_c w_c t_nc
    return (y * s[:, None] - targets * weights[None, :]) / y.shape[0]


def regime_loss(model, x, labels, regime, n_known):
    """Weighted CCE of the model on a batch under the regime's targets."""
    keep, n_outputs, weights = _regime_setup(regime, labels, n_known)
    if keep.size == 0:
        raise ValueError("batch is empty after regime filtering")
    labels = np.asarray(labels)[keep]
    _, logits = forward_caches(model, np.atleast_2d(x)[keep])
    if logits.shape[1] != n_outputs:
        raise ValueError(f"model has {logits.shape[1]} outputs, regime needs {n_outputs}")
    t = batch_targets(regime.kind, labels, n_outputs, n_known)
    return weighted_cce_loss(softmax(logits), t, weights)


def loss_gradient(model, x, labels, regime, n_known):
    """Analytic parameter gradients of :func:`regime_loss`.

    Returns (d_weights, d_biases) lists aligned with the model layers. The
    gradient assumes probabilities above the loss's clamp epsilon.
    """
    keep, n_outputs, weights = _regime_setup(regime, labels, n_known)
    if keep.size == 0:
        raise ValueError("batch is empty after regime filtering")
    labels = np.asarray(labels)[keep]
    acts, logits = forward_caches(model, np.atleast_2d(x)[keep])
    if logits.shape[1] != n_outputs:
        raise ValueError(f"model has {logits.shape[1]} outputs, regime needs {n_outputs}")
    t = batch_targets(regime.kind, labels, n_outputs, n_known)
    d_z = _logit_gradient(softmax(logits), t, weights)
    d_w_last = acts[-1].T @ d_z
    d_b_last = d_z.sum(axis=0)
    d_phi = d_z @ model.weights[-1].T
    d_ws, d_bs = backprop_hidden(model, acts, d_phi)
    return d_ws + [d_w_last], d_bs + [d_b_last]


class Adam:
    """Textbook Adam state for a flat list of parameter arrays."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)


def init_backbone(rng, input_dim, hidden_sizes, n_outputs, n_known, regime_kind):
    """Fan-in-scaled Gaussian init: W ~ N(0, 1/sqrt(fan_in)), b = 0."""
    dims = [input_dim] + list(hidden_sizes) + [n_outputs]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return BackboneModel(weights=weights, biases=biases, n_known=n_known, regime=regime_kind)


def train(regime, x, labels, n_known, seed=None, categories=None):
    """Train a backbone under `regime`; deterministic for a given seed.

    `labels` follow the 1-based convention (tau <= K known, K+1 negative).
    Unknown-category samples must never reach training; if `categories` is
    given, their presence raises. The softmax regime silently filters
    negatives (documented behavior, not an error); garbage and eos require
    them. Returns the final-epoch model.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != labels.size:
        raise ValueError("x and labels disagree on sample count")
    if categories is not None and np.any(np.asarray(categories) == "unknown"):
        raise ValueError("unknown-category samples must not appear in training data")
    present = set(labels[labels <= n_known].tolist())
    missing = sorted(set(range(1, n_known + 1)) - present)
    if missing:
        raise ValueError(f"training data is missing known classes {missing}")
    if regime.kind in ("garbage", "eos") and not np.any(labels > n_known):
        raise ValueError(f"{regime.kind} regime requires negative samples")

    keep, n_outputs, weights = _regime_setup(regime, labels, n_known)
    x, labels = x[keep], labels[keep]
    n = x.shape[0]

    rng = SeededRng(regime.seed if seed is None else seed)
    model = init_backbone(rng, x.shape[1], regime.hidden_sizes, n_outputs, n_known, regime.kind)
    params = model.weights + model.biases
    opt = Adam(params, lr=regime.learning_rate)

    targets = batch_targets(regime.kind, labels, n_outputs, n_known)
    for _ in range(regime.epochs):
        order = rng.permutation(n)
        for start in range(0, n, regime.batch_size):
            idx = order[start:start + regime.batch_size]
            acts, logits = forward_caches(model, x[idx])
            d_z = _logit_gradient(softmax(logits), targets[idx], weights)
            d_w_last = acts[-1].T @ d_z
            d_b_last = d_z.sum(axis=0)
            d_phi = d_z @ model.weights[-1].T
            d_ws, d_bs = backprop_hidden(model, acts, d_phi)
            opt.step(params, d_ws + [d_w_last] + d_bs + [d_b_last])
    return model


def extract(model, x):
    """Deep features and logits for a batch; z = W phi + b holds exactly."""
    acts, logits = forward_caches(model, x)
    return acts[-1], logits


def save_backbone(model, path):
    """Checkpoint to the container format; round-trips bit-exactly."""
    arrays = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    meta = {"n_known": int(model.n_known), "regime": model.regime,
            "n_layers": len(model.weights)}
    save_container(path, "backbone", meta, arrays)


def load_backbone(path):
    kind, meta, arrays = load_container(path)
    if kind != "backbone":
        raise ValueError(f"{path}: expected a backbone checkpoint, found {kind!r}")
    n_layers = meta["n_layers"]
    return BackboneModel(
        weights=[arrays[f"w{i}"] for i in range(n_layers)],
        biases=[arrays[f"b{i}"] for i in range(n_layers)],
        n_known=int(meta["n_known"]),
        regime=meta["regime"],
    )
