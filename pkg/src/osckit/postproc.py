"""The five post-processing methods applied on top of trained backbones.

* MSS / MLS -- parameter-free thresholding baselines over softmax
  probabilities / raw logits.
* OpenMax   -- per-class mean activation vectors with Weibull models on the
  largest within-class cosine distances; revises the top-alpha logits and
  estimates an unknown logit.
* EVM       -- per-anchor Weibull models on the smallest between-class
  distances; probability of sample inclusion is the survival function,
  class score is the max over the class's anchors.
* PROSER    -- fine-tunes the backbone with manifold-mixed data
  placeholders and B dummy classifier vectors whose max acts as the
  unknown logit.

Every method returns exactly K known-class score columns: the probability
of the unknown class is never a column (for OpenMax and PROSER the unknown
logit still lowers the known probabilities through the shared softmax).
Scores from MSS, OpenMax, EVM, and PROSER live in [0, 1]; MLS scores are
raw logits and may be negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evt import HIGH, LOW, WeibullModel, weibull_fit
from .numerics import SeededRng, cosine_distance_matrix, sample_beta, softmax
from .serialization import load_container, save_container
from .training import Adam, BackboneModel, backprop_hidden, forward_caches

__all__ = [
    "ScoreMatrix",
    "MssModel",
    "MlsModel",
    "OpenMaxModel",
    "EvmModel",
    "ProserModel",
    "mss_scores",
    "mls_scores",
    "openmax_fit",
    "openmax_scores",
    "evm_fit",
    "evm_scores",
    "evm_reduce",
    "mixup_pairs",
    "proser_finetune",
    "proser_scores",
    "save_postproc_model",
    "load_postproc_model",
]


@dataclass
class ScoreMatrix:
    """Per-sample known-class scores with parallel label/category arrays."""

    scores: np.ndarray
    labels: np.ndarray
    categories: np.ndarray

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.categories = np.asarray(self.categories)
        if not (self.scores.shape[0] == self.labels.size == self.categories.size):
            raise ValueError("scores, labels, and categories disagree on sample count")

    @property
    def n_known(self):
        return self.scores.shape[1]

    def eval_view(self, category):
        """(scores, labels) of known samples plus one tau > K population.

        Keeps negative and unknown evaluations strictly separate.
        """
        if category not in ("negative", "unknown"):
            raise ValueError(f"evaluation category must be negative or unknown, got {category!r}")
        mask = (self.categories == "known") | (self.categories == category)
        return self.scores[mask], self.labels[mask]


@dataclass
class MssModel:
    n_known: int


@dataclass
class MlsModel:
    n_known: int


def _known_logits(logits, n_known):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if z.shape[1] not in (n_known, n_known + 1):
        raise ValueError(f"expected {n_known} or {n_known + 1} logit columns, got {z.shape[1]}")
    return z


def mss_scores(logits, n_known):
    """Softmax probabilities of the K known classes.

    For garbage-trained logits (K+1 columns) the softmax runs over all
    C columns first and the garbage column is dropped afterwards, so the
    returned rows sum to less than 1.
    """
    z = _known_logits(logits, n_known)
    return softmax(z, axis=1)[:, :n_known]


def mls_scores(logits, n_known):
    """Raw logits of the K known classes (garbage column dropped)."""
    z = _known_logits(logits, n_known)
    return z[:, :n_known].copy()


@dataclass
class OpenMaxModel:
    """Per-class MAVs and high-tail Weibull models, with the distance
    multiplier, revision count alpha, and requested tail size."""

    mavs: np.ndarray
    weibulls: list
    multiplier: float
    alpha: int
    tail_size: int

    @property
    def n_known(self):
        return self.mavs.shape[0]


def openmax_fit(features, logits, labels, tail_size, multiplier, alpha):
    """Fit MAVs and Weibull tails from correctly classified known samples.

    `logits` must carry exactly K known-class columns; a sample counts as
    correctly classified when the argmax over those columns matches its
    label. Each class needs at least two such samples. The requested tail
    size is clipped per class to the available distance count; the
    effective size is recorded on each Weibull model.
    """
    phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    n_known = z.shape[1]
    if not (phi.shape[0] == z.shape[0] == labels.size):
        raise ValueError("features, logits, and labels disagree on sample count")
    if np.any(labels < 1) or np.any(labels > n_known):
        raise ValueError("openmax_fit expects known-class labels 1..K only")
    if not 1 <= alpha <= n_known:
        raise ValueError(f"alpha must be in 1..K={n_known}, got {alpha}")
    if multiplier <= 0:
        raise ValueError("distance multiplier must be positive")
    if tail_size < 2:
        raise ValueError("tail size must be >= 2")

    predicted = np.argmax(z, axis=1) + 1
    mavs = np.zeros((n_known, phi.shape[1]))
    weibulls = []
    for c in range(1, n_known + 1):
        mask = (labels == c) & (predicted == c)
        count = int(mask.sum())
        if count < 2:
            raise ValueError(
                f"class {c} has {count} correctly classified samples; need at least 2"
            )
        mavs[c - 1] = phi[mask].mean(axis=0)
        dists = multiplier * cosine_distance_matrix(phi[mask], mavs[c - 1][None, :])[:, 0]
        weibulls.append(weibull_fit(dists, min(int(tail_size), dists.size), HIGH))
    return OpenMaxModel(mavs=mavs, weibulls=weibulls, multiplier=float(multiplier),
                        alpha=int(alpha), tail_size=int(tail_size))


def openmax_scores(model, features, logits):
    """Revised known-class probabilities under the OpenMax rule.

    Per sample: rank classes by logit descending; for rank i = 1..alpha the
    revision weight is CDF(Psi_c, kappa * (1 - cos(phi, mav_c))) scaled by
    (alpha - i + 1)/alpha; revised logits z*(1 - w) join an unknown logit
    sum(z * w); softmax over K+1 and the unknown column is dropped. A row
    whose revision weights are all zero carries no unknown mass (unknown
    logit -inf), so its output is exactly the plain softmax of its logits.
    """
    phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n_known = model.n_known
    if z.shape[1] != n_known:
        raise ValueError(f"expected {n_known} logit columns, got {z.shape[1]}")
    if model.alpha > n_known:
        raise ValueError("alpha exceeds the number of known classes")

    dists = model.multiplier * cosine_distance_matrix(phi, model.mavs)  # (N, K)
    shapes = np.array([w.shape for w in model.weibulls])
    scales = np.array([w.scale for w in model.weibulls])
    cdf = 1.0 - np.exp(-np.power(dists / scales[None, :], shapes[None, :]))

    alpha = model.alpha
    order = np.argsort(-z, axis=1, kind="stable")[:, :alpha]
    rows = np.arange(z.shape[0])[:, None]
    rank_weights = (alpha - np.arange(alpha)) / alpha
    omega = cdf[rows, order] * rank_weights[None, :]

    revised = z.copy()
    selected = z[rows, order]
    revised[rows, order] = selected * (1.0 - omega)
    unknown_logit = np.sum(selected * omega, axis=1)
    has_mass = np.any(omega > 0.0, axis=1)

    shift = np.maximum(revised.max(axis=1), np.where(has_mass, unknown_logit, -np.inf))
    exp_known = np.exp(revised - shift[:, None])
    exp_unknown = np.where(has_mass, np.exp(unknown_logit - shift), 0.0)
    return exp_known / (exp_known.sum(axis=1) + exp_unknown)[:, None]


@dataclass
class EvmModel:
    """Anchor features with per-anchor low-tail Weibull models fitted on
    between-class distances."""

    anchors: np.ndarray
    anchor_labels: np.ndarray
    weibulls: list
    multiplier: float
    tail_size: int
    cover_threshold: float = 1.0

    @property
    def n_known(self):
        return int(self.anchor_labels.max())


def evm_fit(features, labels, tail_size, multiplier):
    """Fit one Weibull per training sample on its smallest between-class
    distances (probability of sample exclusion; inclusion is the survival).

    Labels must cover 1..K contiguously with at least two classes. The
    pairwise distance computation is O(N^2).
    """
    phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if phi.shape[0] != labels.size:
        raise ValueError("features and labels disagree on sample count")
    present = sorted(set(labels.tolist()))
    if len(present) < 2:
        raise ValueError("EVM requires at least two classes")
    if present != list(range(1, len(present) + 1)):
        raise ValueError(f"EVM labels must cover 1..K contiguously, found {present}")
    if multiplier <= 0:
        raise ValueError("distance multiplier must be positive")
    if tail_size < 2:
        raise ValueError("tail size must be >= 2")

    dmat = multiplier * cosine_distance_matrix(phi, phi)
    weibulls = []
    for n in range(phi.shape[0]):
        others = labels != labels[n]
        dists = dmat[n, others]
        weibulls.append(weibull_fit(dists, min(int(tail_size), dists.size), LOW))
    return EvmModel(anchors=phi.copy(), anchor_labels=labels.copy(), weibulls=weibulls,
                    multiplier=float(multiplier), tail_size=int(tail_size))


def evm_scores(model, features):
    """Probability of sample inclusion per known class.

    p_c(phi) is the max over class-c anchors of the anchor's survival
    probability at kappa * (1 - cos(phi, anchor)). Columns are independent
    probabilities in [0, 1]; they are deliberately not normalized.
    """
    phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    dists = model.multiplier * cosine_distance_matrix(phi, model.anchors)
    shapes = np.array([w.shape for w in model.weibulls])
    scales = np.array([w.scale for w in model.weibulls])
    survival = np.exp(-np.power(dists / scales[None, :], shapes[None, :]))
    n_known = model.n_known
    out = np.zeros((phi.shape[0], n_known))
    for c in range(1, n_known + 1):
        cols = model.anchor_labels == c
        out[:, c - 1] = survival[:, cols].max(axis=1)
    return out


def evm_reduce(model, cover_threshold):
    """Greedy set-cover model reduction.

    An anchor covers a same-class sample when its inclusion probability for
    that sample is at least the cover threshold. Per class, anchors are
    kept greedily by uncovered-coverage count (ties to the lowest index)
    until every sample of the class is covered. The default pipeline never
    calls this (matching the evaluated configuration); it exists for the
    cover threshold in the model file format.
    """
    if not 0.0 < cover_threshold <= 1.0:
        raise ValueError(f"cover threshold must be in (0, 1], got {cover_threshold}")
    keep_global = []
    for c in range(1, model.n_known + 1):
        idx = np.flatnonzero(model.anchor_labels == c)
        anchors = model.anchors[idx]
        shapes = np.array([model.weibulls[i].shape for i in idx])
        scales = np.array([model.weibulls[i].scale for i in idx])
        dists = model.multiplier * cosine_distance_matrix(anchors, anchors)
        # [i, j]: inclusion probability of sample j under anchor i's model
        survival = np.exp(-np.power(dists / scales[:, None], shapes[:, None]))
        covers = survival >= cover_threshold
        uncovered = np.ones(idx.size, dtype=bool)
        while uncovered.any():
            gains = covers[:, uncovered].sum(axis=1)
            best = int(np.argmax(gains))
            if gains[best] == 0:  # cannot happen: self-coverage is 1 >= threshold
                raise RuntimeError("set cover stalled")
            keep_global.append(int(idx[best]))
            uncovered &= ~covers[best]
    keep_global = sorted(keep_global)
    return EvmModel(
        anchors=model.anchors[keep_global].copy(),
        anchor_labels=model.anchor_labels[keep_global].copy(),
        weibulls=[model.weibulls[i] for i in keep_global],
        multiplier=model.multiplier,
        tail_size=model.tail_size,
        cover_threshold=float(cover_threshold),
    )


@dataclass
class ProserModel:
    """Fine-tuned backbone plus B dummy classifier vectors; the max dummy
    response acts as the unknown logit."""

    backbone: BackboneModel
    dummy_weights: np.ndarray
    dummy_bias: float
    beta_params: tuple
    n_known: int

    @property
    def n_dummies(self):
        return self.dummy_weights.shape[0]

    def logits_from_embedding(self, phi):
        """K known logits plus the max-dummy unknown logit, shape (N, K+1)."""
        phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
        w_last = self.backbone.weights[-1][:, :self.n_known]
        b_last = self.backbone.biases[-1][:self.n_known]
        z_known = phi @ w_last + b_last
        z_dummy = (phi @ self.dummy_weights.T).max(axis=1) + self.dummy_bias
        return np.concatenate([z_known, z_dummy[:, None]], axis=1)


def mixup_pairs(rng, features, labels, beta_params=(1.0, 1.0)):
    """Cross-class manifold mix-up: beta * phi_i + (1 - beta) * phi_j.

    Pairs come from a permutation, resampled until the two classes differ
    (up to 100 retries; still-same-class pairs are dropped, which only
    happens in near-single-class batches). Returns (mixed, i, j, betas).
    """
    phi = np.atleast_2d(np.asarray(features, dtype=np.float64))
    labels = np.asarray(labels)
    m = phi.shape[0]
    if np.unique(labels).size < 2:
        raise ValueError("mix-up requires at least two classes")
    partner = rng.permutation(m)
    same = labels == labels[partner]
    for _ in range(100):
        if not same.any():
            break
        partner[same] = rng.integers(0, m, size=int(same.sum()))
        same = labels == labels[partner]
    keep = ~same
    i_idx = np.flatnonzero(keep)
    j_idx = partner[keep]
    betas = np.asarray(sample_beta(rng, beta_params[0], beta_params[1], size=i_idx.size))
    mixed = betas[:, None] * phi[i_idx] + (1.0 - betas[:, None]) * phi[j_idx]
    return mixed, i_idx, j_idx, betas


def proser_finetune(base, x, labels, n_known, n_dummies, epochs=20, seed=0,
                    beta_params=(1.0, 1.0), learning_rate=1e-3, batch_size=32,
                    mask_term_weight=1.0):
    """Fine-tune the whole network with data and classifier placeholders.

    Two loss terms, weighted 1:mask_term_weight:

    1. cross-entropy over K+1 outputs on known samples (true class) and on
       embedding-level cross-class mixes targeting class K+1;
    2. on known samples, cross-entropy with the true-class logit excluded,
       targeting class K+1 -- this pushes the dummy logit toward being the
       second-highest.

    Only known-class samples are accepted. Deterministic for a given seed.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] != labels.size:
        raise ValueError("x and labels disagree on sample count")
    if np.any(labels > n_known) or np.any(labels < 1):
        raise ValueError("proser_finetune accepts known-class samples only")
    if np.unique(labels).size < 2:
        raise ValueError("PROSER needs at least two known classes for mix-up")
    if n_dummies < 1:
        raise ValueError("need at least one dummy classifier")
    if base.n_known != n_known:
        raise ValueError(f"backbone was trained with K={base.n_known}, got n_known={n_known}")

    model = base.copy()
    rng = SeededRng(seed)
    emb_dim = model.embedding_dim
    dummy_w = rng.normal(0.0, 1.0 / np.sqrt(emb_dim), (int(n_dummies), emb_dim))
    dummy_b = np.zeros(1)
    params = model.weights + model.biases + [dummy_w, dummy_b]
    opt = Adam(params, lr=learning_rate)
    k = n_known
    n = x.shape[0]

    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb, yb = x[idx], labels[idx]
            m = xb.shape[0]
            acts, logits_full = forward_caches(model, xb)
            phi = acts[-1]
            z_known = logits_full[:, :k]
            dummy_resp = phi @ dummy_w.T
            b_star = np.argmax(dummy_resp, axis=1)
            z_dummy = dummy_resp[np.arange(m), b_star] + dummy_b[0]

            if np.unique(yb).size >= 2:
                mixed, i_idx, j_idx, betas = mixup_pairs(rng, phi, yb, beta_params)
            else:
                mixed = np.zeros((0, emb_dim))
                i_idx = j_idx = np.zeros(0, dtype=np.int64)
                betas = np.zeros(0)
            p = mixed.shape[0]
            zm_known = mixed @ model.weights[-1][:, :k] + model.biases[-1][:k]
            dummy_resp_m = mixed @ dummy_w.T
            bm_star = np.argmax(dummy_resp_m, axis=1) if p else np.zeros(0, dtype=np.int64)
            zm_dummy = (dummy_resp_m[np.arange(p), bm_star] + dummy_b[0]) if p else np.zeros(0)

            # term 1: knowns -> true class, placeholders -> class K+1
            z1 = np.concatenate([
                np.concatenate([z_known, z_dummy[:, None]], axis=1),
                np.concatenate([zm_known, zm_dummy[:, None]], axis=1),
            ], axis=0)
            t1 = np.zeros((m + p, k + 1))
            t1[np.arange(m), yb - 1] = 1.0
            t1[m:, k] = 1.0
            d_z1 = (softmax(z1, axis=1) - t1) / (m + p)

            # term 2: true-class logit excluded, dummy is the target
            z2 = np.concatenate([z_known, z_dummy[:, None]], axis=1)
            masked = z2.copy()
            masked[np.arange(m), yb - 1] = -np.inf
            exp2 = np.exp(z2 - masked.max(axis=1, keepdims=True))
            exp2[np.arange(m), yb - 1] = 0.0
            y2 = exp2 / exp2.sum(axis=1, keepdims=True)
            t2 = np.zeros((m, k + 1))
            t2[:, k] = 1.0
            d_z2 = mask_term_weight * (y2 - t2) / m

            d_zk = d_z1[:m] + d_z2
            d_zp = d_z1[m:]

            d_w_last = np.zeros_like(model.weights[-1])
            d_b_last = np.zeros_like(model.biases[-1])
            d_w_last[:, :k] = phi.T @ d_zk[:, :k] + mixed.T @ d_zp[:, :k]
            d_b_last[:k] = d_zk[:, :k].sum(axis=0) + d_zp[:, :k].sum(axis=0)

            d_dummy_w = np.zeros_like(dummy_w)
            np.add.at(d_dummy_w, b_star, d_zk[:, k][:, None] * phi)
            if p:
                np.add.at(d_dummy_w, bm_star, d_zp[:, k][:, None] * mixed)
            d_dummy_b = np.array([d_zk[:, k].sum() + d_zp[:, k].sum()])

            d_phi = d_zk[:, :k] @ model.weights[-1][:, :k].T + d_zk[:, k][:, None] * dummy_w[b_star]
            if p:
                d_mixed = d_zp[:, :k] @ model.weights[-1][:, :k].T + d_zp[:, k][:, None] * dummy_w[bm_star]
                np.add.at(d_phi, i_idx, betas[:, None] * d_mixed)
                np.add.at(d_phi, j_idx, (1.0 - betas)[:, None] * d_mixed)

            d_ws, d_bs = backprop_hidden(model, acts, d_phi)
            opt.step(params, d_ws + [d_w_last] + d_bs + [d_b_last] + [d_dummy_w, d_dummy_b])

    return ProserModel(backbone=model, dummy_weights=dummy_w, dummy_bias=float(dummy_b[0]),
                       beta_params=tuple(beta_params), n_known=n_known)


def proser_scores(model, x):
    """Known-class probabilities from the fine-tuned network (softmax over
    K+1 logits including the max-dummy; unknown column dropped)."""
    acts, _ = forward_caches(model.backbone, x)
    full = model.logits_from_embedding(acts[-1])
    return softmax(full, axis=1)[:, :model.n_known]


def _weibull_arrays(weibulls):
    return (np.array([w.shape for w in weibulls], dtype=np.float64),
            np.array([w.scale for w in weibulls], dtype=np.float64),
            np.array([w.tail_size for w in weibulls], dtype=np.int64))


def _weibull_list(shapes, scales, tail_sizes, tail):
    return [WeibullModel(shape=float(k), scale=float(s), tail=tail, tail_size=int(t))
            for k, s, t in zip(shapes, scales, tail_sizes)]


def save_postproc_model(model, path):
    """Serialize any post-processor model to the container format."""
    if isinstance(model, MssModel):
        save_container(path, "mss", {"n_known": model.n_known}, {})
    elif isinstance(model, MlsModel):
        save_container(path, "mls", {"n_known": model.n_known}, {})
    elif isinstance(model, OpenMaxModel):
        k, s, t = _weibull_arrays(model.weibulls)
        save_container(path, "openmax",
                       {"multiplier": model.multiplier, "alpha": model.alpha,
                        "tail_size": model.tail_size, "tail": HIGH},
                       {"mavs": model.mavs, "wb_shape": k, "wb_scale": s, "wb_tail_size": t})
    elif isinstance(model, EvmModel):
        k, s, t = _weibull_arrays(model.weibulls)
        save_container(path, "evm",
                       {"multiplier": model.multiplier, "tail_size": model.tail_size,
                        "cover_threshold": model.cover_threshold, "tail": LOW},
                       {"anchors": model.anchors, "anchor_labels": model.anchor_labels,
                        "wb_shape": k, "wb_scale": s, "wb_tail_size": t})
    elif isinstance(model, ProserModel):
        arrays = {}
        for i, (w, b) in enumerate(zip(model.backbone.weights, model.backbone.biases)):
            arrays[f"w{i}"] = w
            arrays[f"b{i}"] = b
        arrays["dummy_w"] = model.dummy_weights
        arrays["dummy_b"] = np.array([model.dummy_bias])
        meta = {"n_known": model.n_known, "beta_params": list(model.beta_params),
                "n_layers": len(model.backbone.weights),
                "backbone_regime": model.backbone.regime}
        save_container(path, "proser", meta, arrays)
    else:
        raise TypeError(f"unknown post-processor model type {type(model).__name__}")


def load_postproc_model(path):
    kind, meta, arrays = load_container(path)
    if kind == "mss":
        return MssModel(n_known=int(meta["n_known"]))
    if kind == "mls":
        return MlsModel(n_known=int(meta["n_known"]))
    if kind == "openmax":
        weibulls = _weibull_list(arrays["wb_shape"], arrays["wb_scale"],
                                 arrays["wb_tail_size"], meta["tail"])
        return OpenMaxModel(mavs=arrays["mavs"], weibulls=weibulls,
                            multiplier=float(meta["multiplier"]),
                            alpha=int(meta["alpha"]), tail_size=int(meta["tail_size"]))
    if kind == "evm":
        weibulls = _weibull_list(arrays["wb_shape"], arrays["wb_scale"],
                                 arrays["wb_tail_size"], meta["tail"])
        return EvmModel(anchors=arrays["anchors"], anchor_labels=arrays["anchor_labels"],
                        weibulls=weibulls, multiplier=float(meta["multiplier"]),
                        tail_size=int(meta["tail_size"]),
                        cover_threshold=float(meta["cover_threshold"]))
    if kind == "proser":
        n_layers = meta["n_layers"]
        backbone = BackboneModel(
            weights=[arrays[f"w{i}"] for i in range(n_layers)],
            biases=[arrays[f"b{i}"] for i in range(n_layers)],
            n_known=int(meta["n_known"]),
            regime=meta["backbone_regime"],
        )
        return ProserModel(backbone=backbone, dummy_weights=arrays["dummy_w"],
                           dummy_bias=float(arrays["dummy_b"][0]),
                           beta_params=tuple(meta["beta_params"]),
                           n_known=int(meta["n_known"]))
    raise ValueError(f"{path}: unknown model kind {kind!r}")
