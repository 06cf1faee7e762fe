"""Frozen-feature evaluation: kNN, linear probe, zero-shot, retrieval recall.

All evaluators are read-only over their inputs and deterministic; ties are
broken by documented rules so repeated runs agree exactly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import encoders
from .errors import InvalidConfigError

Array = np.ndarray

LAYER_TAGS = ("embedding", "penultimate")


@dataclass
class LabeledFeatureSet:
    """Feature matrix with class labels, tagged by which layer produced it."""

    features: Array
    labels: Array
    layer_tag: str = "embedding"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidConfigError("features must be (M, d) with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise InvalidConfigError("features must be finite")
        if np.any(self.labels < 0):
            raise InvalidConfigError("labels must be >= 0")
        if self.layer_tag not in LAYER_TAGS:
            raise InvalidConfigError(f"layer_tag must be one of {LAYER_TAGS}, got {self.layer_tag!r}")


@dataclass
class ProbeConfig:
    """Linear-probe training schedule: adaptive steps with 10x decay stops."""

    lr: float = 1e-3
    epochs: int = 30
    decay_every: int = 10
    decay_factor: float = 0.1
    standardize: bool = True
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidConfigError(f"probe lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise InvalidConfigError(f"probe epochs must be >= 1, got {self.epochs}")
        if self.decay_every < 1 or not 0 < self.decay_factor <= 1:
            raise InvalidConfigError("bad decay schedule")
        if self.batch_size < 1:
            raise InvalidConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def extract_features(params: encoders.EncoderParams, x: Array, layer_tag: str) -> Array:
    """Frozen features for a batch: the unit embedding, or the activations
    feeding the final linear layer (``penultimate``)."""
    if layer_tag not in LAYER_TAGS:
        raise InvalidConfigError(f"layer_tag must be one of {LAYER_TAGS}, got {layer_tag!r}")
    embeddings, cache = encoders.forward_batch(params, x)
    if layer_tag == "embedding":
        return embeddings
    return cache.activations[-2].copy()


def _cosine_rows(x: Array) -> Array:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norms, 1e-12)


def knn_classify(train: LabeledFeatureSet, queries: Array, k: int = 25) -> Array:
    """Majority vote among the k most cosine-similar training points.

    Vote ties are broken by summed similarity, then by lowest class id;
    similarity ties at the k-boundary are broken by training index.
    """
    queries = np.asarray(queries, dtype=float)
    m = train.features.shape[0]
    if m == 0:
        raise InvalidConfigError("training set is empty")
    if not 1 <= k <= m:
        raise InvalidConfigError(f"k={k} must be in [1, {m}]")
    if queries.ndim != 2 or queries.shape[1] != train.features.shape[1]:
        raise InvalidConfigError(
            f"queries have shape {queries.shape}, expected (*, {train.features.shape[1]})"
        )
    sims = _cosine_rows(queries) @ _cosine_rows(train.features).T
    n_classes = int(train.labels.max()) + 1
    predictions = np.empty(queries.shape[0], dtype=int)
    for q in range(queries.shape[0]):
        order = np.argsort(-sims[q], kind="stable")[:k]
        top_labels = train.labels[order]
        top_sims = sims[q][order]
        counts = np.bincount(top_labels, minlength=n_classes)
        sim_sums = np.bincount(top_labels, weights=top_sims, minlength=n_classes)
        best = np.flatnonzero(counts == counts.max())
        if best.size > 1:
            best = best[sim_sums[best] == sim_sums[best].max()]
        predictions[q] = int(best.min())
    return predictions


def linear_probe(train: LabeledFeatureSet, test: LabeledFeatureSet, cfg: ProbeConfig) -> float:
    """Fit one linear softmax layer on standardized frozen features.

    Per-dimension standardization uses train-split statistics only (the
    stand-in for a normalization layer); optimization is Adam at the
    configured decay schedule. Returns top-1 accuracy on the test split.
    """
    if train.features.shape[1] != test.features.shape[1]:
        raise InvalidConfigError("train and test feature dims differ")
    x_train, x_test = train.features, test.features
    if cfg.standardize:
        mean = x_train.mean(axis=0)
        var = x_train.var(axis=0)
        low = var < 1e-8
        if np.any(low):
            warnings.warn(f"{int(low.sum())} zero-variance feature dimensions clamped", stacklevel=2)
            var = np.where(low, 1e-8, var)
        scale = np.sqrt(var)
        x_train = (x_train - mean) / scale
        x_test = (x_test - mean) / scale

    n_classes = int(max(train.labels.max(), test.labels.max())) + 1
    d = x_train.shape[1]
    w = np.zeros((n_classes, d))
    b = np.zeros(n_classes)
    m_w = np.zeros_like(w)
    v_w = np.zeros_like(w)
    m_b = np.zeros_like(b)
    v_b = np.zeros_like(b)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    rng = np.random.default_rng(cfg.seed)
    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb = x_train[batch]
            yb = train.labels[batch]
            logits = xb @ w.T + b
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(batch.size), yb] -= 1.0
            probs /= batch.size
            g_w = probs.T @ xb
            g_b = probs.sum(axis=0)
            step += 1
            for g, mm, vv, p in ((g_w, m_w, v_w, w), (g_b, m_b, v_b, b)):
                mm *= beta1
                mm += (1 - beta1) * g
                vv *= beta2
                vv += (1 - beta2) * g * g
                m_hat = mm / (1 - beta1**step)
                v_hat = vv / (1 - beta2**step)
                p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    predictions = np.argmax(x_test @ w.T + b, axis=1)
    return float(np.mean(predictions == test.labels))


def zero_shot_classify(
    class_texts: Array,
    videos: Array,
    text_params: encoders.EncoderParams,
    visual_params: encoders.EncoderParams,
) -> Array:
    """Assign each video to the cosine-nearest embedded class prototype."""
    class_texts = np.asarray(class_texts, dtype=float)
    videos = np.asarray(videos, dtype=float)
    if class_texts.ndim != 2 or class_texts.shape[0] < 1:
        raise InvalidConfigError("need at least one class prototype")
    class_emb, _ = encoders.forward_batch(text_params, class_texts)
    video_emb, _ = encoders.forward_batch(visual_params, videos)
    sims = video_emb @ class_emb.T
    return np.argmax(sims, axis=1)


def retrieval_recall(f_v: Array, f_t: Array, ks: list[int]) -> dict[str, dict[int, float]]:
    """Bidirectional recall@k over index-paired embedding matrices.

    For each query, candidates from the other modality are ranked by cosine
    similarity with ties broken by index; recall@k is the fraction of queries
    whose true partner lands in the top k.
    """
    f_v = np.asarray(f_v, dtype=float)
    f_t = np.asarray(f_t, dtype=float)
    if f_v.shape != f_t.shape or f_v.ndim != 2:
        raise InvalidConfigError("embeddings must be (M, d) matrices paired by row")
    m = f_v.shape[0]
    for k in ks:
        if not 1 <= k <= m:
            raise InvalidConfigError(f"recall k={k} must be in [1, {m}]")
    sims = f_v @ f_t.T
    ranks_v2t = _partner_ranks(sims)
    ranks_t2v = _partner_ranks(sims.T)
    return {
        "v2t": {k: float(np.mean(ranks_v2t <= k)) for k in ks},
        "t2v": {k: float(np.mean(ranks_t2v <= k)) for k in ks},
    }


def _partner_ranks(sims: Array) -> Array:
    """Rank of the diagonal entry within each row (1-based, index tie-break)."""
    n = sims.shape[0]
    diag = np.diag(sims)
    higher = (sims > diag[:, None]).sum(axis=1)
    idx = np.arange(n)
    tied_before = ((sims == diag[:, None]) & (idx[None, :] < idx[:, None])).sum(axis=1)
    return higher + tied_before + 1
