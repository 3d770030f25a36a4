"""Built-in trainable model: hashed n-gram features with a linear head.

Multiclass heads use a softmax over labels; multilabel heads use one
independent logistic output per label. Optimization is plain Adam with bias
correction, implemented as a pure function so training stays replayable.

The feature hash is pinned to blake2b with an 8-byte digest (big-endian)
reduced mod hash_dim; changing it silently would invalidate every saved model,
so it is part of the on-disk format.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from hashlib import blake2b
from pathlib import Path

import numpy as np
from scipy import sparse

from .corpus import Dataset, LabelKind, LabelSpace, Subtask
from .errors import FormatError, NumericError, ValidationError

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)
_NGRAM_SEP = "\x1f"
MODEL_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeaturizerConfig:
    hash_dim: int = 2**20
    ngram_min: int = 1
    ngram_max: int = 2
    lowercase: bool = True
    max_tokens: int = 512

    def __post_init__(self):
        if self.hash_dim < 2**10 or self.hash_dim & (self.hash_dim - 1):
            raise ValidationError(
                f"hash_dim must be a power of two >= 1024, got {self.hash_dim}"
            )
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise ValidationError(
                f"empty n-gram range {self.ngram_min}..{self.ngram_max}"
            )
        if self.max_tokens < 1:
            raise ValidationError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    k_seeds: int = 10
    max_seq_len: int = 512
    batch_size: int = 4
    # 2e-5 suits transformer fine-tuning; a linear head this small needs a
    # far larger step to converge within the same epoch budget.
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "k_seeds", "max_seq_len", "batch_size"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.adam_epsilon <= 0:
            raise ValidationError("adam_epsilon must be positive")


@dataclass(frozen=True, eq=False)
class LinearModel:
    kind: LabelKind
    weights: np.ndarray  # |labels| x hash_dim
    bias: np.ndarray  # |labels|
    label_space: LabelSpace
    featurizer: FeaturizerConfig
    threshold: float = 0.5

    def __post_init__(self):
        n_labels = len(self.label_space.labels)
        if self.weights.shape != (n_labels, self.featurizer.hash_dim):
            raise ValidationError(
                f"weights shape {self.weights.shape} does not match "
                f"{n_labels} labels x hash_dim {self.featurizer.hash_dim}"
            )
        if self.bias.shape != (n_labels,):
            raise ValidationError(f"bias shape {self.bias.shape} != ({n_labels},)")
        if not (np.isfinite(self.weights).all() and np.isfinite(self.bias).all()):
            raise ValidationError("model parameters must be finite")
        if not 0 < self.threshold < 1:
            raise ValidationError(f"threshold must be in (0,1), got {self.threshold}")
        if self.kind is not self.label_space.kind:
            raise ValidationError(
                f"model kind {self.kind.value} != label space kind "
                f"{self.label_space.kind.value}"
            )

    def equals(self, other: "LinearModel") -> bool:
        return (
            self.kind is other.kind
            and self.label_space == other.label_space
            and self.featurizer == other.featurizer
            and self.threshold == other.threshold
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass(frozen=True, eq=False)
class AdamState:
    step: int
    first_moment: tuple[np.ndarray, ...]
    second_moment: tuple[np.ndarray, ...]

    def __post_init__(self):
        if self.step < 0:
            raise ValidationError("step must be >= 0")
        if any((v < 0).any() for v in self.second_moment):
            raise ValidationError("second moment must be elementwise >= 0")


def adam_init(params: tuple[np.ndarray, ...]) -> AdamState:
    return AdamState(
        step=0,
        first_moment=tuple(np.zeros_like(p) for p in params),
        second_moment=tuple(np.zeros_like(p) for p in params),
    )


def tokenize(text: str, cfg: FeaturizerConfig) -> list[str]:
    """Unicode word tokens, optionally lowercased, truncated to max_tokens."""
    if cfg.lowercase:
        text = text.lower()
    return _TOKEN_RE.findall(text)[: cfg.max_tokens]


def _hash_ngram(ngram: str, hash_dim: int) -> int:
    digest = blake2b(ngram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % hash_dim


def featurize(tokens: list[str], cfg: FeaturizerConfig) -> sparse.csr_matrix:
    """One L2-normalized hashed n-gram count row; empty input → zero row."""
    return featurize_batch([tokens], cfg)


def featurize_batch(
    token_lists: list[list[str]], cfg: FeaturizerConfig
) -> sparse.csr_matrix:
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    for tokens in token_lists:
        counts: dict[int, int] = {}
        for n in range(cfg.ngram_min, cfg.ngram_max + 1):
            for start in range(len(tokens) - n + 1):
                key = _hash_ngram(_NGRAM_SEP.join(tokens[start : start + n]), cfg.hash_dim)
                counts[key] = counts.get(key, 0) + 1
        if counts:
            norm = np.sqrt(sum(c * c for c in counts.values()))
            for key in sorted(counts):
                indices.append(key)
                values.append(counts[key] / norm)
        indptr.append(len(indices))
    return sparse.csr_matrix(
        (np.asarray(values), np.asarray(indices, dtype=np.int64), indptr),
        shape=(len(token_lists), cfg.hash_dim),
    )


def featurize_texts(texts: list[str], cfg: FeaturizerConfig) -> sparse.csr_matrix:
    return featurize_batch([tokenize(t, cfg) for t in texts], cfg)


def encode_labels(dataset: Dataset) -> np.ndarray:
    """Multiclass → int index vector; multilabel → 0/1 matrix n x |labels|."""
    space = dataset.label_space
    if space.kind is LabelKind.MULTICLASS:
        return np.asarray(
            [space.index(next(iter(inst.labels))) for inst in dataset.instances],
            dtype=np.int64,
        )
    out = np.zeros((len(dataset.instances), len(space.labels)))
    for row, inst in enumerate(dataset.instances):
        for label in inst.labels:
            out[row, space.index(label)] = 1.0
    return out


def _logits(model: LinearModel, features: sparse.csr_matrix) -> np.ndarray:
    return features @ model.weights.T + model.bias


def loss_and_gradient(
    model: LinearModel, batch: tuple[sparse.csr_matrix, np.ndarray]
) -> tuple[float, tuple[np.ndarray, np.ndarray]]:
    """Mean loss over the batch and its analytic gradient (d_weights, d_bias).

    Multiclass: softmax cross-entropy per instance. Multilabel: per-instance
    loss is the sum over labels of binary cross-entropy, so an all-zero model
    scores |labels|·ln 2 per instance.
    """
    features, targets = batch
    n = features.shape[0]
    if n == 0:
        raise ValidationError("empty batch")
    z = _logits(model, features)
    if model.kind is LabelKind.MULTICLASS:
        shifted = z - z.max(axis=1, keepdims=True)
        log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_probs = shifted - log_norm
        loss = -log_probs[np.arange(n), targets].mean()
        d_logits = np.exp(log_probs)
        d_logits[np.arange(n), targets] -= 1.0
        d_logits /= n
    else:
        # binary cross-entropy via softplus keeps large logits finite
        loss = (np.logaddexp(0.0, z) - targets * z).sum(axis=1).mean()
        d_logits = (_sigmoid(z) - targets) / n
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    d_weights = (features.T @ d_logits).T
    d_bias = d_logits.sum(axis=0)
    return float(loss), (np.ascontiguousarray(d_weights), d_bias)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    expz = np.exp(z[~pos])
    out[~pos] = expz / (1.0 + expz)
    return out


def adam_step(
    params: tuple[np.ndarray, ...],
    grad: tuple[np.ndarray, ...],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[tuple[np.ndarray, ...], AdamState]:
    """One bias-corrected Adam update; inputs untouched, new arrays returned."""
    if len(params) != len(grad) or any(
        p.shape != g.shape for p, g in zip(params, grad)
    ):
        raise ValidationError("parameter and gradient shapes disagree")
    t = state.step + 1
    new_params = []
    new_m = []
    new_v = []
    for p, g, m, v in zip(params, grad, state.first_moment, state.second_moment):
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g
        m_hat = m / (1.0 - cfg.adam_beta1**t)
        v_hat = v / (1.0 - cfg.adam_beta2**t)
        new_params.append(p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_epsilon))
        new_m.append(m)
        new_v.append(v)
    return tuple(new_params), AdamState(t, tuple(new_m), tuple(new_v))


def train(
    dataset: Dataset,
    train_cfg: TrainConfig,
    featurizer_cfg: FeaturizerConfig,
    seed: int,
    epoch_losses: list[float] | None = None,
) -> LinearModel:
    """Train one model from one seed; same inputs give bitwise-equal weights.

    Per-epoch mean losses are appended to `epoch_losses` when a list is
    passed, so callers can persist the training curve.
    """
    if len(dataset) == 0:
        raise ValidationError("cannot train on an empty dataset")
    if featurizer_cfg.max_tokens != train_cfg.max_seq_len:
        featurizer_cfg = replace(featurizer_cfg, max_tokens=train_cfg.max_seq_len)
    space = dataset.label_space
    features = featurize_texts([inst.text for inst in dataset.instances], featurizer_cfg)
    targets = encode_labels(dataset)
    n_labels = len(space.labels)

    weights = np.zeros((n_labels, featurizer_cfg.hash_dim))
    bias = np.zeros(n_labels)
    state = adam_init((weights, bias))
    model = LinearModel(space.kind, weights, bias, space, featurizer_cfg)

    rng = np.random.default_rng(seed)
    n = len(dataset)
    for _ in range(train_cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, train_cfg.batch_size):
            rows = order[start : start + train_cfg.batch_size]
            loss, grad = loss_and_gradient(model, (features[rows], targets[rows]))
            (weights, bias), state = adam_step((model.weights, model.bias), grad, state, train_cfg)
            model = replace(model, weights=weights, bias=bias)
            batch_losses.append(loss)
        if epoch_losses is not None:
            epoch_losses.append(float(np.mean(batch_losses)))
    return model


def predict_scores(model: LinearModel, texts: list[str]) -> np.ndarray:
    """Probability matrix n x |labels|: softmax rows or per-label sigmoids."""
    features = featurize_texts(texts, model.featurizer)
    z = _logits(model, features)
    if model.kind is LabelKind.MULTICLASS:
        shifted = z - z.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        return expz / expz.sum(axis=1, keepdims=True)
    return _sigmoid(z)


def predict_multiclass(model: LinearModel, text: str) -> tuple[str, np.ndarray]:
    if model.kind is not LabelKind.MULTICLASS:
        raise ValidationError("model is not multiclass")
    probs = predict_scores(model, [text])[0]
    # np.argmax takes the first maximum, i.e. the lowest label index
    return model.label_space.labels[int(np.argmax(probs))], probs


def predict_multilabel(model: LinearModel, text: str) -> tuple[frozenset[str], np.ndarray]:
    if model.kind is not LabelKind.MULTILABEL:
        raise ValidationError("model is not multilabel")
    scores = predict_scores(model, [text])[0]
    chosen = frozenset(
        label
        for label, score in zip(model.label_space.labels, scores)
        if score >= model.threshold
    )
    return chosen, scores


def predict_labels(model: LinearModel, texts: list[str]) -> list:
    """Batch prediction: list of label strings or of frozen label sets."""
    scores = predict_scores(model, texts)
    labels = model.label_space.labels
    if model.kind is LabelKind.MULTICLASS:
        return [labels[int(i)] for i in np.argmax(scores, axis=1)]
    return [
        frozenset(l for l, s in zip(labels, row) if s >= model.threshold)
        for row in scores
    ]


def tune_threshold(
    model: LinearModel,
    dataset: Dataset,
    candidates: tuple[float, ...] = tuple(np.round(np.arange(0.05, 1.0, 0.05), 2)),
) -> float:
    """Pick the global threshold maximizing micro-F1 on `dataset`.

    Optional: nothing calls this unless configured. Ties go to the smallest
    candidate so reruns agree.
    """
    from .metrics import score_multilabel

    if model.kind is not LabelKind.MULTILABEL:
        raise ValidationError("threshold tuning applies to multilabel models only")
    scores = predict_scores(model, [inst.text for inst in dataset.instances])
    gold = {inst.unit_id: set(inst.labels) for inst in dataset.instances}
    labels = model.label_space.labels
    best = (None, -1.0)
    for cand in candidates:
        pred = {
            inst.unit_id: {l for l, s in zip(labels, row) if s >= cand}
            for inst, row in zip(dataset.instances, scores)
        }
        micro = score_multilabel(gold, pred, model.label_space).f1_micro
        if micro > best[1]:
            best = (cand, micro)
    return float(best[0])


def save_model(model: LinearModel, path: Path | str) -> None:
    """Single-file model snapshot; load_model(save_model(m)) == m exactly."""
    meta = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": model.kind.value,
        "subtask": model.label_space.subtask.value,
        "labels": list(model.label_space.labels),
        "featurizer": {
            "hash_dim": model.featurizer.hash_dim,
            "ngram_min": model.featurizer.ngram_min,
            "ngram_max": model.featurizer.ngram_max,
            "lowercase": model.featurizer.lowercase,
            "max_tokens": model.featurizer.max_tokens,
        },
        "threshold": model.threshold,
    }
    with open(path, "wb") as fh:
        np.savez(
            fh,
            meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
            weights=model.weights,
            bias=model.bias,
        )


def load_model(path: Path | str) -> LinearModel:
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            weights = data["weights"]
            bias = data["bias"]
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable model file {path}: {e}") from e
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise FormatError(
            f"unsupported model format version {meta.get('format_version')!r}"
        )
    kind = LabelKind(meta["kind"])
    space = LabelSpace(Subtask(meta["subtask"]), kind, tuple(meta["labels"]))
    featurizer = FeaturizerConfig(**meta["featurizer"])
    return LinearModel(kind, weights, bias, space, featurizer, meta["threshold"])
