"""Desk-scale dual encoder: two linear projections plus a learnable logit scale.

Input embeddings stand in for frozen backbones. Training shuffles with a
seeded generator, steps Adam on the chosen loss, and writes one checkpoint
per epoch; the best checkpoint maximizes the selection metric on the
selection split (earliest epoch on ties).

Zero-shot classification compares each image with two prompt embeddings.
The prompts are the class-mean text embeddings of the training split and
travel with every checkpoint.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_binary, as_matrix, check_positive, check_same_length
from .dataspace import Dataset
from .errors import ConfigurationError, DataError, NumericalError
from .fairmetrics import MetricsReport, auc, evaluate
from .objective import (
    Batch,
    GroupPool,
    LossConfig,
    clip_loss,
    parse_mode,
    regularizer,
    similarity_scores,
    similarity_scores_backward,
)

MAX_LOGIT_SCALE = 100.0
MIN_LOGIT_SCALE = 1e-3
SELECTION_SPLITS = ("val", "test")


@dataclass
class ModelParams:
    """Projection matrices and the logit scale (inverse temperature)."""

    image_projection: np.ndarray
    text_projection: np.ndarray
    logit_scale: float = 1.0 / 0.07

    def __post_init__(self):
        self.image_projection = np.asarray(self.image_projection, dtype=np.float64)
        self.text_projection = np.asarray(self.text_projection, dtype=np.float64)
        self.logit_scale = float(self.logit_scale)
        if not (np.all(np.isfinite(self.image_projection)) and np.all(np.isfinite(self.text_projection))):
            raise NumericalError("model parameters must be finite")
        if self.image_projection.shape[1] != self.text_projection.shape[1]:
            raise ConfigurationError("image and text projections must share the output dimension")
        if not 0 < self.logit_scale <= MAX_LOGIT_SCALE:
            raise ConfigurationError(f"logit_scale must lie in (0, {MAX_LOGIT_SCALE}]")

    @property
    def temperature(self):
        return 1.0 / self.logit_scale

    def copy(self):
        return ModelParams(self.image_projection.copy(), self.text_projection.copy(), self.logit_scale)

    def to_dict(self):
        return {
            "image_projection": self.image_projection.tolist(),
            "text_projection": self.text_projection.tolist(),
            "logit_scale": self.logit_scale,
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["image_projection"]), np.array(doc["text_projection"]), doc["logit_scale"])


def init_model(d_in_image, d_in_text, d_out, seed, logit_scale=1.0 / 0.07):
    """Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) projections from PCG64(seed)."""
    for name, d in (("d_in_image", d_in_image), ("d_in_text", d_in_text), ("d_out", d_out)):
        if int(d) < 1:
            raise ConfigurationError(f"{name} must be at least 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    bi, bt = 1.0 / math.sqrt(d_in_image), 1.0 / math.sqrt(d_in_text)
    W_i = rng.uniform(-bi, bi, size=(d_in_image, d_out))
    W_t = rng.uniform(-bt, bt, size=(d_in_text, d_out))
    return ModelParams(W_i, W_t, logit_scale)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    mode: str = "clip_only"
    selection_split: str = "val"
    selection_metric: str = "auc"
    projection_dim: int = 16
    monitor_attribute: str = None

    def __post_init__(self):
        check_positive(self.learning_rate, "learning_rate")
        if int(self.epochs) < 1 or int(self.batch_size) < 1 or int(self.projection_dim) < 1:
            raise ConfigurationError("epochs, batch_size and projection_dim must be positive")
        parse_mode(self.mode)
        if self.selection_split not in SELECTION_SPLITS:
            raise ConfigurationError(f"selection_split must be one of {SELECTION_SPLITS}")
        if not (self.selection_metric == "auc" or self.selection_metric.startswith("es_auc:")):
            raise ConfigurationError("selection_metric must be 'auc' or 'es_auc:<attribute>'")
        if parse_mode(self.mode)[0] == "fairclip_plus" and self.loss.weights is None:
            raise ConfigurationError("mode fairclip_plus needs loss.weights")

    def to_dict(self):
        doc = dict(self.__dict__)
        doc["loss"] = self.loss.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        return cls(loss=LossConfig.from_dict(doc.pop("loss", {})), **doc)


@dataclass
class Checkpoint:
    params: ModelParams
    epoch: int
    val_metrics: MetricsReport
    train_loss: float
    regularizer_value: float
    selection_split: str = "val"
    prompts: tuple = None  # (positive, negative) text embeddings

    def to_dict(self):
        return {
            "epoch": self.epoch,
            "selection_split": self.selection_split,
            "train_loss": self.train_loss,
            "regularizer_value": self.regularizer_value,
            "val_metrics": self.val_metrics.to_dict(),
            "params": self.params.to_dict(),
            "prompts": {"positive": list(map(float, self.prompts[0])),
                        "negative": list(map(float, self.prompts[1]))},
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            params=ModelParams.from_dict(doc["params"]),
            epoch=int(doc["epoch"]),
            val_metrics=MetricsReport.from_dict(doc["val_metrics"]),
            train_loss=float(doc["train_loss"]),
            regularizer_value=float(doc["regularizer_value"]),
            selection_split=doc.get("selection_split", "val"),
            prompts=(np.array(doc["prompts"]["positive"]), np.array(doc["prompts"]["negative"])),
        )

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed checkpoint {path}: {exc}") from exc


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        """Update the list of arrays ``params`` in place."""
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _project(X, W):
    raw = X @ W
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("a projected embedding has zero norm")
    return raw / norms, norms


def _normalize_backward(U, norms, dU):
    return (dU - np.sum(dU * U, axis=1, keepdims=True) * U) / norms


def class_prompts(ds):
    """Class-mean text embeddings, (positive, negative)."""
    labels = ds.labels
    if labels.min() == labels.max():
        raise DataError("prompt construction needs both classes in the training split")
    T = ds.text_embeddings
    return T[labels == 1].mean(axis=0), T[labels == 0].mean(axis=0)


def zero_shot_scores(model, image_embeddings, prompt_pos_embedding, prompt_neg_embedding):
    """Softmax over the two prompt similarities; prediction 1 iff s+ > s-."""
    margin = zero_shot_margin(model, image_embeddings, prompt_pos_embedding, prompt_neg_embedding)
    prob = _sigmoid(model.logit_scale * margin)
    return prob, (margin > 0).astype(np.int64)


def zero_shot_margin(model, image_embeddings, prompt_pos_embedding, prompt_neg_embedding):
    """``s+ - s-`` per image; monotone in the zero-shot probability and free of saturation."""
    X = as_matrix(image_embeddings, "image_embeddings")
    prompts = np.vstack([prompt_pos_embedding, prompt_neg_embedding]).astype(np.float64)
    if X.shape[1] != model.image_projection.shape[0] or prompts.shape[1] != model.text_projection.shape[0]:
        raise DataError("embedding dimensions do not match the model")
    img, _ = _project(X, model.image_projection)
    txt, _ = _project(prompts, model.text_projection)
    s = img @ txt.T
    return s[:, 0] - s[:, 1]


def evaluate_model(model, prompts, ds):
    margin = zero_shot_margin(model, ds.image_embeddings, *prompts)
    return evaluate(margin, (margin > 0).astype(np.int64), ds.labels, ds)


def _metric(report, name):
    if name == "auc":
        return report.auc
    return report.es_auc(name.split(":", 1)[1])


def _batch(ds, rows, params, group_labels):
    Xi, Xt = ds.image_embeddings[rows], ds.text_embeddings[rows]
    I, ni = _project(Xi, params.image_projection)
    T, nt = _project(Xt, params.text_projection)
    groups = {a: g[rows] for a, g in group_labels.items()}
    batch = Batch.from_groups(I, T, ds.labels[rows], groups, ds.schema, validate=False)
    return batch, (Xi, Xt, ni, nt)


def train(ds_train, ds_val, ds_test, cfg):
    """Train and return ``(best, history)``.

    With ``selection_split='val'`` the test split is never read.
    """
    kind, attribute = parse_mode(cfg.mode)
    schema = ds_train.schema
    if cfg.batch_size > len(ds_train):
        raise ConfigurationError("batch_size exceeds the training-set size")
    for name in [attribute, cfg.monitor_attribute, *(cfg.loss.weights or {})]:
        if name is not None:
            schema.groups(name)
    if cfg.selection_metric != "auc":
        schema.groups(cfg.selection_metric.split(":", 1)[1])
    selection_ds = ds_val if cfg.selection_split == "val" else ds_test
    if selection_ds is None:
        raise ConfigurationError(f"selection split {cfg.selection_split!r} was not provided")

    # the monitored regularizer for clip_only runs is computed but never differentiated
    reg_mode = cfg.mode if kind != "clip_only" else f"fairclip:{cfg.monitor_attribute or schema.names[0]}"
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    shuffle_rng = np.random.Generator(np.random.PCG64(seeds[0]))
    draw_rng = np.random.Generator(np.random.PCG64(seeds[1]))
    params = init_model(ds_train.image_embeddings.shape[1], ds_train.text_embeddings.shape[1],
                        cfg.projection_dim, cfg.seed, min(cfg.loss.temperature_init, MAX_LOGIT_SCALE))
    prompts = class_prompts(ds_train)
    group_labels = {a: ds_train.group_labels(a) for a in schema.names}
    pool = GroupPool()
    opt = Adam(cfg.learning_rate)
    scale = np.array([params.logit_scale])
    history = []
    step = 0
    n = len(ds_train)
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses, reg_values = [], []
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            if rows.size < 2:
                continue
            step += 1
            batch, (Xi, Xt, ni, nt) = _batch(ds_train, rows, params, group_labels)
            draw_seed = int(draw_rng.integers(2**63))
            c, grads = clip_loss(batch, 1.0 / scale[0])
            if not np.isfinite(c):
                raise NumericalError(f"step {step}: contrastive loss is non-finite")
            scores = similarity_scores(batch, cfg.loss.score_mode)
            try:
                v, score_grads = regularizer(batch, cfg.loss, reg_mode, draw_seed, pool, scores)
            except NumericalError as exc:
                raise NumericalError(f"step {step}: regularizer failed: {exc}") from exc
            if not np.isfinite(v):
                raise NumericalError(f"step {step}: regularizer is non-finite")
            dI, dT = grads.image, grads.text
            loss = c
            if kind != "clip_only":
                rI, rT = similarity_scores_backward(batch, cfg.loss.score_mode, cfg.loss.lam * score_grads)
                dI, dT = dI + rI, dT + rT
                loss = c + cfg.loss.lam * v
            if not np.isfinite(loss):
                raise NumericalError(f"step {step}: total loss is non-finite")
            g_wi = Xi.T @ _normalize_backward(batch.image_features, ni, dI)
            g_wt = Xt.T @ _normalize_backward(batch.text_features, nt, dT)
            g_scale = np.array([grads.temperature * (-1.0 / scale[0] ** 2)])
            pool.update(batch, scores)
            opt.step([params.image_projection, params.text_projection, scale], [g_wi, g_wt, g_scale])
            scale[0] = min(max(scale[0], MIN_LOGIT_SCALE), MAX_LOGIT_SCALE)
            params.logit_scale = float(scale[0])
            losses.append(loss)
            reg_values.append(v)
        report = evaluate_model(params, prompts, selection_ds)
        history.append(Checkpoint(
            params=params.copy(),
            epoch=epoch,
            val_metrics=report,
            train_loss=float(np.mean(losses)),
            regularizer_value=float(np.mean(reg_values)),
            selection_split=cfg.selection_split,
            prompts=prompts,
        ))
    best = history[0]
    for ck in history[1:]:
        if _metric(ck.val_metrics, cfg.selection_metric) > _metric(best.val_metrics, cfg.selection_metric):
            best = ck
    return best, history


@dataclass(frozen=True)
class ProbeConfig:
    learning_rate: float = 0.5
    max_epochs: int = 5000
    tolerance: float = 1e-6
    seed: int = 0


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_linear_probe(features, labels, cfg=ProbeConfig()):
    """Full-batch gradient descent on the mean logistic loss.

    Stops when the gradient norm falls to ``cfg.tolerance`` or after
    ``cfg.max_epochs`` epochs. Returns ``(weights, bias, train_auc)``.
    """
    X = as_matrix(features, "features")
    y = as_binary(labels)
    check_same_length(features=X, labels=y)
    if y.size == 0 or y.min() == y.max():
        raise ConfigurationError("the linear probe needs both classes in the labels")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    w = rng.uniform(-0.01, 0.01, size=X.shape[1])
    b = 0.0
    for _ in range(int(cfg.max_epochs)):
        r = _sigmoid(X @ w + b) - y
        gw = X.T @ r / y.size
        gb = r.mean()
        if math.sqrt(float(gw @ gw) + gb * gb) <= cfg.tolerance:
            break
        w -= cfg.learning_rate * gw
        b -= cfg.learning_rate * gb
    return w, float(b), auc(X @ w + b, y)


def _as_dataset(X, name):
    if not isinstance(X, Dataset):
        raise DataError(f"{name} must be a Dataset")
    return X


class FairCLIPEstimator(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`train`.

    ``fit`` takes the training Dataset plus optional validation and test
    Datasets. ``transform`` returns normalized projected image embeddings,
    ``predict_proba`` and ``predict`` give zero-shot outputs.
    """

    def __init__(self, mode="clip_only", lam=0.0, learning_rate=1e-3, epochs=20, batch_size=32,
                 projection_dim=16, seed=0, distance=None, score_mode=None, group_sample_size=32,
                 weights=None, selection_split="val", selection_metric="auc"):
        self.mode = mode
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.projection_dim = projection_dim
        self.seed = seed
        self.distance = distance
        self.score_mode = score_mode
        self.group_sample_size = group_sample_size
        self.weights = weights
        self.selection_split = selection_split
        self.selection_metric = selection_metric

    def train_config(self):
        loss = {"lam": self.lam, "group_sample_size": self.group_sample_size, "weights": self.weights}
        if self.distance is not None:
            loss["distance"] = self.distance
        if self.score_mode is not None:
            loss["score_mode"] = self.score_mode
        return TrainConfig(
            learning_rate=self.learning_rate, epochs=self.epochs, batch_size=self.batch_size,
            seed=self.seed, loss=LossConfig(**loss), mode=self.mode,
            selection_split=self.selection_split, selection_metric=self.selection_metric,
            projection_dim=self.projection_dim,
        )

    def fit(self, X, y=None, val=None, test=None):
        ds = _as_dataset(X, "X")
        cfg = self.train_config()
        if val is None and cfg.selection_split == "val":
            val = ds
        self.best_, self.history_ = train(ds, val, test, cfg)
        self.model_ = self.best_.params
        self.prompts_ = self.best_.prompts
        return self

    def _images(self, X):
        return X.image_embeddings if isinstance(X, Dataset) else as_matrix(X)

    def transform(self, X):
        check_is_fitted(self, "model_")
        return _project(self._images(X), self.model_.image_projection)[0]

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return zero_shot_margin(self.model_, self._images(X), *self.prompts_)

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = zero_shot_scores(self.model_, self._images(X), *self.prompts_)[0]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)

    def score(self, X, y=None):
        """Zero-shot AUC on a Dataset."""
        ds = _as_dataset(X, "X")
        return auc(self.decision_function(ds), ds.labels)


class LinearProbe(ClassifierMixin, BaseEstimator):
    def __init__(self, learning_rate=0.5, max_epochs=5000, tolerance=1e-6, seed=0):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.tolerance = tolerance
        self.seed = seed

    def fit(self, X, y):
        cfg = ProbeConfig(self.learning_rate, self.max_epochs, self.tolerance, self.seed)
        self.coef_, self.intercept_, self.train_auc_ = train_linear_probe(X, y, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return as_matrix(X) @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)


__all__ = [
    "Adam", "Checkpoint", "FairCLIPEstimator", "LinearProbe", "ModelParams",
    "ProbeConfig", "TrainConfig", "class_prompts", "evaluate_model", "init_model", "train",
    "train_linear_probe", "zero_shot_margin", "zero_shot_scores",
]
