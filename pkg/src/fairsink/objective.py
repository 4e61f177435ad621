r"""Similarity scores, contrastive loss and the fairness regularizers.

For a batch with L2-normalized image rows ``I`` and text rows ``T`` the
paired scores are :math:`s_i = \langle I_i, T_i \rangle`. The regularizer for
one sensitive attribute sums, over its groups :math:`\alpha`, the distance
between the batch score distribution and the group score distribution:

.. math::
    R_{\mathcal A} = \sum_{\alpha \in \mathcal A} d(D_B, D_{B_\alpha})

and the multi-attribute variant weights these sums by :math:`w_{\mathcal A}`.
Training minimizes ``clip + lambda * R``.

Two switches reproduce an alternative scoring pipeline: ``official_quadratic``
replaces the paired scores by the squared row norms of :math:`I T^\top`,
and ``divide_by_sum`` rescales each drawn group sample by its own sum.
"""

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, NumericalError
from .transport import DistanceConfig, ScoreDistribution, distance_and_grads

log = logging.getLogger(__name__)

VARIANTS = ("paired_diag", "official_quadratic")
NORMALIZATIONS = ("none", "divide_by_sum")
POOL_CAPACITY = 512


@dataclass(frozen=True)
class ScoreMode:
    variant: str = "paired_diag"
    group_normalization: str = "none"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"score variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.group_normalization not in NORMALIZATIONS:
            raise ConfigurationError(
                f"group_normalization must be one of {NORMALIZATIONS}, got {self.group_normalization!r}"
            )

    def to_dict(self):
        return {"variant": self.variant, "group_normalization": self.group_normalization}

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


PAIRED_MODE = ScoreMode("paired_diag", "none")
OFFICIAL_MODE = ScoreMode("official_quadratic", "divide_by_sum")


@dataclass(frozen=True)
class LossConfig:
    """Loss hyperparameters. ``lam`` is the regularization rate (serialized as ``lambda``)."""

    lam: float = 0.0
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    score_mode: ScoreMode = field(default_factory=ScoreMode)
    group_sample_size: int = 32
    temperature_init: float = 1.0 / 0.07
    weights: dict = None

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam!r}")
        if int(self.group_sample_size) < 1:
            raise ConfigurationError("group_sample_size must be at least 1")
        if not self.temperature_init > 0:
            raise ConfigurationError("temperature_init must be positive")

    def to_dict(self):
        return {
            "lambda": self.lam,
            "distance": self.distance.to_dict(),
            "score_mode": self.score_mode.to_dict(),
            "group_sample_size": self.group_sample_size,
            "temperature_init": self.temperature_init,
            "weights": None if self.weights is None else dict(self.weights),
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        return cls(
            lam=float(doc.pop("lambda", 0.0)),
            distance=DistanceConfig.from_dict(doc.pop("distance", {})),
            score_mode=ScoreMode.from_dict(doc.pop("score_mode", {})),
            **doc,
        )


@dataclass(frozen=True)
class Batch:
    """A training batch.

    ``group_rows`` maps attribute -> group -> row indices, with groups in
    schema order. Pass ``validate=False`` to skip the unit-norm check (used
    when differentiating numerically).
    """

    image_features: np.ndarray
    text_features: np.ndarray
    labels: np.ndarray
    group_rows: dict
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        I = np.asarray(self.image_features, dtype=np.float64)
        T = np.asarray(self.text_features, dtype=np.float64)
        object.__setattr__(self, "image_features", I)
        object.__setattr__(self, "text_features", T)
        object.__setattr__(self, "labels", np.asarray(self.labels))
        if I.ndim != 2 or I.shape != T.shape:
            raise DataError(f"image and text features must be equal-shape matrices, got {I.shape} and {T.shape}")
        n = I.shape[0]
        if len(self.labels) != n:
            raise DataError("labels and features differ in length")
        if self.validate:
            for name, M in (("image", I), ("text", T)):
                if np.any(np.abs(np.linalg.norm(M, axis=1) - 1.0) > 1e-6):
                    raise DataError(f"{name} feature rows must have unit L2 norm")
            for attr, groups in self.group_rows.items():
                rows = np.sort(np.concatenate([np.asarray(r, dtype=np.int64) for r in groups.values()]))
                if not np.array_equal(rows, np.arange(n)):
                    raise DataError(f"group rows of {attr!r} do not partition the batch")

    def __len__(self):
        return self.image_features.shape[0]

    @classmethod
    def from_groups(cls, image_features, text_features, labels, groups, schema, validate=True):
        """Build ``group_rows`` from per-attribute arrays of group names."""
        group_rows = {}
        for attr in schema.names:
            names = np.asarray(groups[attr], dtype=object)
            group_rows[attr] = {g: np.flatnonzero(names == g) for g in schema.groups(attr)}
        return cls(image_features, text_features, labels, group_rows, validate)


def l2_normalize(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise NumericalError("cannot normalize a zero feature row")
    return X / norms


def similarity_scores(batch, mode=PAIRED_MODE):
    I, T = batch.image_features, batch.text_features
    if mode.variant == "paired_diag":
        return np.einsum("ij,ij->i", I, T)
    S = I @ T.T
    return np.einsum("ij,ij->i", S, S)


def similarity_scores_backward(batch, mode, score_grads):
    """Chain ``d value / d scores`` to ``(d value / d I, d value / d T)``."""
    I, T = batch.image_features, batch.text_features
    gs = np.asarray(score_grads, dtype=np.float64)[:, None]
    if mode.variant == "paired_diag":
        return gs * T, gs * I
    G = 2.0 * gs * (I @ T.T)
    return G @ T, G.T @ I


class GroupPool:
    """Per-(attribute, group) FIFO history of detached scores from past steps."""

    def __init__(self, capacity=POOL_CAPACITY):
        self.capacity = int(capacity)
        self._history = {}

    def history(self, attribute, group):
        return np.fromiter(self._history.get((attribute, group), ()), dtype=np.float64)

    def update(self, batch, scores):
        scores = np.asarray(scores, dtype=np.float64)
        for attr, groups in batch.group_rows.items():
            for g, rows in groups.items():
                if len(rows):
                    buf = self._history.setdefault((attr, g), deque(maxlen=self.capacity))
                    buf.extend(scores[rows].tolist())


@dataclass(frozen=True)
class _GroupDraw:
    values: np.ndarray  # after normalization
    raw: np.ndarray
    rows: np.ndarray  # batch row per draw, -1 for history
    total: float  # normalizing sum, 1.0 when not normalized


def _draw(rng, batch_rows, batch_scores, history, sample_size):
    """Batch members first, then history; with replacement only when the pool is too small."""
    batch_rows = np.asarray(batch_rows, dtype=np.int64)
    pool_rows = np.concatenate([batch_rows, np.full(history.size, -1, dtype=np.int64)])
    pool_vals = np.concatenate([batch_scores[batch_rows], history])
    size = pool_vals.size
    if size >= sample_size:
        if batch_rows.size >= sample_size:
            pick = np.sort(rng.choice(batch_rows.size, sample_size, replace=False))
        else:
            extra = rng.choice(history.size, sample_size - batch_rows.size, replace=False)
            pick = np.concatenate([np.arange(batch_rows.size), batch_rows.size + np.sort(extra)])
    else:
        pick = np.concatenate([np.arange(size), rng.integers(0, size, sample_size - size)])
    return pool_vals[pick], pool_rows[pick]


def _group_draws(batch, attribute, scores, mode, sample_size, seed, pool):
    if attribute not in batch.group_rows:
        raise ConfigurationError(f"attribute {attribute!r} is not in the batch")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(batch),):
        raise DataError(f"expected {len(batch)} scores, got shape {scores.shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    draws = {}
    for group, rows in batch.group_rows[attribute].items():
        history = pool.history(attribute, group) if pool is not None else np.empty(0)
        if len(rows) + history.size == 0:
            log.info("group %s=%s has no members this step; its term is 0", attribute, group)
            continue
        raw, src = _draw(rng, rows, scores, history, int(sample_size))
        total = 1.0
        values = raw
        if mode.group_normalization == "divide_by_sum":
            total = float(raw.sum())
            if total == 0.0:
                raise NumericalError(f"group {attribute}={group}: scores sum to zero under divide_by_sum")
            values = raw / total
        draws[group] = _GroupDraw(values, raw, src, total)
    return draws


def group_score_distributions(batch, attribute, scores, mode=PAIRED_MODE, sample_size=32, seed=0, pool=None):
    """Return the batch distribution and a drawn distribution per non-empty group.

    A group's pool is its members in this batch plus, when ``pool`` is given,
    its recent history. Current members are always drawn; the rest is
    filled from history without replacement, or with replacement when the
    pool holds fewer than ``sample_size`` scores.
    """
    draws = _group_draws(batch, attribute, scores, mode, sample_size, seed, pool)
    population = ScoreDistribution(np.asarray(scores, dtype=np.float64))
    return population, {g: ScoreDistribution(d.values) for g, d in draws.items()}


def _attribute_term(batch, attribute, scores, cfg, seed, pool):
    draws = _group_draws(batch, attribute, scores, cfg.score_mode, cfg.group_sample_size, seed, pool)
    population = ScoreDistribution(scores)
    value = 0.0
    grads = np.zeros(len(batch))
    for d in draws.values():
        v, gp, gq = distance_and_grads(population, ScoreDistribution(d.values), cfg.distance)
        value += v
        grads += gp
        if cfg.score_mode.group_normalization == "divide_by_sum":
            # y = z / sum(z): dv/dz_k = (gq_k - <gq, y>) / sum(z)
            gq = (gq - np.dot(gq, d.values)) / d.total
        from_batch = d.rows >= 0
        np.add.at(grads, d.rows[from_batch], gq[from_batch])
    return value, grads


def fair_regularizer(batch, attribute, cfg, seed=0, pool=None, scores=None):
    """Single-attribute regularizer value and its gradient w.r.t. the batch scores."""
    if scores is None:
        scores = similarity_scores(batch, cfg.score_mode)
    return _attribute_term(batch, attribute, np.asarray(scores, dtype=np.float64), cfg, seed, pool)


def fairplus_regularizer(batch, cfg, seed=0, pool=None, scores=None):
    """Weighted multi-attribute regularizer; zero-weight attributes are skipped."""
    if cfg.weights is None:
        raise ConfigurationError("the weighted regularizer needs attribute weights")
    if scores is None:
        scores = similarity_scores(batch, cfg.score_mode)
    scores = np.asarray(scores, dtype=np.float64)
    value = 0.0
    grads = np.zeros(len(batch))
    for attribute, w in cfg.weights.items():
        if w == 0:
            continue
        v, g = _attribute_term(batch, attribute, scores, cfg, seed, pool)
        value += w * v
        grads = grads + w * g
    return value, grads


@dataclass(frozen=True)
class LossGrads:
    image: np.ndarray
    text: np.ndarray
    temperature: float


def clip_loss(batch, temperature):
    """Symmetric InfoNCE over logits ``I T^T / temperature``."""
    if not (np.isfinite(temperature) and temperature > 0):
        raise ConfigurationError(f"temperature must be positive, got {temperature!r}")
    n = len(batch)
    if n < 2:
        raise DataError("the contrastive loss needs at least two pairs")
    I, T = batch.image_features, batch.text_features
    S = I @ T.T
    logits = S / temperature
    row = logits - logits.max(axis=1, keepdims=True)
    col = logits - logits.max(axis=0, keepdims=True)
    log_row = row - np.log(np.exp(row).sum(axis=1, keepdims=True))
    log_col = col - np.log(np.exp(col).sum(axis=0, keepdims=True))
    diag = np.arange(n)
    loss = -0.5 * (log_row[diag, diag].mean() + log_col[diag, diag].mean())
    eye = np.eye(n)
    d_logits = 0.5 * ((np.exp(log_row) - eye) + (np.exp(log_col) - eye)) / n
    dS = d_logits / temperature
    d_temp = -float(np.sum(d_logits * S)) / temperature**2
    return float(loss), LossGrads(dS @ T, dS.T @ I, d_temp)


def parse_mode(mode):
    """``'clip_only'``, ``'fairclip:<attribute>'`` or ``'fairclip_plus'`` -> (kind, attribute)."""
    if mode == "clip_only":
        return "clip_only", None
    if mode == "fairclip_plus":
        return "fairclip_plus", None
    if isinstance(mode, str) and mode.startswith("fairclip:") and len(mode) > len("fairclip:"):
        return "fairclip", mode.split(":", 1)[1]
    raise ConfigurationError(
        f"mode must be 'clip_only', 'fairclip:<attribute>' or 'fairclip_plus', got {mode!r}"
    )


def regularizer(batch, cfg, mode, seed=0, pool=None, scores=None):
    """Dispatch to the regularizer named by ``mode``; clip_only gives ``(0.0, zeros)``."""
    kind, attribute = parse_mode(mode)
    if kind == "fairclip":
        return fair_regularizer(batch, attribute, cfg, seed, pool, scores)
    if kind == "fairclip_plus":
        return fairplus_regularizer(batch, cfg, seed, pool, scores)
    return 0.0, np.zeros(len(batch))


def total_loss(batch, cfg, mode, temperature, seed=0, pool=None):
    """Return ``(loss, grads, parts)`` with ``parts = {'clip': c, 'regularizer': v}``.

    The regularizer is evaluated even when ``lam == 0`` so its value can be
    monitored; its gradient then contributes exactly zero.
    """
    kind, _ = parse_mode(mode)
    c, grads = clip_loss(batch, temperature)
    if kind == "clip_only":
        return c, grads, {"clip": c, "regularizer": 0.0}
    scores = similarity_scores(batch, cfg.score_mode)
    v, score_grads = regularizer(batch, cfg, mode, seed, pool, scores)
    dI, dT = similarity_scores_backward(batch, cfg.score_mode, cfg.lam * score_grads)
    loss = c + cfg.lam * v
    return loss, LossGrads(grads.image + dI, grads.text + dT, grads.temperature), {"clip": c, "regularizer": v}
