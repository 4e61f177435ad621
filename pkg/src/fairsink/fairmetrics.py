"""Discrimination and group-fairness metrics.

All values are fractional internally; :meth:`MetricsReport.to_dict` with
``percent=True`` gives the presentation form (x100, two decimals).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from ._validation import as_binary, as_vector, check_same_length
from .errors import MetricError

log = logging.getLogger(__name__)


def auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted one half."""
    scores = as_vector(scores, "scores")
    labels = as_binary(labels)
    check_same_length(scores=scores, labels=labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    ranks = rankdata(scores)  # midranks count ties as one half
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def es_auc(overall_auc, group_aucs):
    """Equity-scaled AUC, ``AUC / (1 + sum_a |AUC - AUC_a|)``."""
    values = list(group_aucs.values()) if isinstance(group_aucs, dict) else list(group_aucs)
    if not values:
        raise MetricError("es_auc needs at least one group AUC")
    if not all(0.0 <= v <= 1.0 for v in [overall_auc, *values]):
        raise MetricError("AUC values must lie in [0, 1] (fractional units)")
    return float(overall_auc / (1.0 + sum(abs(overall_auc - v) for v in values)))


def _group_masks(groups, group_names=None):
    groups = np.asarray(groups, dtype=object)
    names = list(dict.fromkeys(groups.tolist())) if group_names is None else list(group_names)
    masks = {g: groups == g for g in names}
    for g, m in masks.items():
        if not m.any():
            raise MetricError(f"group {g!r} has no samples")
    return masks


def dpd(predictions, groups, group_names=None):
    """Demographic parity difference: spread of positive-prediction rates."""
    predictions = as_binary(predictions, "predictions")
    check_same_length(predictions=predictions, groups=groups)
    rates = [predictions[m].mean() for m in _group_masks(groups, group_names).values()]
    return float(max(rates) - min(rates))


def deodds(predictions, labels, groups, group_names=None):
    """Equalized-odds difference: the larger of the TPR spread and the FPR spread.

    A group lacking positives (negatives) is left out of the TPR (FPR) spread.
    """
    predictions = as_binary(predictions, "predictions")
    labels = as_binary(labels)
    check_same_length(predictions=predictions, labels=labels, groups=groups)
    tprs, fprs, complete = [], [], 0
    for m in _group_masks(groups, group_names).values():
        pos, neg = m & (labels == 1), m & (labels == 0)
        if pos.any():
            tprs.append(predictions[pos].mean())
        if neg.any():
            fprs.append(predictions[neg].mean())
        complete += bool(pos.any() and neg.any())
    if complete == 0:
        raise MetricError("no group contains both classes")
    spread = lambda r: max(r) - min(r) if r else 0.0  # noqa: E731
    return float(max(spread(tprs), spread(fprs)))


@dataclass(frozen=True)
class AttributeMetrics:
    es_auc: float
    dpd: float
    deodds: float
    group_auc: dict = field(default_factory=dict)


def _pct(x):
    return round(100.0 * float(x), 2)


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    per_attribute: dict

    def es_auc(self, attribute):
        return self.per_attribute[attribute].es_auc

    def to_dict(self, percent=False):
        conv = _pct if percent else float
        return {
            "auc": conv(self.auc),
            "per_attribute": {
                a: {
                    "es_auc": conv(m.es_auc),
                    "dpd": conv(m.dpd),
                    "deodds": conv(m.deodds),
                    "group_auc": {g: conv(v) for g, v in m.group_auc.items()},
                }
                for a, m in self.per_attribute.items()
            },
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            float(doc["auc"]),
            {
                a: AttributeMetrics(float(m["es_auc"]), float(m["dpd"]), float(m["deodds"]),
                                    {g: float(v) for g, v in m["group_auc"].items()})
                for a, m in doc["per_attribute"].items()
            },
        )


def evaluate(scores, predictions, labels, ds):
    """Overall AUC plus, per schema attribute, group AUCs, ES-AUC, DPD and DEOdds."""
    scores = as_vector(scores, "scores")
    predictions = as_binary(predictions, "predictions")
    labels = as_binary(labels)
    check_same_length(scores=scores, predictions=predictions, labels=labels, samples=ds.samples)
    overall = auc(scores, labels)
    per_attribute = {}
    for attr in ds.schema.names:
        groups = ds.group_labels(attr)
        present = [g for g in ds.schema.groups(attr) if np.any(groups == g)]
        group_auc = {}
        for g in present:
            m = groups == g
            if labels[m].min() == labels[m].max():
                log.warning("group %s=%s lacks one class; left out of group AUC", attr, g)
                continue
            group_auc[g] = auc(scores[m], labels[m])
        per_attribute[attr] = AttributeMetrics(
            es_auc=es_auc(overall, group_auc),
            dpd=dpd(predictions, groups, present),
            deodds=deodds(predictions, labels, groups, present),
            group_auc=group_auc,
        )
    return MetricsReport(overall, per_attribute)
