"""Dataset model: paired embeddings, binary labels and sensitive-group labels.

On disk a dataset is JSONL, one sample per line::

    {"id": "s1", "label": 1, "groups": {"gender": "female"},
     "image_embedding": [...], "text_embedding": [...]}

A CSV reader is also provided (``id,label,<attr>...,img_0..,txt_0..``).
The attribute schema lives in a separate JSON document with an ordered
``attributes`` list and optional ``weights``.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError, SchemaError

SPLIT_TAGS = ("train", "val", "test", "unsplit")


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered sensitive attributes, their groups and optional weights.

    ``weights`` is ``None`` in single-attribute mode. When given, every
    weight must be non-negative and the weights must sum to one.
    """

    attributes: tuple
    weights: dict = None

    def __post_init__(self):
        attrs = tuple((str(name), tuple(str(g) for g in groups)) for name, groups in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        names = [a for a, _ in attrs]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate attribute names in {names}")
        for name, groups in attrs:
            if len(groups) < 2:
                raise SchemaError(f"attribute {name!r} needs at least two groups")
            if len(set(groups)) != len(groups):
                raise SchemaError(f"duplicate group names under {name!r}")
        if self.weights is not None:
            weights = {str(k): float(v) for k, v in self.weights.items()}
            unknown = set(weights) - set(names)
            if unknown:
                raise SchemaError(f"weights given for unknown attributes {sorted(unknown)}")
            if any(w < 0 or not math.isfinite(w) for w in weights.values()):
                raise SchemaError("attribute weights must be non-negative")
            if abs(sum(weights.values()) - 1.0) > 1e-9:
                raise SchemaError(f"attribute weights must sum to 1, got {sum(weights.values())}")
            object.__setattr__(self, "weights", {a: weights.get(a, 0.0) for a in names})

    @property
    def names(self):
        return [a for a, _ in self.attributes]

    def groups(self, attribute):
        for name, groups in self.attributes:
            if name == attribute:
                return groups
        raise SchemaError(f"unknown attribute {attribute!r}; schema has {self.names}")

    def to_dict(self):
        out = {"attributes": [{"name": a, "groups": list(g)} for a, g in self.attributes]}
        if self.weights is not None:
            out["weights"] = dict(self.weights)
        return out

    @classmethod
    def from_dict(cls, doc):
        if "attributes" not in doc:
            raise SchemaError("schema document is missing 'attributes'")
        raw = doc["attributes"]
        if isinstance(raw, dict):
            attrs = list(raw.items())
        else:
            try:
                attrs = [(item["name"], item["groups"]) for item in raw]
            except (KeyError, TypeError) as exc:
                raise SchemaError(f"malformed attribute entry: {exc}") from exc
        return cls(tuple(attrs), doc.get("weights"))


def load_schema(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"schema file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema {path} is not valid JSON: {exc.msg}") from exc
    return AttributeSchema.from_dict(doc)


def save_schema(schema, path):
    with open(path, "w") as fh:
        json.dump(schema.to_dict(), fh, indent=2)
        fh.write("\n")


@dataclass(frozen=True)
class Sample:
    id: str
    image_embedding: np.ndarray
    text_embedding: np.ndarray
    label: int
    groups: dict

    def to_record(self):
        return {
            "id": self.id,
            "label": int(self.label),
            "groups": dict(self.groups),
            "image_embedding": [float(v) for v in self.image_embedding],
            "text_embedding": [float(v) for v in self.text_embedding],
        }


@dataclass(frozen=True)
class Dataset:
    schema: AttributeSchema
    samples: tuple
    split_tag: str = "unsplit"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.split_tag not in SPLIT_TAGS:
            raise ConfigurationError(f"split_tag must be one of {SPLIT_TAGS}")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("sample ids must be unique")
        if self.samples:
            d_img = len(self.samples[0].image_embedding)
            d_txt = len(self.samples[0].text_embedding)
        for s in self.samples:
            if len(s.image_embedding) != d_img or len(s.text_embedding) != d_txt:
                raise DataError(f"row {s.id}: embedding dimension differs from the first sample")
            _check_groups(s.id, s.groups, self.schema)

    def __len__(self):
        return len(self.samples)

    @cached_property
    def image_embeddings(self):
        return np.array([s.image_embedding for s in self.samples], dtype=np.float64)

    @cached_property
    def text_embeddings(self):
        return np.array([s.text_embedding for s in self.samples], dtype=np.float64)

    @cached_property
    def labels(self):
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def group_labels(self, attribute):
        self.schema.groups(attribute)
        return np.array([s.groups[attribute] for s in self.samples], dtype=object)

    def subset(self, indices, split_tag=None):
        return Dataset(self.schema, [self.samples[i] for i in indices], split_tag or self.split_tag)


@dataclass(frozen=True)
class GroupIndex:
    """Row indices per group of one attribute; the lists partition ``0..n-1``."""

    attribute: str
    entries: dict = field(default_factory=dict)


def _check_groups(row_id, groups, schema):
    for attr, allowed in schema.attributes:
        if attr not in groups:
            raise SchemaError(f"row {row_id}: missing column {attr!r}")
        if groups[attr] not in allowed:
            raise SchemaError(
                f"row {row_id}: unknown group {groups[attr]!r} for attribute {attr!r}"
            )


def _parse_vector(values, row_id, column):
    try:
        arr = np.array([float(v) for v in values], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise DataError(f"row {row_id}: non-numeric value in {column}") from exc
    if not np.all(np.isfinite(arr)):
        raise DataError(f"row {row_id}: non-finite value in {column}")
    return arr


def _parse_label(value, row_id):
    try:
        label = int(value)
    except (TypeError, ValueError) as exc:
        raise DataError(f"row {row_id}: label must be 0 or 1") from exc
    if label not in (0, 1) or float(value) != label:
        raise DataError(f"row {row_id}: label must be 0 or 1, got {value!r}")
    return label


def _record_to_sample(rec, schema, lineno):
    for key in ("id", "label", "groups", "image_embedding", "text_embedding"):
        if key not in rec:
            raise SchemaError(f"line {lineno}: missing column {key!r}")
    row_id = str(rec["id"])
    groups = {str(k): str(v).strip() for k, v in rec["groups"].items()}
    _check_groups(row_id, groups, schema)
    return Sample(
        id=row_id,
        image_embedding=_parse_vector(rec["image_embedding"], row_id, "image_embedding"),
        text_embedding=_parse_vector(rec["text_embedding"], row_id, "text_embedding"),
        label=_parse_label(rec["label"], row_id),
        groups={a: groups[a] for a in schema.names},
    )


def _load_jsonl(path, schema):
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            samples.append(_record_to_sample(rec, schema, lineno))
    return samples


def _load_csv(path, schema):
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ["id", "label", *schema.names]:
            if col not in header:
                raise SchemaError(f"missing column {col!r}")
        img_cols = _numbered_columns(header, "img_")
        txt_cols = _numbered_columns(header, "txt_")
        for row in reader:
            row_id = row["id"]
            groups = {a: row[a].strip() for a in schema.names}
            _check_groups(row_id, groups, schema)
            samples.append(
                Sample(
                    id=row_id,
                    image_embedding=_parse_vector([row[c] for c in img_cols], row_id, "img"),
                    text_embedding=_parse_vector([row[c] for c in txt_cols], row_id, "txt"),
                    label=_parse_label(row["label"], row_id),
                    groups=groups,
                )
            )
    return samples


def _numbered_columns(header, prefix):
    cols = []
    while f"{prefix}{len(cols)}" in header:
        cols.append(f"{prefix}{len(cols)}")
    if not cols:
        raise SchemaError(f"missing column {prefix}0")
    return cols


def load_dataset(path, schema):
    """Read a JSONL (default) or ``.csv`` dataset, preserving row order."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    if path.suffix.lower() == ".csv":
        samples = _load_csv(path, schema)
    else:
        samples = _load_jsonl(path, schema)
    return Dataset(schema, samples, "unsplit")


def save_dataset(ds, path):
    path = Path(path)
    if path.suffix.lower() == ".csv":
        d_img = len(ds.samples[0].image_embedding) if ds.samples else 0
        d_txt = len(ds.samples[0].text_embedding) if ds.samples else 0
        header = ["id", "label", *ds.schema.names]
        header += [f"img_{i}" for i in range(d_img)] + [f"txt_{i}" for i in range(d_txt)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for s in ds.samples:
                writer.writerow(
                    [s.id, s.label, *(s.groups[a] for a in ds.schema.names)]
                    + [repr(float(v)) for v in s.image_embedding]
                    + [repr(float(v)) for v in s.text_embedding]
                )
    else:
        with open(path, "w") as fh:
            for s in ds.samples:
                fh.write(json.dumps(s.to_record()) + "\n")


def split_dataset(ds, fractions, seed):
    """Shuffle with PCG64(seed) and slice into (train, val, test).

    Val and test sizes are ``floor(fraction * n)``; the remainder goes to
    train. Within each split the original row order is kept.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigurationError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(ds)
    n_val = math.floor(fractions[1] * n + 1e-9)
    n_test = math.floor(fractions[2] * n + 1e-9)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigurationError(
            f"split of {n} samples by {fractions} leaves an empty split "
            f"({n_train}, {n_val}, {n_test})"
        )
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(
        ds.subset(np.sort(idx), tag) for idx, tag in zip(parts, ("train", "val", "test"))
    )


def group_index(ds, attribute):
    groups = ds.schema.groups(attribute)
    entries = {g: [] for g in groups}
    for i, s in enumerate(ds.samples):
        entries[s.groups[attribute]].append(i)
    return GroupIndex(attribute, entries)
