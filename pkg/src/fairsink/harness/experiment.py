"""Seeded multi-run experiments, per-group distance reports and grid sweeps.

Layout written by :func:`run_experiment` under ``output_dir``::

    resolved_config.json
    runs/<experiment>-<model>/<seed>/epoch_<k>.json
    runs/<experiment>-<model>/<seed>/result.json
    report.json, report.csv

Every run is isolated and seeded by its repeat seed (split, initialization,
shuffling and group sampling). A run that raises is recorded as failed and
the experiment carries on.
"""

import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.model_selection import ParameterGrid

from ..dataspace import Dataset, load_dataset, load_schema, split_dataset
from ..errors import ConfigurationError, DataError, FairsinkError
from ..objective import PAIRED_MODE, Batch, ScoreMode, similarity_scores
from ..trainer import TrainConfig, _project, evaluate_model, train
from ..transport import DistanceConfig, ScoreDistribution, distance
from .synthetic import SyntheticConfig, generate_synthetic

log = logging.getLogger(__name__)

MAX_GRID = 10_000


@dataclass(frozen=True)
class ModelSpec:
    """One model variant: a training mode plus optional loss overrides."""

    name: str
    mode: str
    lam: float = None
    score_mode: ScoreMode = None

    def to_dict(self):
        return {
            "name": self.name,
            "mode": self.mode,
            "lam": self.lam,
            "score_mode": None if self.score_mode is None else self.score_mode.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("score_mode") is not None:
            doc["score_mode"] = ScoreMode.from_dict(doc["score_mode"])
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        return cls(**doc)

    def train_config(self, base, seed):
        loss = base.loss
        if self.lam is not None:
            loss = dataclasses.replace(loss, lam=float(self.lam))
        if self.score_mode is not None:
            loss = dataclasses.replace(loss, score_mode=self.score_mode)
        return dataclasses.replace(base, mode=self.mode, loss=loss, seed=int(seed))


@dataclass(frozen=True)
class DatasetSource:
    path: str
    schema: str

    def to_dict(self):
        return {"path": self.path, "schema": self.schema}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: object  # SyntheticConfig or DatasetSource
    train: TrainConfig = field(default_factory=TrainConfig)
    models: tuple = (ModelSpec("CLIP-FT", "clip_only"),)
    repeats: int = 3
    seeds: tuple = None
    name: str = "experiment"
    output_dir: str = "out"
    split_fractions: tuple = (0.7, 0.1, 0.2)
    distance: DistanceConfig = field(default_factory=DistanceConfig)

    def __post_init__(self):
        if int(self.repeats) < 1:
            raise ConfigurationError("repeats must be at least 1")
        seeds = tuple(range(1, int(self.repeats) + 1)) if self.seeds is None else tuple(int(s) for s in self.seeds)
        if len(seeds) != int(self.repeats):
            raise ConfigurationError("seeds must list one seed per repeat")
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise ConfigurationError("at least one model is required")
        names = [_slug(m.name) for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigurationError("model names must be distinct")
        if self.distance.kind != "sinkhorn":
            raise ConfigurationError("the report distance must be of kind 'sinkhorn'")

    def to_dict(self):
        if isinstance(self.dataset, SyntheticConfig):
            dataset = {"synthetic": self.dataset.to_dict()}
        else:
            dataset = self.dataset.to_dict()
        return {
            "name": self.name,
            "dataset": dataset,
            "train": self.train.to_dict(),
            "models": [m.to_dict() for m in self.models],
            "repeats": self.repeats,
            "seeds": list(self.seeds),
            "output_dir": str(self.output_dir),
            "split_fractions": list(self.split_fractions),
            "distance": self.distance.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc, base_dir=None):
        doc = dict(doc)
        if "dataset" not in doc:
            raise ConfigurationError("experiment config needs a 'dataset' entry")
        ds = doc.pop("dataset")
        base = Path(base_dir) if base_dir is not None else None

        def resolve(p):
            p = Path(p)
            return str(base / p) if base is not None and not p.is_absolute() else str(p)

        if "synthetic" in ds:
            dataset = SyntheticConfig.from_dict(ds["synthetic"])
        elif "path" in ds and "schema" in ds:
            dataset = DatasetSource(resolve(ds["path"]), resolve(ds["schema"]))
        else:
            raise ConfigurationError("dataset must give 'synthetic' or both 'path' and 'schema'")
        kwargs = {"dataset": dataset}
        if "train" in doc:
            kwargs["train"] = TrainConfig.from_dict(doc.pop("train"))
        if "models" in doc:
            kwargs["models"] = tuple(ModelSpec.from_dict(m) for m in doc.pop("models"))
        if "output_dir" in doc:
            kwargs["output_dir"] = resolve(doc.pop("output_dir"))
        if "split_fractions" in doc:
            kwargs["split_fractions"] = tuple(doc.pop("split_fractions"))
        if "distance" in doc:
            kwargs["distance"] = DistanceConfig.from_dict(doc.pop("distance"))
        if doc.get("seeds") is not None:
            doc["seeds"] = tuple(doc["seeds"])
        try:
            return cls(**kwargs, **doc)
        except TypeError as exc:
            raise ConfigurationError(f"bad experiment config: {exc}") from exc


def load_experiment_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc.msg}") from exc
    try:
        return ExperimentConfig.from_dict(doc, base_dir=path.parent)
    except TypeError as exc:
        raise ConfigurationError(f"bad config {path}: {exc}") from exc


def _slug(name):
    return re.sub(r"[^A-Za-z0-9_.+-]+", "_", str(name)).strip("_") or "model"


def load_experiment_dataset(cfg):
    if isinstance(cfg.dataset, SyntheticConfig):
        return generate_synthetic(cfg.dataset)
    return load_dataset(cfg.dataset.path, load_schema(cfg.dataset.schema))


def _dump(doc, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1) + "\n")


# -- distance report ----------------------------------------------------------


@dataclass(frozen=True)
class DistanceRow:
    attribute: str
    group: str
    kind: str
    n_group: int
    value: float  # None when the group is absent

    @property
    def status(self):
        return "absent" if self.value is None else "ok"


def split_scores(model, ds, score_mode=PAIRED_MODE):
    """Similarity scores of every (image, text) pair of ``ds`` under ``model``."""
    I, _ = _project(ds.image_embeddings, model.image_projection)
    T, _ = _project(ds.text_embeddings, model.text_projection)
    batch = Batch(I, T, ds.labels, {}, validate=False)
    return similarity_scores(batch, score_mode)


def distance_report(model, ds, distances=(DistanceConfig(),), score_mode=PAIRED_MODE):
    """``d(D, D_a)`` on the full score sets of ``ds`` for every attribute, group and distance."""
    if len(ds) == 0:
        raise DataError("distance report needs a non-empty dataset")
    scores = split_scores(model, ds, score_mode)
    population = ScoreDistribution(scores)
    rows = []
    for attr in ds.schema.names:
        labels = ds.group_labels(attr)
        for group in ds.schema.groups(attr):
            member = scores[labels == group]
            if member.size and score_mode.group_normalization == "divide_by_sum":
                member = member / member.sum()
            for cfg in distances:
                if member.size == 0:
                    rows.append(DistanceRow(attr, group, cfg.kind, 0, None))
                    continue
                value = distance(population, ScoreDistribution(member), cfg)
                rows.append(DistanceRow(attr, group, cfg.kind, int(member.size), float(value)))
    return rows


def distance_rows_to_csv(rows):
    lines = ["attribute,group,kind,n_group,distance"]
    for r in rows:
        value = "absent" if r.value is None else repr(r.value)
        lines.append(f"{r.attribute},{r.group},{r.kind},{r.n_group},{value}")
    return "\n".join(lines) + "\n"


def median_group_distance(rows, attribute, kind="sinkhorn"):
    values = [r.value for r in rows if r.attribute == attribute and r.kind == kind and r.value is not None]
    return float(np.median(values)) if values else None


# -- experiments --------------------------------------------------------------


def run_single(ds, spec, cfg, seed, run_dir=None):
    """Split, train, evaluate on the test split; return the run record."""
    train_cfg = spec.train_config(cfg.train, seed)
    ds_train, ds_val, ds_test = split_dataset(ds, cfg.split_fractions, seed)
    best, history = train(ds_train, ds_val, ds_test, train_cfg)
    if run_dir is not None:
        for ck in history:
            doc = ck.to_dict()
            doc["schema"] = ds.schema.to_dict()
            doc["config"] = train_cfg.to_dict()
            _dump(doc, Path(run_dir) / f"epoch_{ck.epoch}.json")
    metrics = evaluate_model(best.params, best.prompts, ds_test)
    rows = distance_report(best.params, ds_test, (cfg.distance,), train_cfg.loss.score_mode)
    return {
        "status": "ok",
        "best_epoch": best.epoch,
        "selection_split": train_cfg.selection_split,
        "test_metrics": metrics.to_dict(),
        "median_distance": {a: median_group_distance(rows, a) for a in ds.schema.names},
        "distances": [dataclasses.asdict(r) for r in rows],
        "regularizer_trajectory": [ck.regularizer_value for ck in history],
        "train_loss_trajectory": [ck.train_loss for ck in history],
    }


def run_experiment(cfg, write=True):
    """Train every model for every seed; returns the list of run records.

    With ``write=True`` the checkpoints, per-run results and the aggregate
    report (JSON and CSV) are written under ``cfg.output_dir``.
    """
    from .tables import aggregate, emit_tables

    ds = load_experiment_dataset(cfg)
    out = Path(cfg.output_dir)
    if write:
        _dump(cfg.to_dict(), out / "resolved_config.json")
    results = []
    for index, spec in enumerate(cfg.models):
        for seed in cfg.seeds:
            run_dir = out / "runs" / f"{_slug(cfg.name)}-{_slug(spec.name)}" / str(seed)
            header = {"experiment": cfg.name, "model": spec.name, "model_index": index,
                      "mode": spec.mode, "seed": seed, "attributes": ds.schema.to_dict()}
            try:
                record = run_single(ds, spec, cfg, seed, run_dir if write else None)
            except FairsinkError as exc:
                log.error("run %s/%s seed %s failed: %s", cfg.name, spec.name, seed, exc)
                record = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
            record = {**header, **record}
            if write:
                _dump(record, run_dir / "result.json")
            results.append(record)
    if write:
        table = aggregate(results)
        (out / "report.json").write_text(emit_tables(table, "json"))
        (out / "report.csv").write_text(emit_tables(table, "csv"))
    return results


def collect_results(runs_dir):
    """Read every ``result.json`` below ``runs_dir`` in a deterministic order."""
    runs_dir = Path(runs_dir)
    if not runs_dir.is_dir():
        raise DataError(f"runs directory not found: {runs_dir}")
    results = [json.loads(p.read_text()) for p in sorted(runs_dir.rglob("result.json"))]
    if not results:
        raise DataError(f"no result.json files under {runs_dir}")
    results.sort(key=lambda r: (r["experiment"], r["model_index"], r["seed"]))
    return results


# -- sweep --------------------------------------------------------------------

_ALIASES = {
    "lambda": ("loss", "lam"),
    "lam": ("loss", "lam"),
    "learning_rate": ("learning_rate",),
    "epochs": ("epochs",),
    "batch_size": ("batch_size",),
    "projection_dim": ("projection_dim",),
    "group_sample_size": ("loss", "group_sample_size"),
    "epsilon": ("loss", "distance", "epsilon"),
    "bandwidth": ("loss", "distance", "bandwidth"),
}


def _replace_path(obj, path, value):
    if len(path) == 1:
        return dataclasses.replace(obj, **{path[0]: value})
    return dataclasses.replace(obj, **{path[0]: _replace_path(getattr(obj, path[0]), path[1:], value)})


def with_override(cfg, key, value):
    if key not in _ALIASES:
        raise ConfigurationError(f"unknown sweep parameter {key!r}; choose from {sorted(_ALIASES)}")
    return dataclasses.replace(cfg, train=_replace_path(cfg.train, _ALIASES[key], value))


def sweep(grid, base, model=None):
    """Exhaustive grid search scored by the mean validation selection metric.

    Every cell trains ``model`` (default: the first model of ``base``) once per
    seed with validation-split selection. Returns ``(best_config, table)``;
    ties go to the smaller lambda, then the smaller learning rate.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigurationError("sweep grid must be non-empty")
    cells = list(ParameterGrid({k: list(v) for k, v in grid.items()}))
    if len(cells) > MAX_GRID:
        raise ConfigurationError(f"grid has {len(cells)} cells; at most {MAX_GRID} are allowed")
    spec = base.models[0] if model is None else next((m for m in base.models if m.name == model), None)
    if spec is None:
        raise ConfigurationError(f"model {model!r} is not in the config")
    if {"lambda", "lam"} & set(grid):
        spec = dataclasses.replace(spec, lam=None)  # the grid value wins over the model's own
    ds = load_experiment_dataset(base)
    table = []
    for params in cells:
        cfg = base
        for key, value in sorted(params.items()):
            cfg = with_override(cfg, key, value)
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, selection_split="val"))
        values, error = [], None
        for seed in cfg.seeds:
            train_cfg = spec.train_config(cfg.train, seed)
            try:
                tr, va, te = split_dataset(ds, cfg.split_fractions, seed)
                best, _ = train(tr, va, None, train_cfg)
                metric = train_cfg.selection_metric
                rep = best.val_metrics
                values.append(rep.auc if metric == "auc" else rep.es_auc(metric.split(":", 1)[1]))
            except FairsinkError as exc:
                error = f"{type(exc).__name__}: {exc}"
                break
        train_cfg = spec.train_config(cfg.train, cfg.seeds[0])
        table.append({
            "params": dict(sorted(params.items())),
            "lambda": train_cfg.loss.lam,
            "learning_rate": train_cfg.learning_rate,
            "metric": float(np.mean(values)) if error is None else math.nan,
            "metric_std": float(np.std(values, ddof=1)) if error is None and len(values) > 1 else 0.0,
            "status": "ok" if error is None else "failed",
            "error": error,
            "config": cfg,
        })
    ok = [row for row in table if row["status"] == "ok"]
    if not ok:
        raise ConfigurationError("every sweep cell failed")
    best = min(ok, key=lambda r: (-r["metric"], r["lambda"], r["learning_rate"]))
    return best["config"], table


def sweep_table_csv(table):
    keys = list(table[0]["params"])
    lines = [",".join([*keys, "metric", "metric_std", "status"])]
    for row in table:
        cells = [repr(row["params"][k]) for k in keys]
        lines.append(",".join([*cells, repr(row["metric"]), repr(row["metric_std"]), row["status"]]))
    return "\n".join(lines) + "\n"


def dataset_from_checkpoint_doc(doc, data_path, schema_path=None):
    from ..dataspace import AttributeSchema

    if schema_path is not None:
        schema = load_schema(schema_path)
    elif "schema" in doc:
        schema = AttributeSchema.from_dict(doc["schema"])
    else:
        raise ConfigurationError("no schema: pass --schema or use a checkpoint written by the harness")
    return load_dataset(data_path, schema)


__all__ = [
    "Dataset", "DatasetSource", "DistanceRow", "ExperimentConfig", "ModelSpec", "collect_results",
    "distance_report", "distance_rows_to_csv", "load_experiment_config", "median_group_distance",
    "run_experiment", "split_scores", "sweep", "sweep_table_csv", "with_override",
]
