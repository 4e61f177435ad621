"""Command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataspace import save_dataset, save_schema
from .errors import ConfigurationError, DataError, FairsinkError
from .harness.experiment import (
    collect_results,
    dataset_from_checkpoint_doc,
    distance_report,
    distance_rows_to_csv,
    load_experiment_config,
    run_experiment,
    sweep,
    sweep_table_csv,
)
from .harness.synthetic import SyntheticConfig, generate_synthetic
from .harness.tables import aggregate, emit_tables
from .objective import PAIRED_MODE, ScoreMode
from .trainer import Checkpoint, evaluate_model
from .transport import KINDS, DistanceConfig

log = logging.getLogger("fairsink")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigurationError.exit_code, f"{self.prog}: error: {message}\n")


def _read_json(path, what):
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{what} {path} is not valid JSON: {exc.msg}") from exc


def _write(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def schema_path_for(data_path):
    p = Path(data_path)
    return p.with_name(p.stem + ".schema.json")


def cmd_generate(args):
    try:
        cfg = SyntheticConfig.from_dict(_read_json(args.config, "config"))
    except TypeError as exc:
        raise ConfigurationError(f"bad synthetic config: {exc}") from exc
    ds = generate_synthetic(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, args.out)
    schema_out = args.schema_out or schema_path_for(args.out)
    save_schema(ds.schema, schema_out)
    print(f"wrote {len(ds)} samples to {args.out} and the schema to {schema_out}")


def cmd_train(args):
    cfg = load_experiment_config(args.config)
    if args.output_dir is not None:
        from dataclasses import replace

        cfg = replace(cfg, output_dir=args.output_dir)
    results = run_experiment(cfg)
    for r in results:
        status = r["status"] if r["status"] == "ok" else f"failed ({r['error']})"
        extra = f" best epoch {r['best_epoch']}, test AUC {100 * r['test_metrics']['auc']:.2f}" if r["status"] == "ok" else ""
        print(f"{r['model']} seed {r['seed']}: {status}{extra}")
    print(f"outputs in {cfg.output_dir}")


def _load_checkpoint(args):
    doc = _read_json(args.checkpoint, "checkpoint")
    try:
        ck = Checkpoint.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed checkpoint {args.checkpoint}: {exc}") from exc
    ds = dataset_from_checkpoint_doc(doc, args.data, args.schema)
    return doc, ck, ds


def cmd_evaluate(args):
    _, ck, ds = _load_checkpoint(args)
    report = evaluate_model(ck.params, ck.prompts, ds)
    _write(json.dumps(report.to_dict(percent=True), indent=1) + "\n", args.out)


def cmd_distances(args):
    doc, ck, ds = _load_checkpoint(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise ConfigurationError(f"unknown distance kinds {bad}; choose from {KINDS}")
    configs = [DistanceConfig(kind=k, epsilon=args.epsilon, bandwidth=args.bandwidth) for k in kinds]
    score_mode = PAIRED_MODE
    if "config" in doc:
        score_mode = ScoreMode.from_dict(doc["config"]["loss"]["score_mode"])
    _write(distance_rows_to_csv(distance_report(ck.params, ds, configs, score_mode)), args.out)


def cmd_sweep(args):
    cfg = load_experiment_config(args.config)
    grid = _read_json(args.grid, "grid")
    if not isinstance(grid, dict):
        raise ConfigurationError("grid file must be a JSON object of parameter -> list of values")
    best, table = sweep(grid, cfg, args.model)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_table_csv(table))
    (out / "best_config.json").write_text(json.dumps(best.to_dict(), indent=1) + "\n")
    winner = next(r for r in table if r["config"] is best)
    print(f"best {winner['params']} metric {winner['metric']:.6f}; table in {out / 'sweep.csv'}")


def cmd_report(args):
    table = aggregate(collect_results(args.runs))
    _write(emit_tables(table, args.format), args.out)


def build_parser():
    p = _Parser(prog="fairsink", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic dataset and its schema")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--schema-out", default=None, help="default: <out stem>.schema.json")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run every model and seed of an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--output-dir", default=None)
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("evaluate", cmd_evaluate, "zero-shot metrics of a checkpoint"),
                              ("distances", cmd_distances, "per-group distance table of a checkpoint")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--schema", default=None, help="default: the schema stored in the checkpoint")
        e.add_argument("--out", default=None)
        if name == "distances":
            e.add_argument("--kinds", default="sinkhorn,mmd_gaussian,mmd_laplacian")
            e.add_argument("--epsilon", type=float, default=DistanceConfig.epsilon)
            e.add_argument("--bandwidth", type=float, default=DistanceConfig.bandwidth)
        e.set_defaults(func=func)

    s = sub.add_parser("sweep", help="grid search scored on the validation split")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--model", default=None, help="model name to tune (default: the first)")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="aggregate result.json files into a table")
    r.add_argument("--runs", required=True)
    r.add_argument("--format", choices=("csv", "json", "markdown"), default="csv")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except FairsinkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
