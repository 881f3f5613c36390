"""Command line interface: the batch pipeline from data files to result files.

Every subcommand reads one optional JSON config (overridable with repeated
`--set key=value` flags), funnels all randomness through a single seed, and
finishes by writing a run manifest; a manifest on disk means the run
completed. Outputs are byte-identical across reruns with the same inputs
and seed, except for the timestamps confined to the manifest itself.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .compute import write_json_atomic
from .data import (
    LabelSchema,
    SynthConfig,
    denormalize_labels,
    fold_round,
    load_annotations,
    load_embeddings,
    normalize_labels,
    save_annotations,
    save_embeddings,
    save_schema,
    split_folds,
    synth_generate,
)
from .errors import AnnoflowError, ConfigError, JoinError
from .infer import (
    density_curve,
    discretize_binary,
    discretize_regression,
    head_inputs,
    head_task_for,
    hybrid_feature_table,
    train_deterministic,
    train_hybrid,
    write_density_curve,
)
from .metrics import macro_f1, nll_metric, r_squared
from .train import (
    config_from_dict,
    config_to_dict,
    config_with,
    grid_search,
    load_model,
    model_for_dataset,
    run_experiment,
    save_model,
    train_model,
)

SECTIONS = ("train", "synth", "experiment", "grid", "discretize", "curves", "hybrid")

DEFAULT_CONFIG = {
    "train": {},
    "synth": {},
    "experiment": {"families": ["maf"], "personalizations": ["none"]},
    "grid": {"axes": {}, "families": ["maf"], "personalizations": ["none"]},
    "discretize": {"n": 100, "pick": "weighted", "seed": 0},
    "curves": {"dim": 0, "start": 0.0, "stop": 1.0, "step": 0.1, "others": 0.5},
    "hybrid": {"head_hidden": [16], "n": 100, "seed": 0},
}


# -- config plumbing ---------------------------------------------------------------


def load_config(path, sets):
    config = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in user.items():
            if key not in SECTIONS:
                raise ConfigError(f"unknown config section {key!r}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            config[key].update(value)
    for item in sets or []:
        _apply_set(config, item)
    return config


def _apply_set(config, item):
    if "=" not in item:
        raise ConfigError(f"--set needs key=value, got {item!r}")
    key, raw = item.split("=", 1)
    parts = key.split(".")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config section {parts[0]!r} in --set {key}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set path {key!r} crosses a non-object value")
    node[parts[-1]] = value


def _train_config(config, args):
    payload = dict(config["train"])
    cfg = config_from_dict(payload)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "dequantize", False):
        overrides["dequantize"] = True
    return config_with(cfg, overrides) if overrides else cfg


def _synth_config(config, args):
    payload = dict(config["synth"])
    if args.seed is not None:
        payload["seed"] = args.seed
    if isinstance(payload.get("schema"), dict):
        payload["schema"] = LabelSchema.from_dict(payload["schema"])
    try:
        return SynthConfig(**payload)
    except TypeError as err:
        raise ConfigError(f"bad synth config: {err}") from err


def _prepared_dataset(args, train_cfg):
    dataset = load_annotations(args.annotations, args.embeddings, args.schema)
    dataset = normalize_labels(
        dataset, dequantize=train_cfg.dequantize, seed=train_cfg.seed
    )
    mode = "strict" if args.strict_user_split else "text"
    return split_folds(dataset, k=args.folds, mode=mode, seed=train_cfg.seed)


# -- output helpers ---------------------------------------------------------------


def _write_jsonl(path, rows):
    text = "".join(json.dumps(row, sort_keys=True) + "\n" for row in rows)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _file_checksum(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]


class _Run:
    """Collects artifact names so the manifest can list every output."""

    def __init__(self, out_dir):
        self.out_dir = out_dir
        self.artifacts = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        self.artifacts.append(name)
        return os.path.join(self.out_dir, name)


def _write_manifest(run, command, config, seed, started_at, started_clock):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(run.artifacts),
        "version": __version__,
        "started_at": started_at,
        "finished_at": datetime.now(timezone.utc).isoformat(),
        "duration_seconds": time.monotonic() - started_clock,
    }
    write_json_atomic(os.path.join(run.out_dir, "manifest.json"), manifest)


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args, config):
    scfg = _synth_config(config, args)
    dataset = synth_generate(scfg)
    run = _Run(args.out)
    save_annotations(run.path("annotations.jsonl"), dataset)
    save_embeddings(run.path("embeddings.jsonl"), dataset.embeddings, dataset.embedding_dim)
    save_schema(run.path("schema.json"), dataset.schema)
    echo = {f.name: getattr(scfg, f.name) for f in dataclasses.fields(SynthConfig)}
    echo["group_offsets"] = list(echo["group_offsets"])
    echo["schema"] = scfg.schema.to_dict() if scfg.schema is not None else None
    return run, {"synth": echo}, scfg.seed


def cmd_train(args, config):
    tcfg = _train_config(config, args)
    dataset = _prepared_dataset(args, tcfg)
    round_ = fold_round(dataset, args.test_fold)
    model = model_for_dataset(tcfg, dataset, train_idx=round_.train_idx)
    model, report = train_model(model, dataset, round_, tcfg)
    run = _Run(args.out)
    save_model(run.path("model.json"), model, tcfg, schema=dataset.schema)
    write_json_atomic(run.path("train_report.json"), report.to_dict())
    if not args.no_figures:
        from .report import plot_training_history

        plot_training_history(report, run.path("history.png"))
    test = "n/a" if report.test_nll is None else f"{report.test_nll:.4f}"
    print(
        f"best epoch {report.best_epoch}: validation NLL {report.best_val_nll:.4f}, "
        f"test NLL {test}"
    )
    return run, {"train": config_to_dict(tcfg)}, tcfg.seed


def cmd_experiment(args, config):
    tcfg = _train_config(config, args)
    dataset = _prepared_dataset(args, tcfg)
    section = config["experiment"]
    families = args.families.split(",") if args.families else list(section["families"])
    personalizations = (
        args.personalizations.split(",")
        if args.personalizations
        else list(section["personalizations"])
    )
    result = run_experiment(
        dataset, families, personalizations, tcfg,
        dataset_name=os.path.basename(args.annotations), jobs=args.jobs,
    )
    run = _Run(args.out)
    _write_jsonl(run.path("results.jsonl"), result.rows)
    write_json_atomic(run.path("summary.json"), result.summary)
    if not args.no_figures and result.summary:
        from .report import plot_experiment_summary

        plot_experiment_summary(result.summary, run.path("summary.png"))
    failed = sum(1 for row in result.rows if row.get("test_nll") is None)
    print(f"{len(result.rows)} runs, {failed} failed")
    snapshot = {
        "train": config_to_dict(tcfg),
        "experiment": {"families": families, "personalizations": personalizations},
    }
    return run, snapshot, tcfg.seed


def cmd_grid(args, config):
    tcfg = _train_config(config, args)
    dataset = _prepared_dataset(args, tcfg)
    section = config["grid"]
    families = args.families.split(",") if args.families else list(section["families"])
    personalizations = (
        args.personalizations.split(",")
        if args.personalizations
        else list(section["personalizations"])
    )
    axes = section["axes"]
    if not isinstance(axes, dict):
        raise ConfigError("grid.axes must map config fields to value lists")
    result = grid_search(
        dataset, families, personalizations, axes, tcfg,
        test_fold=args.test_fold, jobs=args.jobs,
    )
    run = _Run(args.out)
    _write_jsonl(run.path("trace.jsonl"), result.trace)
    write_json_atomic(run.path("best.json"), result.best)
    print(f"{len(result.trace)} grid points, {len(result.best)} cells selected")
    snapshot = {
        "train": config_to_dict(tcfg),
        "grid": {"axes": axes, "families": families,
                 "personalizations": personalizations},
    }
    return run, snapshot, tcfg.seed


def cmd_discretize(args, config):
    model, tcfg, bundle_schema = load_model(args.model)
    if args.seed is not None:
        tcfg = config_with(tcfg, {"seed": args.seed})
    raw = load_annotations(args.annotations, args.embeddings, args.schema)
    if bundle_schema is not None and bundle_schema.dim != raw.schema.dim:
        raise ConfigError("model bundle schema does not match the data schema")
    dataset = normalize_labels(raw, dequantize=False, seed=tcfg.seed)
    section = config["discretize"]
    task = head_task_for(dataset.schema)
    cache = {}
    rows = []
    predictions = np.zeros_like(dataset.labels)
    for i in range(len(dataset)):
        text_id = dataset.text_ids[i]
        aidx = int(model.annot_indices([dataset.annotator_ids[i]])[0])
        key = (text_id, aidx if model.profile.dim > 0 else 0)
        if key not in cache:
            emb = dataset.embeddings[text_id]
            if task == "classification":
                decision = discretize_binary(model, emb, aidx)
                cache[key] = decision.classes.astype(np.float64)
            else:
                decision = discretize_regression(
                    model, emb, dataset.schema, aidx,
                    n=int(section["n"]), seed=int(section["seed"]),
                    pick=section["pick"],
                )
                cache[key] = decision.values
        predictions[i] = cache[key]
        rows.append({
            "text_id": text_id,
            "annotator_id": dataset.annotator_ids[i],
            "prediction": denormalize_labels(dataset.schema, cache[key]).tolist(),
            "truth": raw.labels[i].tolist(),
        })
    aidx_all = model.annot_indices(dataset.annotator_ids)
    metrics = {
        "task": task,
        "records": len(dataset),
        "nll": nll_metric(model, dataset.labels, dataset.text_matrix(), aidx_all),
    }
    if task == "classification":
        metrics["macro_f1"] = macro_f1(dataset.labels, predictions)
    else:
        metrics["r_squared"] = r_squared(dataset.labels, predictions)
    run = _Run(args.out)
    _write_jsonl(run.path("predictions.jsonl"), rows)
    write_json_atomic(run.path("metrics.json"), metrics)
    name = "macro_f1" if task == "classification" else "r_squared"
    print(f"{task}: {name} {metrics[name]:.4f} over {len(dataset)} records")
    return run, {"discretize": dict(section), "train": config_to_dict(tcfg)}, tcfg.seed


def cmd_hybrid(args, config):
    model, tcfg, _ = load_model(args.model)
    if args.seed is not None:
        tcfg = config_with(tcfg, {"seed": args.seed})
    dataset = _prepared_dataset(args, tcfg)
    round_ = fold_round(dataset, args.test_fold)
    section = config["hybrid"]
    features = hybrid_feature_table(
        model, dataset, n=int(section["n"]), seed=int(section["seed"])
    )
    head_hidden = tuple(section["head_hidden"])
    baseline, base_report = train_deterministic(
        model, dataset, round_, tcfg, head_hidden=head_hidden
    )
    hybrid, hybrid_report = train_hybrid(
        model, dataset, round_, tcfg, features, head_hidden=head_hidden
    )
    task = head_task_for(dataset.schema)
    y_test = dataset.label_matrix(round_.test_idx)
    x_base = head_inputs(model, dataset, round_.test_idx)
    x_hybrid = head_inputs(model, dataset, round_.test_idx, features[round_.test_idx])
    if task == "classification":
        metric = "macro_f1"
        base_score = macro_f1(y_test, baseline.predict(x_base))
        hybrid_score = macro_f1(y_test, hybrid.predict(x_hybrid))
    else:
        metric = "r_squared"
        base_score = r_squared(y_test, baseline.predict(x_base))
        hybrid_score = r_squared(y_test, hybrid.predict(x_hybrid))
    run = _Run(args.out)
    feature_rows = [
        {
            "text_id": dataset.text_ids[i],
            "annotator_id": dataset.annotator_ids[i],
            "features": features[i].tolist(),
        }
        for i in range(len(dataset))
    ]
    _write_jsonl(run.path("features.jsonl"), feature_rows)
    write_json_atomic(run.path("hybrid_report.json"), {
        "task": task,
        "metric": metric,
        "deterministic": {"score": base_score, "epochs": base_report.epochs,
                          "best_val_loss": base_report.best_val_nll},
        "hybrid": {"score": hybrid_score, "epochs": hybrid_report.epochs,
                   "best_val_loss": hybrid_report.best_val_nll},
    })
    if not args.no_figures:
        from .report import plot_training_history

        plot_training_history(hybrid_report, run.path("history.png"))
    print(f"{metric}: deterministic {base_score:.4f}, hybrid {hybrid_score:.4f}")
    return run, {"hybrid": dict(section), "train": config_to_dict(tcfg)}, tcfg.seed


def cmd_curves(args, config):
    model, tcfg, _ = load_model(args.model)
    embeddings, _dim = load_embeddings(args.embeddings)
    text_id = args.text if args.text is not None else next(iter(embeddings))
    if text_id not in embeddings:
        raise JoinError("no embedding for requested text", text_id=text_id)
    aidx = 0
    if args.annotator is not None:
        aidx = int(model.annot_indices([args.annotator])[0])
    section = dict(config["curves"])
    for field in ("dim", "start", "stop", "step"):
        value = getattr(args, field)
        if value is not None:
            section[field] = value
    rows = density_curve(
        model, embeddings[text_id], int(section["dim"]),
        float(section["start"]), float(section["stop"]), float(section["step"]),
        annot_idx=aidx, others=float(section["others"]),
    )
    run = _Run(args.out)
    header = {
        "model": _file_checksum(args.model),
        "text": text_id,
        "annotator": args.annotator if args.annotator is not None else "",
        "dim": int(section["dim"]),
        "grid": f"{section['start']}:{section['stop']}:{section['step']}",
    }
    write_density_curve(run.path("curve.csv"), rows, header=header)
    if not args.no_figures:
        from .report import plot_density_curve

        plot_density_curve(rows, run.path("curve.png"), dim=int(section["dim"]))
    print(f"{len(rows)} grid points for text {text_id}")
    return run, {"curves": section, "train": config_to_dict(tcfg)}, tcfg.seed


# -- argument parsing ----------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", default=None, help="JSON config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value (dotted path)")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip rendering PNG figures")


def _add_data(parser):
    parser.add_argument("--annotations", required=True)
    parser.add_argument("--embeddings", required=True)
    parser.add_argument("--schema", required=True)
    parser.add_argument("--folds", type=int, default=10)
    parser.add_argument("--test-fold", type=int, default=0, dest="test_fold")
    parser.add_argument("--strict-user-split", action="store_true",
                        dest="strict_user_split",
                        help="drop test records whose annotator was trained on")
    parser.add_argument("--dequantize", action="store_true",
                        help="add uniform noise half a step wide to the labels")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="annoflow",
        description="Conditional density models of subjective annotation.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model on one CV round")
    _add_common(p)
    _add_data(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="cross-validated model comparison")
    _add_common(p)
    _add_data(p)
    p.add_argument("--families", default=None, help="comma list of model families")
    p.add_argument("--personalizations", default=None,
                   help="comma list of personalization kinds")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("grid", help="hyperparameter grid search")
    _add_common(p)
    _add_data(p)
    p.add_argument("--families", default=None)
    p.add_argument("--personalizations", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("discretize", help="point predictions from a trained model")
    _add_common(p)
    p.add_argument("--model", required=True, help="model bundle from train")
    p.add_argument("--annotations", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--schema", required=True)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("hybrid", help="deterministic heads with density features")
    _add_common(p)
    _add_data(p)
    p.add_argument("--model", required=True, help="model bundle from train")
    p.set_defaults(func=cmd_hybrid)

    p = sub.add_parser("curves", help="density sweep along one dimension")
    _add_common(p)
    p.add_argument("--model", required=True, help="model bundle from train")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--text", default=None, help="text id (default: first in file)")
    p.add_argument("--annotator", default=None, help="annotator id for the context")
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--start", type=float, default=None)
    p.add_argument("--stop", type=float, default=None)
    p.add_argument("--step", type=float, default=None)
    p.set_defaults(func=cmd_curves)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    started_at = datetime.now(timezone.utc).isoformat()
    started_clock = time.monotonic()
    try:
        config = load_config(args.config, args.set)
        run, snapshot, seed = args.func(args, config)
        _write_manifest(run, args.command, snapshot, seed, started_at, started_clock)
    except AnnoflowError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
