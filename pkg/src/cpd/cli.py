"""Command-line surface: data generation, training, evaluation, zero-shot
classification, and metric plotting.

Configuration comes from an optional ``key = value`` file (``#`` starts a
comment) plus repeated ``--set key=value`` overrides; unknown keys are
rejected. Every successful run writes a resolved-config snapshot into the
output directory that replays the run exactly.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import evaluation, plots, trainer
from .errors import (
    CheckpointFormatError,
    CpdError,
    DatasetParseError,
    DatasetSchemaError,
    InvalidConfigError,
    NumericFaultError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

DATASET_FILENAME = "pairs.cpd"
CHECKPOINT_FILENAME = "checkpoint.cpdckpt"
METRICS_FILENAME = "metrics.csv"


def _dataclass_schema(cls) -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else type(f.default) for f in dataclasses.fields(cls)}


# Per-command key schemas: name -> (python type, default or REQUIRED).
_REQUIRED = object()

TRAIN_KEYS: dict[str, tuple[type, object]] = {
    **{
        f.name: (type(f.default), f.default)
        for f in dataclasses.fields(trainer.TrainingConfig)
    },
    "data": (str, _REQUIRED),
    "checkpoint_every": (int, 0),
}

GEN_DATA_KEYS: dict[str, tuple[type, object]] = {
    **{
        f.name: (type(f.default), f.default)
        for f in dataclasses.fields(data_mod.SyntheticSpec)
    },
    "train_frac": (float, 0.8),
    "val_frac": (float, 0.1),
    "test_frac": (float, 0.1),
    "split_seed": (int, 0),
    "name": (str, DATASET_FILENAME),
}

EVAL_KEYS: dict[str, tuple[type, object]] = {
    "checkpoint": (str, _REQUIRED),
    "data": (str, _REQUIRED),
    "k": (int, 25),
    "probe_lr": (float, 1e-3),
    "probe_epochs": (int, 30),
    "probe_batch_size": (int, 16),
    "standardize": (bool, True),
    "seed": (int, 0),
}

ZEROSHOT_KEYS: dict[str, tuple[type, object]] = {
    "checkpoint": (str, _REQUIRED),
    "data": (str, _REQUIRED),
    "prototypes": (str, ""),
}

PLOT_KEYS: dict[str, tuple[type, object]] = {}


class ConfigKeyError(InvalidConfigError):
    pass


def parse_kv_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigKeyError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_overrides(pairs: list[str]) -> dict[str, str]:
    values: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigKeyError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(key: str, value, target: type):
    if isinstance(value, target):
        return value
    text = str(value)
    try:
        if target is bool:
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigKeyError(f"bad value for {key}: {exc}") from None


def resolve_config(schema: dict[str, tuple[type, object]], raw: dict[str, str]) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigKeyError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for key, (target, default) in schema.items():
        if key in raw:
            resolved[key] = _coerce(key, raw[key], target)
        elif default is _REQUIRED:
            raise ConfigKeyError(f"missing required config key: {key}")
        else:
            resolved[key] = default
    return resolved


def write_snapshot(out_dir: Path, command: str, resolved: dict) -> None:
    lines = [f"{key} = {resolved[key]}" for key in sorted(resolved)]
    (out_dir / f"{command}.resolved.cfg").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolve_out_dir(args) -> Path:
    out_dir = args.out_dir or os.environ.get("CPD_OUT_DIR")
    if not out_dir:
        raise ConfigKeyError("no output directory: pass --out-dir or set CPD_OUT_DIR")
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_split_dataset(path: str) -> data_mod.PairedDataset:
    dataset = data_mod.load(path)
    if not dataset.splits:
        raise InvalidConfigError(
            f"dataset {path} has no splits sidecar; regenerate it with gen-data"
        )
    return dataset


def cmd_gen_data(args) -> int:
    out_dir = _resolve_out_dir(args)
    resolved = resolve_config(GEN_DATA_KEYS, _gather(args))
    spec = data_mod.SyntheticSpec(
        n_classes=resolved["n_classes"],
        per_class=resolved["per_class"],
        d_v=resolved["d_v"],
        d_t=resolved["d_t"],
        sigma=resolved["sigma"],
        rho=resolved["rho"],
        seed=resolved["seed"],
    )
    dataset = data_mod.generate(spec)
    dataset = data_mod.split(
        dataset,
        (resolved["train_frac"], resolved["val_frac"], resolved["test_frac"]),
        resolved["split_seed"],
    )
    path = out_dir / resolved["name"]
    data_mod.save(dataset, path)
    proto_v, proto_t = data_mod.prototypes(spec)
    proto_ds = data_mod.PairedDataset(
        ids=np.arange(spec.n_classes),
        labels=np.arange(spec.n_classes),
        visual=proto_v,
        text=proto_t,
        provenance="synthetic",
    )
    data_mod.save(proto_ds, Path(str(path) + ".prototypes"))
    write_snapshot(out_dir, "gen-data", resolved)
    print(f"wrote {path} ({len(dataset)} pairs) + splits + prototypes")
    return EXIT_OK


def _history_to_csv(out_dir: Path, history: list[trainer.MetricsRecord]) -> Path:
    path = out_dir / METRICS_FILENAME
    lines = [trainer.METRICS_CSV_HEADER] + [rec.csv_row() for rec in history]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def cmd_train(args) -> int:
    out_dir = _resolve_out_dir(args)
    resolved = resolve_config(TRAIN_KEYS, _gather(args))
    config_kwargs = {
        f.name: resolved[f.name] for f in dataclasses.fields(trainer.TrainingConfig)
    }
    config = trainer.TrainingConfig(**config_kwargs)
    dataset = _load_split_dataset(resolved["data"])
    write_snapshot(out_dir, "train", resolved)

    ckpt_path = out_dir / CHECKPOINT_FILENAME
    every = resolved["checkpoint_every"]
    history: list[trainer.MetricsRecord] = []

    def on_epoch(state, record):
        history.append(record)
        _history_to_csv(out_dir, history)
        if every and (record.epoch + 1) % every == 0:
            ckpt_mod.save_checkpoint(ckpt_path, ckpt_mod.Checkpoint.from_state(state))

    try:
        result = trainer.run_curriculum(dataset, config, epoch_callback=on_epoch)
    except NumericFaultError:
        # The trainer rolled back to the last good state; leave any previously
        # written checkpoint in place and report the fault.
        raise
    ckpt_mod.save_checkpoint(ckpt_path, ckpt_mod.Checkpoint.from_state(result.state))
    _history_to_csv(out_dir, result.history)
    final = result.history[-1]
    print(
        f"trained {config.objective} for {len(result.history)} epochs; "
        f"final recall@1 {final.recall1:.3f} (stage {final.stage})"
    )
    return EXIT_OK


def _frozen_sets(params, dataset, layer_tag, split_a, split_b):
    feats_a = evaluation.extract_features(params, dataset.visual[split_a], layer_tag)
    feats_b = evaluation.extract_features(params, dataset.visual[split_b], layer_tag)
    return (
        evaluation.LabeledFeatureSet(feats_a, dataset.labels[split_a], layer_tag),
        evaluation.LabeledFeatureSet(feats_b, dataset.labels[split_b], layer_tag),
    )


def cmd_eval(args) -> int:
    out_dir = _resolve_out_dir(args)
    resolved = resolve_config(EVAL_KEYS, _gather(args))
    ckpt = ckpt_mod.load_checkpoint(resolved["checkpoint"])
    dataset = _load_split_dataset(resolved["data"])
    if not dataset.labeled:
        raise InvalidConfigError("eval needs a labeled dataset")
    write_snapshot(out_dir, "eval", resolved)

    train_idx = dataset.splits["train"]
    test_idx = dataset.splits["test"]
    probe_cfg = evaluation.ProbeConfig(
        lr=resolved["probe_lr"],
        epochs=resolved["probe_epochs"],
        batch_size=resolved["probe_batch_size"],
        standardize=resolved["standardize"],
        seed=resolved["seed"],
    )
    results = []
    for layer_tag in evaluation.LAYER_TAGS:
        train_set, test_set = _frozen_sets(ckpt.visual, dataset, layer_tag, train_idx, test_idx)
        knn_pred = evaluation.knn_classify(train_set, test_set.features, resolved["k"])
        knn_acc = float(np.mean(knn_pred == test_set.labels))
        results.append(
            {
                "protocol": "knn",
                "layer_tag": layer_tag,
                "k": resolved["k"],
                "accuracy": knn_acc,
                "seed": resolved["seed"],
            }
        )
        probe_acc = evaluation.linear_probe(train_set, test_set, probe_cfg)
        results.append(
            {
                "protocol": "linear_probe",
                "layer_tag": layer_tag,
                "config": dataclasses.asdict(probe_cfg),
                "accuracy": probe_acc,
                "seed": resolved["seed"],
            }
        )
    emb_v = evaluation.extract_features(ckpt.visual, dataset.visual[test_idx], "embedding")
    emb_t = evaluation.extract_features(ckpt.text, dataset.text[test_idx], "embedding")
    ks = sorted({k for k in (1, 5, resolved["k"]) if k <= test_idx.shape[0]})
    recalls = evaluation.retrieval_recall(emb_v, emb_t, ks)
    results.append(
        {
            "protocol": "retrieval",
            "layer_tag": "embedding",
            "k": ks,
            "recall": {d: {str(k): v for k, v in r.items()} for d, r in recalls.items()},
            "seed": resolved["seed"],
        }
    )
    (out_dir / "eval.json").write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    rows = ["protocol,layer_tag,metric,value"]
    for entry in results:
        if "accuracy" in entry:
            rows.append(f"{entry['protocol']},{entry['layer_tag']},accuracy,{entry['accuracy']!r}")
    (out_dir / "eval.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {out_dir / 'eval.json'}")
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    out_dir = _resolve_out_dir(args)
    resolved = resolve_config(ZEROSHOT_KEYS, _gather(args))
    ckpt = ckpt_mod.load_checkpoint(resolved["checkpoint"])
    dataset = _load_split_dataset(resolved["data"])
    if not dataset.labeled:
        raise InvalidConfigError("zeroshot needs a labeled dataset")
    proto_path = resolved["prototypes"] or resolved["data"] + ".prototypes"
    proto_ds = data_mod.load(proto_path)
    write_snapshot(out_dir, "zeroshot", resolved)

    test_idx = dataset.splits["test"]
    predictions = evaluation.zero_shot_classify(
        proto_ds.text, dataset.visual[test_idx], ckpt.text, ckpt.visual
    )
    predicted_labels = proto_ds.labels[predictions]
    accuracy = float(np.mean(predicted_labels == dataset.labels[test_idx]))
    payload = {
        "protocol": "zeroshot",
        "n_classes": int(len(proto_ds)),
        "n_videos": int(test_idx.shape[0]),
        "accuracy": accuracy,
    }
    (out_dir / "zeroshot.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    print(f"zero-shot accuracy {accuracy:.3f} over {len(proto_ds)} classes")
    return EXIT_OK


def _read_metrics_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def cmd_plot(args) -> int:
    out_dir = _resolve_out_dir(args)
    resolved = resolve_config(PLOT_KEYS, _gather(args))
    csv_paths = [Path(p) for p in args.metrics]
    if not csv_paths:
        raise ConfigKeyError("plot needs at least one metrics CSV path")
    for p in csv_paths:
        if not p.exists():
            raise FileNotFoundError(f"metrics file not found: {p}")
    write_snapshot(out_dir, "plot", resolved)

    all_series: dict[str, list[plots.Series]] = {"train_loss": [], "recall1": [], "recall5": []}
    plotted_any = False
    for path in csv_paths:
        rows = _read_metrics_csv(path)
        if not rows:
            print(f"warning: {path} has no data rows, skipping", file=sys.stderr)
            continue
        plotted_any = True
        label = rows[0]["objective"]
        xs = [float(r["epoch"]) for r in rows]
        markers = [
            float(rows[i]["epoch"])
            for i in range(1, len(rows))
            if rows[i]["stage"] != rows[i - 1]["stage"]
        ]
        for metric in all_series:
            ys = [float(r[metric]) for r in rows]
            all_series[metric].append(plots.Series(name=label, xs=xs, ys=ys, markers=markers))
    if not plotted_any:
        return EXIT_OK
    for metric, series in all_series.items():
        out_path = out_dir / f"{metric}.svg"
        plots.render_chart(series, title=f"{metric} vs epoch", ylabel=metric, out_path=out_path)
        print(f"wrote {out_path}")
    return EXIT_OK


def _gather(args) -> dict[str, str]:
    raw: dict[str, str] = {}
    if args.config:
        raw.update(parse_kv_file(args.config))
    raw.update(parse_overrides(args.set or []))
    return raw


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": (cmd_gen_data, "generate a synthetic paired dataset"),
        "train": (cmd_train, "train encoders on a paired dataset"),
        "eval": (cmd_eval, "evaluate frozen features from a checkpoint"),
        "zeroshot": (cmd_zeroshot, "zero-shot classification via class prototypes"),
        "plot": (cmd_plot, "render metrics CSVs as SVG charts"),
    }
    for name, (func, help_text) in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out-dir", help="output directory (fallback: $CPD_OUT_DIR)")
        if name == "plot":
            p.add_argument("metrics", nargs="*", help="metrics CSV files")
        p.set_defaults(func=func)
    return parser


def _log_error(args, message: str) -> None:
    print(f"error: {message}", file=sys.stderr)
    out_dir = args.out_dir or os.environ.get("CPD_OUT_DIR")
    if out_dir:
        try:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            (path / "error.log").write_text(message + "\n", encoding="utf-8")
        except OSError:
            pass


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericFaultError as exc:
        _log_error(args, f"numeric fault: {exc}")
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError, DatasetParseError, DatasetSchemaError, CheckpointFormatError) as exc:
        _log_error(args, f"i/o error: {exc}")
        return EXIT_IO
    except CpdError as exc:
        _log_error(args, f"config error: {exc}")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
