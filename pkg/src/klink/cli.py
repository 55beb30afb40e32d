"""Command-line front door: data preparation, training, evaluation, studies."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import knowledge as K
from . import training as TR
from .align import LossWeights
from .metrics import MetricsReport
from .signal import SensorEncoderConfig
from .tensor import finite_difference_check

GRADCHECK_EPS = 3e-4  # balances FD roundoff on zero-gradient entries against truncation


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema

_SCHEMA = {
    "task": str,
    "category": str,
    "n_classes": int,
    "class_names": list,
    "data": {"train": str, "validation": str, "test": str},
    "model": {
        "block_channels": list,
        "kernel": int,
        "hidden_dim": int,
        "head_hidden": list,
        "patch_size": int,
        "window": int,
    },
    "train": {
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "seed": int,
        "seeds": list,
        "precision": str,
    },
    "loss": {
        "tau": float,
        "lambda_s": float,
        "lambda_l": float,
        "lambda_e": float,
        "similarity": str,
    },
    "knowledge": {"embeddings": (str, type(None)), "fallback_seed": int, "embed_dim": int},
    "ablation": {name: bool for name in TR.ABLATION_VARIANTS if name != "full"},
}


def _validate(payload, schema, prefix=""):
    for key, value in payload.items():
        path = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {path!r}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _validate(value, expected, prefix=f"{path}.")
        elif expected is float:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"config key {path!r} must be a number")
        elif expected is int:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"config key {path!r} must be an integer")
        elif isinstance(expected, tuple):
            if not isinstance(value, expected):
                raise ConfigError(f"config key {path!r} has the wrong type")
        elif not isinstance(value, expected):
            raise ConfigError(f"config key {path!r} must be {expected.__name__}")


def load_config(path: str | Path) -> TR.TrainConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    _validate(payload, _SCHEMA)
    for section in ("task", "data", "model"):
        if section not in payload:
            raise ConfigError(f"config is missing required section {section!r}")
    model = payload["model"]
    encoder = SensorEncoderConfig(
        block_channels=list(model["block_channels"]),
        kernel=int(model["kernel"]),
        hidden_dim=int(model["hidden_dim"]),
        head_hidden=list(model.get("head_hidden", [])),
    )
    train_sec = payload.get("train", {})
    loss_sec = payload.get("loss", {})
    knowledge_sec = payload.get("knowledge", {})
    ablation_sec = payload.get("ablation", {})
    try:
        return TR.TrainConfig(
            task=payload["task"],
            encoder=encoder,
            patch_size=int(model["patch_size"]),
            window=int(model.get("window", 2)),
            n_classes=payload.get("n_classes"),
            class_names=payload.get("class_names"),
            category=payload.get("category", "signal class"),
            loss=LossWeights(
                tau=float(loss_sec.get("tau", 0.1)),
                lambda_s=float(loss_sec.get("lambda_s", 1e-4)),
                lambda_l=float(loss_sec.get("lambda_l", 1e-2)),
                lambda_e=float(loss_sec.get("lambda_e", 1e-3)),
                downstream="cross_entropy" if payload["task"] == "classification" else "mse_regression",
                similarity=loss_sec.get("similarity", "dot"),
            ),
            epochs=int(train_sec.get("epochs", 50)),
            batch_size=int(train_sec.get("batch_size", 16)),
            learning_rate=float(train_sec.get("learning_rate", 1e-3)),
            seed=int(train_sec.get("seed", 0)),
            seeds=list(train_sec.get("seeds", range(10))),
            precision=train_sec.get("precision", "float64"),
            embed_dim=int(knowledge_sec.get("embed_dim", 512)),
            embeddings_path=knowledge_sec.get("embeddings"),
            fallback_seed=int(knowledge_sec.get("fallback_seed", 0)),
            ablation=TR.AblationSwitches(**ablation_sec),
            train_path=payload["data"]["train"],
            validation_path=payload["data"]["validation"],
            test_path=payload["data"]["test"],
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None


# ---------------------------------------------------------------------------
# manifests and outputs


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, config_snapshot) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": getattr(args, "config", None),
        "config": config_snapshot,
        "out_dir": str(out_dir),
        "seed": getattr(args, "seed", None),
        "created_unix": time.time(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str), encoding="utf-8")


def write_metric_records(path: Path, reports: dict[str, MetricsReport]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for variant, report in reports.items():
            for seed, metrics in report.per_seed.items():
                for metric, value in metrics.items():
                    fh.write(json.dumps({"variant": variant, "seed": seed, "metric": metric, "value": value}) + "\n")


def summary_table(reports: dict[str, MetricsReport]) -> str:
    lines = []
    width = max(len(v) for v in reports)
    for variant, report in reports.items():
        lines.append(f"{variant:<{width}}  {report.summary()}")
    return "\n".join(lines)


def _apply_overrides(config: TR.TrainConfig, args: argparse.Namespace) -> TR.TrainConfig:
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "embeddings", None):
        config = dataclasses.replace(config, embeddings_path=args.embeddings)
    if getattr(args, "fallback_embeddings", False):
        config = dataclasses.replace(config, embeddings_path=None)
    if getattr(args, "variant", None):
        config = dataclasses.replace(config, ablation=TR.AblationSwitches.for_variant(args.variant))
    return config


def _load_table(config: TR.TrainConfig) -> K.EmbeddingTable | None:
    return K.load_table(config.embeddings_path) if config.embeddings_path else None


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(args) -> int:
    out = Path(args.out)
    if args.format == "synthetic":
        spec = D.SyntheticSpec(seed=args.seed if args.seed is not None else 7)
        corpus = D.make_synthetic(spec)
        write_manifest(out, "prepare-data", args, dataclasses.asdict(spec))
        D.write_samples(out / "train.jsonl", corpus.split.train)
        D.write_samples(out / "validation.jsonl", corpus.split.validation)
        D.write_samples(out / "test.jsonl", corpus.split.test)
        corpus.stats.save(out / "stats.json")
        (out / "relations.json").write_text(json.dumps(corpus.relations.tolist()), encoding="utf-8")
        meta = {
            "sensor_names": corpus.sensor_names,
            "groups": corpus.groups,
            "class_names": corpus.class_names,
        }
        (out / "meta.json").write_text(json.dumps(meta), encoding="utf-8")
        n_patches = corpus.split.train[0].length // args.patch_size
        table = K.group_consistent_table(
            corpus.sensor_names, corpus.groups, n_patches, corpus.class_names, "signal class", seed=spec.seed
        )
        K.save_table(out / "embeddings.jsonl", table)
        print(f"wrote synthetic corpus to {out}")
        return 0
    if args.format == "rul-raw":
        if not args.source:
            print("error: --source is required for rul-raw", file=sys.stderr)
            return 2
        source = Path(args.source)
        if not source.exists():
            print(f"error: source file not found: {source}", file=sys.stderr)
            return 1
        units, names = D.read_turbofan_raw(source)
        samples, warnings = D.ingest_rul_corpus(units, names, args.window, args.stride, args.cap)
        for w in warnings:
            print(f"warning: unit {w.unit}: {w.message}", file=sys.stderr)
        write_manifest(out, "prepare-data", args, {"source": str(source)})
        unit_of = lambda s: s.sample_id.split(":")[0]
        if args.split_granularity == "unit":
            split = D.split_by_subject(samples, unit_of, (1 - args.val_fraction, args.val_fraction, 0.0), args.seed or 0)
        else:
            split = D.split_random(samples, (1 - args.val_fraction, args.val_fraction, 0.0), args.seed or 0)
        stats = D.NormalizationStats.fit(split.train)
        D.write_samples(out / "train.jsonl", D.minmax_normalize(split.train, stats))
        D.write_samples(out / "validation.jsonl", D.minmax_normalize(split.validation, stats))
        stats.save(out / "stats.json")
        if args.test_source:
            test_units, _ = D.read_turbofan_raw(args.test_source)
            rul_values = np.loadtxt(args.test_rul).reshape(-1)
            labels = {str(i + 1): float(v) for i, v in enumerate(rul_values)}
            test_samples, test_warnings = D.last_window_samples(test_units, names, args.window, labels, args.cap)
            for w in test_warnings:
                print(f"warning: unit {w.unit}: {w.message}", file=sys.stderr)
            D.write_samples(out / "test.jsonl", D.minmax_normalize(test_samples, stats))
        print(f"wrote {len(split.train)} train / {len(split.validation)} validation samples to {out}")
        return 0
    print(f"error: unknown format {args.format!r}", file=sys.stderr)
    return 2


def cmd_emit_prompts(args) -> int:
    samples = D.read_samples(args.data)
    if not samples:
        print("error: dataset is empty", file=sys.stderr)
        return 1
    n_patches = samples[0].length // args.patch_size
    class_names = args.class_names.split(",") if args.class_names else None
    prompts: list[str] = []
    sensor_set = K.build_prompts(samples[0].sensor_names, n_patches, args.category, "unused")
    prompts.extend(sensor_set.flat_sensor_prompts())
    label_texts = []
    for s in samples:
        label = int(s.label) if class_names else s.label
        label_texts.append(K.render_label(label, class_names))
    for text in dict.fromkeys(label_texts):
        prompts.append(K.LABEL_PROMPT_TEMPLATE.format(category=args.category, label=text))
    unique = list(dict.fromkeys(prompts))
    Path(args.out).write_text("\n".join(unique) + "\n", encoding="utf-8")
    print(f"wrote {len(unique)} prompts to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    write_manifest(out, "train", args, dataclasses.asdict(config))
    result = TR.train(config, table=_load_table(config))
    TR.save_checkpoint(out / "model.ckpt", result.checkpoint)
    test_samples = D.read_samples(config.test_path)
    report = TR.evaluate(result.checkpoint, test_samples, config)
    reports = {"test": report}
    write_metric_records(out / "metrics.jsonl", reports)
    (out / "summary.txt").write_text(summary_table(reports) + "\n", encoding="utf-8")
    (out / "history.json").write_text(
        json.dumps({"epoch_losses": result.epoch_losses, "best_epoch": result.best_epoch}), encoding="utf-8"
    )
    print(f"best epoch {result.best_epoch}; test: {report.summary()}")
    return 0


def cmd_eval(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    checkpoint = TR.load_checkpoint(args.checkpoint)
    samples = D.read_samples(getattr(config, f"{args.split}_path"))
    out = Path(args.out)
    write_manifest(out, "eval", args, dataclasses.asdict(config))
    report = TR.evaluate(checkpoint, samples, config)
    write_metric_records(out / "metrics.jsonl", {args.split: report})
    if args.dump_features:
        n_patches = samples[0].length // config.patch_size
        model = TR.KLinkModel(config, samples[0].n_sensors, n_patches)
        model.load_state(checkpoint.tensors)
        TR.dump_node_features(model, samples, args.dump_features)
    print(f"{args.split}: {report.summary()}")
    return 0


def cmd_ablate(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    write_manifest(out, "ablate", args, dataclasses.asdict(config))
    split = TR.load_split_from_config(config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    reports = TR.run_ablation(config, split, _load_table(config), seeds=seeds)
    write_metric_records(out / "metrics.jsonl", reports)
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_sweep(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out = Path(args.out)
    write_manifest(out, "sweep", args, dataclasses.asdict(config))
    split = TR.load_split_from_config(config)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    curve = TR.sweep_lambda(config, args.lam, split, _load_table(config), seeds=seeds)
    reports = {f"lambda_{args.lam}={value:g}": report for value, report in curve}
    write_metric_records(out / "metrics.jsonl", reports)
    table = summary_table(reports)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_gradcheck(args) -> int:
    loss_fn, params = TR.gradcheck_setup(seed=args.seed or 0)
    report = finite_difference_check(loss_fn, params, eps=GRADCHECK_EPS, tol=1e-4)
    print(f"max rel err {report.max_rel_error:.3e} (tol 1.0e-04)")
    if not report.passed:
        print(f"error: gradient check failed at {report.worst_param}[{report.worst_index}]", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="klink", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--variant", choices=TR.ABLATION_VARIANTS, default=None)
        p.add_argument("--embeddings", default=None, help="embedding table file")
        p.add_argument(
            "--fallback-embeddings", action="store_true", help="ignore any table, use the deterministic embedder"
        )

    p = sub.add_parser("prepare-data", help="build dataset files from a source")
    p.add_argument("--format", required=True, choices=["synthetic", "rul-raw"])
    p.add_argument("--source", default=None)
    p.add_argument("--test-source", default=None)
    p.add_argument("--test-rul", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--window", type=int, default=50)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=8, help="patch size the synthetic embeddings cover")
    p.add_argument("--cap", type=float, default=D.DEFAULT_RUL_CAP)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--split-granularity", choices=["unit", "window"], default="unit")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("emit-prompts", help="write the unique prompt list for a dataset")
    p.add_argument("--data", required=True, help="sample file (jsonl)")
    p.add_argument("--patch-size", type=int, required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--class-names", default=None, help="comma-separated class names")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_prompts)

    p = sub.add_parser("train", help="train and write the best checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--dump-features", default=None, help="write raw node features to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation variants")
    common(p)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one alignment weight")
    common(p)
    p.add_argument("--lambda", dest="lam", required=True, choices=["S", "L", "E"])
    p.add_argument("--seeds", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference check of the combined loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
