"""Batch command line: ``mmfusion {gen-data,train,ablate,compare,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure during training, 5 gradient check failure.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import (
    AUGMENTATIONS,
    DatasetMeta,
    DatasetSpec,
    atomic_write,
    bayes_accuracy,
    generate,
    read_dataset,
    save_dataset,
)
from .errors import (
    ConfigError,
    ConfigTypeError,
    FormatError,
    MMFusionError,
    NumericFailure,
    TooFewSamples,
    UnknownKey,
)
from .estimator import MultimodalClassifier
from .fusion import BRANCHES, FUSION_MODES
from .gradcheck import format_report, run_checks
from .metrics import compare_baselines, evaluate, metrics_csv, run_ablation
from .tensor import Rng
from .training import TrainConfig, save_checkpoint, split_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


# --- configuration ------------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _names(allowed: Sequence[str]) -> Callable[[str], tuple[str, ...]]:
    def parse(text: str) -> tuple[str, ...]:
        items = tuple(t.strip() for t in text.split(",") if t.strip())
        if any(t not in allowed for t in items):
            raise ValueError(text)
        return items
    return parse


def _choice(allowed: Sequence[str]) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in allowed:
            raise ValueError(text)
        return text
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


SCHEMA: dict[str, Key] = {
    "data.n_samples": Key(int, 1000),
    "data.n_classes": Key(int, 3),
    "data.size": Key(int, 6, "image side, 6 or 12"),
    "data.max_len": Key(int, 8),
    "data.vocab_size": Key(int, 16),
    "data.d_s": Key(int, 4),
    "data.s_img": Key(float, 0.75),
    "data.s_seq": Key(float, 0.75),
    "data.s_struct": Key(float, 0.75),
    "data.noise": Key(float, 0.3),
    "data.seed": Key(int, 1),
    "data.bayes_samples": Key(int, 10_000, "Monte-Carlo draws for the Bayes oracle"),
    "train.lr": Key(float, 0.001),
    "train.batch_size": Key(int, 32),
    "train.patience": Key(int, 10),
    "train.lr_decay_factor": Key(float, 0.5),
    "train.lr_decay_every": Key(int, 20),
    "train.max_epochs": Key(int, 200),
    "train.seed": Key(int, 0),
    "train.augment": Key(_names(AUGMENTATIONS), ()),
    "train.standardize": Key(_bool, True),
    "fusion.mode": Key(_choice(FUSION_MODES), "attention"),
    "model.branches": Key(_names(BRANCHES), BRANCHES),
    "model.d_f": Key(int, 16),
    "model.conv_channels": Key(int, 8),
    "model.cnn_pool": Key(int, 2),
    "model.embed_dim": Key(int, 16),
    "model.rnn_hidden": Key(int, 32),
    "model.d_model": Key(int, 8),
    "model.depth": Key(int, 1),
    "model.fcn_hidden": Key(int, 16),
    "model.classifier_hidden": Key(int, 8),
    "model.projection_activation": Key(_choice(("relu", "tanh", "sigmoid", "identity")), "tanh"),
}


def _set(config: dict, key: str, text: str) -> None:
    if key not in SCHEMA:
        raise UnknownKey(f"unknown config key {key!r}")
    try:
        config[key] = SCHEMA[key].parse(text.strip())
    except ValueError:
        raise ConfigTypeError(key, text) from None


def _split_pair(line: str, sep: str) -> tuple[str, str]:
    if sep not in line:
        raise ConfigError(f"expected 'key {sep} value', got {line!r}")
    key, value = line.split(sep, 1)
    return key.strip(), value.strip()


def parse_config(path=None, overrides: Sequence[str] = ()) -> dict[str, Any]:
    """Defaults, then the file, then ``key=value`` overrides."""
    config = {k: v.default for k, v in SCHEMA.items()}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                _set(config, *_split_pair(line, "="))
    for item in overrides:
        _set(config, *_split_pair(item, "="))
    return config


def dataset_spec(config) -> DatasetSpec:
    return DatasetSpec(**{k[5:]: v for k, v in config.items()
                          if k.startswith("data.") and k != "data.bayes_samples"})


def estimator_from(config, meta: DatasetMeta) -> MultimodalClassifier:
    model = {k[6:]: v for k, v in config.items() if k.startswith("model.")}
    return MultimodalClassifier(
        fusion_mode=config["fusion.mode"], n_classes=meta.n_classes, max_len=meta.L_max,
        vocab_size=meta.vocab_size, lr=config["train.lr"], batch_size=config["train.batch_size"],
        patience=config["train.patience"], lr_decay_factor=config["train.lr_decay_factor"],
        lr_decay_every=config["train.lr_decay_every"], max_epochs=config["train.max_epochs"],
        seed=config["train.seed"], augment=config["train.augment"],
        standardize=config["train.standardize"], **model)


def train_config(config) -> TrainConfig:
    return TrainConfig(lr=config["train.lr"], batch_size=config["train.batch_size"],
                       patience=config["train.patience"],
                       lr_decay_factor=config["train.lr_decay_factor"],
                       lr_decay_every=config["train.lr_decay_every"],
                       max_epochs=config["train.max_epochs"], seed=config["train.seed"])


# --- subcommands ----------------------------------------------------------------


class DataError(MMFusionError):
    pass


def write_text(path, text: str) -> None:
    atomic_write(path, lambda fh: fh.write(text.encode("utf-8")))


def load_splits(config, data_path):
    if data_path is None:
        raise ConfigError("--data is required")
    try:
        samples, meta = read_dataset(data_path)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {data_path}") from exc
    splits = split_dataset(samples, train_config(config), Rng(config["train.seed"]))
    return splits, meta


def cmd_gen_data(config, out) -> int:
    spec = dataset_spec(config)
    samples = generate(spec)
    save_dataset(out, samples, DatasetMeta.from_spec(spec))
    print(f"n_samples={len(samples)}")
    for view, acc in bayes_accuracy(spec, n=config["data.bayes_samples"]).items():
        print(f"bayes_{view}={acc:.4f}")
    return EXIT_OK


def cmd_train(config, data_path, out) -> int:
    (train, val, test), meta = load_splits(config, data_path)
    clf = estimator_from(config, meta).fit(train, eval_set=val)
    table = metrics_csv([evaluate(clf, test, "test")])
    out = Path(out)
    save_checkpoint(out, clf.checkpoint_params())
    write_text(out.with_suffix(".epochs.csv"), clf.report_.to_csv())
    print(table, end="")
    return EXIT_OK


def _cmd_table(harness, config, data_path, out) -> int:
    splits, meta = load_splits(config, data_path)
    text = metrics_csv(harness(splits, estimator_from(config, meta)))
    write_text(out, text)
    print(text, end="")
    return EXIT_OK


def cmd_ablate(config, data_path, out) -> int:
    return _cmd_table(run_ablation, config, data_path, out)


def cmd_compare(config, data_path, out) -> int:
    return _cmd_table(compare_baselines, config, data_path, out)


def cmd_gradcheck(config, checks=None) -> int:
    results = run_checks(checks)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


# --- entry point ------------------------------------------------------------------


DEFAULT_OUT = {"gen-data": "data.mmds", "train": "model.mmf", "ablate": "ablation.csv",
               "compare": "compare.csv", "gradcheck": None}
COMMAND_HELP = {
    "gen-data": "write a synthetic MMDS dataset and print its Bayes accuracies",
    "train": "train one model, write the MMF1 checkpoint and print test metrics",
    "ablate": "retrain with each of cnn, rnn, vit removed",
    "compare": "unimodal CNN, RNN and ViT baselines against the fused model",
    "gradcheck": "finite-difference check of every differentiable op",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--out", help="output path")
    common.add_argument("--data", help="MMDS dataset path")
    common.add_argument("--seed", type=int, help="sets data.seed and train.seed")
    parser = argparse.ArgumentParser(prog="mmfusion", description="Multimodal fusion classifier.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in COMMAND_HELP.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv: Sequence[str] | None = None, checks=None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or DEFAULT_OUT[args.command]
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"data.seed={args.seed}", f"train.seed={args.seed}"]
        config = parse_config(args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(config, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(config, checks)
        command = {"train": cmd_train, "ablate": cmd_ablate, "compare": cmd_compare}[args.command]
        with np.errstate(over="ignore", invalid="ignore"):
            return command(config, args.data, out)
    except NumericFailure as exc:
        return _fail(exc, EXIT_NUMERIC)
    except (DataError, FormatError, TooFewSamples, OSError) as exc:
        return _fail(exc, EXIT_DATA)
    except (ConfigError, MMFusionError, ValueError) as exc:
        return _fail(exc, EXIT_CONFIG)


def _fail(exc: Exception, code: int) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
