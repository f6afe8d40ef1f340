from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path
from typing import TYPE_CHECKING, Any

import requests
from loguru import logger

from causal_attention_tuning import settings
from causal_attention_tuning.annotator import EndpointConfig, annotate_file, estimate_cost, estimate_cost_single_rate
from causal_attention_tuning.causal_supervision import SkipReport
from causal_attention_tuning.dataset import encode_records, full_text
from causal_attention_tuning.evaluator import (
    attention_by_class,
    evaluate,
    export_density,
    export_heatmap,
    ratio_satisfaction,
    write_report,
)
from causal_attention_tuning.model import Checkpoint, ModelConfig, init_params, load_checkpoint, parameter_count, save_checkpoint
from causal_attention_tuning.prompts import TEMPLATES
from causal_attention_tuning.settings import ConfigurationError, apply_overrides, read_run_config, section, write_snapshot
from causal_attention_tuning.stg import HIGH_RISK, LOW_RISK, example_from_record, schema_for, split_sizes, write_dataset
from causal_attention_tuning.tokenizer import build_vocab, load_vocab, save_vocab, vocab_digest
from causal_attention_tuning.trainer import TrainConfig, TrainingError, run_alpha_sweep, train
from causal_attention_tuning.utils import make_run_dir, read_jsonl

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    from causal_attention_tuning.dataset import EncodedExample
    from causal_attention_tuning.model import LoraAdapter, Params
    from causal_attention_tuning.stg import StgExample
    from causal_attention_tuning.tokenizer import Vocab


def parse_grid(text: str) -> list[float]:
    """Parse "start:stop:step" (stop included) or a comma-separated list.

    Raises:
        ConfigurationError: If the grid is empty or malformed.
    """
    try:
        bounds: list[float] = [float(part) for part in text.split(":")] if ":" in text else []
        values: list[float] = [] if bounds else [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        msg: str = f"Cannot parse grid {text!r}"
        raise ConfigurationError(msg) from e

    if bounds:
        if len(bounds) != 3:  # noqa: PLR2004
            msg = f"Grid {text!r} must be start:stop:step"
            raise ConfigurationError(msg)
        start, stop, step = bounds
        if step <= 0 or stop < start:
            msg = f"Grid {text!r} needs start <= stop and a positive step"
            raise ConfigurationError(msg)
        count: int = round((stop - start) / step) + 1
        values = [round(start + index * step, 10) for index in range(count)]

    if not values:
        msg = f"Grid {text!r} is empty"
        raise ConfigurationError(msg)
    return values


COST_DEFAULTS: dict[str, str] = {
    "cost.input_tokens": "168.4",
    "cost.prompt_tokens": "570.0",
    "cost.completion_tokens": "163.9",
    "cost.price_in": "2.5",
    "cost.price_out": "10.0",
}


def _flat_value(value: object) -> str:
    return str(value).lower() if isinstance(value, bool) else str(value)


def _config_defaults(name: str, config_class: type) -> dict[str, str]:
    """Field defaults of a config dataclass as flat "name.field" keys. Fields without a default are left out."""
    return {
        f"{name}.{field.name}": _flat_value(field.default)
        for field in dataclasses.fields(config_class)
        if field.default is not dataclasses.MISSING
    }


def _as_path(path: Path | None) -> str | None:
    return None if path is None else str(path.absolute())


def _run_path(flat: dict[str, str], key: str, flag: str) -> Path:
    if not flat.get(key):
        msg: str = f"Missing {flag} (or {key} in the config)"
        raise ConfigurationError(msg)
    return Path(flat[key])


def _run_config(args: argparse.Namespace, flags: dict[str, Any], defaults: dict[str, str] | None = None) -> dict[str, str]:
    """Defaults, then the config file, then explicit flags, then --set overrides."""
    flat: dict[str, str] = dict(defaults or {})
    flat.update(read_run_config(args.config))
    flat.update({key: _flat_value(value) for key, value in flags.items() if value is not None})
    return apply_overrides(flat, args.set)


def _open_run(args: argparse.Namespace, flat: dict[str, str]) -> Path:
    """Create the run directory and snapshot the full effective config into it."""
    run_dir: Path = make_run_dir(args.out, flat, args.command)
    write_snapshot(flat, run_dir)
    return run_dir


def _load_examples(path: Path) -> list[StgExample]:
    return [example_from_record(record) for record in read_jsonl(path)]


def _split_file(data: Path, split: str) -> Path | None:
    candidate: Path = data / f"{split}.jsonl"
    return candidate if candidate.is_file() else None


def _variant(flat: dict[str, str], examples: Sequence[StgExample]) -> str:
    """STG variant from the config, or else from the answers (risk labels mean STG_E)."""
    if "stg.variant" in flat:
        return flat["stg.variant"]
    return "e" if not examples or examples[0].answer in {HIGH_RISK, LOW_RISK} else "h"


def command_gen(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        {
            "stg.variant": args.variant,
            "stg.size": args.size,
            "stg.seed": args.seed,
            "stg.train_count": args.train_count,
            "stg.test_count": args.test_count,
            "stg.balance": args.balance,
            "stg.shuffle_factors": True if args.shuffle_factors else None,
        },
        {"stg.variant": "e", "stg.size": "s", "stg.seed": "42", "stg.balance": "true", "stg.shuffle_factors": "false"},
    )
    train_count, test_count = split_sizes(flat["stg.variant"], flat["stg.size"])
    flat.setdefault("stg.train_count", str(train_count))
    flat.setdefault("stg.test_count", str(test_count))
    run_dir: Path = _open_run(args, flat)

    options: dict[str, str] = section(flat, "stg")
    write_dataset(
        run_dir,
        options["variant"],
        options["size"],
        int(options["seed"]),
        train_count=int(options["train_count"]),
        test_count=int(options["test_count"]),
        balance=options["balance"].lower() == "true",
        shuffle_factors=options["shuffle_factors"].lower() == "true",
    )


def command_annotate(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        {
            "run.input": _as_path(args.input),
            "run.output": _as_path(args.output),
            "annotate.template": args.template,
            "annotate.parallel": args.parallel,
            "annotate.attempts": args.attempts,
        },
        {"annotate.template": "stg", "annotate.parallel": "4", "annotate.attempts": "3"},
    )
    source: Path = _run_path(flat, "run.input", "--in")
    options: dict[str, str] = section(flat, "annotate")
    if options["template"] not in TEMPLATES:
        msg: str = f"Unknown template {options['template']!r}, expected one of {', '.join(TEMPLATES)}"
        raise ConfigurationError(msg)
    run_dir: Path = _open_run(args, flat)

    annotate_file(
        source,
        Path(flat["run.output"]) if flat.get("run.output") else run_dir / "annotated.jsonl",
        EndpointConfig.from_settings(),
        TEMPLATES[options["template"]],
        parallelism=int(options["parallel"]),
        attempts=int(options["attempts"]),
    )


def _prepare_training(flat: dict[str, str], data: Path) -> tuple[Vocab, ModelConfig, TrainConfig, list[EncodedExample]]:
    train_path: Path | None = _split_file(data, "train")
    if train_path is None:
        msg: str = f"No train.jsonl in {data}"
        raise ConfigurationError(msg)

    records: list[dict[str, Any]] = read_jsonl(train_path)
    vocab: Vocab = build_vocab([full_text(record["question"], str(record["answer"])) for record in records])
    model_config: ModelConfig = ModelConfig.from_flat(section(flat, "model"), vocab_size=len(vocab))
    train_config: TrainConfig = TrainConfig.from_flat(section(flat, "train"))

    report = SkipReport()
    examples: list[EncodedExample] = encode_records(vocab, records, report)
    longest: int = max(len(example.ids) for example in examples) if examples else 0
    if longest > model_config.max_seq_len:
        msg = f"Longest training sequence has {longest} tokens but model.max_seq_len is {model_config.max_seq_len}"
        raise ConfigurationError(msg)
    if report.missing_phrases:
        logger.bind(stage="train").warning(f"Supervision skipped: {report.as_dict()}")
    logger.bind(stage="train").info(f"Model has {parameter_count(model_config)} parameters, vocabulary {len(vocab)} tokens")
    return vocab, model_config, train_config, examples


def _split_scorer(
    data: Path,
    vocab: Vocab,
    model_config: ModelConfig,
    flat: dict[str, str],
) -> Callable[[Params, list[LoraAdapter]], tuple[float, float]]:
    options: dict[str, str] = section(flat, "eval")
    splits: dict[str, list[StgExample]] = {
        split: _load_examples(path) for split in ("test_iid", "test_ood") if (path := _split_file(data, split)) is not None
    }
    variant: str = _variant(flat, next(iter(splits.values()), []))

    def scorer(params: Params, adapters: list[LoraAdapter]) -> tuple[float, float]:
        accuracies: list[float] = [
            evaluate(
                params,
                model_config,
                vocab,
                splits[split],
                variant,
                split=split,
                decoding=options.get("decoding", "greedy"),  # type: ignore[arg-type]
                adapters=adapters,
            ).accuracy
            if split in splits
            else float("nan")
            for split in ("test_iid", "test_ood")
        ]
        return accuracies[0], accuracies[1]

    return scorer


def _save_model(
    run_dir: Path,
    vocab: Vocab,
    model_config: ModelConfig,
    params: Params,
    adapters: list[LoraAdapter],
    optimizer_state: dict[str, Any],
    optimizer_step: int,
    metadata: dict[str, Any],
) -> None:
    save_vocab(vocab, run_dir / "vocab.txt")
    checkpoint = Checkpoint(
        config=model_config,
        params=params,
        vocab_sha256=vocab_digest(vocab),
        adapters=adapters,
        optimizer_state=optimizer_state,
        optimizer_step=optimizer_step,
        metadata=metadata,
    )
    save_checkpoint(run_dir / "model.ckpt", checkpoint)


def _training_defaults() -> dict[str, str]:
    return _config_defaults("model", ModelConfig) | _config_defaults("train", TrainConfig) | {"eval.decoding": "greedy"}


def command_train(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        {"run.data": _as_path(args.data), "train.mode": args.mode, "train.alpha": args.alpha, "train.seed": args.seed},
        _training_defaults(),
    )
    data: Path = _run_path(flat, "run.data", "--data")
    vocab, model_config, train_config, examples = _prepare_training(flat, data)
    scorer = _split_scorer(data, vocab, model_config, flat)
    run_dir: Path = _open_run(args, flat)

    params: Params = init_params(model_config, train_config.seed)
    params, adapters, record, optimizer = train(params, model_config, examples, train_config)
    record.write(run_dir / "run_record.jsonl")
    _save_model(
        run_dir,
        vocab,
        model_config,
        params,
        adapters,
        optimizer.state_dict(),
        optimizer.t,
        {"mode": train_config.mode, "alpha": train_config.alpha, "seed": train_config.seed},
    )

    iid, ood = scorer(params, adapters)
    with Path.open(run_dir / "results.csv", "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["mode", "alpha", "seed", "iid_accuracy", "ood_accuracy"])
        writer.writerow([train_config.mode, train_config.alpha, train_config.seed, f"{iid:.6f}", f"{ood:.6f}"])
    logger.bind(stage="train").info(f"{train_config.mode}: IID {iid:.3f}, OOD {ood:.3f}")


def command_sweep(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        {"run.data": _as_path(args.data), "train.seed": args.seed, "sweep.alphas": args.alphas},
        _training_defaults() | {"sweep.alphas": "0.05:0.35:0.05"},
    )
    data: Path = _run_path(flat, "run.data", "--data")
    grid: list[float] = parse_grid(flat["sweep.alphas"])
    vocab, model_config, train_config, examples = _prepare_training(flat, data)
    scorer = _split_scorer(data, vocab, model_config, flat)
    run_dir: Path = _open_run(args, flat)

    rows = run_alpha_sweep(examples, grid, model_config, train_config, scorer)
    for row in rows:
        alpha_dir: Path = run_dir / f"alpha_{row.alpha:g}"
        alpha_dir.mkdir()
        write_snapshot(apply_overrides(flat, [f"train.alpha={row.alpha:g}", "train.mode=cat"]), alpha_dir)
        row.record.write(alpha_dir / "run_record.jsonl")

    with Path.open(run_dir / "sweep.csv", "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["alpha", "iid_accuracy", "ood_accuracy"])
        writer.writerows([f"{row.alpha:g}", f"{row.iid_accuracy:.6f}", f"{row.ood_accuracy:.6f}"] for row in rows)


def _load_model(checkpoint_path: Path, vocab_path: Path | None) -> tuple[Checkpoint, Vocab]:
    checkpoint: Checkpoint = load_checkpoint(checkpoint_path)
    vocab: Vocab = load_vocab(vocab_path or checkpoint_path.parent / "vocab.txt")
    if vocab_digest(vocab) != checkpoint.vocab_sha256:
        msg = "The vocabulary does not belong to this checkpoint"
        raise ConfigurationError(msg)
    return checkpoint, vocab


def _model_flags(args: argparse.Namespace) -> dict[str, Any]:
    return {"run.checkpoint": _as_path(args.checkpoint), "run.vocab": _as_path(args.vocab), "run.data": _as_path(args.data)}


def _model_from_config(flat: dict[str, str]) -> tuple[Checkpoint, Vocab]:
    vocab_path: str | None = flat.get("run.vocab")
    return _load_model(_run_path(flat, "run.checkpoint", "--checkpoint"), Path(vocab_path) if vocab_path else None)


def command_eval(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        _model_flags(args) | {"stg.variant": args.variant, "eval.decoding": args.decoding},
        {"eval.decoding": "greedy", "eval.workers": "1"},
    )
    checkpoint, vocab = _model_from_config(flat)
    data: Path = _run_path(flat, "run.data", "--data")
    flat.setdefault("eval.alpha", _flat_value(checkpoint.metadata.get("alpha", TrainConfig.alpha)))
    options: dict[str, str] = section(flat, "eval")
    alpha = float(options["alpha"])

    paths: list[Path] = [data] if data.is_file() else [p for s in ("test_iid", "test_ood") if (p := _split_file(data, s))]
    if not paths:
        msg: str = f"No test files found at {data}"
        raise ConfigurationError(msg)
    run_dir: Path = _open_run(args, flat)

    for path in paths:
        split: str = path.stem
        examples: list[StgExample] = _load_examples(path)
        variant: str = _variant(flat, examples)
        report = evaluate(
            checkpoint.params,
            checkpoint.config,
            vocab,
            examples,
            variant,
            split=split,
            decoding=options.get("decoding", "greedy"),  # type: ignore[arg-type]
            adapters=checkpoint.adapters,
            workers=int(options.get("workers", "1")),
        )
        by_class = attention_by_class(checkpoint.params, checkpoint.config, vocab, examples, schema_for(variant), checkpoint.adapters)
        encoded = encode_records(vocab, [example.to_record() for example in examples])
        report.attention = by_class.summary() | {
            "alpha": alpha,
            "ratio_satisfaction": ratio_satisfaction(checkpoint.params, checkpoint.config, encoded, alpha, checkpoint.adapters),
        }
        write_report(report, run_dir / f"report_{split}.json")
        export_density(by_class, run_dir / f"density_{split}.csv")


def command_export_attn(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(args, _model_flags(args) | {"run.index": args.index}, {"run.index": "0"})
    checkpoint, vocab = _model_from_config(flat)
    examples: list[StgExample] = _load_examples(_run_path(flat, "run.data", "--data"))
    index = int(flat["run.index"])
    if not 0 <= index < len(examples):
        msg: str = f"Record index {index} outside 0..{len(examples) - 1}"
        raise ConfigurationError(msg)
    run_dir: Path = _open_run(args, flat)
    export_heatmap(checkpoint.params, checkpoint.config, vocab, examples[index], run_dir / f"heatmap_{index}.csv", checkpoint.adapters)


def command_cost(args: argparse.Namespace) -> None:
    flat: dict[str, str] = _run_config(
        args,
        {
            "cost.input_tokens": args.input_tokens,
            "cost.prompt_tokens": args.prompt_tokens,
            "cost.completion_tokens": args.completion_tokens,
            "cost.price_in": args.price_in,
            "cost.price_out": args.price_out,
            "cost.single_rate": args.single_rate,
        },
        COST_DEFAULTS,
    )
    run_dir: Path = _open_run(args, flat)
    options: dict[str, float] = {key: float(value) for key, value in section(flat, "cost").items()}
    single_rate: float | None = options.get("single_rate")
    tokens: tuple[float, float, float] = (options["input_tokens"], options["prompt_tokens"], options["completion_tokens"])
    if single_rate is not None:
        cost: float = estimate_cost_single_rate(*tokens, single_rate)
    else:
        cost = estimate_cost(*tokens, options["price_in"], options["price_out"])

    result: dict[str, float | None] = {
        "avg_input_tokens": options["input_tokens"],
        "avg_prompt_tokens": options["prompt_tokens"],
        "avg_completion_tokens": options["completion_tokens"],
        "price_in": options["price_in"],
        "price_out": options["price_out"],
        "single_rate": single_rate,
        "cost_per_million_input_tokens": cost,
    }
    with Path.open(run_dir / "cost.json", "w", encoding="utf-8") as file:
        json.dump(result, file, indent=2)
    logger.bind(stage="cost").info(f"Estimated cost per million input tokens: {cost:.2f}")


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per pipeline step."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config value, e.g. train.alpha=0.3")
    common.add_argument("--out", type=Path, default=Path(settings.runs_dir), help="root directory for run outputs")

    parser = argparse.ArgumentParser(prog="catlab", description="Causal attention tuning experiments on the Spurious Token Game.")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="generate an STG dataset")
    gen.add_argument("--variant", choices=["e", "h"])
    gen.add_argument("--size", choices=["s", "m", "l"])
    gen.add_argument("--seed", type=int)
    gen.add_argument("--train-count", type=int)
    gen.add_argument("--test-count", type=int)
    gen.add_argument("--balance", action=argparse.BooleanOptionalAction, default=None)
    gen.add_argument("--shuffle-factors", action="store_true")

    annotate = commands.add_parser("annotate", parents=[common], help="extract causal maps with a chat-completion endpoint")
    annotate.add_argument("--in", dest="input", type=Path, help="JSONL records to annotate")
    annotate.add_argument("--output", type=Path, help="annotated JSONL to create or resume")
    annotate.add_argument("--template", choices=sorted(TEMPLATES))
    annotate.add_argument("--parallel", type=int)
    annotate.add_argument("--attempts", type=int)

    for name, help_text in (("train", "train one model"), ("sweep", "train one CAT model per alpha")):
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--data", type=Path, help="directory with train.jsonl and test splits")
        sub.add_argument("--seed", type=int)
        if name == "train":
            sub.add_argument("--mode", choices=["cat", "vanilla"])
            sub.add_argument("--alpha", type=float)
        else:
            sub.add_argument("--alphas", help="start:stop:step (inclusive) or a comma list")

    evaluate_parser = commands.add_parser("eval", parents=[common], help="score a checkpoint and measure attention by class")
    evaluate_parser.add_argument("--checkpoint", type=Path)
    evaluate_parser.add_argument("--vocab", type=Path)
    evaluate_parser.add_argument("--data", type=Path, help="a test JSONL file or a dataset directory")
    evaluate_parser.add_argument("--variant", choices=["e", "h"])
    evaluate_parser.add_argument("--decoding", choices=["greedy", "choice"])

    export = commands.add_parser("export-attn", parents=[common], help="write one record's averaged attention map as CSV")
    export.add_argument("--checkpoint", type=Path)
    export.add_argument("--vocab", type=Path)
    export.add_argument("--data", type=Path, help="test JSONL file")
    export.add_argument("--index", type=int)

    cost = commands.add_parser("cost", parents=[common], help="estimate annotation cost per million input tokens")
    cost.add_argument("--input-tokens", type=float)
    cost.add_argument("--prompt-tokens", type=float)
    cost.add_argument("--completion-tokens", type=float)
    cost.add_argument("--price-in", type=float)
    cost.add_argument("--price-out", type=float)
    cost.add_argument("--single-rate", type=float)
    return parser


COMMANDS: dict[str, Callable[[argparse.Namespace], None]] = {
    "gen": command_gen,
    "annotate": command_annotate,
    "train": command_train,
    "sweep": command_sweep,
    "eval": command_eval,
    "export-attn": command_export_attn,
    "cost": command_cost,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand.

    Returns:
        int: 0 on success, 1 if the command failed, 2 on a usage error.
    """
    try:
        args: argparse.Namespace = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        COMMANDS[args.command](args)
    except (ConfigurationError, TrainingError, ValueError, OSError, requests.RequestException) as e:
        logger.bind(stage=args.command).error(f"{type(e).__name__}: {e}")
        return 1
    return 0


def main() -> None:
    """Entry point for the catlab command."""
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
