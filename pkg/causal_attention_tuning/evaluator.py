"""Accuracy on STG splits and where the model's attention goes.

Files written here:

    report JSON    schema_version, split, variant, accuracy and counts,
                   attention summary, per-example predictions
    heatmap CSV    header "token" + one label per token; one row per token
                   with its averaged attention over all keys
    density CSV    class,bin_start,bin_end,count (fixed bins on [0, 1])
    samples CSV    class,record,score (every pooled attention score)
"""

from __future__ import annotations

import csv
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
from loguru import logger

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.causal_supervision import attn_ratio_terms
from causal_attention_tuning.dataset import ANSWER_DELIMITER, encode_example, encode_prompt
from causal_attention_tuning.model import forward, generate_greedy, score_choices
from causal_attention_tuning.stg import HIGH_RISK, LOW_RISK
from causal_attention_tuning.tokenizer import Vocab, detokenize, locate_phrase

if TYPE_CHECKING:
    from collections.abc import Sequence

    from causal_attention_tuning.dataset import EncodedExample
    from causal_attention_tuning.model import LoraAdapter, ModelConfig, Params
    from causal_attention_tuning.stg import StgExample, StgSchema

REPORT_SCHEMA_VERSION = 1
FACTOR_CLASSES: tuple[str, ...] = ("causal", "spurious", "irrelevant")
TOLERANCE = 5

Decoding = Literal["greedy", "choice"]

_RISK: re.Pattern[str] = re.compile(r"\b(High|Low) Risk\b")
_INTEGER: re.Pattern[str] = re.compile(r"-?\d+")


@dataclass
class Prediction:
    expected: str
    generated: str
    parsed: str | None
    correct: bool
    abs_error: float | None = None


@dataclass
class EvalReport:
    """Scores for one split."""

    split: str
    variant: str
    total: int
    correct: int
    unparseable: int
    within_tolerance: int | None = None
    mae: float | None = None
    predictions: list[Prediction] = field(default_factory=list)
    attention: dict[str, Any] = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def tolerance_accuracy(self) -> float | None:
        return None if self.within_tolerance is None else self.within_tolerance / self.total

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "split": self.split,
            "variant": self.variant,
            "total": self.total,
            "correct": self.correct,
            "accuracy": self.accuracy,
            "unparseable": self.unparseable,
            "tolerance": TOLERANCE if self.variant == "h" else None,
            "tolerance_accuracy": self.tolerance_accuracy,
            "mae": self.mae,
            "attention": self.attention,
            "predictions": [asdict(prediction) for prediction in self.predictions],
        }


def parse_answer(text: str, variant: str) -> str | None:
    """Pull the answer out of generated text.

    Only text after the last "Answer:" counts. STG_E takes the last "High Risk"
    or "Low Risk" there; STG_H the last integer.

    Returns:
        str | None: The parsed answer, or None if there is none.
    """
    region: str = text.rpartition(ANSWER_DELIMITER)[2]
    if variant == "e":
        risks: list[str] = [match.group() for match in _RISK.finditer(region)]
        return risks[-1] if risks else None
    integers: list[str] = _INTEGER.findall(region)
    return str(int(integers[-1])) if integers else None


def score(expected: Sequence[str], texts: Sequence[str], variant: str, split: str = "") -> EvalReport:
    """Score generated texts against expected answers.

    Unparseable texts count as wrong. For STG_H, MAE is over parsed answers.
    """
    report = EvalReport(split=split, variant=variant, total=len(expected), correct=0, unparseable=0)
    errors: list[float] = []
    within = 0
    for answer, text in zip(expected, texts, strict=True):
        parsed: str | None = parse_answer(text, variant)
        prediction = Prediction(expected=answer, generated=text, parsed=parsed, correct=parsed == answer)
        if parsed is None:
            report.unparseable += 1
        elif variant == "h":
            prediction.abs_error = abs(int(parsed) - int(answer))
            errors.append(prediction.abs_error)
            within += prediction.abs_error <= TOLERANCE
        report.correct += prediction.correct
        report.predictions.append(prediction)

    if variant == "h":
        report.within_tolerance = within
        report.mae = float(np.mean(errors)) if errors else None
    if report.unparseable:
        logger.bind(stage="eval").warning(f"{report.unparseable} of {report.total} generations had no parseable answer")
    return report


def generate_answer(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    question: str,
    *,
    variant: str,
    decoding: Decoding = "greedy",
    max_new_tokens: int = 8,
    adapters: Sequence[LoraAdapter] | None = None,
) -> str:
    """Generated continuation after "Answer:" for one question."""
    prompt, _ = encode_prompt(vocab, question)
    if decoding == "choice" and variant == "e":
        labels: tuple[str, str] = (HIGH_RISK, LOW_RISK)
        picked: int = score_choices(prompt, [vocab.id_of(label.split()[0]) for label in labels], params, config, adapters)
        return labels[picked]
    ids: list[int] = generate_greedy(prompt, params, config, max_new_tokens, eos_id=vocab.eos_id, adapters=adapters)
    return detokenize(vocab, ids[len(prompt) :])


def evaluate(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    examples: Sequence[StgExample],
    variant: str,
    *,
    split: str = "",
    decoding: Decoding = "greedy",
    max_new_tokens: int = 8,
    adapters: Sequence[LoraAdapter] | None = None,
    workers: int = 1,
) -> EvalReport:
    """Answer every question and score the answers. Parameters are only read.

    Raises:
        ValueError: If there are no examples.
    """
    if not examples:
        msg = "Cannot evaluate an empty test set"
        raise ValueError(msg)

    def answer(example: StgExample) -> str:
        return generate_answer(
            params,
            config,
            vocab,
            example.question,
            variant=variant,
            decoding=decoding,
            max_new_tokens=max_new_tokens,
            adapters=adapters,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix="eval") as executor:
        texts: list[str] = list(executor.map(answer, examples))

    report: EvalReport = score([example.answer for example in examples], texts, variant, split)
    logger.bind(stage="eval").info(f"{split or 'eval'}: accuracy {report.accuracy:.3f} over {report.total} records")
    return report


@dataclass
class AttentionDensity:
    """Pooled attention scores of one factor class at answer-prediction rows."""

    factor_class: str
    samples: list[float] = field(default_factory=list)
    records: list[int] = field(default_factory=list)

    def histogram(self, bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
        return np.histogram(np.asarray(self.samples, dtype=float), bins=bins, range=(0.0, 1.0))

    def mean(self) -> float | None:
        return float(np.mean(self.samples)) if self.samples else None


@dataclass
class ClassAttention:
    """Attention by factor class over a set of examples."""

    densities: dict[str, AttentionDensity]
    per_example: list[dict[str, float]] = field(default_factory=list)
    skipped: int = 0

    def summary(self) -> dict[str, Any]:
        return {
            "class_means": {name: density.mean() for name, density in self.densities.items()},
            "causal_dominance": causal_dominance(self),
            "examples": len(self.per_example),
            "skipped": self.skipped,
        }


def factor_positions(vocab: Vocab, example: EncodedExample, schema: StgSchema) -> dict[str, list[int]] | None:
    """Token positions of every "Name: value" factor line, grouped by class.

    Returns:
        dict[str, list[int]] | None: Positions per class, or None if a factor cannot be found.
    """
    positions: dict[str, list[int]] = {name: [] for name in FACTOR_CLASSES}
    for name, value in example.factors.items():
        found = locate_phrase(vocab, example.ids, example.spans, f"{name}: {value}")
        if not found:
            return None
        positions[schema.kind_of(name)].extend(index for span in found for index in range(span.start, span.end))
    return positions


def class_scores(rows: np.ndarray, positions: dict[str, list[int]]) -> dict[str, np.ndarray]:
    """Attention scores of each class, taken from the given map rows."""
    return {name: rows[:, columns].ravel() if columns else np.empty(0) for name, columns in positions.items()}


def answer_rows(example: EncodedExample) -> slice:
    """Rows whose next-token prediction is an answer token."""
    return slice(example.answer_start - 1, len(example.ids) - 2)


def average_map(
    params: Params,
    config: ModelConfig,
    ids: Sequence[int],
    adapters: Sequence[LoraAdapter] | None = None,
) -> np.ndarray:
    """Averaged attention map of one sequence as a plain (n, n) array."""
    _, capture = forward(ids, params, config, adapters)
    return capture.average.data[0]


def attention_by_class(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    examples: Sequence[StgExample],
    schema: StgSchema,
    adapters: Sequence[LoraAdapter] | None = None,
) -> ClassAttention:
    """Pool averaged attention at answer rows by factor class.

    Examples whose factors cannot be located in the tokens are skipped.
    """
    result = ClassAttention(densities={name: AttentionDensity(name) for name in FACTOR_CLASSES})
    for index, example in enumerate(examples):
        encoded: EncodedExample = encode_example(vocab, example.question, example.answer)
        encoded.factors = example.factors
        positions: dict[str, list[int]] | None = factor_positions(vocab, encoded, schema)
        if positions is None:
            result.skipped += 1
            continue

        rows: np.ndarray = average_map(params, config, encoded.ids, adapters)[answer_rows(encoded)]
        scores: dict[str, np.ndarray] = class_scores(rows, positions)
        means: dict[str, float] = {}
        for name, values in scores.items():
            result.densities[name].samples.extend(values.tolist())
            result.densities[name].records.extend([index] * values.size)
            means[name] = float(values.mean()) if values.size else 0.0
        result.per_example.append(means)

    if result.skipped:
        logger.bind(stage="eval").warning(f"Skipped {result.skipped} examples with factors missing from the tokens")
    return result


def causal_dominance(result: ClassAttention) -> float | None:
    """Fraction of examples whose causal mean attention exceeds the spurious mean."""
    if not result.per_example:
        return None
    return sum(means["causal"] > means["spurious"] for means in result.per_example) / len(result.per_example)


def ratio_satisfaction(
    params: Params,
    config: ModelConfig,
    examples: Sequence[EncodedExample],
    alpha: float,
    adapters: Sequence[LoraAdapter] | None = None,
) -> float | None:
    """Fraction of supervised rows, over all examples, with C_i / N_i >= alpha."""
    satisfied = 0
    total = 0
    for example in examples:
        if example.adjacency.is_empty():
            continue
        _, capture = forward(example.ids, params, config, adapters)
        terms = attn_ratio_terms(example.adjacency, ad.Tensor(capture.average.data[0]))
        ratios: np.ndarray = terms.ratio.data[terms.rows]
        satisfied += int((ratios >= alpha).sum())
        total += ratios.size
    return satisfied / total if total else None


def export_heatmap(
    params: Params,
    config: ModelConfig,
    vocab: Vocab,
    example: StgExample,
    path: Path,
    adapters: Sequence[LoraAdapter] | None = None,
) -> Path:
    """Write the averaged attention map of a full record as a labeled CSV."""
    encoded: EncodedExample = encode_example(vocab, example.question, example.answer)
    attention: np.ndarray = average_map(params, config, encoded.ids, adapters)
    labels: list[str] = [f"{index}:{vocab.id_to_token[token_id]}" for index, token_id in enumerate(encoded.ids)]

    with Path.open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["token", *labels])
        for label, row in zip(labels, attention, strict=True):
            writer.writerow([label, *(f"{value:.9g}" for value in row)])
    logger.bind(stage="eval").info(f"Saved {len(labels)}x{len(labels)} heatmap to {path}")
    return path


def export_density(result: ClassAttention, path: Path, bins: int = 20) -> tuple[Path, Path]:
    """Write the per-class histogram to path and raw samples next to it.

    Returns:
        tuple[Path, Path]: Histogram file and samples file.
    """
    samples_path: Path = path.with_name(f"{path.stem}_samples.csv")
    with Path.open(path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["class", "bin_start", "bin_end", "count"])
        for name, density in result.densities.items():
            counts, edges = density.histogram(bins)
            for count, start, end in zip(counts, edges[:-1], edges[1:], strict=True):
                writer.writerow([name, f"{start:.4f}", f"{end:.4f}", int(count)])

    with Path.open(samples_path, "w", encoding="utf-8", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(["class", "record", "score"])
        for name, density in result.densities.items():
            for record, value in zip(density.records, density.samples, strict=True):
                writer.writerow([name, record, f"{value:.9g}"])
    return path, samples_path


def write_report(report: EvalReport, path: Path) -> None:
    with Path.open(path, "w", encoding="utf-8") as file:
        json.dump(report.to_dict(), file, indent=2)
    logger.bind(stage="eval").info(f"Saved report to {path}")
