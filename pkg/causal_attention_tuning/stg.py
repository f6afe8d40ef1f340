"""Spurious Token Game: synthetic records with causal, spurious and irrelevant factors.

Causal factors decide the answer. Each spurious factor is a floored multiple
of one causal factor in training and IID test data, and an independent draw
in OOD test data. Irrelevant factors are always independent draws.

STG_E answers "High Risk" when 1.2 * Smoking + 0.7 * Weight - Exercise >= 7.2.
STG_H answers clamp(round_half_up(g), 0, 100) with

    g = 2.5 * Sleep hours + 2.0 * Vegetable intake + 1.5 * Exercise
        + 1.0 * Water intake + 1.0 * Checkups
        + 0.25 * Sleep hours * Vegetable intake - 12

so the answer spans 0 (all factors at 1, g = -3.75) to 93 (all at 10).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
from loguru import logger

from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.utils import write_jsonl

if TYPE_CHECKING:
    from collections.abc import Sequence

    from causal_attention_tuning.causal_supervision import CausalMap

FactorKind = Literal["causal", "spurious", "irrelevant"]

SPLITS: tuple[str, ...] = ("train", "test_iid", "test_ood")
SPLIT_CODES: dict[str, int] = {"train": 0, "test_iid": 1, "test_ood": 2}

HIGH_RISK = "High Risk"
LOW_RISK = "Low Risk"

# (train, test) records per split
E_SIZES: dict[str, tuple[int, int]] = {"s": (400, 400), "m": (800, 400), "l": (1600, 400)}
H_SIZES: tuple[int, int] = (3000, 1000)

MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class Factor:
    """One named input attribute.

    weight is the coefficient of a causal factor or the ratio of a spurious
    factor to its source; irrelevant factors ignore it.
    """

    name: str
    kind: FactorKind
    weight: Fraction = Fraction(0)
    source: str | None = None


@dataclass(frozen=True)
class StgSchema:
    """Factors in rendering order plus the answer function."""

    variant: Literal["e", "h"]
    factors: tuple[Factor, ...]
    intro: str
    threshold: Fraction | None = None
    intercept: Fraction = Fraction(0)
    interaction: tuple[str, str, Fraction] | None = None
    low: int = 1
    high: int = 10

    def __post_init__(self) -> None:
        names: set[str] = {factor.name for factor in self.factors}
        causal: set[str] = {factor.name for factor in self.causal}
        if len(names) != len(self.factors):
            msg = "Factor names must be unique"
            raise ConfigurationError(msg)
        for factor in self.spurious:
            if factor.source not in causal:
                msg: str = f"Spurious factor {factor.name!r} must reference a causal factor, got {factor.source!r}"
                raise ConfigurationError(msg)
        if self.variant == "e" and self.threshold is None:
            msg = "STG_E needs a threshold"
            raise ConfigurationError(msg)

    def of_kind(self, kind: FactorKind) -> tuple[Factor, ...]:
        return tuple(factor for factor in self.factors if factor.kind == kind)

    @property
    def causal(self) -> tuple[Factor, ...]:
        return self.of_kind("causal")

    @property
    def spurious(self) -> tuple[Factor, ...]:
        return self.of_kind("spurious")

    @property
    def irrelevant(self) -> tuple[Factor, ...]:
        return self.of_kind("irrelevant")

    def kind_of(self, name: str) -> FactorKind:
        for factor in self.factors:
            if factor.name == name:
                return factor.kind
        msg: str = f"Unknown factor {name!r}"
        raise KeyError(msg)

    def score(self, values: dict[str, int]) -> Fraction:
        """Exact value of the answer function before thresholding or rounding."""
        total: Fraction = self.intercept + sum((factor.weight * values[factor.name] for factor in self.causal), Fraction(0))
        if self.interaction is not None:
            first, second, weight = self.interaction
            total += weight * values[first] * values[second]
        return total

    def answer(self, values: dict[str, int]) -> str:
        """The answer string for a set of factor values."""
        score: Fraction = self.score(values)
        if self.variant == "e":
            return HIGH_RISK if score >= self.threshold else LOW_RISK
        return str(min(100, max(0, math.floor(score + Fraction(1, 2)))))

    def derive_spurious(self, causal_values: dict[str, int]) -> dict[str, int]:
        """IID spurious values: floor(ratio * source)."""
        return {factor.name: math.floor(factor.weight * causal_values[factor.source]) for factor in self.spurious}


def default_schema_e() -> StgSchema:
    """The 8-factor cancer risk game."""
    return StgSchema(
        variant="e",
        factors=(
            Factor("Yellow fingers", "spurious", Fraction(3, 2), "Smoking"),
            Factor("Weight", "causal", Fraction(7, 10)),
            Factor("Room size", "irrelevant"),
            Factor("Certain gene", "irrelevant"),
            Factor("Clothing size", "spurious", Fraction(1), "Weight"),
            Factor("Smoking", "causal", Fraction(6, 5)),
            Factor("Hormones", "spurious", Fraction(1, 2), "Exercise"),
            Factor("Exercise", "causal", Fraction(-1)),
        ),
        intro="Here is the statistical data for a person. Please predict the probability of cancer.",
        threshold=Fraction(36, 5),
    )


def default_schema_h() -> StgSchema:
    """The 14-factor health score game: 5 causal, 5 spurious, 4 irrelevant."""
    return StgSchema(
        variant="h",
        factors=(
            Factor("Energy level", "spurious", Fraction(3, 2), "Sleep hours"),
            Factor("Sleep hours", "causal", Fraction(5, 2)),
            Factor("Shoe size", "irrelevant"),
            Factor("Fiber level", "spurious", Fraction(1), "Vegetable intake"),
            Factor("Vegetable intake", "causal", Fraction(2)),
            Factor("Eye color code", "irrelevant"),
            Factor("Exercise", "causal", Fraction(3, 2)),
            Factor("Muscle mass", "spurious", Fraction(1, 2), "Exercise"),
            Factor("Birth month", "irrelevant"),
            Factor("Skin moisture", "spurious", Fraction(2), "Water intake"),
            Factor("Water intake", "causal", Fraction(1)),
            Factor("Favorite number", "irrelevant"),
            Factor("Vaccinations", "spurious", Fraction(1, 4), "Checkups"),
            Factor("Checkups", "causal", Fraction(1)),
        ),
        intro="Here is the health record of a person. Please predict the health score.",
        intercept=Fraction(-12),
        interaction=("Sleep hours", "Vegetable intake", Fraction(1, 4)),
    )


def schema_for(variant: str) -> StgSchema:
    if variant == "e":
        return default_schema_e()
    if variant == "h":
        return default_schema_h()
    msg: str = f"Unknown STG variant {variant!r}, expected e or h"
    raise ConfigurationError(msg)


@dataclass
class StgExample:
    """One generated record. factors keeps rendering order."""

    question: str
    answer: str
    split: str
    factors: dict[str, int]
    causal_map: CausalMap = field(default_factory=dict)

    def to_record(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "answer": self.answer,
            "split": self.split,
            "factors": self.factors,
            "causal_map": self.causal_map,
        }


def render_question(schema: StgSchema, factors: dict[str, int], order: Sequence[str] | None = None) -> str:
    """Intro sentence, the "Name: value" pairs on one comma-separated line, then the intro again."""
    names: Sequence[str] = order if order is not None else [factor.name for factor in schema.factors]
    pairs: str = ", ".join(f"{name}: {factors[name]}" for name in names)
    return f"{schema.intro}\n{pairs}\n{schema.intro}"


def ground_truth_map(example: StgExample, schema: StgSchema) -> CausalMap:
    """The answer phrase caused by exactly the causal "Name: value" phrases."""
    return {example.answer: [f"{factor.name}: {example.factors[factor.name]}" for factor in schema.causal]}


def _draw(rng: np.random.Generator, schema: StgSchema, factors: Sequence[Factor]) -> dict[str, int]:
    values: np.ndarray = rng.integers(schema.low, schema.high + 1, size=len(factors))
    return {factor.name: int(value) for factor, value in zip(factors, values, strict=True)}


def generate(
    schema: StgSchema,
    count: int,
    split: str,
    seed: int = 42,
    *,
    balance: bool = True,
    shuffle_factors: bool = False,
) -> list[StgExample]:
    """Generate records for one split.

    Each record draws from its own stream seeded by (seed, split, index), so
    any record can be rebuilt alone. With balance (STG_E only) even indices
    are "High Risk" and odd ones "Low Risk"; causal values are redrawn until
    the label matches.

    Args:
        schema: The game.
        count: Number of records.
        split: One of train, test_iid, test_ood.
        seed: Base seed.
        balance: Alternate STG_E labels instead of following the raw prior.
        shuffle_factors: Render factor lines in a per-record random order.

    Returns:
        list[StgExample]: Records with ground-truth causal maps.

    Raises:
        ConfigurationError: If count is not positive or split is unknown.
    """
    if count <= 0:
        msg: str = f"count must be positive, got {count}"
        raise ConfigurationError(msg)
    if split not in SPLIT_CODES:
        msg = f"Unknown split {split!r}, expected one of {', '.join(SPLITS)}"
        raise ConfigurationError(msg)

    examples: list[StgExample] = []
    for index in range(count):
        rng = np.random.default_rng([seed, SPLIT_CODES[split], index])
        causal: dict[str, int] = _draw(rng, schema, schema.causal)
        if balance and schema.variant == "e":
            wanted: str = HIGH_RISK if index % 2 == 0 else LOW_RISK
            for _ in range(MAX_RESAMPLES):
                if schema.answer(causal) == wanted:
                    break
                causal = _draw(rng, schema, schema.causal)

        irrelevant: dict[str, int] = _draw(rng, schema, schema.irrelevant)
        spurious: dict[str, int] = _draw(rng, schema, schema.spurious) if split == "test_ood" else schema.derive_spurious(causal)

        values: dict[str, int] = causal | spurious | irrelevant
        order: list[str] = [factor.name for factor in schema.factors]
        if shuffle_factors:
            order = [order[position] for position in rng.permutation(len(order))]
        factors: dict[str, int] = {name: values[name] for name in order}

        example = StgExample(question=render_question(schema, factors, order), answer=schema.answer(values), split=split, factors=factors)
        example.causal_map = ground_truth_map(example, schema)
        examples.append(example)

    logger.bind(stage="stg").debug(f"Generated {count} STG_{schema.variant.upper()} records for {split}")
    return examples


def generate_e(schema: StgSchema, count: int, split: str, seed: int = 42, **options: bool) -> list[StgExample]:
    if schema.variant != "e":
        msg = "generate_e needs an STG_E schema"
        raise ConfigurationError(msg)
    return generate(schema, count, split, seed, **options)


def generate_h(schema: StgSchema, count: int, split: str, seed: int = 42, **options: bool) -> list[StgExample]:
    if schema.variant != "h":
        msg = "generate_h needs an STG_H schema"
        raise ConfigurationError(msg)
    return generate(schema, count, split, seed, **options)


def split_sizes(variant: str, size: str) -> tuple[int, int]:
    """(train, test) record counts for a variant and size letter."""
    if variant == "h":
        return H_SIZES
    if size not in E_SIZES:
        msg: str = f"Unknown size {size!r}, expected s, m or l"
        raise ConfigurationError(msg)
    return E_SIZES[size]


def overlap_report(train: Sequence[StgExample], test: Sequence[StgExample]) -> float:
    """Fraction of test questions that also occur in train."""
    seen: set[str] = {example.question for example in train}
    return sum(example.question in seen for example in test) / len(test) if test else 0.0


def write_dataset(
    out_dir: Path,
    variant: str,
    size: str = "s",
    seed: int = 42,
    *,
    train_count: int | None = None,
    test_count: int | None = None,
    balance: bool = True,
    shuffle_factors: bool = False,
) -> dict[str, Path]:
    """Write train.jsonl, test_iid.jsonl and test_ood.jsonl.

    Returns:
        dict[str, Path]: Split name to file.
    """
    schema: StgSchema = schema_for(variant)
    default_train, default_test = split_sizes(variant, size)
    counts: dict[str, int] = {
        "train": train_count or default_train,
        "test_iid": test_count or default_test,
        "test_ood": test_count or default_test,
    }

    out_dir.mkdir(parents=True, exist_ok=True)
    generated: dict[str, list[StgExample]] = {}
    paths: dict[str, Path] = {}
    for split in SPLITS:
        generated[split] = generate(schema, counts[split], split, seed, balance=balance, shuffle_factors=shuffle_factors)
        paths[split] = out_dir / f"{split}.jsonl"
        write_jsonl(paths[split], (example.to_record() for example in generated[split]))

    log = logger.bind(stage="stg")
    for split in ("test_iid", "test_ood"):
        overlap: float = overlap_report(generated["train"], generated[split])
        log.info(f"{split}: {counts[split]} records, {overlap:.2%} of questions also in train")
    log.info(f"Wrote STG_{variant.upper()} ({counts['train']} train records) to {out_dir}")
    return paths


def example_from_record(record: dict[str, Any]) -> StgExample:
    """Rebuild an example from a JSONL record."""
    return StgExample(
        question=record["question"],
        answer=str(record["answer"]),
        split=record.get("split", ""),
        factors=dict(record.get("factors") or {}),
        causal_map=dict(record.get("causal_map") or {}),
    )
