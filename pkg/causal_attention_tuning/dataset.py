"""Turn question/answer records into padded training batches.

A training sequence is <bos> question "Answer:" answer <eos>. The prompt used
for generation is the same sequence cut after "Answer:".
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import numpy as np

from causal_attention_tuning.causal_supervision import (
    CausalMap,
    CausalMapError,
    SkipReport,
    TokenAdjacency,
    build_adjacency,
    empty_adjacency,
    parse_causal_map,
    stack_adjacency,
)
from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.tokenizer import TokenSpan, Vocab, normalize, tokenize

if TYPE_CHECKING:
    from collections.abc import Sequence

ANSWER_DELIMITER = "Answer:"

LossMask = Literal["answer", "full"]


@dataclass
class EncodedExample:
    """Token view of one record, aligned with its adjacency."""

    ids: list[int]
    spans: list[TokenSpan]
    answer_start: int
    adjacency: TokenAdjacency
    question: str = ""
    answer: str = ""
    factors: dict[str, int] = field(default_factory=dict)

    @property
    def prompt(self) -> list[int]:
        return self.ids[: self.answer_start]


@dataclass
class Batch:
    """Right-padded batch. loss_mask[b, t] weights the prediction of ids[b, t + 1]."""

    ids: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    adjacency: TokenAdjacency
    indices: list[int]


def prompt_text(question: str) -> str:
    return normalize(f"{question} {ANSWER_DELIMITER}")


def full_text(question: str, answer: str) -> str:
    return normalize(f"{question} {ANSWER_DELIMITER} {answer}")


def encode_prompt(vocab: Vocab, question: str) -> tuple[list[int], list[TokenSpan]]:
    """<bos> + tokens of the question and the answer delimiter."""
    ids, spans = tokenize(vocab, prompt_text(question))
    return [vocab.bos_id, *ids], [TokenSpan(span.word, span.start + 1, span.end + 1) for span in spans]


def encode_example(
    vocab: Vocab,
    question: str,
    answer: str,
    causal_map: CausalMap | None = None,
    report: SkipReport | None = None,
) -> EncodedExample:
    """Tokenize a record and build its shifted adjacency.

    Raises:
        ConfigurationError: If the question or the answer is empty.
    """
    if not question.strip() or not answer.strip():
        msg = "Records need a nonempty question and answer"
        raise ConfigurationError(msg)

    body, body_spans = tokenize(vocab, full_text(question, answer))
    ids: list[int] = [vocab.bos_id, *body, vocab.eos_id]
    spans: list[TokenSpan] = [TokenSpan(span.word, span.start + 1, span.end + 1) for span in body_spans]
    prompt, _ = encode_prompt(vocab, question)
    adjacency: TokenAdjacency = build_adjacency(causal_map, vocab, ids, spans, report) if causal_map else empty_adjacency(ids)
    if not causal_map and report is not None:
        report.empty_examples += 1
    return EncodedExample(ids=ids, spans=spans, answer_start=len(prompt), adjacency=adjacency, question=question, answer=answer)


def encode_records(
    vocab: Vocab,
    records: Sequence[dict[str, Any]],
    report: SkipReport | None = None,
) -> list[EncodedExample]:
    """Encode JSONL records; a malformed causal map counts as no supervision."""
    report = report if report is not None else SkipReport()
    encoded: list[EncodedExample] = []
    for record in records:
        try:
            causal_map: CausalMap = parse_causal_map(record.get("causal_map") or {})
        except CausalMapError:
            causal_map = {}
        example: EncodedExample = encode_example(vocab, record["question"], str(record["answer"]), causal_map, report)
        example.factors = dict(record.get("factors") or {})
        encoded.append(example)
    return encoded


def collate(examples: Sequence[EncodedExample], indices: Sequence[int], loss_mask: LossMask = "answer") -> Batch:
    """Pad examples to the longest one and build next-token targets."""
    length: int = max(len(example.ids) for example in examples)
    ids: np.ndarray = np.full((len(examples), length), Vocab.pad_id, dtype=np.int64)
    targets: np.ndarray = np.full((len(examples), length), Vocab.pad_id, dtype=np.int64)
    mask: np.ndarray = np.zeros((len(examples), length))

    for row, example in enumerate(examples):
        size: int = len(example.ids)
        ids[row, :size] = example.ids
        targets[row, : size - 1] = example.ids[1:]
        first: int = example.answer_start - 1 if loss_mask == "answer" else 0
        mask[row, first : size - 1] = 1.0

    return Batch(
        ids=ids,
        targets=targets,
        loss_mask=mask,
        adjacency=stack_adjacency([example.adjacency for example in examples], length),
        indices=list(indices),
    )
