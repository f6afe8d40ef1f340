"""Token-level causal supervision and the Re-Attention loss.

A causal map is a JSON object mapping an effect phrase to the phrases that
cause it, both taken from the question and answer text:

    {"Low Risk": ["Smoking: 2", "Weight: 1", "Exercise: 5"]}

build_adjacency marks, for every effect token, the positions of all its cause
tokens, then shifts the rows up by one so row i supervises the attention used
to predict token i + 1.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any

import numpy as np
from loguru import logger

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.tokenizer import TokenSpan, Vocab, locate_phrase

if TYPE_CHECKING:
    from collections.abc import Sequence

CausalMap = dict[str, list[str]]


class CausalMapError(ValueError):
    """Raised when a causal map does not have the {effect: [causes]} shape."""


def parse_causal_map(raw: str | dict[str, Any]) -> CausalMap:
    """Validate a causal map given as JSON text or an already decoded object.

    Raises:
        CausalMapError: With the offending fragment, if the shape is wrong.
    """
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as e:
            msg: str = f"Causal map is not valid JSON: {raw[:80]!r}"
            raise CausalMapError(msg) from e

    if not isinstance(raw, dict):
        msg = f"Causal map must be a JSON object, got {json.dumps(raw)[:80]}"
        raise CausalMapError(msg)

    parsed: CausalMap = {}
    for effect, causes in raw.items():
        if not isinstance(effect, str) or not effect.strip():
            msg = f"Effect phrases must be nonempty strings, got {effect!r}"
            raise CausalMapError(msg)
        if not isinstance(causes, list) or not all(isinstance(cause, str) and cause.strip() for cause in causes):
            msg = f"Causes of {effect!r} must be a list of nonempty strings, got {json.dumps(causes)[:80]}"
            raise CausalMapError(msg)
        parsed[effect] = list(causes)
    return parsed


def dump_causal_map(causal_map: CausalMap) -> str:
    """Serialize a causal map, keeping key order."""
    return json.dumps(causal_map, ensure_ascii=False)


@dataclass
class SkipReport:
    """What supervision could not be built or used."""

    missing_phrases: Counter[str] = field(default_factory=Counter)
    empty_examples: int = 0
    excluded_rows: int = 0

    def merge(self, other: SkipReport) -> None:
        self.missing_phrases.update(other.missing_phrases)
        self.empty_examples += other.empty_examples
        self.excluded_rows += other.excluded_rows

    def as_dict(self) -> dict[str, Any]:
        return {
            "missing_phrases": sum(self.missing_phrases.values()),
            "distinct_missing_phrases": len(self.missing_phrases),
            "empty_examples": self.empty_examples,
            "excluded_rows": self.excluded_rows,
        }


@dataclass
class TokenAdjacency:
    """Shifted cause marks for one sequence (n, n) or a padded batch (b, n, n).

    ignored marks key columns (bos, pad) that count as neither causal nor
    non-causal.
    """

    bits: np.ndarray
    ignored: np.ndarray

    @property
    def size(self) -> int:
        return int(self.bits.shape[-1])

    @property
    def supervised_rows(self) -> np.ndarray:
        """Boolean mask over rows that have at least one cause mark."""
        return self.bits.any(axis=-1)

    def is_empty(self) -> bool:
        return not self.bits.any()


def empty_adjacency(ids: Sequence[int]) -> TokenAdjacency:
    """All-zero adjacency for a sequence."""
    length: int = len(ids)
    return TokenAdjacency(bits=np.zeros((length, length), dtype=np.uint8), ignored=_ignored_columns(ids))


def _ignored_columns(ids: Sequence[int]) -> np.ndarray:
    return np.isin(np.asarray(ids, dtype=np.int64), [Vocab.pad_id, Vocab.bos_id])


def build_adjacency(
    causal_map: CausalMap,
    vocab: Vocab,
    ids: Sequence[int],
    spans: Sequence[TokenSpan],
    report: SkipReport | None = None,
) -> TokenAdjacency:
    """Turn a word-level causal map into a shifted token adjacency.

    Every occurrence of every cause is marked in every row of every occurrence
    of its effect. Row i then takes row i + 1, the last row clears and marks
    above the diagonal are dropped. Phrases missing from the text are skipped
    and counted in report.

    Args:
        causal_map: Effect phrase to cause phrases.
        vocab: Vocabulary used for ids.
        ids: Token ids of the full sequence.
        spans: Word spans aligned with ids.
        report: Collects missing phrases and empty results.

    Returns:
        TokenAdjacency: Shape (len(ids), len(ids)).
    """
    report = report if report is not None else SkipReport()
    length: int = len(ids)
    marks: np.ndarray = np.zeros((length, length), dtype=np.uint8)

    for effect, causes in causal_map.items():
        effect_spans: list[TokenSpan] = locate_phrase(vocab, ids, spans, effect)
        if not effect_spans:
            report.missing_phrases[effect] += 1
            continue
        for cause in causes:
            cause_spans: list[TokenSpan] = locate_phrase(vocab, ids, spans, cause)
            if not cause_spans:
                report.missing_phrases[cause] += 1
                continue
            for effect_span in effect_spans:
                for cause_span in cause_spans:
                    marks[effect_span.start : effect_span.end, cause_span.start : cause_span.end] = 1

    shifted: np.ndarray = np.zeros_like(marks)
    shifted[:-1] = marks[1:]
    adjacency = TokenAdjacency(bits=np.tril(shifted), ignored=_ignored_columns(ids))
    adjacency.bits[:, adjacency.ignored] = 0

    if adjacency.is_empty():
        report.empty_examples += 1
        logger.bind(stage="supervision").debug("Example has no usable supervision; it trains on next-token loss only")
    return adjacency


def stack_adjacency(adjacencies: Sequence[TokenAdjacency], length: int) -> TokenAdjacency:
    """Pad adjacencies to a common length and stack them into a batch.

    Padded rows carry no marks and padded columns are ignored.
    """
    bits: np.ndarray = np.zeros((len(adjacencies), length, length), dtype=np.uint8)
    ignored: np.ndarray = np.ones((len(adjacencies), length), dtype=bool)
    for index, adjacency in enumerate(adjacencies):
        size: int = adjacency.size
        bits[index, :size, :size] = adjacency.bits
        ignored[index, :size] = adjacency.ignored
    return TokenAdjacency(bits=bits, ignored=ignored)


@dataclass(frozen=True)
class RatioTerms:
    """Per-row mean attention on causal (C) and non-causal (N) prefix tokens.

    rows marks the rows that enter the loss: supervised rows with a nonempty
    non-causal set. Everything stays attached to the autodiff graph.
    """

    causal: ad.Tensor
    non_causal: ad.Tensor
    ratio: ad.Tensor
    rows: np.ndarray
    excluded: int

    @property
    def count(self) -> int:
        return int(self.rows.sum())

    def pairs(self) -> list[tuple[float, float]]:
        """(C_i, N_i) for every row that enters the loss."""
        return list(zip(self.causal.data[self.rows].tolist(), self.non_causal.data[self.rows].tolist(), strict=True))


def attn_ratio_terms(adjacency: TokenAdjacency, average_map: ad.Tensor, report: SkipReport | None = None) -> RatioTerms:
    """Compute C_i and N_i for every supervised row of an averaged attention map.

    Rows whose whole visible prefix is causal have no non-causal tokens; they
    are excluded and counted.

    Raises:
        ShapeError: If the map and the adjacency differ in shape.
    """
    if average_map.shape != adjacency.bits.shape:
        msg: str = f"attention map {average_map.shape} does not match adjacency {adjacency.bits.shape}"
        raise ad.ShapeError(msg)

    visible: np.ndarray = np.tril(np.ones((adjacency.size, adjacency.size), dtype=bool))
    keys: np.ndarray = visible & ~adjacency.ignored[..., None, :]
    causal: np.ndarray = adjacency.bits.astype(bool) & keys
    non_causal: np.ndarray = keys & ~adjacency.bits.astype(bool)

    supervised: np.ndarray = causal.any(axis=-1)
    rows: np.ndarray = supervised & non_causal.any(axis=-1)
    excluded = int((supervised & ~rows).sum())
    if report is not None:
        report.excluded_rows += excluded

    causal_mean: ad.Tensor = ad.mean_over_selection(average_map, causal)
    non_causal_mean: ad.Tensor = ad.mean_over_selection(average_map, non_causal)
    return RatioTerms(
        causal=causal_mean,
        non_causal=non_causal_mean,
        ratio=ad.divide(causal_mean, non_causal_mean),
        rows=rows,
        excluded=excluded,
    )


def re_attention_loss(terms: RatioTerms, alpha: float) -> ad.Tensor:
    """Sum over rows of max(0, alpha - C_i / N_i).

    Returns:
        Tensor: Scalar loss. A constant zero when no row is supervised.

    Raises:
        ValueError: If alpha is not positive.
    """
    if alpha <= 0:
        msg: str = f"alpha must be positive, got {alpha}"
        raise ValueError(msg)
    if not terms.rows.any():
        return ad.Tensor(np.zeros((), dtype=terms.ratio.dtype))

    hinge: ad.Tensor = ad.maximum_with_zero(ad.add_scalar(ad.scale(terms.ratio, -1.0), alpha))
    return ad.weighted_sum(hinge, terms.rows.astype(terms.ratio.dtype))


def ratio_satisfaction(terms: RatioTerms, alpha: float) -> float | None:
    """Fraction of loss rows with C_i / N_i >= alpha, or None without rows."""
    if not terms.rows.any():
        return None
    return float((terms.ratio.data[terms.rows] >= alpha).mean())
