from __future__ import annotations

from typing import TYPE_CHECKING

import pytest

from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.tokenizer import (
    SPECIAL_TOKENS,
    Vocab,
    build_vocab,
    detokenize,
    load_vocab,
    locate_phrase,
    normalize,
    pieces,
    save_vocab,
    tokenize,
    vocab_digest,
)

if TYPE_CHECKING:
    from pathlib import Path

corpus: list[str] = [
    "Smoking: 2 Weight: 10 Exercise: 5 Answer: Low Risk",
    "Smoking: 1 Weight: 1 Answer: High Risk",
]


def test_numbers_split_into_digits() -> None:
    assert [token for token, _ in pieces("Weight: 10,")] == ["Weight", "##:", "1", "##0", "##,"]


def test_spans_partition_tokens() -> None:
    vocab: Vocab = build_vocab(corpus)
    ids, spans = tokenize(vocab, "Weight: 10")
    assert [span.word for span in spans] == ["Weight", ":", "10"]
    assert spans[0].start == 0
    assert spans[-1].end == len(ids)
    assert all(left.end == right.start for left, right in zip(spans, spans[1:], strict=False))


def test_vocab_order_is_frequency_then_lexicographic() -> None:
    vocab: Vocab = build_vocab(corpus)
    assert vocab.id_to_token[: len(SPECIAL_TOKENS)] == SPECIAL_TOKENS
    assert vocab.id_to_token[len(SPECIAL_TOKENS)] == "##:"


def test_build_vocab_rejects_empty_corpus() -> None:
    with pytest.raises(ConfigurationError):
        build_vocab([])


def test_unknown_tokens_map_to_unk() -> None:
    vocab: Vocab = build_vocab(corpus)
    ids, _ = tokenize(vocab, "Zebra")
    assert ids == [vocab.unk_id]


def test_detokenize_restores_normalized_text() -> None:
    vocab: Vocab = build_vocab(corpus)
    text: str = normalize("Smoking:  2\nWeight: 10   Answer: Low Risk")
    ids, _ = tokenize(vocab, text)
    assert detokenize(vocab, ids) == text


def test_locate_phrase_finds_every_occurrence() -> None:
    vocab: Vocab = build_vocab(corpus)
    ids, spans = tokenize(vocab, "Smoking: 2 Weight: 1 Smoking: 2")
    found = locate_phrase(vocab, ids, spans, "Smoking: 2")
    assert [(span.start, span.end) for span in found] == [(0, 3), (6, 9)]


def test_locate_phrase_respects_word_boundaries() -> None:
    """'Weight: 1' must not match inside 'Weight: 10'."""
    vocab: Vocab = build_vocab(corpus)
    ids, spans = tokenize(vocab, "Weight: 10")
    assert locate_phrase(vocab, ids, spans, "Weight: 1") == []


def test_locate_phrase_absent_or_unknown() -> None:
    vocab: Vocab = build_vocab(corpus)
    ids, spans = tokenize(vocab, "Smoking: 2")
    assert locate_phrase(vocab, ids, spans, "Exercise: 5") == []
    assert locate_phrase(vocab, ids, spans, "Zebra") == []


def test_vocab_file_round_trip(tmp_path: Path) -> None:
    vocab: Vocab = build_vocab(corpus)
    path: Path = tmp_path / "vocab.txt"
    save_vocab(vocab, path)
    loaded: Vocab = load_vocab(path)
    assert loaded == vocab
    assert vocab_digest(loaded) == vocab_digest(vocab)


def test_vocab_requires_special_header() -> None:
    with pytest.raises(ConfigurationError):
        Vocab(id_to_token=("a", "b"))
