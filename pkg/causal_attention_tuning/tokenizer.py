"""Word-level tokenizer that splits numbers into single-character tokens.

A piece glued to the previous piece without whitespace carries the "##"
continuation marker, so "Weight: 10," becomes [Weight, ##:, 1, ##0, ##,].
Every word keeps one TokenSpan covering all of its pieces.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, ClassVar

from loguru import logger

from causal_attention_tuning.settings import ConfigurationError

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

SPECIAL_TOKENS: tuple[str, ...] = ("<pad>", "<bos>", "<eos>", "<unk>")
CONTINUATION = "##"

_CHUNK: re.Pattern[str] = re.compile(r"\S+")
_WORD: re.Pattern[str] = re.compile(r"\d+(?:\.\d+)?|[^\W\d_]+|\S")


@dataclass(frozen=True, slots=True)
class TokenSpan:
    """Token range [start, end) produced by one source word or phrase."""

    word: str
    start: int
    end: int


@dataclass(frozen=True)
class Vocab:
    """Dense token ids. The first four ids are pad, bos, eos and unknown."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    pad_id: ClassVar[int] = 0
    bos_id: ClassVar[int] = 1
    eos_id: ClassVar[int] = 2
    unk_id: ClassVar[int] = 3

    def __post_init__(self) -> None:
        if self.id_to_token[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            msg = "Vocab must start with the special tokens " + ", ".join(SPECIAL_TOKENS)
            raise ConfigurationError(msg)
        if len(set(self.id_to_token)) != len(self.id_to_token):
            msg = "Vocab contains duplicate tokens"
            raise ConfigurationError(msg)
        object.__setattr__(self, "token_to_id", {token: index for index, token in enumerate(self.id_to_token)})

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


def normalize(text: str) -> str:
    """Trim and collapse internal whitespace."""
    return " ".join(text.split())


def pieces(text: str) -> list[tuple[str, int]]:
    """Split text into token strings, each tagged with the index of its word.

    Returns:
        list[tuple[str, int]]: (token string, word index) in order.
    """
    out: list[tuple[str, int]] = []
    word_index = 0
    for chunk in _CHUNK.finditer(text):
        glued = False
        for word in _WORD.finditer(chunk.group()):
            value: str = word.group()
            parts: Iterable[str] = list(value) if value[0].isdigit() else (value,)
            for part in parts:
                out.append((f"{CONTINUATION}{part}" if glued else part, word_index))
                glued = True
            word_index += 1
    return out


def word_strings(text: str) -> list[str]:
    """The source words of text, in the order pieces() numbers them."""
    return [word.group() for chunk in _CHUNK.finditer(text) for word in _WORD.finditer(chunk.group())]


def build_vocab(corpus: Sequence[str], min_count: int = 1) -> Vocab:
    """Build a vocabulary from documents.

    Tokens are ordered by frequency (descending) then lexicographically.

    Args:
        corpus: Documents.
        min_count: Minimum frequency for a token to be kept.

    Returns:
        Vocab: Special tokens followed by the kept tokens.

    Raises:
        ConfigurationError: If the corpus is empty.
    """
    if not corpus:
        msg = "Cannot build a vocabulary from an empty corpus"
        raise ConfigurationError(msg)

    counts: Counter[str] = Counter(token for document in corpus for token, _ in pieces(document))
    kept: list[str] = sorted(
        (token for token, count in counts.items() if count >= min_count and token not in SPECIAL_TOKENS),
        key=lambda token: (-counts[token], token),
    )
    logger.bind(stage="tokenizer").info(f"Built vocabulary with {len(kept)} tokens from {len(corpus)} documents")
    return Vocab(id_to_token=SPECIAL_TOKENS + tuple(kept))


def tokenize(vocab: Vocab, text: str) -> tuple[list[int], list[TokenSpan]]:
    """Token ids and word spans for text. Unknown pieces map to the unknown id.

    Returns:
        tuple[list[int], list[TokenSpan]]: Ids, and spans partitioning them.
    """
    ids: list[int] = []
    spans: list[TokenSpan] = []
    words: list[str] = word_strings(text)
    start = 0
    current = 0
    for position, (token, word_index) in enumerate(pieces(text)):
        if word_index != current:
            spans.append(TokenSpan(words[current], start, position))
            start, current = position, word_index
        ids.append(vocab.id_of(token))
    if ids:
        spans.append(TokenSpan(words[current], start, len(ids)))
    return ids, spans


def detokenize(vocab: Vocab, ids: Iterable[int], *, skip_special: bool = True) -> str:
    """Rebuild normalized text from ids, joining continuation pieces without spaces."""
    text: list[str] = []
    for token_id in ids:
        index = int(token_id)
        token: str = vocab.id_to_token[index] if 0 <= index < len(vocab) else SPECIAL_TOKENS[vocab.unk_id]
        if skip_special and index in {vocab.pad_id, vocab.bos_id, vocab.eos_id}:
            continue
        if token.startswith(CONTINUATION) and text:
            text.append(token.removeprefix(CONTINUATION))
        else:
            if text:
                text.append(" ")
            text.append(token.removeprefix(CONTINUATION))
    return "".join(text)


def locate_phrase(vocab: Vocab, ids: Sequence[int], spans: Sequence[TokenSpan], phrase: str) -> list[TokenSpan]:
    """Find every non-overlapping occurrence of a phrase, leftmost first.

    Occurrences have to start and end on word boundaries, so "1" does not
    match inside "10".

    Returns:
        list[TokenSpan]: One span per occurrence; empty when absent.
    """
    wanted, _ = tokenize(vocab, normalize(phrase))
    if not wanted or vocab.unk_id in wanted:
        logger.bind(stage="tokenizer").debug(f"Phrase {phrase!r} is empty or has unknown tokens")
        return []

    sequence: list[int] = [int(token_id) for token_id in ids]
    starts: set[int] = {span.start for span in spans}
    ends: set[int] = {span.end for span in spans}
    width: int = len(wanted)
    found: list[TokenSpan] = []
    position = 0
    while position + width <= len(sequence):
        if position in starts and (position + width) in ends and sequence[position : position + width] == wanted:
            found.append(TokenSpan(phrase, position, position + width))
            position += width
        else:
            position += 1
    return found


def save_vocab(vocab: Vocab, path: Path) -> None:
    """Write one token per line; the line number is the id."""
    with Path.open(path, "w", encoding="utf-8") as file:
        file.write("\n".join(vocab.id_to_token) + "\n")
    logger.bind(stage="tokenizer").info(f"Saved vocabulary ({len(vocab)} tokens) to {path}")


def load_vocab(path: Path) -> Vocab:
    """Read a vocabulary written by save_vocab.

    Raises:
        ConfigurationError: If the file is missing or lacks the special header.
    """
    if not path.is_file():
        msg: str = f"Vocabulary file not found: {path}"
        raise ConfigurationError(msg)
    with Path.open(path, encoding="utf-8") as file:
        tokens: tuple[str, ...] = tuple(line.rstrip("\n") for line in file if line.rstrip("\n"))
    return Vocab(id_to_token=tokens)


def vocab_digest(vocab: Vocab) -> str:
    """SHA-256 of the serialized vocabulary, stored in checkpoints."""
    return hashlib.sha256(("\n".join(vocab.id_to_token) + "\n").encode("utf-8")).hexdigest()
