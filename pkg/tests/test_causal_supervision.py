from __future__ import annotations

from itertools import pairwise

import numpy as np
import pytest

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.causal_supervision import (
    CausalMap,
    CausalMapError,
    RatioTerms,
    SkipReport,
    TokenAdjacency,
    attn_ratio_terms,
    build_adjacency,
    dump_causal_map,
    parse_causal_map,
    re_attention_loss,
    ratio_satisfaction,
    stack_adjacency,
)
from causal_attention_tuning.tokenizer import TokenSpan, Vocab, build_vocab, locate_phrase, tokenize

text = "Smoking: 2 Weight: 1 Exercise: 5 Answer: Low Risk"
worked_map: CausalMap = {"Low Risk": ["Smoking: 2", "Weight: 1", "Exercise: 5"]}
vocab: Vocab = build_vocab([text, "A B C D 10 1 Risk"])
word_pool: list[str] = ["A", "B", "C", "D", "10", "1", "Risk"]


def adjacency_of(rows: list[tuple[int, int]], size: int) -> TokenAdjacency:
    bits: np.ndarray = np.zeros((size, size), dtype=np.uint8)
    for row, column in rows:
        bits[row, column] = 1
    return TokenAdjacency(bits=bits, ignored=np.zeros(size, dtype=bool))


def reference_marks(causal_map: CausalMap, ids: list[int], spans: list[TokenSpan]) -> list[list[int]]:
    """Unshifted marks, built one cell at a time."""
    size: int = len(ids)
    marks: list[list[int]] = [[0] * size for _ in range(size)]
    for effect, causes in causal_map.items():
        for effect_span in locate_phrase(vocab, ids, spans, effect):
            for cause in causes:
                for cause_span in locate_phrase(vocab, ids, spans, cause):
                    for row in range(effect_span.start, effect_span.end):
                        for column in range(cause_span.start, cause_span.end):
                            marks[row][column] = 1
    return marks


def reference_adjacency(causal_map: CausalMap, ids: list[int], spans: list[TokenSpan]) -> np.ndarray:
    marks: list[list[int]] = reference_marks(causal_map, ids, spans)
    size: int = len(ids)
    shifted: list[list[int]] = [
        [marks[row + 1][column] if row + 1 < size and column <= row else 0 for column in range(size)] for row in range(size)
    ]
    return np.array(shifted, dtype=np.uint8)


def test_parse_causal_map() -> None:
    assert parse_causal_map('{"Low Risk": ["Smoking: 2"]}') == {"Low Risk": ["Smoking: 2"]}
    assert parse_causal_map(dump_causal_map(worked_map)) == worked_map
    for bad in ("not json", "[1, 2]", '{"x": "y"}', '{"x": [1]}', '{"": ["a"]}'):
        with pytest.raises(CausalMapError):
            parse_causal_map(bad)


def test_empty_map_gives_zero_adjacency() -> None:
    ids, spans = tokenize(vocab, text)
    report = SkipReport()
    adjacency: TokenAdjacency = build_adjacency({}, vocab, ids, spans, report)
    assert adjacency.is_empty()
    assert not adjacency.supervised_rows.any()
    assert report.empty_examples == 1


def test_two_token_trace() -> None:
    """{B: [A]} on [A, B] marks row 0, column 0 after the shift."""
    ids, spans = tokenize(vocab, "A B")
    adjacency: TokenAdjacency = build_adjacency({"B": ["A"]}, vocab, ids, spans)
    assert adjacency.bits.tolist() == [[1, 0], [0, 0]]


def test_worked_example_marks_causes_before_answer() -> None:
    ids, spans = tokenize(vocab, text)
    adjacency: TokenAdjacency = build_adjacency(worked_map, vocab, ids, spans)

    (answer,) = locate_phrase(vocab, ids, spans, "Low Risk")
    cause_columns: set[int] = set()
    for cause in worked_map["Low Risk"]:
        (span,) = locate_phrase(vocab, ids, spans, cause)
        cause_columns.update(range(span.start, span.end))

    for row in range(len(ids)):
        marked: set[int] = set(np.flatnonzero(adjacency.bits[row]).tolist())
        if answer.start - 1 <= row <= answer.end - 2:
            assert marked == cause_columns
        else:
            assert marked == set()


def test_matches_reference_construction() -> None:
    ids, spans = tokenize(vocab, text)
    maps: list[CausalMap] = [
        worked_map,
        {"Weight: 1": ["Smoking: 2"]},
        {"Exercise": ["Weight", "Risk"], "Answer": ["Exercise: 5"]},
        {"Smoking": ["Low Risk"]},
    ]
    for causal_map in maps:
        assert np.array_equal(build_adjacency(causal_map, vocab, ids, spans).bits, reference_adjacency(causal_map, ids, spans))


def test_shift_property() -> None:
    """Row i of the result equals row i + 1 of the unshifted marks, below the diagonal."""
    ids, spans = tokenize(vocab, text)
    bits: np.ndarray = build_adjacency(worked_map, vocab, ids, spans).bits
    marks: np.ndarray = np.array(reference_marks(worked_map, ids, spans))
    assert np.array_equal(bits[:-1], np.tril(marks[1:]))
    assert not bits[-1].any()
    assert not np.triu(bits, k=1).any()


def random_phrase(rng: np.random.Generator, words: list[str]) -> str:
    if rng.random() < 0.1:
        return "D C B"
    start = int(rng.integers(len(words)))
    return " ".join(words[start : start + int(rng.integers(1, 3))])


def random_case(rng: np.random.Generator) -> tuple[str, CausalMap]:
    words: list[str] = [str(word) for word in rng.choice(word_pool, size=int(rng.integers(2, 10)))]
    causal_map: CausalMap = {}
    for _ in range(int(rng.integers(1, 3))):
        causal_map[random_phrase(rng, words)] = [random_phrase(rng, words) for _ in range(int(rng.integers(1, 4)))]
    return " ".join(words), causal_map


def test_random_maps_match_reference() -> None:
    rng: np.random.Generator = np.random.default_rng(11)
    for _ in range(10_000):
        sentence, causal_map = random_case(rng)
        ids, spans = tokenize(vocab, sentence)
        bits: np.ndarray = build_adjacency(causal_map, vocab, ids, spans).bits
        assert np.array_equal(bits, reference_adjacency(causal_map, ids, spans)), (sentence, causal_map)

        marks: np.ndarray = np.array(reference_marks(causal_map, ids, spans))
        assert np.array_equal(bits[:-1], np.tril(marks[1:]))
        assert not bits[-1].any()

        permuted: CausalMap = {effect: causes[::-1] for effect, causes in reversed(causal_map.items())}
        assert np.array_equal(bits, build_adjacency(permuted, vocab, ids, spans).bits)


def test_cause_order_does_not_matter() -> None:
    ids, spans = tokenize(vocab, text)
    reordered: CausalMap = {"Low Risk": ["Exercise: 5", "Smoking: 2", "Weight: 1"]}
    assert np.array_equal(build_adjacency(worked_map, vocab, ids, spans).bits, build_adjacency(reordered, vocab, ids, spans).bits)


def test_missing_phrases_are_counted() -> None:
    ids, spans = tokenize(vocab, text)
    report = SkipReport()
    causal_map: CausalMap = {"Low Risk": ["Smoking: 9", "Weight: 1"], "High Risk": ["Weight: 1"]}
    adjacency: TokenAdjacency = build_adjacency(causal_map, vocab, ids, spans, report)
    assert report.missing_phrases == {"Smoking: 9": 1, "High Risk": 1}
    assert not adjacency.is_empty()
    assert report.as_dict()["missing_phrases"] == 2


def test_bos_column_is_ignored() -> None:
    ids, spans = tokenize(vocab, "A B")
    shifted: list[TokenSpan] = [TokenSpan(span.word, span.start + 1, span.end + 1) for span in spans]
    adjacency: TokenAdjacency = build_adjacency({"B": ["A"]}, vocab, [Vocab.bos_id, *ids], shifted)
    assert adjacency.ignored.tolist() == [True, False, False]
    assert adjacency.bits[1].tolist() == [0, 1, 0]


def test_stack_adjacency_pads() -> None:
    stacked: TokenAdjacency = stack_adjacency([adjacency_of([(1, 0)], 2), adjacency_of([(2, 1)], 3)], 4)
    assert stacked.bits.shape == (2, 4, 4)
    assert stacked.bits[0, 1, 0] == 1
    assert stacked.bits[1, 2, 1] == 1
    assert stacked.ignored[0].tolist() == [False, False, True, True]


def test_uniform_row_has_ratio_one() -> None:
    attention = ad.Tensor(np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None])
    terms: RatioTerms = attn_ratio_terms(adjacency_of([(3, 0), (2, 1)], 4), attention)
    assert terms.count == 2
    assert np.allclose(terms.ratio.data[terms.rows], 1.0)


def test_ratio_terms_arithmetic() -> None:
    attention = ad.Tensor(np.tril(np.full((4, 4), 0.25)))
    attention.data[3] = [0.7, 0.1, 0.1, 0.1]
    terms: RatioTerms = attn_ratio_terms(adjacency_of([(3, 0)], 4), attention)
    assert terms.pairs() == [pytest.approx((0.7, 0.1))]


def test_all_causal_row_is_excluded() -> None:
    attention = ad.Tensor(np.tril(np.ones((3, 3))) / np.arange(1, 4)[:, None])
    report = SkipReport()
    terms: RatioTerms = attn_ratio_terms(adjacency_of([(0, 0), (2, 1)], 3), attention, report)
    assert terms.count == 1
    assert terms.excluded == 1
    assert report.excluded_rows == 1


def test_ratio_terms_shape_mismatch() -> None:
    with pytest.raises(ad.ShapeError):
        attn_ratio_terms(adjacency_of([], 3), ad.Tensor(np.eye(4)))


def map_with_row(causal: float, non_causal: float) -> ad.Tensor:
    attention: np.ndarray = np.tril(np.full((3, 3), 1.0 / 3))
    attention[2] = [causal, non_causal, non_causal]
    return ad.Tensor(attention, requires_grad=True)


def test_loss_is_zero_when_ratio_clears_alpha() -> None:
    attention: ad.Tensor = map_with_row(0.1, 0.2)
    with ad.Graph() as graph:
        loss: ad.Tensor = re_attention_loss(attn_ratio_terms(adjacency_of([(2, 0)], 3), attention), 0.3)
    graph.backward(loss)
    assert loss.item() == 0.0
    assert attention.grad is not None
    assert not attention.grad.any()


def test_loss_value_and_gradient() -> None:
    adjacency: TokenAdjacency = adjacency_of([(2, 0)], 3)
    attention: ad.Tensor = map_with_row(0.02, 0.2)
    assert re_attention_loss(attn_ratio_terms(adjacency, attention), 0.3).item() == pytest.approx(0.2)
    error: float = ad.check_gradient(lambda m: re_attention_loss(attn_ratio_terms(adjacency, m), 0.3), [attention])
    assert error < 1e-5


def test_loss_sums_over_rows() -> None:
    attention = ad.Tensor(np.tril(np.full((3, 3), 0.1)))
    attention.data[1] = [0.02, 0.2, 0.0]
    attention.data[2] = [0.02, 0.2, 0.2]
    terms: RatioTerms = attn_ratio_terms(adjacency_of([(1, 0), (2, 0)], 3), attention)
    assert re_attention_loss(terms, 0.3).item() == pytest.approx(0.4)
    assert ratio_satisfaction(terms, 0.3) == 0.0
    assert ratio_satisfaction(terms, 0.05) == 1.0


def test_empty_terms_give_zero_loss() -> None:
    terms: RatioTerms = attn_ratio_terms(adjacency_of([], 3), ad.Tensor(np.eye(3)))
    assert re_attention_loss(terms, 0.3).item() == 0.0
    assert ratio_satisfaction(terms, 0.3) is None


def test_alpha_must_be_positive() -> None:
    terms: RatioTerms = attn_ratio_terms(adjacency_of([(2, 0)], 3), map_with_row(0.1, 0.2))
    with pytest.raises(ValueError, match="alpha"):
        re_attention_loss(terms, 0.0)


def brute_force_loss(attention: np.ndarray, bits: np.ndarray, alpha: float) -> float:
    total = 0.0
    for row in range(attention.shape[0]):
        causal: list[float] = [attention[row, column] for column in range(row + 1) if bits[row, column]]
        other: list[float] = [attention[row, column] for column in range(row + 1) if not bits[row, column]]
        if causal and other:
            ratio: float = (sum(causal) / len(causal)) / max(sum(other) / len(other), 1e-8)
            total += max(0.0, alpha - ratio)
    return total


def test_loss_matches_brute_force_on_random_maps() -> None:
    rng: np.random.Generator = np.random.default_rng(5)
    for _ in range(1_000):
        attention: np.ndarray = np.tril(rng.random((6, 6)) + 1e-3)
        attention /= attention.sum(axis=-1, keepdims=True)
        bits: np.ndarray = np.tril(rng.random((6, 6)) < 0.3).astype(np.uint8)
        alpha = float(rng.uniform(0.05, 3.0))

        adjacency = TokenAdjacency(bits=bits, ignored=np.zeros(6, dtype=bool))
        loss: float = re_attention_loss(attn_ratio_terms(adjacency, ad.Tensor(attention)), alpha).item()
        assert abs(loss - brute_force_loss(attention, bits, alpha)) < 1e-10


def random_row_stochastic(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    attention: np.ndarray = np.tril(rng.random((size, size)) + 1e-3)
    attention /= attention.sum(axis=-1, keepdims=True)
    bits: np.ndarray = np.tril(rng.random((size, size)) < 0.3).astype(np.uint8)
    return attention, bits


def reference_pairs(attention: np.ndarray, bits: np.ndarray) -> list[tuple[float, float]]:
    """(C_i, N_i) for rows with both causal and non-causal prefix tokens, one loop per row."""
    pairs: list[tuple[float, float]] = []
    for row in range(attention.shape[0]):
        causal: list[float] = [attention[row, column] for column in range(row + 1) if bits[row, column]]
        other: list[float] = [attention[row, column] for column in range(row + 1) if not bits[row, column]]
        if causal and other:
            pairs.append((sum(causal) / len(causal), sum(other) / len(other)))
    return pairs


def test_row_means_match_reference() -> None:
    rng: np.random.Generator = np.random.default_rng(23)
    for _ in range(1_000):
        attention, bits = random_row_stochastic(rng, 6)
        adjacency = TokenAdjacency(bits=bits, ignored=np.zeros(6, dtype=bool))
        got: list[tuple[float, float]] = attn_ratio_terms(adjacency, ad.Tensor(attention)).pairs()
        expected: list[tuple[float, float]] = reference_pairs(attention, bits)
        assert len(got) == len(expected)
        for (causal, other), (causal_ref, other_ref) in zip(got, expected, strict=True):
            assert abs(causal - causal_ref) < 1e-12
            assert abs(other - other_ref) < 1e-12


def test_permuting_prefix_columns_keeps_row_means() -> None:
    """Shuffling each row's visible columns in the map and the adjacency together leaves C_i and N_i alone."""
    rng: np.random.Generator = np.random.default_rng(29)
    size = 7
    for _ in range(10_000):
        attention, bits = random_row_stochastic(rng, size)
        shuffled_attention: np.ndarray = attention.copy()
        shuffled_bits: np.ndarray = bits.copy()
        for row in range(size):
            order: np.ndarray = rng.permutation(row + 1)
            shuffled_attention[row, : row + 1] = attention[row, order]
            shuffled_bits[row, : row + 1] = bits[row, order]

        ignored: np.ndarray = np.zeros(size, dtype=bool)
        before: RatioTerms = attn_ratio_terms(TokenAdjacency(bits=bits, ignored=ignored), ad.Tensor(attention))
        after: RatioTerms = attn_ratio_terms(TokenAdjacency(bits=shuffled_bits, ignored=ignored), ad.Tensor(shuffled_attention))
        assert np.array_equal(before.rows, after.rows)
        assert np.allclose(before.causal.data[before.rows], after.causal.data[after.rows], rtol=0, atol=1e-12)
        assert np.allclose(before.non_causal.data[before.rows], after.non_causal.data[after.rows], rtol=0, atol=1e-12)


def test_loss_does_not_decrease_with_alpha() -> None:
    rng: np.random.Generator = np.random.default_rng(31)
    for _ in range(2_000):
        attention, bits = random_row_stochastic(rng, 6)
        terms: RatioTerms = attn_ratio_terms(TokenAdjacency(bits=bits, ignored=np.zeros(6, dtype=bool)), ad.Tensor(attention))
        alphas: np.ndarray = np.sort(rng.uniform(0.01, 5.0, size=4))
        losses: list[float] = [re_attention_loss(terms, float(alpha)).item() for alpha in alphas]
        assert all(low <= high for low, high in pairwise(losses))
