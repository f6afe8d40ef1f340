from __future__ import annotations

import numpy as np
import pytest

from causal_attention_tuning.causal_supervision import SkipReport
from causal_attention_tuning.dataset import Batch, EncodedExample, collate, encode_example, encode_prompt, encode_records
from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.stg import default_schema_e, generate
from causal_attention_tuning.tokenizer import Vocab, build_vocab, detokenize

records: list[dict] = [example.to_record() for example in generate(default_schema_e(), 6, "train")]
vocab: Vocab = build_vocab([f"{record['question']} Answer: {record['answer']}" for record in records])


def test_sequence_layout() -> None:
    example: EncodedExample = encode_example(vocab, records[0]["question"], records[0]["answer"])
    assert example.ids[0] == vocab.bos_id
    assert example.ids[-1] == vocab.eos_id
    assert detokenize(vocab, example.ids[example.answer_start :]) == records[0]["answer"]
    assert detokenize(vocab, example.prompt).endswith("Answer:")


def test_prompt_matches_example_prefix() -> None:
    example: EncodedExample = encode_example(vocab, records[1]["question"], records[1]["answer"])
    prompt, spans = encode_prompt(vocab, records[1]["question"])
    assert prompt == example.prompt
    assert spans[0].start == 1


def test_empty_fields_are_rejected() -> None:
    with pytest.raises(ConfigurationError):
        encode_example(vocab, " ", "Low Risk")


def test_ground_truth_maps_supervise_answer_rows() -> None:
    report = SkipReport()
    encoded: list[EncodedExample] = encode_records(vocab, records, report)
    assert report.as_dict()["missing_phrases"] == 0
    for example in encoded:
        rows: np.ndarray = np.flatnonzero(example.adjacency.supervised_rows)
        assert rows.min() == example.answer_start - 1
        assert rows.max() == len(example.ids) - 3


def test_malformed_map_means_no_supervision() -> None:
    broken: dict = {**records[0], "causal_map": {"Low Risk": "Smoking: 2"}}
    report = SkipReport()
    (example,) = encode_records(vocab, [broken], report)
    assert example.adjacency.is_empty()
    assert report.empty_examples == 1


def test_collate_pads_and_masks_answer() -> None:
    encoded: list[EncodedExample] = encode_records(vocab, records[:3])
    batch: Batch = collate(encoded, [0, 1, 2])
    length: int = max(len(example.ids) for example in encoded)
    assert batch.ids.shape == (3, length)
    assert batch.adjacency.bits.shape == (3, length, length)
    for row, example in enumerate(encoded):
        size: int = len(example.ids)
        assert batch.ids[row, :size].tolist() == example.ids
        assert np.all(batch.ids[row, size:] == vocab.pad_id)
        assert batch.targets[row, : size - 1].tolist() == example.ids[1:]
        weighted: np.ndarray = np.flatnonzero(batch.loss_mask[row])
        assert weighted.tolist() == list(range(example.answer_start - 1, size - 1))


def test_collate_full_mask() -> None:
    encoded: list[EncodedExample] = encode_records(vocab, records[:2])
    batch: Batch = collate(encoded, [0, 1], loss_mask="full")
    assert batch.loss_mask[0, 0] == 1.0
    assert batch.loss_mask[0].sum() == len(encoded[0].ids) - 1
