from __future__ import annotations

from typing import TYPE_CHECKING

import numpy as np
import pytest

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.model import (
    Checkpoint,
    InputError,
    ModelConfig,
    Params,
    forward,
    generate_greedy,
    init_params,
    load_checkpoint,
    make_adapters,
    parameter_count,
    parameter_shapes,
    save_checkpoint,
    score_choices,
)
from causal_attention_tuning.settings import ConfigurationError

if TYPE_CHECKING:
    from pathlib import Path

config = ModelConfig(vocab_size=20, d_model=8, d_k=4, d_v=4, n_heads=2, n_layers=2, max_seq_len=16, dtype="float64")
tokens: list[int] = [1, 5, 7, 9, 4, 6]


def test_config_rejects_mismatched_heads() -> None:
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=20, d_model=10, d_k=4, d_v=4, n_heads=2)


def test_parameter_count_matches_shapes() -> None:
    total: int = sum(int(np.prod(shape)) for shape in parameter_shapes(config).values())
    assert parameter_count(config) == total
    assert sum(tensor.size for tensor in init_params(config).values()) == total


def test_default_shape_parameter_count() -> None:
    """Two layers, four heads, width 128 and a 100-token vocabulary."""
    assert parameter_count(ModelConfig(vocab_size=100)) == 421_376


def test_init_params_is_seeded() -> None:
    first: Params = init_params(config, seed=42)
    second: Params = init_params(config, seed=42)
    other: Params = init_params(config, seed=7)
    assert all(np.array_equal(first[name].data, second[name].data) for name in first)
    assert not np.array_equal(first["embed.tokens"].data, other["embed.tokens"].data)


def test_single_token_attends_to_itself() -> None:
    _, capture = forward([3], init_params(config), config)
    for layer in capture.per_layer_head:
        for attention in layer:
            assert attention.data.tolist() == [[[1.0]]]


def test_attention_maps_are_causal_and_stochastic() -> None:
    logits, capture = forward(tokens, init_params(config), config)
    assert logits.shape == (1, len(tokens), config.vocab_size)
    assert len(capture.per_layer_head) == config.n_layers
    for layer in capture.per_layer_head:
        assert len(layer) == config.n_heads
        for attention in layer:
            assert np.allclose(attention.data.sum(axis=-1), 1.0)
            assert np.all(np.triu(attention.data[0], k=1) == 0.0)


def test_average_is_mean_of_all_maps() -> None:
    _, capture = forward(tokens, init_params(config), config)
    stacked: np.ndarray = np.stack([attention.data for layer in capture.per_layer_head for attention in layer])
    assert np.allclose(capture.average.data, stacked.mean(axis=0))


def test_future_tokens_do_not_change_earlier_logits() -> None:
    params: Params = init_params(config)
    changed: list[int] = [*tokens[:-1], 11]
    first, _ = forward(tokens, params, config)
    second, _ = forward(changed, params, config)
    assert np.allclose(first.data[0, :-1], second.data[0, :-1])
    assert not np.allclose(first.data[0, -1], second.data[0, -1])


def test_forward_rejects_bad_input() -> None:
    params: Params = init_params(config)
    with pytest.raises(InputError):
        forward([], params, config)
    with pytest.raises(InputError):
        forward([1] * (config.max_seq_len + 1), params, config)
    with pytest.raises(InputError):
        forward([config.vocab_size], params, config)


def test_fresh_adapters_leave_the_model_unchanged() -> None:
    params: Params = init_params(config)
    plain, _ = forward(tokens, params, config)
    adapted, _ = forward(tokens, params, config, make_adapters(config, rank=2))
    assert np.array_equal(plain.data, adapted.data)


def test_adapters_cover_every_head() -> None:
    adapters = make_adapters(config, rank=2, targets=("q", "v"))
    assert len(adapters) == config.n_layers * config.n_heads * 2
    with pytest.raises(ConfigurationError):
        make_adapters(config, rank=0)
    with pytest.raises(ConfigurationError):
        make_adapters(config, rank=2, targets=("k",))


def test_gradient_reaches_query_weights() -> None:
    """Finite differences agree with backprop through a whole forward pass."""
    params: Params = init_params(config)
    name = "layers.0.heads.1.w_q"
    targets: np.ndarray = np.array([tokens[1:] + [2]])

    def loss(weight: ad.Tensor) -> ad.Tensor:
        logits, _ = forward(tokens, {**params, name: weight}, config)
        return ad.cross_entropy_from_logits(logits, targets)

    assert ad.check_gradient(loss, [params[name]], max_entries=12) < 1e-4


def test_gradient_reaches_adapter_up_matrix() -> None:
    params: Params = init_params(config)
    adapters = make_adapters(config, rank=2, targets=("v",))
    adapters[0].up.data = np.random.default_rng(1).normal(0.0, 0.1, size=adapters[0].up.shape)
    targets: np.ndarray = np.array([tokens[1:] + [2]])

    def loss(up: ad.Tensor) -> ad.Tensor:
        adapters[0].up = up
        logits, _ = forward(tokens, params, config, adapters)
        return ad.cross_entropy_from_logits(logits, targets)

    assert ad.check_gradient(loss, [adapters[0].up]) < 1e-4


def test_generate_greedy() -> None:
    params: Params = init_params(config)
    assert generate_greedy(tokens, params, config, max_new_tokens=0) == tokens
    first: list[int] = generate_greedy(tokens, params, config, max_new_tokens=4)
    assert first == generate_greedy(tokens, params, config, max_new_tokens=4)
    assert first[: len(tokens)] == tokens
    assert len(tokens) < len(first) <= len(tokens) + 4


def test_generate_greedy_stops_at_length_limit() -> None:
    prompt: list[int] = [4] * config.max_seq_len
    assert generate_greedy(prompt, init_params(config), config, max_new_tokens=5) == prompt


def test_score_choices_picks_highest_logit() -> None:
    params: Params = init_params(config)
    logits, _ = forward(tokens, params, config)
    last: np.ndarray = logits.data[0, -1]
    candidates: list[int] = [5, 6, 7]
    expected = int(np.argmax(last[candidates]))
    assert score_choices(tokens, candidates, params, config) == expected


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    params: Params = init_params(config)
    adapters = make_adapters(config, rank=2)
    checkpoint = Checkpoint(
        config=config,
        params=params,
        vocab_sha256="ab" * 32,
        adapters=adapters,
        optimizer_state={"m/unembed": np.ones((config.d_model, config.vocab_size))},
        optimizer_step=12,
        metadata={"mode": "cat"},
    )
    path: Path = tmp_path / "model.ckpt"
    save_checkpoint(path, checkpoint)
    loaded: Checkpoint = load_checkpoint(path)

    assert loaded.config == config
    assert loaded.vocab_sha256 == "ab" * 32
    assert loaded.optimizer_step == 12
    assert loaded.metadata == {"mode": "cat"}
    assert list(loaded.params) == list(params)
    assert all(np.array_equal(loaded.params[name].data, params[name].data) for name in params)
    assert [adapter.prefix for adapter in loaded.adapters] == [adapter.prefix for adapter in adapters]
    assert np.array_equal(loaded.optimizer_state["m/unembed"], checkpoint.optimizer_state["m/unembed"])

    again: Path = tmp_path / "again.ckpt"
    save_checkpoint(again, loaded)
    assert again.read_bytes() == path.read_bytes()


def test_load_checkpoint_rejects_other_files(tmp_path: Path) -> None:
    path: Path = tmp_path / "not.ckpt"
    path.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(ConfigurationError):
        load_checkpoint(path)
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "missing.ckpt")
