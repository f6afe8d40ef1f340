"""Decoder-only transformer that returns every attention map it computes.

Pre-norm residual blocks, fixed sinusoidal positions, per-head projection
matrices (W_q, W_k, W_v per head, one W_o per layer), GELU feed-forward and an
untied output projection. Optional low-rank adapters sit on the Q and V
projections of individual heads.

Checkpoint layout (little-endian, format_version 1):

    8 bytes   magic b"CATCKPT1"
    8 bytes   unsigned header length
    header    UTF-8 JSON, sorted keys: format_version, model_config,
              vocab_sha256, optimizer_step, adapters, metadata, tensors
              (group, name, shape, dtype, offset, nbytes per buffer)
    buffers   raw tensor bytes in header order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np
from loguru import logger

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.settings import ConfigurationError

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

Params = dict[str, ad.Tensor]

CHECKPOINT_MAGIC = b"CATCKPT1"
FORMAT_VERSION = 1


class InputError(ValueError):
    """Raised for token sequences the model cannot take."""


@dataclass(frozen=True)
class ModelConfig:
    """Transformer shape. d_model has to equal n_heads * d_v."""

    vocab_size: int
    d_model: int = 128
    d_k: int = 32
    d_v: int = 32
    n_heads: int = 4
    n_layers: int = 2
    max_seq_len: int = 192
    ffn_multiplier: int = 4
    positional: str = "sinusoidal"
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.d_model != self.n_heads * self.d_v:
            msg: str = f"d_model ({self.d_model}) must equal n_heads * d_v ({self.n_heads} * {self.d_v})"
            raise ConfigurationError(msg)
        if self.positional != "sinusoidal":
            msg = f"Unsupported positional encoding: {self.positional}"
            raise ConfigurationError(msg)
        if self.dtype not in {"float32", "float64"}:
            msg = f"dtype must be float32 or float64, got {self.dtype}"
            raise ConfigurationError(msg)
        if min(self.vocab_size, self.d_k, self.n_layers, self.max_seq_len, self.ffn_multiplier) < 1:
            msg = "Model sizes must be positive"
            raise ConfigurationError(msg)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    @classmethod
    def from_flat(cls, values: Mapping[str, str], vocab_size: int) -> ModelConfig:
        """Build from the "model" section of a flat config.

        Raises:
            ConfigurationError: On unknown keys or unparseable values.
        """
        known: dict[str, type] = {
            "d_model": int,
            "d_k": int,
            "d_v": int,
            "n_heads": int,
            "n_layers": int,
            "max_seq_len": int,
            "ffn_multiplier": int,
            "positional": str,
            "dtype": str,
        }
        kwargs: dict[str, Any] = {}
        for key, value in values.items():
            if key not in known:
                msg: str = f"Unknown model setting: model.{key}"
                raise ConfigurationError(msg)
            try:
                kwargs[key] = known[key](value)
            except ValueError as e:
                msg = f"Bad value for model.{key}: {value!r}"
                raise ConfigurationError(msg) from e
        return cls(vocab_size=vocab_size, **kwargs)


@dataclass
class LoraAdapter:
    """Low-rank update on one head's Q or V projection: W + scale * down @ up."""

    layer: int
    head: int
    target: str
    rank: int
    scale: float
    down: ad.Tensor
    up: ad.Tensor

    @property
    def prefix(self) -> str:
        return f"lora.{self.layer}.{self.head}.{self.target}"


@dataclass
class AttentionCapture:
    """Attention maps of one forward pass, still attached to its graph.

    per_layer_head[l][h] has shape (batch, n, n).
    """

    per_layer_head: list[list[ad.Tensor]] = field(default_factory=list)

    @cached_property
    def average(self) -> ad.Tensor:
        """Uniform mean over all layers and heads, shape (batch, n, n)."""
        maps: list[ad.Tensor] = [attention for layer in self.per_layer_head for attention in layer]
        total: ad.Tensor = maps[0]
        for attention in maps[1:]:
            total = ad.add(total, attention)
        return ad.scale(total, 1.0 / len(maps))


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, in initialization order."""
    d: int = config.d_model
    hidden: int = config.ffn_multiplier * d
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (config.vocab_size, d)}
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        shapes[f"{prefix}.ln1.gain"] = (d,)
        shapes[f"{prefix}.ln1.bias"] = (d,)
        for head in range(config.n_heads):
            shapes[f"{prefix}.heads.{head}.w_q"] = (d, config.d_k)
            shapes[f"{prefix}.heads.{head}.w_k"] = (d, config.d_k)
            shapes[f"{prefix}.heads.{head}.w_v"] = (d, config.d_v)
        shapes[f"{prefix}.w_o"] = (config.n_heads * config.d_v, d)
        shapes[f"{prefix}.ln2.gain"] = (d,)
        shapes[f"{prefix}.ln2.bias"] = (d,)
        shapes[f"{prefix}.ffn.w_in"] = (d, hidden)
        shapes[f"{prefix}.ffn.b_in"] = (hidden,)
        shapes[f"{prefix}.ffn.w_out"] = (hidden, d)
        shapes[f"{prefix}.ffn.b_out"] = (d,)
    shapes["final_ln.gain"] = (d,)
    shapes["final_ln.bias"] = (d,)
    shapes["unembed"] = (d, config.vocab_size)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of trainable scalars."""
    d, v = config.d_model, config.vocab_size
    hidden: int = config.ffn_multiplier * d
    per_head: int = d * (2 * config.d_k + config.d_v)
    per_layer: int = 4 * d + config.n_heads * per_head + config.n_heads * config.d_v * d + 2 * d * hidden + hidden + d
    return 2 * v * d + config.n_layers * per_layer + 2 * d


def init_params(config: ModelConfig, seed: int = 42) -> Params:
    """Scaled-normal initialization, deterministic given the seed.

    Token embeddings ~ N(0, 1); projections ~ N(0, 0.02); residual output
    projections shrink by sqrt(2 * n_layers); gains are 1 and biases 0.
    """
    rng = np.random.default_rng(seed)
    residual_std: float = 0.02 / math.sqrt(2 * config.n_layers)
    params: Params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith((".bias", ".b_in", ".b_out")):
            data = np.zeros(shape)
        elif name == "embed.tokens":
            data = rng.normal(0.0, 1.0, size=shape)
        elif name.endswith((".w_o", ".w_out")):
            data = rng.normal(0.0, residual_std, size=shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = ad.Tensor(data.astype(config.np_dtype), requires_grad=True, name=name)

    logger.bind(stage="model").debug(f"Initialized {parameter_count(config)} parameters with seed {seed}")
    return params


def make_adapters(
    config: ModelConfig,
    rank: int,
    targets: Iterable[str] = ("q", "v"),
    *,
    scale: float = 1.0,
    seed: int = 42,
) -> list[LoraAdapter]:
    """Adapters for every layer and head on the given projections.

    down ~ N(0, 1/d_model), up = 0, so a fresh adapter leaves the model unchanged.

    Raises:
        ConfigurationError: On an unknown target or a nonpositive rank.
    """
    wanted: tuple[str, ...] = tuple(targets)
    if rank < 1 or not wanted or any(target not in {"q", "v"} for target in wanted):
        msg: str = f"Adapters need rank >= 1 and targets from q, v; got rank={rank}, targets={wanted}"
        raise ConfigurationError(msg)

    rng = np.random.default_rng(seed)
    adapters: list[LoraAdapter] = []
    for layer in range(config.n_layers):
        for head in range(config.n_heads):
            for target in wanted:
                width: int = config.d_k if target == "q" else config.d_v
                down = rng.normal(0.0, 1.0 / math.sqrt(config.d_model), size=(config.d_model, rank))
                adapter = LoraAdapter(
                    layer=layer,
                    head=head,
                    target=target,
                    rank=rank,
                    scale=scale,
                    down=ad.Tensor(down.astype(config.np_dtype), requires_grad=True),
                    up=ad.Tensor(np.zeros((rank, width), dtype=config.np_dtype), requires_grad=True),
                )
                adapter.down.name = f"{adapter.prefix}.down"
                adapter.up.name = f"{adapter.prefix}.up"
                adapters.append(adapter)
    return adapters


def adapter_tensors(adapters: Iterable[LoraAdapter]) -> Params:
    """Adapter matrices by name."""
    named: Params = {}
    for adapter in adapters:
        named[f"{adapter.prefix}.down"] = adapter.down
        named[f"{adapter.prefix}.up"] = adapter.up
    return named


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    """Fixed sin/cos position table of shape (length, width)."""
    positions: np.ndarray = np.arange(length)[:, None]
    rates: np.ndarray = np.power(10000.0, -(np.arange(0, width, 2) / width))
    table: np.ndarray = np.zeros((length, width))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)[:, : width // 2]
    return table


def _projection(weight: ad.Tensor, adapter: LoraAdapter | None) -> ad.Tensor:
    if adapter is None:
        return weight
    return ad.add(weight, ad.scale(ad.matmul(adapter.down, adapter.up), adapter.scale))


def forward(
    tokens: Sequence[int] | np.ndarray,
    params: Params,
    config: ModelConfig,
    adapters: Sequence[LoraAdapter] | None = None,
) -> tuple[ad.Tensor, AttentionCapture]:
    """Run the model over a sequence or a (batch, n) array of ids.

    Returns:
        tuple[Tensor, AttentionCapture]: Logits of shape (batch, n, vocab) and
        the attention maps; a 1-D input counts as a batch of one.

    Raises:
        InputError: If the sequence is empty, too long or holds unknown ids.
    """
    ids: np.ndarray = np.asarray(tokens, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    batch, length = ids.shape
    if length == 0 or length > config.max_seq_len:
        msg: str = f"Sequence length {length} outside 1..{config.max_seq_len}"
        raise InputError(msg)
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        msg = f"Token ids must lie in [0, {config.vocab_size})"
        raise InputError(msg)

    by_slot: dict[tuple[int, int, str], LoraAdapter] = {(a.layer, a.head, a.target): a for a in adapters or ()}
    inv_sqrt_dk: float = 1.0 / math.sqrt(config.d_k)

    positions = np.broadcast_to(sinusoidal_positions(length, config.d_model), (batch, length, config.d_model))
    x: ad.Tensor = ad.add(
        ad.embedding_lookup(params["embed.tokens"], ids),
        ad.Tensor(positions.astype(config.np_dtype)),
    )

    capture = AttentionCapture()
    for layer in range(config.n_layers):
        prefix = f"layers.{layer}"
        normed: ad.Tensor = ad.layer_norm(x, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
        head_outputs: list[ad.Tensor] = []
        maps: list[ad.Tensor] = []
        for head in range(config.n_heads):
            head_prefix = f"{prefix}.heads.{head}"
            q = ad.matmul(normed, _projection(params[f"{head_prefix}.w_q"], by_slot.get((layer, head, "q"))))
            k = ad.matmul(normed, params[f"{head_prefix}.w_k"])
            v = ad.matmul(normed, _projection(params[f"{head_prefix}.w_v"], by_slot.get((layer, head, "v"))))
            attention = ad.softmax_rows_masked(ad.scale(ad.matmul(q, ad.transpose_last(k)), inv_sqrt_dk))
            maps.append(attention)
            head_outputs.append(ad.matmul(attention, v))
        capture.per_layer_head.append(maps)
        x = ad.add(x, ad.matmul(ad.concat_last_dim(head_outputs), params[f"{prefix}.w_o"]))

        normed = ad.layer_norm(x, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
        hidden = ad.gelu(ad.add(ad.matmul(normed, params[f"{prefix}.ffn.w_in"]), params[f"{prefix}.ffn.b_in"]))
        x = ad.add(x, ad.add(ad.matmul(hidden, params[f"{prefix}.ffn.w_out"]), params[f"{prefix}.ffn.b_out"]))

    x = ad.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"])
    return ad.matmul(x, params["unembed"]), capture


def generate_greedy(
    prompt: Sequence[int],
    params: Params,
    config: ModelConfig,
    max_new_tokens: int,
    *,
    eos_id: int = 2,
    adapters: Sequence[LoraAdapter] | None = None,
) -> list[int]:
    """Append argmax tokens until eos, max_new_tokens or the length limit.

    Returns:
        list[int]: The prompt followed by the generated ids.
    """
    ids: list[int] = [int(token_id) for token_id in prompt]
    for _ in range(max_new_tokens):
        if len(ids) >= config.max_seq_len:
            break
        logits, _ = forward(ids, params, config, adapters)
        next_id = int(np.argmax(logits.data[0, -1]))
        ids.append(next_id)
        if next_id == eos_id:
            break
    return ids


def score_choices(
    prompt: Sequence[int],
    first_tokens: Sequence[int],
    params: Params,
    config: ModelConfig,
    adapters: Sequence[LoraAdapter] | None = None,
) -> int:
    """Index of the candidate whose first token has the highest next-token logit."""
    logits, _ = forward(prompt, params, config, adapters)
    last: np.ndarray = logits.data[0, -1]
    return int(np.argmax([last[token_id] for token_id in first_tokens]))


@dataclass
class Checkpoint:
    """Everything save_checkpoint writes."""

    config: ModelConfig
    params: Params
    vocab_sha256: str
    adapters: list[LoraAdapter] = field(default_factory=list)
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0
    metadata: dict[str, Any] = field(default_factory=dict)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> None:
    """Write a checkpoint with a byte-stable layout (see module docstring)."""
    buffers: list[tuple[str, str, np.ndarray]] = [("params", name, tensor.data) for name, tensor in checkpoint.params.items()]
    buffers += [("adapters", name, tensor.data) for name, tensor in adapter_tensors(checkpoint.adapters).items()]
    buffers += [("optimizer", name, array) for name, array in sorted(checkpoint.optimizer_state.items())]

    entries: list[dict[str, Any]] = []
    blobs: list[bytes] = []
    offset = 0
    for group, name, array in buffers:
        blob: bytes = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
        entries.append({
            "group": group,
            "name": name,
            "shape": list(array.shape),
            "dtype": array.dtype.name,
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)

    header: dict[str, Any] = {
        "format_version": FORMAT_VERSION,
        "model_config": asdict(checkpoint.config),
        "vocab_sha256": checkpoint.vocab_sha256,
        "optimizer_step": checkpoint.optimizer_step,
        "adapters": [
            {"layer": a.layer, "head": a.head, "target": a.target, "rank": a.rank, "scale": a.scale} for a in checkpoint.adapters
        ],
        "metadata": checkpoint.metadata,
        "tensors": entries,
    }
    header_bytes: bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    with Path.open(path, "wb") as file:
        file.write(CHECKPOINT_MAGIC)
        file.write(struct.pack("<Q", len(header_bytes)))
        file.write(header_bytes)
        for blob in blobs:
            file.write(blob)
    logger.bind(stage="model").info(f"Saved checkpoint with {len(entries)} buffers to {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint.

    Raises:
        ConfigurationError: If the file is missing, not a checkpoint, or of another format version.
    """
    if not path.is_file():
        msg: str = f"Checkpoint not found: {path}"
        raise ConfigurationError(msg)

    raw: bytes = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        msg = f"{path} is not a checkpoint"
        raise ConfigurationError(msg)
    start: int = len(CHECKPOINT_MAGIC) + 8
    (header_length,) = struct.unpack("<Q", raw[len(CHECKPOINT_MAGIC) : start])
    header: dict[str, Any] = json.loads(raw[start : start + header_length].decode("utf-8"))
    if header["format_version"] != FORMAT_VERSION:
        msg = f"Unsupported checkpoint format {header['format_version']}"
        raise ConfigurationError(msg)

    body: bytes = raw[start + header_length :]
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "adapters": {}, "optimizer": {}}
    for entry in header["tensors"]:
        chunk: bytes = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        dtype: np.dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        array = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).astype(entry["dtype"])
        groups[entry["group"]][entry["name"]] = array

    config = ModelConfig(**header["model_config"])
    params: Params = {name: ad.Tensor(array, requires_grad=True, name=name) for name, array in groups["params"].items()}
    adapters: list[LoraAdapter] = []
    for entry in header["adapters"]:
        prefix = f"lora.{entry['layer']}.{entry['head']}.{entry['target']}"
        adapters.append(
            LoraAdapter(
                layer=entry["layer"],
                head=entry["head"],
                target=entry["target"],
                rank=entry["rank"],
                scale=entry["scale"],
                down=ad.Tensor(groups["adapters"][f"{prefix}.down"], requires_grad=True, name=f"{prefix}.down"),
                up=ad.Tensor(groups["adapters"][f"{prefix}.up"], requires_grad=True, name=f"{prefix}.up"),
            ),
        )

    logger.bind(stage="model").info(f"Loaded checkpoint {path} ({len(params)} parameters, {len(adapters)} adapters)")
    return Checkpoint(
        config=config,
        params=params,
        vocab_sha256=header["vocab_sha256"],
        adapters=adapters,
        optimizer_state=groups["optimizer"],
        optimizer_step=header["optimizer_step"],
        metadata=header["metadata"],
    )
