"""Training with next-token loss plus the gamma-weighted Re-Attention loss."""

from __future__ import annotations

import dataclasses
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import numpy as np
from loguru import logger

from causal_attention_tuning import autodiff as ad
from causal_attention_tuning.causal_supervision import SkipReport, attn_ratio_terms, re_attention_loss
from causal_attention_tuning.dataset import collate
from causal_attention_tuning.model import LoraAdapter, ModelConfig, Params, adapter_tensors, forward, init_params, make_adapters
from causal_attention_tuning.settings import ConfigurationError
from causal_attention_tuning.utils import write_jsonl

if TYPE_CHECKING:
    from collections.abc import Mapping, Sequence
    from pathlib import Path

    from causal_attention_tuning.dataset import EncodedExample

Validator = Callable[[Params, list[LoraAdapter]], float]


class TrainingError(RuntimeError):
    """Raised when training cannot continue."""


@dataclass(frozen=True)
class TrainConfig:
    """Loss, schedule and optimizer settings."""

    mode: Literal["cat", "vanilla"] = "cat"
    alpha: float = 0.2
    gamma_mode: Literal["epoch_decay", "constant"] = "epoch_decay"
    gamma_value: float = 1.0
    gamma_one_based: bool = False
    learning_rate: float = 3e-4
    epochs: int = 6
    batch_size: int = 16
    accumulation_steps: int = 1
    seed: int = 42
    warmup_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    adapter_rank: int = 0
    adapter_scale: float = 1.0
    loss_mask: Literal["answer", "full"] = "answer"

    def __post_init__(self) -> None:
        checks: dict[str, bool] = {
            "mode must be cat or vanilla": self.mode in {"cat", "vanilla"},
            "alpha must be positive": self.alpha > 0,
            "gamma_mode must be epoch_decay or constant": self.gamma_mode in {"epoch_decay", "constant"},
            "epochs must be at least 1": self.epochs >= 1,
            "batch_size must be at least 1": self.batch_size >= 1,
            "accumulation_steps must be at least 1": self.accumulation_steps >= 1,
            "warmup_fraction must lie in [0, 1)": 0 <= self.warmup_fraction < 1,
            "adapter_rank must not be negative": self.adapter_rank >= 0,
            "loss_mask must be answer or full": self.loss_mask in {"answer", "full"},
        }
        for message, passed in checks.items():
            if not passed:
                raise ConfigurationError(message)

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation_steps

    def gamma(self, epoch: int) -> float:
        """Weight of the attention loss in a 0-based epoch."""
        if self.gamma_mode == "constant":
            return self.gamma_value
        return math.exp(-(epoch + 1 if self.gamma_one_based else epoch))

    @classmethod
    def from_flat(cls, values: Mapping[str, str]) -> TrainConfig:
        """Build from the "train" section of a flat config.

        Raises:
            ConfigurationError: On unknown keys or unparseable values.
        """
        kwargs: dict[str, Any] = {}
        types: dict[str, type] = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key not in types:
                msg: str = f"Unknown train setting: train.{key}"
                raise ConfigurationError(msg)
            try:
                kwargs[key] = _parse_bool(value) if types[key] is bool else types[key](value)
            except ValueError as e:
                msg = f"Bad value for train.{key}: {value!r}"
                raise ConfigurationError(msg) from e
        return cls(**kwargs)


def _parse_bool(value: str) -> bool:
    lowered: str = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    msg: str = f"not a boolean: {value!r}"
    raise ValueError(msg)


@dataclass
class StepRecord:
    update: int
    epoch: int
    l_next: float
    l_attn: float
    gamma: float
    learning_rate: float
    supervised_rows: int


@dataclass
class EpochRecord:
    epoch: int
    gamma: float
    l_next: float
    l_attn: float
    validation_accuracy: float | None = None


@dataclass
class RunRecord:
    """Everything logged during one training run."""

    config: dict[str, Any]
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    skip_report: dict[str, int] = field(default_factory=dict)
    wall_time: float = 0.0
    workers: int = 1

    def trace(self) -> tuple[list[StepRecord], list[EpochRecord]]:
        """The parts that must match between runs on identical inputs."""
        return self.steps, self.epochs

    def write(self, path: Path) -> None:
        """One JSON line per step, then per epoch, then a closing run line."""
        lines: list[dict[str, Any]] = [{"type": "step", **dataclasses.asdict(step)} for step in self.steps]
        lines += [{"type": "epoch", **dataclasses.asdict(epoch)} for epoch in self.epochs]
        lines.append({
            "type": "run",
            "config": self.config,
            "skip_report": self.skip_report,
            "wall_time": self.wall_time,
            "workers": self.workers,
        })
        write_jsonl(path, lines)


class AdamW:
    """Adam with decoupled weight decay over numpy buffers.

    Matrices decay; 1-D parameters (gains, biases) do not.
    """

    def __init__(self, params: Params, config: TrainConfig, state: Mapping[str, np.ndarray] | None = None, step: int = 0) -> None:
        self.params: Params = params
        self.config: TrainConfig = config
        self.t: int = step
        self.m: dict[str, np.ndarray] = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}
        self.v: dict[str, np.ndarray] = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}
        for key, value in (state or {}).items():
            kind, _, name = key.partition("/")
            if name in self.params and kind in {"m", "v"}:
                getattr(self, kind)[name] = np.array(value, dtype=self.params[name].dtype)

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def step(self, learning_rate: float) -> None:
        self.t += 1
        beta1, beta2 = self.config.beta1, self.config.beta2
        correction1: float = 1.0 - beta1**self.t
        correction2: float = 1.0 - beta2**self.t
        for name, tensor in self.params.items():
            grad: np.ndarray | None = tensor.grad
            if grad is None:
                continue
            if tensor.data.ndim > 1:
                tensor.data *= 1.0 - learning_rate * self.config.weight_decay
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * grad
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * grad * grad
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.config.eps)
            tensor.data -= (learning_rate * update).astype(tensor.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"m/{name}": array for name, array in self.m.items()} | {f"v/{name}": array for name, array in self.v.items()}


def lr_schedule(step: int, total_steps: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear warmup over the first warmup_fraction of steps, then cosine decay to 0.

    Raises:
        ValueError: If step lies outside [0, total_steps].
    """
    if total_steps <= 0 or not 0 <= step <= total_steps:
        msg: str = f"step {step} outside [0, {total_steps}]"
        raise ValueError(msg)

    warmup: float = warmup_fraction * total_steps
    if step < warmup:
        return base_lr * step / warmup
    progress: float = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    params: Params,
    model_config: ModelConfig,
    examples: Sequence[EncodedExample],
    config: TrainConfig,
    *,
    adapters: list[LoraAdapter] | None = None,
    validate: Validator | None = None,
) -> tuple[Params, list[LoraAdapter], RunRecord, AdamW]:
    """Train in place and return the parameters, adapters, record and optimizer.

    Each update averages next-token loss plus gamma times the attention loss
    over accumulation_steps batches. The attention loss is not computed at all
    in vanilla mode or when gamma is 0, so those runs match bit for bit.

    Args:
        params: Model parameters, updated in place.
        model_config: Model shape.
        examples: Encoded training records with their adjacencies.
        config: Training settings.
        adapters: Existing adapters. With adapter_rank > 0 and none given, new ones are made.
        validate: Called after each epoch; returns IID validation accuracy.

    Raises:
        ConfigurationError: If there are no examples.
        TrainingError: If a loss is not finite.
    """
    if not examples:
        msg = "Cannot train on an empty dataset"
        raise ConfigurationError(msg)

    log = logger.bind(stage="train")
    started: float = time.perf_counter()

    if config.adapter_rank and adapters is None:
        adapters = make_adapters(model_config, config.adapter_rank, scale=config.adapter_scale, seed=config.seed)
    adapters = adapters or []
    if adapters:
        for tensor in params.values():
            tensor.requires_grad = False
    trainable: Params = adapter_tensors(adapters) if adapters else params
    optimizer = AdamW(trainable, config)

    rng = np.random.default_rng(config.seed)
    batches_per_epoch: int = math.ceil(len(examples) / config.batch_size)
    updates_per_epoch: int = math.ceil(batches_per_epoch / config.accumulation_steps)
    total_updates: int = updates_per_epoch * config.epochs
    record = RunRecord(config=dataclasses.asdict(config))
    report = SkipReport()
    log.info(
        f"Training {config.mode} for {config.epochs} epochs, {total_updates} updates, "
        f"{len(trainable)} trainable tensors{' (adapters)' if adapters else ''}",
    )

    update = 0
    for epoch in range(config.epochs):
        gamma: float = config.gamma(epoch)
        use_attention: bool = config.mode == "cat" and gamma != 0
        order: np.ndarray = rng.permutation(len(examples))
        batches: list[np.ndarray] = [order[i : i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        epoch_steps: list[StepRecord] = []

        for first in range(0, len(batches), config.accumulation_steps):
            group: list[np.ndarray] = batches[first : first + config.accumulation_steps]
            optimizer.zero_grad()
            l_next_sum = 0.0
            l_attn_sum = 0.0
            rows = 0
            for indices in group:
                batch = collate([examples[i] for i in indices], indices.tolist(), config.loss_mask)
                with ad.Graph() as graph:
                    logits, capture = forward(batch.ids, params, model_config, adapters)
                    l_next: ad.Tensor = ad.cross_entropy_from_logits(logits, batch.targets, batch.loss_mask)
                    total: ad.Tensor = l_next
                    if use_attention:
                        terms = attn_ratio_terms(batch.adjacency, capture.average, report)
                        l_attn: ad.Tensor = re_attention_loss(terms, config.alpha)
                        l_attn_sum += l_attn.item()
                        rows += terms.count
                        if terms.count:
                            total = ad.add(l_next, ad.scale(l_attn, gamma))
                    if len(group) > 1:
                        total = ad.scale(total, 1.0 / len(group))
                if not math.isfinite(total.item()):
                    msg = f"Non-finite loss in epoch {epoch}, update {update}, batch of records {batch.indices}"
                    raise TrainingError(msg)
                graph.backward(total)
                l_next_sum += l_next.item()

            learning_rate: float = lr_schedule(update, total_updates, config.learning_rate, config.warmup_fraction)
            optimizer.step(learning_rate)
            step = StepRecord(
                update=update,
                epoch=epoch,
                l_next=l_next_sum / len(group),
                l_attn=l_attn_sum / len(group),
                gamma=gamma,
                learning_rate=learning_rate,
                supervised_rows=rows,
            )
            epoch_steps.append(step)
            log.trace(f"update {update}: l_next={step.l_next:.4f} l_attn={step.l_attn:.4f} lr={learning_rate:.2e}")
            update += 1

        record.steps.extend(epoch_steps)
        summary = EpochRecord(
            epoch=epoch,
            gamma=gamma,
            l_next=float(np.mean([step.l_next for step in epoch_steps])),
            l_attn=float(np.mean([step.l_attn for step in epoch_steps])),
        )
        if validate is not None:
            summary.validation_accuracy = validate(params, adapters)
        record.epochs.append(summary)
        log.info(
            f"epoch {epoch}: gamma={gamma:.4f} l_next={summary.l_next:.4f} l_attn={summary.l_attn:.4f}"
            + (f" val_acc={summary.validation_accuracy:.3f}" if summary.validation_accuracy is not None else ""),
        )

    record.skip_report = report.as_dict()
    record.wall_time = time.perf_counter() - started
    return params, adapters, record, optimizer


@dataclass
class SweepRow:
    alpha: float
    iid_accuracy: float
    ood_accuracy: float
    record: RunRecord = field(repr=False)


def run_alpha_sweep(
    examples: Sequence[EncodedExample],
    grid: Sequence[float],
    model_config: ModelConfig,
    config: TrainConfig,
    score_splits: Callable[[Params, list[LoraAdapter]], tuple[float, float]],
    validate: Validator | None = None,
) -> list[SweepRow]:
    """Train one CAT model per alpha from the same initialization.

    Args:
        examples: Encoded training records.
        grid: Alpha values.
        model_config: Model shape.
        config: Shared settings; only alpha changes between runs.
        score_splits: Returns (IID accuracy, OOD accuracy) for trained weights.
        validate: Optional per-epoch validation.

    Raises:
        ConfigurationError: If the grid is empty.
    """
    if not grid:
        msg = "The alpha grid is empty"
        raise ConfigurationError(msg)

    rows: list[SweepRow] = []
    for alpha in grid:
        run_config: TrainConfig = dataclasses.replace(config, alpha=alpha, mode="cat")
        params: Params = init_params(model_config, run_config.seed)
        params, adapters, record, _ = train(params, model_config, examples, run_config, validate=validate)
        iid, ood = score_splits(params, adapters)
        logger.bind(stage="sweep").info(f"alpha={alpha:g}: IID {iid:.3f}, OOD {ood:.3f}")
        rows.append(SweepRow(alpha=alpha, iid_accuracy=iid, ood_accuracy=ood, record=record))
    return rows


def compare_modes(
    examples: Sequence[EncodedExample],
    model_config: ModelConfig,
    config: TrainConfig,
    score_splits: Callable[[Params, list[LoraAdapter]], tuple[float, float]],
) -> dict[str, tuple[float, float]]:
    """Train vanilla and CAT on the same data and seed.

    Returns:
        dict[str, tuple[float, float]]: Mode to (IID accuracy, OOD accuracy).
    """
    results: dict[str, tuple[float, float]] = {}
    for mode in ("vanilla", "cat"):
        run_config: TrainConfig = dataclasses.replace(config, mode=mode)
        params, adapters, _, _ = train(init_params(model_config, run_config.seed), model_config, examples, run_config)
        results[mode] = score_splits(params, adapters)
    return results
