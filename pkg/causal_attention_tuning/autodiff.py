"""Reverse-mode automatic differentiation over numpy buffers.

Operations record themselves on the active Graph (see Graph.__enter__) when at
least one input requires a gradient. Outside a graph nothing is recorded, which
is how inference and finite-difference probes run.

Broadcasting is limited to scalar-times-tensor and row-vector bias addition;
every other pair of shapes has to match exactly.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from loguru import logger

if TYPE_CHECKING:
    from collections.abc import Callable, Sequence

    Backward = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

DIVIDE_FLOOR = 1e-8
_GELU_C: float = math.sqrt(2.0 / math.pi)

_active_graph: contextvars.ContextVar[Graph | None] = contextvars.ContextVar("active_graph", default=None)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense array with optional gradient participation."""

    __slots__ = ("data", "grad", "name", "requires_grad")

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        *,
        requires_grad: bool = False,
        dtype: np.dtype | type | None = None,
        name: str = "",
    ) -> None:
        """Wrap data. Non-float input becomes float64 unless dtype says otherwise."""
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad: bool = requires_grad
        self.grad: np.ndarray | None = None
        self.name: str = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label: str = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


@dataclass(frozen=True, slots=True)
class Node:
    """One executed operation: its inputs, its output and its backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Graph:
    """Execution-ordered record of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    backward() once from a scalar. The record is freed after backward.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token: contextvars.Token | None = None

    def __enter__(self) -> Graph:
        self._token = _active_graph.set(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        if self._token is not None:
            _active_graph.reset(self._token)
            self._token = None

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def backward(self, root: Tensor) -> None:
        """Propagate gradients from a scalar root in exact reverse execution order.

        Args:
            root: Scalar tensor produced inside this graph.

        Raises:
            ShapeError: If root is not a scalar.
        """
        if root.size != 1:
            msg: str = f"backward needs a scalar root, got shape {root.shape}"
            raise ShapeError(msg)

        _accumulate(root, np.ones_like(root.data))
        for node in reversed(self.nodes):
            upstream: np.ndarray | None = node.output.grad
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream), strict=True):
                if grad is not None and tensor.requires_grad:
                    _accumulate(tensor, grad)

        logger.bind(stage="autodiff").trace(f"Backward over {len(self.nodes)} nodes")
        self.nodes.clear()


def current_graph() -> Graph | None:
    return _active_graph.get()


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if grad.shape != tensor.shape:
        msg: str = f"gradient shape {grad.shape} does not match tensor shape {tensor.shape}"
        raise ShapeError(msg)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.dtype, copy=True)
    else:
        tensor.grad = tensor.grad + grad


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    graph: Graph | None = _active_graph.get()
    tracked: bool = graph is not None and any(tensor.requires_grad for tensor in inputs)
    out = Tensor(data, requires_grad=tracked)
    if tracked and graph is not None:
        graph.record(Node(op=op, inputs=inputs, output=out, backward=backward))
    return out


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        msg: str = f"{op}: shapes {a.shape} and {b.shape} must match"
        raise ShapeError(msg)


def _as_tensor(value: Tensor | np.ndarray | float, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Accepted shapes: (m, k)·(k, n); (batch, m, k)·(k, n), applying b to every
    row of a; and (batch, m, k)·(batch, k, n) with equal batch sizes.

    Raises:
        ShapeError: If the shapes do not fit one of the accepted forms.
    """
    shapes_ok: bool = (
        (a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0])  # noqa: PLR2004
        or (a.data.ndim == 3 and b.data.ndim == 2 and a.shape[2] == b.shape[0])  # noqa: PLR2004
        or (a.data.ndim == 3 and b.data.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])  # noqa: PLR2004
    )
    if not shapes_ok:
        msg: str = f"matmul: cannot multiply {a.shape} by {b.shape}"
        raise ShapeError(msg)

    a_data: np.ndarray = a.data
    b_data: np.ndarray = b.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a: np.ndarray = g @ np.swapaxes(b_data, -1, -2)
        if b_data.ndim == 2 and a_data.ndim == 3:  # noqa: PLR2004
            grad_b = a_data.reshape(-1, a_data.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(a_data, -1, -2) @ g
        return grad_a, grad_b

    return _result("matmul", a_data @ b_data, (a, b), backward)


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _result("transpose_last", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular boolean mask permitting positions j <= i."""
    return np.tril(np.ones((n, n), dtype=bool))


def softmax_rows_masked(x: Tensor) -> Tensor:
    """Row softmax over the causal lower triangle of the trailing n×n block.

    Masked positions get the largest-negative finite value before the
    max-subtracted exponent, so they come out as exact zeros.

    Raises:
        ShapeError: If the trailing block is not square.
    """
    if x.data.ndim < 2 or x.shape[-1] != x.shape[-2]:  # noqa: PLR2004
        msg: str = f"softmax_rows_masked: trailing block must be square, got {x.shape}"
        raise ShapeError(msg)

    mask: np.ndarray = causal_mask(x.shape[-1])
    surrogate: np.ndarray = np.where(mask, x.data, np.finfo(x.dtype).min)
    row_max: np.ndarray = surrogate.max(axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        exponent: np.ndarray = np.exp(surrogate - row_max)
    y: np.ndarray = exponent / exponent.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result("softmax_rows_masked", y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum. b may also be a row vector matching a's last axis.

    Raises:
        ShapeError: If b is neither a's shape nor a matching row vector.
    """
    if b.data.ndim == 1 and a.data.ndim >= 1 and b.shape[0] == a.shape[-1] and a.shape != b.shape:

        def backward_bias(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

        return _result("add", a.data + b.data, (a, b), backward_bias)

    _require_same_shape("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return _result("add_scalar", x.data + value, (x,), lambda g: (g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal shapes."""
    _require_same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _result("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def scale(x: Tensor, factor: float) -> Tensor:
    return _result("scale", x.data * factor, (x,), lambda g: (g * factor,))


def divide(a: Tensor, b: Tensor, *, floor: float = DIVIDE_FLOOR) -> Tensor:
    """Elementwise a / b with denominators below floor in magnitude replaced by floor.

    Guarded positions pass no gradient to b. Callers that need to skip such
    positions (see causal_supervision) exclude them before dividing.
    """
    _require_same_shape("divide", a, b)
    guarded: np.ndarray = np.abs(b.data) < floor
    if guarded.any():
        logger.bind(stage="autodiff").debug(f"divide guarded {int(guarded.sum())} denominators")
    denominator: np.ndarray = np.where(guarded, floor, b.data)
    a_data: np.ndarray = a.data
    y: np.ndarray = a_data / denominator

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_b = np.where(guarded, 0.0, -g * a_data / (denominator * denominator))
        return g / denominator, grad_b.astype(a_data.dtype, copy=False)

    return _result("divide", y, (a, b), backward)


def maximum_with_zero(x: Tensor) -> Tensor:
    """Hinge max(0, x); the dead zone (x <= 0) passes zero gradient."""
    active: np.ndarray = x.data > 0
    return _result("maximum_with_zero", np.where(active, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * active,))


def exp(x: Tensor) -> Tensor:
    y: np.ndarray = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def mean_over_selection(x: Tensor, selection: np.ndarray) -> Tensor:
    """Mean of x over selected entries of the last axis.

    Args:
        x: Values, shape (..., n).
        selection: 0/1 array of x's shape.

    Returns:
        Tensor: Shape (...,). Rows with an empty selection give 0; callers
        detect them with selection.sum(-1) == 0.

    Raises:
        ShapeError: If selection does not match x.
    """
    if selection.shape != x.shape:
        msg: str = f"mean_over_selection: selection {selection.shape} does not match {x.shape}"
        raise ShapeError(msg)

    weights: np.ndarray = selection.astype(x.dtype)
    counts: np.ndarray = weights.sum(axis=-1)
    divisor: np.ndarray = np.where(counts > 0, counts, 1.0).astype(x.dtype)
    y: np.ndarray = (x.data * weights).sum(axis=-1) / divisor

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return ((g / divisor)[..., None] * weights,)

    return _result("mean_over_selection", y, (x,), backward)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis.

    Raises:
        ShapeError: If leading shapes differ or nothing is given.
    """
    if not tensors:
        msg = "concat_last_dim: nothing to concatenate"
        raise ShapeError(msg)
    leading: set[tuple[int, ...]] = {tensor.shape[:-1] for tensor in tensors}
    if len(leading) != 1:
        msg = f"concat_last_dim: leading shapes differ: {sorted(leading)}"
        raise ShapeError(msg)

    splits: np.ndarray = np.cumsum([tensor.shape[-1] for tensor in tensors])[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, splits, axis=-1))

    return _result("concat_last_dim", np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply gain and bias row vectors."""
    width: int = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        msg: str = f"layer_norm: gain {gain.shape} and bias {bias.shape} must be ({width},)"
        raise ShapeError(msg)

    centered: np.ndarray = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std: np.ndarray = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed: np.ndarray = centered * inv_std
    gain_data: np.ndarray = gain.data

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat_g = g.reshape(-1, width)
        grad_gain = (flat_g * normed.reshape(-1, width)).sum(axis=0)
        grad_bias = flat_g.sum(axis=0)
        d_normed = g * gain_data
        grad_x = (
            inv_std
            / width
            * (width * d_normed - d_normed.sum(axis=-1, keepdims=True) - normed * (d_normed * normed).sum(axis=-1, keepdims=True))
        )
        return grad_x, grad_gain, grad_bias

    return _result("layer_norm", normed * gain_data + bias.data, (x, gain, bias), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    data: np.ndarray = x.data
    inner: np.ndarray = _GELU_C * (data + 0.044715 * data**3)
    t: np.ndarray = np.tanh(inner)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        slope = 0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * data * data)
        return (g * slope,)

    return _result("gelu", 0.5 * data * (1.0 + t), (x,), backward)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of table picked by integer ids; output shape ids.shape + (width,).

    Raises:
        ShapeError: If an id is outside the table.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        msg: str = f"embedding_lookup: ids must lie in [0, {table.shape[0]})"
        raise ShapeError(msg)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _result("embedding_lookup", table.data[ids], (table,), backward)


def cross_entropy_from_logits(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of targets over unmasked positions.

    Args:
        logits: Shape (..., vocab).
        targets: Integer ids, shape (...).
        mask: 0/1 weights, shape (...). None means every position counts.

    Returns:
        Tensor: Scalar. Zero when no position is unmasked.

    Raises:
        ShapeError: If targets or mask do not match the logits' leading shape.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        msg: str = f"cross_entropy_from_logits: targets {targets.shape} vs logits {logits.shape}"
        raise ShapeError(msg)
    weights: np.ndarray = np.ones(targets.shape, dtype=logits.dtype) if mask is None else mask.astype(logits.dtype)
    if weights.shape != targets.shape:
        msg = f"cross_entropy_from_logits: mask {weights.shape} vs targets {targets.shape}"
        raise ShapeError(msg)

    count: float = float(weights.sum())
    shifted: np.ndarray = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_norm: np.ndarray = np.log(np.exp(shifted).sum(axis=-1))
    picked: np.ndarray = np.take_along_axis(shifted, targets[..., None], axis=-1)[..., 0]
    per_position: np.ndarray = log_norm - picked
    loss = (per_position * weights).sum() / count if count else 0.0

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if not count:
            return (np.zeros_like(logits.data),)
        probs = np.exp(shifted - log_norm[..., None])
        np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (g * probs * (weights / count)[..., None],)

    return _result("cross_entropy_from_logits", np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _result("sum_all", np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum of x times a constant weight array of x's shape."""
    if weights.shape != x.shape:
        msg: str = f"weighted_sum: weights {weights.shape} do not match {x.shape}"
        raise ShapeError(msg)
    w: np.ndarray = weights.astype(x.dtype)
    return _result("weighted_sum", np.asarray((x.data * w).sum(), dtype=x.dtype), (x,), lambda g: (g * w,))


def check_gradient(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Compare analytic gradients of a scalar function with central differences.

    Args:
        fn: Maps the inputs to a scalar Tensor.
        inputs: Tensors; those with requires_grad are probed.
        eps: Finite-difference step.
        max_entries: Probe at most this many entries per input, picked with seed.
        seed: Seed for entry selection.
        floor: Magnitude below which the error is measured absolutely against floor.

    Returns:
        float: Max over probed entries of |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.zero_grad()
    with Graph() as graph:
        out: Tensor = fn(*inputs)
    graph.backward(out)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic: np.ndarray = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        flat: np.ndarray = tensor.data.reshape(-1)
        positions: np.ndarray = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            positions = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for position in positions:
            original = flat[position]
            flat[position] = original + eps
            upper: float = fn(*inputs).item()
            flat[position] = original - eps
            lower: float = fn(*inputs).item()
            flat[position] = original
            numeric: float = (upper - lower) / (2 * eps)
            exact = float(analytic.reshape(-1)[position])
            worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), floor))
    return worst
