# Copyright 2026 The dlostate authors
"""Minimal dense tensors with reverse-mode automatic differentiation.

Only the operations the encoder and the two estimation heads need are
provided. Every operation builds a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients;
:func:`backward` walks that record in reverse topological order.

The module also holds the Adam optimizer, the checkpoint reader/writer and
the central finite-difference helpers used by ``dlostate gradcheck``.
"""

from __future__ import annotations

import json
import struct

from typing import (
    Any,
    BinaryIO,
    Callable,
    Final,
    Mapping,
    Sequence,
    Union,
)

import attr
import numpy as np

from scipy import special

from dlostate.errors import CheckpointError, ContractError


ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]

L2_EPS: Final[float] = 1e-8


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD.

    :param data: array-like values; integer input is promoted to float64.
    :param bool requires_grad: whether gradients should be accumulated
        into ``grad`` for this tensor when it is a leaf.
    :param str name: optional label (parameter name).
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "parents", "_fn")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple[Tensor, ...] = (),
        backward_fn: BackwardFn | None = None,
    ):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.parents = parents
        self._fn = backward_fn

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._fn is None

    def item(self) -> float:
        """Return the value of a single-element tensor."""
        if self.size != 1:
            raise ContractError(
                f"item() needs a single element, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants as non-tracked tensors; tensors pass through."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(
    data: np.ndarray, parents: tuple[Tensor, ...], fn: BackwardFn
) -> Tensor:
    """Create an op output, recording ``fn`` only when gradients flow."""
    tracked = any(p.requires_grad for p in parents)
    if not tracked:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError:
        raise ContractError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


#####
# Forward operations
#####
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product ``a @ b``.

    ``b`` must be two-dimensional; ``a`` may carry leading batch axes, in
    which case ``b`` is shared across them (a per-point linear layer).
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim != 2 or a.data.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ContractError(
            f"matmul: shapes {a.shape} and {b.shape} do not conform"
        )
    a_data, b_data = a.data, b.data
    out = a_data @ b_data

    def fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = grad @ b_data.T
        flat_a = a_data.reshape(-1, a_data.shape[-1])
        grad_b = flat_a.T @ grad.reshape(-1, grad.shape[-1])
        return grad_a, grad_b

    return _result(out, (a, b), fn)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    a_shape, b_shape = a.shape, b.shape

    def fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a_shape), _unbroadcast(grad, b_shape)

    return _result(a.data + b.data, (a, b), fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    a_shape, b_shape = a.shape, b.shape

    def fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(grad, a_shape), _unbroadcast(-grad, b_shape)

    return _result(a.data - b.data, (a, b), fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    a_data, b_data = a.data, b.data

    def fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(grad * b_data, a_data.shape),
            _unbroadcast(grad * a_data, b_data.shape),
        )

    return _result(a_data * b_data, (a, b), fn)


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * mask,)

    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), fn)


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * out * (1.0 - out),)

    return _result(out, (x,), fn)


def l2_normalize_rows(x: ArrayLike, eps: float = L2_EPS) -> Tensor:
    """Scale every 3-vector along the last axis to unit length.

    ``eps`` is added to the norm so that near-zero vectors stay finite.
    """
    x = as_tensor(x)
    if x.data.ndim < 1 or x.shape[-1] != 3:
        raise ContractError(
            f"l2_normalize_rows: expected rows of dimension 3, got {x.shape}"
        )
    x_data = x.data
    norm = np.linalg.norm(x_data, axis=-1, keepdims=True)
    denom = norm + eps
    out = x_data / denom

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        dot = np.sum(grad * x_data, axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        radial = np.where(norm > 0, dot / (safe * denom**2), 0.0)
        return (grad / denom - x_data * radial,)

    return _result(out, (x,), fn)


def max_pool_over_set(x: ArrayLike, axis: int = -2) -> Tensor:
    """Maximum over the point (set) axis.

    The argmax indices are recorded so that the whole gradient of each
    output element flows back to the single input element that won.
    """
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ContractError(
            f"max_pool_over_set: need at least 2 dimensions, got {x.shape}"
        )
    axis = axis % x.data.ndim
    index = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, index, axis=axis).squeeze(axis)
    in_shape, dtype = x.shape, x.data.dtype

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(in_shape, dtype=dtype)
        np.put_along_axis(full, index, np.expand_dims(grad, axis), axis)
        return (full,)

    result = _result(out, (x,), fn)
    return result


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    size = diff.size

    def fn(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = grad * 2.0 * diff / size
        return g, -g

    return _result(np.asarray(np.mean(diff * diff)), (a, b), fn)


def gather(x: ArrayLike, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; ``index`` may have any shape."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.data.ndim != 2:
        raise ContractError(f"gather: expected a 2-D tensor, got {x.shape}")
    in_shape, dtype = x.shape, x.data.dtype

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(in_shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), grad.reshape(-1, in_shape[1]))
        return (full,)

    return _result(x.data[index], (x,), fn)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    """Concatenate along ``axis``; all other dimensions must agree."""
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        shapes = ", ".join(str(p.shape) for p in parts)
        raise ContractError(
            f"concat: shapes {shapes} do not conform"
        ) from None
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def fn(grad: np.ndarray) -> list[np.ndarray]:
        return np.split(grad, splits, axis=axis)

    return _result(out, parts, fn)


def reshape(x: ArrayLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ContractError(
            f"reshape: cannot view {in_shape} as {tuple(shape)}"
        ) from None

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(in_shape),)

    return _result(out, (x,), fn)


def total(x: ArrayLike) -> Tensor:
    """Sum of all elements."""
    x = as_tensor(x)
    in_shape, dtype = x.shape, x.data.dtype

    def fn(grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.full(in_shape, grad, dtype=dtype),)

    return _result(np.asarray(np.sum(x.data)), (x,), fn)


def mean(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return mul(total(x), 1.0 / x.size)


#####
# Reverse pass
#####
def _topological_order(root: Tensor) -> list[Tensor]:
    """Post-order of the tracked graph below ``root`` (no recursion)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every tracked leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays, so several
    backward passes can be summed (e.g. over a mini-batch) before an
    optimizer step.

    :raise ContractError: if ``loss`` is not a scalar or is not tracked.
    """
    if loss.size != 1:
        raise ContractError(
            f"backward: loss must be a scalar, got shape {loss.shape}"
        )
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any parameter")

    pending: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=loss.data.dtype)
    }
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad if node.grad is None else node.grad + grad
            continue
        assert node._fn is not None
        for parent, parent_grad in zip(node.parents, node._fn(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + parent_grad
            else:
                pending[key] = parent_grad


#####
# Optimizer
#####
@attr.s
class AdamState:
    """Adam hyperparameters, step-decay schedule and moment accumulators.

    :param float lr: initial learning rate.
    :param float weight_decay: decoupled weight-decay coefficient.
    :param int decay_every: epochs between learning-rate decays.
    :param float decay_ratio: multiplicative decay applied each period.
    :param int step: number of updates applied so far.
    :param dict m: first-moment accumulators, keyed by parameter name.
    :param dict v: second-moment accumulators, keyed by parameter name.
    """

    lr: float = attr.ib(default=0.01)
    beta1: float = attr.ib(default=0.9)
    beta2: float = attr.ib(default=0.999)
    eps: float = attr.ib(default=1e-8)
    weight_decay: float = attr.ib(default=5e-4)
    decay_every: int = attr.ib(default=6)
    decay_ratio: float = attr.ib(default=0.5)
    step: int = attr.ib(default=0)
    m: dict[str, np.ndarray] = attr.ib(factory=dict, repr=False)
    v: dict[str, np.ndarray] = attr.ib(factory=dict, repr=False)

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect during ``epoch`` (0-based)."""
        return self.lr * self.decay_ratio ** (epoch // self.decay_every)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    epoch: int = 0,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Apply one bias-corrected Adam update.

    Weight decay is decoupled from the adaptive step: with a zero gradient
    a parameter is only shrunk by ``lr * weight_decay``. Inputs are not
    modified; new arrays and a new state are returned.

    :raise ContractError: on any shape mismatch between a parameter, its
        gradient and its moment accumulators.
    """
    lr = state.lr_at(epoch)
    step = state.step + 1
    correction1 = 1.0 - state.beta1**step
    correction2 = 1.0 - state.beta2**step
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        for label, other in (("grad", grad), ("m", m), ("v", v)):
            if other.shape != value.shape:
                raise ContractError(
                    f"adam_step: {label} of {name!r} has shape "
                    f"{other.shape}, parameter has {value.shape}"
                )
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        new_params[name] = (
            value - lr * (update + state.weight_decay * value)
        ).astype(value.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, attr.evolve(state, step=step, m=new_m, v=new_v)


#####
# Checkpoints
#####
CHECKPOINT_MAGIC: Final[bytes] = b"DLOSTCKP"
CHECKPOINT_VERSION: Final[int] = 1
_DTYPE_CODES: Final[dict[int, str]] = {4: "<f4", 8: "<f8"}


def _write_entry(fh: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    if array.dtype.itemsize not in _DTYPE_CODES:
        raise CheckpointError(f"unsupported dtype {array.dtype} for {name!r}")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", array.dtype.itemsize, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    le_dtype = _DTYPE_CODES[array.dtype.itemsize]
    fh.write(np.ascontiguousarray(array, dtype=le_dtype).tobytes())


def save_checkpoint(
    path: str,
    arrays: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> None:
    """Write named arrays and a JSON metadata blob to ``path``.

    Layout (all integers little-endian)::

        8 bytes   magic b"DLOSTCKP"
        uint32    format version
        uint32    metadata length L, then L bytes of UTF-8 JSON
        uint32    entry count
        entries   uint16 name length, UTF-8 name, uint8 item size (4|8),
                  uint8 ndim, ndim x uint32 dims, raw values
    """
    blob = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, array in arrays.items():
            _write_entry(fh, name, np.asarray(array))


def _read_exact(fh: BinaryIO, count: int, path: str) -> bytes:
    chunk = fh.read(count)
    if len(chunk) != count:
        raise CheckpointError(f"{path}: truncated checkpoint")
    return chunk


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    :return: ordered mapping of arrays (native byte order) and metadata.
    :raise CheckpointError: if the file is missing, truncated or has the
        wrong magic/version.
    """
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        if _read_exact(fh, len(CHECKPOINT_MAGIC), path) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a dlostate checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, path))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported checkpoint version {version}"
            )
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
        metadata = json.loads(_read_exact(fh, blob_len, path).decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, path))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            itemsize, ndim = struct.unpack("<BB", _read_exact(fh, 2, path))
            if itemsize not in _DTYPE_CODES:
                raise CheckpointError(f"{path}: bad item size for {name!r}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            count_values = int(np.prod(shape, dtype=np.int64))
            raw = _read_exact(fh, itemsize * count_values, path)
            array = np.frombuffer(raw, dtype=_DTYPE_CODES[itemsize])
            arrays[name] = array.astype(array.dtype.newbyteorder("=")).reshape(
                shape
            )
        return arrays, metadata


#####
# Finite differences
#####
def numeric_gradient(
    fn: Callable[[], float], array: np.ndarray, step: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient of ``fn`` w.r.t. ``array``.

    ``array`` is perturbed in place one element at a time and restored.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    for index in np.ndindex(array.shape):
        original = array[index]
        array[index] = original + step
        plus = fn()
        array[index] = original - step
        minus = fn()
        array[index] = original
        grad[index] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / (|a| + |n|)`` in the Frobenius norm; 0 when both vanish."""
    denom = float(np.linalg.norm(analytic) + np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric)) / denom


#####
# Layers
#####
Params = dict[str, Tensor]


def init_linear_stack(
    rng: np.random.Generator,
    prefix: str,
    widths: Sequence[int],
    dtype: str = "float64",
) -> Params:
    """He-initialised weights for a chain of fully-connected layers.

    ``widths`` lists the input width followed by every layer's output
    width. Parameters are named ``<prefix>.<k>.weight`` and
    ``<prefix>.<k>.bias``.
    """
    params: Params = {}
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        scale = np.sqrt(2.0 / fan_in)
        weight = rng.normal(scale=scale, size=(fan_in, fan_out))
        params[f"{prefix}.{k}.weight"] = Tensor(
            weight.astype(dtype),
            requires_grad=True,
            name=f"{prefix}.{k}.weight",
        )
        params[f"{prefix}.{k}.bias"] = Tensor(
            np.zeros(fan_out, dtype=dtype),
            requires_grad=True,
            name=f"{prefix}.{k}.bias",
        )
    return params


def linear_stack(
    x: ArrayLike,
    params: Mapping[str, Tensor],
    prefix: str,
    final_relu: bool = True,
) -> Tensor:
    """Apply ``<prefix>.0``, ``<prefix>.1``, ... with ReLU after each.

    Layers act on the last axis, so a ``(..., C)`` input goes through a
    shared per-point MLP. With ``final_relu=False`` the last layer stays
    linear.
    """
    out = as_tensor(x)
    k = 0
    while f"{prefix}.{k}.weight" in params:
        out = add(
            matmul(out, params[f"{prefix}.{k}.weight"]),
            params[f"{prefix}.{k}.bias"],
        )
        if final_relu or f"{prefix}.{k + 1}.weight" in params:
            out = relu(out)
        k += 1
    if k == 0:
        raise ContractError(f"no layers named {prefix!r}")
    return out


def params_dtype(params: Mapping[str, Tensor]) -> np.dtype:
    """Floating dtype shared by a parameter set (float64 when empty)."""
    for tensor in params.values():
        return tensor.data.dtype
    return np.dtype(np.float64)
