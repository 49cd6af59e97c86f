"""
Dense tensors and the gradient tape

VoxelTensor is the rank-5 [B, C, X, Y, Z] feature carrier, PlaneProfile the
rank-3 [B, C, Z] pooled profile. Both wrap a float64 C-contiguous numpy array
plus an optional gradient of the same shape.

Operations in voxslice.ops record themselves on the active Tape while one is
entered and at least one input requires gradients.
"""

import logging
from contextvars import ContextVar
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from voxslice.errors import ShapeError, StateError

logger = logging.getLogger(__name__)

DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_ACTIVE_TAPE: ContextVar[Optional["Tape"]] = ContextVar("voxslice_tape", default=None)


class Tensor:
    """Float64 array with an optional gradient slot."""

    rank: Optional[int] = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.ascontiguousarray(data, dtype=DTYPE)
        if self.rank is not None and array.ndim != self.rank:
            raise ShapeError(
                f"{type(self).__name__} expects rank {self.rank}, got rank {array.ndim}",
                array.shape,
            )
        if any(d <= 0 for d in array.shape):
            raise ShapeError(f"{type(self).__name__} dims must be positive", array.shape)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"<{type(self).__name__}{label} dims={self.dims}, requires_grad={self.requires_grad}>"

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.dims

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item() needs a single-element tensor", self.data.shape)
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise ShapeError("gradient shape mismatch", grad.shape, self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def detach(self) -> "Tensor":
        return type(self)(self.data.copy())

    @classmethod
    def zeros(cls, dims: Sequence[int], **kwargs) -> "Tensor":
        return cls(np.zeros(tuple(dims), dtype=DTYPE), **kwargs)

    @classmethod
    def ones(cls, dims: Sequence[int], **kwargs) -> "Tensor":
        return cls(np.ones(tuple(dims), dtype=DTYPE), **kwargs)

    @classmethod
    def random(cls, dims: Sequence[int], seed: int, scale: float = 1.0, **kwargs) -> "Tensor":
        """Standard-normal entries times scale from a seeded generator."""
        rng = np.random.default_rng(seed)
        return cls(scale * rng.standard_normal(tuple(dims)), **kwargs)


class VoxelTensor(Tensor):
    """Rank-5 feature volume [B, C, X, Y, Z], row-major."""

    rank = 5

    @property
    def batch(self) -> int:
        return self.dims[0]

    @property
    def channels(self) -> int:
        return self.dims[1]

    @property
    def spatial(self) -> Tuple[int, int, int]:
        return self.dims[2:]


class PlaneProfile(Tensor):
    """Rank-3 per-height profile [B, C, Z]."""

    rank = 3


def wrap_like(data: np.ndarray, requires_grad: bool) -> Tensor:
    """Wrap an array in the tensor type matching its rank."""
    if data.ndim == 5:
        return VoxelTensor(data, requires_grad=requires_grad)
    if data.ndim == 3:
        return PlaneProfile(data, requires_grad=requires_grad)
    return Tensor(data, requires_grad=requires_grad)


class Tape:
    """Records the forward pass of the fixed op vocabulary for reverse mode.

    Usage:
        with Tape() as tape:
            loss = ops.sum_all(ops.sigmoid(x))
        tape.backward(loss)

    backward() may run once per recording; reset() re-arms the tape.
    """

    def __init__(self):
        self._records: List[Tuple[Tensor, Tuple[Tensor, ...], BackwardFn, str]] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, op_name: str, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise StateError("tape already ran backward; call reset() before recording again")
        self._records.append((output, tuple(inputs), backward_fn, op_name))

    @property
    def op_names(self) -> List[str]:
        return [name for _, _, _, name in self._records]

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) into the grad slot of every recorded input."""
        if self._consumed:
            raise StateError("backward called twice on the same tape without reset()")
        if loss.size != 1:
            raise ShapeError("backward needs a scalar loss", loss.dims)
        self._consumed = True
        loss.accumulate_grad(np.ones_like(loss.data))
        for output, inputs, backward_fn, op_name in reversed(self._records):
            if output.grad is None:
                continue
            grads = backward_fn(output.grad)
            for tensor, grad in zip(inputs, grads):
                if grad is not None and tensor.requires_grad:
                    tensor.accumulate_grad(grad)
        logger.debug("backward through %d recorded ops", len(self._records))

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def make_output(
    op_name: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[], BackwardFn],
) -> Tensor:
    """Wrap an op result and record it when gradients are wanted.

    backward_fn is a factory so closures are only built when recording.
    """
    tape = _ACTIVE_TAPE.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = wrap_like(data, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op_name, out, inputs, backward_fn())
    return out
