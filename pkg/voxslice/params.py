"""
Named parameter sets

ModuleParams is the serializable unit of learned state: an ordered map from a
dotted name to a Parameter. Initial values depend only on (seed, name), so two
models built with the same seed hold bit-identical copies of every parameter
they have in common.
"""

import zlib
from collections import OrderedDict
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np

from voxslice.errors import ConfigError, ShapeError
from voxslice.tensor import DTYPE, Tensor


class Parameter(Tensor):
    """A leaf tensor that always takes gradients."""

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by the model seed and the parameter name."""
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class ModuleParams:
    """Ordered, uniquely named parameters with gradient slots."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._entries: "OrderedDict[str, Parameter]" = OrderedDict()

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def add(self, name: str, shape: Sequence[int], fan_in: Optional[int] = None) -> Parameter:
        """Create a parameter with centered uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].

        Args:
            name: Unique dotted name
            shape: Parameter shape
            fan_in: Inputs feeding one output; defaults to prod(shape[1:])
        """
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name: {name}")
        shape = tuple(int(d) for d in shape)
        if fan_in is None:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
        bound = 1.0 / np.sqrt(fan_in)
        values = param_rng(self.seed, name).uniform(-bound, bound, size=shape)
        param = Parameter(values, name)
        self._entries[name] = param
        return param

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.zero_grad()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.dims for name, p in self._entries.items()}

    def num_values(self) -> int:
        return sum(p.size for p in self._entries.values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self._entries.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [n for n in self._entries if n not in state]
        if missing:
            raise ShapeError(f"state is missing parameters: {', '.join(missing)}")
        for name, p in self._entries.items():
            values = np.asarray(state[name], dtype=DTYPE)
            if values.shape != p.dims:
                raise ShapeError(f"parameter {name} shape mismatch", values.shape, p.dims)
            p.data[...] = values

    def fill(self, value: float) -> None:
        """Set every parameter to a constant (used to build hand-checkable instances)."""
        for p in self._entries.values():
            p.data[...] = value
