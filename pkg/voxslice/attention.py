"""
Channel attention along the height axis

SEAttention3D pools each z layer over the X-Y plane only, so every height gets
its own channel gate. The SENet baseline pools over X, Y and Z and applies one
gate to all heights.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict

from voxslice import ops
from voxslice.errors import ConfigError, ShapeError
from voxslice.params import ModuleParams, Parameter
from voxslice.tensor import PlaneProfile, Tensor, VoxelTensor

logger = logging.getLogger(__name__)

DEFAULT_REDUCTION = 4


@dataclass
class SEParams:
    """Bottleneck excitation weights: C -> C/r -> C, kernel size 1, with biases."""

    reduce_weight: Parameter
    reduce_bias: Parameter
    expand_weight: Parameter
    expand_bias: Parameter
    r: int

    @property
    def channels(self) -> int:
        return self.expand_weight.dims[0]

    @classmethod
    def build(cls, params: ModuleParams, prefix: str, channels: int, r: int = DEFAULT_REDUCTION) -> "SEParams":
        """Register the four excitation tensors under `prefix` in params."""
        if r <= 0 or channels % r != 0:
            raise ConfigError(f"reduction ratio r={r} must be a positive divisor of C={channels}")
        hidden = channels // r
        return cls(
            reduce_weight=params.add(f"{prefix}.reduce.weight", (hidden, channels, 1), fan_in=channels),
            reduce_bias=params.add(f"{prefix}.reduce.bias", (hidden,), fan_in=channels),
            expand_weight=params.add(f"{prefix}.expand.weight", (channels, hidden, 1), fan_in=hidden),
            expand_bias=params.add(f"{prefix}.expand.bias", (channels,), fan_in=hidden),
            r=r,
        )

    def parameters(self):
        return [self.reduce_weight, self.reduce_bias, self.expand_weight, self.expand_bias]


def squeeze_xy(x: VoxelTensor) -> PlaneProfile:
    """S[b,c,z] = mean over (i, j) of x[b,c,i,j,z]."""
    return ops.mean_xy(x)


def excite(s: Tensor, p: SEParams) -> PlaneProfile:
    """S' = sigmoid(expand(relu(reduce(s)))), same dims as s, values in (0, 1)."""
    if s.dims[1] != p.channels:
        raise ShapeError("excitation input channels do not match SE params", s.dims, p.expand_weight.dims)
    hidden = ops.relu(ops.conv1d_channel(s, p.reduce_weight, p.reduce_bias))
    return ops.sigmoid(ops.conv1d_channel(hidden, p.expand_weight, p.expand_bias))


def seattention3d_gate(x: VoxelTensor, p: SEParams) -> PlaneProfile:
    return excite(squeeze_xy(x), p)


def senet_gate(x: VoxelTensor, p: SEParams) -> PlaneProfile:
    # pooled over X, Y and Z; the [B, C, 1] gate is broadcast to every height
    return excite(ops.mean_z(squeeze_xy(x)), p)


def seattention3d_forward(x: VoxelTensor, p: SEParams) -> VoxelTensor:
    """Y = X * S~ with a separate channel gate per height layer."""
    return ops.mul_broadcast(x, seattention3d_gate(x, p))


def senet_forward(x: VoxelTensor, p: SEParams) -> VoxelTensor:
    """Y = X * S~ with one channel gate shared by all heights."""
    return ops.mul_broadcast(x, senet_gate(x, p))


GATES: Dict[str, Callable[[VoxelTensor, SEParams], PlaneProfile]] = {
    "seattention3d": seattention3d_gate,
    "senet": senet_gate,
}

VARIANTS: Dict[str, Callable[[VoxelTensor, SEParams], VoxelTensor]] = {
    "seattention3d": seattention3d_forward,
    "senet": senet_forward,
}


def gate(x: VoxelTensor, p: SEParams, variant: str = "seattention3d") -> PlaneProfile:
    """The [B, C, Z] (or [B, C, 1] for senet) gate a variant applies to x."""
    if variant not in GATES:
        raise ConfigError(f"unknown attention variant: {variant!r} (expected one of {sorted(GATES)})")
    return GATES[variant](x, p)


def attention_forward(x: VoxelTensor, p: SEParams, variant: str = "seattention3d") -> VoxelTensor:
    try:
        forward = VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown attention variant: {variant!r} (expected one of {sorted(VARIANTS)})")
    return forward(x, p)
