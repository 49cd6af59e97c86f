"""
Vertical Slice Fusion

Each modality's volume is cut along z into local height slices (one
SEAttention3D per slice, reassembled in place) and one global slice spanning
the full height. The two branch features calibrate each other through
single-channel attention maps: the global feature is weighted by the local
map and the local feature by the global map. The calibrated pair is
concatenated, merged back to C channels and re-gated along height.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

from voxslice import ops
from voxslice.attention import DEFAULT_REDUCTION, SEParams, attention_forward
from voxslice.errors import ConfigError, ShapeError
from voxslice.params import ModuleParams, Parameter
from voxslice.tensor import VoxelTensor

logger = logging.getLogger(__name__)

SCENE_Z_MIN_M = -5.0
SCENE_Z_MAX_M = 3.0

# six bands, dense around the small-object heights
DEFAULT_INTERVALS_M = ((-5.0, -3.0), (-3.0, -2.0), (-2.0, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 3.0))

MODES = ("full", "global_only", "local_only", "concat_fusion", "none")

MERGE_KERNEL = 3
MAP_KERNEL = 1

_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class HeightPartition:
    """Metric height intervals and the z-index ranges they cover.

    voxel_ranges are half-open and tile [0, Z) in order.
    """

    z_min_m: float
    z_max_m: float
    local_intervals: Tuple[Tuple[float, float], ...]
    voxel_ranges: Tuple[Tuple[int, int], ...]
    Z: int

    @property
    def voxel_size_m(self) -> float:
        return (self.z_max_m - self.z_min_m) / self.Z

    @property
    def widths(self) -> List[int]:
        return [hi - lo for lo, hi in self.voxel_ranges]

    def __len__(self) -> int:
        return len(self.voxel_ranges)


def _to_index(value_m: float, z_min_m: float, voxel_m: float, interval) -> int:
    position = (value_m - z_min_m) / voxel_m
    index = round(position)
    if abs(position - index) > _ALIGN_TOL:
        raise ConfigError(
            f"interval [{interval[0]:g}, {interval[1]:g}] m does not align to the "
            f"{voxel_m:g} m voxel grid"
        )
    return int(index)


def partition_from_intervals(
    intervals: Sequence[Sequence[float]],
    Z: int,
    z_min_m: float = SCENE_Z_MIN_M,
    z_max_m: float = SCENE_Z_MAX_M,
) -> HeightPartition:
    """Validate meter intervals against the grid and derive voxel ranges.

    Raises:
        ConfigError: naming the first interval that overlaps, leaves a gap,
            falls outside [z_min, z_max] or is not voxel aligned.
    """
    if Z <= 0:
        raise ConfigError(f"Z must be positive, got {Z}")
    if z_max_m <= z_min_m:
        raise ConfigError(f"height range [{z_min_m:g}, {z_max_m:g}] m is empty")
    if not intervals:
        raise ConfigError("a height partition needs at least one interval")
    voxel_m = (z_max_m - z_min_m) / Z

    cursor = z_min_m
    cleaned = []
    ranges = []
    for interval in intervals:
        if len(interval) != 2:
            raise ConfigError(f"interval {list(interval)} must be a [lo, hi] pair")
        lo, hi = float(interval[0]), float(interval[1])
        if hi <= lo:
            raise ConfigError(f"interval [{lo:g}, {hi:g}] m is empty or reversed")
        if abs(lo - cursor) > _ALIGN_TOL:
            kind = "overlaps the previous interval" if lo < cursor else "leaves a gap before it"
            raise ConfigError(f"interval [{lo:g}, {hi:g}] m {kind} (expected start {cursor:g} m)")
        if hi > z_max_m + _ALIGN_TOL:
            raise ConfigError(f"interval [{lo:g}, {hi:g}] m exceeds the height range top {z_max_m:g} m")
        ranges.append((_to_index(lo, z_min_m, voxel_m, (lo, hi)), _to_index(hi, z_min_m, voxel_m, (lo, hi))))
        cleaned.append((lo, hi))
        cursor = hi
    if abs(cursor - z_max_m) > _ALIGN_TOL:
        raise ConfigError(f"intervals end at {cursor:g} m, short of the height range top {z_max_m:g} m")

    # completeness and disjointness of the derived index ranges
    assert ranges[0][0] == 0 and ranges[-1][1] == Z
    assert all(a[1] == b[0] for a, b in zip(ranges, ranges[1:]))
    assert all(hi > lo for lo, hi in ranges)
    return HeightPartition(z_min_m, z_max_m, tuple(cleaned), tuple(ranges), Z)


def default_partition(Z: int) -> HeightPartition:
    """The six-band strategy over [-5, 3] m."""
    return partition_from_intervals(DEFAULT_INTERVALS_M, Z)


def uniform_partition(Z: int, n: int, z_min_m: float = SCENE_Z_MIN_M, z_max_m: float = SCENE_Z_MAX_M) -> HeightPartition:
    """n equal-height bands; n=1 is the single global slice."""
    if n <= 0 or Z % n != 0:
        raise ConfigError(f"Z={Z} is not divisible into {n} equal slices")
    step = (z_max_m - z_min_m) / n
    intervals = [(z_min_m + i * step, z_min_m + (i + 1) * step) for i in range(n)]
    intervals[-1] = (intervals[-1][0], z_max_m)
    return partition_from_intervals(intervals, Z, z_min_m, z_max_m)


@dataclass
class VSFParams:
    """All learned tensors of one VSF instance."""

    local_se: List[SEParams]
    global_se: SEParams
    global_merge_weight: Parameter
    global_merge_bias: Parameter
    local_merge_weight: Parameter
    local_merge_bias: Parameter
    map_global_weight: Parameter
    map_global_bias: Parameter
    map_local_weight: Parameter
    map_local_bias: Parameter
    fuse_weight: Parameter
    fuse_bias: Parameter
    fuse_se: SEParams
    channels: int = field(default=0)

    @classmethod
    def build(
        cls,
        params: ModuleParams,
        prefix: str,
        channels: int,
        num_local: int,
        r: int = DEFAULT_REDUCTION,
    ) -> "VSFParams":
        c = channels
        k = MERGE_KERNEL
        m = MAP_KERNEL
        return cls(
            local_se=[SEParams.build(params, f"{prefix}.local_se.{i}", c, r) for i in range(num_local)],
            global_se=SEParams.build(params, f"{prefix}.global_se", c, r),
            global_merge_weight=params.add(f"{prefix}.global_merge.weight", (c, c, k, k, k)),
            global_merge_bias=params.add(f"{prefix}.global_merge.bias", (c,), fan_in=c * k ** 3),
            local_merge_weight=params.add(f"{prefix}.local_merge.weight", (c, c, k, k, k)),
            local_merge_bias=params.add(f"{prefix}.local_merge.bias", (c,), fan_in=c * k ** 3),
            map_global_weight=params.add(f"{prefix}.map_global.weight", (1, c, m, m, m)),
            map_global_bias=params.add(f"{prefix}.map_global.bias", (1,), fan_in=c * m ** 3),
            map_local_weight=params.add(f"{prefix}.map_local.weight", (1, c, m, m, m)),
            map_local_bias=params.add(f"{prefix}.map_local.bias", (1,), fan_in=c * m ** 3),
            fuse_weight=params.add(f"{prefix}.fuse.weight", (c, 2 * c, k, k, k)),
            fuse_bias=params.add(f"{prefix}.fuse.bias", (c,), fan_in=2 * c * k ** 3),
            fuse_se=SEParams.build(params, f"{prefix}.fuse_se", c, r),
            channels=c,
        )


def slice_z(x: VoxelTensor, z_range: Tuple[int, int]) -> VoxelTensor:
    return ops.slice_z(x, z_range[0], z_range[1])


def unslice_z(slices: Sequence[VoxelTensor], partition: HeightPartition) -> VoxelTensor:
    """Place each slice back at its own z range; the ranges tile [0, Z)."""
    if len(slices) != len(partition):
        raise ShapeError(f"expected {len(partition)} slices, got {len(slices)}")
    for s, (lo, hi) in zip(slices, partition.voxel_ranges):
        if s.dims[4] != hi - lo:
            raise ShapeError(f"slice for z range [{lo}, {hi}) has wrong height", s.dims)
    return ops.concat_z(slices)


def _check_partition(x: VoxelTensor, partition: HeightPartition) -> None:
    if x.dims[4] != partition.Z:
        raise ShapeError(f"volume Z does not match the partition's Z={partition.Z}", x.dims)


def gated_local_slices(
    x: VoxelTensor, p: VSFParams, partition: HeightPartition, variant: str = "seattention3d"
) -> List[VoxelTensor]:
    """Each local slice through its own attention instance, before the merge conv."""
    _check_partition(x, partition)
    if len(p.local_se) != len(partition):
        raise ShapeError(f"VSF params hold {len(p.local_se)} local gates, partition has {len(partition)} slices")
    return [
        attention_forward(slice_z(x, z_range), se, variant)
        for z_range, se in zip(partition.voxel_ranges, p.local_se)
    ]


def build_local_feature(
    x: VoxelTensor, p: VSFParams, partition: HeightPartition, variant: str = "seattention3d"
) -> VoxelTensor:
    """F_local: gated local slices reassembled along z, then merged by a 3D conv."""
    gated = unslice_z(gated_local_slices(x, p, partition, variant), partition)
    return ops.conv3d(gated, p.local_merge_weight, p.local_merge_bias)


def build_global_feature(x: VoxelTensor, p: VSFParams, variant: str = "seattention3d") -> VoxelTensor:
    """F_global: one attention pass over the full height, then a 3D conv."""
    gated = attention_forward(x, p.global_se, variant)
    return ops.conv3d(gated, p.global_merge_weight, p.global_merge_bias)


def attention_map(f: VoxelTensor, weight: Parameter, bias: Parameter) -> VoxelTensor:
    """C -> 1 conv squashed by a sigmoid into (0, 1)."""
    if weight.dims[0] != 1:
        raise ShapeError("attention map conv must output one channel", weight.dims)
    return ops.sigmoid(ops.conv3d(f, weight, bias))


def cross_calibrate(
    f_global: VoxelTensor, f_local: VoxelTensor, a_global: VoxelTensor, a_local: VoxelTensor
) -> Tuple[VoxelTensor, VoxelTensor]:
    """F'_global = A_local * F_global and F'_local = A_global * F_local."""
    if f_global.dims != f_local.dims:
        raise ShapeError("global and local features differ in shape", f_global.dims, f_local.dims)
    return ops.mul_map(f_global, a_local), ops.mul_map(f_local, a_global)


def fuse(a: VoxelTensor, b: VoxelTensor, p: VSFParams, variant: str = "seattention3d") -> VoxelTensor:
    """Concat along channels, conv 2C -> C, re-apply the height gate."""
    merged = ops.conv3d(ops.concat_channels(a, b), p.fuse_weight, p.fuse_bias)
    return attention_forward(merged, p.fuse_se, variant)


def vsf_forward(
    x: VoxelTensor,
    p: VSFParams,
    partition: HeightPartition,
    mode: str = "full",
    variant: str = "seattention3d",
) -> VoxelTensor:
    """Refine one modality's volume.

    Modes:
        full: cross-calibrated global/local fusion
        global_only / local_only: one branch, then the final height gate
        concat_fusion: fusion without cross calibration
        none: identity
    """
    if mode not in MODES:
        raise ConfigError(f"unknown VSF mode: {mode!r} (expected one of {list(MODES)})")
    if mode == "none":
        return x
    if x.dims[1] != p.channels:
        raise ShapeError(f"VSF configured for C={p.channels}", x.dims)

    if mode == "global_only":
        return attention_forward(build_global_feature(x, p, variant), p.fuse_se, variant)
    if mode == "local_only":
        return attention_forward(build_local_feature(x, p, partition, variant), p.fuse_se, variant)

    f_global = build_global_feature(x, p, variant)
    f_local = build_local_feature(x, p, partition, variant)
    if mode == "concat_fusion":
        return fuse(f_global, f_local, p, variant)

    a_global = attention_map(f_global, p.map_global_weight, p.map_global_bias)
    a_local = attention_map(f_local, p.map_local_weight, p.map_local_bias)
    g_cal, l_cal = cross_calibrate(f_global, f_local, a_global, a_local)
    return fuse(g_cal, l_cal, p, variant)
