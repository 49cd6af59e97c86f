"""
Test Vertical Slice Fusion

Height partitions, the local and global branches, cross calibration and every
forward mode against an independent re-composition.
"""

from dataclasses import replace

import numpy as np
import pytest

from fixtures.oracles import vsf_reference
from voxslice import ops, vsf
from voxslice.errors import ConfigError, ShapeError
from voxslice.params import ModuleParams
from voxslice.tensor import Tape, VoxelTensor
from voxslice.vsf import VSFParams


def _vsf_params(partition, channels=4, r=2, seed=0):
    params = ModuleParams(seed=seed)
    return params, VSFParams.build(params, "vsf", channels, len(partition), r)


def _identity_center(weight):
    """Set a [C, C, k, k, k] kernel to the identity at its center tap."""
    weight.data[...] = 0.0
    c = weight.dims[1]
    k = weight.dims[2] // 2
    for i in range(min(weight.dims[0], c)):
        weight.data[i, i, k, k, k] = 1.0


class TestHeightPartition:
    """Test partition construction and validation."""

    def test_default_z16(self, partition_z16):
        """Test the six default bands on 16 voxels."""
        assert partition_z16.voxel_ranges == ((0, 4), (4, 6), (6, 8), (8, 10), (10, 12), (12, 16))
        assert partition_z16.widths == [4, 2, 2, 2, 2, 4]
        assert sum(partition_z16.widths) == 16

    def test_default_z8(self, partition_z8):
        """Test the six default bands on 8 voxels."""
        assert partition_z8.voxel_ranges == ((0, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 8))

    def test_default_intervals(self):
        """Test the metric bands of the default strategy."""
        assert vsf.DEFAULT_INTERVALS_M == (
            (-5.0, -3.0), (-3.0, -2.0), (-2.0, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 3.0)
        )

    def test_uniform_eight(self):
        """Test eight 1 m bands of width 2 voxels."""
        part = vsf.uniform_partition(16, 8)
        assert part.local_intervals == tuple((float(lo), float(lo + 1)) for lo in range(-5, 3))
        assert part.widths == [2] * 8

    def test_uniform_four(self):
        """Test four 2 m bands."""
        part = vsf.uniform_partition(16, 4)
        assert part.local_intervals == ((-5.0, -3.0), (-3.0, -1.0), (-1.0, 1.0), (1.0, 3.0))
        assert part.voxel_ranges == ((0, 4), (4, 8), (8, 12), (12, 16))

    def test_single_global_slice(self):
        """Test n=1 covers the full height."""
        assert vsf.uniform_partition(16, 1).voxel_ranges == ((0, 16),)

    def test_uniform_indivisible(self):
        """Test Z must divide into n slices."""
        with pytest.raises(ConfigError, match="Z=16"):
            vsf.uniform_partition(16, 3)

    def test_misaligned_names_interval(self):
        """Test Z=5 (1.6 m voxels) rejects the first default band by name."""
        with pytest.raises(ConfigError, match=r"\[-5, -3\]"):
            vsf.default_partition(5)

    def test_gap_names_interval(self):
        """Test a gap names the interval after it."""
        with pytest.raises(ConfigError, match=r"\[-2, 3\] m leaves a gap"):
            vsf.partition_from_intervals([(-5, -3), (-2, 3)], 16)

    def test_overlap_names_interval(self):
        """Test an overlap names the overlapping interval."""
        with pytest.raises(ConfigError, match=r"\[-4, 3\] m overlaps"):
            vsf.partition_from_intervals([(-5, -3), (-4, 3)], 16)

    def test_incomplete(self):
        """Test intervals that stop short of the top are rejected."""
        with pytest.raises(ConfigError, match="short"):
            vsf.partition_from_intervals([(-5, -3), (-3, 1)], 16)

    def test_exceeds_range(self):
        """Test an interval past the top is rejected."""
        with pytest.raises(ConfigError, match="exceeds"):
            vsf.partition_from_intervals([(-5, 4)], 16)

    def test_reversed(self):
        """Test empty or reversed intervals are rejected."""
        with pytest.raises(ConfigError, match="reversed"):
            vsf.partition_from_intervals([(-3, -5)], 16)


class TestSlicing:
    """Test slice_z and unslice_z."""

    def test_round_trip(self, partition_z16):
        """Test slicing and reassembly is the identity, bitwise."""
        x = VoxelTensor.random((1, 2, 2, 2, 16), seed=1)
        slices = [vsf.slice_z(x, r) for r in partition_z16.voxel_ranges]
        assert slices[0].dims[4] == 4
        assert vsf.unslice_z(slices, partition_z16).data.tobytes() == x.data.tobytes()

    def test_gradient_indicator(self):
        """Test d sum(slice [4, 6)) / dx is 1 on z in {4, 5} and 0 elsewhere."""
        x = VoxelTensor.random((1, 1, 2, 2, 16), seed=2, requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(vsf.slice_z(x, (4, 6)))
        tape.backward(loss)
        expected = np.zeros(16)
        expected[4:6] = 1.0
        np.testing.assert_array_equal(x.grad, np.broadcast_to(expected, x.dims))

    def test_wrong_slice_count(self, partition_z16):
        """Test reassembly needs one slice per range."""
        x = VoxelTensor.zeros((1, 1, 1, 1, 4))
        with pytest.raises(ShapeError):
            vsf.unslice_z([x], partition_z16)


class TestBranches:
    """Test the local and global features."""

    def test_local_zero_se_identity_merge(self, partition_z16):
        """Test zero gates and an identity merge give F_local = 0.5 x."""
        params, p = _vsf_params(partition_z16)
        params.fill(0.0)
        _identity_center(p.local_merge_weight)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=3)
        out = vsf.build_local_feature(x, p, partition_z16)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=0, atol=1e-15)

    def test_global_zero_se_identity_merge(self, partition_z16):
        """Test zero gates and an identity merge give F_global = 0.5 x."""
        params, p = _vsf_params(partition_z16)
        params.fill(0.0)
        _identity_center(p.global_merge_weight)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=4)
        out = vsf.build_global_feature(x, p)
        np.testing.assert_allclose(out.data, 0.5 * x.data, rtol=0, atol=1e-15)

    def test_global_is_single_interval_local(self):
        """Test the global branch equals the local branch over one full-height slice with shared params."""
        whole = vsf.uniform_partition(16, 1)
        _, p = _vsf_params(whole, seed=5)
        shared = replace(
            p,
            local_se=[p.global_se],
            local_merge_weight=p.global_merge_weight,
            local_merge_bias=p.global_merge_bias,
        )
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=5)
        np.testing.assert_array_equal(
            vsf.build_global_feature(x, shared).data, vsf.build_local_feature(x, shared, whole).data
        )

    def test_slice_isolation(self, partition_z16):
        """Test changing x only in z [0, 4) leaves the other gated slices unchanged."""
        _, p = _vsf_params(partition_z16, seed=6)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=6)
        changed = x.data.copy()
        changed[..., 0:4] += 5.0
        before = vsf.gated_local_slices(x, p, partition_z16)
        after = vsf.gated_local_slices(VoxelTensor(changed), p, partition_z16)
        assert not np.array_equal(before[0].data, after[0].data)
        for a, b in zip(before[1:], after[1:]):
            np.testing.assert_array_equal(a.data, b.data)

    def test_slice_permutation(self):
        """Test permuting equal-width z blocks together with their gates permutes the gated slices."""
        part = vsf.uniform_partition(16, 4)
        _, p = _vsf_params(part, seed=7)
        x = VoxelTensor.random((1, 4, 2, 2, 16), seed=7)
        perm = [2, 0, 3, 1]
        blocks = [x.data[..., lo:hi] for lo, hi in part.voxel_ranges]
        x_perm = VoxelTensor(np.concatenate([blocks[i] for i in perm], axis=4))
        p_perm = replace(p, local_se=[p.local_se[i] for i in perm])
        gated = vsf.gated_local_slices(x, p, part)
        gated_perm = vsf.gated_local_slices(x_perm, p_perm, part)
        for k, i in enumerate(perm):
            np.testing.assert_array_equal(gated_perm[k].data, gated[i].data)

    def test_partition_mismatch(self, partition_z16):
        """Test a volume whose Z disagrees with the partition is rejected."""
        _, p = _vsf_params(partition_z16)
        with pytest.raises(ShapeError):
            vsf.build_local_feature(VoxelTensor.zeros((1, 4, 2, 2, 8)), p, partition_z16)

    def test_gate_count_mismatch(self, partition_z16):
        """Test params built for another slice count are rejected."""
        _, p = _vsf_params(vsf.uniform_partition(16, 4))
        with pytest.raises(ShapeError, match="4 local gates"):
            vsf.gated_local_slices(VoxelTensor.zeros((1, 4, 2, 2, 16)), p, partition_z16)


class TestCalibration:
    """Test attention maps and the cross-calibration swap."""

    def test_zero_map(self):
        """Test a zero conv gives a map of 0.5."""
        params, p = _vsf_params(vsf.default_partition(16))
        params.fill(0.0)
        a = vsf.attention_map(VoxelTensor.random((1, 4, 2, 2, 3), seed=1), p.map_global_weight, p.map_global_bias)
        assert a.dims == (1, 1, 2, 2, 3)
        np.testing.assert_array_equal(a.data, 0.5)

    def test_map_channel_sum(self):
        """Test a unit 1x1x1 conv squashes the channel sum."""
        params, p = _vsf_params(vsf.default_partition(16))
        params.fill(0.0)
        p.map_local_weight.data[...] = 1.0
        f = VoxelTensor.random((1, 4, 2, 2, 2), seed=2)
        a = vsf.attention_map(f, p.map_local_weight, p.map_local_bias)
        expected = 1.0 / (1.0 + np.exp(-f.data.sum(axis=1, keepdims=True)))
        np.testing.assert_allclose(a.data, expected, rtol=1e-13)

    def test_map_bounds_extreme(self):
        """Test maps stay inside (0, 1) for |x| = 1e6."""
        _, p = _vsf_params(vsf.default_partition(16), seed=3)
        f = VoxelTensor(np.where(np.random.default_rng(3).random((1, 4, 2, 2, 2)) < 0.5, -1e6, 1e6))
        a = vsf.attention_map(f, p.map_global_weight, p.map_global_bias)
        assert np.all(a.data > 0.0) and np.all(a.data < 1.0)

    def test_scalar_swap(self):
        """Test F_g=2, F_l=3, A_g=0.25, A_l=0.5 give F'_g=1.0, F'_l=0.75."""
        one = lambda v: VoxelTensor(np.full((1, 1, 1, 1, 1), v))
        g, l = vsf.cross_calibrate(one(2.0), one(3.0), one(0.25), one(0.5))
        assert g.item() == 1.0
        assert l.item() == 0.75

    def test_unit_and_zero_maps(self):
        """Test A_l = 1 keeps F_g and A_g = 0 clears F_l."""
        f_g = VoxelTensor.random((1, 3, 2, 2, 2), seed=4)
        f_l = VoxelTensor.random((1, 3, 2, 2, 2), seed=5)
        g, l = vsf.cross_calibrate(
            f_g, f_l, VoxelTensor(np.zeros((1, 1, 2, 2, 2))), VoxelTensor.ones((1, 1, 2, 2, 2))
        )
        np.testing.assert_array_equal(g.data, f_g.data)
        np.testing.assert_array_equal(l.data, 0.0)

    def test_perturbing_global_map_only_moves_local(self):
        """Test a change in A_global alters F'_local and leaves F'_global unchanged."""
        f_g = VoxelTensor.random((1, 3, 2, 2, 2), seed=6)
        f_l = VoxelTensor.random((1, 3, 2, 2, 2), seed=7)
        a_l = VoxelTensor(np.full((1, 1, 2, 2, 2), 0.3))
        g1, l1 = vsf.cross_calibrate(f_g, f_l, VoxelTensor(np.full((1, 1, 2, 2, 2), 0.2)), a_l)
        g2, l2 = vsf.cross_calibrate(f_g, f_l, VoxelTensor(np.full((1, 1, 2, 2, 2), 0.9)), a_l)
        np.testing.assert_array_equal(g1.data, g2.data)
        assert not np.array_equal(l1.data, l2.data)

    def test_feature_shape_mismatch(self):
        """Test features of different shapes are rejected."""
        m = VoxelTensor.ones((1, 1, 2, 2, 2))
        with pytest.raises(ShapeError):
            vsf.cross_calibrate(VoxelTensor.ones((1, 2, 2, 2, 2)), VoxelTensor.ones((1, 3, 2, 2, 2)), m, m)


class TestVSFForward:
    """Test every forward mode."""

    def test_none_is_identity(self, partition_z16):
        """Test mode none returns the input bitwise."""
        _, p = _vsf_params(partition_z16)
        x = VoxelTensor.random((1, 4, 2, 2, 16), seed=1)
        assert vsf.vsf_forward(x, p, partition_z16, "none").data.tobytes() == x.data.tobytes()

    @pytest.mark.parametrize("mode", ["full", "global_only", "local_only", "concat_fusion"])
    @pytest.mark.parametrize("variant", ["seattention3d", "senet"])
    def test_matches_reference(self, partition_z16, mode, variant):
        """Test each mode against the straight-line re-composition."""
        _, p = _vsf_params(partition_z16, seed=11)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=12)
        out = vsf.vsf_forward(x, p, partition_z16, mode, variant)
        expected = vsf_reference(x.data, p, partition_z16, mode, per_height=(variant == "seattention3d"))
        np.testing.assert_allclose(out.data, expected, rtol=1e-10, atol=1e-12)

    def test_full_dims(self, partition_z16):
        """Test full mode preserves (1, 8, 6, 6, 16)."""
        _, p = _vsf_params(partition_z16, channels=8, r=4)
        x = VoxelTensor.random((1, 8, 6, 6, 16), seed=2)
        out = vsf.vsf_forward(x, p, partition_z16, "full")
        assert out.dims == x.dims

    def test_no_explosion(self, partition_z16):
        """Test large inputs give finite outputs."""
        _, p = _vsf_params(partition_z16, seed=3)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=3, scale=1e4)
        assert np.all(np.isfinite(vsf.vsf_forward(x, p, partition_z16, "full").data))

    def test_modes_differ(self, partition_z16):
        """Test full and concat fusion give different outputs."""
        _, p = _vsf_params(partition_z16, seed=4)
        x = VoxelTensor.random((1, 4, 3, 3, 16), seed=4)
        full = vsf.vsf_forward(x, p, partition_z16, "full").data
        concat = vsf.vsf_forward(x, p, partition_z16, "concat_fusion").data
        assert not np.allclose(full, concat)

    def test_unknown_mode(self, partition_z16):
        """Test unknown modes are configuration errors."""
        _, p = _vsf_params(partition_z16)
        with pytest.raises(ConfigError, match="sideways"):
            vsf.vsf_forward(VoxelTensor.zeros((1, 4, 1, 1, 16)), p, partition_z16, "sideways")

    def test_channel_mismatch(self, partition_z16):
        """Test volumes with other channel counts are rejected."""
        _, p = _vsf_params(partition_z16)
        with pytest.raises(ShapeError, match="C=4"):
            vsf.vsf_forward(VoxelTensor.zeros((1, 2, 1, 1, 16)), p, partition_z16)
