"""
Test analytic gradients against finite differences

Every registered case must pass; a deliberately wrong backward must be caught
and reported under its op name.
"""

import numpy as np
import pytest

from voxslice import gradcheck, ops
from voxslice.errors import ConfigError, ExitCode, GradcheckError
from voxslice.gradcheck import GradcheckCase
from voxslice.tensor import Tensor, VoxelTensor, make_output


def _misdifferentiated_double(x: Tensor) -> Tensor:
    """2x forward with a 3x backward."""
    return make_output("double", 2.0 * x.data, (x,), lambda: (lambda g: (3.0 * g,)))


def _broken_case():
    x = VoxelTensor.random((1, 1, 2, 2, 2), 3, requires_grad=True, name="x")
    return (lambda: ops.sum_all(_misdifferentiated_double(x))), [x]


class TestCheckGradients:
    """Test the comparison itself."""

    def test_correct_op_passes(self):
        """Test sigmoid passes with error well under tolerance."""
        x = VoxelTensor.random((1, 2, 2, 2, 2), 1, requires_grad=True, name="x")
        result = gradcheck.check_gradients("sigmoid", lambda: ops.sum_all(ops.sigmoid(x)), [x])
        assert result.passed
        assert result.max_rel_error < 1e-6
        assert result.checked + result.kinks == x.size == 16
        assert x.grad is None

    def test_wrong_backward_fails(self):
        """Test a 3x backward for a 2x forward is flagged with relative error 1/3."""
        fn, tensors = _broken_case()
        result = gradcheck.check_gradients("double", fn, tensors)
        assert not result.passed
        assert result.max_rel_error == pytest.approx(1.0 / 3.0, rel=1e-6)
        assert result.worst[0] == "x"

    def test_require_pass_names_op(self):
        """Test a failing result raises GradcheckError naming the op."""
        fn, tensors = _broken_case()
        with pytest.raises(GradcheckError, match="double") as info:
            gradcheck.require_pass(gradcheck.check_gradients("double", fn, tensors))
        assert info.value.code == ExitCode.VERIFICATION_FAILED

    def test_input_values_restored(self):
        """Test perturbations leave the inputs as they were."""
        x = VoxelTensor.random((1, 1, 2, 2, 2), 2, requires_grad=True)
        before = x.data.copy()
        gradcheck.check_gradients("relu", lambda: ops.sum_all(ops.relu(x)), [x])
        np.testing.assert_array_equal(x.data, before)


class TestRegistry:
    """Test the registered suite."""

    @pytest.mark.parametrize("module", ["core", "attention", "losses"])
    def test_module_passes(self, module):
        """Test every case of a module passes."""
        results = gradcheck.run_suite(module)
        assert results
        failed = [(r.op_name, r.max_rel_error, r.worst) for r in results if not r.passed]
        assert not failed
        assert all(r.checked > 0 for r in results)

    @pytest.mark.timeout(300)
    def test_vsf_full_every_coordinate(self):
        """Test full-mode VSF on (1, 4, 3, 3, 16) passes on every input and parameter coordinate."""
        case = gradcheck.REGISTRY["vsf_full"]
        _, tensors = case.build()
        assert tensors[0].dims == (1, 4, 3, 3, 16)
        result = case.run()
        assert result.checked + result.kinks == sum(t.size for t in tensors)
        assert result.passed, (result.max_rel_error, result.worst)

    @pytest.mark.timeout(300)
    def test_vsf_module_passes(self):
        """Test every VSF mode and the cross calibration pass."""
        failed = [(r.op_name, r.max_rel_error, r.worst) for r in gradcheck.run_suite("vsf") if not r.passed]
        assert not failed

    @pytest.mark.slow
    @pytest.mark.timeout(600)
    def test_pipeline_passes(self):
        """Test the end-to-end loss through the model passes."""
        results = gradcheck.run_suite("pipeline")
        failed = [(r.op_name, r.max_rel_error, r.worst) for r in results if not r.passed]
        assert not failed

    def test_every_module_registered(self):
        """Test each module contributes at least one case."""
        modules = {case.module for case in gradcheck.REGISTRY.values()}
        assert modules == set(gradcheck.MODULES)

    def test_custom_registry_reports_failure(self):
        """Test run_suite over a registry holding a broken case."""
        registry = {"double": GradcheckCase("double", "core", _broken_case)}
        (result,) = gradcheck.run_suite("core", registry=registry)
        assert result.op_name == "double"
        assert not result.passed

    def test_unknown_module(self):
        """Test unknown module names are rejected."""
        with pytest.raises(ConfigError, match="geometry"):
            gradcheck.run_suite("geometry")
