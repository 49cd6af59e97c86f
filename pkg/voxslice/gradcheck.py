"""
Finite-difference gradient oracle

check_gradients() compares the tape's analytic gradients with central
differences on every coordinate, or on a deterministic sample when max_coords
is set. The registry below holds one case per differentiable op plus the module
compositions built from them; `voxslice gradcheck` runs it. Only the end-to-end
model case samples coordinates.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from voxslice import ops
from voxslice.errors import ConfigError, GradcheckError
from voxslice.tensor import PlaneProfile, Tape, Tensor, VoxelTensor

logger = logging.getLogger(__name__)

STEP = 1e-4
TOLERANCE = 1e-4
KINK_TOLERANCE = 1e-3
ERROR_FLOOR = 1e-6
DEFAULT_MAX_COORDS: Optional[int] = None  # None checks every coordinate
PIPELINE_MAX_COORDS = 3

MODULES = ("core", "attention", "vsf", "losses", "pipeline")


@dataclass(frozen=True)
class GradcheckResult:
    op_name: str
    max_rel_error: float
    worst: Optional[Tuple[str, Tuple[int, ...]]]
    checked: int
    kinks: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _sample_coords(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def _evaluate(fn: Callable[[], Tensor]) -> float:
    return fn().item()


def _central(fn: Callable[[], Tensor], t: Tensor, flat: int, h: float) -> float:
    view = t.data.reshape(-1)
    original = view[flat]
    view[flat] = original + h
    f_plus = _evaluate(fn)
    view[flat] = original - h
    f_minus = _evaluate(fn)
    view[flat] = original
    return (f_plus - f_minus) / (2.0 * h)


def check_gradients(
    op_name: str,
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    max_coords: Optional[int] = DEFAULT_MAX_COORDS,
    h: float = STEP,
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic and numeric d fn() / d t for every t in tensors.

    fn must build a scalar from the given tensors; it is evaluated once under a
    tape and repeatedly without one. The numeric estimate combines the h and
    h/2 central differences; coordinates where the two disagree by more than
    KINK_TOLERANCE are reported as kinks (ReLU, sort ties) and skipped.
    """
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst_err, worst_at = 0.0, None
    checked = kinks = 0
    for i, t in enumerate(tensors):
        label = t.name or f"input{i}"
        for flat in _sample_coords(t.size, max_coords, rng):
            d_h = _central(fn, t, flat, h)
            d_half = _central(fn, t, flat, h / 2)
            if abs(d_h - d_half) > KINK_TOLERANCE * max(abs(d_h), abs(d_half), ERROR_FLOOR):
                kinks += 1
                continue
            numeric = (4.0 * d_half - d_h) / 3.0
            a = float(analytic[i].reshape(-1)[flat])
            err = abs(a - numeric) / max(abs(a), abs(numeric), ERROR_FLOOR)
            checked += 1
            if err > worst_err or worst_at is None:
                worst_err = err
                worst_at = (label, tuple(int(v) for v in np.unravel_index(flat, t.dims)))
    for t in tensors:
        t.zero_grad()
    result = GradcheckResult(op_name, worst_err, worst_at, checked, kinks)
    logger.info("%s: max rel error %.3e over %d coords (%d kinks)", op_name, worst_err, checked, kinks)
    return result


def require_pass(result: GradcheckResult) -> GradcheckResult:
    if not result.passed:
        raise GradcheckError(result.op_name, result.max_rel_error, result.worst)
    return result


# ---- registry -----------------------------------------------------------------

@dataclass(frozen=True)
class GradcheckCase:
    name: str
    module: str
    build: Callable[[], Tuple[Callable[[], Tensor], List[Tensor]]]
    max_coords: Optional[int] = DEFAULT_MAX_COORDS

    def run(self) -> GradcheckResult:
        fn, tensors = self.build()
        return check_gradients(self.name, fn, tensors, max_coords=self.max_coords)


REGISTRY: Dict[str, GradcheckCase] = {}


def register(name: str, module: str, max_coords: Optional[int] = DEFAULT_MAX_COORDS):
    if module not in MODULES:
        raise ConfigError(f"unknown gradcheck module {module!r}")

    def decorator(build):
        REGISTRY[name] = GradcheckCase(name, module, build, max_coords)
        return build

    return decorator


def run_suite(module: Optional[str] = None, registry: Optional[Dict[str, GradcheckCase]] = None) -> List[GradcheckResult]:
    """Run every registered case, or only those of one module."""
    registry = REGISTRY if registry is None else registry
    if module is not None and module not in MODULES:
        raise ConfigError(f"unknown gradcheck module {module!r} (expected one of {list(MODULES)})")
    cases = [c for c in registry.values() if module is None or c.module == module]
    return [case.run() for case in cases]


def _voxel(dims, seed, name, scale=1.0) -> VoxelTensor:
    return VoxelTensor.random(dims, seed, scale=scale, requires_grad=True, name=name)


def _projected(out_fn: Callable[[], Tensor], dims, seed: int) -> Callable[[], Tensor]:
    weights = np.random.default_rng(seed).standard_normal(tuple(dims))
    return lambda: ops.weighted_sum(out_fn(), weights)


# core ------------------------------------------------------------------------

@register("conv3d", "core")
def _conv3d_case():
    x = _voxel((2, 2, 3, 3, 2), 1, "x")
    w = Tensor.random((3, 2, 3, 3, 3), 2, requires_grad=True, name="kernel")
    b = Tensor.random((3,), 3, requires_grad=True, name="bias")
    return _projected(lambda: ops.conv3d(x, w, b), (2, 3, 3, 3, 2), 4), [x, w, b]


@register("conv1d_channel", "core")
def _conv1d_case():
    s = PlaneProfile.random((2, 3, 4), 5, requires_grad=True, name="s")
    w = Tensor.random((2, 3, 1), 6, requires_grad=True, name="kernel")
    b = Tensor.random((2,), 7, requires_grad=True, name="bias")
    return _projected(lambda: ops.conv1d_channel(s, w, b), (2, 2, 4), 8), [s, w, b]


@register("relu", "core")
def _relu_case():
    x = _voxel((1, 2, 3, 3, 2), 9, "x")
    return _projected(lambda: ops.relu(x), x.dims, 10), [x]


@register("sigmoid", "core")
def _sigmoid_case():
    x = _voxel((1, 2, 3, 3, 2), 11, "x", scale=2.0)
    return _projected(lambda: ops.sigmoid(x), x.dims, 12), [x]


@register("concat_channels", "core")
def _concat_case():
    a = _voxel((1, 2, 2, 3, 2), 13, "a")
    b = _voxel((1, 3, 2, 3, 2), 14, "b")
    return _projected(lambda: ops.concat_channels(a, b), (1, 5, 2, 3, 2), 15), [a, b]


@register("slice_channels", "core")
def _slice_channels_case():
    x = _voxel((1, 4, 2, 2, 2), 16, "x")
    return _projected(lambda: ops.slice_channels(x, 1, 3), (1, 2, 2, 2, 2), 17), [x]


@register("slice_concat_z", "core")
def _slice_z_case():
    x = _voxel((1, 2, 2, 2, 5), 18, "x")

    def fn():
        parts = [ops.slice_z(x, 0, 2), ops.slice_z(x, 2, 3), ops.slice_z(x, 3, 5)]
        return ops.concat_z([ops.scale(p, i + 1.0) for i, p in enumerate(parts)])

    return _projected(fn, x.dims, 19), [x]


@register("mean_xy_mean_z", "core")
def _mean_case():
    x = _voxel((2, 3, 3, 2, 4), 20, "x")
    return _projected(lambda: ops.mean_z(ops.mean_xy(x)), (2, 3, 1), 21), [x]


@register("mul_broadcast", "core")
def _mul_broadcast_case():
    x = _voxel((2, 3, 2, 2, 4), 22, "x")
    g = PlaneProfile.random((2, 3, 4), 23, requires_grad=True, name="gate")
    g1 = PlaneProfile.random((2, 3, 1), 24, requires_grad=True, name="gate_z1")
    fn = lambda: ops.add(ops.mul_broadcast(x, g), ops.mul_broadcast(x, g1))
    return _projected(fn, x.dims, 25), [x, g, g1]


@register("mul_map", "core")
def _mul_map_case():
    f = _voxel((1, 3, 2, 3, 2), 26, "f")
    a = _voxel((1, 1, 2, 3, 2), 27, "a")
    return _projected(lambda: ops.mul_map(f, a), f.dims, 28), [f, a]


@register("reductions", "core")
def _reductions_case():
    x = _voxel((1, 2, 2, 2, 3), 29, "x")
    fn = lambda: ops.add(ops.scale(ops.sum_all(x), 0.5), ops.mean_all(ops.pointwise(x, "sigmoid")))
    return fn, [x]


@register("softmax_channels", "core")
def _softmax_case():
    x = _voxel((2, 4, 2, 2, 2), 30, "x")
    return _projected(lambda: ops.softmax_channels(x), x.dims, 31), [x]


# attention -------------------------------------------------------------------

def _se_case(variant: str, seed: int):
    from voxslice.attention import SEParams, attention_forward
    from voxslice.params import ModuleParams

    params = ModuleParams(seed)
    se = SEParams.build(params, "se", channels=4, r=2)
    x = _voxel((2, 4, 3, 2, 5), seed, "x")
    fn = _projected(lambda: attention_forward(x, se, variant), x.dims, seed + 1)
    return fn, [x] + se.parameters()


@register("seattention3d", "attention")
def _seattention3d_case():
    return _se_case("seattention3d", 40)


@register("senet", "attention")
def _senet_case():
    return _se_case("senet", 42)


# vsf -------------------------------------------------------------------------

def _vsf_case(mode: str, seed: int, z: int):
    from voxslice.params import ModuleParams
    from voxslice.vsf import VSFParams, default_partition, vsf_forward

    partition = default_partition(z)
    params = ModuleParams(seed)
    p = VSFParams.build(params, "vsf", channels=4, num_local=len(partition), r=2)
    x = _voxel((1, 4, 3, 3, z), seed, "x")
    fn = _projected(lambda: vsf_forward(x, p, partition, mode), x.dims, seed + 1)
    return fn, [x] + list(params.values())


@register("vsf_full", "vsf")
def _vsf_full_case():
    """End-to-end VSF on a (1, 4, 3, 3, 16) volume with the default six bands."""
    return _vsf_case("full", 50, 16)


for _i, _mode in enumerate(("global_only", "local_only", "concat_fusion")):
    register(f"vsf_{_mode}", "vsf")(lambda _m=_mode, _s=52 + 2 * _i: _vsf_case(_m, _s, 8))
del _i, _mode


@register("cross_calibrate", "vsf")
def _cross_calibrate_case():
    from voxslice.vsf import cross_calibrate

    fg, fl = _voxel((1, 3, 2, 2, 3), 60, "f_global"), _voxel((1, 3, 2, 2, 3), 61, "f_local")
    ag, al = _voxel((1, 1, 2, 2, 3), 62, "a_global"), _voxel((1, 1, 2, 2, 3), 63, "a_local")
    w1 = np.random.default_rng(64).standard_normal(fg.dims)
    w2 = np.random.default_rng(65).standard_normal(fl.dims)

    def fn():
        g_cal, l_cal = cross_calibrate(fg, fl, ag, al)
        return ops.add(ops.weighted_sum(g_cal, w1), ops.weighted_sum(l_cal, w2))

    return fn, [fg, fl, ag, al]


# losses ----------------------------------------------------------------------

def _loss_case(loss_fn, seed: int):
    k = 4
    logits = _voxel((1, k, 3, 3, 2), seed, "logits")
    labels = np.random.default_rng(seed + 1).integers(0, k, size=(1, 3, 3, 2))
    labels.reshape(-1)[:k] = np.arange(k)
    return (lambda: loss_fn(ops.softmax_channels(logits), labels)), [logits]


@register("focal_loss", "losses")
def _focal_case():
    from voxslice.losses import focal_loss
    return _loss_case(focal_loss, 70)


@register("lovasz_softmax_loss", "losses")
def _lovasz_case():
    from voxslice.losses import lovasz_softmax_loss
    return _loss_case(lovasz_softmax_loss, 72)


@register("scal_geo_loss", "losses")
def _scal_geo_case():
    from voxslice.losses import scal_geo_loss
    return _loss_case(scal_geo_loss, 74)


@register("scal_sem_loss", "losses")
def _scal_sem_case():
    from voxslice.losses import scal_sem_loss
    return _loss_case(scal_sem_loss, 76)


@register("total_loss", "losses")
def _total_case():
    from voxslice.losses import total_loss
    return _loss_case(lambda p, y: total_loss(p, y)[0], 78)


# pipeline --------------------------------------------------------------------

@register("total_loss_forward", "pipeline", max_coords=PIPELINE_MAX_COORDS)
def _pipeline_case():
    from voxslice.config import ModelConfig
    from voxslice.losses import total_loss
    from voxslice.pipeline import OccupancyModel

    cfg = ModelConfig(channels=4, in_channels=4, num_classes=4, reduction=2, seed=80)
    model = OccupancyModel(cfg)
    cam = _voxel((1, 4, 4, 4, 16), 81, "feat_cam")
    lidar = _voxel((1, 4, 4, 4, 16), 82, "feat_lidar")
    labels = np.random.default_rng(83).integers(0, 4, size=(1, 4, 4, 16))

    def fn():
        return total_loss(model.forward(cam, lidar), labels)[0]

    return fn, [cam, lidar] + list(model.params.values())
