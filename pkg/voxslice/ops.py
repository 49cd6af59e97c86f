"""
Differentiable primitive operations

The closed op vocabulary every model component is composed from. Each op
computes its forward result with numpy and, when a Tape is active, records a
backward closure returning one gradient per input (None for inputs that take
no gradient).

Layout is fixed row-major [B, C, X, Y, Z] for volumes and [B, C, Z] for
profiles.
"""

from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from voxslice.errors import ShapeError
from voxslice.tensor import DTYPE, PlaneProfile, Tensor, VoxelTensor, make_output

# sigmoid is clamped into the open interval so gates never reach 0 or 1 exactly
_SIGMOID_LO = np.finfo(DTYPE).tiny
_SIGMOID_HI = np.nextafter(DTYPE(1.0), DTYPE(0.0))


def _require_voxel(x: Tensor, what: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{what} must be a [B, C, X, Y, Z] volume", x.dims)


def _require_profile(s: Tensor, what: str) -> None:
    if s.data.ndim != 3:
        raise ShapeError(f"{what} must be a [B, C, Z] profile", s.dims)


# --- convolutions -----------------------------------------------------------

def _conv3d_same(x: np.ndarray, w: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Stride-1 zero-padded correlation; returns (output, input windows)."""
    pad = w.shape[2] // 2
    k = w.shape[2]
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (k, k, k), axis=(2, 3, 4))
    out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(np.moveaxis(out, 4, 1)), windows


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> VoxelTensor:
    """Same-padded 3D convolution.

    Args:
        x: [B, C_in, X, Y, Z]
        kernel: [C_out, C_in, k, k, k] with k odd
        bias: [C_out] or None

    Returns:
        [B, C_out, X, Y, Z]
    """
    _require_voxel(x, "conv3d input")
    w = kernel.data
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]) or w.shape[2] % 2 == 0:
        raise ShapeError("conv3d kernel must be [C_out, C_in, k, k, k] with odd k", w.shape)
    if w.shape[1] != x.dims[1]:
        raise ShapeError("conv3d kernel input channels do not match input", w.shape, x.dims)
    if bias is not None and bias.dims != (w.shape[0],):
        raise ShapeError("conv3d bias must be [C_out]", bias.dims, w.shape)

    out, windows = _conv3d_same(x.data, w)
    if bias is not None:
        out += bias.data[None, :, None, None, None]

    def backward():
        def fn(g):
            flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            grad_x = _conv3d_same(g, flipped)[0] if x.requires_grad else None
            grad_w = np.tensordot(g, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4])) if kernel.requires_grad else None
            grad_b = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
            return grad_x, grad_w, grad_b
        return fn

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return make_output("conv3d", out, inputs, backward)


def conv1d_channel(s: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> PlaneProfile:
    """Kernel-size-1 convolution across channels, shared over z.

    Args:
        s: [B, C_in, Z]
        kernel: [C_out, C_in, 1]
        bias: [C_out] or None
    """
    _require_profile(s, "conv1d_channel input")
    w = kernel.data
    if w.ndim != 3 or w.shape[2] != 1:
        raise ShapeError("conv1d_channel kernel must be [C_out, C_in, 1]", w.shape)
    if w.shape[1] != s.dims[1]:
        raise ShapeError("conv1d_channel kernel input channels do not match input", w.shape, s.dims)
    if bias is not None and bias.dims != (w.shape[0],):
        raise ShapeError("conv1d_channel bias must be [C_out]", bias.dims, w.shape)

    w2 = w[:, :, 0]
    out = np.einsum("oc,bcz->boz", w2, s.data)
    if bias is not None:
        out += bias.data[None, :, None]

    def backward():
        def fn(g):
            grad_s = np.einsum("oc,boz->bcz", w2, g) if s.requires_grad else None
            grad_w = np.einsum("boz,bcz->oc", g, s.data)[:, :, None] if kernel.requires_grad else None
            grad_b = g.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
            return grad_s, grad_w, grad_b
        return fn

    inputs = (s, kernel, bias) if bias is not None else (s, kernel)
    return make_output("conv1d_channel", out, inputs, backward)


# --- pointwise ----------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def backward():
        return lambda g: (g * mask,)

    return make_output("relu", out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = np.clip(out, _SIGMOID_LO, _SIGMOID_HI)

    def backward():
        return lambda g: (g * out * (1.0 - out),)

    return make_output("sigmoid", out, (x,), backward)


def pointwise(x: Tensor, f: str) -> Tensor:
    """Apply 'relu' or 'sigmoid' elementwise."""
    if f == "relu":
        return relu(x)
    if f == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown pointwise function: {f}")


# --- channel and height structure --------------------------------------------

def concat_channels(a: Tensor, b: Tensor) -> VoxelTensor:
    _require_voxel(a, "concat_channels operand")
    _require_voxel(b, "concat_channels operand")
    if a.dims[0] != b.dims[0] or a.dims[2:] != b.dims[2:]:
        raise ShapeError("concat_channels operands disagree on B, X, Y, Z", a.dims, b.dims)
    ca = a.dims[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward():
        return lambda g: (g[:, :ca], g[:, ca:])

    return make_output("concat_channels", out, (a, b), backward)


def slice_channels(x: Tensor, lo: int, hi: int) -> VoxelTensor:
    _require_voxel(x, "slice_channels input")
    if not 0 <= lo < hi <= x.dims[1]:
        raise ShapeError(f"channel range [{lo}, {hi}) outside input", x.dims)
    out = x.data[:, lo:hi].copy()

    def backward():
        def fn(g):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)
        return fn

    return make_output("slice_channels", out, (x,), backward)


def slice_z(x: Tensor, lo: int, hi: int) -> VoxelTensor:
    """Half-open height slice [lo, hi) of a volume."""
    _require_voxel(x, "slice_z input")
    if not 0 <= lo < hi <= x.dims[4]:
        raise ShapeError(f"z range [{lo}, {hi}) outside input", x.dims)
    out = x.data[..., lo:hi].copy()

    def backward():
        def fn(g):
            full = np.zeros_like(x.data)
            full[..., lo:hi] = g
            return (full,)
        return fn

    return make_output("slice_z", out, (x,), backward)


def concat_z(parts: Sequence[Tensor]) -> VoxelTensor:
    """Stack height slices back along z, in the given order."""
    if not parts:
        raise ShapeError("concat_z needs at least one slice")
    for p in parts:
        _require_voxel(p, "concat_z operand")
        if p.dims[:4] != parts[0].dims[:4]:
            raise ShapeError("concat_z operands disagree on B, C, X, Y", p.dims, parts[0].dims)
    bounds = np.cumsum([0] + [p.dims[4] for p in parts])
    out = np.concatenate([p.data for p in parts], axis=4)

    def backward():
        return lambda g: tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_output("concat_z", out, tuple(parts), backward)


def mean_xy(x: Tensor) -> PlaneProfile:
    """Average over the X-Y plane: [B, C, X, Y, Z] -> [B, C, Z]."""
    _require_voxel(x, "mean_xy input")
    b, c, nx, ny, nz = x.dims
    out = x.data.reshape(b, c, nx * ny, nz).sum(axis=2) / (nx * ny)

    def backward():
        return lambda g: (np.broadcast_to(g[:, :, None, None, :] / (nx * ny), x.dims).copy(),)

    return make_output("mean_xy", out, (x,), backward)


def mean_z(s: Tensor) -> PlaneProfile:
    """Average a profile over z keeping a unit z axis: [B, C, Z] -> [B, C, 1]."""
    _require_profile(s, "mean_z input")
    nz = s.dims[2]
    out = s.data.sum(axis=2, keepdims=True) / nz

    def backward():
        return lambda g: (np.broadcast_to(g / nz, s.dims).copy(),)

    return make_output("mean_z", out, (s,), backward)


def mul_broadcast(x: Tensor, gate: Tensor) -> VoxelTensor:
    """y[b,c,i,j,z] = x[b,c,i,j,z] * gate[b,c,z]; a gate with Z=1 applies to every z."""
    _require_voxel(x, "mul_broadcast input")
    _require_profile(gate, "mul_broadcast gate")
    b, c, _, _, nz = x.dims
    if gate.dims[:2] != (b, c) or gate.dims[2] not in (1, nz):
        raise ShapeError("mul_broadcast gate does not match input on B, C, Z", gate.dims, x.dims)
    g5 = gate.data[:, :, None, None, :]
    out = x.data * g5
    gate_z = gate.dims[2]

    def backward():
        def fn(g):
            grad_x = g * g5
            grad_gate = (g * x.data).sum(axis=(2, 3))
            if gate_z == 1:
                grad_gate = grad_gate.sum(axis=2, keepdims=True)
            return grad_x, grad_gate
        return fn

    return make_output("mul_broadcast", out, (x, gate), backward)


def mul_map(f: Tensor, a: Tensor) -> VoxelTensor:
    """Weight every channel of f by a single-channel map a: [B, 1, X, Y, Z]."""
    _require_voxel(f, "mul_map feature")
    _require_voxel(a, "mul_map attention map")
    if a.dims[1] != 1 or a.dims[0] != f.dims[0] or a.dims[2:] != f.dims[2:]:
        raise ShapeError("mul_map map must be [B, 1, X, Y, Z] matching the feature", a.dims, f.dims)
    out = f.data * a.data

    def backward():
        return lambda g: (g * a.data, (g * f.data).sum(axis=1, keepdims=True))

    return make_output("mul_map", out, (f, a), backward)


# --- arithmetic and reductions ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeError("add operands differ in shape", a.dims, b.dims)
    out = a.data + b.data

    def backward():
        return lambda g: (g, g)

    return make_output("add", out, (a, b), backward)


def scale(x: Tensor, alpha: float) -> Tensor:
    out = x.data * alpha

    def backward():
        return lambda g: (g * alpha,)

    return make_output("scale", out, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum())

    def backward():
        return lambda g: (np.full_like(x.data, g),)

    return make_output("sum", out, (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = np.array(x.data.sum() / n)

    def backward():
        return lambda g: (np.full_like(x.data, g / n),)

    return make_output("mean", out, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(weights * x) for a constant weight array; the usual projection for gradient checks."""
    if weights.shape != x.dims:
        raise ShapeError("weighted_sum weights do not match input", weights.shape, x.dims)
    w = np.asarray(weights, dtype=DTYPE)
    out = np.array((w * x.data).sum())

    def backward():
        return lambda g: (g * w,)

    return make_output("weighted_sum", out, (x,), backward)


def softmax_channels(x: Tensor) -> VoxelTensor:
    """Softmax over the channel axis of a volume."""
    _require_voxel(x, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward():
        return lambda g: (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return make_output("softmax", out, (x,), backward)
