"""
SSOC1 binary formats

Tensor files:     b"SSOCTEN1" | 5 x uint32 LE dims (B, C, X, Y, Z) | float64 LE payload
Label files:      b"SSOCLAB1" | 4 x uint32 LE dims (B, X, Y, Z)    | uint8 payload
Checkpoint files: b"SSOCCKP1" | uint32 LE manifest length | UTF-8 JSON manifest | float64 LE payload

All payloads are row-major. The checkpoint manifest lists every parameter as
(name, shape, offset) where offset counts float64 values from the payload start.
"""

import hashlib
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from voxslice.errors import CodecError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"SSOCTEN1"
LABEL_MAGIC = b"SSOCLAB1"
CHECKPOINT_MAGIC = b"SSOCCKP1"

UINT32_BYTES = 4  # every dim and the manifest length are uint32
FLOAT64_BYTES = 8

PathLike = Union[str, Path]


def _pack_dims(dims) -> bytes:
    return b"".join(int(d).to_bytes(UINT32_BYTES, byteorder="little") for d in dims)


def _unpack_dims(data: bytes, offset: int, count: int) -> Tuple[int, ...]:
    end = offset + count * UINT32_BYTES
    if len(data) < end:
        raise CodecError(f"truncated header: need {end} bytes, have {len(data)}")
    return tuple(
        int.from_bytes(data[offset + i * UINT32_BYTES: offset + (i + 1) * UINT32_BYTES], byteorder="little")
        for i in range(count)
    )


def _check_magic(data: bytes, magic: bytes) -> None:
    if data[:len(magic)] != magic:
        raise CodecError(f"bad magic: expected {magic!r}, found {data[:len(magic)]!r}")


def encode_tensor(array: np.ndarray) -> bytes:
    """Serialize a rank-5 float array."""
    array = np.asarray(array)
    if array.ndim != 5:
        raise CodecError(f"tensor files hold rank-5 arrays, got shape {array.shape}")
    return TENSOR_MAGIC + _pack_dims(array.shape) + np.ascontiguousarray(array, dtype="<f8").tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    _check_magic(data, TENSOR_MAGIC)
    dims = _unpack_dims(data, len(TENSOR_MAGIC), 5)
    start = len(TENSOR_MAGIC) + 5 * UINT32_BYTES
    expected = int(np.prod(dims)) * FLOAT64_BYTES
    if len(data) - start != expected:
        raise CodecError(f"tensor payload is {len(data) - start} bytes, dims {dims} need {expected}")
    return np.frombuffer(data, dtype="<f8", offset=start).astype(np.float64).reshape(dims)


def encode_labels(labels: np.ndarray) -> bytes:
    """Serialize a rank-4 label grid; labels must fit in uint8."""
    labels = np.asarray(labels)
    if labels.ndim != 4:
        raise CodecError(f"label files hold rank-4 arrays, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise CodecError("labels must lie in [0, 255]")
    return LABEL_MAGIC + _pack_dims(labels.shape) + np.ascontiguousarray(labels, dtype=np.uint8).tobytes()


def decode_labels(data: bytes) -> np.ndarray:
    _check_magic(data, LABEL_MAGIC)
    dims = _unpack_dims(data, len(LABEL_MAGIC), 4)
    start = len(LABEL_MAGIC) + 4 * UINT32_BYTES
    expected = int(np.prod(dims))
    if len(data) - start != expected:
        raise CodecError(f"label payload is {len(data) - start} bytes, dims {dims} need {expected}")
    return np.frombuffer(data, dtype=np.uint8, offset=start).copy().reshape(dims)


def encode_checkpoint(state: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> bytes:
    """Serialize named float64 arrays plus a JSON-compatible metadata dict."""
    entries = []
    payload = []
    offset = 0
    for name, values in state.items():
        values = np.ascontiguousarray(values, dtype="<f8")
        entries.append({"name": name, "shape": list(values.shape), "offset": offset})
        payload.append(values.tobytes())
        offset += values.size
    manifest = {"meta": meta, "params": entries, "total_values": offset}
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + _pack_dims([len(manifest_bytes)]) + manifest_bytes + b"".join(payload)


def decode_checkpoint(data: bytes) -> Tuple["OrderedDict[str, np.ndarray]", Dict[str, Any]]:
    _check_magic(data, CHECKPOINT_MAGIC)
    (manifest_len,) = _unpack_dims(data, len(CHECKPOINT_MAGIC), 1)
    start = len(CHECKPOINT_MAGIC) + UINT32_BYTES
    try:
        manifest = json.loads(data[start:start + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CodecError(f"unreadable checkpoint manifest: {e}")
    payload_start = start + manifest_len
    total = manifest.get("total_values", 0)
    if len(data) - payload_start != total * FLOAT64_BYTES:
        raise CodecError(
            f"checkpoint payload is {len(data) - payload_start} bytes, manifest needs {total * FLOAT64_BYTES}"
        )
    flat = np.frombuffer(data, dtype="<f8", offset=payload_start).astype(np.float64)
    state = OrderedDict()
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        state[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    return state, manifest["meta"]


def write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.debug("wrote %s (%d bytes)", path, len(data))
    return path


def read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    return path.read_bytes()


def write_tensor(path: PathLike, array: np.ndarray) -> Path:
    return write_bytes(path, encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(read_bytes(path))


def write_labels(path: PathLike, labels: np.ndarray) -> Path:
    return write_bytes(path, encode_labels(labels))


def read_labels(path: PathLike) -> np.ndarray:
    return decode_labels(read_bytes(path))


def file_digest(path: PathLike) -> str:
    """sha256 hex digest of a file's contents."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
