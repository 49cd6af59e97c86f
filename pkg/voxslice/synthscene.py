"""
Synthetic labeled scenes

Boxes of each class are placed inside that class's height band, then two
pseudo-modality feature volumes are derived from the labels:

- camera features carry the class identity along an orthonormal basis, read
  from a column shifted up or down by up to cam_jitter voxels, plus noise;
- lidar features carry occupancy and surface edges crisply, with only a weak
  class component.

Everything is a deterministic function of (seed, SceneConfig).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from voxslice import codec
from voxslice.config import ClassHeightProfile, SceneConfig
from voxslice.errors import GenerationError, ValidationError
from voxslice.metrics import EMPTY_CLASS, OccupancyGrid
from voxslice.tensor import VoxelTensor

logger = logging.getLogger(__name__)

VAL_SEED_OFFSET = 1_000_000
READOUT_RIDGE = 1e-3


@dataclass
class SceneSample:
    gt: OccupancyGrid
    feat_cam: VoxelTensor
    feat_lidar: VoxelTensor
    seed: int

    @property
    def grid(self) -> Tuple[int, int, int]:
        return tuple(self.gt.dims[1:])


def class_basis(config: SceneConfig) -> np.ndarray:
    """[C, K] with column 0 (empty) zero and orthonormal class columns."""
    rng = np.random.default_rng(config.feature_seed)
    q, _ = np.linalg.qr(rng.standard_normal((config.channels, len(config.classes))))
    basis = np.zeros((config.channels, config.num_classes))
    basis[:, 1:] = q
    return basis


def lidar_directions(config: SceneConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Unit channel directions for occupancy and surface edges."""
    rng = np.random.default_rng(config.feature_seed + 1)
    g, e = rng.standard_normal((2, config.channels))
    return g / np.linalg.norm(g), e / np.linalg.norm(e)


def surface_mask(occupied: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one empty (or out-of-grid) 6-neighbour."""
    padded = np.pad(occupied, 1, constant_values=False)
    interior = np.ones_like(occupied)
    for axis in range(3):
        for shift in (-1, 1):
            neighbour = np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
            interior &= neighbour
    return occupied & ~interior


def _place_boxes(config: SceneConfig, rng: np.random.Generator, seed: int) -> np.ndarray:
    nx, ny, nz = config.grid
    labels = np.zeros(config.grid, dtype=np.uint8)
    weights = np.array([c.weight for c in config.classes], dtype=np.float64)
    for _ in range(config.objects_per_scene):
        profile: ClassHeightProfile = config.classes[rng.choice(len(config.classes), p=weights / weights.sum())]
        lo, hi = config.band_voxels(profile)
        band = hi - lo
        fmin, fmax = profile.footprint
        for _attempt in range(config.max_retries):
            sx = min(int(rng.integers(fmin, fmax + 1)), nx)
            sy = min(int(rng.integers(fmin, fmax + 1)), ny)
            hz = int(rng.integers((band + 1) // 2, band + 1))
            x0 = int(rng.integers(0, nx - sx + 1))
            y0 = int(rng.integers(0, ny - sy + 1))
            z0 = int(rng.integers(lo, hi - hz + 1))
            box = labels[x0:x0 + sx, y0:y0 + sy, z0:z0 + hz]
            if not box.any():
                box[...] = profile.class_id
                break
        else:
            raise GenerationError(
                f"could not place a {profile.name!r} box after {config.max_retries} attempts", seed
            )
    return labels


def _camera_features(config: SceneConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    nx, ny, nz = config.grid
    shift = rng.integers(-config.cam_jitter, config.cam_jitter + 1, size=(nx, ny))
    z_src = np.clip(np.arange(nz)[None, None, :] + shift[:, :, None], 0, nz - 1)
    seen = np.take_along_axis(labels, z_src, axis=2)
    basis = class_basis(config)
    feat = config.cam_class_strength * basis[:, seen]
    return feat + config.sigma_cam * rng.standard_normal(feat.shape)


def _lidar_features(config: SceneConfig, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    occupied = labels != EMPTY_CLASS
    edge = surface_mask(occupied)
    g, e = lidar_directions(config)
    basis = class_basis(config)
    feat = (
        g[:, None, None, None] * occupied
        + e[:, None, None, None] * edge
        + config.lidar_class_strength * basis[:, labels]
    )
    return feat + config.sigma_lidar * rng.standard_normal(feat.shape)


def generate(config: SceneConfig, seed: int) -> SceneSample:
    """Build one labeled scene with camera-like and lidar-like features."""
    placement, cam_stream, lidar_stream = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    labels = _place_boxes(config, placement, seed)
    feat_cam = _camera_features(config, labels, cam_stream)
    feat_lidar = _lidar_features(config, labels, lidar_stream)
    return SceneSample(
        gt=OccupancyGrid(labels[None], config.num_classes),
        feat_cam=VoxelTensor(feat_cam[None], name="feat_cam"),
        feat_lidar=VoxelTensor(feat_lidar[None], name="feat_lidar"),
        seed=seed,
    )


def band_violations(sample: SceneSample, config: SceneConfig) -> int:
    """Number of labeled voxels lying outside their class's height band."""
    z = np.arange(config.grid[2])
    count = 0
    for profile in config.classes:
        lo, hi = config.band_voxels(profile)
        outside = (z < lo) | (z >= hi)
        count += int(((sample.gt.labels == profile.class_id) & outside).sum())
    return count


class SampleStream:
    """Lazily generated samples over a fixed seed list; re-iterable."""

    def __init__(self, config: SceneConfig, seeds: Sequence[int]):
        self.config = config
        self.seeds = tuple(int(s) for s in seeds)

    def __len__(self) -> int:
        return len(self.seeds)

    def __getitem__(self, idx: int) -> SceneSample:
        return generate(self.config, self.seeds[idx])

    def __iter__(self) -> Iterator[SceneSample]:
        for seed in self.seeds:
            yield generate(self.config, seed)


def dataset(config: SceneConfig, n_train: int, n_val: int, base_seed: int = 0) -> Tuple[SampleStream, SampleStream]:
    """Train and validation streams over disjoint seed ranges."""
    if n_train > VAL_SEED_OFFSET:
        raise ValidationError(f"at most {VAL_SEED_OFFSET} training samples, got {n_train}")
    train = SampleStream(config, [base_seed + i for i in range(n_train)])
    val = SampleStream(config, [base_seed + VAL_SEED_OFFSET + j for j in range(n_val)])
    return train, val


# ---- modal asymmetry self-test ------------------------------------------------

@dataclass(frozen=True)
class ReadoutScores:
    occupancy_cam: float
    occupancy_lidar: float
    class_cam: float
    class_lidar: float


def _voxel_rows(feat: VoxelTensor) -> np.ndarray:
    rows = np.moveaxis(feat.data, 1, -1).reshape(-1, feat.dims[1])
    return np.hstack([rows, np.ones((rows.shape[0], 1))])


def _ridge_fit(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = a.shape[1]
    a_aug = np.vstack([a, np.sqrt(READOUT_RIDGE) * np.eye(n)])
    b_aug = np.vstack([b, np.zeros((n, b.shape[1]))])
    w, *_ = np.linalg.lstsq(a_aug, b_aug, rcond=None)
    return w


def _readout(rows: np.ndarray, labels: np.ndarray, num_classes: int) -> Tuple[float, float]:
    occupied = labels != EMPTY_CLASS
    target = np.where(occupied, 1.0, -1.0)[:, None]
    occ_acc = float(np.mean(((rows @ _ridge_fit(rows, target))[:, 0] > 0) == occupied))

    occ_rows = rows[occupied]
    occ_labels = labels[occupied]
    if occ_rows.shape[0] == 0:
        return occ_acc, float("nan")
    onehot = np.eye(num_classes)[occ_labels][:, 1:]
    pred = np.argmax(occ_rows @ _ridge_fit(occ_rows, onehot), axis=1) + 1
    return occ_acc, float(np.mean(pred == occ_labels))


def linear_readout_scores(samples: Iterable[SceneSample]) -> ReadoutScores:
    """Accuracy of per-modality linear readouts for occupancy and class-given-occupied."""
    samples = list(samples)
    if not samples:
        raise ValidationError("linear readout needs at least one sample")
    k = samples[0].gt.num_classes
    labels = np.concatenate([s.gt.labels.ravel() for s in samples]).astype(np.int64)
    cam = np.vstack([_voxel_rows(s.feat_cam) for s in samples])
    lidar = np.vstack([_voxel_rows(s.feat_lidar) for s in samples])
    occ_cam, cls_cam = _readout(cam, labels, k)
    occ_lidar, cls_lidar = _readout(lidar, labels, k)
    scores = ReadoutScores(occ_cam, occ_lidar, cls_cam, cls_lidar)
    logger.debug("readout scores: %s", scores)
    return scores


# ---- persistence --------------------------------------------------------------

def sample_paths(directory: Union[str, Path], stem: str) -> Tuple[Path, Path, Path]:
    directory = Path(directory)
    return (
        directory / f"{stem}.cam.ssoc",
        directory / f"{stem}.lidar.ssoc",
        directory / f"{stem}.labels.ssoc",
    )


def save_sample(sample: SceneSample, directory: Union[str, Path], stem: str) -> List[Path]:
    cam, lidar, labels = sample_paths(directory, stem)
    return [
        codec.write_tensor(cam, sample.feat_cam.data),
        codec.write_tensor(lidar, sample.feat_lidar.data),
        codec.write_labels(labels, sample.gt.labels),
    ]


def load_sample(directory: Union[str, Path], stem: str, num_classes: int, seed: Optional[int] = None) -> SceneSample:
    cam, lidar, labels = sample_paths(directory, stem)
    sample = SceneSample(
        gt=OccupancyGrid(codec.read_labels(labels), num_classes),
        feat_cam=VoxelTensor(codec.read_tensor(cam), name="feat_cam"),
        feat_lidar=VoxelTensor(codec.read_tensor(lidar), name="feat_lidar"),
        seed=-1 if seed is None else seed,
    )
    if not (sample.feat_cam.dims[2:] == sample.feat_lidar.dims[2:] == sample.gt.dims[1:]):
        raise ValidationError(f"sample {stem!r} volumes disagree on the grid")
    return sample


def load_data_dir(directory: Union[str, Path]) -> List[SceneSample]:
    """All samples listed in a generated data directory's manifest.json."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    try:
        k = int(manifest["num_classes"])
        entries = manifest["samples"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed data manifest {manifest_path}: {exc}") from exc
    return [load_sample(directory, e["stem"], k, e.get("seed")) for e in entries]
