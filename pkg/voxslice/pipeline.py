"""
End-to-end occupancy model and training loop

Per modality: a two-layer conv3d encoder and its own VSF block. The refined
camera and lidar volumes are concatenated along channels and decoded by two
conv3d layers and a softmax over classes.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from voxslice import codec, ops
from voxslice.config import LossConfig, ModelConfig, TrainConfig, model_config_from_dict
from voxslice.errors import DivergenceError, ShapeError, ValidationError
from voxslice.losses import LossBreakdown, class_weights_from_counts, total_loss
from voxslice.metrics import ConfusionCounts, MetricsReport, OccupancyGrid, report_from_counts
from voxslice.params import ModuleParams, Parameter
from voxslice.tensor import Tape, VoxelTensor
from voxslice.vsf import VSFParams, vsf_forward

logger = logging.getLogger(__name__)

MODALITIES = ("cam", "lidar")
KERNEL = 3


class OccupancyModel:
    """Dual-modality encoder, per-modality VSF and decoding head."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self.partition = config.height_partition()
        self.params = ModuleParams(config.seed)
        c = config.channels
        k = KERNEL

        self.encoders: Dict[str, List[Tuple[Parameter, Parameter]]] = {}
        self.vsf: Dict[str, VSFParams] = {}
        for m in MODALITIES:
            layers = []
            c_in = config.in_channels
            for i in range(config.encoder_depth):
                w = self.params.add(f"{m}.encoder.{i}.weight", (c, c_in, k, k, k))
                b = self.params.add(f"{m}.encoder.{i}.bias", (c,), fan_in=c_in * k ** 3)
                layers.append((w, b))
                c_in = c
            self.encoders[m] = layers
            # built in every mode so variants of one seed share these tensors
            self.vsf[m] = VSFParams.build(self.params, f"{m}.vsf", c, len(self.partition), config.reduction)

        self.head = [
            (self.params.add("head.0.weight", (c, 2 * c, k, k, k)),
             self.params.add("head.0.bias", (c,), fan_in=2 * c * k ** 3)),
            (self.params.add("head.1.weight", (config.num_classes, c, k, k, k)),
             self.params.add("head.1.bias", (config.num_classes,), fan_in=c * k ** 3)),
        ]

    def encode(self, modality: str, x: VoxelTensor) -> VoxelTensor:
        if x.dims[1] != self.config.in_channels:
            raise ShapeError(f"{modality} features must have {self.config.in_channels} channels", x.dims)
        h = x
        for w, b in self.encoders[modality]:
            h = ops.relu(ops.conv3d(h, w, b))
        return vsf_forward(h, self.vsf[modality], self.partition, self.config.vsf_mode, self.config.attention)

    def forward(self, feat_cam: VoxelTensor, feat_lidar: VoxelTensor) -> VoxelTensor:
        """Class probabilities [B, K, X, Y, Z]."""
        if feat_cam.dims[0] != feat_lidar.dims[0] or feat_cam.dims[2:] != feat_lidar.dims[2:]:
            raise ShapeError("camera and lidar volumes disagree on B, X, Y, Z", feat_cam.dims, feat_lidar.dims)
        fused = ops.concat_channels(self.encode("cam", feat_cam), self.encode("lidar", feat_lidar))
        (w0, b0), (w1, b1) = self.head
        hidden = ops.relu(ops.conv3d(fused, w0, b0))
        return ops.softmax_channels(ops.conv3d(hidden, w1, b1))


def collate(samples: Sequence) -> Tuple[VoxelTensor, VoxelTensor, np.ndarray]:
    """Stack single-scene samples into one batch along B."""
    cam = np.concatenate([s.feat_cam.data for s in samples], axis=0)
    lidar = np.concatenate([s.feat_lidar.data for s in samples], axis=0)
    labels = np.concatenate([s.gt.labels for s in samples], axis=0)
    return VoxelTensor(cam, name="feat_cam"), VoxelTensor(lidar, name="feat_lidar"), labels


def forward(model: OccupancyModel, sample) -> VoxelTensor:
    return model.forward(sample.feat_cam, sample.feat_lidar)


def predict(model: OccupancyModel, sample) -> OccupancyGrid:
    return OccupancyGrid.from_probs(forward(model, sample).data)


class SGD:
    """Plain gradient descent, with optional heavy-ball momentum."""

    def __init__(self, params: ModuleParams, lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[str, np.ndarray] = {}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.momentum:
                v = self._velocity.get(name)
                v = p.grad.copy() if v is None else self.momentum * v + p.grad
                self._velocity[name] = v
                p.data -= self.lr * v
            else:
                p.data -= self.lr * p.grad


def make_optimizer(params: ModuleParams, cfg: TrainConfig) -> SGD:
    momentum = cfg.momentum if cfg.optimizer == "momentum" else 0.0
    return SGD(params, cfg.learning_rate, momentum)


def resolve_alpha(loss_cfg: LossConfig, samples: Sequence, num_classes: int) -> Optional[np.ndarray]:
    if loss_cfg.alpha == "uniform":
        return None
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.gt.labels.ravel(), minlength=num_classes)[:num_classes]
    return class_weights_from_counts(counts)


def evaluate(model: OccupancyModel, samples: Sequence, class_names: Sequence[str] = ()) -> MetricsReport:
    """Argmax predictions scored against ground truth, counts merged over samples."""
    counts = ConfusionCounts.empty(model.config.num_classes)
    for sample in samples:
        counts = counts + ConfusionCounts.from_grids(predict(model, sample), sample.gt)
    return report_from_counts(counts, class_names)


def evaluate_loss(model: OccupancyModel, samples: Sequence, loss_cfg: Optional[LossConfig] = None,
                  alpha: Optional[np.ndarray] = None) -> float:
    """Mean total loss over samples, no gradients."""
    values = [total_loss(forward(model, s), s.gt, loss_cfg, alpha)[1].total for s in samples]
    return float(np.mean(values))


@dataclass(frozen=True)
class TraceEntry:
    step: int
    loss: LossBreakdown
    miou: float
    geo_iou: float

    def as_dict(self) -> dict:
        return {"step": self.step, "miou": self.miou, "geo_iou": self.geo_iou, **self.loss.as_dict()}


@dataclass
class TrainResult:
    model: OccupancyModel
    trace: List[TraceEntry] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    report: Optional[MetricsReport] = None


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: Sequence,
    val: Optional[Sequence] = None,
    loss_cfg: Optional[LossConfig] = None,
    class_names: Sequence[str] = (),
) -> TrainResult:
    """Gradient descent on the total loss, cycling through data in order.

    Batches are data[(step * batch_size + i) % n]. Metrics are taken on val (or
    on data when val is None) every eval_every steps and after the last step.

    Raises:
        DivergenceError: if a step produces a non-finite loss
    """
    loss_cfg = loss_cfg or LossConfig()
    samples = list(data)
    if not samples:
        raise ValidationError("training needs at least one sample")
    eval_samples = samples if val is None else list(val)
    model = OccupancyModel(model_cfg)
    alpha = resolve_alpha(loss_cfg, samples, model_cfg.num_classes)
    optimizer = make_optimizer(model.params, train_cfg)
    result = TrainResult(model=model)
    result.initial_loss = evaluate_loss(model, samples, loss_cfg, alpha)
    logger.info("initial loss %.6f over %d samples", result.initial_loss, len(samples))

    tape = Tape()
    n = len(samples)
    for step in range(train_cfg.steps):
        batch = [samples[(step * train_cfg.batch_size + i) % n] for i in range(train_cfg.batch_size)]
        cam, lidar, labels = collate(batch)
        model.params.zero_grad()
        tape.reset()
        with tape:
            probs = model.forward(cam, lidar)
            loss, breakdown = total_loss(probs, labels, loss_cfg, alpha)
        if not np.isfinite(breakdown.total):
            raise DivergenceError("training loss is not finite", step)
        tape.backward(loss)
        optimizer.step()

        done = step + 1
        if done % train_cfg.eval_every == 0 or done == train_cfg.steps:
            report = evaluate(model, eval_samples, class_names)
            result.trace.append(TraceEntry(done, breakdown, report.miou, report.geo_iou))
            result.report = report
            logger.info(
                "step %d: loss %.6f miou %.4f geo_iou %.4f", done, breakdown.total, report.miou, report.geo_iou
            )

    if result.report is None:
        result.report = evaluate(model, eval_samples, class_names)
    result.final_loss = evaluate_loss(model, samples, loss_cfg, alpha)
    logger.info("final loss %.6f", result.final_loss)
    return result


# ---- checkpoints --------------------------------------------------------------

def save_checkpoint(path: Union[str, Path], model: OccupancyModel, extra: Optional[dict] = None) -> Path:
    meta = {"model": asdict(model.config), "seed": model.config.seed}
    if extra:
        meta.update(extra)
    return codec.write_bytes(path, codec.encode_checkpoint(model.params.state_dict(), meta))


def load_checkpoint(path: Union[str, Path]) -> Tuple[OccupancyModel, dict]:
    """Rebuild the model recorded in a checkpoint and load its parameters."""
    state, meta = codec.decode_checkpoint(codec.read_bytes(path))
    if "model" not in meta:
        raise ValidationError(f"checkpoint {path} has no model config")
    model = OccupancyModel(model_config_from_dict(meta["model"]))
    model.params.load_state_dict(state)
    return model, meta
