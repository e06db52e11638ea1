#!/usr/bin/env python3
"""
Training and fine-tuning engine

Three regimes share one training loop:
  - source training: every group trainable, augmentation on
  - fine-tuning: start from pretrained weights, freeze groups per scheme, no augmentation
  - training from scratch: fine-tuning with every group trainable from a fresh model
The no-training baseline is simply the source model used as is.
"""

import copy
import csv
import hashlib
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader

from .config import from_dict, to_dict
from .data import Cohort, PatientVolume, SliceDataset, SliceSample, check_zone, enumerate_slices
from .errors import CheckpointError, ConfigError
from .loss import LossConfig, soft_dice_training_loss
from .metrics import evaluate_cohort
from .model import ModelConfig, ModifiedUNet, build_model, model_dtype, predict_batch

logger = logging.getLogger(__name__)

SCHEMES = ("WG-scheme", "TZ-scheme", "all-trainable", "all-frozen")
ZONE_SCHEMES = {"WG": "WG-scheme", "TZ": "TZ-scheme"}
B_VALUE_POLICIES = ("mean", "first")

CHECKPOINT_FORMAT = "dwi-workbench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class FineTuneScheme:
    """Which parameter groups stay trainable during adaptation"""
    name: str
    trainable_groups: List[str]


def make_scheme(name: str, n_levels: int, freeze_bottleneck: bool = True) -> FineTuneScheme:
    """
    Build a named scheme for a network with n_levels down/up blocks

    WG-scheme trains the up blocks and head. TZ-scheme additionally trains the
    shallowest ceil(L/2) down blocks. The bottleneck is frozen in both unless
    freeze_bottleneck is False.
    """
    if name not in SCHEMES:
        raise ConfigError(f"scheme must be one of {SCHEMES}, got {name!r}")
    downs = [f"Down-{i}" for i in range(1, n_levels + 1)]
    ups = [f"Up-{i}" for i in range(1, n_levels + 1)]
    if name == "all-trainable":
        groups = downs + ["Bottleneck"] + ups + ["Head"]
    elif name == "all-frozen":
        groups = []
    else:
        groups = ups + ["Head"]
        if name == "TZ-scheme":
            groups = downs[:math.ceil(n_levels / 2)] + groups
        if not freeze_bottleneck:
            groups.append("Bottleneck")
    return FineTuneScheme(name=name, trainable_groups=groups)


def scheme_for_zone(zone: str, n_levels: int, freeze_bottleneck: bool = True) -> FineTuneScheme:
    return make_scheme(ZONE_SCHEMES[check_zone(zone)], n_levels, freeze_bottleneck)


@dataclass
class TrainConfig:
    """
    Optimiser and epoch policy for one training run

    Attributes:
        learning_rate, betas, adam_eps: Adam settings
        epochs: Number of passes over the training samples (0 returns the start weights)
        batch_size: Samples per optimiser step
        seed: Shuffle and augmentation seed
        augment: Flips/rotations; only for source-domain training
        loss: Loss family and constants
        zone: WG or TZ
        b_value_policy: How per-b-value soft masks are fused at inference
        deterministic: Single-threaded torch for bit-reproducible runs
    """
    learning_rate: float = 1e-4
    betas: List[float] = field(default_factory=lambda: [0.9, 0.999])
    adam_eps: float = 1e-8
    epochs: int = 25
    batch_size: int = 16
    seed: int = 0
    augment: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    zone: str = "WG"
    b_value_policy: str = "mean"
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if len(self.betas) != 2:
            raise ConfigError(f"betas must have two values, got {self.betas}")
        if self.zone not in ZONE_SCHEMES:
            raise ConfigError(f"zone must be WG or TZ, got {self.zone!r}")
        if self.b_value_policy not in B_VALUE_POLICIES:
            raise ConfigError(f"b_value_policy must be one of {B_VALUE_POLICIES}, got {self.b_value_policy!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_dsc: Optional[float]


@dataclass
class TrainingLog:
    """Per-epoch training loss and validation Dice, plus the epoch whose weights were kept"""
    records: List[EpochRecord] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def to_csv(self, path) -> Path:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_dsc"])
            for record in self.records:
                writer.writerow([
                    record.epoch,
                    repr(record.train_loss),
                    "" if record.val_dsc is None else repr(record.val_dsc),
                ])
        return output

    @classmethod
    def from_csv(cls, path) -> "TrainingLog":
        with open(path, 'r', newline='', encoding='utf-8') as f:
            records = [
                EpochRecord(int(row["epoch"]), float(row["train_loss"]),
                            float(row["val_dsc"]) if row["val_dsc"] else None)
                for row in csv.DictReader(f)
            ]
        return cls(records=records)


@dataclass
class SchemeView:
    """Result of apply_scheme: trainable and frozen parameters by name"""
    trainable: Dict[str, torch.nn.Parameter]
    frozen: Dict[str, torch.nn.Parameter]

    @property
    def parameters(self) -> List[torch.nn.Parameter]:
        return list(self.trainable.values())


def apply_scheme(model: ModifiedUNet, scheme: FineTuneScheme) -> SchemeView:
    """
    Mark parameters trainable or frozen according to the scheme

    Frozen parameters get requires_grad=False and are never handed to the optimiser.

    Raises:
        ConfigError: scheme names a group the model does not have
    """
    groups = model.parameter_groups()
    unknown = sorted(set(scheme.trainable_groups) - set(groups))
    if unknown:
        raise ConfigError(f"scheme {scheme.name!r} names unknown group(s): {', '.join(unknown)}")
    trainable, frozen = {}, {}
    for group_name, params in groups.items():
        is_trainable = group_name in scheme.trainable_groups
        for name, param in params.items():
            param.requires_grad_(is_trainable)
            (trainable if is_trainable else frozen)[name] = param
    return SchemeView(trainable=trainable, frozen=frozen)


def make_optimizer(view: SchemeView, config: TrainConfig) -> Optional[torch.optim.Optimizer]:
    """Adam over the trainable parameters only (None when everything is frozen)"""
    if not view.parameters:
        return None
    return torch.optim.Adam(view.parameters, lr=config.learning_rate,
                            betas=tuple(config.betas), eps=config.adam_eps)


@contextmanager
def torch_threads(config: TrainConfig):
    """Single-threaded torch for deterministic configs; the previous thread count is restored on exit"""
    previous = torch.get_num_threads()
    if config.deterministic:
        torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


def predict_volume(model: ModifiedUNet,
                   patient: PatientVolume,
                   b_value_policy: str = "mean",
                   threshold: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predict one mask per slice

    Every (slice, b-value) image is segmented independently; the soft masks of a
    slice are then fused per policy ('mean' over b-values or the 'first' b-value)
    and binarised.

    Returns:
        (soft masks float32, binary masks uint8), both n_slices × H × W
    """
    if b_value_policy not in B_VALUE_POLICIES:
        raise ValueError(f"b_value_policy must be one of {B_VALUE_POLICIES}, got {b_value_policy!r}")
    n_slices, n_b, height, width = patient.images.shape
    if (height, width) != (model.config.height, model.config.width):
        raise ValueError(f"{patient.patient_id}: image size {(height, width)} does not match model "
                         f"{(model.config.height, model.config.width)}")
    if b_value_policy == "first":
        soft = predict_batch(model, patient.images[:, 0])
    else:
        flat = predict_batch(model, patient.images.reshape(n_slices * n_b, height, width))
        soft = flat.reshape(n_slices, n_b, height, width).mean(axis=1)
    soft = soft.astype(np.float32)
    return soft, (soft > threshold).astype(np.uint8)


def predict_cohort(model: ModifiedUNet, cohort: Cohort, b_value_policy: str = "mean",
                   threshold: float = 0.5) -> Dict[str, np.ndarray]:
    """Binary predictions for every patient of a cohort"""
    return {p.patient_id: predict_volume(model, p, b_value_policy, threshold)[1] for p in cohort.patients}


def validation_dsc(model: ModifiedUNet, cohort: Cohort, zone: str, b_value_policy: str = "mean") -> float:
    """Mean Dice over prostate-containing validation slices (0 when there are none)"""
    report = evaluate_cohort(predict_cohort(model, cohort, b_value_policy), cohort, zone)
    return report.mean_dsc if report.mean_dsc is not None else 0.0


def _fit(model: ModifiedUNet,
         train: Cohort,
         val: Optional[Cohort],
         config: TrainConfig,
         scheme: FineTuneScheme,
         label: str) -> TrainingLog:
    """
    Shared training loop

    With a validation cohort the weights of the epoch with the best validation
    Dice are kept (earliest epoch on ties); without one the last epoch is kept.
    """
    samples = enumerate_slices(train, config.zone)
    if not samples:
        raise ValueError(f"{label}: empty training set")
    with torch_threads(config):
        return _train_epochs(model, samples, val, config, scheme, label)


def _train_epochs(model: ModifiedUNet,
                  samples: List[SliceSample],
                  val: Optional[Cohort],
                  config: TrainConfig,
                  scheme: FineTuneScheme,
                  label: str) -> TrainingLog:
    view = apply_scheme(model, scheme)
    optimizer = make_optimizer(view, config)
    dtype = model_dtype(model)

    dataset = SliceDataset(samples, config.zone, augment=config.augment, seed=config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    loader = DataLoader(dataset, batch_size=config.batch_size, shuffle=True, generator=generator, num_workers=0)

    log = TrainingLog()
    best_state = copy.deepcopy(model.state_dict())
    best_dsc = -math.inf
    for epoch in range(1, config.epochs + 1):
        dataset.set_epoch(epoch)
        model.train()
        total_loss, n_seen = 0.0, 0
        for step, (images, masks) in enumerate(loader):
            probabilities = model(images.to(dtype))
            loss = soft_dice_training_loss(probabilities, masks.to(dtype), config.loss)
            if optimizer is not None:
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
            total_loss += loss.item() * len(images)
            n_seen += len(images)
            logger.debug(f"  {label} epoch {epoch} step {step}: loss {loss.item():.4f}")
        train_loss = total_loss / n_seen

        val_dsc = None
        if val is not None and len(val):
            val_dsc = validation_dsc(model, val, config.zone, config.b_value_policy)
            if val_dsc > best_dsc:
                best_dsc = val_dsc
                best_state = copy.deepcopy(model.state_dict())
                log.best_epoch = epoch
        else:
            best_state = copy.deepcopy(model.state_dict())
            log.best_epoch = epoch
        log.records.append(EpochRecord(epoch, train_loss, val_dsc))
        val_text = "-" if val_dsc is None else f"{val_dsc:.4f}"
        logger.info(f"  {label} epoch {epoch}/{config.epochs}: train loss {train_loss:.4f}, val DSC {val_text}")

    model.load_state_dict(best_state)
    model.eval()
    return log


def train_source(model: ModifiedUNet,
                 source_train: Cohort,
                 source_val: Optional[Cohort],
                 config: TrainConfig) -> Tuple[ModifiedUNet, TrainingLog]:
    """
    Train every parameter group on the source domain

    Args:
        model: Freshly built network (trained in place)
        source_train: Training patients
        source_val: Validation patients for best-epoch selection
        config: Must have augment=True and epochs >= 1

    Returns:
        (model with best-epoch weights, training log)
    """
    if config.epochs < 1:
        raise ConfigError("source training needs epochs >= 1")
    if not config.augment:
        raise ConfigError("source-domain training runs with augmentation enabled")
    scheme = make_scheme("all-trainable", model.config.n_levels)
    log = _fit(model, source_train, source_val, config, scheme, label="source")
    logger.info(f"✓ Source model trained (best epoch {log.best_epoch})")
    return model, log


def finetune(pretrained: ModifiedUNet,
             target_subset: Cohort,
             scheme: FineTuneScheme,
             config: TrainConfig,
             target_val: Optional[Cohort] = None) -> Tuple[ModifiedUNet, TrainingLog]:
    """
    Adapt a pretrained network to the target domain

    The pretrained model is not modified; a copy is trained with the scheme's
    frozen groups excluded from the optimiser.

    Args:
        pretrained: Source-domain network
        target_subset: Fine-tuning patients
        scheme: Trainable groups
        config: Must have augment=False
        target_val: Optional validation patients (last epoch kept when absent)

    Returns:
        (fine-tuned model, training log)
    """
    if config.augment:
        raise ConfigError("target-domain fine-tuning runs without augmentation")
    model = copy.deepcopy(pretrained)
    if config.epochs == 0:
        model.eval()
        return model, TrainingLog()
    log = _fit(model, target_subset, target_val, config, scheme, label=scheme.name)
    return model, log


def train_from_scratch(model_config: ModelConfig,
                       target_subset: Cohort,
                       config: TrainConfig,
                       model_seed: int = 0,
                       target_val: Optional[Cohort] = None) -> Tuple[ModifiedUNet, TrainingLog]:
    """Fine-tuning with every group trainable, starting from a fresh network"""
    model, _ = build_model(model_config, model_seed)
    return finetune(model, target_subset, make_scheme("all-trainable", model_config.n_levels), config, target_val)


# -------------------------------------------------------------------------
# Checkpoints
# -------------------------------------------------------------------------

def _state_digest(groups: Dict[str, Dict[str, torch.Tensor]]) -> str:
    digest = hashlib.sha256()
    for group_name in sorted(groups):
        for name in sorted(groups[group_name]):
            tensor = groups[group_name][name].contiguous()
            digest.update(f"{group_name}/{name}/{tensor.dtype}/{tuple(tensor.shape)}".encode())
            digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(model: ModifiedUNet, path, extra: Optional[Dict] = None) -> Path:
    """
    Save weights grouped by parameter group, with config echo, format version and digest

    Args:
        model: Network to save
        path: Output file
        extra: Additional JSON-compatible metadata (e.g. zone, seed)

    Returns:
        Path of the checkpoint
    """
    groups = {
        group_name: {name: param.detach().cpu().clone() for name, param in params.items()}
        for group_name, params in model.parameter_groups().items()
    }
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "model_config": to_dict(model.config),
        "groups": groups,
        "sha256": _state_digest(groups),
        "extra": dict(extra or {}),
    }
    output = Path(path)
    output.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, output)
    return output


def load_checkpoint(path) -> ModifiedUNet:
    """
    Load a checkpoint written by save_checkpoint

    Raises:
        CheckpointError: unreadable file, wrong format version, or digest mismatch
    """
    checkpoint_path = Path(path)
    if not checkpoint_path.is_file():
        raise CheckpointError(f"{checkpoint_path}: checkpoint not found")
    try:
        payload = torch.load(checkpoint_path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"{checkpoint_path}: corrupt checkpoint ({type(e).__name__}: {e})")
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{checkpoint_path}: not a workbench checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{checkpoint_path}: format version {payload.get('format_version')} != supported {CHECKPOINT_VERSION}"
        )
    groups = payload.get("groups", {})
    if _state_digest(groups) != payload.get("sha256"):
        raise CheckpointError(f"{checkpoint_path}: integrity check failed (digest mismatch)")

    try:
        config = from_dict(ModelConfig, payload.get("model_config", {}))
    except ConfigError as e:
        raise CheckpointError(f"{checkpoint_path}: invalid model config ({e})")
    model, _ = build_model(config, seed=0)
    state = {name: tensor for params in groups.values() for name, tensor in params.items()}
    if not state:
        raise CheckpointError(f"{checkpoint_path}: checkpoint holds no weights")
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{checkpoint_path}: weights do not fit the stored config ({e})")
    model.eval()
    return model


def checkpoint_metadata(path) -> Dict:
    """The 'extra' metadata stored with a checkpoint"""
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    return dict(payload.get("extra", {}))


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    """Copy of a TrainConfig with fields replaced (nested loss via loss_x=...)"""
    loss_x = changes.pop("loss_x", None)
    updated = replace(config, **changes)
    if loss_x is not None:
        updated = replace(updated, loss=replace(updated.loss, x=loss_x))
    return updated
