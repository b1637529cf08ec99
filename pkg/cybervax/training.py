"""Joint optimisation of the vaccinator and neutraliser, and supervised validator training."""
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from cybervax.attacks import (
    DegradationRanges,
    DegradationSpec,
    apply_degradation,
    mask_attack,
    sample_training_transform,
)
from cybervax.config import ConfigSection
from cybervax.exceptions import CheckpointError, ConfigError, DataError, DimensionError, NonFiniteLossError
from cybervax.imaging import FaceMask, blend, mask_tensor
from cybervax.masks import AffineRanges, random_affine, sample_affine_params
from cybervax.metrics import LossBreakdown, LossWeights, composite_loss, distance, psnr, ssim
from cybervax.models import (
    ImmuneSystem,
    InpaintingBaseline,
    UNetConfig,
    Validator,
    forward_neutraliser,
    forward_vaccinator,
    load_immune_system,
    save_baseline,
    save_immune_system,
)
from cybervax.pipeline import neutralise_image, vaccinate_image
from cybervax.storage import CheckpointStorageInterface, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

TRAIN_STATE_CHECKPOINT = "train_state"
LOG_COLUMNS = ("step", "imp", "rev", "val", "total", "timestamp")


@dataclass
class TrainConfig(ConfigSection):
    batch_size: int = 8
    steps: int = 2000
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 500
    validation_every: int = 0
    augment: bool = True
    mask_neutraliser_input: bool = True
    degrade_unvaccinated: bool = False
    affine: AffineRanges = field(default_factory=AffineRanges)
    degradation: DegradationRanges = field(default_factory=DegradationRanges)

    def validate(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.batch_size <= 0 or self.steps < 0 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive and steps non-negative")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"Invalid betas {self.betas}")
        if self.checkpoint_every < 0 or self.validation_every < 0:
            raise ConfigError("checkpoint_every and validation_every must be non-negative")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for section in (self.weights, self.affine, self.degradation):
            section.validate()
        return self


@dataclass
class ValidatorTrainConfig(ConfigSection):
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    jitter_masks: bool = True
    max_imbalance: float = 10.0
    affine: AffineRanges = field(default_factory=AffineRanges)

    def validate(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0:
            raise ConfigError("Validator steps must be non-negative, batch_size and lr positive")
        if self.max_imbalance < 1.0:
            raise ConfigError("max_imbalance must be at least 1")
        self.affine.validate()
        return self


@dataclass
class TrainLogEntry:
    step: int
    imp: float
    rev: float
    val: float
    total: float
    timestamp: str


@dataclass
class TrainLog:
    entries: List[TrainLogEntry] = field(default_factory=list)
    validation: List[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def last_step(self) -> int:
        return self.entries[-1].step if self.entries else 0

    def append(self, step: int, breakdown: LossBreakdown) -> TrainLogEntry:
        if step <= self.last_step:
            raise ValueError(f"Log steps must increase, got {step} after {self.last_step}")
        entry = TrainLogEntry(
            step,
            breakdown.imp,
            breakdown.rev,
            breakdown.val,
            breakdown.total,
            datetime.now(timezone.utc).isoformat(),
        )
        self.entries.append(entry)
        return entry

    def add_validation(self, step: int, metrics: dict):
        self.validation.append({"step": step, **metrics})

    def totals(self) -> List[float]:
        return [e.total for e in self.entries]

    def to_dict(self) -> dict:
        return {"entries": [asdict(e) for e in self.entries], "validation": list(self.validation)}

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainLog":
        return cls(
            [TrainLogEntry(**e) for e in payload.get("entries", [])],
            list(payload.get("validation", [])),
        )

    def write(self, directory: Union[str, Path], name: str = "train_log") -> Tuple[Path, Path]:
        directory = Path(directory)
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for entry in self.entries:
            writer.writerow([getattr(entry, c) for c in LOG_COLUMNS])
        csv_path = atomic_write_text(directory / f"{name}.csv", buffer.getvalue())
        json_path = atomic_write_json(directory / f"{name}.json", self.to_dict())
        return csv_path, json_path


def step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, 1]).generate_state(1)[0])


def batch_indices(count: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    """
    Indices of the batch for a 0-based step, from a per-epoch permutation.

    :param count: Dataset size
    :param batch_size: Batch size
    :param seed: Data order seed
    :param step: 0-based step
    :return: Index tensor
    """
    if count <= 0:
        raise DataError("Cannot draw batches from an empty dataset")
    size = min(batch_size, count)
    per_epoch = count // size
    epoch, position = divmod(step, per_epoch)
    generator = torch.Generator().manual_seed(epoch_seed(seed, epoch))
    order = torch.randperm(count, generator=generator)
    return order[position * size : (position + 1) * size]


def _dataset_tensors(dataset) -> Tuple[torch.Tensor, torch.Tensor]:
    if isinstance(dataset, (tuple, list)):
        images, masks = dataset
    else:
        images, masks = dataset.images(), dataset.masks()
    masks = mask_tensor(masks)
    if masks.dim() == 3:
        masks = masks.unsqueeze(1)
    if images.shape[0] != masks.shape[0] or images.shape[-2:] != masks.shape[-2:]:
        raise DimensionError(
            f"Images {tuple(images.shape)} and masks {tuple(masks.shape)} do not pair up",
            expected=images.shape,
            actual=masks.shape,
        )
    return images.float(), masks.float()


def _device_of(module: nn.Module) -> torch.device:
    return next(module.parameters()).device


def sample_perturbations(
    seed: int, count: int, cfg: TrainConfig
) -> Tuple[list, List[DegradationSpec]]:
    """Per-sample mask misalignment and degradation for one step."""
    seeds = np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=(count, 2))
    affine = [sample_affine_params(int(s[0]), cfg.affine) for s in seeds]
    if cfg.augment:
        degradations = [sample_training_transform(int(s[1]), cfg.degradation) for s in seeds]
    else:
        degradations = [DegradationSpec(seed=int(s[1])) for s in seeds]
    return affine, degradations


def _degrade(images: torch.Tensor, specs: Sequence[DegradationSpec], ranges: DegradationRanges) -> torch.Tensor:
    return torch.stack([apply_degradation(image, spec, ranges) for image, spec in zip(images, specs)])


def compute_losses(
    system: ImmuneSystem,
    images: torch.Tensor,
    masks: Union[FaceMask, torch.Tensor],
    cfg: TrainConfig,
    seed: int,
) -> LossBreakdown:
    """
    Run one forward pass of the training algorithm and return the weighted losses.

    :param system: The immune system
    :param images: ``(B, 3, R, R)`` originals
    :param masks: ``(B, 1, R, R)`` face masks
    :param cfg: Training configuration
    :param seed: Seed for the per-sample perturbations
    :return: The loss breakdown with a differentiable total
    """
    original = images
    masks = mask_tensor(masks)
    affine, degradations = sample_perturbations(seed, original.shape[0], cfg)

    vaccinated = blend(original, forward_vaccinator(system, original, masks), masks)

    misaligned = random_affine(masks, affine).data
    vaccinated_rnd = _degrade(vaccinated, degradations, cfg.degradation)
    if cfg.mask_neutraliser_input:
        vaccinated_rnd = mask_attack(vaccinated_rnd, misaligned)
    neutralised_vaccinated = blend(
        forward_neutraliser(system, vaccinated_rnd, misaligned), vaccinated, misaligned
    )

    unvaccinated = original
    if cfg.degrade_unvaccinated:
        unvaccinated = _degrade(original, degradations, cfg.degradation)
    neutralised_unvaccinated = blend(
        forward_neutraliser(system, mask_attack(unvaccinated, misaligned), misaligned),
        original,
        misaligned,
    )

    return composite_loss(
        original,
        vaccinated,
        neutralised_vaccinated,
        neutralised_unvaccinated,
        1.0 - misaligned,
        cfg.weights,
    )


def train_step(
    system: ImmuneSystem,
    optimizer: torch.optim.Optimizer,
    images: torch.Tensor,
    masks: Union[FaceMask, torch.Tensor],
    cfg: TrainConfig,
    seed: int,
) -> LossBreakdown:
    """
    One optimiser step over both networks on the weighted total loss.

    :param system: The immune system, updated in place
    :param optimizer: Optimiser over both networks
    :param images: ``(B, 3, R, R)`` originals
    :param masks: ``(B, 1, R, R)`` face masks
    :param cfg: Training configuration
    :param seed: Seed for the per-sample perturbations
    :return: The loss breakdown of this step
    """
    system.train()
    device = _device_of(system)
    breakdown = compute_losses(system, images.to(device), mask_tensor(masks).to(device), cfg, seed)
    if not breakdown.is_finite():
        raise NonFiniteLossError(system.step + 1, breakdown.to_dict())

    optimizer.zero_grad()
    breakdown.total_tensor.backward()
    optimizer.step()
    system.step = system.step + 1
    return breakdown


def evaluate_round_trip(system: ImmuneSystem, images: torch.Tensor, masks: torch.Tensor) -> Dict[str, float]:
    """Vaccination PSNR and unattacked neutralisation quality on held-out images."""
    system.eval()
    device = _device_of(system)
    images, masks = images.to(device), masks.to(device)
    vaccinated = vaccinate_image(system, images, masks)
    neutralised = neutralise_image(system, vaccinated, masks)
    with torch.no_grad():
        return {
            "psnr_vaccinated": psnr(vaccinated, images),
            "ssim_neutralised": float(ssim(neutralised, images)),
            "rev": float(distance(neutralised, images)),
        }


class ImmuneSystemTrainer:
    """Drives training with deterministic batches, periodic checkpoints and exact resume."""

    def __init__(
        self,
        dataset,
        cfg: TrainConfig = None,
        unet_config: UNetConfig = None,
        storage: Optional[CheckpointStorageInterface] = None,
        device: Union[str, torch.device] = "cpu",
        validation_dataset=None,
    ):
        self.cfg = (cfg or TrainConfig()).validate()
        self.images, self.masks = _dataset_tensors(dataset)
        self.validation = _dataset_tensors(validation_dataset) if validation_dataset is not None else None
        self.storage = storage
        self.device = torch.device(device)

        with torch.random.fork_rng():
            torch.manual_seed(self.cfg.seed)
            self.system = ImmuneSystem(unet_config or UNetConfig(resolution=self.images.shape[-1]))
        self.system.to(self.device)
        if self.images.shape[-1] != self.system.resolution:
            raise DimensionError(
                f"Dataset resolution {self.images.shape[-1]} does not match the network ({self.system.resolution})",
                expected=(self.system.resolution,),
                actual=(self.images.shape[-1],),
            )
        self.optimizer = self._optimizer()
        self.log = TrainLog()

    def _optimizer(self) -> torch.optim.Optimizer:
        return torch.optim.Adam(self.system.parameters(), lr=self.cfg.lr, betas=self.cfg.betas)

    def batch(self, step: int) -> Tuple[torch.Tensor, torch.Tensor]:
        index = batch_indices(self.images.shape[0], self.cfg.batch_size, self.cfg.seed, step)
        return self.images[index], self.masks[index]

    def resume(self) -> "ImmuneSystemTrainer":
        if self.storage is None:
            raise CheckpointError("Cannot resume without checkpoint storage")
        system, _ = load_immune_system(self.storage)
        state = self.storage.fetch(TRAIN_STATE_CHECKPOINT)
        if state is None:
            raise CheckpointError(f"Missing checkpoint {TRAIN_STATE_CHECKPOINT}", TRAIN_STATE_CHECKPOINT)
        optimizer_state, metadata = state
        if metadata.get("step") != system.step:
            raise CheckpointError(
                f"Training state at step {metadata.get('step')} does not match the model at step {system.step}",
                TRAIN_STATE_CHECKPOINT,
            )

        self.system = system.to(self.device)
        self.optimizer = self._optimizer()
        self.optimizer.load_state_dict(optimizer_state["optimizer"])
        self.log = TrainLog.from_dict(metadata.get("log", {}))
        logger.info(f"Resumed training at step {self.system.step}", extra={"step": self.system.step})
        return self

    def save(self):
        if self.storage is None:
            return
        metrics = self.log.validation[-1] if self.log.validation else {}
        save_immune_system(self.system, self.storage, metrics)
        self.storage.store(
            TRAIN_STATE_CHECKPOINT,
            {"optimizer": self.optimizer.state_dict()},
            {
                "kind": TRAIN_STATE_CHECKPOINT,
                "step": self.system.step,
                "train_config": self.cfg.to_dict(),
                "log": self.log.to_dict(),
            },
        )

    def _snapshot(self, step: int, images: torch.Tensor, masks: torch.Tensor, components: dict) -> Optional[str]:
        if self.storage is None:
            return None
        name = f"nonfinite_step_{step:07d}"
        self.storage.store(
            name,
            {"images": images.cpu(), "masks": masks.cpu(), "model": self.system.state_dict()},
            {"kind": "nonfinite_snapshot", "step": step, "components": components},
        )
        return str(Path(getattr(self.storage, "path", ".")) / f"{name}.pt")

    def run(self, steps: Optional[int] = None) -> Tuple[ImmuneSystem, TrainLog]:
        """
        Train until the step counter reaches ``steps`` (the configured count by default).

        :param steps: Target step count
        :return: The system and its log
        """
        target = self.cfg.steps if steps is None else steps
        logger.info(
            f"Training immune system from step {self.system.step} to {target}",
            extra={"step": self.system.step, "total": target, "samples": self.images.shape[0]},
        )

        while self.system.step < target:
            step = self.system.step
            images, masks = self.batch(step)
            try:
                breakdown = train_step(
                    self.system, self.optimizer, images, masks, self.cfg, step_seed(self.cfg.seed, step)
                )
            except NonFiniteLossError as e:
                e.snapshot_path = self._snapshot(e.step, images, masks, e.components)
                logger.error(f"{e}", extra={"snapshot": e.snapshot_path})
                raise

            self.log.append(self.system.step, breakdown)
            logger.debug(
                f"Step {self.system.step}: total {breakdown.total:.4f}",
                extra={"step": self.system.step, **breakdown.to_dict()},
            )

            if self.validation is not None and self.cfg.validation_every and self.system.step % self.cfg.validation_every == 0:
                metrics = evaluate_round_trip(self.system, *self.validation)
                self.log.add_validation(self.system.step, metrics)
                logger.info(f"Validation at step {self.system.step}: {metrics}", extra={"step": self.system.step})

            if self.cfg.checkpoint_every and self.system.step % self.cfg.checkpoint_every == 0:
                self.save()

        self.save()
        self.system.eval()
        logger.info(f"Finished training at step {self.system.step}", extra={"step": self.system.step})
        return self.system, self.log


def train_immune_system(
    dataset,
    cfg: TrainConfig = None,
    unet_config: UNetConfig = None,
    storage: Optional[CheckpointStorageInterface] = None,
    resume: bool = False,
    device: Union[str, torch.device] = "cpu",
    validation_dataset=None,
) -> Tuple[ImmuneSystem, TrainLog]:
    """
    Train the vaccinator and neutraliser jointly.

    :param dataset: FaceDataset or ``(images, masks)`` tensors
    :param cfg: Training configuration
    :param unet_config: Network configuration
    :param storage: Checkpoint storage, checkpoints are skipped when omitted
    :param resume: Continue from the stored checkpoint
    :param device: Torch device
    :param validation_dataset: Held-out data for periodic round-trip metrics
    :return: The trained system and its log
    """
    trainer = ImmuneSystemTrainer(dataset, cfg, unet_config, storage, device, validation_dataset)
    if resume:
        trainer.resume()
    return trainer.run()


def _validator_examples(
    system, images: torch.Tensor, masks: torch.Tensor, cfg: ValidatorTrainConfig, labels: Optional[Sequence[bool]]
) -> Tuple[torch.Tensor, torch.Tensor]:
    count = images.shape[0]
    if labels is None:
        positive = list(range(count))
        negative = list(range(count))
    else:
        if len(labels) != count:
            raise DataError(f"Got {len(labels)} labels for {count} samples")
        positive = [i for i, label in enumerate(labels) if label]
        negative = [i for i, label in enumerate(labels) if not label]

    if not positive or not negative:
        raise DataError("Validator training needs both vaccinated and unvaccinated examples")
    ratio = max(len(positive), len(negative)) / min(len(positive), len(negative))
    if ratio > cfg.max_imbalance:
        raise DataError(
            f"Class imbalance {len(positive)}:{len(negative)} exceeds {cfg.max_imbalance:g}:1"
        )

    detection_masks = masks
    if cfg.jitter_masks:
        seeds = np.random.default_rng(cfg.seed).integers(0, 2 ** 31 - 1, size=count)
        detection_masks = random_affine(masks, [sample_affine_params(int(s), cfg.affine) for s in seeds]).data

    system.eval()
    index_pos = torch.tensor(positive)
    index_neg = torch.tensor(negative)
    vaccinated = vaccinate_image(system, images[index_pos], masks[index_pos])
    pos = neutralise_image(system, vaccinated, detection_masks[index_pos])
    neg = neutralise_image(system, images[index_neg], detection_masks[index_neg])

    inputs = torch.cat([pos, neg])
    targets = torch.cat([torch.ones(len(positive)), torch.zeros(len(negative))])
    return inputs.detach(), targets


def train_validator(
    validator: Validator,
    system: ImmuneSystem,
    dataset,
    cfg: ValidatorTrainConfig = None,
    labels: Optional[Sequence[bool]] = None,
) -> Validator:
    """
    Train a validator on neutralised vaccinated (label 1) and unvaccinated (label 0) images.

    :param validator: Validator to train in place
    :param system: Frozen immune system
    :param dataset: FaceDataset or ``(images, masks)`` tensors
    :param cfg: Validator training configuration
    :param labels: Which samples contribute a vaccinated example; every sample contributes both when omitted
    :return: The trained validator, with per-step losses in ``history``
    """
    cfg = (cfg or ValidatorTrainConfig()).validate()
    images, masks = _dataset_tensors(dataset)
    device = _device_of(system)
    inputs, targets = _validator_examples(system, images.to(device), masks.to(device), cfg, labels)

    validator.to(device)
    validator.train()
    optimizer = torch.optim.Adam(validator.parameters(), lr=cfg.lr)
    criterion = nn.BCEWithLogitsLoss()
    generator = torch.Generator().manual_seed(cfg.seed)
    targets = targets.to(device)

    logger.info(
        f"Training {validator.config.architecture} validator for {cfg.steps} steps",
        extra={"examples": inputs.shape[0], "steps": cfg.steps},
    )
    for step in range(cfg.steps):
        index = torch.randperm(inputs.shape[0], generator=generator)[: cfg.batch_size].to(device)
        loss = criterion(validator(inputs[index]), targets[index])
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        validator.history.append(float(loss.detach()))
        validator.step = step + 1

    validator.eval()
    with torch.no_grad():
        final = float(criterion(validator(inputs), targets))
    logger.info(f"Validator loss {final:.4f}", extra={"architecture": validator.config.architecture})
    return validator


def train_inpainting_baseline(
    dataset,
    cfg: TrainConfig = None,
    unet_config: UNetConfig = None,
    storage: Optional[CheckpointStorageInterface] = None,
    device: Union[str, torch.device] = "cpu",
) -> Tuple[InpaintingBaseline, TrainLog]:
    """
    Train a neutraliser without a vaccinator, on masked unvaccinated portraits only.

    :param dataset: FaceDataset or ``(images, masks)`` tensors
    :param cfg: Training configuration, only the reversibility weight is used
    :param unet_config: Network configuration
    :param storage: Checkpoint storage
    :param device: Torch device
    :return: The baseline and its log
    """
    cfg = (cfg or TrainConfig()).validate()
    images, masks = _dataset_tensors(dataset)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        baseline = InpaintingBaseline(unet_config or UNetConfig(resolution=images.shape[-1]))
    device = torch.device(device)
    baseline.to(device)
    optimizer = torch.optim.Adam(baseline.parameters(), lr=cfg.lr, betas=cfg.betas)
    log = TrainLog()

    logger.info(f"Training inpainting baseline for {cfg.steps} steps", extra={"total": cfg.steps})
    baseline.train()
    for step in range(cfg.steps):
        index = batch_indices(images.shape[0], cfg.batch_size, cfg.seed, step)
        original, mask = images[index].to(device), masks[index].to(device)
        affine, degradations = sample_perturbations(step_seed(cfg.seed, step), original.shape[0], cfg)
        misaligned = random_affine(mask, affine).data
        attacked = mask_attack(_degrade(original, degradations, cfg.degradation), misaligned)
        neutralised = blend(forward_neutraliser(baseline, attacked, misaligned), original, misaligned)
        rev = distance(neutralised, original)
        if not math.isfinite(float(rev)):
            raise NonFiniteLossError(step + 1, {"rev": float(rev)})

        optimizer.zero_grad()
        (cfg.weights.rev * rev).backward()
        optimizer.step()
        baseline.step = step + 1
        log.append(step + 1, LossBreakdown.from_components(0.0, float(rev), 0.0, cfg.weights))

    baseline.eval()
    if storage is not None:
        save_baseline(baseline, storage, metrics={"rev": log.entries[-1].rev} if log.entries else {})
    return baseline, log
