"""Face masking, photometric degradations and a toy face-swap attacker."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torchvision.transforms.functional as TF

from cybervax.config import ConfigSection
from cybervax.exceptions import CheckpointError, ConfigError, DataError, DimensionError, ParameterError
from cybervax.imaging import FaceMask, ImageTensor, blend, check_image, clamp_unit, mask_tensor
from cybervax.metrics import mae
from cybervax.models import save_module
from cybervax.storage import CheckpointStorageInterface

logger = logging.getLogger(__name__)

MaskLike = Union[FaceMask, torch.Tensor]

FACESWAP_CHECKPOINT = "faceswap"


class DegradationKind(Enum):
    NONE = "none"
    BLUR = "blur"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    SATURATION = "saturation"
    HUE = "hue"
    HYBRID = "hybrid"


FACTOR_KINDS = (DegradationKind.BRIGHTNESS, DegradationKind.CONTRAST, DegradationKind.SATURATION)
SINGLE_KINDS = (DegradationKind.BLUR,) + FACTOR_KINDS + (DegradationKind.HUE,)

LEGAL_RANGES = {
    DegradationKind.NONE: (0.0, 0.0),
    DegradationKind.BLUR: (0.0, 8.0),
    DegradationKind.BRIGHTNESS: (0.0, 2.0),
    DegradationKind.CONTRAST: (0.0, 2.0),
    DegradationKind.SATURATION: (0.0, 2.0),
    DegradationKind.HUE: (-0.5, 0.5),
    DegradationKind.HYBRID: (0.0, 1.0),
}

NEUTRAL_MAGNITUDES = {
    DegradationKind.NONE: 0.0,
    DegradationKind.BLUR: 0.0,
    DegradationKind.BRIGHTNESS: 1.0,
    DegradationKind.CONTRAST: 1.0,
    DegradationKind.SATURATION: 1.0,
    DegradationKind.HUE: 0.0,
    DegradationKind.HYBRID: 0.0,
}


@dataclass
class DegradationSpec:
    kind: DegradationKind = DegradationKind.NONE
    magnitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        try:
            self.kind = DegradationKind(self.kind)
        except ValueError as e:
            raise ParameterError(f"Unknown degradation kind {self.kind}") from e
        self.magnitude = float(self.magnitude)
        low, high = LEGAL_RANGES[self.kind]
        if self.kind != DegradationKind.NONE and not low <= self.magnitude <= high:
            raise ParameterError(
                f"{self.kind.value} magnitude {self.magnitude} is outside [{low}, {high}]"
            )

    @classmethod
    def neutral(cls, kind: DegradationKind, seed: int = 0) -> "DegradationSpec":
        kind = DegradationKind(kind)
        return cls(kind, NEUTRAL_MAGNITUDES[kind], seed)

    def is_neutral(self) -> bool:
        return self.kind == DegradationKind.NONE or self.magnitude == NEUTRAL_MAGNITUDES[self.kind]

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "magnitude": self.magnitude, "seed": self.seed}


@dataclass
class DegradationRanges(ConfigSection):
    """Magnitude ranges for training-time sampling and for evaluation sweeps."""

    train_blur: Tuple[float, float] = (0.0, 1.0)
    train_factor: Tuple[float, float] = (0.8, 1.2)
    train_hue: Tuple[float, float] = (-0.05, 0.05)
    sweep_blur: Tuple[float, float] = (0.0, 4.0)
    sweep_factor: Tuple[float, float] = (0.25, 1.75)
    sweep_hue: Tuple[float, float] = (-0.5, 0.5)
    training_kinds: Tuple[str, ...] = ("none", "blur", "brightness", "contrast", "saturation", "hue")
    sweep_kinds: Tuple[str, ...] = ("blur", "brightness", "contrast", "hue")
    sweep_points: int = 7

    def validate(self):
        for name in ("train_blur", "train_factor", "train_hue", "sweep_blur", "sweep_factor", "sweep_hue"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2 or value[0] > value[1]:
                raise ConfigError(f"{name} must be an increasing pair, got {value}")
            setattr(self, name, value)

        for name, kind in (
            ("blur", DegradationKind.BLUR),
            ("factor", DegradationKind.BRIGHTNESS),
            ("hue", DegradationKind.HUE),
        ):
            legal_low, legal_high = LEGAL_RANGES[kind]
            for prefix in ("train", "sweep"):
                low, high = getattr(self, f"{prefix}_{name}")
                if low < legal_low or high > legal_high:
                    raise ConfigError(
                        f"{prefix}_{name} ({low}, {high}) exceeds the legal range [{legal_low}, {legal_high}]"
                    )

        try:
            self.training_kinds = tuple(DegradationKind(k).value for k in self.training_kinds)
            self.sweep_kinds = tuple(DegradationKind(k).value for k in self.sweep_kinds)
        except ValueError as e:
            raise ConfigError(f"Unknown degradation kind - {e}") from e
        if not self.training_kinds:
            raise ConfigError("training_kinds must not be empty")
        if self.sweep_points < 2:
            raise ConfigError("sweep_points must be at least 2")
        return self

    def _range(self, prefix: str, kind: DegradationKind) -> Tuple[float, float]:
        kind = DegradationKind(kind)
        if kind == DegradationKind.BLUR:
            return getattr(self, f"{prefix}_blur")
        if kind in FACTOR_KINDS:
            return getattr(self, f"{prefix}_factor")
        if kind == DegradationKind.HUE:
            return getattr(self, f"{prefix}_hue")
        if kind == DegradationKind.HYBRID:
            return 0.0, 1.0
        return 0.0, 0.0

    def training_range(self, kind: DegradationKind) -> Tuple[float, float]:
        return self._range("train", kind)

    def sweep_range(self, kind: DegradationKind) -> Tuple[float, float]:
        return self._range("sweep", kind)

    def sweep_magnitudes(self, kind: DegradationKind) -> List[float]:
        low, high = self.sweep_range(kind)
        return [float(v) for v in np.linspace(low, high, self.sweep_points)]


def mask_attack(image: ImageTensor, mask: MaskLike) -> ImageTensor:
    """
    Zero the face region: ``image * (1 - mask)``.

    :param image: ``(C, H, W)`` or ``(B, C, H, W)`` image
    :param mask: Matching face mask
    :return: The masked image
    """
    weights = mask_tensor(mask)
    if weights.shape[-2:] != image.shape[-2:]:
        raise DimensionError(
            f"Mask {tuple(weights.shape[-2:])} does not match image {tuple(image.shape[-2:])}",
            expected=image.shape[-2:],
            actual=weights.shape[-2:],
        )
    return image * (1.0 - weights)


def _blur_kernel_size(sigma: float, height: int, width: int) -> int:
    # reflect padding needs the half-width below the image side
    size = 2 * math.ceil(3 * sigma) + 1
    return max(3, min(size, 2 * min(height, width) - 1))


def _adjust_contrast(image: ImageTensor, factor: float) -> ImageTensor:
    mean = image.mean(dim=(-2, -1), keepdim=True)
    return mean + factor * (image - mean)


def hybrid_components(spec: DegradationSpec, ranges: DegradationRanges = None) -> List[DegradationSpec]:
    """One degradation of every single kind, pushed ``magnitude`` of the way to a training-range edge."""
    ranges = ranges or DegradationRanges()
    rng = np.random.default_rng(spec.seed)
    components = []
    for kind in SINGLE_KINDS:
        low, high = ranges.training_range(kind)
        neutral = NEUTRAL_MAGNITUDES[kind]
        if kind == DegradationKind.BLUR:
            edge = high
        else:
            edge = high if rng.random() < 0.5 else low
        components.append(DegradationSpec(kind, neutral + spec.magnitude * (edge - neutral), spec.seed))
    return components


def apply_degradation(
    image: ImageTensor, spec: DegradationSpec, ranges: DegradationRanges = None
) -> ImageTensor:
    """
    Apply a photometric degradation.

    Brightness scales about 0, contrast about the per-channel mean and saturation
    about the grayscale image. Hue rotates the hue circle by a fraction of a turn.

    :param image: ``(3, H, W)`` or ``(B, 3, H, W)`` image in [0, 1]
    :param spec: The degradation
    :param ranges: Ranges used to expand a hybrid degradation
    :return: The degraded image, clamped to [0, 1]
    """
    check_image(image)
    if spec.is_neutral():
        return image.clone()

    kind = spec.kind
    if kind == DegradationKind.HYBRID:
        out = image
        for component in hybrid_components(spec, ranges):
            out = apply_degradation(out, component, ranges)
        return out
    if kind == DegradationKind.BLUR:
        height, width = image.shape[-2:]
        size = _blur_kernel_size(spec.magnitude, height, width)
        out = TF.gaussian_blur(image, kernel_size=[size, size], sigma=[spec.magnitude, spec.magnitude])
    elif kind == DegradationKind.BRIGHTNESS:
        out = TF.adjust_brightness(image, spec.magnitude)
    elif kind == DegradationKind.CONTRAST:
        out = _adjust_contrast(image, spec.magnitude)
    elif kind == DegradationKind.SATURATION:
        out = TF.adjust_saturation(image, spec.magnitude)
    else:
        out = TF.adjust_hue(image, spec.magnitude)

    return clamp_unit(out)


def sample_training_transform(seed: int, ranges: DegradationRanges = None) -> DegradationSpec:
    """
    Draw a random training degradation: a uniform kind and a uniform magnitude in its training range.

    :param seed: Sampling seed
    :param ranges: Magnitude ranges
    :return: The degradation
    """
    ranges = ranges or DegradationRanges()
    rng = np.random.default_rng(seed)
    kind = DegradationKind(ranges.training_kinds[int(rng.integers(len(ranges.training_kinds)))])
    if kind == DegradationKind.NONE:
        return DegradationSpec(kind, 0.0, seed)
    low, high = ranges.training_range(kind)
    return DegradationSpec(kind, float(rng.uniform(low, high)), seed)


@dataclass
class FaceSwapConfig(ConfigSection):
    resolution: int = 64
    widths: Tuple[int, ...] = (64, 128, 256)
    latent_channels: int = 256
    steps: int = 500
    batch_size: int = 8
    lr: float = 5e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    frames: int = 32
    min_frames: int = 4
    seed: int = 0

    def validate(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.betas = tuple(float(b) for b in self.betas)
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigError("Face-swap widths must be positive")
        if self.resolution % (2 ** len(self.widths)) != 0:
            raise ConfigError(
                f"Resolution {self.resolution} is not divisible by 2^{len(self.widths)}"
            )
        if self.steps < 0 or min(self.batch_size, self.lr, self.min_frames, self.frames) <= 0:
            raise ConfigError("Face-swap steps must be non-negative; batch_size, lr, frames and min_frames positive")
        return self

    def latent_shape(self) -> Tuple[int, int, int]:
        side = self.resolution // (2 ** len(self.widths))
        return self.latent_channels, side, side


def _conv(in_channels: int, out_channels: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 5, stride=2, padding=2), nn.LeakyReLU(0.1)
    )


def _upscale(in_channels: int, out_channels: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels * 4, 3, padding=1),
        nn.LeakyReLU(0.1),
        nn.PixelShuffle(2),
    )


class FaceSwapDecoder(nn.Module):
    def __init__(self, config: FaceSwapConfig):
        super().__init__()
        widths = list(reversed(config.widths))
        layers = []
        channels = config.latent_channels
        for width in widths:
            layers.append(_upscale(channels, width))
            channels = width
        layers += [nn.Conv2d(channels, 3, 5, padding=2), nn.Sigmoid()]
        self.layers = nn.Sequential(*layers)

    def forward(self, z):
        return self.layers(z)


class FaceSwapModel(nn.Module):
    """Shared encoder with one decoder per identity."""

    def __init__(self, config: FaceSwapConfig = None, identities: Tuple[str, str] = ("A", "B")):
        super().__init__()
        self.config = (config or FaceSwapConfig()).validate()
        if len(identities) != 2 or identities[0] == identities[1]:
            raise ParameterError(f"Need two distinct identities, got {identities}")
        self.identities = tuple(identities)

        layers = []
        channels = 3
        for width in self.config.widths:
            layers.append(_conv(channels, width))
            channels = width
        layers.append(nn.Conv2d(channels, self.config.latent_channels, 1))
        self.encoder = nn.Sequential(*layers)
        self.decoders = nn.ModuleDict(
            {identity: FaceSwapDecoder(self.config) for identity in self.identities}
        )
        self.step = 0
        self.history: List[Dict[str, float]] = []

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def decoder(self, identity: str) -> nn.Module:
        if identity not in self.decoders:
            raise ParameterError(f"Unknown identity {identity}, known: {list(self.identities)}")
        return self.decoders[identity]

    def reconstruct(self, image: ImageTensor, identity: str) -> ImageTensor:
        return self.decoder(identity)(self.encoder(image))


def _as_frames(frames, resolution: int) -> torch.Tensor:
    if hasattr(frames, "images"):
        frames = frames.images()
    frames = torch.as_tensor(frames, dtype=torch.float32)
    if frames.dim() == 3:
        frames = frames.unsqueeze(0)
    check_image(frames, resolution)
    return frames


def build_faceswap(config: FaceSwapConfig = None, identities: Tuple[str, str] = ("A", "B")) -> FaceSwapModel:
    config = (config or FaceSwapConfig()).validate()
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        return FaceSwapModel(config, identities)


def reconstruction_error(model: FaceSwapModel, frames, identity: str) -> float:
    frames = _as_frames(frames, model.resolution)
    with torch.no_grad():
        return float(mae(model.reconstruct(frames, identity), frames))


def train_faceswap(
    frames_a,
    frames_b,
    config: FaceSwapConfig = None,
    identities: Tuple[str, str] = ("A", "B"),
) -> FaceSwapModel:
    """
    Train the shared-encoder autoencoder on frames of two identities.

    :param frames_a: ``(N, 3, R, R)`` frames of the first identity, or a dataset
    :param frames_b: Frames of the second identity
    :param config: Face-swap configuration
    :param identities: Names of the two identities
    :return: The trained model, with per-step losses in ``history``
    """
    config = (config or FaceSwapConfig()).validate()
    frames = {
        identities[0]: _as_frames(frames_a, config.resolution),
        identities[1]: _as_frames(frames_b, config.resolution),
    }
    for identity, stack in frames.items():
        if stack.shape[0] < config.min_frames:
            raise DataError(
                f"Identity {identity} has {stack.shape[0]} frames, at least {config.min_frames} are required"
            )

    model = build_faceswap(config, identities)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    generator = torch.Generator().manual_seed(config.seed)

    logger.info(
        f"Training face-swap model for {config.steps} steps",
        extra={"identities": list(identities), "steps": config.steps},
    )
    for step in range(config.steps):
        losses = {}
        total = 0.0
        for identity, stack in frames.items():
            index = torch.randint(stack.shape[0], (min(config.batch_size, stack.shape[0]),), generator=generator)
            batch = stack[index]
            loss = mae(model.reconstruct(batch, identity), batch)
            losses[identity] = float(loss.detach())
            total = total + loss

        optimizer.zero_grad()
        total.backward()
        optimizer.step()
        model.step = step + 1
        model.history.append(losses)
        logger.debug(f"Face-swap step {step + 1}: {losses}", extra={"step": step + 1})

    model.eval()
    return model


def faceswap_attack(
    model: FaceSwapModel, image: ImageTensor, mask: MaskLike, target: str
) -> ImageTensor:
    """
    Swap the face to the target identity and blend it into the source frame.

    The blend weight is the mask inside its binary face region and 0 elsewhere, so
    pixels outside the thresholded mask are never modified.

    :param model: Trained face-swap model
    :param image: Frame of the other identity
    :param mask: Face mask of the frame
    :param target: Identity whose decoder renders the face
    :return: The infected frame
    """
    decoder = model.decoder(target)
    check_image(image, model.resolution)
    batched = image.unsqueeze(0) if image.dim() == 3 else image
    with torch.no_grad():
        swapped = decoder(model.encoder(batched))
    swapped = swapped.squeeze(0) if image.dim() == 3 else swapped

    weights = mask_tensor(mask)
    weights = torch.where(weights >= 0.5, weights, torch.zeros_like(weights))
    return blend(swapped, image, weights)


def save_faceswap(model: FaceSwapModel, storage: CheckpointStorageInterface, extra: Optional[dict] = None):
    metrics = dict(model.history[-1]) if model.history else {}
    save_module(
        storage,
        FACESWAP_CHECKPOINT,
        model,
        "faceswap",
        metrics,
        {"identities": list(model.identities), **(extra or {})},
    )


def load_faceswap(storage: CheckpointStorageInterface) -> Tuple[FaceSwapModel, dict]:
    state, metadata = storage.require(FACESWAP_CHECKPOINT)
    if metadata.get("kind") != "faceswap":
        raise CheckpointError(
            f"Checkpoint {FACESWAP_CHECKPOINT} holds a {metadata.get('kind')}, expected faceswap",
            FACESWAP_CHECKPOINT,
        )
    model = FaceSwapModel(FaceSwapConfig.from_dict(metadata["config"]), tuple(metadata["identities"]))
    try:
        model.load_state_dict(state["model"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"Face-swap checkpoint does not match its config - {e}", FACESWAP_CHECKPOINT) from e
    model.step = int(metadata.get("step", 0))
    model.eval()
    return model, metadata
