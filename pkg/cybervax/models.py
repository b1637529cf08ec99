import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from cybervax.config import ConfigSection
from cybervax.exceptions import CheckpointError, ConfigError, DimensionError
from cybervax.imaging import FaceMask, ImageTensor, check_image, clamp_unit, mask_tensor
from cybervax.storage import CheckpointStorageInterface

logger = logging.getLogger(__name__)

IMMUNE_SYSTEM_CHECKPOINT = "immune_system"


@dataclass
class UNetConfig(ConfigSection):
    resolution: int = 64
    in_channels: int = 4
    out_channels: int = 3
    base_width: int = 32
    channel_mult: Tuple[int, ...] = (1, 2, 2, 4)
    res_blocks_per_level: int = 3
    attention_resolutions: Tuple[int, ...] = (4, 8, 16)
    depth: int = 4
    head_channels: int = 32
    dropout: float = 0.0

    def validate(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.attention_resolutions = tuple(sorted(int(r) for r in self.attention_resolutions))

        if min(self.resolution, self.base_width, self.depth, self.res_blocks_per_level) <= 0:
            raise ConfigError("resolution, base_width, depth and res_blocks_per_level must be positive")
        if self.resolution % (2 ** self.depth) != 0:
            raise ConfigError(
                f"Resolution {self.resolution} is not divisible by 2^{self.depth}"
            )
        if len(self.channel_mult) != self.depth:
            raise ConfigError(
                f"channel_mult {self.channel_mult} needs one entry per level ({self.depth})"
            )
        unknown = set(self.attention_resolutions) - set(self.feature_sizes())
        if unknown:
            raise ConfigError(
                f"Attention resolutions {sorted(unknown)} do not occur in the network"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        return self

    def feature_sizes(self) -> List[int]:
        return [self.resolution // (2 ** level) for level in range(self.depth + 1)]


class ValidatorArchitecture(Enum):
    MLP = "mlp"
    SMALL_CNN = "small_cnn"


@dataclass
class ValidatorConfig(ConfigSection):
    architecture: str = ValidatorArchitecture.MLP.value
    resolution: int = 64
    hidden_sizes: Tuple[int, ...] = (256, 64)
    conv_channels: Tuple[int, ...] = (8, 16, 32)

    def validate(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        try:
            ValidatorArchitecture(self.architecture)
        except ValueError as e:
            raise ConfigError(f"Unknown validator architecture {self.architecture}") from e
        if self.resolution <= 0 or any(h <= 0 for h in self.hidden_sizes + self.conv_channels):
            raise ConfigError("Validator sizes must be positive")
        if self.architecture == ValidatorArchitecture.SMALL_CNN.value:
            if self.resolution % (2 ** len(self.conv_channels)) != 0:
                raise ConfigError(
                    f"Resolution {self.resolution} is not divisible by 2^{len(self.conv_channels)}"
                )
        return self


def _num_groups(channels: int) -> int:
    return math.gcd(32, channels)


class ResBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, dropout: float = 0.0):
        super().__init__()
        self.in_layers = nn.Sequential(
            nn.GroupNorm(_num_groups(in_channels), in_channels),
            nn.SiLU(),
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
        )
        self.out_layers = nn.Sequential(
            nn.GroupNorm(_num_groups(out_channels), out_channels),
            nn.SiLU(),
            nn.Dropout(dropout),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
        )
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x):
        return self.skip(x) + self.out_layers(self.in_layers(x))


class AttentionBlock(nn.Module):
    """Multi-head self-attention over all spatial positions of a feature map."""

    def __init__(self, channels: int, resolution: int, head_channels: int = 32):
        super().__init__()
        self.resolution = resolution
        if channels % head_channels == 0 and channels >= head_channels:
            self.num_heads = channels // head_channels
        else:
            self.num_heads = 1
        self.norm = nn.GroupNorm(_num_groups(channels), channels)
        self.qkv = nn.Conv1d(channels, channels * 3, 1)
        self.proj = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        batch, channels, height, width = x.shape
        flat = x.reshape(batch, channels, height * width)
        qkv = self.qkv(self.norm(flat))
        head_dim = channels // self.num_heads
        q, k, v = qkv.reshape(batch * self.num_heads, 3 * head_dim, -1).split(head_dim, dim=1)
        scale = 1.0 / math.sqrt(math.sqrt(head_dim))
        weights = torch.einsum("bct,bcs->bts", q * scale, k * scale)
        weights = torch.softmax(weights, dim=-1)
        attended = torch.einsum("bts,bcs->bct", weights, v).reshape(batch, channels, -1)
        return x + self.proj(attended).reshape(batch, channels, height, width)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    """Residual U-Net with self-attention at the configured feature-map sizes.

    Input is the RGB image with the mask concatenated as a fourth channel; the output
    passes through a sigmoid so it is already an image in [0, 1].
    """

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config.validate()
        widths = [config.base_width * m for m in config.channel_mult]
        sizes = config.feature_sizes()
        attention = set(config.attention_resolutions)

        self.in_conv = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)

        self.encoder = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        channels = widths[0]
        for level, width in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(config.res_blocks_per_level):
                blocks.append(self._block(channels, width, sizes[level], attention))
                channels = width
            self.encoder.append(blocks)
            self.downsamples.append(Downsample(channels))

        bottleneck = sizes[-1]
        self.middle = nn.ModuleList(
            [
                ResBlock(channels, channels, config.dropout),
                AttentionBlock(channels, bottleneck, config.head_channels)
                if bottleneck in attention
                else nn.Identity(),
                ResBlock(channels, channels, config.dropout),
            ]
        )

        self.upsamples = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in reversed(range(config.depth)):
            width = widths[level]
            self.upsamples.append(Upsample(channels))
            blocks = nn.ModuleList()
            for index in range(config.res_blocks_per_level):
                in_channels = channels + width if index == 0 else width
                blocks.append(self._block(in_channels, width, sizes[level], attention))
            self.decoder.append(blocks)
            channels = width

        self.out = nn.Sequential(
            nn.GroupNorm(_num_groups(channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, config.out_channels, 3, padding=1),
        )

    def _block(self, in_channels: int, out_channels: int, size: int, attention: set) -> nn.Module:
        layers = [ResBlock(in_channels, out_channels, self.config.dropout)]
        if size in attention:
            layers.append(AttentionBlock(out_channels, size, self.config.head_channels))
        return nn.Sequential(*layers)

    def forward(self, x):
        h = self.in_conv(x)
        skips = []
        for blocks, downsample in zip(self.encoder, self.downsamples):
            for block in blocks:
                h = block(h)
            skips.append(h)
            h = downsample(h)

        for layer in self.middle:
            h = layer(h)

        for upsample, blocks in zip(self.upsamples, self.decoder):
            h = upsample(h)
            h = torch.cat([h, skips.pop()], dim=1)
            for block in blocks:
                h = block(h)

        return torch.sigmoid(self.out(h))

    def attention_sizes(self) -> List[int]:
        return sorted({m.resolution for m in self.modules() if isinstance(m, AttentionBlock)})


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class ImmuneSystem(nn.Module):
    """A paired vaccinator and neutraliser sharing one architecture."""

    def __init__(self, config: UNetConfig = None):
        super().__init__()
        self.config = (config or UNetConfig()).validate()
        self.vaccinator = UNet(self.config)
        self.neutraliser = UNet(self.config)
        self._step = 0

    @property
    def step(self) -> int:
        return self._step

    @step.setter
    def step(self, value: int):
        if value < self._step:
            raise ValueError(f"Step counter cannot move back from {self._step} to {value}")
        self._step = int(value)

    @property
    def resolution(self) -> int:
        return self.config.resolution


class InpaintingBaseline(nn.Module):
    """A neutraliser trained without any vaccinator."""

    def __init__(self, config: UNetConfig = None):
        super().__init__()
        self.config = (config or UNetConfig()).validate()
        self.neutraliser = UNet(self.config)
        self.step = 0

    @property
    def resolution(self) -> int:
        return self.config.resolution


class MLPClassifier(nn.Module):
    def __init__(self, config: ValidatorConfig):
        super().__init__()
        layers: List[nn.Module] = [nn.Flatten()]
        features = 3 * config.resolution * config.resolution
        for hidden in config.hidden_sizes:
            layers += [nn.Linear(features, hidden), nn.ReLU()]
            features = hidden
        layers.append(nn.Linear(features, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x).squeeze(-1)


class SmallCNNClassifier(nn.Module):
    def __init__(self, config: ValidatorConfig):
        super().__init__()
        layers: List[nn.Module] = []
        channels = 3
        for out_channels in config.conv_channels:
            layers += [
                nn.Conv2d(channels, out_channels, 5, padding=2),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            channels = out_channels
        side = config.resolution // (2 ** len(config.conv_channels))
        layers.append(nn.Flatten())
        features = channels * side * side
        for hidden in config.hidden_sizes[-1:]:
            layers += [nn.Linear(features, hidden), nn.ReLU()]
            features = hidden
        layers.append(nn.Linear(features, 1))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x).squeeze(-1)


class Validator(nn.Module):
    """Binary classifier over neutralised images, the logit favours "vaccinated"."""

    def __init__(self, config: ValidatorConfig = None):
        super().__init__()
        self.config = (config or ValidatorConfig()).validate()
        if self.config.architecture == ValidatorArchitecture.MLP.value:
            self.classifier = MLPClassifier(self.config)
        else:
            self.classifier = SmallCNNClassifier(self.config)
        self.history: List[float] = []
        self.step = 0

    @property
    def resolution(self) -> int:
        return self.config.resolution

    def forward(self, x):
        return self.classifier(x)


def _batched(image: ImageTensor) -> Tuple[torch.Tensor, bool]:
    if image.dim() == 3:
        return image.unsqueeze(0), True
    return image, False


def _run_unet(
    network: UNet, resolution: int, image: ImageTensor, mask: Union[FaceMask, torch.Tensor]
) -> ImageTensor:
    check_image(image, resolution)
    batch, single = _batched(image)
    weights = mask_tensor(mask)
    weights = weights.unsqueeze(0) if weights.dim() == 3 else weights
    if weights.shape[-2:] != batch.shape[-2:]:
        raise DimensionError(
            f"Mask {tuple(weights.shape[-2:])} does not match image {tuple(batch.shape[-2:])}",
            expected=batch.shape[-2:],
            actual=weights.shape[-2:],
        )
    weights = weights.expand(batch.shape[0], -1, -1, -1).to(device=batch.device, dtype=batch.dtype)
    device = next(network.parameters()).device
    out = clamp_unit(network(torch.cat([batch, weights], dim=1).to(device))).to(batch.device)
    return out.squeeze(0) if single else out


def forward_vaccinator(system: ImmuneSystem, image: ImageTensor, mask: Union[FaceMask, torch.Tensor]) -> ImageTensor:
    """
    Raw vaccinator output for an image and its face mask.

    :param system: The immune system
    :param image: ``(3, R, R)`` or ``(B, 3, R, R)`` image at the configured resolution
    :param mask: Matching face mask
    :return: The raw output, same shape as ``image``
    """
    return _run_unet(system.vaccinator, system.resolution, image, mask)


def forward_neutraliser(system, image: ImageTensor, mask: Union[FaceMask, torch.Tensor]) -> ImageTensor:
    """
    Raw neutraliser output. Accepts an ImmuneSystem or an InpaintingBaseline.

    :param system: Anything holding a ``neutraliser`` network and a ``resolution``
    :param image: The (masked) image
    :param mask: Matching face mask
    :return: The raw output, same shape as ``image``
    """
    return _run_unet(system.neutraliser, system.resolution, image, mask)


def forward_validator(validator: Validator, image: ImageTensor) -> Union[float, torch.Tensor]:
    """
    Probability that a neutralised image came from a vaccinated one.

    :param validator: The validator
    :param image: ``(3, R, R)`` or ``(B, 3, R, R)`` neutralised image
    :return: A float for a single image, a ``(B,)`` tensor for a batch
    """
    check_image(image, validator.resolution)
    batch, single = _batched(image)
    device = next(validator.parameters()).device
    probability = torch.sigmoid(validator(batch.to(device))).to(batch.device)
    return float(probability[0]) if single else probability


def save_module(
    storage: CheckpointStorageInterface,
    name: str,
    module: nn.Module,
    kind: str,
    metrics: Optional[dict] = None,
    extra: Optional[dict] = None,
):
    metadata = {
        "kind": kind,
        "config": module.config.to_dict(),
        "step": int(getattr(module, "step", 0)),
        "metrics": metrics or {},
    }
    metadata.update(extra or {})
    storage.store(name, {"model": module.state_dict()}, metadata)


def _load_module(storage: CheckpointStorageInterface, name: str, kind: str, factory):
    fetched = storage.fetch(name)
    if fetched is None:
        raise CheckpointError(f"Missing checkpoint {name}", name)
    state, metadata = fetched
    if metadata.get("kind") != kind:
        raise CheckpointError(
            f"Checkpoint {name} holds a {metadata.get('kind')}, expected {kind}", name
        )
    module = factory(metadata["config"])
    try:
        module.load_state_dict(state["model"])
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint {name} does not match its config - {e}", name) from e
    module.step = int(metadata.get("step", 0))
    module.eval()
    return module, metadata


def save_immune_system(
    system: ImmuneSystem,
    storage: CheckpointStorageInterface,
    metrics: Optional[dict] = None,
    name: str = IMMUNE_SYSTEM_CHECKPOINT,
):
    save_module(storage, name, system, "immune_system", metrics)


def load_immune_system(
    storage: CheckpointStorageInterface, name: str = IMMUNE_SYSTEM_CHECKPOINT
) -> Tuple[ImmuneSystem, dict]:
    return _load_module(
        storage, name, "immune_system", lambda cfg: ImmuneSystem(UNetConfig.from_dict(cfg))
    )


def save_validator(validator: Validator, storage: CheckpointStorageInterface, name: str, metrics: Optional[dict] = None):
    save_module(storage, name, validator, "validator", metrics)


def load_validator(storage: CheckpointStorageInterface, name: str) -> Tuple[Validator, dict]:
    return _load_module(
        storage, name, "validator", lambda cfg: Validator(ValidatorConfig.from_dict(cfg))
    )


def save_baseline(baseline: InpaintingBaseline, storage: CheckpointStorageInterface, name: str = "inpainting_baseline", metrics: Optional[dict] = None):
    save_module(storage, name, baseline, "inpainting_baseline", metrics)


def load_baseline(storage: CheckpointStorageInterface, name: str = "inpainting_baseline") -> Tuple[InpaintingBaseline, dict]:
    return _load_module(
        storage,
        name,
        "inpainting_baseline",
        lambda cfg: InpaintingBaseline(UNetConfig.from_dict(cfg)),
    )


def validator_checkpoint_name(architecture: str) -> str:
    return f"validator_{architecture}"


def default_validator_architectures() -> Sequence[str]:
    return [a.value for a in ValidatorArchitecture]
