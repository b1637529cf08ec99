"""Image and mask value types shared by every stage of the immune system.

Images are float32 tensors laid out channel-first, ``(C, H, W)`` or batched
``(B, C, H, W)``, with values in [0, 1]. 8-bit data only appears at file boundaries.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from PIL import Image

from cybervax.exceptions import DimensionError, MaskError, ParameterError

logger = logging.getLogger(__name__)

ImageTensor = torch.Tensor

DEFAULT_RESOLUTION = 64


class MaskProvenance(Enum):
    LANDMARK = "landmark"
    ELLIPSE = "ellipse"
    EXTERNAL = "external"


@dataclass(eq=False)
class FaceMask:
    """Face mask, 1 inside the face contour, with optional soft edges.

    ``values`` is ``(1, H, W)`` or ``(B, 1, H, W)``. The complement is kept lazily so
    that complementing twice returns the stored values untouched.
    """

    values: torch.Tensor
    provenance: MaskProvenance = MaskProvenance.EXTERNAL
    inverted: bool = False

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float32)
        if values.dim() == 2:
            values = values.unsqueeze(0)
        if values.dim() not in (3, 4) or values.shape[-3] != 1:
            raise DimensionError(
                f"Mask must be (1, H, W) or (B, 1, H, W), got {tuple(values.shape)}",
                actual=values.shape,
            )
        if values.numel() and (values.min() < 0.0 or values.max() > 1.0):
            raise MaskError("Mask values must lie within [0, 1]")
        self.values = values

    @property
    def data(self) -> torch.Tensor:
        return 1.0 - self.values if self.inverted else self.values

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]

    def complement(self) -> "FaceMask":
        return FaceMask(self.values, self.provenance, not self.inverted)

    def binary(self, threshold: float = 0.5) -> "FaceMask":
        return FaceMask((self.data >= threshold).float(), self.provenance)

    def area(self) -> float:
        return float(self.data.sum())

    def to(self, device) -> "FaceMask":
        return FaceMask(self.values.to(device), self.provenance, self.inverted)

    @staticmethod
    def stack(masks) -> "FaceMask":
        masks = list(masks)
        if not masks:
            raise DimensionError("Cannot stack an empty list of masks")
        return FaceMask(
            torch.stack([m.data for m in masks]), masks[0].provenance
        )


def mask_tensor(mask: Union[FaceMask, torch.Tensor]) -> torch.Tensor:
    return mask.data if isinstance(mask, FaceMask) else mask


def check_image(image: ImageTensor, resolution: int = None) -> Tuple[int, int, int]:
    """
    Check that an image tensor is channel-first and optionally square at a resolution.

    :param image: The image, ``(C, H, W)`` or ``(B, C, H, W)``
    :param resolution: The expected side length, if any
    :return: ``(channels, height, width)``
    """
    if image.dim() not in (3, 4):
        raise DimensionError(
            f"Image must be (C, H, W) or (B, C, H, W), got {tuple(image.shape)}",
            actual=image.shape,
        )
    channels, height, width = image.shape[-3:]
    if resolution is not None and (height != resolution or width != resolution):
        raise DimensionError(
            f"Expected {resolution}x{resolution} input, got {height}x{width}",
            expected=(resolution, resolution),
            actual=(height, width),
        )
    return channels, height, width


def clamp_unit(image: ImageTensor) -> ImageTensor:
    return torch.clamp(torch.as_tensor(image), 0.0, 1.0)


def blend(
    raw: ImageTensor, base: ImageTensor, mask: Union[FaceMask, torch.Tensor]
) -> ImageTensor:
    """
    Convex per-pixel blend: ``raw`` where the mask is 1, ``base`` where it is 0.

    :param raw: Image taken inside the mask
    :param base: Image taken outside the mask
    :param mask: Mask broadcast over channels
    :return: ``mask * raw + (1 - mask) * base``
    """
    weights = mask_tensor(mask)
    if raw.shape != base.shape:
        raise DimensionError(
            f"Blend inputs differ in shape {tuple(raw.shape)} != {tuple(base.shape)}",
            expected=base.shape,
            actual=raw.shape,
        )
    if weights.shape[-2:] != raw.shape[-2:]:
        raise DimensionError(
            f"Mask {tuple(weights.shape[-2:])} does not match image {tuple(raw.shape[-2:])}",
            expected=raw.shape[-2:],
            actual=weights.shape[-2:],
        )
    return weights * raw + (1.0 - weights) * base


def soften_mask(binary: FaceMask, kernel_radius: int = 3, sigma: float = 2.0) -> FaceMask:
    """
    Feather a binary mask with a Gaussian blur.

    Points whose whole ``(2r+1)`` window lies inside (outside) the face stay exactly
    1 (0), so the interior plateau survives smoothing.

    :param binary: Mask with values in {0, 1}
    :param kernel_radius: Blur radius in pixels, 0 disables smoothing
    :param sigma: Gaussian standard deviation in pixels
    :return: The softened mask
    """
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if kernel_radius < 0:
        raise ParameterError(f"kernel_radius must be non-negative, got {kernel_radius}")

    values = binary.data
    if kernel_radius == 0:
        return FaceMask(values.clone(), binary.provenance)

    size = 2 * kernel_radius + 1
    if min(values.shape[-2:]) <= kernel_radius:
        raise ParameterError(
            f"Mask {tuple(values.shape[-2:])} is too small for radius {kernel_radius}"
        )

    batched = values if values.dim() == 4 else values.unsqueeze(0)
    blurred = TF.gaussian_blur(batched, kernel_size=[size, size], sigma=[sigma, sigma])
    interior = -F.max_pool2d(-batched, size, stride=1, padding=kernel_radius)
    exterior = F.max_pool2d(batched, size, stride=1, padding=kernel_radius)
    softened = torch.where(interior >= 1.0, torch.ones_like(blurred), blurred)
    softened = torch.where(exterior <= 0.0, torch.zeros_like(softened), softened)
    softened = clamp_unit(softened)

    if values.dim() == 3:
        softened = softened.squeeze(0)
    return FaceMask(softened, binary.provenance)


def resize_image(image: ImageTensor, size: Tuple[int, int]) -> ImageTensor:
    """Bilinear resize to ``(height, width)``, antialiased when shrinking."""
    batched = image if image.dim() == 4 else image.unsqueeze(0)
    if tuple(batched.shape[-2:]) == tuple(size):
        resized = batched.clone()
    else:
        resized = F.interpolate(
            batched, size=tuple(size), mode="bilinear", align_corners=False, antialias=True
        )
    resized = clamp_unit(resized)
    return resized if image.dim() == 4 else resized.squeeze(0)


def from_array(array: np.ndarray) -> ImageTensor:
    """Convert an ``H x W x C`` uint8 array into a ``(C, H, W)`` float tensor."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.dtype == np.uint8:
        tensor = torch.from_numpy(array.astype(np.float32) / 255.0)
    else:
        tensor = torch.from_numpy(array.astype(np.float32))
    return clamp_unit(tensor.permute(2, 0, 1).contiguous())


def to_array(image: ImageTensor) -> np.ndarray:
    """Quantise a ``(C, H, W)`` tensor into an ``H x W x C`` uint8 array."""
    array = clamp_unit(image.detach().cpu()).permute(1, 2, 0).numpy()
    return np.round(array * 255.0).astype(np.uint8)


def load_image(path: Union[str, Path]) -> ImageTensor:
    with Image.open(path) as img:
        img.load()
        return from_array(np.asarray(img.convert("RGB")))


def save_image(image: ImageTensor, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    array = to_array(image)
    if array.shape[2] == 1:
        array = array[:, :, 0]
    Image.fromarray(array).save(path, format="PNG")
    return path
