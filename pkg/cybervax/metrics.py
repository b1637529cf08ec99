import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from cybervax.config import ConfigSection
from cybervax.exceptions import ConfigError, DimensionError, MetricError
from cybervax.imaging import FaceMask, ImageTensor, mask_tensor

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0

MaskLike = Union[FaceMask, torch.Tensor]


class MetricRegion(Enum):
    FULL = "full"
    FACE = "face"
    NONFACE = "nonface"


@dataclass
class LossWeights(ConfigSection):
    imp: float = 1.0
    rev: float = 1.0
    val: float = 1.0

    def validate(self):
        for name in ("imp", "rev", "val"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or value < 0 or not math.isfinite(value):
                raise ConfigError(f"Loss weight {name} must be a non-negative number, got {value}")
        return self


@dataclass
class LossBreakdown:
    imp: float
    rev: float
    val: float
    weights: LossWeights
    total: float
    total_tensor: Optional[torch.Tensor] = field(default=None, repr=False, compare=False)

    @classmethod
    def from_components(cls, imp: float, rev: float, val: float, weights: LossWeights = None) -> "LossBreakdown":
        weights = weights or LossWeights()
        total = weights.imp * imp + weights.rev * rev + weights.val * val
        return cls(imp, rev, val, weights, total)

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.imp, self.rev, self.val, self.total))

    def to_dict(self) -> dict:
        return {"imp": self.imp, "rev": self.rev, "val": self.val, "total": self.total}


@dataclass
class MetricRecord:
    psnr: float
    ssim: float
    mae: float
    region: str = MetricRegion.FULL.value
    identity_sim: Optional[float] = None
    sample_id: str = ""
    video_id: str = ""
    condition: str = "none"
    magnitude: float = 0.0
    seed: int = 0
    vaccinated: Optional[bool] = None
    system: str = "immune_system"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassificationReport:
    accuracy: Optional[float]
    tpr: Optional[float]
    tnr: Optional[float]
    positives: int = 0
    negatives: int = 0
    threshold: float = 0.5

    def as_tuple(self) -> Tuple[Optional[float], Optional[float], Optional[float]]:
        return self.accuracy, self.tpr, self.tnr


def _check_pair(a: ImageTensor, b: ImageTensor):
    if a.shape != b.shape:
        raise DimensionError(
            f"Metric inputs differ in shape {tuple(a.shape)} != {tuple(b.shape)}",
            expected=b.shape,
            actual=a.shape,
        )


def _batched(image: torch.Tensor) -> torch.Tensor:
    return image.unsqueeze(0) if image.dim() == 3 else image


def _region_weights(region_mask: Optional[MaskLike], like: torch.Tensor) -> Optional[torch.Tensor]:
    if region_mask is None:
        return None
    weights = mask_tensor(region_mask).to(like.dtype)
    weights = _batched(weights)
    if weights.shape[-2:] != like.shape[-2:]:
        raise DimensionError(
            f"Region mask {tuple(weights.shape[-2:])} does not match image {tuple(like.shape[-2:])}",
            expected=like.shape[-2:],
            actual=weights.shape[-2:],
        )
    return weights.expand(like.shape[0], 1, -1, -1)


def region_mask(mask: MaskLike, region: MetricRegion, threshold: float = 0.5) -> Optional[torch.Tensor]:
    """Binary selection of the face or non-face pixels of a soft mask."""
    region = MetricRegion(region)
    if region == MetricRegion.FULL:
        return None
    values = mask_tensor(mask)
    if region == MetricRegion.FACE:
        return (values >= threshold).to(values.dtype)
    return (values < threshold).to(values.dtype)


def mae(a: ImageTensor, b: ImageTensor, region_mask: Optional[MaskLike] = None) -> torch.Tensor:
    """
    Mean absolute error, mask-weighted when a region mask is given.

    :param a: Image
    :param b: Image of the same shape
    :param region_mask: Optional per-pixel weights broadcast over channels
    :return: Scalar tensor
    """
    _check_pair(a, b)
    diff = torch.abs(_batched(a) - _batched(b))
    weights = _region_weights(region_mask, diff)
    if weights is None:
        return diff.mean()

    denominator = weights.sum() * diff.shape[1]
    if denominator <= 0:
        raise MetricError("Region mask selects no pixels")
    return (diff * weights).sum() / denominator


def _gaussian_window(channels: int, dtype, device) -> torch.Tensor:
    coords = torch.arange(SSIM_WINDOW, dtype=dtype, device=device) - (SSIM_WINDOW - 1) / 2.0
    g = torch.exp(-(coords ** 2) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.expand(channels, 1, SSIM_WINDOW, SSIM_WINDOW).contiguous()


def ssim_map(a: ImageTensor, b: ImageTensor) -> torch.Tensor:
    """Local SSIM over valid 11x11 Gaussian windows, ``(B, C, H-10, W-10)``."""
    _check_pair(a, b)
    x, y = _batched(a), _batched(b)
    if min(x.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(
            f"Image {tuple(x.shape[-2:])} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )

    channels = x.shape[1]
    window = _gaussian_window(channels, x.dtype, x.device)

    def filt(t):
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    sigma_xx = filt(x * x) - mu_xx
    sigma_yy = filt(y * y) - mu_yy
    sigma_xy = filt(x * y) - mu_xy

    numerator = (2 * mu_xy + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_xx + mu_yy + SSIM_C1) * (sigma_xx + sigma_yy + SSIM_C2)
    return torch.clamp(numerator / denominator, -1.0, 1.0)


def ssim(
    a: ImageTensor,
    b: ImageTensor,
    region_mask: Optional[MaskLike] = None,
    per_sample: bool = False,
) -> torch.Tensor:
    """
    Mean structural similarity, averaged over windows and channels.

    With a region mask only windows centred on selected pixels count.

    :param a: Image in [0, 1]
    :param b: Image in [0, 1]
    :param region_mask: Optional binary selection
    :param per_sample: Return one value per batch item
    :return: Scalar tensor, or ``(B,)`` when ``per_sample``
    """
    values = ssim_map(a, b)
    reduce_dims = (1, 2, 3) if per_sample else (0, 1, 2, 3)

    if region_mask is None:
        return values.mean(dim=reduce_dims)

    radius = SSIM_WINDOW // 2
    weights = _region_weights(region_mask, _batched(a))[..., radius:-radius, radius:-radius]
    weights = weights.expand(-1, values.shape[1], -1, -1)
    selected = weights.sum(dim=reduce_dims)
    if torch.any(selected <= 0):
        raise MetricError("Region mask selects no SSIM windows")
    return (values * weights).sum(dim=reduce_dims) / selected


def psnr(a: ImageTensor, b: ImageTensor, region_mask: Optional[MaskLike] = None) -> float:
    """
    Peak signal-to-noise ratio in dB for unit-range images, capped at 100 dB.

    :param a: Image
    :param b: Image of the same shape
    :param region_mask: Optional binary selection
    :return: PSNR in dB
    """
    _check_pair(a, b)
    squared = (_batched(a).double() - _batched(b).double()) ** 2
    weights = _region_weights(region_mask, squared)
    if weights is None:
        mse = squared.mean().item()
    else:
        denominator = (weights.sum() * squared.shape[1]).item()
        if denominator <= 0:
            raise MetricError("Region mask selects no pixels")
        mse = (squared * weights).sum().item() / denominator

    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def distance(a: ImageTensor, b: ImageTensor) -> torch.Tensor:
    """MAE plus SSIM dissimilarity, differentiable in ``a``."""
    return mae(a, b) + (1.0 - ssim(a, b))


def composite_loss(
    original: ImageTensor,
    vaccinated: ImageTensor,
    neutralised_vaccinated: ImageTensor,
    neutralised_unvaccinated: ImageTensor,
    inverse_mask_rnd: MaskLike,
    weights: LossWeights = None,
) -> LossBreakdown:
    """
    Weighted sum of the imperceptibility, reversibility and validatability terms.

    :param original: Unvaccinated portraits
    :param vaccinated: Vaccinated portraits
    :param neutralised_vaccinated: Neutralised vaccinated portraits
    :param neutralised_unvaccinated: Neutralised unvaccinated portraits
    :param inverse_mask_rnd: Complement of the misaligned mask
    :param weights: Term weights
    :return: The breakdown, with the differentiable total in ``total_tensor``
    """
    weights = weights or LossWeights()
    for name, tensor in (
        ("vaccinated", vaccinated),
        ("neutralised_vaccinated", neutralised_vaccinated),
        ("neutralised_unvaccinated", neutralised_unvaccinated),
    ):
        if tensor.shape != original.shape:
            raise DimensionError(
                f"{name} has shape {tuple(tensor.shape)}, expected {tuple(original.shape)}",
                expected=original.shape,
                actual=tensor.shape,
            )

    inverse = mask_tensor(inverse_mask_rnd)
    if inverse.dim() == 3 and original.dim() == 4:
        inverse = inverse.unsqueeze(0)

    imp = distance(vaccinated, original)
    rev = distance(neutralised_vaccinated, original)
    val = distance(neutralised_unvaccinated, original * inverse)
    total = weights.imp * imp + weights.rev * rev + weights.val * val

    return LossBreakdown(
        imp=imp.item(),
        rev=rev.item(),
        val=val.item(),
        weights=weights,
        total=total.item(),
        total_tensor=total,
    )


class FaceEmbedder:
    """Maps an image (optionally restricted to a face mask) to a fixed-length vector."""

    def embed(self, image: ImageTensor, mask: Optional[MaskLike] = None) -> torch.Tensor:
        raise NotImplementedError


class RandomProjectionEmbedder(FaceEmbedder):
    """Fixed-seed random linear projection of the mean-centred face pixels.

    Only meaningful for relative comparisons; a pretrained face network can be wrapped
    behind the same interface.
    """

    def __init__(self, resolution: int = 64, dim: int = 128, seed: int = 0):
        self.resolution = resolution
        self.dim = dim
        generator = torch.Generator().manual_seed(seed)
        features = 3 * resolution * resolution
        self.projection = torch.randn(dim, features, generator=generator) / math.sqrt(dim)

    def embed(self, image: ImageTensor, mask: Optional[MaskLike] = None) -> torch.Tensor:
        if image.shape[-3:] != (3, self.resolution, self.resolution):
            raise DimensionError(
                f"Embedder expects (3, {self.resolution}, {self.resolution}), got {tuple(image.shape)}",
                expected=(3, self.resolution, self.resolution),
                actual=image.shape,
            )
        pixels = image.detach().float().cpu().reshape(3, self.resolution, self.resolution)
        if mask is None:
            weights = torch.ones(1, self.resolution, self.resolution)
        else:
            weights = (mask_tensor(mask).detach().float().cpu().reshape(1, self.resolution, self.resolution) >= 0.5).float()
        count = weights.sum() * 3
        if count == 0:
            return torch.zeros(self.dim)
        mean = (pixels * weights).sum() / count
        centred = (pixels - mean) * weights
        return self.projection @ centred.reshape(-1)


def identity_similarity(
    a: ImageTensor, b: ImageTensor, embedder: FaceEmbedder, mask: Optional[MaskLike] = None
) -> float:
    """
    Cosine similarity between the face embeddings of two images.

    :param a: Image
    :param b: Image
    :param embedder: Face embedder
    :param mask: Optional face mask passed to the embedder
    :return: Similarity in [-1, 1]
    """
    u = embedder.embed(a, mask).double()
    v = embedder.embed(b, mask).double()
    norm_u, norm_v = torch.linalg.norm(u), torch.linalg.norm(v)
    if norm_u == 0 or norm_v == 0:
        raise MetricError("Embedding has zero norm")
    similarity = torch.dot(u, v) / (norm_u * norm_v)
    return float(torch.clamp(similarity, -1.0, 1.0))


def classification_report(
    scores: Sequence[Tuple[float, bool]], threshold: float = 0.5
) -> ClassificationReport:
    """
    Accuracy, true positive rate and true negative rate of thresholded scores.

    :param scores: Pairs of (probability, is_vaccinated)
    :param threshold: Decision threshold, probabilities at or above it are positive
    :return: The report; a statistic is None when its class is empty
    """
    positives = [p for p, label in scores if label]
    negatives = [p for p, label in scores if not label]
    true_positives = sum(1 for p in positives if p >= threshold)
    true_negatives = sum(1 for p in negatives if p < threshold)

    total = len(positives) + len(negatives)
    accuracy = (true_positives + true_negatives) / total if total else None
    tpr = true_positives / len(positives) if positives else None
    tnr = true_negatives / len(negatives) if negatives else None

    return ClassificationReport(accuracy, tpr, tnr, len(positives), len(negatives), threshold)


def measure(
    candidate: ImageTensor,
    reference: ImageTensor,
    mask: Optional[MaskLike] = None,
    region: MetricRegion = MetricRegion.FULL,
    embedder: Optional[FaceEmbedder] = None,
    **labels,
) -> MetricRecord:
    """PSNR, SSIM and MAE of one image pair over a region, as a MetricRecord."""
    region = MetricRegion(region)
    selection = region_mask(mask, region) if mask is not None else None
    if region != MetricRegion.FULL and selection is None:
        raise MetricError(f"A mask is required for region {region.value}")

    with torch.no_grad():
        record = MetricRecord(
            psnr=psnr(candidate, reference, selection),
            ssim=float(ssim(candidate, reference, selection)),
            mae=float(mae(candidate, reference, selection)),
            region=region.value,
            **labels,
        )
        if embedder is not None:
            record.identity_sim = identity_similarity(candidate, reference, embedder, mask)
    return record


def mean_of(records: Sequence[MetricRecord], attribute: str) -> Optional[float]:
    values = [getattr(r, attribute) for r in records if getattr(r, attribute) is not None]
    return sum(values) / len(values) if values else None


def summarise(records: Sequence[MetricRecord], key) -> Dict[str, Dict[str, float]]:
    """Mean PSNR / SSIM / MAE per group, where ``key`` maps a record to its group."""
    groups: Dict[str, List[MetricRecord]] = {}
    for record in records:
        groups.setdefault(key(record), []).append(record)
    return {
        name: {
            "psnr": mean_of(items, "psnr"),
            "ssim": mean_of(items, "ssim"),
            "mae": mean_of(items, "mae"),
            "count": len(items),
        }
        for name, items in groups.items()
    }
