import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import ConvexHull

from cybervax.config import ConfigSection
from cybervax.exceptions import ConfigError, MaskError, ParameterError
from cybervax.imaging import FaceMask, ImageTensor, MaskProvenance, clamp_unit, soften_mask

logger = logging.getLogger(__name__)

Point = Tuple[float, float]


class LandmarkSource(Enum):
    FILE = "file"
    EXTERNAL_DETECTOR = "external_detector"
    SYNTHETIC = "synthetic"


@dataclass
class LandmarkSet:
    points: List[Point]
    source: LandmarkSource = LandmarkSource.FILE

    def __post_init__(self):
        self.points = [(float(x), float(y)) for x, y in self.points]

    def validate(self, height: int, width: int) -> "LandmarkSet":
        if len(self.points) < 3:
            raise MaskError(f"At least 3 landmarks are required, got {len(self.points)}")
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise MaskError(
                    f"Landmark ({x}, {y}) lies outside the {width}x{height} frame"
                )
        return self

    def shifted(self, dx: float, dy: float) -> "LandmarkSet":
        return LandmarkSet([(x + dx, y + dy) for x, y in self.points], self.source)

    def transformed(self, scale_x: float, scale_y: float, offset_x: float = 0.0, offset_y: float = 0.0) -> "LandmarkSet":
        return LandmarkSet(
            [((x - offset_x) * scale_x, (y - offset_y) * scale_y) for x, y in self.points],
            self.source,
        )

    def bounding_box(self) -> Tuple[float, float, float, float]:
        xs = [p[0] for p in self.points]
        ys = [p[1] for p in self.points]
        return min(xs), min(ys), max(xs), max(ys)

    def hull_area(self) -> float:
        try:
            return float(_convex_hull(self.points).volume)
        except MaskError:
            return 0.0


@dataclass
class AffineParams:
    rotation: float = 0.0
    translate_frac: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        self.translate_frac = tuple(float(v) for v in self.translate_frac)
        if self.scale <= 0:
            raise ParameterError(f"Affine scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls()


@dataclass
class AffineRanges(ConfigSection):
    """Sampling ranges for the training-time mask misalignment."""

    rotation_deg: float = 5.0
    translate_frac: float = 0.03
    scale: Tuple[float, float] = (0.97, 1.03)

    def validate(self):
        self.scale = tuple(self.scale)
        if self.rotation_deg < 0 or self.translate_frac < 0:
            raise ConfigError("Affine ranges must be non-negative")
        if len(self.scale) != 2 or not 0 < self.scale[0] <= self.scale[1]:
            raise ConfigError(f"Invalid scale range {self.scale}")
        return self


@dataclass
class MaskConfig(ConfigSection):
    kernel_radius: int = 3
    sigma: float = 2.0

    def validate(self):
        if self.kernel_radius < 0:
            raise ConfigError("kernel_radius must be non-negative")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        return self


def sample_affine_params(seed: int, ranges: AffineRanges = None) -> AffineParams:
    ranges = ranges or AffineRanges()
    rng = np.random.default_rng(seed)
    rotation = rng.uniform(-ranges.rotation_deg, ranges.rotation_deg)
    dx, dy = rng.uniform(-ranges.translate_frac, ranges.translate_frac, size=2)
    scale = rng.uniform(*ranges.scale)
    return AffineParams(float(rotation), (float(dx), float(dy)), float(scale), seed)


def _convex_hull(points: Sequence[Point]) -> ConvexHull:
    array = np.asarray(points, dtype=np.float64)
    if len(array) < 3 or np.linalg.matrix_rank(array - array[0], tol=1e-9) < 2:
        raise MaskError("Landmarks are degenerate (collinear), no face region exists")
    try:
        return ConvexHull(array)
    except (ValueError, RuntimeError) as e:
        raise MaskError(f"Failed to build the face hull - {e}") from e


def _pixel_centres(height: int, width: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


def mask_from_landmarks(
    landmarks: LandmarkSet, height: int, width: int, kernel_radius: int = 3, sigma: float = 2.0
) -> FaceMask:
    """
    Fill the convex hull of the landmarks and soften its edge.

    :param landmarks: Face landmarks in pixel coordinates
    :param height: Frame height
    :param width: Frame width
    :param kernel_radius: Soft-edge radius, 0 keeps the binary mask
    :param sigma: Soft-edge Gaussian sigma
    :return: The face mask
    """
    landmarks.validate(height, width)
    hull = _convex_hull(landmarks.points)
    centres = _pixel_centres(height, width)
    distances = centres @ hull.equations[:, :2].T + hull.equations[:, 2]
    inside = np.all(distances <= 1e-9, axis=1).reshape(height, width)

    binary = FaceMask(torch.from_numpy(inside.astype(np.float32)), MaskProvenance.LANDMARK)
    return soften_mask(binary, kernel_radius, sigma)


def rasterise_ellipse(
    height: int, width: int, center: Point, axes: Tuple[float, float]
) -> torch.Tensor:
    """Boolean ``(H, W)`` map of pixel centres inside the axis-aligned ellipse."""
    cx, cy = center
    a, b = axes
    ys, xs = torch.meshgrid(
        torch.arange(height, dtype=torch.float64),
        torch.arange(width, dtype=torch.float64),
        indexing="ij",
    )
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def synthetic_mask(
    height: int,
    width: int,
    center: Point,
    axes: Tuple[float, float],
    kernel_radius: int = 3,
    sigma: float = 2.0,
) -> FaceMask:
    cx, cy = center
    a, b = axes
    if a <= 0 or b <= 0:
        raise ParameterError(f"Ellipse axes must be positive, got {axes}")
    if cx - a < -0.5 or cy - b < -0.5 or cx + a > width - 0.5 or cy + b > height - 0.5:
        raise ParameterError(
            f"Ellipse at {center} with axes {axes} does not fit a {width}x{height} frame"
        )

    inside = rasterise_ellipse(height, width, center, axes).float()
    return soften_mask(FaceMask(inside, MaskProvenance.ELLIPSE), kernel_radius, sigma)


def ellipse_landmarks(
    center: Point, axes: Tuple[float, float], count: int = 16
) -> LandmarkSet:
    cx, cy = center
    a, b = axes
    return LandmarkSet(
        [
            (cx + a * math.cos(2 * math.pi * k / count), cy + b * math.sin(2 * math.pi * k / count))
            for k in range(count)
        ],
        LandmarkSource.SYNTHETIC,
    )


def _affine_theta(params: AffineParams, height: int, width: int) -> torch.Tensor:
    # Rotation about the frame centre in pixel space, expressed in the normalised
    # coordinates used by affine_grid. theta maps output points onto input points.
    angle = math.radians(params.rotation)
    cos, sin = math.cos(angle), math.sin(angle)
    rotation_inv = torch.tensor([[cos, sin], [-sin, cos]], dtype=torch.float64)
    half = torch.diag(torch.tensor([width / 2.0, height / 2.0], dtype=torch.float64))
    linear = torch.linalg.inv(half) @ rotation_inv @ half / params.scale
    shift = torch.tensor(
        [2.0 * params.translate_frac[0], 2.0 * params.translate_frac[1]], dtype=torch.float64
    )
    theta = torch.cat([linear, (-linear @ shift).unsqueeze(1)], dim=1)
    return theta.float()


def random_affine(
    mask: Union[FaceMask, torch.Tensor],
    params: Union[AffineParams, Sequence[AffineParams]],
) -> FaceMask:
    """
    Warp a mask by rotation, translation and scale with bilinear resampling.

    Regions pulled in from outside the frame are 0. A batched mask takes either one
    parameter set for every item or one per item.

    :param mask: ``(1, H, W)`` or ``(B, 1, H, W)`` mask
    :param params: Affine parameters
    :return: The warped mask, clamped to [0, 1]
    """
    provenance = mask.provenance if isinstance(mask, FaceMask) else MaskProvenance.EXTERNAL
    values = mask.data if isinstance(mask, FaceMask) else mask
    batched = values if values.dim() == 4 else values.unsqueeze(0)
    count, _, height, width = batched.shape

    if isinstance(params, AffineParams):
        params = [params] * count
    params = list(params)
    if len(params) != count:
        raise ParameterError(f"Got {len(params)} affine parameter sets for {count} masks")

    theta = torch.stack([_affine_theta(p, height, width) for p in params]).to(batched.device)
    grid = F.affine_grid(theta.to(batched.dtype), list(batched.shape), align_corners=False)
    warped = F.grid_sample(
        batched, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    warped = clamp_unit(warped)
    if values.dim() == 3:
        warped = warped.squeeze(0)
    return FaceMask(warped, provenance)


def mask_iou(a: Union[FaceMask, torch.Tensor], b: Union[FaceMask, torch.Tensor], threshold: float = 0.5) -> float:
    a_values = (a.data if isinstance(a, FaceMask) else a) >= threshold
    b_values = (b.data if isinstance(b, FaceMask) else b) >= threshold
    union = (a_values | b_values).sum().item()
    if union == 0:
        return 1.0
    return (a_values & b_values).sum().item() / union


def select_largest_face(candidates: Iterable[LandmarkSet]) -> LandmarkSet:
    candidates = list(candidates)
    if not candidates:
        raise MaskError("No face landmarks were provided")
    if len(candidates) > 1:
        logger.debug(f"{len(candidates)} faces found, keeping the largest")
    return max(candidates, key=lambda landmarks: landmarks.hull_area())


def parse_landmark_line(line: str) -> Tuple[str, LandmarkSet]:
    """
    Parse one landmark record: the image filename followed by ``x,y`` pairs.

    :param line: The record
    :return: The filename and its landmarks
    """
    parts = line.split()
    if not parts:
        raise ValueError("Landmark record is empty")

    filename, pairs = parts[0], parts[1:]
    points = []
    for pair in pairs:
        try:
            x, y = pair.split(",")
            points.append((float(x), float(y)))
        except ValueError as e:
            raise ValueError(f"Malformed landmark {pair} for {filename}") from e

    return filename, LandmarkSet(points, LandmarkSource.FILE)


def read_landmark_file(path: Union[str, Path]) -> Dict[str, List[LandmarkSet]]:
    """Read a landmark file; repeated filenames hold several faces."""
    records: Dict[str, List[LandmarkSet]] = {}
    with open(path) as f:
        for number, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            try:
                filename, landmarks = parse_landmark_line(line)
            except ValueError as e:
                raise MaskError(f"{path}:{number}: {e}") from e
            records.setdefault(filename, []).append(landmarks)
    return records


def format_landmark_line(filename: str, landmarks: LandmarkSet) -> str:
    pairs = " ".join(f"{x:g},{y:g}" for x, y in landmarks.points)
    return f"{filename} {pairs}"


class MaskDetector:
    """Produces the face landmarks for an image."""

    def locate(self, image: ImageTensor, key: Optional[str] = None) -> LandmarkSet:
        raise NotImplementedError

    def detect(self, image: ImageTensor, key: Optional[str] = None, mask_config: MaskConfig = None) -> FaceMask:
        mask_config = mask_config or MaskConfig()
        height, width = image.shape[-2:]
        return mask_from_landmarks(
            self.locate(image, key), height, width, mask_config.kernel_radius, mask_config.sigma
        )


class LandmarkFileDetector(MaskDetector):
    """Looks up precomputed landmarks by filename."""

    def __init__(self, records: Dict[str, List[LandmarkSet]]):
        self.records = records

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "LandmarkFileDetector":
        return cls(read_landmark_file(path))

    def has(self, key: Optional[str]) -> bool:
        return key is not None and (key in self.records or Path(key).name in self.records)

    def locate(self, image: ImageTensor, key: Optional[str] = None) -> LandmarkSet:
        if not self.has(key):
            raise MaskError(f"No landmarks recorded for {key}")
        candidates = self.records.get(key) or self.records[Path(key).name]
        return select_largest_face(candidates)


class EllipseHeuristicDetector(MaskDetector):
    """Assumes one centred face filling most of a portrait crop."""

    def __init__(self, axes_frac: Tuple[float, float] = (0.3, 0.38), count: int = 16):
        self.axes_frac = axes_frac
        self.count = count

    def locate(self, image: ImageTensor, key: Optional[str] = None) -> LandmarkSet:
        height, width = image.shape[-2:]
        side = min(height, width)
        center = ((width - 1) / 2.0, (height - 1) / 2.0)
        axes = (self.axes_frac[0] * side, self.axes_frac[1] * side)
        landmarks = ellipse_landmarks(center, axes, self.count)
        landmarks.source = LandmarkSource.EXTERNAL_DETECTOR
        return landmarks


@dataclass
class FallbackDetector(MaskDetector):
    """Uses the primary detector and falls back to the ellipse heuristic with a warning."""

    primary: Optional[MaskDetector] = None
    fallback: MaskDetector = field(default_factory=EllipseHeuristicDetector)

    def locate(self, image: ImageTensor, key: Optional[str] = None) -> LandmarkSet:
        if self.primary is not None:
            try:
                return self.primary.locate(image, key)
            except MaskError as e:
                logger.warning(f"Falling back to the ellipse heuristic for {key} - {e}")
        return self.fallback.locate(image, key)
