import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator, Optional, Tuple, Union

import torch

from cybervax.attacks import mask_attack
from cybervax.exceptions import (
    CyberVaxError,
    MaskError,
    NeutralisationError,
    ParameterError,
    VaccinationError,
)
from cybervax.imaging import (
    FaceMask,
    ImageTensor,
    blend,
    check_image,
    load_image,
    resize_image,
)
from cybervax.masks import (
    EllipseHeuristicDetector,
    LandmarkSet,
    MaskConfig,
    MaskDetector,
    mask_from_landmarks,
)
from cybervax.models import ImmuneSystem, Validator, forward_neutraliser, forward_validator, forward_vaccinator

logger = logging.getLogger(__name__)

CROP_EXPANSION = 1.4
SEAM_FEATHER = 3

Box = Tuple[int, int, int, int]


@dataclass
class PortraitRecord:
    """A face crop resized to the working resolution, with its place in the source frame."""

    image: ImageTensor
    mask: FaceMask
    box: Box
    frame_size: Tuple[int, int]
    landmarks: Optional[LandmarkSet] = None
    source: str = ""
    frame_index: Optional[int] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.box
        height, width = self.frame_size
        if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
            raise ParameterError(f"Crop box {self.box} lies outside the {width}x{height} frame")
        _, rows, cols = check_image(self.image)
        if rows != cols:
            raise ParameterError(f"Portrait must be square, got {rows}x{cols}")

    @property
    def resolution(self) -> int:
        return self.image.shape[-1]


@dataclass
class VerdictRecord:
    vaccinated: bool
    probability: float
    neutralised: str = ""
    source: str = ""
    threshold: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ParameterError(f"Probability {self.probability} is outside [0, 1]")
        if self.vaccinated != (self.probability >= self.threshold):
            raise ParameterError(
                f"Verdict {self.vaccinated} disagrees with probability {self.probability}"
            )

    @classmethod
    def from_probability(cls, probability: float, threshold: float = 0.5, **references) -> "VerdictRecord":
        return cls(probability >= threshold, float(probability), threshold=threshold, **references)

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "neutralised": self.neutralised,
            "probability": self.probability,
            "vaccinated": self.vaccinated,
            "threshold": self.threshold,
        }


class SequenceMode(Enum):
    VACCINATE = "vaccinate"
    NEUTRALISE = "neutralise"
    FULL = "full"


@dataclass
class FrameResult:
    index: int
    source: str
    output: Optional[ImageTensor] = None
    verdict: Optional[VerdictRecord] = None
    error: Optional[str] = None
    portrait: Optional[ImageTensor] = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return self.error is not None


def crop_box_for_landmarks(
    landmarks: LandmarkSet, height: int, width: int, expansion: float = CROP_EXPANSION
) -> Box:
    """
    Square crop around the landmark bounding box, expanded and shifted to fit the frame.

    :param landmarks: Face landmarks in frame coordinates
    :param height: Frame height
    :param width: Frame width
    :param expansion: Side length relative to the larger box side
    :return: ``(x0, y0, x1, y1)`` with exclusive upper bounds
    """
    left, top, right, bottom = landmarks.bounding_box()
    side = int(round(max(right - left + 1, bottom - top + 1) * expansion))
    side = max(1, min(side, height, width))

    cx, cy = (left + right + 1) / 2.0, (top + bottom + 1) / 2.0
    x0 = int(round(cx - side / 2.0))
    y0 = int(round(cy - side / 2.0))
    x0 = min(max(x0, 0), width - side)
    y0 = min(max(y0, 0), height - side)
    return x0, y0, x0 + side, y0 + side


def prepare_portrait(
    frame: ImageTensor,
    detector: MaskDetector = None,
    resolution: int = 64,
    key: Optional[str] = None,
    frame_index: Optional[int] = None,
    mask_config: MaskConfig = None,
) -> PortraitRecord:
    """
    Detect the face, crop a square portrait and resize it to the working resolution.

    :param frame: ``(3, H, W)`` source frame
    :param detector: Landmark source, the ellipse heuristic when omitted
    :param resolution: Working resolution
    :param key: Lookup key for file-based landmarks
    :param frame_index: Position in a frame sequence
    :param mask_config: Mask softening parameters
    :return: The portrait record
    """
    detector = detector or EllipseHeuristicDetector()
    mask_config = mask_config or MaskConfig()
    _, height, width = check_image(frame)

    landmarks = detector.locate(frame, key).validate(height, width)
    box = crop_box_for_landmarks(landmarks, height, width)
    x0, y0, x1, _ = box
    side = x1 - x0
    scale = resolution / side

    crop = frame[:, y0 : y0 + side, x0 : x0 + side]
    image = resize_image(crop, (resolution, resolution))

    # pixel centres map as (x + 0.5 - x0) * scale - 0.5
    local = landmarks.transformed(scale, scale, x0 - 0.5, y0 - 0.5).shifted(-0.5, -0.5)
    local = LandmarkSet(
        [
            (min(max(x, 0.0), resolution - 1.0), min(max(y, 0.0), resolution - 1.0))
            for x, y in local.points
        ],
        landmarks.source,
    )
    mask = mask_from_landmarks(local, resolution, resolution, mask_config.kernel_radius, mask_config.sigma)

    return PortraitRecord(image, mask, box, (height, width), local, key or "", frame_index)


def seam_weights(height: int, width: int, feather: int = SEAM_FEATHER) -> torch.Tensor:
    """``(1, H, W)`` weights that fall linearly to the box border over ``feather`` pixels."""
    if feather <= 0:
        return torch.ones(1, height, width)
    rows = torch.arange(height, dtype=torch.float32)
    cols = torch.arange(width, dtype=torch.float32)
    dist_rows = torch.minimum(rows, height - 1 - rows)
    dist_cols = torch.minimum(cols, width - 1 - cols)
    dist = torch.minimum(dist_rows[:, None], dist_cols[None, :])
    return torch.clamp((dist + 1) / (feather + 1), 0.0, 1.0).unsqueeze(0)


def paste_back(frame: ImageTensor, patch: ImageTensor, box: Box, feather: int = SEAM_FEATHER) -> ImageTensor:
    """
    Resize a processed portrait back to its crop box and blend it into the frame.

    Pixels outside the box are copied unchanged.

    :param frame: ``(3, H, W)`` source frame
    :param patch: Processed portrait
    :param box: Crop box of the portrait
    :param feather: Seam feather width in pixels
    :return: The composited frame
    """
    x0, y0, x1, y1 = box
    resized = resize_image(patch, (y1 - y0, x1 - x0))
    out = frame.clone()
    region = out[:, y0:y1, x0:x1]
    out[:, y0:y1, x0:x1] = blend(resized, region, seam_weights(y1 - y0, x1 - x0, feather))
    return out


def vaccinate_image(system: ImmuneSystem, image: ImageTensor, mask: Union[FaceMask, torch.Tensor]) -> ImageTensor:
    """Keep the original face and take the non-face region from the vaccinator."""
    with torch.no_grad():
        raw = forward_vaccinator(system, image, mask)
        return blend(image, raw, mask)


def neutralise_image(
    system, image: ImageTensor, mask: Union[FaceMask, torch.Tensor]
) -> ImageTensor:
    """Rebuild the face region from the masked image; the non-face region is untouched."""
    with torch.no_grad():
        raw = forward_neutraliser(system, mask_attack(image, mask), mask)
        return blend(raw, image, mask)


def vaccinate(system: ImmuneSystem, record: PortraitRecord) -> ImageTensor:
    """
    Vaccinate a prepared portrait.

    :param system: Trained immune system
    :param record: The portrait
    :return: The vaccinated portrait
    """
    return vaccinate_image(system, record.image, record.mask)


def vaccinate_frame(
    system: ImmuneSystem,
    frame: ImageTensor,
    detector: MaskDetector = None,
    key: Optional[str] = None,
    frame_index: Optional[int] = None,
    mask_config: MaskConfig = None,
) -> Tuple[ImageTensor, PortraitRecord, ImageTensor]:
    """Vaccinate the face crop of a frame and paste it back, returning the frame, record and portrait."""
    try:
        record = prepare_portrait(frame, detector, system.resolution, key, frame_index, mask_config)
    except MaskError as e:
        raise VaccinationError(f"Face detection failed for {key or 'frame'} - {e}") from e

    portrait = vaccinate(system, record)
    return paste_back(frame, portrait, record.box), record, portrait


def neutralise(
    system,
    image: ImageTensor,
    mask: Optional[FaceMask] = None,
    detector: MaskDetector = None,
    key: Optional[str] = None,
    mask_config: MaskConfig = None,
) -> ImageTensor:
    """
    Neutralise a portrait, detecting the mask on the given image when none is passed.

    :param system: Immune system or inpainting baseline
    :param image: ``(3, R, R)`` portrait, possibly attacked
    :param mask: Face mask, detected when omitted
    :param detector: Landmark source for detection
    :param key: Lookup key for file-based landmarks
    :param mask_config: Mask softening parameters
    :return: The neutralised portrait
    """
    if mask is None:
        detector = detector or EllipseHeuristicDetector()
        try:
            mask = detector.detect(image, key, mask_config)
        except MaskError as e:
            raise NeutralisationError(f"Face detection failed for {key or 'image'} - {e}") from e
    return neutralise_image(system, image, mask)


def neutralise_frame(
    system,
    frame: ImageTensor,
    detector: MaskDetector = None,
    key: Optional[str] = None,
    frame_index: Optional[int] = None,
    mask_config: MaskConfig = None,
) -> Tuple[ImageTensor, PortraitRecord, ImageTensor]:
    """Neutralise the face crop of a frame and paste it back, returning the frame, record and portrait."""
    try:
        record = prepare_portrait(frame, detector, system.resolution, key, frame_index, mask_config)
    except MaskError as e:
        raise NeutralisationError(f"Face detection failed for {key or 'frame'} - {e}") from e

    portrait = neutralise_image(system, record.image, record.mask)
    return paste_back(frame, portrait, record.box), record, portrait


def validate(
    validator: Validator, neutralised: ImageTensor, threshold: float = 0.5, **references
) -> VerdictRecord:
    """
    Classify a neutralised portrait as coming from a vaccinated image or not.

    :param validator: Trained validator
    :param neutralised: ``(3, R, R)`` neutralised portrait
    :param threshold: Decision threshold
    :return: The verdict
    """
    with torch.no_grad():
        probability = forward_validator(validator, neutralised)
    return VerdictRecord.from_probability(probability, threshold, **references)


def _read_frame(item) -> Tuple[str, ImageTensor]:
    if isinstance(item, torch.Tensor):
        return "", item
    if isinstance(item, tuple):
        key, frame = item
        return str(key), load_image(frame) if isinstance(frame, (str, Path)) else frame
    return str(item), load_image(item)


def process_sequence(
    system: ImmuneSystem,
    validator: Optional[Validator],
    frames: Iterable,
    mode: SequenceMode = SequenceMode.FULL,
    detector: MaskDetector = None,
    workers: int = 1,
    threshold: float = 0.5,
    mask_config: MaskConfig = None,
) -> Iterator[FrameResult]:
    """
    Apply the pipeline frame by frame, yielding results in input order.

    Frames are tensors, image paths or ``(key, tensor | path)`` pairs. Unreadable
    frames are skipped with a warning. Frames that fail a stage are passed through
    unchanged and flagged. At most ``2 * workers`` frames are read ahead of the output.

    :param system: Trained immune system
    :param validator: Validator for the neutralise and full modes, optional
    :param frames: The frame stream
    :param mode: Which stages to run
    :param detector: Landmark source
    :param workers: Worker threads
    :param threshold: Verdict threshold
    :param mask_config: Mask softening parameters
    :return: Iterator of frame results
    """
    mode = SequenceMode(mode)

    def run(indexed) -> Optional[FrameResult]:
        index, item = indexed
        try:
            key, frame = _read_frame(item)
        except OSError as e:
            logger.warning(f"Skipping unreadable frame {index} - {e}", extra={"frame": index})
            return None

        key = key or f"frame_{index:06d}"
        result = FrameResult(index, key, output=frame)
        try:
            if mode in (SequenceMode.VACCINATE, SequenceMode.FULL):
                frame, _, _ = vaccinate_frame(system, frame, detector, key, index, mask_config)
                result.output = frame
            if mode in (SequenceMode.NEUTRALISE, SequenceMode.FULL):
                frame, _, portrait = neutralise_frame(system, frame, detector, key, index, mask_config)
                result.output, result.portrait = frame, portrait
                if validator is not None:
                    result.verdict = validate(validator, portrait, threshold, source=key)
        except CyberVaxError as e:
            logger.warning(f"Frame {index} passed through - {e}", extra={"frame": index})
            result.error = str(e)
        return result

    workers = max(1, workers)
    indexed = enumerate(frames)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        pending = deque(executor.submit(run, item) for item in islice(indexed, 2 * workers))
        while pending:
            result = pending.popleft().result()
            for item in islice(indexed, 1):
                pending.append(executor.submit(run, item))
            if result is not None:
                yield result
