import csv
import dataclasses
import io
import json
import logging
import math
import re
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np
import torch

from cybervax.config import ConfigSection
from cybervax.exceptions import ConfigError, DataError, MaskError, ParameterError
from cybervax.imaging import FaceMask, ImageTensor, load_image
from cybervax.masks import (
    EllipseHeuristicDetector,
    LandmarkFileDetector,
    MaskConfig,
    read_landmark_file,
    synthetic_mask,
)
from cybervax.metrics import MetricRecord, mean_of
from cybervax.pipeline import prepare_portrait
from cybervax.storage import atomic_write_text

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
LANDMARK_FILENAME = "landmarks.txt"
REPORT_VERSION = 1
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class ReportFormat(Enum):
    CSV = "csv"
    JSON = "json"


@dataclass
class SyntheticFaceParams:
    """Everything needed to render one synthetic portrait."""

    seed: int
    resolution: int = 64
    skin: Tuple[float, float, float] = (0.8, 0.6, 0.5)
    center: Tuple[float, float] = (31.5, 31.5)
    axes: Tuple[float, float] = (18.0, 23.0)
    eye_offset: Tuple[float, float] = (0.4, 0.25)
    eye_radius: float = 0.12
    iris: Tuple[float, float, float] = (0.2, 0.3, 0.5)
    mouth_offset: float = 0.45
    mouth_size: Tuple[float, float] = (0.35, 0.08)
    lips: Tuple[float, float, float] = (0.6, 0.2, 0.25)
    background: Tuple[float, float, float] = (0.3, 0.4, 0.5)
    texture_frequency: float = 0.3
    texture_amplitude: float = 0.08
    texture_phase: float = 0.0

    def validate(self) -> "SyntheticFaceParams":
        cx, cy = self.center
        a, b = self.axes
        size = self.resolution
        if a <= 0 or b <= 0:
            raise ParameterError(f"Face axes must be positive, got {self.axes}")
        if cx - a < -0.5 or cy - b < -0.5 or cx + a > size - 0.5 or cy + b > size - 0.5:
            raise ParameterError(f"Face ellipse {self.center} {self.axes} leaves the {size}x{size} frame")
        ex, ey = self.eye_offset
        if (ex + self.eye_radius) ** 2 + (ey + self.eye_radius) ** 2 >= 1.0:
            raise ParameterError("Eyes must lie inside the face ellipse")
        mw, mh = self.mouth_size
        if (self.mouth_offset + mh) ** 2 + (mw / 2.0) ** 2 >= 1.0:
            raise ParameterError("Mouth must lie inside the face ellipse")
        for colour in (self.skin, self.iris, self.lips, self.background):
            if any(not 0.0 <= c <= 1.0 for c in colour):
                raise ParameterError(f"Colour {colour} is outside [0, 1]")
        return self

    @classmethod
    def sample(cls, seed: int, resolution: int = 64) -> "SyntheticFaceParams":
        rng = np.random.default_rng(seed)
        scale = resolution / 64.0
        a = rng.uniform(15.0, 20.0) * scale
        b = rng.uniform(a * 1.1, a * 1.35)
        b = min(b, resolution / 2.0 - 2.0 * scale)
        margin_x = resolution / 2.0 - 0.5 - a
        margin_y = resolution / 2.0 - 0.5 - b
        cx = (resolution - 1) / 2.0 + rng.uniform(-1.0, 1.0) * min(margin_x, 4.0 * scale)
        cy = (resolution - 1) / 2.0 + rng.uniform(-1.0, 1.0) * min(margin_y, 3.0 * scale)
        tone = rng.uniform(0.35, 0.9)
        return cls(
            seed=seed,
            resolution=resolution,
            skin=(tone, tone * rng.uniform(0.7, 0.85), tone * rng.uniform(0.55, 0.75)),
            center=(float(cx), float(cy)),
            axes=(float(a), float(b)),
            eye_offset=(float(rng.uniform(0.3, 0.45)), float(rng.uniform(0.15, 0.35))),
            eye_radius=float(rng.uniform(0.08, 0.14)),
            iris=tuple(float(c) for c in rng.uniform(0.05, 0.6, size=3)),
            mouth_offset=float(rng.uniform(0.35, 0.55)),
            mouth_size=(float(rng.uniform(0.25, 0.5)), float(rng.uniform(0.05, 0.12))),
            lips=(float(rng.uniform(0.5, 0.8)), float(rng.uniform(0.1, 0.3)), float(rng.uniform(0.15, 0.35))),
            background=tuple(float(c) for c in rng.uniform(0.05, 0.95, size=3)),
            texture_frequency=float(rng.uniform(0.1, 0.6)),
            texture_amplitude=float(rng.uniform(0.02, 0.12)),
            texture_phase=float(rng.uniform(0.0, 2 * math.pi)),
        ).validate()

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticFaceParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in payload.items()}).validate()

    def jittered(self, seed: int) -> "SyntheticFaceParams":
        """Another frame of the same identity: small head motion and lighting change."""
        rng = np.random.default_rng(seed)
        a, b = self.axes
        cx, cy = self.center
        size = self.resolution
        dx_room = min(cx - a + 0.5, size - 0.5 - cx - a)
        dy_room = min(cy - b + 0.5, size - 0.5 - cy - b)
        dx = float(np.clip(rng.uniform(-1.5, 1.5), -dx_room, dx_room))
        dy = float(np.clip(rng.uniform(-1.5, 1.5), -dy_room, dy_room))
        gain = float(rng.uniform(0.95, 1.05))
        return dataclasses.replace(
            self,
            seed=seed,
            center=(cx + dx, cy + dy),
            skin=tuple(float(min(1.0, c * gain)) for c in self.skin),
            texture_phase=self.texture_phase + float(rng.uniform(-0.3, 0.3)),
        ).validate()


@dataclass
class FaceSample:
    image: ImageTensor
    mask: FaceMask
    identity: str
    sample_id: str
    video_id: str = ""
    frame_index: int = 0
    path: Optional[str] = None
    params: Optional[SyntheticFaceParams] = field(default=None, repr=False)


@dataclass
class FaceDataset:
    samples: List[FaceSample]
    resolution: int = 64
    split: Optional[Split] = None
    diagnostics: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[FaceSample]:
        return iter(self.samples)

    def __getitem__(self, index: int) -> FaceSample:
        return self.samples[index]

    def images(self) -> torch.Tensor:
        if not self.samples:
            raise DataError("Dataset is empty")
        return torch.stack([s.image for s in self.samples])

    def masks(self) -> torch.Tensor:
        if not self.samples:
            raise DataError("Dataset is empty")
        return torch.stack([s.mask.data for s in self.samples])

    def identities(self) -> List[str]:
        return sorted({s.identity for s in self.samples})

    def subset(self, indices: Sequence[int], split: Optional[Split] = None) -> "FaceDataset":
        return FaceDataset([self.samples[i] for i in indices], self.resolution, split or self.split)

    def by_identity(self, identity: str) -> "FaceDataset":
        return FaceDataset([s for s in self.samples if s.identity == identity], self.resolution, self.split)

    def split_by_identity(
        self, seed: int = 0, fractions: Tuple[float, float, float] = SPLIT_FRACTIONS
    ) -> Dict[Split, "FaceDataset"]:
        """
        Partition the samples into train, val and test sets with disjoint identities.

        :param seed: Shuffle seed for the identity order
        :param fractions: Train, val and test fractions
        :return: One dataset per split
        """
        if abs(sum(fractions) - 1.0) > 1e-6 or any(f < 0 for f in fractions):
            raise ParameterError(f"Split fractions {fractions} must be non-negative and sum to 1")

        identities = self.identities()
        order = np.random.default_rng(seed).permutation(len(identities))
        shuffled = [identities[i] for i in order]
        count = len(shuffled)
        n_val = int(round(fractions[1] * count))
        n_test = int(round(fractions[2] * count))
        n_train = max(count - n_val - n_test, 1 if count else 0)
        n_val = min(n_val, count - n_train)

        groups = {
            Split.TRAIN: set(shuffled[:n_train]),
            Split.VAL: set(shuffled[n_train : n_train + n_val]),
            Split.TEST: set(shuffled[n_train + n_val :]),
        }
        return {
            split: self.subset([i for i, s in enumerate(self.samples) if s.identity in members], split)
            for split, members in groups.items()
        }


def _texture(params: SyntheticFaceParams, rng: np.random.Generator) -> np.ndarray:
    size = params.resolution
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    wave = np.sin(params.texture_frequency * xs + params.texture_phase) * np.cos(
        params.texture_frequency * 0.7 * ys - params.texture_phase
    )
    noise = rng.normal(0.0, params.texture_amplitude / 3.0, size=(size, size))
    base = np.asarray(params.background, dtype=np.float64)
    return base[:, None, None] + (params.texture_amplitude * wave + noise)[None]


def _inside(xs, ys, cx, cy, a, b) -> np.ndarray:
    return ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0


def render_synthetic_face(
    params: SyntheticFaceParams, kernel_radius: int = 3, sigma: float = 2.0
) -> Tuple[ImageTensor, FaceMask]:
    """
    Render a portrait: a shaded elliptical face with eyes and a mouth on a textured background.

    :param params: Portrait parameters
    :param kernel_radius: Soft-edge radius of the ground-truth mask
    :param sigma: Soft-edge sigma of the ground-truth mask
    :return: The ``(3, R, R)`` image and its ground-truth mask
    """
    params.validate()
    size = params.resolution
    rng = np.random.default_rng(params.seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = params.center
    a, b = params.axes

    shade = 1.0 - 0.25 * (((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2) + 0.08 * (cy - ys) / b
    face = np.asarray(params.skin)[:, None, None] * np.clip(shade, 0.5, 1.1)[None]

    ex, ey = params.eye_offset
    radius = params.eye_radius * a
    for side in (-1.0, 1.0):
        eye_x, eye_y = cx + side * ex * a, cy - ey * b
        white = _inside(xs, ys, eye_x, eye_y, radius * 1.4, radius)
        iris = _inside(xs, ys, eye_x, eye_y, radius * 0.6, radius * 0.6)
        face = np.where(white[None], 0.95, face)
        face = np.where(iris[None], np.asarray(params.iris)[:, None, None], face)

    mw, mh = params.mouth_size
    mouth = _inside(xs, ys, cx, cy + params.mouth_offset * b, mw * a, max(mh * b, 0.75))
    face = np.where(mouth[None], np.asarray(params.lips)[:, None, None], face)

    mask = synthetic_mask(size, size, params.center, params.axes, kernel_radius, sigma)
    weights = mask.data.numpy().astype(np.float64)
    image = face * weights + _texture(params, rng) * (1.0 - weights)
    image = torch.from_numpy(np.clip(image, 0.0, 1.0).astype(np.float32))
    return image, mask


def _synthetic_sample(params: SyntheticFaceParams, identity: str, frame: int, mask_config: MaskConfig) -> FaceSample:
    image, mask = render_synthetic_face(params, mask_config.kernel_radius, mask_config.sigma)
    return FaceSample(
        image=image,
        mask=mask,
        identity=identity,
        sample_id=f"{identity}_{frame:04d}",
        video_id=identity,
        frame_index=frame,
        params=params,
    )


def generate_synthetic_faces(
    n: int,
    resolution: int = 64,
    seed: int = 0,
    frames_per_identity: int = 1,
    mask_config: MaskConfig = None,
) -> FaceDataset:
    """
    Procedurally draw ``n`` portraits with exact ground-truth masks.

    :param n: Number of portraits
    :param resolution: Side length
    :param seed: Generator seed, equal seeds give identical datasets
    :param frames_per_identity: Consecutive portraits sharing one identity
    :param mask_config: Mask softening parameters
    :return: The dataset
    """
    if n < 1:
        raise ParameterError(f"At least one synthetic face is required, got {n}")
    if frames_per_identity < 1:
        raise ParameterError("frames_per_identity must be at least 1")
    mask_config = mask_config or MaskConfig()

    samples = []
    identity_count = math.ceil(n / frames_per_identity)
    for identity_index in range(identity_count):
        identity_seed = int(np.random.SeedSequence([seed, identity_index]).generate_state(1)[0])
        base = SyntheticFaceParams.sample(identity_seed, resolution)
        identity = f"synth{identity_index:05d}"
        for frame in range(frames_per_identity):
            if len(samples) == n:
                break
            params = base if frame == 0 else base.jittered(identity_seed + frame)
            samples.append(_synthetic_sample(params, identity, frame, mask_config))

    logger.debug(f"Generated {n} synthetic faces", extra={"identities": identity_count, "seed": seed})
    return FaceDataset(samples, resolution)


def generate_identity_frames(
    params: SyntheticFaceParams, count: int, seed: int = 0, identity: str = "A", mask_config: MaskConfig = None
) -> FaceDataset:
    """Frames of a single identity, as used for face-swap training."""
    mask_config = mask_config or MaskConfig()
    samples = []
    for frame in range(count):
        frame_params = params if frame == 0 else params.jittered(seed + frame)
        samples.append(_synthetic_sample(frame_params, identity, frame, mask_config))
    return FaceDataset(samples, params.resolution)


_FRAME_PATTERN = re.compile(r"^(?P<identity>.+?)(?:[_-](?P<frame>\d+))?$")


def _identity_and_frame(stem: str, position: int) -> Tuple[str, int]:
    match = _FRAME_PATTERN.match(stem)
    if match and match.group("frame") is not None:
        return match.group("identity"), int(match.group("frame"))
    return stem, position


def load_dataset(
    root: Union[str, Path],
    landmarks: Optional[Union[str, Path]] = None,
    resolution: int = 64,
    split: Optional[Split] = None,
    mask_config: MaskConfig = None,
) -> FaceDataset:
    """
    Load portraits from a directory, cropping each face to the working resolution.

    Images without landmarks fall back to the ellipse heuristic. Unreadable images are
    skipped and recorded in ``diagnostics``.

    :param root: Dataset directory, optionally holding train/val/test subdirectories
    :param landmarks: Landmark file, ``root/landmarks.txt`` when present
    :param resolution: Working resolution
    :param split: Subdirectory to load
    :param mask_config: Mask softening parameters
    :return: The dataset
    """
    root = Path(root)
    mask_config = mask_config or MaskConfig()
    directory = root / Split(split).value if split is not None else root
    if not directory.is_dir():
        raise DataError(f"Dataset directory {directory} does not exist")

    if landmarks is None and (root / LANDMARK_FILENAME).exists():
        landmarks = root / LANDMARK_FILENAME
    try:
        records = read_landmark_file(landmarks) if landmarks is not None else {}
    except OSError as e:
        raise DataError(f"Cannot read landmark file {landmarks} - {e}") from e
    file_detector = LandmarkFileDetector(records)
    heuristic = EllipseHeuristicDetector()

    paths = sorted(p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DataError(f"No images found in {directory}")

    samples, diagnostics = [], []
    for position, path in enumerate(paths):
        key = path.relative_to(root).as_posix()
        try:
            frame = load_image(path)
        except OSError as e:
            diagnostics.append(f"{key}: {e}")
            logger.warning(f"Skipping unreadable image {key} - {e}")
            continue

        detector = file_detector
        if not file_detector.has(key):
            logger.warning(f"No landmarks for {key}, using the ellipse heuristic")
            detector = heuristic
        try:
            portrait = prepare_portrait(frame, detector, resolution, key, position, mask_config)
        except (MaskError, ParameterError) as e:
            if detector is heuristic:
                portrait = None
            else:
                logger.warning(f"Invalid landmarks for {key}, using the ellipse heuristic - {e}")
                try:
                    portrait = prepare_portrait(frame, heuristic, resolution, key, position, mask_config)
                except (MaskError, ParameterError) as retry_error:
                    e, portrait = retry_error, None
            if portrait is None:
                diagnostics.append(f"{key}: {e}")
                logger.warning(f"Skipping image {key}, no usable face mask - {e}")
                continue

        identity, frame_index = _identity_and_frame(path.stem, position)
        samples.append(
            FaceSample(
                image=portrait.image,
                mask=portrait.mask,
                identity=identity,
                sample_id=Path(key).with_suffix("").as_posix(),
                video_id=identity,
                frame_index=frame_index,
                path=str(path),
            )
        )

    if not samples:
        raise DataError(f"None of the {len(paths)} images in {directory} could be read")

    logger.info(
        f"Loaded {len(samples)} images from {directory}",
        extra={"skipped": len(diagnostics)},
    )
    return FaceDataset(samples, resolution, Split(split) if split is not None else None, diagnostics)


def _record_dict(record) -> dict:
    if isinstance(record, dict):
        return dict(record)
    if hasattr(record, "to_dict"):
        return record.to_dict()
    return dataclasses.asdict(record)


def _columns(record_type: Optional[type], rows: List[dict]) -> List[str]:
    if record_type is not None and dataclasses.is_dataclass(record_type):
        return [f.name for f in dataclasses.fields(record_type) if f.repr]
    if rows:
        return list(rows[0].keys())
    return []


def write_report(
    records: Sequence,
    path: Union[str, Path],
    fmt: Optional[Union[str, ReportFormat]] = None,
    record_type: Optional[type] = None,
) -> Path:
    """
    Write records as CSV or JSON through a temporary file.

    :param records: Homogeneous MetricRecord / VerdictRecord / dict records
    :param path: Destination, the suffix picks the format when ``fmt`` is omitted
    :param fmt: ``csv`` or ``json``
    :param record_type: Record class, names the columns of an empty report
    :return: The written path
    """
    path = Path(path)
    fmt = ReportFormat(fmt or path.suffix.lstrip(".").lower() or "csv")

    kinds = {type(r) for r in records}
    if len(kinds) > 1:
        raise ValueError(f"Report records must share one type, got {sorted(k.__name__ for k in kinds)}")
    record_type = record_type or (next(iter(kinds)) if kinds and not issubclass(next(iter(kinds)), dict) else None)

    rows = [_record_dict(r) for r in records]
    columns = _columns(record_type, rows)

    if fmt == ReportFormat.JSON:
        payload = {"report_version": REPORT_VERSION, "columns": columns, "records": rows}
        content = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    else:
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
        content = buffer.getvalue()

    atomic_write_text(path, content)
    logger.debug(f"Wrote {len(rows)} records to {path}")
    return path


def _coerce(value: str, hint):
    if value == "":
        return None if type(None) in typing.get_args(hint) else value
    args = [a for a in typing.get_args(hint) if a is not type(None)]
    target = args[0] if args else hint
    if target is bool:
        return value == "True"
    if target in (int, float):
        return target(value)
    return value


def read_report(path: Union[str, Path], record_type: Optional[Type] = None) -> List:
    """
    Read a report written by ``write_report``.

    :param path: Report path
    :param record_type: Dataclass to rebuild, plain dicts when omitted
    :return: The records
    """
    path = Path(path)
    if path.suffix.lower() == ".json":
        with open(path) as f:
            rows = json.load(f)["records"]
    else:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if record_type is not None:
            hints = typing.get_type_hints(record_type)
            rows = [{k: _coerce(v, hints.get(k, str)) for k, v in row.items()} for row in rows]

    if record_type is None:
        return rows
    return [record_type(**row) for row in rows]


def summarise_per_video(records: Sequence[MetricRecord]) -> List[dict]:
    """Mean PSNR and SSIM over the frames of each video, per condition and vaccination status."""
    groups: Dict[tuple, List[MetricRecord]] = {}
    for record in records:
        key = (record.system, record.video_id, record.condition, record.magnitude, record.vaccinated, record.region)
        groups.setdefault(key, []).append(record)

    rows = []
    for (system, video_id, condition, magnitude, vaccinated, region), items in sorted(
        groups.items(), key=lambda item: tuple(str(part) for part in item[0])
    ):
        rows.append(
            {
                "system": system,
                "video_id": video_id,
                "condition": condition,
                "magnitude": magnitude,
                "vaccinated": vaccinated,
                "region": region,
                "frames": len(items),
                "psnr_mean": mean_of(items, "psnr"),
                "ssim_mean": mean_of(items, "ssim"),
            }
        )
    return rows


@dataclass
class DataConfig(ConfigSection):
    """Where portraits come from: a directory, or the synthetic generator when ``root`` is unset."""

    root: Optional[str] = None
    landmarks: Optional[str] = None
    synthetic: int = 200
    frames_per_identity: int = 4

    def validate(self):
        if self.synthetic < 1 or self.frames_per_identity < 1:
            raise ConfigError("synthetic and frames_per_identity must be at least 1")
        return self


def build_dataset(
    cfg: DataConfig, resolution: int = 64, seed: int = 0, mask_config: MaskConfig = None
) -> FaceDataset:
    if cfg.root is None:
        return generate_synthetic_faces(
            cfg.synthetic, resolution, seed, cfg.frames_per_identity, mask_config
        )
    return load_dataset(cfg.root, cfg.landmarks, resolution, mask_config=mask_config)


def split_dataset(dataset: FaceDataset, seed: int = 0) -> Dict[Split, FaceDataset]:
    """Split by identity, honouring train/val/test subdirectories when the files have them."""
    names = {s.value for s in Split}
    located = []
    for sample in dataset.samples:
        parts = Path(sample.sample_id).parts[:-1] if sample.path else ()
        located.append(next((Split(p) for p in parts if p in names), None))
    if located and all(split is not None for split in located):
        return {
            split: dataset.subset([i for i, s in enumerate(located) if s == split], split)
            for split in Split
        }
    return dataset.split_by_identity(seed)
