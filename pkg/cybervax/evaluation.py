"""Evaluation matrix over attacks and degradations, with static summary plots."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from cybervax.attacks import (  # noqa: E402
    DegradationKind,
    DegradationRanges,
    DegradationSpec,
    apply_degradation,
)
from cybervax.config import ConfigSection  # noqa: E402
from cybervax.data import FaceDataset, summarise_per_video, write_report  # noqa: E402
from cybervax.exceptions import ConfigError, DataError  # noqa: E402
from cybervax.masks import AffineRanges, random_affine, sample_affine_params  # noqa: E402
from cybervax.metrics import (  # noqa: E402
    ClassificationReport,
    FaceEmbedder,
    MetricRecord,
    MetricRegion,
    RandomProjectionEmbedder,
    classification_report,
    mean_of,
    measure,
    region_mask,
)
from cybervax.models import ImmuneSystem, InpaintingBaseline, Validator, forward_validator  # noqa: E402
from cybervax.pipeline import neutralise_image, vaccinate_image  # noqa: E402
from cybervax.storage import atomic_write_json  # noqa: E402

logger = logging.getLogger(__name__)

IMMUNE_SYSTEM = "immune_system"
INPAINTING_BASELINE = "inpainting_baseline"
DEFAULT_CONDITIONS = ("none", "blur", "brightness", "contrast", "hue", "hybrid")


@dataclass
class EvaluationConfig(ConfigSection):
    conditions: Tuple[str, ...] = DEFAULT_CONDITIONS
    region: str = MetricRegion.FACE.value
    sweep: bool = True
    degradation: DegradationRanges = field(default_factory=DegradationRanges)
    mask_jitter: bool = False
    jitter: AffineRanges = field(
        default_factory=lambda: AffineRanges(rotation_deg=2.0, translate_frac=0.01, scale=(0.99, 1.01))
    )
    threshold: float = 0.5
    embedder_dim: int = 128
    seed: int = 0
    max_samples: int = 0
    plots: bool = True

    def validate(self):
        try:
            self.conditions = tuple(DegradationKind(c).value for c in self.conditions)
            MetricRegion(self.region)
        except ValueError as e:
            raise ConfigError(f"Invalid evaluation setting - {e}") from e
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.max_samples < 0 or self.embedder_dim <= 0:
            raise ConfigError("max_samples must be non-negative and embedder_dim positive")
        self.degradation.validate()
        self.jitter.validate()
        return self


@dataclass
class EvaluationResult:
    records: List[MetricRecord] = field(default_factory=list)
    sweep: List[MetricRecord] = field(default_factory=list)
    imperceptibility: List[MetricRecord] = field(default_factory=list)
    revaccination: List[MetricRecord] = field(default_factory=list)
    ablation: List[MetricRecord] = field(default_factory=list)
    classification: Dict[str, ClassificationReport] = field(default_factory=dict)
    scores: Dict[str, List[Tuple[float, bool]]] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def mean(self, attribute: str, **filters) -> Optional[float]:
        """Mean of a metric over the matrix rows matching every filter."""
        rows = [r for r in self.records if all(getattr(r, k) == v for k, v in filters.items())]
        return mean_of(rows, attribute)


def condition_spec(condition: str, seed: int, ranges: DegradationRanges) -> DegradationSpec:
    """The degradation of a matrix condition: a training-range sample, or full strength for hybrid."""
    kind = DegradationKind(condition)
    if kind == DegradationKind.NONE:
        return DegradationSpec(kind, 0.0, seed)
    if kind == DegradationKind.HYBRID:
        return DegradationSpec(kind, 1.0, seed)
    low, high = ranges.training_range(kind)
    return DegradationSpec(kind, float(np.random.default_rng(seed).uniform(low, high)), seed)


def _sample_seed(base: int, index: int, salt: int) -> int:
    return int(np.random.SeedSequence([base, index, salt]).generate_state(1)[0])


def _face_intensity(image: torch.Tensor, mask: torch.Tensor) -> float:
    selection = region_mask(mask, MetricRegion.FACE)
    count = float(selection.sum()) * image.shape[0]
    return float((image * selection).sum()) / count if count else 0.0


def evaluate_system(
    system: ImmuneSystem,
    dataset: FaceDataset,
    cfg: EvaluationConfig = None,
    validators: Optional[Dict[str, Validator]] = None,
    baseline: Optional[InpaintingBaseline] = None,
    embedder: Optional[FaceEmbedder] = None,
) -> EvaluationResult:
    """
    Measure imperceptibility, neutralisation under every condition and validator accuracy.

    :param system: Trained immune system
    :param dataset: Held-out portraits
    :param cfg: Evaluation configuration
    :param validators: Validators keyed by name
    :param baseline: Inpainting baseline for the ablation rows
    :param embedder: Face embedder for identity similarity
    :return: All rows and summaries
    """
    cfg = (cfg or EvaluationConfig()).validate()
    validators = validators or {}
    samples = dataset.samples[: cfg.max_samples] if cfg.max_samples else dataset.samples
    if not samples:
        raise DataError("Evaluation dataset is empty")
    embedder = embedder or RandomProjectionEmbedder(dataset.resolution, cfg.embedder_dim, cfg.seed)
    region = MetricRegion(cfg.region)

    system.eval()
    if baseline is not None:
        baseline.eval()
    for validator in validators.values():
        validator.eval()

    result = EvaluationResult(scores={name: [] for name in validators})
    intensities = []
    logger.info(
        f"Evaluating {len(samples)} samples over {len(cfg.conditions)} conditions",
        extra={"samples": len(samples), "validators": sorted(validators)},
    )

    for index, sample in enumerate(samples):
        original, mask = sample.image, sample.mask.data
        labels = {"sample_id": sample.sample_id, "video_id": sample.video_id}

        vaccinated = vaccinate_image(system, original, mask)
        result.imperceptibility.append(
            measure(vaccinated, original, condition="none", vaccinated=True, seed=cfg.seed, **labels)
        )
        revaccinated = vaccinate_image(system, vaccinated, mask)
        result.revaccination.append(
            measure(revaccinated, vaccinated, condition="revaccination", vaccinated=True, seed=cfg.seed, **labels)
        )

        detected = mask
        if cfg.mask_jitter:
            params = sample_affine_params(_sample_seed(cfg.seed, index, 1), cfg.jitter)
            detected = random_affine(mask, params).data

        for condition in cfg.conditions:
            spec = condition_spec(condition, _sample_seed(cfg.seed, index, 2), cfg.degradation)
            for is_vaccinated, source in ((True, vaccinated), (False, original)):
                neutralised = neutralise_image(system, apply_degradation(source, spec, cfg.degradation), detected)
                result.records.append(
                    measure(
                        neutralised,
                        original,
                        mask,
                        region,
                        condition=condition,
                        magnitude=spec.magnitude,
                        seed=spec.seed,
                        vaccinated=is_vaccinated,
                        **labels,
                    )
                )
                if condition == DegradationKind.NONE.value:
                    if not is_vaccinated:
                        intensities.append(_face_intensity(neutralised, mask))
                    with torch.no_grad():
                        for name, validator in validators.items():
                            probability = float(forward_validator(validator, neutralised))
                            result.scores[name].append((probability, is_vaccinated))

        if cfg.sweep:
            for kind in cfg.degradation.sweep_kinds:
                for magnitude in cfg.degradation.sweep_magnitudes(kind):
                    spec = DegradationSpec(kind, magnitude, _sample_seed(cfg.seed, index, 3))
                    for is_vaccinated, source in ((True, vaccinated), (False, original)):
                        neutralised = neutralise_image(system, apply_degradation(source, spec), detected)
                        result.sweep.append(
                            measure(
                                neutralised,
                                original,
                                mask,
                                region,
                                condition=kind,
                                magnitude=magnitude,
                                seed=spec.seed,
                                vaccinated=is_vaccinated,
                                **labels,
                            )
                        )

        neutralised = neutralise_image(system, vaccinated, detected)
        result.ablation.append(
            measure(
                neutralised,
                original,
                mask,
                MetricRegion.FACE,
                embedder,
                condition="none",
                vaccinated=True,
                system=IMMUNE_SYSTEM,
                **labels,
            )
        )
        if baseline is not None:
            inpainted = neutralise_image(baseline, original, detected)
            result.ablation.append(
                measure(
                    inpainted,
                    original,
                    mask,
                    MetricRegion.FACE,
                    embedder,
                    condition="none",
                    vaccinated=False,
                    system=INPAINTING_BASELINE,
                    **labels,
                )
            )

    result.classification = {
        name: classification_report(scores, cfg.threshold) for name, scores in result.scores.items()
    }
    result.summary = summarise(result, intensities)
    logger.info("Evaluation finished", extra={"summary": result.summary})
    return result


def summarise(result: EvaluationResult, intensities: List[float]) -> dict:
    conditions = sorted({r.condition for r in result.records})
    summary = {
        "psnr_vaccinated": mean_of(result.imperceptibility, "psnr"),
        "psnr_revaccinated": mean_of(result.revaccination, "psnr"),
        "unvaccinated_face_intensity": sum(intensities) / len(intensities) if intensities else None,
        "ssim_by_condition": {
            c: result.mean("ssim", condition=c, vaccinated=True) for c in conditions
        },
        "ssim_unvaccinated_by_condition": {
            c: result.mean("ssim", condition=c, vaccinated=False) for c in conditions
        },
        "ablation": {},
        "classification": {
            name: {
                "accuracy": report.accuracy,
                "tpr": report.tpr,
                "tnr": report.tnr,
                "positives": report.positives,
                "negatives": report.negatives,
            }
            for name, report in result.classification.items()
        },
    }
    for system_name in (IMMUNE_SYSTEM, INPAINTING_BASELINE):
        rows = [r for r in result.ablation if r.system == system_name]
        if rows:
            summary["ablation"][system_name] = {
                "ssim_face": mean_of(rows, "ssim"),
                "identity_sim": mean_of(rows, "identity_sim"),
            }
    if result.sweep:
        summary["sweep_ssim"] = sweep_curves(result.sweep)
    return summary


def sweep_curves(rows: List[MetricRecord]) -> Dict[str, Dict[str, List[Tuple[float, float]]]]:
    """Mean SSIM per magnitude for each degradation kind, split into vaccinated and unvaccinated inputs."""
    curves = {}
    for kind in dict.fromkeys(r.condition for r in rows):
        curves[kind] = {}
        for label, vaccinated in (("vaccinated", True), ("unvaccinated", False)):
            selected = [r for r in rows if r.condition == kind and r.vaccinated == vaccinated]
            magnitudes = sorted({r.magnitude for r in selected})
            curves[kind][label] = [
                (m, mean_of([r for r in selected if r.magnitude == m], "ssim")) for m in magnitudes
            ]
    return curves


def write_evaluation(result: EvaluationResult, directory: Union[str, Path], plots: bool = True) -> List[Path]:
    """
    Write every report of an evaluation, and the plots when asked.

    :param result: Evaluation result
    :param directory: Output directory
    :param plots: Whether to render the plot images
    :return: The written paths
    """
    directory = Path(directory)
    written = [
        write_report(result.records, directory / "evaluation.csv", record_type=MetricRecord),
        write_report(result.sweep, directory / "sweep.csv", record_type=MetricRecord),
        write_report(result.imperceptibility, directory / "imperceptibility.csv", record_type=MetricRecord),
        write_report(result.revaccination, directory / "revaccination.csv", record_type=MetricRecord),
        write_report(result.ablation, directory / "ablation.csv", record_type=MetricRecord),
        write_report(summarise_per_video(result.records), directory / "per_video.csv"),
        atomic_write_json(directory / "summary.json", result.summary),
    ]
    if plots:
        written += plot_report(result, directory / "plots")
    return written


def _save(figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    figure.tight_layout()
    figure.savefig(path, format="png", dpi=100, metadata={"Software": None})
    plt.close(figure)
    return path


def plot_report(result: EvaluationResult, directory: Union[str, Path]) -> List[Path]:
    """
    Render distribution plots per condition, one sweep curve per degradation kind and validator bars.

    :param result: Evaluation result
    :param directory: Plot directory
    :return: The written image paths
    """
    directory = Path(directory)
    written = []
    conditions = list(dict.fromkeys(r.condition for r in result.records))

    for metric in ("psnr", "ssim"):
        figure, axis = plt.subplots(figsize=(7, 4))
        for offset, vaccinated in ((-0.18, True), (0.18, False)):
            values = [
                [getattr(r, metric) for r in result.records if r.condition == c and r.vaccinated == vaccinated]
                for c in conditions
            ]
            positions = [i + offset for i in range(len(conditions))]
            if any(values):
                axis.boxplot(values, positions=positions, widths=0.3, showfliers=False)
        axis.set_xticks(range(len(conditions)))
        axis.set_xticklabels(conditions)
        axis.set_ylabel(metric.upper())
        axis.set_title(f"Neutralised {metric.upper()} per condition (left vaccinated, right unvaccinated)")
        written.append(_save(figure, directory / f"{metric}_by_condition.png"))

    for kind, curves in sweep_curves(result.sweep).items():
        figure, axis = plt.subplots(figsize=(5, 3.5))
        for label, points in curves.items():
            if points:
                axis.plot([m for m, _ in points], [s for _, s in points], marker="o", label=label)
        axis.set_xlabel(f"{kind} magnitude")
        axis.set_ylabel("SSIM")
        axis.set_title(f"Neutralisation under {kind}")
        axis.legend()
        written.append(_save(figure, directory / f"sweep_{kind}.png"))

    if result.classification:
        names = sorted(result.classification)
        figure, axis = plt.subplots(figsize=(6, 3.5))
        width = 0.25
        for shift, statistic in ((-width, "accuracy"), (0.0, "tpr"), (width, "tnr")):
            values = [getattr(result.classification[n], statistic) or 0.0 for n in names]
            axis.bar([i + shift for i in range(len(names))], values, width, label=statistic)
        axis.set_xticks(range(len(names)))
        axis.set_xticklabels(names)
        axis.set_ylim(0.0, 1.0)
        axis.legend()
        axis.set_title("Validator classification")
        written.append(_save(figure, directory / "validators.png"))

    return written
