import argparse
import dataclasses
import itertools
import logging
import sys
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import torch
from environs import Env
from PIL import Image, ImageDraw

from cybervax import __version__
from cybervax.attacks import (
    FaceSwapConfig,
    faceswap_attack,
    load_faceswap,
    mask_attack,
    save_faceswap,
    train_faceswap,
)
from cybervax.config import (
    ConfigSection,
    deep_merge,
    load_config_file,
    read_environment,
    read_log_level,
    select_device,
    set_dotted,
)
from cybervax.data import (
    IMAGE_SUFFIXES,
    DataConfig,
    FaceDataset,
    Split,
    SyntheticFaceParams,
    build_dataset,
    generate_identity_frames,
    split_dataset,
    write_report,
)
from cybervax.evaluation import EvaluationConfig, evaluate_system, write_evaluation
from cybervax.exceptions import (
    CheckpointError,
    ConfigError,
    CyberVaxError,
    DataError,
    DimensionError,
    MaskError,
    MetricError,
    NeutralisationError,
    NonFiniteLossError,
    ParameterError,
    VaccinationError,
)
from cybervax.imaging import ImageTensor, load_image, resize_image, save_image, to_array
from cybervax.masks import FallbackDetector, LandmarkFileDetector, MaskConfig
from cybervax.metrics import MetricRegion, region_mask, ssim
from cybervax.models import (
    UNetConfig,
    Validator,
    ValidatorArchitecture,
    ValidatorConfig,
    load_baseline,
    load_immune_system,
    load_validator,
    save_validator,
    validator_checkpoint_name,
)
from cybervax.pipeline import (
    SequenceMode,
    VerdictRecord,
    neutralise,
    process_sequence,
    vaccinate_image,
    validate,
)
from cybervax.storage import LocalCheckpointStorage, atomic_write_json
from cybervax.training import (
    TrainConfig,
    ValidatorTrainConfig,
    train_immune_system,
    train_inpainting_baseline,
    train_validator,
)

logger = logging.getLogger(__name__)

EFFECTIVE_CONFIG = "effective_config.json"
ATTACK_KINDS = ("mask", "faceswap")


class ExitCode(IntEnum):
    OK = 0
    NON_FINITE_LOSS = 1
    CONFIG = 2
    DATA = 3
    CHECKPOINT = 4
    PARTIAL = 5
    FAILURE = 6


ERROR_EXIT_CODES = (
    (NonFiniteLossError, ExitCode.NON_FINITE_LOSS),
    (ConfigError, ExitCode.CONFIG),
    (ParameterError, ExitCode.CONFIG),
    (DimensionError, ExitCode.CONFIG),
    (MaskError, ExitCode.DATA),
    (MetricError, ExitCode.DATA),
    (DataError, ExitCode.DATA),
    (CheckpointError, ExitCode.CHECKPOINT),
    (VaccinationError, ExitCode.PARTIAL),
    (NeutralisationError, ExitCode.PARTIAL),
)


def exit_code_for(error: CyberVaxError) -> ExitCode:
    for kind, code in ERROR_EXIT_CODES:
        if isinstance(error, kind):
            return code
    return ExitCode.FAILURE


@dataclass
class CommandConfig(ConfigSection):
    """The effective settings of one command, merged from every configuration layer."""

    command: str = "train"
    out: str = "runs/default"
    seed: int = 0
    resolution: int = 64
    device: str = "cpu"
    log_level: str = "INFO"
    resume: bool = False
    inputs: Tuple[str, ...] = ()
    workers: int = 1
    threshold: float = 0.5
    architectures: Tuple[str, ...] = ("mlp", "small_cnn")
    attack: str = "mask"
    target: str = ""
    attack_frames: int = 16
    baseline: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    validator_train: ValidatorTrainConfig = field(default_factory=ValidatorTrainConfig)
    faceswap: FaceSwapConfig = field(default_factory=FaceSwapConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command {self.command}")
        if self.attack not in ATTACK_KINDS:
            raise ConfigError(f"Unknown attack {self.attack}, use one of {ATTACK_KINDS}")
        try:
            self.architectures = tuple(ValidatorArchitecture(a).value for a in self.architectures)
        except ValueError as e:
            raise ConfigError(f"Unknown validator architecture - {e}") from e
        if self.workers < 1 or self.attack_frames < 1:
            raise ConfigError("workers and attack_frames must be at least 1")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.unet.resolution != self.resolution:
            raise ConfigError(
                f"Network resolution {self.unet.resolution} differs from the run resolution {self.resolution}"
            )
        for section in (self.data, self.mask, self.unet, self.train, self.validator_train, self.faceswap, self.evaluation):
            section.validate()
        return self

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def storage(self) -> LocalCheckpointStorage:
        return LocalCheckpointStorage(self.out_dir / "checkpoints")


@dataclass(frozen=True)
class Option:
    """A command-line flag whose destination is a dotted key of the configuration tree.

    Valued flags are mirrored by a ``CYBERVAX_`` environment variable named after the flag.
    """

    flag: str
    dest: str
    help: str
    type: Optional[Callable] = None
    action: Optional[str] = None
    nargs: Optional[str] = None
    choices: Optional[Sequence[str]] = None

    @property
    def env_name(self) -> str:
        return self.flag.lstrip("-").replace("-", "_").upper()

    def env_reader(self) -> Optional[Callable[[Env, str], Any]]:
        if self.action is not None:
            return None
        if self.nargs is not None:
            return lambda env, name: env.list(name, None)
        reader = {int: "int", float: "float"}.get(self.type, "str")
        return lambda env, name: getattr(env, reader)(name, None)

    def add_to(self, parser: argparse.ArgumentParser):
        kwargs = {"dest": self.dest, "help": self.help, "default": argparse.SUPPRESS}
        if self.action is not None:
            kwargs["action"] = self.action
        else:
            kwargs["type"] = self.type or str
        if self.nargs is not None:
            kwargs["nargs"] = self.nargs
        if self.choices is not None:
            kwargs["choices"] = self.choices
        parser.add_argument(self.flag, **kwargs)


GLOBAL_OPTIONS = (
    Option("--out", "out", "Output directory"),
    Option("--seed", "seed", "Global seed", int),
    Option("--resolution", "resolution", "Working resolution", int),
    Option("--device", "device", "cpu or cuda[:index]"),
    Option("--log-level", "log_level", "Logging level"),
)

DATA_OPTIONS = (
    Option("--data", "data.root", "Dataset directory, synthetic faces when omitted"),
    Option("--landmarks", "data.landmarks", "Landmark file"),
    Option("--synthetic", "data.synthetic", "Number of synthetic faces", int),
)

TRAIN_OPTIONS = DATA_OPTIONS + (
    Option("--steps", "train.steps", "Training steps", int),
    Option("--batch-size", "train.batch_size", "Batch size", int),
    Option("--lr", "train.lr", "Learning rate", float),
    Option("--w-imp", "train.weights.imp", "Imperceptibility weight", float),
    Option("--w-rev", "train.weights.rev", "Reversibility weight", float),
    Option("--w-val", "train.weights.val", "Validatability weight", float),
    Option("--checkpoint-every", "train.checkpoint_every", "Checkpoint cadence in steps", int),
    Option("--width", "unet.base_width", "U-Net base width", int),
    Option("--no-augment", "train.augment", "Disable degradations during training", action="store_false"),
)

SEQUENCE_OPTIONS = (
    Option("--landmarks", "data.landmarks", "Landmark file"),
    Option("--workers", "workers", "Worker threads", int),
    Option("--threshold", "threshold", "Verdict threshold", float),
)

COMMAND_OPTIONS: Dict[str, Tuple[Option, ...]] = {
    "train": TRAIN_OPTIONS
    + (
        Option("--validation-every", "train.validation_every", "Validation cadence in steps", int),
        Option("--resume", "resume", "Continue from the stored checkpoint", action="store_true"),
        Option(
            "--literal-neutraliser-input",
            "train.mask_neutraliser_input",
            "Feed the unmasked degraded image to the neutraliser during training",
            action="store_false",
        ),
        Option(
            "--degrade-unvaccinated",
            "train.degrade_unvaccinated",
            "Degrade the unvaccinated path as well",
            action="store_true",
        ),
    ),
    "train-validator": DATA_OPTIONS
    + (
        Option("--arch", "architectures", "Validator architectures", nargs="+", choices=[a.value for a in ValidatorArchitecture]),
        Option("--steps", "validator_train.steps", "Training steps", int),
    ),
    "train-baseline": TRAIN_OPTIONS,
    "train-faceswap": DATA_OPTIONS
    + (
        Option("--steps", "faceswap.steps", "Training steps", int),
        Option("--frames", "faceswap.frames", "Synthetic frames per identity", int),
    ),
    "vaccinate": SEQUENCE_OPTIONS,
    "neutralise": SEQUENCE_OPTIONS,
    "validate": (Option("--threshold", "threshold", "Verdict threshold", float),),
    "attack": DATA_OPTIONS
    + (
        Option("--attack", "attack", "Attack to apply", choices=ATTACK_KINDS),
        Option("--target", "target", "Face-swap target identity"),
        Option("--frames", "attack_frames", "Face-swap source frames", int),
        Option("--threshold", "threshold", "Verdict threshold", float),
    ),
    "evaluate": DATA_OPTIONS
    + (
        Option("--max-samples", "evaluation.max_samples", "Evaluate at most this many samples", int),
        Option("--no-sweep", "evaluation.sweep", "Skip the degradation sweeps", action="store_false"),
        Option("--mask-jitter", "evaluation.mask_jitter", "Misalign the detected mask", action="store_true"),
        Option("--no-plots", "evaluation.plots", "Skip the plots", action="store_false"),
        Option("--no-baseline", "baseline", "Skip the inpainting baseline", action="store_false"),
    ),
}

INPUT_COMMANDS = ("vaccinate", "neutralise", "validate")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="config_file", default=argparse.SUPPRESS, help="JSON config file")
    for option in GLOBAL_OPTIONS:
        option.add_to(common)

    parser = argparse.ArgumentParser(prog="cybervax", description="Cyber vaccination against deepfakes")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command")
    for command, options in COMMAND_OPTIONS.items():
        sub = subparsers.add_parser(command, parents=[common])
        for option in options:
            option.add_to(sub)
        if command in INPUT_COMMANDS:
            sub.add_argument("inputs", nargs="+", help="Image files or directories")
    return parser


def build_command_config(command: str, args: Dict[str, Any], read_dotenv: bool = True) -> CommandConfig:
    """
    Merge defaults, the config file, ``CYBERVAX_`` variables and flags, in increasing precedence.

    :param command: Subcommand name
    :param args: Parsed flags keyed by dotted destination
    :param read_dotenv: Whether to load a ``.env`` file
    :return: The validated command configuration
    """
    options = GLOBAL_OPTIONS + COMMAND_OPTIONS[command]
    readers = {o.env_name: o.env_reader() for o in options if o.env_reader() is not None}
    readers["CONFIG"] = lambda env, name: env.str(name, None)
    environment = read_environment(readers, read_dotenv)

    tree: Dict[str, Any] = {}
    config_file = args.get("config_file") or environment.get("CONFIG")
    if config_file:
        tree = deep_merge(tree, load_config_file(config_file))
    for option in options:
        if option.env_name in environment and option.env_reader() is not None:
            set_dotted(tree, option.dest, environment[option.env_name])
    for option in options:
        if option.dest in args:
            set_dotted(tree, option.dest, args[option.dest])
    if "inputs" in args:
        tree["inputs"] = list(args["inputs"])
    tree["command"] = command

    seed = tree.get("seed", CommandConfig.seed)
    resolution = tree.get("resolution", CommandConfig.resolution)
    for section in ("train", "validator_train", "faceswap", "evaluation"):
        tree.setdefault(section, {}).setdefault("seed", seed)
    for section in ("unet", "faceswap"):
        tree.setdefault(section, {}).setdefault("resolution", resolution)

    return CommandConfig.from_dict(tree)


def _splits(cfg: CommandConfig) -> Dict[Split, FaceDataset]:
    dataset = build_dataset(cfg.data, cfg.resolution, cfg.seed, cfg.mask)
    return split_dataset(dataset, cfg.seed)


def _held_out(cfg: CommandConfig) -> FaceDataset:
    splits = _splits(cfg)
    for split in (Split.TEST, Split.VAL, Split.TRAIN):
        if len(splits[split]):
            if split != Split.TEST:
                logger.warning(f"Test split is empty, using the {split.value} split")
            return splits[split]
    raise DataError("Dataset has no samples")


def _load_validators(cfg: CommandConfig, storage: LocalCheckpointStorage, device) -> Dict[str, Validator]:
    validators = {}
    for architecture in cfg.architectures:
        name = validator_checkpoint_name(architecture)
        if storage.exists(name):
            validator, _ = load_validator(storage, name)
            validators[architecture] = validator.to(device)
    return validators


def cmd_train(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    splits = _splits(cfg)
    if not len(splits[Split.TRAIN]):
        raise DataError("Training split is empty")
    validation = splits[Split.VAL] if len(splits[Split.VAL]) else None

    _, log = train_immune_system(
        splits[Split.TRAIN], cfg.train, cfg.unet, cfg.storage(), cfg.resume, device, validation
    )
    log.write(cfg.out_dir)
    return ExitCode.OK


def cmd_train_validator(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    storage = cfg.storage()
    system, _ = load_immune_system(storage)
    system.to(device)
    train = _splits(cfg)[Split.TRAIN]

    for architecture in cfg.architectures:
        with torch.random.fork_rng():
            torch.manual_seed(cfg.validator_train.seed)
            validator = Validator(ValidatorConfig(architecture=architecture, resolution=cfg.resolution))
        train_validator(validator, system, train, cfg.validator_train)
        metrics = {"loss": validator.history[-1]} if validator.history else {}
        save_validator(validator, storage, validator_checkpoint_name(architecture), metrics)
    return ExitCode.OK


def cmd_train_baseline(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    train = _splits(cfg)[Split.TRAIN]
    _, log = train_inpainting_baseline(train, cfg.train, cfg.unet, cfg.storage(), device)
    log.write(cfg.out_dir, "baseline_log")
    return ExitCode.OK


def _identity_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index, 7]).generate_state(1)[0])


def cmd_train_faceswap(cfg: CommandConfig) -> int:
    extra = {}
    if cfg.data.root is None:
        identities = ("A", "B")
        params = {
            name: SyntheticFaceParams.sample(_identity_seed(cfg.seed, i), cfg.resolution)
            for i, name in enumerate(identities)
        }
        frames = {
            name: generate_identity_frames(params[name], cfg.faceswap.frames, cfg.seed, name, cfg.mask)
            for name in identities
        }
        extra["synthetic"] = {name: dataclasses.asdict(p) for name, p in params.items()}
    else:
        dataset = build_dataset(cfg.data, cfg.resolution, cfg.seed, cfg.mask)
        names = dataset.identities()
        if len(names) < 2:
            raise DataError(f"Face-swap training needs two identities, found {names}")
        identities = (names[0], names[1])
        frames = {name: dataset.by_identity(name) for name in identities}

    model = train_faceswap(frames[identities[0]], frames[identities[1]], cfg.faceswap, identities)
    save_faceswap(model, cfg.storage(), extra)
    return ExitCode.OK


CAPTION_HEIGHT = 14


def save_triptych(panels: Sequence[ImageTensor], path: Path, caption: Optional[str] = None) -> Path:
    """
    Place the panels side by side in one PNG.

    :param panels: Images of equal height
    :param path: Output file
    :param caption: Text drawn on a strip below the panels, if any
    :return: The written path
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    image = Image.fromarray(np.concatenate([to_array(p) for p in panels], axis=1))
    if caption:
        captioned = Image.new("RGB", (image.width, image.height + CAPTION_HEIGHT))
        captioned.paste(image, (0, 0))
        ImageDraw.Draw(captioned).text((2, image.height + 1), caption, fill=(255, 255, 255))
        image = captioned
    image.save(path, format="PNG")
    return path


def triptych_caption(verdict: Optional[VerdictRecord]) -> str:
    if verdict is None:
        return "no validator"
    label = "vaccinated" if verdict.vaccinated else "unvaccinated"
    return f"verdict {label} p={verdict.probability:.2f}"


def _attack_samples(cfg: CommandConfig, metadata: dict, source: str) -> FaceDataset:
    synthetic = metadata.get("synthetic")
    if synthetic is None:
        return build_dataset(cfg.data, cfg.resolution, cfg.seed, cfg.mask).by_identity(source)
    params = SyntheticFaceParams.from_dict(synthetic[source])
    # frames beyond the training seeds are held out
    return generate_identity_frames(params, cfg.attack_frames, cfg.seed + 1_000_003, source, cfg.mask)


def cmd_attack(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    storage = cfg.storage()
    system, _ = load_immune_system(storage)
    system.to(device)
    validators = _load_validators(cfg, storage, device)
    validator = next(iter(validators.values()), None)

    model, target = None, None
    if cfg.attack == "faceswap":
        model, metadata = load_faceswap(storage)
        target = cfg.target or model.identities[1]
        if target not in model.identities:
            raise ParameterError(f"Unknown identity {target}, known: {list(model.identities)}")
        source = next(name for name in model.identities if name != target)
        samples = _attack_samples(cfg, metadata, source)
    else:
        samples = _held_out(cfg)

    rows = []
    for sample in samples:
        original, mask = sample.image, sample.mask
        face = region_mask(mask, MetricRegion.FACE)
        for vaccinated in (True, False):
            before = vaccinate_image(system, original, mask) if vaccinated else original
            if model is not None:
                infected = faceswap_attack(model, before, mask, target)
            else:
                infected = mask_attack(before, mask)
            neutralised = neutralise(system, infected, mask)

            tag = "vaccinated" if vaccinated else "unvaccinated"
            name = sample.sample_id.replace("/", "_")
            verdict = None
            if validator is not None:
                verdict = validate(validator, neutralised, cfg.threshold, source=sample.sample_id)
            path = save_triptych(
                [before, infected, neutralised],
                cfg.out_dir / "triptychs" / f"{name}_{tag}.png",
                triptych_caption(verdict),
            )
            row = {
                "sample_id": sample.sample_id,
                "vaccinated": vaccinated,
                "attack": cfg.attack,
                "ssim_infected": float(ssim(infected, original, face)),
                "ssim_neutralised": float(ssim(neutralised, original, face)),
                "probability": verdict.probability if verdict is not None else None,
                "verdict": verdict.vaccinated if verdict is not None else None,
                "triptych": str(path),
            }
            rows.append(row)

    write_report(rows, cfg.out_dir / "attack.csv")
    vaccinated_rows = [r for r in rows if r["vaccinated"]]
    unvaccinated_rows = [r for r in rows if not r["vaccinated"] and r["verdict"] is not None]
    summary = {
        "samples": len(samples),
        "restored_fraction": sum(r["ssim_neutralised"] > r["ssim_infected"] for r in vaccinated_rows)
        / max(len(vaccinated_rows), 1),
        "unvaccinated_negative_fraction": (
            sum(not r["verdict"] for r in unvaccinated_rows) / len(unvaccinated_rows)
            if unvaccinated_rows
            else None
        ),
    }
    atomic_write_json(cfg.out_dir / "attack_summary.json", summary)
    logger.info(f"Attack demonstration finished: {summary}", extra=summary)
    return ExitCode.OK


def _input_items(cfg: CommandConfig) -> List[Tuple[str, Path]]:
    items = []
    for entry in cfg.inputs:
        path = Path(entry)
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            items += [(f.relative_to(path).as_posix(), f) for f in files]
        elif path.exists():
            items.append((path.name, path))
        else:
            raise DataError(f"Input {path} does not exist")
    if not items:
        raise DataError("No input images were given")
    return items


def _detector(cfg: CommandConfig) -> FallbackDetector:
    primary = LandmarkFileDetector.from_file(cfg.data.landmarks) if cfg.data.landmarks else None
    return FallbackDetector(primary)


def output_name(source: str, taken: Set[str]) -> str:
    """
    Pick a unique ``.png`` name for a processed input and reserve it in ``taken``.

    ``a.jpg`` becomes ``a.png`` unless that name is already used, then ``a.jpg.png``.

    :param source: Input key, relative to its input folder
    :param taken: Names already written in this run
    :return: The output name, relative to the output folder
    """
    stem = Path(source).with_suffix("").as_posix()
    candidates = itertools.chain(
        (f"{stem}.png", f"{source}.png"), (f"{stem}_{n}.png" for n in itertools.count(1))
    )
    for position, name in enumerate(candidates):
        if name not in taken:
            break
    if position:
        logger.warning(f"Output for {source} renamed to {name} to avoid overwriting another input")
    taken.add(name)
    return name


def _run_sequence(cfg: CommandConfig, mode: SequenceMode, folder: str) -> int:
    device = select_device(cfg.device)
    storage = cfg.storage()
    system, _ = load_immune_system(storage)
    system.to(device)
    validator = None
    if mode != SequenceMode.VACCINATE:
        validator = next(iter(_load_validators(cfg, storage, device).values()), None)

    items = _input_items(cfg)
    output_dir = cfg.out_dir / folder
    verdicts, failures, count, taken = [], 0, 0, set()
    for result in process_sequence(
        system, validator, items, mode, _detector(cfg), cfg.workers, cfg.threshold, cfg.mask
    ):
        count += 1
        output = output_dir / output_name(result.source, taken)
        save_image(result.output, output)
        sidecar = {"source": result.source, "output": str(output), "error": result.error, "verdict": None}
        if result.verdict is not None:
            result.verdict.neutralised = str(output)
            sidecar["verdict"] = result.verdict.to_dict()
            verdicts.append(result.verdict)
        atomic_write_json(output.with_suffix(".json"), sidecar)
        failures += int(result.failed)

    failures += len(items) - count
    if verdicts:
        write_report(verdicts, cfg.out_dir / f"{folder}_verdicts.csv")
    logger.info(
        f"Processed {count} of {len(items)} images",
        extra={"failures": failures, "mode": mode.value},
    )
    return ExitCode.PARTIAL if failures else ExitCode.OK


def cmd_vaccinate(cfg: CommandConfig) -> int:
    return _run_sequence(cfg, SequenceMode.VACCINATE, "vaccinated")


def cmd_neutralise(cfg: CommandConfig) -> int:
    return _run_sequence(cfg, SequenceMode.NEUTRALISE, "neutralised")


def cmd_validate(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    validators = _load_validators(cfg, cfg.storage(), device)
    if not validators:
        raise CheckpointError("No validator checkpoint found", str(cfg.storage().path))
    validator = next(iter(validators.values()))

    verdicts, failures = [], 0
    for key, path in _input_items(cfg):
        try:
            image = load_image(path)
        except OSError as e:
            logger.warning(f"Skipping unreadable image {key} - {e}")
            failures += 1
            continue
        if tuple(image.shape[-2:]) != (cfg.resolution, cfg.resolution):
            image = resize_image(image, (cfg.resolution, cfg.resolution))
        verdicts.append(validate(validator, image, cfg.threshold, source=key, neutralised=str(path)))

    write_report(verdicts, cfg.out_dir / "verdicts.csv")
    return ExitCode.PARTIAL if failures else ExitCode.OK


def cmd_evaluate(cfg: CommandConfig) -> int:
    device = select_device(cfg.device)
    storage = cfg.storage()
    system, _ = load_immune_system(storage)
    system.to(device)
    validators = _load_validators(cfg, storage, device)
    baseline = None
    if cfg.baseline and storage.exists("inpainting_baseline"):
        baseline, _ = load_baseline(storage)
        baseline.to(device)

    result = evaluate_system(system, _held_out(cfg), cfg.evaluation, validators, baseline)
    write_evaluation(result, cfg.out_dir / "evaluation", cfg.evaluation.plots)
    return ExitCode.OK


COMMANDS: Dict[str, Callable[[CommandConfig], int]] = {
    "train": cmd_train,
    "train-validator": cmd_train_validator,
    "train-baseline": cmd_train_baseline,
    "train-faceswap": cmd_train_faceswap,
    "vaccinate": cmd_vaccinate,
    "neutralise": cmd_neutralise,
    "validate": cmd_validate,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command", None)
    if command is None:
        parser.print_help()
        return ExitCode.CONFIG

    level = args.get("log_level") or read_log_level()
    logging.basicConfig(level=level.upper() if isinstance(level, str) else level)

    try:
        cfg = build_command_config(command, args)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        atomic_write_json(cfg.out_dir / EFFECTIVE_CONFIG, cfg.to_dict())
        logger.info(f"Running {command}", extra={"out": cfg.out, "seed": cfg.seed})
        code = COMMANDS[command](cfg)
    except CyberVaxError as e:
        code = exit_code_for(e)
        logger.error(f"{command} failed - {e}", extra={"exit_code": int(code)})
    return int(code)


if __name__ == "__main__":
    sys.exit(main())
