import logging
from pathlib import Path

import torch
from environs import Env

from cybervax.attacks import mask_attack
from cybervax.data import Split, generate_synthetic_faces, split_dataset
from cybervax.metrics import MetricRegion, measure
from cybervax.models import UNetConfig, Validator, ValidatorConfig
from cybervax.pipeline import neutralise, vaccinate_image, validate
from cybervax.storage import LocalCheckpointStorage
from cybervax.training import (
    TrainConfig,
    ValidatorTrainConfig,
    train_immune_system,
    train_validator,
)

env = Env()
env.read_env()

OUT = Path(env.str("OUT", "runs/example"))
SAMPLES = env.int("SAMPLES", 64)
STEPS = env.int("STEPS", 200)
SEED = env.int("SEED", 0)
LOG_LEVEL = env.log_level("LOG_LEVEL", logging.INFO)

logging.basicConfig(level=logging.getLevelName(LOG_LEVEL))
logger = logging.getLogger(__name__)

dataset = generate_synthetic_faces(SAMPLES, resolution=32, seed=SEED, frames_per_identity=2)
splits = split_dataset(dataset, SEED)
print(f"Train {len(splits[Split.TRAIN])}, test {len(splits[Split.TEST])}")

unet_config = UNetConfig(
    resolution=32, base_width=16, channel_mult=(1, 2), res_blocks_per_level=1, depth=2, attention_resolutions=(8,)
)
storage = LocalCheckpointStorage(OUT / "checkpoints")

logger.info("Training the immune system")
system, log = train_immune_system(
    splits[Split.TRAIN],
    TrainConfig(steps=STEPS, checkpoint_every=STEPS, seed=SEED),
    unet_config,
    storage,
)
log.write(OUT)

logger.info("Training the validator")
with torch.random.fork_rng():
    torch.manual_seed(SEED)
    validator = Validator(ValidatorConfig(resolution=32))
train_validator(validator, system, splits[Split.TRAIN], ValidatorTrainConfig(steps=100, seed=SEED))

held_out = splits[Split.TEST] if len(splits[Split.TEST]) else splits[Split.TRAIN]
for sample in list(held_out)[:4]:
    vaccinated = vaccinate_image(system, sample.image, sample.mask)
    imperceptibility = measure(vaccinated, sample.image)

    print(f"\n{sample.sample_id}")
    print(f"  - vaccinated psnr: {imperceptibility.psnr:.2f}, ssim: {imperceptibility.ssim:.3f}")

    for label, image in (("vaccinated", vaccinated), ("unvaccinated", sample.image)):
        neutralised = neutralise(system, mask_attack(image, sample.mask), sample.mask)
        restored = measure(neutralised, sample.image, sample.mask, MetricRegion.FACE)
        verdict = validate(validator, neutralised, source=sample.sample_id)
        print(
            f"  - {label}: face ssim {restored.ssim:.3f}, "
            f"validator {verdict.probability:.2f} ({'vaccinated' if verdict.vaccinated else 'not vaccinated'})"
        )
