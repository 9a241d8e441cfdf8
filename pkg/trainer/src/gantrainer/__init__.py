"""Conditional-GAN trainer for location-map generators."""

from .data import PairDataset, load_dataset, merge_datasets, read_cstk
from .export import export_generator, fold_batchnorm
from .losses import (
    LossConfig,
    LossParts,
    discriminator_loss,
    effective_lambda_cgan,
    gaussian_kernel,
    loss_components,
    loss_total,
    psf_blur,
)
from .model import (
    PatchDiscriminator,
    PlanNet,
    build_generator,
    build_generator_plan,
)
from .train import TrainConfig, TrainResult, TrainingDivergedError, train

__version__ = "0.1.0"
