"""Unpaired MR-to-CT synthesis with coarse-mask supervised dual-branch
generators, cycle shape consistency, and a desk-scale phantom test bench."""

from .core import (
    AdversarialMode,
    ImageGrid,
    LossWeights,
    Modality,
    RunConfig,
    denormalize,
    lr_at_epoch,
    normalize,
    resize_pad,
    seed_all,
)
from .losses import LossBundle, adversarial_loss, csc_loss, cycle_loss, mask_loss, total_loss
from .masks import (
    CoarseMask,
    DisplacementField,
    MaskSource,
    binarize,
    deform_mask,
    extract_coarse_mask,
    largest_component,
    morphological_open,
    sample_displacement,
)
from .networks import (
    AttentionMaskSet,
    ContentStack,
    GeneratorOutput,
    MaskContentGenerator,
    NetworkSpec,
    PatchDiscriminator,
    compose,
    discriminator_forward,
    generator_forward,
)
from .phantoms import PhantomSpec, SliceDataset, load_volume_slices, make_dataset, make_phantom_pair
from .evaluation import (
    MetricsReport,
    deform_study,
    error_map,
    evaluate,
    mae,
    paired_t_test,
    psnr,
    ssim,
)
from .training import Batch, TrainState, build_state, train_run, train_step

__version__ = "0.1.0"

__all__ = [
    "AdversarialMode",
    "AttentionMaskSet",
    "Batch",
    "CoarseMask",
    "ContentStack",
    "DisplacementField",
    "GeneratorOutput",
    "ImageGrid",
    "LossBundle",
    "LossWeights",
    "MaskContentGenerator",
    "MaskSource",
    "MetricsReport",
    "Modality",
    "NetworkSpec",
    "PatchDiscriminator",
    "PhantomSpec",
    "RunConfig",
    "SliceDataset",
    "TrainState",
    "adversarial_loss",
    "binarize",
    "build_state",
    "compose",
    "csc_loss",
    "cycle_loss",
    "deform_mask",
    "deform_study",
    "denormalize",
    "discriminator_forward",
    "error_map",
    "evaluate",
    "extract_coarse_mask",
    "generator_forward",
    "largest_component",
    "load_volume_slices",
    "lr_at_epoch",
    "mae",
    "make_dataset",
    "make_phantom_pair",
    "mask_loss",
    "morphological_open",
    "normalize",
    "paired_t_test",
    "psnr",
    "resize_pad",
    "sample_displacement",
    "seed_all",
    "ssim",
    "total_loss",
    "train_run",
    "train_step",
]
