"""Shared domain types, configuration, seeding, and run-artifact plumbing."""

from __future__ import annotations

import dataclasses
import hashlib
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.ndimage

# CT intensities are clipped to this window before normalization; its width is
# also the data range used for intensity-domain metrics.
CT_CLIP_RANGE = (-1000.0, 2000.0)
CT_RANGE_WIDTH = CT_CLIP_RANGE[1] - CT_CLIP_RANGE[0]

NORMALIZED_RANGE = (-1.0, 1.0)


class MaskGANError(Exception):
    """Base class for all library errors."""


class DegenerateRange(MaskGANError):
    """Constant image cannot be min-max normalized."""


class InvalidTarget(MaskGANError):
    """Resize target dimensions must be positive."""


class OutOfRange(MaskGANError):
    """Epoch outside the configured schedule."""


class ShapeMismatch(MaskGANError):
    """Operands have incompatible shapes."""


class NonFinite(MaskGANError):
    """A value that must be finite is NaN or infinite."""


class Modality(str, Enum):
    MR = "MR"
    CT = "CT"
    PHANTOM_MR = "PHANTOM_MR"
    PHANTOM_CT = "PHANTOM_CT"

    @property
    def is_ct_like(self) -> bool:
        return self in (Modality.CT, Modality.PHANTOM_CT)


class AdversarialMode(str, Enum):
    LEAST_SQUARES = "LEAST_SQUARES"
    VANILLA_LOG = "VANILLA_LOG"


@dataclass(frozen=True)
class ImageGrid:
    """A 2-D slice of real intensities with modality tag and declared range.

    The universal currency between modules: raw scans, normalized network
    inputs, synthetic outputs, and error maps are all ImageGrids.
    """

    pixels: np.ndarray
    modality: Modality
    value_range: tuple[float, float]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ShapeMismatch(f"expected 2-D pixel array, got shape {px.shape}")
        if not np.all(np.isfinite(px)):
            raise NonFinite("image contains non-finite pixels")
        lo, hi = self.value_range
        if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
            raise DegenerateRange(f"invalid value range ({lo}, {hi})")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "value_range", (float(lo), float(hi)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def is_normalized(self) -> bool:
        return self.value_range == NORMALIZED_RANGE

    def with_pixels(self, pixels: np.ndarray) -> "ImageGrid":
        return ImageGrid(pixels, self.modality, self.value_range)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the weighted training objective.

    Zeroing lambda_mask and lambda_shape reduces the objective to the plain
    cycle-consistent GAN baseline; zeroing only lambda_shape gives the
    mask-supervision-only ablation.
    """

    lambda_mask: float = 1.0
    lambda_shape: float = 1.0
    lambda_cycle: float = 10.0

    def __post_init__(self):
        for name in ("lambda_mask", "lambda_shape", "lambda_cycle"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise NonFinite(f"{name} must be finite and non-negative, got {v}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs to be reproduced."""

    n_masks: int = 10
    epochs: int = 100
    decay_start_epoch: int = 50
    base_lr: float = 2e-4
    batch_size: int = 16
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    adversarial_mode: AdversarialMode = AdversarialMode.LEAST_SQUARES

    # Architecture knobs; defaults are the full-scale network, tests shrink them.
    image_size: int = 224
    gen_width: int = 64
    gen_downsamples: int = 2
    gen_res_blocks: int = 9
    disc_width: int = 64
    disc_layers: int = 3

    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    checkpoint_every: int = 5
    # Whether gradients of the cycle-shape term flow through the synthetic
    # image into the producing generator (False) or are cut at it (True).
    csc_detach_synthetic: bool = False
    # Replay buffer of past fakes for discriminator updates; off by default.
    history_buffer: bool = False

    def __post_init__(self):
        if self.n_masks < 2:
            raise OutOfRange(f"n_masks must be >= 2, got {self.n_masks}")
        if not (0 < self.decay_start_epoch <= self.epochs):
            raise OutOfRange(
                f"need 0 < decay_start_epoch <= epochs, got "
                f"{self.decay_start_epoch} / {self.epochs}"
            )
        if self.batch_size < 1 or self.image_size < 1:
            raise OutOfRange("batch_size and image_size must be positive")


def normalize(img: ImageGrid) -> ImageGrid:
    """Map a raw slice into the [-1, 1] network intensity space.

    CT-like slices are clipped to the fixed window first; MR-like slices are
    min-max scaled over their observed range (no fixed physical scale).
    Already-normalized input passes through unchanged aside from clipping.
    """
    px = img.pixels
    if img.is_normalized:
        return img.with_pixels(np.clip(px, -1.0, 1.0))
    if img.modality.is_ct_like:
        lo, hi = CT_CLIP_RANGE
        out = (np.clip(px, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    else:
        lo, hi = float(px.min()), float(px.max())
        if lo == hi:
            raise DegenerateRange("constant image has no dynamic range")
        out = (px - lo) / (hi - lo) * 2.0 - 1.0
    return ImageGrid(out, img.modality, NORMALIZED_RANGE)


def denormalize(img: ImageGrid, target_range: tuple[float, float]) -> ImageGrid:
    """Affinely map a normalized slice back onto an intensity range."""
    lo, hi = target_range
    out = (img.pixels + 1.0) / 2.0 * (hi - lo) + lo
    return ImageGrid(out, img.modality, target_range)


def resize_pad(img: ImageGrid, target: tuple[int, int]) -> ImageGrid:
    """Scale so the limiting side hits the target, pad the rest symmetrically.

    Padding uses the declared range minimum as background; for normalized
    images that is -1. Odd pad amounts put the extra pixel on bottom/right.
    """
    th, tw = target
    if th < 1 or tw < 1:
        raise InvalidTarget(f"target must be positive, got {target}")
    h, w = img.shape
    if (h, w) == (th, tw):
        return img.with_pixels(img.pixels.copy())

    scale = min(th / h, tw / w)
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    if (h, w) == (1, 1):
        content = np.full((nh, nw), img.pixels[0, 0])
    else:
        content = scipy.ndimage.zoom(img.pixels, (nh / h, nw / w), order=1, mode="nearest")
        content = content[:nh, :nw]  # zoom rounds; guard against off-by-one

    out = np.full((th, tw), img.value_range[0], dtype=np.float64)
    top = (th - content.shape[0]) // 2
    left = (tw - content.shape[1]) // 2
    out[top : top + content.shape[0], left : left + content.shape[1]] = content
    return img.with_pixels(out)


def lr_at_epoch(cfg: RunConfig, epoch: int) -> float:
    """Constant base rate, then a linear ramp hitting zero just after the end.

    The final epoch trains with a small positive rate: the ramp reaches zero
    at epochs + 1, not at the last epoch.
    """
    if not (1 <= epoch <= cfg.epochs):
        raise OutOfRange(f"epoch {epoch} outside [1, {cfg.epochs}]")
    if epoch <= cfg.decay_start_epoch:
        return cfg.base_lr
    ramp = (cfg.epochs + 1 - epoch) / (cfg.epochs + 1 - cfg.decay_start_epoch)
    return cfg.base_lr * ramp


def seed_all(seed: int) -> None:
    """Seed python, numpy, and torch global RNGs."""
    import torch

    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# --- flat key=value config serialization ---------------------------------

_BOOL_KEYS = {"csc_detach_synthetic", "history_buffer"}


def config_to_text(cfg: RunConfig) -> str:
    """Serialize to a flat key=value file, weights inlined."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if f.name == "loss_weights":
            for wf in dataclasses.fields(LossWeights):
                lines.append(f"{wf.name}={getattr(v, wf.name)!r}")
        elif isinstance(v, Enum):
            lines.append(f"{f.name}={v.value}")
        else:
            lines.append(f"{f.name}={v!r}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> RunConfig:
    """Parse the flat key=value form written by config_to_text."""
    values: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    weight_names = {f.name for f in dataclasses.fields(LossWeights)}
    weights = LossWeights(**{k: float(values.pop(k)) for k in list(values) if k in weight_names})

    kwargs = {}
    for f in dataclasses.fields(RunConfig):
        if f.name == "loss_weights" or f.name not in values:
            continue
        raw = values.pop(f.name)
        if f.name == "adversarial_mode":
            kwargs[f.name] = AdversarialMode(raw)
        elif f.name in _BOOL_KEYS:
            kwargs[f.name] = raw in ("True", "true", "1")
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        else:
            kwargs[f.name] = float(raw)
    if values:
        raise ValueError(f"unknown config keys: {sorted(values)}")
    return RunConfig(loss_weights=weights, **kwargs)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:12]


def save_config(cfg: RunConfig, path: Path | str) -> None:
    Path(path).write_text(config_to_text(cfg))


def load_config(path: Path | str) -> RunConfig:
    return config_from_text(Path(path).read_text())


LOSS_CSV_COLUMNS = ("step", "epoch", "adv_g", "adv_d", "cycle", "mask", "shape", "total")


class LossTrace:
    """Append-only CSV of per-step loss values under a run directory."""

    def __init__(self, path: Path | str, append: bool = False):
        self.path = Path(path)
        if not append or not self.path.exists():
            self.path.write_text(",".join(LOSS_CSV_COLUMNS) + "\n")

    def append(self, step: int, epoch: int, bundle) -> None:
        row = [str(step), str(epoch)] + [
            repr(float(getattr(bundle, k))) for k in LOSS_CSV_COLUMNS[2:]
        ]
        with self.path.open("a") as fh:
            fh.write(",".join(row) + "\n")

    @staticmethod
    def read(path: Path | str) -> list[dict[str, float]]:
        lines = Path(path).read_text().strip().splitlines()
        header = lines[0].split(",")
        return [dict(zip(header, map(float, ln.split(",")))) for ln in lines[1:]]
