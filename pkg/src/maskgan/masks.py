"""Unsupervised coarse-mask extraction and elastic mask corruption.

The extraction pipeline is deliberately simple image processing: rescale to
[0, 1], threshold, open, keep the largest connected component. The elastic
deformation half of the module corrupts masks for the robustness study.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from .core import ImageGrid, MaskGANError, ShapeMismatch

DEFAULT_THRESHOLD = 0.1
DEFAULT_OPEN_RADIUS = 1
DEFAULT_CONNECTIVITY = 8
# Bandwidth (pixels) of the smoothing that makes displacement fields spatially
# coherent; recorded here so corrupted-mask studies are reproducible.
DEFAULT_SMOOTHING = 8.0


class InvalidThreshold(MaskGANError):
    pass


class EmptyForeground(MaskGANError):
    """No foreground pixel survived; caller decides whether that is fatal."""


class InvalidSigma(MaskGANError):
    pass


class MaskSource(str, Enum):
    EXTRACTED = "EXTRACTED"
    DEFORMED = "DEFORMED"
    MANUAL = "MANUAL"


@dataclass(frozen=True)
class CoarseMask:
    """Binary foreground map: 1 = anatomy, 0 = background."""

    pixels: np.ndarray
    source: MaskSource = MaskSource.MANUAL

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got {px.shape}")
        vals = np.unique(px)
        if not np.all(np.isin(vals, (0, 1))):
            raise MaskGANError(f"mask must be strictly binary, found values {vals[:5]}")
        object.__setattr__(self, "pixels", px.astype(np.uint8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    @property
    def background(self) -> np.ndarray:
        """The background map (1 - foreground), the supervision target."""
        return 1 - self.pixels


@dataclass(frozen=True)
class DisplacementField:
    """Per-pixel displacement vectors (in pixels) with their sampling std."""

    dx: np.ndarray
    dy: np.ndarray
    sigma: float

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.shape != dy.shape or dx.ndim != 2:
            raise ShapeMismatch(f"dx/dy shapes differ: {dx.shape} vs {dy.shape}")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise MaskGANError("displacement field contains non-finite values")
        if self.sigma < 0:
            raise InvalidSigma(f"sigma must be >= 0, got {self.sigma}")
        if self.sigma == 0 and (np.any(dx != 0) or np.any(dy != 0)):
            raise MaskGANError("sigma = 0 requires an all-zero field")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)


def binarize(img: ImageGrid, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold after rescaling the declared value range onto [0, 1].

    The comparison is strict (> threshold). Composed after min-max intensity
    normalization this is invariant to positive affine maps of the raw input,
    since the declared range rescales along with the pixels.
    """
    if not (0.0 < threshold < 1.0):
        raise InvalidThreshold(f"threshold must lie in (0, 1), got {threshold}")
    lo, hi = img.value_range
    scaled = np.clip((img.pixels - lo) / (hi - lo), 0.0, 1.0)
    return (scaled > threshold).astype(np.uint8)


def _square_structure(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def morphological_open(mask: np.ndarray, radius: int = DEFAULT_OPEN_RADIUS) -> np.ndarray:
    """Erosion then dilation with a square element; out-of-bounds is background."""
    if radius < 1:
        raise MaskGANError(f"radius must be >= 1, got {radius}")
    m = np.asarray(mask).astype(bool)
    structure = _square_structure(radius)
    eroded = ndi.binary_erosion(m, structure=structure, border_value=0)
    opened = ndi.binary_dilation(eroded, structure=structure, border_value=0)
    return opened.astype(np.uint8)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndi.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndi.generate_binary_structure(2, 2)
    raise MaskGANError(f"connectivity must be 4 or 8, got {connectivity}")


def largest_component(mask: np.ndarray, connectivity: int = DEFAULT_CONNECTIVITY) -> np.ndarray:
    """Keep only the largest connected component.

    Ties go to the component whose first pixel comes earliest in row-major
    order.
    """
    m = np.asarray(mask).astype(bool)
    if not m.any():
        raise EmptyForeground("mask has no foreground pixel")
    labels, n = ndi.label(m, structure=_connectivity_structure(connectivity))
    counts = np.bincount(labels.ravel())
    counts[0] = 0
    best_size = counts.max()
    candidates = np.flatnonzero(counts == best_size)
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        flat = labels.ravel()
        keep = min(candidates, key=lambda lab: int(np.flatnonzero(flat == lab)[0]))
    return (labels == keep).astype(np.uint8)


def extract_coarse_mask(
    img: ImageGrid,
    threshold: float = DEFAULT_THRESHOLD,
    radius: int = DEFAULT_OPEN_RADIUS,
    connectivity: int = DEFAULT_CONNECTIVITY,
) -> CoarseMask:
    """Full pipeline: rescale -> threshold -> open -> largest component."""
    binary = binarize(img, threshold)
    if not binary.any():
        raise EmptyForeground("nothing above threshold")
    opened = morphological_open(binary, radius)
    kept = largest_component(opened, connectivity)
    return CoarseMask(kept, MaskSource.EXTRACTED)


def _gaussian_kernel_1d(sigma: float) -> np.ndarray:
    """Discrete Gaussian taps matching scipy's default truncation."""
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def sample_displacement(
    shape: tuple[int, int],
    sigma: float,
    smoothing: float = DEFAULT_SMOOTHING,
    seed: int = 0,
) -> DisplacementField:
    """Draw i.i.d. N(0, sigma^2) vectors per pixel, then smooth them coherently.

    The smoothing is variance-preserving (unit-L2 kernel) so sigma keeps its
    meaning as the per-pixel displacement standard deviation; plain Gaussian
    blurring would shrink a sigma-2 field to a fraction of a pixel.
    """
    if sigma < 0:
        raise InvalidSigma(f"sigma must be >= 0, got {sigma}")
    h, w = shape
    if sigma == 0:
        zero = np.zeros((h, w))
        return DisplacementField(zero, zero.copy(), 0.0)
    rng = np.random.default_rng(seed)
    dx = rng.normal(0.0, sigma, size=(h, w))
    dy = rng.normal(0.0, sigma, size=(h, w))
    if smoothing > 0:
        k = _gaussian_kernel_1d(smoothing)
        norm = np.sum(k**2)  # separable: 2-D variance factor is norm**2

        def smooth(f: np.ndarray) -> np.ndarray:
            f = ndi.correlate1d(f, k, axis=0, mode="reflect")
            f = ndi.correlate1d(f, k, axis=1, mode="reflect")
            return f / norm

        dx, dy = smooth(dx), smooth(dy)
    return DisplacementField(dx, dy, sigma)


def deform_mask(mask: CoarseMask, field: DisplacementField) -> CoarseMask:
    """Warp a mask by the field: content at p moves to p + d(p).

    Backward warping with nearest-neighbor sampling keeps the result binary;
    reads outside the grid are background.
    """
    if mask.shape != field.dx.shape:
        raise ShapeMismatch(f"mask {mask.shape} vs field {field.dx.shape}")
    h, w = mask.shape
    rows, cols = np.mgrid[0:h, 0:w]
    src_r = np.rint(rows - field.dy).astype(np.int64)
    src_c = np.rint(cols - field.dx).astype(np.int64)
    inside = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    out = np.zeros((h, w), dtype=np.uint8)
    out[inside] = mask.pixels[src_r[inside], src_c[inside]]
    return CoarseMask(out, MaskSource.DEFORMED)


def save_mask_png(mask: CoarseMask, path: Path | str) -> None:
    """8-bit single-channel PNG, foreground = 255."""
    Image.fromarray(mask.pixels * np.uint8(255), mode="L").save(path)


def load_mask_png(path: Path | str, source: MaskSource = MaskSource.MANUAL) -> CoarseMask:
    arr = np.asarray(Image.open(path).convert("L"))
    return CoarseMask((arr > 127).astype(np.uint8), source)
