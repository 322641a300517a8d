"""Procedural paired pseudo-MR/pseudo-CT head phantoms and slice datasets.

A phantom is an ellipse "head" with a skull ring: bright ring and dark
interior on CT, the reverse on MR. The pair shares geometry; training sets
optionally misalign one modality to mimic poorly registered scans. This is
the desk-scale stand-in for clinical volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
from PIL import Image

from . import masks as masklib
from .core import (
    CT_CLIP_RANGE,
    ImageGrid,
    MaskGANError,
    Modality,
    ShapeMismatch,
    normalize,
    resize_pad,
)

MR_SOURCE_RANGE = (0.0, 1000.0)

# Pseudo-intensity model, texture amplitudes at texture_scale = 1. Textures
# are clipped at 3 sigma so the contrast orderings below hold per-pixel:
# CT skull >> CT tissue, MR tissue >> MR skull > air plus the extraction
# threshold floor (bone is dark on MR but still above threshold).
_CT_AIR = -1000.0
_CT_TISSUE, _CT_TISSUE_AMP = 40.0, 25.0
_CT_SKULL, _CT_SKULL_AMP = 1400.0, 60.0
_MR_AIR_MAX = 8.0
_MR_TISSUE, _MR_TISSUE_AMP = 700.0, 100.0
_MR_SKULL, _MR_SKULL_AMP = 180.0, 25.0

_MARGIN = 4.0  # required clearance between ellipse and canvas edge, pixels


class SpecOutOfBounds(MaskGANError):
    pass


class UnreadableVolume(MaskGANError):
    pass


class UnsupportedModality(MaskGANError):
    pass


class UnpairedDataset(MaskGANError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and texture parameters of one phantom pair."""

    size: int = 224
    center: tuple[float, float] = (112.0, 112.0)  # (cy, cx) pixels
    axes: tuple[float, float] = (64.0, 52.0)      # semi-axes (ay, ax) pixels
    rotation: float = 0.0                          # degrees
    skull_thickness: float = 5.0                   # pixels
    texture_scale: float = 1.0
    misalignment: tuple[float, float, float] = (0.0, 0.0, 0.0)  # (dy, dx, deg) on CT
    seed: int = 0

    def __post_init__(self):
        if self.skull_thickness < 1:
            raise SpecOutOfBounds(f"skull thickness must be >= 1 px, got {self.skull_thickness}")
        if min(self.axes) <= self.skull_thickness:
            raise SpecOutOfBounds("skull ring thicker than the ellipse")
        ay, ax = self.axes
        checks = (
            ((0.0, 0.0), self.rotation),
            (self.misalignment[:2], self.rotation + self.misalignment[2]),
        )
        for (dy, dx), rot in checks:
            cy, cx = self.center[0] + dy, self.center[1] + dx
            th = math.radians(rot)
            # bounding-box half extents of the rotated ellipse
            ext_x = math.hypot(ax * math.cos(th), ay * math.sin(th))
            ext_y = math.hypot(ax * math.sin(th), ay * math.cos(th))
            for c, ext in ((cy, ext_y), (cx, ext_x)):
                if c - ext < _MARGIN or c + ext > self.size - 1 - _MARGIN:
                    raise SpecOutOfBounds(
                        f"ellipse within {_MARGIN} px of the canvas edge "
                        f"(center ({cy:.1f}, {cx:.1f}), extent {ext:.1f}, size {self.size})"
                    )


def _elliptic_radius(size, center, axes, rotation_deg):
    cy, cx = center
    ay, ax = axes
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    th = math.radians(rotation_deg)
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    return np.sqrt((u / ax) ** 2 + (v / ay) ** 2)


def _soft_support(rho, min_axis):
    # ~1 px soft edge from the approximate signed distance to the boundary
    return np.clip((1.0 - rho) * min_axis + 0.5, 0.0, 1.0)


def _texture(rng, size, correlation):
    t = ndi.gaussian_filter(rng.standard_normal((size, size)), correlation, mode="reflect")
    t /= t.std() + 1e-12
    return np.clip(t, -3.0, 3.0)


def _quantize(values, lo, hi):
    q = np.clip(np.rint((values - lo) / (hi - lo) * 65535.0), 0, 65535)
    return q / 65535.0 * (hi - lo) + lo


def make_phantom_pair(spec: PhantomSpec) -> tuple[ImageGrid, ImageGrid, masklib.CoarseMask]:
    """Deterministic raw-intensity MR/CT pair plus the true head support.

    The true mask is the nominal (pre-misalignment) ellipse support; the CT
    geometry carries the misalignment. Intensities are snapped to a 16-bit
    grid of each modality's declared range so serialization round-trips
    exactly.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    corr = max(2.0, 0.06 * s)
    ay, ax = spec.axes
    t = spec.skull_thickness

    def fields(center, rotation):
        rho_outer = _elliptic_radius(s, center, (ay, ax), rotation)
        rho_inner = _elliptic_radius(s, center, (ay - t, ax - t), rotation)
        outer = _soft_support(rho_outer, min(ay, ax))
        inner = _soft_support(rho_inner, min(ay - t, ax - t))
        return outer, inner, np.clip(outer - inner, 0.0, 1.0)

    mis_dy, mis_dx, mis_rot = spec.misalignment
    mr_outer, mr_inner, mr_ring = fields(spec.center, spec.rotation)
    ct_outer, ct_inner, ct_ring = fields(
        (spec.center[0] + mis_dy, spec.center[1] + mis_dx), spec.rotation + mis_rot
    )

    ts = spec.texture_scale
    ct_vals = (
        _CT_AIR * (1.0 - ct_outer)
        + (_CT_TISSUE + _CT_TISSUE_AMP * ts * _texture(rng, s, corr)) * ct_inner
        + (_CT_SKULL + _CT_SKULL_AMP * ts * _texture(rng, s, corr)) * ct_ring
    )
    mr_air = rng.uniform(0.0, _MR_AIR_MAX, size=(s, s))
    mr_vals = (
        mr_air * (1.0 - mr_outer)
        + (_MR_TISSUE + _MR_TISSUE_AMP * ts * _texture(rng, s, corr)) * mr_inner
        + (_MR_SKULL + _MR_SKULL_AMP * ts * _texture(rng, s, corr)) * mr_ring
    )

    ct = ImageGrid(_quantize(ct_vals, *CT_CLIP_RANGE), Modality.PHANTOM_CT, CT_CLIP_RANGE)
    mr = ImageGrid(_quantize(mr_vals, *MR_SOURCE_RANGE), Modality.PHANTOM_MR, MR_SOURCE_RANGE)
    rho_nominal = _elliptic_radius(s, spec.center, (ay, ax), spec.rotation)
    true_mask = masklib.CoarseMask((rho_nominal <= 1.0).astype(np.uint8), masklib.MaskSource.MANUAL)
    return mr, ct, true_mask


@dataclass
class SliceDataset:
    """Ordered MR and CT slice collections plus per-slice coarse masks.

    Slices are stored in source intensities (consumers normalize on the way
    into a network; normalization is idempotent so pre-normalized slices are
    fine too). paired=True means index i of both streams shows the same
    anatomy (test sets); unpaired training iteration shuffles the streams
    independently so no correspondence is ever exposed.
    """

    mr: list[ImageGrid] = field(default_factory=list)
    ct: list[ImageGrid] = field(default_factory=list)
    mr_masks: list[masklib.CoarseMask] | None = None
    ct_masks: list[masklib.CoarseMask] | None = None
    paired: bool = False
    mr_source_range: tuple[float, float] = MR_SOURCE_RANGE
    ct_source_range: tuple[float, float] = CT_CLIP_RANGE

    def __post_init__(self):
        if self.paired:
            if len(self.mr) != len(self.ct):
                raise UnpairedDataset("paired dataset with unequal stream lengths")
            for a, b in zip(self.mr, self.ct):
                if a.shape != b.shape:
                    raise ShapeMismatch("paired slices with different shapes")

    def __len__(self) -> int:
        return max(len(self.mr), len(self.ct))

    def unpaired_batches(self, batch_size: int, rng: np.random.Generator):
        """Yield (mr_indices, ct_indices) batches, streams shuffled independently."""
        n = min(len(self.mr), len(self.ct))
        perm_mr = rng.permutation(len(self.mr))[:n]
        perm_ct = rng.permutation(len(self.ct))[:n]
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm_mr[start : start + batch_size], perm_ct[start : start + batch_size]

    def pairs(self):
        if not self.paired:
            raise UnpairedDataset("dataset is not paired")
        return zip(self.mr, self.ct)


def _sample_spec(rng: np.random.Generator, size: int, misalign_sigma: float) -> PhantomSpec:
    s = float(size)
    shift_lim = 2.5 * misalign_sigma
    jitter = 0.02 * s
    # largest semi-axis that keeps the worst-case shifted ellipse clear of the
    # margin: center drift + extent must stay within size - 1 - margin
    hi = (s / 2 - _MARGIN - 1.5 - jitter - shift_lim) / s
    hi = min(hi, 0.31)
    if hi < 0.12:
        raise SpecOutOfBounds(
            f"canvas of {size} px cannot hold a head with misalignment sigma {misalign_sigma}"
        )
    # wide geometry spread: per-slice anatomy varies enough that a generator
    # without per-slice anchoring cannot fall back on an average head shape
    ay = rng.uniform(0.68 * hi, hi) * s
    ax = rng.uniform(0.50 * hi, 0.84 * hi) * s
    cy = s / 2 + rng.uniform(-jitter, jitter)
    cx = s / 2 + rng.uniform(-jitter, jitter)
    rot = rng.uniform(-30.0, 30.0)
    thickness = max(2.0, 0.12 * min(ay, ax))
    if misalign_sigma > 0:
        mis = tuple(
            float(v) for v in np.clip(rng.normal(0.0, misalign_sigma, size=3), -shift_lim, shift_lim)
        )
    else:
        mis = (0.0, 0.0, 0.0)
    return PhantomSpec(
        size=size,
        center=(cy, cx),
        axes=(ay, ax),
        rotation=rot,
        skull_thickness=thickness,
        texture_scale=1.0,
        misalignment=mis,
        seed=int(rng.integers(2**31)),
    )


def make_dataset(
    n: int,
    misalign_sigma: float,
    seed: int,
    size: int = 224,
    test_fraction: float = 0.1,
) -> tuple[SliceDataset, SliceDataset]:
    """Build an unpaired training set of n slices plus an exactly paired,
    misalignment-free test set (max(8, n * test_fraction) pairs).

    Slices carry source intensities with coarse masks already extracted.
    """
    if n < 2:
        raise MaskGANError(f"need n >= 2 slices, got {n}")
    rng = np.random.default_rng(seed)

    def build(count: int, sigma: float, paired: bool) -> SliceDataset:
        mr_list, ct_list, mr_masks, ct_masks = [], [], [], []
        for _ in range(count):
            spec = _sample_spec(rng, size, sigma)
            mr, ct, _ = make_phantom_pair(spec)
            mr_list.append(mr)
            ct_list.append(ct)
            mr_masks.append(masklib.extract_coarse_mask(mr))
            ct_masks.append(masklib.extract_coarse_mask(ct))
        return SliceDataset(mr_list, ct_list, mr_masks, ct_masks, paired=paired)

    train = build(n, misalign_sigma, paired=False)
    test = build(max(8, round(n * test_fraction)), 0.0, paired=True)
    return train, test


# --- directory container: per-slice 16-bit PNGs + key=value sidecar -------


def _write_meta(path: Path, entries: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in entries.items()))


def _read_meta(path: Path) -> dict[str, str]:
    meta = {}
    for line in path.read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    return meta


def _save_slice_png(img: ImageGrid, lo: float, hi: float, path: Path) -> None:
    q = np.clip(np.rint((img.pixels - lo) / (hi - lo) * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)  # uint16 -> 16-bit grayscale PNG


def _load_slice_png(path: Path, lo: float, hi: float, modality: Modality) -> ImageGrid:
    arr = np.asarray(Image.open(path), dtype=np.float64)
    return ImageGrid(arr / 65535.0 * (hi - lo) + lo, modality, (lo, hi))


def save_dataset(ds: SliceDataset, out_dir: Path | str) -> None:
    """Write one split as mr/ ct/ mask/ PNG folders plus meta.txt.

    Images are stored as raw-intensity 16-bit PNGs over each modality's
    source range; masks as 8-bit 0/255 PNGs named <modality>_<index>.png.
    """
    out = Path(out_dir)
    for sub in ("mr", "ct", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    mr_lo, mr_hi = ds.mr_source_range
    ct_lo, ct_hi = ds.ct_source_range
    for i, img in enumerate(ds.mr):
        raw = img if not img.is_normalized else _denorm(img, ds.mr_source_range)
        _save_slice_png(raw, mr_lo, mr_hi, out / "mr" / f"{i:04d}.png")
    for i, img in enumerate(ds.ct):
        raw = img if not img.is_normalized else _denorm(img, ds.ct_source_range)
        _save_slice_png(raw, ct_lo, ct_hi, out / "ct" / f"{i:04d}.png")
    for name, mask_list in (("mr", ds.mr_masks), ("ct", ds.ct_masks)):
        if mask_list is not None:
            for i, m in enumerate(mask_list):
                masklib.save_mask_png(m, out / "mask" / f"{name}_{i:04d}.png")
    _write_meta(
        out / "meta.txt",
        {
            "n_mr": len(ds.mr),
            "n_ct": len(ds.ct),
            "paired": int(ds.paired),
            "mr_lo": mr_lo,
            "mr_hi": mr_hi,
            "ct_lo": ct_lo,
            "ct_hi": ct_hi,
        },
    )


def _denorm(img: ImageGrid, rng: tuple[float, float]) -> ImageGrid:
    lo, hi = rng
    return ImageGrid((img.pixels + 1.0) / 2.0 * (hi - lo) + lo, img.modality, rng)


def load_dataset(path: Path | str) -> SliceDataset:
    """Load a split written by save_dataset; slices carry source intensities."""
    root = Path(path)
    meta_path = root / "meta.txt"
    if not meta_path.exists():
        raise UnreadableVolume(f"no meta.txt under {root}")
    meta = _read_meta(meta_path)
    mr_rng = (float(meta["mr_lo"]), float(meta["mr_hi"]))
    ct_rng = (float(meta["ct_lo"]), float(meta["ct_hi"]))

    def load_stream(name, count, rng, modality):
        out = []
        for i in range(count):
            p = root / name / f"{i:04d}.png"
            if not p.exists():
                raise UnreadableVolume(f"missing slice {p}")
            out.append(_load_slice_png(p, *rng, modality))
        return out

    mr = load_stream("mr", int(meta["n_mr"]), mr_rng, Modality.PHANTOM_MR)
    ct = load_stream("ct", int(meta["n_ct"]), ct_rng, Modality.PHANTOM_CT)

    def load_masks(name, count):
        files = [root / "mask" / f"{name}_{i:04d}.png" for i in range(count)]
        if not all(f.exists() for f in files):
            return None
        return [masklib.load_mask_png(f, masklib.MaskSource.EXTRACTED) for f in files]

    return SliceDataset(
        mr,
        ct,
        load_masks("mr", len(mr)),
        load_masks("ct", len(ct)),
        paired=bool(int(meta["paired"])),
        mr_source_range=mr_rng,
        ct_source_range=ct_rng,
    )


def load_volume_slices(
    path: Path | str, modality: Modality | str, target: tuple[int, int] = (224, 224)
) -> SliceDataset:
    """Ingest a directory of per-slice grayscale PNGs as one modality stream.

    Slices are normalized and aspect-preserving resized/padded to the target.
    With a meta.txt sidecar the declared range is used to recover raw
    intensities; otherwise the stored integer values are taken as-is.
    """
    try:
        modality = Modality(modality)
    except ValueError:
        raise UnsupportedModality(f"unknown modality {modality!r}") from None
    root = Path(path)
    if not root.is_dir():
        raise UnreadableVolume(f"{root} is not a directory")
    files = sorted(root.glob("*.png"))
    if not files:
        raise UnreadableVolume(f"no PNG slices under {root}")

    meta_path = root / "meta.txt"
    rng = None
    if meta_path.exists():
        meta = _read_meta(meta_path)
        key = "ct" if Modality(modality).is_ct_like else "mr"
        if f"{key}_lo" in meta:
            rng = (float(meta[f"{key}_lo"]), float(meta[f"{key}_hi"]))

    slices = []
    for f in files:
        if rng is not None:
            img = _load_slice_png(f, *rng, modality)
        else:
            arr = np.asarray(Image.open(f), dtype=np.float64)
            if arr.ndim == 3:
                arr = arr.mean(axis=2)
            img = ImageGrid(arr, modality, (float(arr.min()), float(arr.max() + 1)))
        slices.append(resize_pad(normalize(img), target))
    if Modality(modality).is_ct_like:
        return SliceDataset(mr=[], ct=slices, paired=False)
    return SliceDataset(mr=slices, ct=[], paired=False)
