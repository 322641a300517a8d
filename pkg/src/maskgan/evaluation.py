"""Image-quality metrics, error maps, paired t-tests, and the robustness sweep.

Metrics are computed in intensity units (CT: the clipped window, width 3000)
so aggregate numbers live on the familiar scale. SSIM uses a Gaussian window
(11 taps, sigma 1.5) and the standard stability constants; these are frozen
because SSIM values are constant-sensitive.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi
import scipy.stats

from .core import ImageGrid, MaskGANError, ShapeMismatch, denormalize, normalize
from .masks import sample_displacement, deform_mask
from .phantoms import SliceDataset, UnpairedDataset

PSNR_CAP_DB = 100.0  # sentinel for identical images; keeps aggregates finite

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class RangeMismatch(MaskGANError):
    pass


class WindowTooLarge(MaskGANError):
    pass


class DegenerateSample(MaskGANError):
    pass


def _pixels(x) -> np.ndarray:
    return np.asarray(x.pixels if isinstance(x, ImageGrid) else x, dtype=np.float64)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")


def mae(gt, pred) -> float:
    """Mean absolute pixel difference in the inputs' shared intensity units."""
    if isinstance(gt, ImageGrid) and isinstance(pred, ImageGrid):
        if gt.value_range != pred.value_range:
            raise RangeMismatch(f"{gt.value_range} vs {pred.value_range}")
    a, b = _pixels(gt), _pixels(pred)
    _check_shapes(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(gt, pred, data_range: float = 3000.0) -> float:
    """10 log10(range^2 / MSE) in dB, capped at the zero-error sentinel."""
    if data_range <= 0:
        raise MaskGANError(f"data_range must be positive, got {data_range}")
    a, b = _pixels(gt), _pixels(pred)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(data_range**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def ssim(
    gt,
    pred,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    data_range: float | None = None,
    sigma: float = SSIM_SIGMA,
) -> float:
    """Mean local structural similarity over Gaussian-weighted windows.

    Local statistics come from separable correlation; only windows fully
    inside the image contribute (valid region), so boundary handling never
    affects the score.
    """
    a, b = _pixels(gt), _pixels(pred)
    _check_shapes(a, b)
    if window % 2 != 1 or window < 3:
        raise MaskGANError(f"window must be odd and >= 3, got {window}")
    if window > min(a.shape):
        raise WindowTooLarge(f"window {window} exceeds image {a.shape}")
    if data_range is None:
        if isinstance(gt, ImageGrid):
            lo, hi = gt.value_range
            data_range = hi - lo
        else:
            raise MaskGANError("data_range required for bare arrays")

    k = _gaussian_window(window, sigma)

    def filt(img: np.ndarray) -> np.ndarray:
        out = ndi.correlate1d(img, k, axis=0, mode="constant")
        out = ndi.correlate1d(out, k, axis=1, mode="constant")
        r = (window - 1) // 2
        return out[r:-r, r:-r]

    mu_a, mu_b = filt(a), filt(b)
    # weighted (population) second moments
    s_aa = filt(a * a) - mu_a**2
    s_bb = filt(b * b) - mu_b**2
    s_ab = filt(a * b) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    return float(np.mean(num / den))


def error_map(gt: ImageGrid, pred: ImageGrid, png_path: Path | str | None = None) -> ImageGrid:
    """Per-pixel absolute error; optionally rendered as a color-mapped PNG."""
    a, b = _pixels(gt), _pixels(pred)
    _check_shapes(a, b)
    err = np.abs(a - b)
    lo, hi = gt.value_range
    out = ImageGrid(err, gt.modality, (0.0, max(hi - lo, float(err.max()), 1e-12)))
    if png_path is not None:
        render_error_map(out, png_path)
    return out


def render_error_map(err: ImageGrid, path: Path | str, scale: float | None = None) -> None:
    import matplotlib

    from PIL import Image

    cmap = matplotlib.colormaps["inferno"]
    hi = scale if scale is not None else max(float(err.pixels.max()), 1e-12)
    rgba = cmap(np.clip(err.pixels / hi, 0.0, 1.0))
    Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(path)


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t statistic and p-value on the differences a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatch(f"paired samples must be equal-length 1-D, got {a.shape}, {b.shape}")
    n = len(a)
    if n < 2:
        raise DegenerateSample(f"need >= 2 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateSample("differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = float(2.0 * scipy.stats.t.sf(abs(t), n - 1))
    return t, p


@dataclass
class DirectionMetrics:
    """Per-direction metric aggregates, means +/- std over repetitions."""

    mae_mean: float
    mae_std: float
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float
    per_slice_mae: list[float] = field(default_factory=list)
    per_slice_psnr: list[float] = field(default_factory=list)
    per_slice_ssim: list[float] = field(default_factory=list)

    @property
    def ssim_percent(self) -> float:
        return self.ssim_mean * 100.0


@dataclass
class MetricsReport:
    """Evaluation results for both translation directions.

    MAE is in intensity units of the target modality (CT: the 3000-wide
    clipped window); SSIM is a fraction (reported x100 in tables).
    """

    mri_to_ct: DirectionMetrics
    ct_to_mri: DirectionMetrics
    n_slices: int
    n_repeats: int
    intensity_domain: str = "ct-clipped-window"
    ttest: tuple[float, float, str] | None = None

    def compare_with(self, other: "MetricsReport", label: str) -> tuple[float, float]:
        """Paired t-test of this report's per-slice CT MAE against another's."""
        t, p = paired_t_test(self.mri_to_ct.per_slice_mae, other.mri_to_ct.per_slice_mae)
        self.ttest = (t, p, label)
        return t, p

    def write_csv(self, path: Path | str) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["direction", "slice", "mae", "psnr", "ssim_percent", "intensity_domain"]
            )
            for name, d in (("mri_to_ct", self.mri_to_ct), ("ct_to_mri", self.ct_to_mri)):
                for i, (m, p, s) in enumerate(
                    zip(d.per_slice_mae, d.per_slice_psnr, d.per_slice_ssim)
                ):
                    w.writerow([name, i, repr(m), repr(p), repr(s * 100), self.intensity_domain])
                w.writerow([name, "aggregate_mean", repr(d.mae_mean), repr(d.psnr_mean),
                            repr(d.ssim_percent), self.intensity_domain])
                w.writerow([name, "aggregate_std", repr(d.mae_std), repr(d.psnr_std),
                            repr(d.ssim_std * 100), self.intensity_domain])
            if self.ttest is not None:
                w.writerow(["ttest", self.ttest[2], repr(self.ttest[0]), repr(self.ttest[1]), "", ""])


def _direction_metrics(gts, preds, source_range) -> tuple[list[float], list[float], list[float]]:
    maes, psnrs, ssims = [], [], []
    width = source_range[1] - source_range[0]
    for gt, pred in zip(gts, preds):
        gt_i = denormalize(gt, source_range)
        pr_i = denormalize(pred, source_range)
        maes.append(mae(gt_i, pr_i))
        psnrs.append(psnr(gt_i, pr_i, data_range=width))
        ssims.append(ssim(gt_i, pr_i, data_range=width))
    return maes, psnrs, ssims


def evaluate(
    generators,
    test: SliceDataset,
    repeats: int = 5,
    seed: int = 0,
) -> MetricsReport:
    """Paired-set evaluation of both directions, aggregated over repetitions.

    generators: (g_mr, g_ct) torch modules or a checkpoint directory path.
    Each repetition re-shuffles the evaluation order under its own seed; the
    reported aggregate is the mean +/- std over repetitions.
    """
    import torch

    if isinstance(generators, (str, Path)):
        from .training import load_checkpoint

        state = load_checkpoint(generators)
        g_mr, g_ct = state.g_mr, state.g_ct
    else:
        g_mr, g_ct = generators
    if not test.paired:
        raise UnpairedDataset("evaluation requires a paired test set")

    g_mr.eval()
    g_ct.eval()
    device = next(g_ct.parameters()).device
    gt_mr = [normalize(img) for img in test.mr]
    gt_ct = [normalize(img) for img in test.ct]
    with torch.no_grad():
        batch_mr = torch.from_numpy(
            np.stack([i.pixels for i in gt_mr])[:, None].astype(np.float32)
        ).to(device)
        batch_ct = torch.from_numpy(
            np.stack([i.pixels for i in gt_ct])[:, None].astype(np.float32)
        ).to(device)
        syn_ct = g_ct(batch_mr)[0].cpu().double().numpy()[:, 0]
        syn_mr = g_mr(batch_ct)[0].cpu().double().numpy()[:, 0]

    syn_ct_grids = [gt_ct[i].with_pixels(np.clip(syn_ct[i], -1, 1)) for i in range(len(gt_ct))]
    syn_mr_grids = [gt_mr[i].with_pixels(np.clip(syn_mr[i], -1, 1)) for i in range(len(gt_mr))]

    ct_slice = _direction_metrics(gt_ct, syn_ct_grids, test.ct_source_range)
    mr_slice = _direction_metrics(gt_mr, syn_mr_grids, test.mr_source_range)

    def aggregate(values) -> tuple[float, float]:
        per_rep = []
        for r in range(repeats):
            rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
            order = rng.permutation(len(values))
            per_rep.append(float(np.mean([values[i] for i in order])))
        return float(np.mean(per_rep)), float(np.std(per_rep))

    def direction(slices) -> DirectionMetrics:
        maes, psnrs, ssims = slices
        (m_m, m_s), (p_m, p_s), (s_m, s_s) = aggregate(maes), aggregate(psnrs), aggregate(ssims)
        return DirectionMetrics(m_m, m_s, p_m, p_s, s_m, s_s, maes, psnrs, ssims)

    return MetricsReport(
        mri_to_ct=direction(ct_slice),
        ct_to_mri=direction(mr_slice),
        n_slices=len(test.mr),
        n_repeats=repeats,
    )


def deform_study(
    train_fn,
    sigmas: list[float],
    seeds: list[int],
    csv_path: Path | str | None = None,
) -> list[dict]:
    """Robustness sweep: train with elastically corrupted masks per (sigma,
    seed) cell and record the resulting test MAE.

    train_fn(sigma, seed) -> float must train one model on masks corrupted at
    that level and return its test MAE. Rows: sigma, seed, method, mae.
    """
    if any(s < 0 for s in sigmas):
        raise MaskGANError("sigmas must be non-negative")
    rows = []
    for sigma in sigmas:
        for seed in seeds:
            value = float(train_fn(sigma, seed))
            rows.append({"sigma": sigma, "seed": seed, "method": "maskgan", "mae": value})
    if csv_path is not None:
        with Path(csv_path).open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sigma", "seed", "method", "mae"])
            w.writeheader()
            w.writerows(rows)
    return rows


def corrupt_masks(dataset: SliceDataset, sigma: float, seed: int) -> SliceDataset:
    """Copy of the dataset with both mask streams elastically deformed."""
    def deform_list(mask_list, salt):
        if mask_list is None or sigma == 0:
            return mask_list
        out = []
        for i, m in enumerate(mask_list):
            f = sample_displacement(m.shape, sigma, seed=int(np.random.SeedSequence([seed, salt, i]).generate_state(1)[0]))
            out.append(deform_mask(m, f))
        return out

    return SliceDataset(
        mr=dataset.mr,
        ct=dataset.ct,
        mr_masks=deform_list(dataset.mr_masks, 0),
        ct_masks=deform_list(dataset.ct_masks, 1),
        paired=dataset.paired,
        mr_source_range=dataset.mr_source_range,
        ct_source_range=dataset.ct_source_range,
    )
