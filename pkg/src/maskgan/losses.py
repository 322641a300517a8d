"""Training objectives: adversarial, cycle, mask supervision, cycle shape
consistency, and their weighted total.

All functions are pure in their tensor arguments and accept torch tensors or
numpy arrays (arrays are promoted to tensors). L1 terms are mean-reduced over
pixels then summed over the two domains, so magnitudes are resolution
independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import torch
import torch.nn.functional as F

from .core import AdversarialMode, LossWeights, MaskGANError, NonFinite, ShapeMismatch


class NotBinary(MaskGANError):
    """A supervision mask contains values other than 0 and 1."""


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def _check_finite(name: str, t: torch.Tensor) -> None:
    if not torch.isfinite(t).all():
        raise NonFinite(f"{name} contains non-finite values")


def _check_same_shape(name_a: str, a: torch.Tensor, name_b: str, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{name_a} {tuple(a.shape)} vs {name_b} {tuple(b.shape)}")


@dataclass
class LossBundle:
    """Raw per-term values plus the weighted generator total.

    Fields may be python floats or 0-dim torch tensors; the training loop
    keeps tensors long enough to backpropagate and stores floats.
    """

    adv_g: Any
    adv_d: Any
    cycle: Any
    mask: Any
    shape: Any
    total: Any

    def as_floats(self) -> "LossBundle":
        def to_float(v):
            return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)

        return LossBundle(*(to_float(getattr(self, f)) for f in
                            ("adv_g", "adv_d", "cycle", "mask", "shape", "total")))


def adversarial_loss(scores_real, scores_fake, mode: AdversarialMode) -> tuple:
    """Per-mode generator and discriminator terms, mean-reduced over patches.

    LEAST_SQUARES returns two losses to minimize (targets: fake->1 for the
    generator; real->1, fake->0 for the discriminator). VANILLA_LOG treats
    scores as logits and returns the log-form objective values: the generator
    minimizes its term, the discriminator maximizes its term (training negates
    it). Only the least-squares form is used for training by default.
    """
    real = _as_tensor(scores_real)
    fake = _as_tensor(scores_fake)
    _check_finite("scores_real", real)
    _check_finite("scores_fake", fake)
    if mode == AdversarialMode.LEAST_SQUARES:
        gen_term = ((fake - 1.0) ** 2).mean()
        disc_term = ((real - 1.0) ** 2).mean() + (fake**2).mean()
    elif mode == AdversarialMode.VANILLA_LOG:
        # log D(real) + log(1 - D(fake)), with D = sigmoid(score)
        gen_term = F.logsigmoid(-fake).mean()
        disc_term = F.logsigmoid(real).mean() + F.logsigmoid(-fake).mean()
    else:
        raise MaskGANError(f"unknown adversarial mode {mode}")
    return gen_term, disc_term


def cycle_loss(x, recon_x, y, recon_y):
    """Mean L1 round-trip error, summed over both translation directions."""
    x, rx, y, ry = map(_as_tensor, (x, recon_x, y, recon_y))
    _check_same_shape("x", x, "recon_x", rx)
    _check_same_shape("y", y, "recon_y", ry)
    return (x - rx).abs().mean() + (y - ry).abs().mean()


def mask_loss(a_mr_bg, b_mr_bg, a_ct_bg, b_ct_bg):
    """Mean L1 between learned and extracted background masks, both domains.

    The b arguments are the coarse supervision masks and must be binary.
    """
    a_mr, b_mr, a_ct, b_ct = map(_as_tensor, (a_mr_bg, b_mr_bg, a_ct_bg, b_ct_bg))
    _check_same_shape("a_mr_bg", a_mr, "b_mr_bg", b_mr)
    _check_same_shape("a_ct_bg", a_ct, "b_ct_bg", b_ct)
    for name, b in (("b_mr_bg", b_mr), ("b_ct_bg", b_ct)):
        if not torch.logical_or(b == 0, b == 1).all():
            raise NotBinary(f"{name} is not a binary mask")
    return (a_mr - b_mr).abs().mean() + (a_ct - b_ct).abs().mean()


def csc_loss(a_mr_bg, a_tilde_ct_bg, a_ct_bg, a_tilde_mr_bg):
    """Mean L1 between the mask of a real image and the mask recomputed on
    its synthetic translation, summed over both directions."""
    a_mr, at_ct, a_ct, at_mr = map(_as_tensor, (a_mr_bg, a_tilde_ct_bg, a_ct_bg, a_tilde_mr_bg))
    _check_same_shape("a_mr_bg", a_mr, "a_tilde_ct_bg", at_ct)
    _check_same_shape("a_ct_bg", a_ct, "a_tilde_mr_bg", at_mr)
    return (a_mr - at_ct).abs().mean() + (a_ct - at_mr).abs().mean()


def total_loss(adv_g, adv_d, cycle, mask, shape, weights: LossWeights) -> LossBundle:
    """Weighted generator objective; raw terms are retained alongside.

    total = adv_g + lambda_cycle * cycle + lambda_mask * mask
          + lambda_shape * shape
    (adversarial + weighted cycle term form the plain GAN objective).
    """
    total = (
        adv_g
        + weights.lambda_cycle * cycle
        + weights.lambda_mask * mask
        + weights.lambda_shape * shape
    )
    bundle = LossBundle(adv_g=adv_g, adv_d=adv_d, cycle=cycle, mask=mask, shape=shape, total=total)
    for name in ("adv_g", "adv_d", "cycle", "mask", "shape", "total"):
        v = getattr(bundle, name)
        finite = torch.isfinite(v).all() if isinstance(v, torch.Tensor) else bool(
            v == v and abs(v) != float("inf")
        )
        if not finite:
            raise NonFinite(f"loss term {name} is not finite")
    return bundle
