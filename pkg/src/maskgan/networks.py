"""Dual-branch translation generators and patch discriminators.

Each generator runs one shared residual encoder whose features feed two
decoder heads: a mask head emitting N per-pixel attention channels on the
probability simplex (channel N is background), and a content head emitting
N - 1 bounded foreground content images. The output is the attention-weighted
sum of the input (background channel) and the contents (foreground channels).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .core import ImageGrid, MaskGANError, Modality, NonFinite, ShapeMismatch

SIMPLEX_ATOL = 1e-5        # tolerance on per-pixel channel sums of mask sets
COMPOSE_SIMPLEX_ATOL = 1e-3  # compose() rejects mask sets further off than this


class SimplexViolation(MaskGANError):
    """Attention channels do not sum to one per pixel."""


@dataclass(frozen=True)
class AttentionMaskSet:
    """N attention maps; maps[-1] is the background channel."""

    maps: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.maps, dtype=np.float64)
        if m.ndim != 3 or m.shape[0] < 2:
            raise ShapeMismatch(f"expected (N>=2, H, W) maps, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise NonFinite("attention maps contain non-finite values")
        if m.min() < -SIMPLEX_ATOL or m.max() > 1 + SIMPLEX_ATOL:
            raise SimplexViolation(
                f"mask values outside [0, 1]: min {m.min():.3g}, max {m.max():.3g}"
            )
        object.__setattr__(self, "maps", m)

    @property
    def n_masks(self) -> int:
        return self.maps.shape[0]

    @property
    def background(self) -> np.ndarray:
        return self.maps[-1]

    @property
    def foreground(self) -> np.ndarray:
        return self.maps[:-1]

    def simplex_deviation(self) -> float:
        return float(np.abs(self.maps.sum(axis=0) - 1.0).max())


@dataclass(frozen=True)
class ContentStack:
    """N - 1 synthesized foreground content images, each in [-1, 1]."""

    contents: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.contents, dtype=np.float64)
        if c.ndim != 3:
            raise ShapeMismatch(f"expected (N-1, H, W) contents, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise NonFinite("contents contain non-finite values")
        if c.min() < -1 - SIMPLEX_ATOL or c.max() > 1 + SIMPLEX_ATOL:
            raise MaskGANError("content values must lie in [-1, 1]")
        object.__setattr__(self, "contents", c)


@dataclass(frozen=True)
class GeneratorOutput:
    """Bundle of one generator pass: composed output, masks, contents."""

    output: ImageGrid
    masks: AttentionMaskSet
    contents: ContentStack


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture hyperparameters shared by a generator/discriminator pair."""

    in_channels: int = 1
    n_masks: int = 10
    gen_width: int = 64
    gen_downsamples: int = 2
    gen_res_blocks: int = 9
    disc_width: int = 64
    disc_layers: int = 3

    def __post_init__(self):
        if self.n_masks < 2:
            raise MaskGANError(f"need n_masks >= 2, got {self.n_masks}")
        if min(self.gen_width, self.gen_downsamples, self.gen_res_blocks, self.disc_width, self.disc_layers) < 1:
            raise MaskGANError("all architecture sizes must be >= 1")


def compose_arrays(x, masks, contents):
    """Attention-weighted composition; works on numpy arrays and torch tensors.

    x: (..., H, W); masks: (N, H, W) or (B, N, H, W); contents one channel
    fewer. Accumulates foreground terms in channel order so the result is
    reproducible bit-for-bit.
    """
    if masks.ndim == 3:
        out = masks[-1] * x
        for i in range(masks.shape[0] - 1):
            out = out + masks[i] * contents[i]
    else:
        out = masks[:, -1:] * x
        for i in range(masks.shape[1] - 1):
            out = out + masks[:, i : i + 1] * contents[:, i : i + 1]
    return out


def compose(img: ImageGrid, masks: AttentionMaskSet, contents: ContentStack) -> ImageGrid:
    """Background-masked input plus attention-masked foreground contents."""
    n, h, w = masks.maps.shape
    if img.shape != (h, w):
        raise ShapeMismatch(f"input {img.shape} vs masks {(h, w)}")
    if contents.contents.shape != (n - 1, h, w):
        raise ShapeMismatch(
            f"contents {contents.contents.shape} inconsistent with {n} masks"
        )
    dev = masks.simplex_deviation()
    if dev > COMPOSE_SIMPLEX_ATOL:
        raise SimplexViolation(f"channel sums off by {dev:.3g} (> {COMPOSE_SIMPLEX_ATOL})")
    out = compose_arrays(img.pixels, masks.maps, contents.contents)
    return ImageGrid(out, img.modality, img.value_range)


def _init_conv_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _decoder_head(width: int, downsamples: int, out_channels: int) -> nn.Sequential:
    layers: list[nn.Module] = []
    ch = width * 2**downsamples
    for _ in range(downsamples):
        layers += [
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(ch, ch // 2, 3, padding=1),
            nn.InstanceNorm2d(ch // 2),
            nn.ReLU(inplace=True),
        ]
        ch //= 2
    layers.append(nn.Conv2d(ch, out_channels, 7, padding=3, padding_mode="reflect"))
    return nn.Sequential(*layers)


class MaskContentGenerator(nn.Module):
    """Shared encoder trunk forked into a mask head and a content head.

    Both heads consume the same encoder object: shape knowledge extracted for
    the masks is embedded in the features the content head synthesizes from.
    """

    def __init__(self, spec: NetworkSpec, target: Modality):
        super().__init__()
        self.spec = spec
        self.target = target
        w = spec.gen_width

        enc: list[nn.Module] = [
            nn.Conv2d(spec.in_channels, w, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(w),
            nn.ReLU(inplace=True),
        ]
        ch = w
        for _ in range(spec.gen_downsamples):
            enc += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        enc += [ResidualBlock(ch) for _ in range(spec.gen_res_blocks)]
        self.encoder = nn.Sequential(*enc)

        self.mask_head = _decoder_head(w, spec.gen_downsamples, spec.n_masks)
        self.content_head = _decoder_head(w, spec.gen_downsamples, spec.n_masks - 1)
        _init_conv_weights(self)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (output, masks, contents) for a (B, C, H, W) batch."""
        feats = self.encoder(x)
        masks = torch.softmax(self.mask_head(feats), dim=1)
        contents = torch.tanh(self.content_head(feats))
        out = compose_arrays(x, masks, contents)
        return out, masks, contents


class PatchDiscriminator(nn.Module):
    """Stack of strided convolutions scoring overlapping receptive fields.

    With the default three strided layers each patch score sees about 70
    input pixels; a 224x224 input yields a 26x26 score grid.
    """

    def __init__(self, spec: NetworkSpec, use_norm: bool = True):
        super().__init__()
        w = spec.disc_width
        layers: list[nn.Module] = [
            nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = w
        for _ in range(spec.disc_layers - 1):
            layers.append(nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1))
            if use_norm:
                layers.append(nn.InstanceNorm2d(ch * 2))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch *= 2
        layers.append(nn.Conv2d(ch, ch * 2, 4, stride=1, padding=1))
        if use_norm:
            layers.append(nn.InstanceNorm2d(ch * 2))
        layers.append(nn.LeakyReLU(0.2, inplace=True))
        layers.append(nn.Conv2d(ch * 2, 1, 4, stride=1, padding=1))
        self.layers = nn.Sequential(*layers)
        self.stride = 2**spec.disc_layers
        _init_conv_weights(self)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)

    def receptive_field(self) -> int:
        """Input pixels influencing one output score."""
        rf, jump = 1, 1
        for m in self.layers:
            if isinstance(m, nn.Conv2d):
                rf += (m.kernel_size[0] - 1) * jump
                jump *= m.stride[0]
        return rf


def _to_batch(img: ImageGrid, device=None) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(img.pixels)).float()
    return t.unsqueeze(0).unsqueeze(0).to(device or "cpu")


def generator_forward(net: MaskContentGenerator, img: ImageGrid) -> GeneratorOutput:
    """Eval-mode single-slice pass returning a validated numpy bundle."""
    if not img.is_normalized:
        raise MaskGANError("generator input must be normalized to [-1, 1]")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            device = next(net.parameters()).device
            out, masks, contents = net(_to_batch(img, device))
    finally:
        net.train(was_training)
    mask_set = AttentionMaskSet(masks[0].double().cpu().numpy())
    dev = mask_set.simplex_deviation()
    if dev > SIMPLEX_ATOL:
        raise SimplexViolation(f"forward pass broke the simplex by {dev:.3g}")
    content_stack = ContentStack(contents[0].double().cpu().numpy())
    output = ImageGrid(
        out[0, 0].double().cpu().numpy(), net.target, (-1.0, 1.0)
    )
    return GeneratorOutput(output, mask_set, content_stack)


def discriminator_forward(net: PatchDiscriminator, img: ImageGrid) -> np.ndarray:
    """Eval-mode pass returning the patch realism score grid."""
    if not img.is_normalized:
        raise MaskGANError("discriminator input must be normalized to [-1, 1]")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            device = next(net.parameters()).device
            scores = net(_to_batch(img, device))
    finally:
        net.train(was_training)
    return scores[0, 0].double().cpu().numpy()
