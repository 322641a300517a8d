"""Alternating generator/discriminator optimization over unpaired batches.

One step = one joint update of both generators on the weighted total
objective, then one joint update of both discriminators on the adversarial
terms. Batch order is derived from (seed, epoch) so interrupted runs resume
onto the exact step sequence of an uninterrupted one.
"""

from __future__ import annotations

import itertools
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .core import (
    LossWeights,
    MaskGANError,
    Modality,
    NonFinite,
    RunConfig,
    config_hash,
    lr_at_epoch,
    normalize,
    save_config,
    load_config,
    LossTrace,
)
from .masks import extract_coarse_mask
from .networks import MaskContentGenerator, NetworkSpec, PatchDiscriminator
from .phantoms import SliceDataset


class NonFiniteLoss(MaskGANError):
    """A loss term left the finite range; the run must abort."""


class ResumeMismatch(MaskGANError):
    """Checkpoint was produced under a different configuration."""


class MissingCheckpoint(MaskGANError):
    pass


@dataclass
class Batch:
    """Images plus their binary background supervision maps, both (B,1,H,W)."""

    images: torch.Tensor
    backgrounds: torch.Tensor


@dataclass
class TrainState:
    g_mr: MaskContentGenerator  # CT -> MR
    g_ct: MaskContentGenerator  # MR -> CT
    d_mr: PatchDiscriminator
    d_ct: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    cfg: RunConfig
    epoch: int = 0
    step: int = 0

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"g_mr": self.g_mr, "g_ct": self.g_ct, "d_mr": self.d_mr, "d_ct": self.d_ct}

    def set_lr(self, lr: float) -> None:
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr


def spec_from_config(cfg: RunConfig) -> NetworkSpec:
    return NetworkSpec(
        in_channels=1,
        n_masks=cfg.n_masks,
        gen_width=cfg.gen_width,
        gen_downsamples=cfg.gen_downsamples,
        gen_res_blocks=cfg.gen_res_blocks,
        disc_width=cfg.disc_width,
        disc_layers=cfg.disc_layers,
    )


def build_state(cfg: RunConfig, device: str = "cpu") -> TrainState:
    """Construct the four networks and two optimizers under the run seed."""
    torch.manual_seed(cfg.seed)
    spec = spec_from_config(cfg)
    g_mr = MaskContentGenerator(spec, Modality.MR).to(device)
    g_ct = MaskContentGenerator(spec, Modality.CT).to(device)
    d_mr = PatchDiscriminator(spec).to(device)
    d_ct = PatchDiscriminator(spec).to(device)
    betas = (cfg.adam_beta1, cfg.adam_beta2)
    opt_g = torch.optim.Adam(
        itertools.chain(g_mr.parameters(), g_ct.parameters()), lr=cfg.base_lr, betas=betas
    )
    opt_d = torch.optim.Adam(
        itertools.chain(d_mr.parameters(), d_ct.parameters()), lr=cfg.base_lr, betas=betas
    )
    return TrainState(g_mr, g_ct, d_mr, d_ct, opt_g, opt_d, cfg)


def _named_finite(**terms) -> None:
    for name, value in terms.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLoss(f"loss term '{name}' became non-finite")


def train_step(
    state: TrainState, batch_mr: Batch, batch_ct: Batch, weights: LossWeights
) -> L.LossBundle:
    """One generator update on the full objective, then one discriminator
    update on the adversarial terms. Returns the step's loss values."""
    try:
        return _train_step(state, batch_mr, batch_ct, weights)
    except NonFinite as e:
        raise NonFiniteLoss(str(e)) from e


def _train_step(
    state: TrainState, batch_mr: Batch, batch_ct: Batch, weights: LossWeights
) -> L.LossBundle:
    cfg = state.cfg
    mode = cfg.adversarial_mode
    x, y = batch_mr.images, batch_ct.images

    # -- generators -------------------------------------------------------
    state.opt_g.zero_grad(set_to_none=True)
    o_ct, m_mr, _ = state.g_ct(x)   # synthetic CT; masks seen on real MR
    o_mr, m_ct, _ = state.g_mr(y)   # synthetic MR; masks seen on real CT
    recon_mr, mt_ct, _ = state.g_mr(o_ct)  # cycle pass also masks synthetic CT
    recon_ct, mt_mr, _ = state.g_ct(o_mr)
    if cfg.csc_detach_synthetic:
        # Recompute the synthetic-image masks on a detached copy: the shape
        # term then trains only the re-masking generator, not the producer.
        _, mt_ct_used, _ = state.g_mr(o_ct.detach())
        _, mt_mr_used, _ = state.g_ct(o_mr.detach())
    else:
        mt_ct_used, mt_mr_used = mt_ct, mt_mr

    s_fake_ct = state.d_ct(o_ct)
    s_fake_mr = state.d_mr(o_mr)
    # the real-score argument does not enter the generator term
    adv_ct, _ = L.adversarial_loss(s_fake_ct.detach(), s_fake_ct, mode)
    adv_mr, _ = L.adversarial_loss(s_fake_mr.detach(), s_fake_mr, mode)
    adv_g = adv_ct + adv_mr

    cyc = L.cycle_loss(x, recon_mr, y, recon_ct)
    msk = L.mask_loss(
        m_mr[:, -1:], batch_mr.backgrounds, m_ct[:, -1:], batch_ct.backgrounds
    )
    shp = L.csc_loss(m_mr[:, -1:], mt_ct_used[:, -1:], m_ct[:, -1:], mt_mr_used[:, -1:])
    _named_finite(adv_g=adv_g, cycle=cyc, mask=msk, shape=shp)

    bundle_t = L.total_loss(adv_g, torch.zeros(()), cyc, msk, shp, weights)
    bundle_t.total.backward()
    state.opt_g.step()

    # -- discriminators ---------------------------------------------------
    state.opt_d.zero_grad(set_to_none=True)
    _, disc_ct = L.adversarial_loss(state.d_ct(y), state.d_ct(o_ct.detach()), mode)
    _, disc_mr = L.adversarial_loss(state.d_mr(x), state.d_mr(o_mr.detach()), mode)
    if mode.value == "VANILLA_LOG":
        adv_d = -(disc_ct + disc_mr)  # maximize the log objective
    else:
        adv_d = disc_ct + disc_mr
    _named_finite(adv_d=adv_d)
    adv_d.backward()
    state.opt_d.step()

    state.step += 1
    return L.LossBundle(
        adv_g=adv_g, adv_d=adv_d, cycle=cyc, mask=msk, shape=shp, total=bundle_t.total
    ).as_floats()


# --- checkpointing ---------------------------------------------------------


def save_checkpoint(state: TrainState, path: Path | str) -> Path:
    """Write one file per network plus optimizers and a manifest, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=path.parent, prefix=".ckpt_"))
    try:
        for name, net in state.networks().items():
            torch.save(net.state_dict(), tmp / f"{name}.pt")
        torch.save(
            {"opt_g": state.opt_g.state_dict(), "opt_d": state.opt_d.state_dict()},
            tmp / "optim.pt",
        )
        (tmp / "manifest.txt").write_text(
            f"epoch={state.epoch}\nstep={state.step}\nconfig_hash={config_hash(state.cfg)}\n"
        )
        save_config(state.cfg, tmp / "config.cfg")
        if path.exists():
            shutil.rmtree(path)
        os.rename(tmp, path)
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return path


def read_manifest(path: Path | str) -> dict[str, str]:
    manifest = Path(path) / "manifest.txt"
    if not manifest.exists():
        raise MissingCheckpoint(f"no manifest under {path}")
    out = {}
    for line in manifest.read_text().splitlines():
        k, _, v = line.partition("=")
        out[k] = v
    return out


def load_checkpoint(path: Path | str, cfg: RunConfig | None = None, device: str = "cpu") -> TrainState:
    """Rebuild a TrainState from a checkpoint directory.

    When cfg is given its hash must match the checkpoint's; otherwise the
    stored config is used.
    """
    path = Path(path)
    manifest = read_manifest(path)
    stored_cfg = load_config(path / "config.cfg")
    if cfg is not None and config_hash(cfg) != manifest["config_hash"]:
        raise ResumeMismatch(
            f"checkpoint config hash {manifest['config_hash']} != {config_hash(cfg)}"
        )
    cfg = cfg or stored_cfg
    state = build_state(cfg, device)
    for name, net in state.networks().items():
        net.load_state_dict(torch.load(path / f"{name}.pt", weights_only=True))
    opt_states = torch.load(path / "optim.pt", weights_only=True)
    state.opt_g.load_state_dict(opt_states["opt_g"])
    state.opt_d.load_state_dict(opt_states["opt_d"])
    state.epoch = int(manifest["epoch"])
    state.step = int(manifest["step"])
    return state


def latest_checkpoint(run_dir: Path | str) -> Path:
    root = Path(run_dir) / "checkpoints"
    candidates = sorted(root.glob("epoch_*")) if root.is_dir() else []
    if (root / "final").exists():
        return root / "final"
    if not candidates:
        raise MissingCheckpoint(f"no checkpoints under {root}")
    return candidates[-1]


# --- full runs --------------------------------------------------------------


def _dataset_tensors(data: SliceDataset, device: str) -> tuple:
    """Stack normalized slices and background maps into training tensors."""
    def stack(images, mask_list):
        if mask_list is None:
            mask_list = [extract_coarse_mask(img) for img in images]
        imgs = torch.from_numpy(
            np.stack([normalize(img).pixels for img in images])[:, None].astype(np.float32)
        ).to(device)
        bgs = torch.from_numpy(
            np.stack([m.background for m in mask_list])[:, None].astype(np.float32)
        ).to(device)
        return imgs, bgs

    x, bx = stack(data.mr, data.mr_masks)
    y, by = stack(data.ct, data.ct_masks)
    return x, bx, y, by


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def train_run(
    cfg: RunConfig,
    data: SliceDataset,
    out_dir: Path | str,
    resume: bool = False,
    device: str = "cpu",
    progress=None,
    stop_after_epoch: int | None = None,
) -> Path:
    """Execute (or resume) a full training run; returns the final checkpoint.

    The run directory collects the resolved config, per-step loss CSV, and
    periodic checkpoints. Resuming requires an identical config and continues
    the exact step sequence of an uninterrupted run. stop_after_epoch
    simulates an interruption: the run checkpoints and returns early.
    """
    if len(data.mr) == 0 or len(data.ct) == 0:
        raise MaskGANError("training data must contain both modalities")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_root = out / "checkpoints"

    if resume:
        state = load_checkpoint(latest_checkpoint(out), cfg, device)
    else:
        save_config(cfg, out / "config.cfg")
        state = build_state(cfg, device)
    trace = LossTrace(out / "losses.csv", append=resume)

    x, bx, y, by = _dataset_tensors(data, device)
    n = min(len(x), len(y))
    if n < cfg.batch_size:
        raise MaskGANError(f"batch size {cfg.batch_size} exceeds dataset size {n}")

    for epoch in range(state.epoch + 1, cfg.epochs + 1):
        state.set_lr(lr_at_epoch(cfg, epoch))
        rng = epoch_rng(cfg.seed, epoch)
        perm_mr = rng.permutation(len(x))
        perm_ct = rng.permutation(len(y))
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx_mr = perm_mr[start : start + cfg.batch_size]
            idx_ct = perm_ct[start : start + cfg.batch_size]
            bundle = train_step(
                state,
                Batch(x[idx_mr], bx[idx_mr]),
                Batch(y[idx_ct], by[idx_ct]),
                cfg.loss_weights,
            )
            trace.append(state.step, epoch, bundle)
        state.epoch = epoch
        if progress is not None:
            progress(epoch, bundle)
        if stop_after_epoch is not None and epoch >= stop_after_epoch and epoch < cfg.epochs:
            return save_checkpoint(state, ckpt_root / f"epoch_{epoch:04d}")
        if epoch % cfg.checkpoint_every == 0 and epoch != cfg.epochs:
            save_checkpoint(state, ckpt_root / f"epoch_{epoch:04d}")
    save_checkpoint(state, ckpt_root / f"epoch_{cfg.epochs:04d}")
    return save_checkpoint(state, ckpt_root / "final")
