"""Command-line entry point tying the pipeline together.

Subcommands: make-phantoms, extract-masks, train, evaluate, deform-study,
figures. Exit codes: 0 success, 1 user error, 2 internal error. Every command
materializes its resolved flag values into the output directory before doing
any work, and heavyweight outputs are built under a .partial name until
complete.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import shutil
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, masks as masklib, phantoms, training
from .core import (
    ImageGrid,
    LossWeights,
    MaskGANError,
    Modality,
    RunConfig,
    denormalize,
    load_config,
    normalize,
    save_config,
    seed_all,
)
from .training import MissingCheckpoint, NonFiniteLoss


class UserError(MaskGANError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exceptions, not exit code 2."""

    def error(self, message):
        raise UserError(message)


@contextlib.contextmanager
def _partial(final: Path):
    """Build under <name>.partial, rename into place only when complete."""
    final = Path(final)
    tmp = final.with_name(final.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp) if tmp.is_dir() else tmp.unlink()
    yield tmp
    if final.exists():
        shutil.rmtree(final) if final.is_dir() else final.unlink()
    os.rename(tmp, final)


def _write_invocation(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func"}
    lines = [
        f"{k}={v}\n" for k, v in sorted(vars(args).items()) if k not in skip
    ]
    (out_dir / "cli_invocation.txt").write_text("".join(lines))


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message, flush=True)


# --- subcommand implementations --------------------------------------------


def cmd_make_phantoms(args) -> int:
    out = Path(args.out)
    _write_invocation(out, args)
    seed = args.seed if args.seed is not None else 0
    _say(args, f"phase=generate n={args.n} misalign={args.misalign} seed={seed}")
    train, test = phantoms.make_dataset(
        args.n, args.misalign, seed=seed, size=args.size
    )
    with _partial(out / "train") as tmp:
        phantoms.save_dataset(train, tmp)
    with _partial(out / "test") as tmp:
        phantoms.save_dataset(test, tmp)
    _say(args, f"phase=done train={len(train.mr)} test={len(test.mr)} out={out}")
    return 0


def cmd_extract_masks(args) -> int:
    src = Path(args.in_dir)
    out = Path(args.out)
    if not src.is_dir():
        raise UserError(f"--in directory {src} does not exist")
    files = sorted(src.glob("*.png"))
    if not files:
        raise UserError(f"no PNG slices under {src}")
    _write_invocation(out, args)
    with _partial(out / "masks") as tmp:
        tmp.mkdir(parents=True, exist_ok=True)
        skipped = 0
        for f in files:
            arr = np.asarray(Image.open(f), dtype=np.float64)
            if arr.ndim == 3:
                arr = arr.mean(axis=2)
            img = ImageGrid(arr, Modality.MR, (float(arr.min()), float(arr.max()) + 1.0))
            try:
                mask = masklib.extract_coarse_mask(
                    img, threshold=args.threshold, radius=args.radius
                )
            except masklib.EmptyForeground:
                skipped += 1
                _say(args, f"phase=skip slice={f.name} reason=empty-foreground")
                continue
            masklib.save_mask_png(mask, tmp / f.name)
    _say(args, f"phase=done masks={len(files) - skipped} skipped={skipped} out={out / 'masks'}")
    return 0


def _load_split(data_dir: Path, split: str) -> phantoms.SliceDataset:
    root = Path(data_dir)
    if (root / split / "meta.txt").exists():
        return phantoms.load_dataset(root / split)
    if (root / "meta.txt").exists():
        return phantoms.load_dataset(root)
    raise UserError(f"no dataset found under {root} (expected {split}/meta.txt or meta.txt)")


def _apply_ablations(cfg: RunConfig, args) -> RunConfig:
    w = cfg.loss_weights
    if getattr(args, "ablate_mask", False):
        w = LossWeights(0.0, 0.0, w.lambda_cycle)
    elif getattr(args, "ablate_shape", False):
        w = LossWeights(w.lambda_mask, 0.0, w.lambda_cycle)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed, loss_weights=w)
    else:
        cfg = dataclasses.replace(cfg, loss_weights=w)
    return cfg


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise UserError(f"config file {cfg_path} does not exist")
    cfg = _apply_ablations(load_config(cfg_path), args)
    data = _load_split(Path(args.data), "train")
    out = Path(args.out)
    _write_invocation(out, args)
    save_config(cfg, out / "config.cfg")
    _say(args, f"phase=train epochs={cfg.epochs} batches={len(data)//cfg.batch_size}")

    def progress(epoch, bundle):
        _say(
            args,
            f"phase=epoch epoch={epoch} total={bundle.total:.4f} "
            f"adv_g={bundle.adv_g:.4f} cycle={bundle.cycle:.4f} "
            f"mask={bundle.mask:.4f} shape={bundle.shape:.4f}",
        )

    ckpt = training.train_run(
        cfg, data, out, resume=args.resume, device=args.device, progress=progress
    )
    _say(args, f"phase=done checkpoint={ckpt}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingCheckpoint(f"checkpoint {ckpt} does not exist")
    test = _load_split(Path(args.data), "test")
    report_path = Path(args.report)
    if report_path.parent != Path("."):
        report_path.parent.mkdir(parents=True, exist_ok=True)
    _write_invocation(report_path.parent, args)
    report = evaluation.evaluate(ckpt, test, seed=args.seed if args.seed is not None else 0)
    with _partial(report_path) as tmp:
        report.write_csv(tmp)
    _say(
        args,
        "phase=done "
        f"mri_to_ct_mae={report.mri_to_ct.mae_mean:.3f} "
        f"mri_to_ct_psnr={report.mri_to_ct.psnr_mean:.3f} "
        f"mri_to_ct_ssim={report.mri_to_ct.ssim_percent:.2f} "
        f"ct_to_mri_mae={report.ct_to_mri.mae_mean:.3f}",
    )
    if args.maps:
        maps_dir = Path(args.maps)
        with _partial(maps_dir) as tmp:
            tmp.mkdir(parents=True, exist_ok=True)
            _render_maps(ckpt, test, tmp)
        _say(args, f"phase=maps out={maps_dir}")
    return 0


def _render_maps(ckpt: Path, test: phantoms.SliceDataset, out_dir: Path) -> None:
    import torch

    state = training.load_checkpoint(ckpt)
    state.g_ct.eval()
    with torch.no_grad():
        for i, (mr, ct) in enumerate(test.pairs()):
            mr_n, ct_n = normalize(mr), normalize(ct)
            t = torch.from_numpy(mr_n.pixels[None, None].astype(np.float32))
            syn = state.g_ct(t)[0][0, 0].double().numpy()
            syn_grid = ct_n.with_pixels(np.clip(syn, -1, 1))
            err = evaluation.error_map(
                denormalize(ct_n, test.ct_source_range),
                denormalize(syn_grid, test.ct_source_range),
            )
            evaluation.render_error_map(err, out_dir / f"error_{i:04d}.png")


def cmd_deform_study(args) -> int:
    try:
        sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    except ValueError:
        raise UserError(f"--sigmas must be comma-separated numbers, got {args.sigmas!r}")
    seeds = list(range(args.seeds))
    if not sigmas or not seeds:
        raise UserError("need at least one sigma and one seed")
    out = Path(args.out)
    _write_invocation(out, args)
    cfg = load_config(args.config) if args.config else RunConfig()
    train_data = _load_split(Path(args.data), "train")
    test_data = _load_split(Path(args.data), "test")

    def train_cell(sigma: float, seed: int) -> float:
        cell_cfg = dataclasses.replace(cfg, seed=seed)
        corrupted = evaluation.corrupt_masks(train_data, sigma, seed)
        run_dir = out / f"run_sigma{sigma:g}_seed{seed}"
        ckpt = training.train_run(cell_cfg, corrupted, run_dir, device=args.device)
        report = evaluation.evaluate(ckpt, test_data)
        value = report.mri_to_ct.mae_mean
        _say(args, f"phase=cell sigma={sigma:g} seed={seed} mae={value:.3f}")
        return value

    with _partial(out / "deform_study.csv") as tmp:
        evaluation.deform_study(train_cell, sigmas, seeds, csv_path=tmp)
    _say(args, f"phase=done csv={out / 'deform_study.csv'}")
    return 0


def emit_figure_bundle(run_dir: Path | str, data_dir: Path | str, out_dir: Path | str | None = None) -> Path:
    """Per test slice: input, synthetic output, error map, coarse mask, and
    learned background attention, as five PNG panels plus a summary CSV."""
    import torch

    run = Path(run_dir)
    ckpt = training.latest_checkpoint(run)
    test = _load_split(Path(data_dir), "test")
    out = Path(out_dir) if out_dir else run / "figures"
    state = training.load_checkpoint(ckpt)
    state.g_ct.eval()

    from PIL import Image

    def to_u8(arr: np.ndarray, lo: float, hi: float) -> np.ndarray:
        return np.clip((arr - lo) / (hi - lo) * 255.0, 0, 255).astype(np.uint8)

    with _partial(out) as tmp:
        tmp.mkdir(parents=True, exist_ok=True)
        rows = ["slice,mae\n"]
        with torch.no_grad():
            for i, (mr, ct) in enumerate(test.pairs()):
                mr_n, ct_n = normalize(mr), normalize(ct)
                t = torch.from_numpy(mr_n.pixels[None, None].astype(np.float32))
                syn_t, masks_t, _ = state.g_ct(t)
                syn = np.clip(syn_t[0, 0].double().numpy(), -1, 1)
                attn_bg = masks_t[0, -1].double().numpy()
                coarse = masklib.extract_coarse_mask(mr)
                gt_i = denormalize(ct_n, test.ct_source_range)
                syn_i = denormalize(ct_n.with_pixels(syn), test.ct_source_range)
                err = evaluation.error_map(gt_i, syn_i)
                stem = f"slice_{i:04d}"
                Image.fromarray(to_u8(mr_n.pixels, -1, 1)).save(tmp / f"{stem}_input.png")
                Image.fromarray(to_u8(syn, -1, 1)).save(tmp / f"{stem}_synthetic.png")
                evaluation.render_error_map(err, tmp / f"{stem}_error.png")
                masklib.save_mask_png(coarse, tmp / f"{stem}_mask.png")
                Image.fromarray(to_u8(attn_bg, 0, 1)).save(tmp / f"{stem}_attention.png")
                rows.append(f"{i},{np.mean(err.pixels)!r}\n")
        (tmp / "summary.csv").write_text("".join(rows))
    return out


def cmd_figures(args) -> int:
    run = Path(args.run)
    if not run.exists():
        raise UserError(f"run directory {run} does not exist")
    data = args.data
    if data is None:
        inv = run / "cli_invocation.txt"
        if inv.exists():
            for line in inv.read_text().splitlines():
                if line.startswith("data="):
                    data = line.partition("=")[2]
        if data is None:
            raise UserError("--data not given and not recorded in the run directory")
    out = emit_figure_bundle(run, data, args.out)
    _say(args, f"phase=done figures={out}")
    return 0


# --- argument wiring --------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="maskgan", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="global seed applied before any command")
    parser.add_argument("--device", default="cpu", help="torch device (default: cpu)")
    parser.add_argument("--quiet", action="store_true", help="suppress progress lines")
    # the same globals are accepted after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values parsed before it
    globals_parent = _Parser(add_help=False)
    globals_parent.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    globals_parent.add_argument("--device", default=argparse.SUPPRESS)
    globals_parent.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    parents = [globals_parent]
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("make-phantoms", help="generate a phantom dataset", parents=parents)
    p.add_argument("--n", type=int, default=200, help="training slices (test adds ~10%%)")
    p.add_argument("--misalign", type=float, default=2.0, help="misalignment sigma (px / deg)")
    p.add_argument("--size", type=int, default=224, help="canvas size in pixels")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_make_phantoms)

    p = sub.add_parser("extract-masks", help="coarse masks for a directory of PNG slices", parents=parents)
    p.add_argument("--in", dest="in_dir", required=True, help="input slice directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=masklib.DEFAULT_THRESHOLD)
    p.add_argument("--radius", type=int, default=masklib.DEFAULT_OPEN_RADIUS)
    p.set_defaults(func=cmd_extract_masks)

    p = sub.add_parser("train", help="train on an unpaired dataset", parents=parents)
    p.add_argument("--config", required=True, help="run config file (key=value)")
    p.add_argument("--data", required=True, help="dataset directory (train/ split or flat)")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--ablate-shape", action="store_true", help="zero the shape-consistency weight")
    p.add_argument("--ablate-mask", action="store_true", help="zero mask and shape weights")
    p.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics on a paired test set", parents=parents)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory (test/ split or flat)")
    p.add_argument("--report", default="report.csv", help="output CSV path")
    p.add_argument("--maps", default=None, help="optional directory for error-map PNGs")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("deform-study", help="robustness sweep over mask corruption levels", parents=parents)
    p.add_argument("--sigmas", default="0,0.5,1,2", help="comma-separated corruption sigmas")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per sigma")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="study output directory")
    p.add_argument("--config", default=None, help="run config file (default: built-in)")
    p.set_defaults(func=cmd_deform_study)

    p = sub.add_parser("figures", help="five-panel PNG bundle per test slice", parents=parents)
    p.add_argument("--run", required=True, help="run directory containing checkpoints")
    p.add_argument("--data", default=None, help="dataset directory (default: recorded in run)")
    p.add_argument("--out", default=None, help="output directory (default: <run>/figures)")
    p.set_defaults(func=cmd_figures)
    return parser


def dispatch(argv: list[str]) -> int:
    """Route argv to a subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        if args.seed is not None:
            seed_all(args.seed)
        return args.func(args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except NonFiniteLoss as e:
        print(f"internal error: {e}", file=sys.stderr)
        return 2
    except MaskGANError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
