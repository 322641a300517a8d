import dataclasses
import sys

import numpy as np
import pytest

from maskgan.cli import build_parser, dispatch, emit_figure_bundle
from maskgan.core import LossWeights, RunConfig, load_config, save_config
from maskgan.evaluation import mae as mae_metric

TINY_CFG = RunConfig(
    n_masks=3,
    epochs=1,
    decay_start_epoch=1,
    base_lr=2e-4,
    batch_size=4,
    seed=0,
    image_size=40,
    gen_width=6,
    gen_downsamples=1,
    gen_res_blocks=1,
    disc_width=6,
    disc_layers=2,
    checkpoint_every=1,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny end-to-end pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    cfg_path = root / "tiny.cfg"
    save_config(TINY_CFG, cfg_path)
    assert dispatch(
        ["make-phantoms", "--n", "8", "--misalign", "1.0", "--size", "40", "--out", str(data), "--seed", "3"]
    ) == 0
    assert dispatch(
        ["--quiet", "train", "--config", str(cfg_path), "--data", str(data), "--out", str(run)]
    ) == 0
    return root, data, run, cfg_path


class TestExitCodes:
    def test_unknown_subcommand_is_user_error(self, capsys):
        assert dispatch(["bogus"]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_no_subcommand_prints_usage(self, capsys):
        assert dispatch([]) == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_required_flag_names_it(self, capsys):
        assert dispatch(["evaluate", "--data", "somewhere"]) == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            dispatch(["--help"])
        assert exc.value.code == 0
        assert "make-phantoms" in capsys.readouterr().out

    def test_every_subcommand_has_help(self, capsys):
        parser = build_parser()
        for name in ("make-phantoms", "extract-masks", "train", "evaluate", "deform-study", "figures"):
            with pytest.raises(SystemExit) as exc:
                parser.parse_args([name, "--help"])
            assert exc.value.code == 0
            assert "--" in capsys.readouterr().out

    def test_bad_data_dir_is_user_error(self, tmp_path, capsys):
        cfg_path = tmp_path / "c.cfg"
        save_config(TINY_CFG, cfg_path)
        code = dispatch(
            ["train", "--config", str(cfg_path), "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]
        )
        assert code == 1

    def test_missing_config_is_user_error(self, tmp_path):
        assert dispatch(
            ["train", "--config", str(tmp_path / "no.cfg"), "--data", str(tmp_path), "--out", str(tmp_path / "o")]
        ) == 1


class TestMakePhantoms:
    def test_dataset_layout(self, workspace):
        _, data, _, _ = workspace
        for split in ("train", "test"):
            for sub in ("mr", "ct", "mask"):
                assert (data / split / sub).is_dir()
            assert (data / split / "meta.txt").exists()
        assert (data / "cli_invocation.txt").exists()
        assert len(list((data / "train" / "mr").glob("*.png"))) == 8
        assert not list(data.glob("*.partial"))

    def test_invocation_lists_resolved_flags(self, workspace):
        _, data, _, _ = workspace
        text = (data / "cli_invocation.txt").read_text()
        assert "n=8" in text and "misalign=1.0" in text and "size=40" in text


class TestExtractMasks:
    def test_masks_written_for_each_slice(self, workspace, tmp_path):
        _, data, _, _ = workspace
        out = tmp_path / "masks_out"
        assert dispatch(
            ["extract-masks", "--in", str(data / "train" / "mr"), "--out", str(out)]
        ) == 0
        produced = sorted(p.name for p in (out / "masks").glob("*.png"))
        assert produced == sorted(p.name for p in (data / "train" / "mr").glob("*.png"))

    def test_missing_input_dir(self, tmp_path):
        assert dispatch(["extract-masks", "--in", str(tmp_path / "x"), "--out", str(tmp_path / "y")]) == 1


class TestTrain:
    def test_run_artifacts(self, workspace):
        _, _, run, _ = workspace
        assert (run / "config.cfg").exists()
        assert (run / "losses.csv").exists()
        assert (run / "checkpoints" / "final" / "manifest.txt").exists()
        assert (run / "cli_invocation.txt").exists()

    def test_ablation_flags_zero_weights(self, workspace, tmp_path):
        root, data, _, cfg_path = workspace
        out = tmp_path / "ablate"
        assert dispatch(
            ["--quiet", "train", "--config", str(cfg_path), "--data", str(data),
             "--out", str(out), "--ablate-mask"]
        ) == 0
        cfg = load_config(out / "config.cfg")
        assert cfg.loss_weights.lambda_mask == 0.0 and cfg.loss_weights.lambda_shape == 0.0

    def test_resume_flag(self, workspace, tmp_path):
        root, data, _, cfg_path = workspace
        out = tmp_path / "resume_run"
        cfg2 = dataclasses.replace(TINY_CFG, epochs=2)
        p2 = tmp_path / "two.cfg"
        save_config(cfg2, p2)
        assert dispatch(["--quiet", "train", "--config", str(p2), "--data", str(data), "--out", str(out)]) == 0
        assert dispatch(
            ["--quiet", "train", "--config", str(p2), "--data", str(data), "--out", str(out), "--resume"]
        ) == 0


class TestEvaluateCommand:
    def test_report_and_maps(self, workspace, tmp_path):
        _, data, run, _ = workspace
        report = tmp_path / "report.csv"
        maps = tmp_path / "maps"
        code = dispatch(
            ["--quiet", "evaluate", "--checkpoint", str(run / "checkpoints" / "final"),
             "--data", str(data), "--report", str(report), "--maps", str(maps)]
        )
        assert code == 0
        assert report.exists() and "mri_to_ct" in report.read_text()
        assert len(list(maps.glob("error_*.png"))) == 8  # test split has max(8, ...) slices

    def test_missing_checkpoint(self, workspace, tmp_path):
        _, data, _, _ = workspace
        assert dispatch(
            ["evaluate", "--checkpoint", str(tmp_path / "none"), "--data", str(data),
             "--report", str(tmp_path / "r.csv")]
        ) == 1


class TestFigures:
    def test_five_panels_per_slice_plus_summary(self, workspace):
        root, data, run, _ = workspace
        assert dispatch(["--quiet", "figures", "--run", str(run), "--data", str(data)]) == 0
        figs = run / "figures"
        stems = {"input", "synthetic", "error", "mask", "attention"}
        for i in range(8):
            for stem in stems:
                assert (figs / f"slice_{i:04d}_{stem}.png").exists()
        assert (figs / "summary.csv").exists()

    def test_error_panel_mean_matches_report_mae(self, workspace):
        from maskgan.evaluation import evaluate
        from maskgan.phantoms import load_dataset

        root, data, run, _ = workspace
        summary = (run / "figures" / "summary.csv").read_text().strip().splitlines()[1:]
        figure_maes = [float(line.split(",")[1]) for line in summary]
        report = evaluate(run / "checkpoints" / "final", load_dataset(data / "test"))
        for got, want in zip(figure_maes, report.mri_to_ct.per_slice_mae):
            assert got == pytest.approx(want, rel=1e-5)

    def test_rerun_is_idempotent(self, workspace):
        root, data, run, _ = workspace
        target = run / "figures" / "slice_0000_error.png"
        before = target.read_bytes()
        assert dispatch(["--quiet", "figures", "--run", str(run), "--data", str(data)]) == 0
        assert target.read_bytes() == before

    def test_data_dir_recovered_from_run_record(self, workspace):
        root, data, run, _ = workspace
        assert dispatch(["--quiet", "figures", "--run", str(run)]) == 0

    def test_run_without_checkpoint(self, tmp_path):
        (tmp_path / "empty_run").mkdir()
        assert dispatch(["figures", "--run", str(tmp_path / "empty_run"), "--data", str(tmp_path)]) == 1


class TestDeformStudyCommand:
    def test_tiny_study_produces_csv(self, workspace, tmp_path):
        root, data, _, cfg_path = workspace
        out = tmp_path / "study"
        code = dispatch(
            ["--quiet", "deform-study", "--sigmas", "0,1", "--seeds", "1",
             "--data", str(data), "--out", str(out), "--config", str(cfg_path)]
        )
        assert code == 0
        text = (out / "deform_study.csv").read_text().strip().splitlines()
        assert text[0] == "sigma,seed,method,mae"
        assert len(text) == 3

    def test_bad_sigma_list(self, workspace, tmp_path):
        _, data, _, _ = workspace
        assert dispatch(
            ["deform-study", "--sigmas", "a,b", "--seeds", "1", "--data", str(data), "--out", str(tmp_path / "s")]
        ) == 1
