"""CLI commands: config handling, training loop behavior, determinism."""

import numpy as np
import pytest
import torch
from PIL import Image

from maskdiff.checkpoint import load_checkpoint, save_checkpoint
from maskdiff.cli import TrainConfig, main, parse_config, run_training
from maskdiff.data import make_toy_dataset
from maskdiff.metrics import read_report

SMALL_CFG = """
data_root = {root}
run_dir = {run}
iterations = {iters}
learning_rate = 0.001
batch_size = 4
timesteps = 10
image_size = 16
base_channels = 8
channel_mults = 1,2
attention_levels = 1
checkpoint_every = {ckpt_every}
seed = {seed}
log_every = 1000
"""


def write_cfg(tmp_path, root, run, iters=20, ckpt_every=10, seed=5, name="train.cfg"):
    path = tmp_path / name
    path.write_text(
        SMALL_CFG.format(root=root, run=run, iters=iters, ckpt_every=ckpt_every, seed=seed)
    )
    return path


@pytest.fixture(scope="module")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "toy"
    make_toy_dataset(20, 16, 2, root)
    return root


class TestParseConfig:
    def test_defaults_and_overrides(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_root = d\niterations = 7\n# comment\n\nseed = 3\n")
        cfg = parse_config(path)
        assert cfg.data_root == "d"
        assert cfg.iterations == 7
        assert cfg.seed == 3
        assert cfg.batch_size == 16  # untouched default

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_root = d\nlearnig_rate = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config(path)

    def test_zero_timesteps_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_root = d\ntimesteps = 0\n")
        with pytest.raises(ValueError):
            parse_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("data_root = d\niterations = soon\n")
        with pytest.raises(ValueError, match="bad value"):
            parse_config(path)

    def test_missing_data_root_rejected(self):
        with pytest.raises(ValueError, match="data_root"):
            TrainConfig()


class TestMakeToyCommand:
    def test_writes_pairs_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "toy"
        assert main(["make-toy", "--n", "5", "--size", "16", "--seed", "1",
                     "--out", str(out)]) == 0
        assert len(list((out / "images").iterdir())) == 5
        assert len(list((out / "masks").iterdir())) == 5
        assert (out / "manifest.tsv").exists()
        assert "wrote 5 pairs" in capsys.readouterr().out

    def test_rerun_identical_bytes(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["make-toy", "--n", "3", "--size", "16", "--seed", "4",
                         "--out", str(out)]) == 0
        for sub in ("images", "masks"):
            for fa in sorted((a / sub).iterdir()):
                fb = b / sub / fa.name
                assert fa.read_bytes() == fb.read_bytes()

    def test_unwritable_out_dir(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("file, not dir")
        rc = main(["make-toy", "--n", "1", "--size", "16", "--seed", "0",
                   "--out", str(blocker / "toy")])
        assert rc != 0
        assert "error:" in capsys.readouterr().err


class TestTrainCommand:
    def test_loss_decreases_over_200_steps(self, toy_root, tmp_path):
        cfg = parse_config(write_cfg(tmp_path, toy_root, tmp_path / "run", iters=200))
        result = run_training(cfg)
        losses = [v for _, v in result.losses]
        assert len(losses) == 200
        assert losses[-1] < losses[0]
        assert np.mean(losses[-20:]) < np.mean(losses[:20])

    def test_rerun_reproduces_loss_log_bytes(self, toy_root, tmp_path):
        cfg_a = parse_config(write_cfg(tmp_path, toy_root, tmp_path / "ra", name="a.cfg"))
        cfg_b = parse_config(write_cfg(tmp_path, toy_root, tmp_path / "rb", name="b.cfg"))
        res_a, res_b = run_training(cfg_a), run_training(cfg_b)
        assert res_a.loss_log.read_bytes() == res_b.loss_log.read_bytes()

    def test_resume_matches_uninterrupted(self, toy_root, tmp_path):
        straight_cfg = parse_config(
            write_cfg(tmp_path, toy_root, tmp_path / "straight", iters=20, name="s.cfg")
        )
        straight = run_training(straight_cfg)

        half_cfg = parse_config(
            write_cfg(tmp_path, toy_root, tmp_path / "half", iters=10, name="h.cfg")
        )
        run_training(half_cfg)
        resumed_cfg = parse_config(
            write_cfg(tmp_path, toy_root, tmp_path / "half", iters=20, name="r.cfg")
        )
        resumed = run_training(
            resumed_cfg, resume=tmp_path / "half" / "ckpt_final.mdck"
        )
        assert resumed.start_step == 10
        # next-step loss and every following loss identical
        assert resumed.losses == straight.losses[10:]
        a = load_checkpoint(straight.final_checkpoint)
        b = load_checkpoint(resumed.final_checkpoint)
        for k in a.params:
            assert torch.equal(a.params[k], b.params[k])
            assert torch.equal(a.adam_m[k], b.adam_m[k])
            assert torch.equal(a.adam_v[k], b.adam_v[k])

    def test_checkpoint_cadence(self, toy_root, tmp_path):
        run = tmp_path / "run"
        cfg = parse_config(write_cfg(tmp_path, toy_root, run, iters=25, ckpt_every=10))
        run_training(cfg)
        names = sorted(p.name for p in run.glob("*.mdck"))
        assert names == ["ckpt_0000010.mdck", "ckpt_0000020.mdck", "ckpt_final.mdck"]
        assert load_checkpoint(run / "ckpt_final.mdck").step == 25

    def test_zero_timestep_config_rejected_before_side_effects(self, toy_root, tmp_path, capsys):
        cfg_path = tmp_path / "bad.cfg"
        run = tmp_path / "nevermade"
        cfg_path.write_text(f"data_root = {toy_root}\nrun_dir = {run}\ntimesteps = 0\n")
        assert main(["train", "--config", str(cfg_path)]) != 0
        assert "error:" in capsys.readouterr().err
        assert not run.exists()

    def test_missing_dataset_rejected(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path, tmp_path / "nope", tmp_path / "run2")
        assert main(["train", "--config", str(cfg_path)]) != 0
        assert not (tmp_path / "run2").exists()

    def test_non_finite_loss_aborts(self, toy_root, tmp_path, capsys):
        run = tmp_path / "run"
        cfg = parse_config(write_cfg(tmp_path, toy_root, run, iters=5, ckpt_every=100))
        run_training(cfg)
        # poison one parameter and resume: the very next loss is NaN
        ckpt = load_checkpoint(run / "ckpt_final.mdck")
        ckpt.params["stem.weight"][0, 0, 0, 0] = float("nan")
        ckpt.step = 3
        save_checkpoint(run / "poisoned.mdck", ckpt)
        cfg_path = write_cfg(tmp_path, toy_root, run, iters=5, name="resume.cfg")
        rc = main(["train", "--config", str(cfg_path), "--resume",
                   str(run / "poisoned.mdck")])
        assert rc != 0
        assert "non-finite" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("trained")
    root = base / "toy"
    make_toy_dataset(20, 16, 2, root)
    cfg = parse_config(write_cfg(base, root, base / "run", iters=15, ckpt_every=50))
    result = run_training(cfg)
    return root, result


class TestSampleCommand:
    def test_writes_samples_and_montage(self, trained_run, tmp_path):
        root, result = trained_run
        masks = tmp_path / "masks"
        masks.mkdir()
        src = sorted((root / "masks").iterdir())[0]
        (masks / src.name).write_bytes(src.read_bytes())
        out = tmp_path / "out"
        assert main(["sample", "--checkpoint", str(result.final_checkpoint),
                     "--masks", str(masks), "--out", str(out),
                     "--seed", "9", "--count", "4"]) == 0
        files = sorted(p.name for p in out.iterdir())
        stem = src.stem
        assert files == [f"{stem}__00.png", f"{stem}__01.png", f"{stem}__02.png",
                         f"{stem}__03.png", f"{stem}__grid.png"]
        imgs = [np.asarray(Image.open(out / f)) for f in files[:4]]
        assert any(not np.array_equal(imgs[0], other) for other in imgs[1:])
        grid = np.asarray(Image.open(out / f"{stem}__grid.png"))
        assert grid.shape == (16, 5 * 16 + 4 * 2, 3)

    def test_rerun_identical_bytes(self, trained_run, tmp_path):
        root, result = trained_run
        outs = []
        for name in ("o1", "o2"):
            out = tmp_path / name
            assert main(["sample", "--checkpoint", str(result.final_checkpoint),
                         "--masks", str(root / "masks"), "--out", str(out),
                         "--seed", "3", "--count", "1"]) == 0
            outs.append(out)
        for fa in sorted(outs[0].iterdir()):
            assert fa.read_bytes() == (outs[1] / fa.name).read_bytes()

    def test_mask_size_mismatch_rejected(self, trained_run, tmp_path, capsys):
        _, result = trained_run
        masks = tmp_path / "masks"
        masks.mkdir()
        Image.fromarray(np.zeros((8, 8), np.uint8), mode="L").save(masks / "small.png")
        out = tmp_path / "never"
        rc = main(["sample", "--checkpoint", str(result.final_checkpoint),
                   "--masks", str(masks), "--out", str(out), "--count", "1"])
        assert rc != 0
        assert "expects" in capsys.readouterr().err
        assert not out.exists()

    def test_variance_flag_changes_output(self, trained_run, tmp_path):
        root, result = trained_run
        masks = tmp_path / "masks"
        masks.mkdir()
        src = sorted((root / "masks").iterdir())[0]
        (masks / src.name).write_bytes(src.read_bytes())
        results = {}
        for mode in ("posterior", "beta"):
            out = tmp_path / mode
            assert main(["sample", "--checkpoint", str(result.final_checkpoint),
                         "--masks", str(masks), "--out", str(out),
                         "--seed", "1", "--count", "1", "--variance", mode]) == 0
            results[mode] = np.asarray(Image.open(out / f"{src.stem}__00.png"))
        assert not np.array_equal(results["posterior"], results["beta"])


class TestEvaluateCommand:
    def test_identical_sets_near_zero(self, toy_root, tmp_path, capsys):
        report = tmp_path / "report.tsv"
        assert main(["evaluate", "--real", str(toy_root / "images"),
                     "--synth", str(toy_root / "images"),
                     "--report", str(report)]) == 0
        values = read_report(report)
        assert values["fid"] < 1e-6
        # unbiased KID on dependent (identical) sets is slightly negative;
        # it only has to sit at the null scale
        assert abs(values["kid"]) < 3.0 / np.sqrt(20)
        assert 1.0 <= values["is"] <= 10.0

    def test_conditioning_fidelity_of_real_images_is_high(self, toy_root, tmp_path):
        # toy construction: bright exactly inside the mask
        report = tmp_path / "report.tsv"
        synth = tmp_path / "synthlike"
        synth.mkdir()
        for src in sorted((toy_root / "images").iterdir())[:6]:
            (synth / f"{src.stem}__00.png").write_bytes(src.read_bytes())
        assert main(["evaluate", "--real", str(toy_root / "images"),
                     "--synth", str(synth), "--masks", str(toy_root / "masks"),
                     "--report", str(report)]) == 0
        assert read_report(report)["conditioning_fidelity"] > 0.95

    def test_single_image_directory_rejected(self, toy_root, tmp_path, capsys):
        single = tmp_path / "single"
        single.mkdir()
        src = sorted((toy_root / "images").iterdir())[0]
        (single / src.name).write_bytes(src.read_bytes())
        rc = main(["evaluate", "--real", str(toy_root / "images"),
                   "--synth", str(single)])
        assert rc != 0
        assert "N >= 2" in capsys.readouterr().err

    def test_report_columns(self, toy_root, tmp_path):
        report = tmp_path / "report.tsv"
        main(["evaluate", "--real", str(toy_root / "images"),
              "--synth", str(toy_root / "images"), "--report", str(report)])
        lines = report.read_text().splitlines()
        assert lines[2] == "metric\tvalue\tn_real\tn_synth\tembedder_id"
        fid_row = lines[3].split("\t")
        assert fid_row[0] == "fid"
        assert fid_row[2] == "20" and fid_row[3] == "20"


class TestThreadCap:
    def test_env_var_caps_torch_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("MASKDIFF_THREADS", "1")
        out = tmp_path / "toy"
        assert main(["make-toy", "--n", "1", "--size", "16", "--seed", "0",
                     "--out", str(out)]) == 0
        assert torch.get_num_threads() == 1
