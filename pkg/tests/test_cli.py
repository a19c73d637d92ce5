"""End-to-end tests of the command line tool and its file outputs."""

import json
import os

import numpy as np
import pytest

from asff_lab.cli import main
from asff_lab.config import apply_overrides, load_run_config
from asff_lab.fusion import ConfigError
from asff_lab.pgm import read_pgm
from asff_lab.training import load_checkpoint


def write_config(tmp_path, name="cfg.json", **fields):
    base = {
        "schedule": {"total_epochs": 1, "warmup_epochs": 0},
        "train_scenes": 8,
        "val_scenes": 4,
        "batch_size": 4,
        "out_dir": str(tmp_path / "run"),
    }
    base.update(fields)
    path = tmp_path / name
    path.write_text(json.dumps(base), encoding="utf-8")
    return str(path)


class TestTrainCommand:
    def test_missing_config_file_exits_2_naming_path(self, tmp_path, capsys):
        code = main(["train", "--config", str(tmp_path / "nope.json")])
        assert code == 2
        assert "nope.json" in capsys.readouterr().err

    def test_one_epoch_run_writes_one_metrics_row(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg]) == 0
        lines = (tmp_path / "run" / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,lr,loss,ap50,conflict_mean"
        assert len(lines) == 2

    def test_override_recorded_in_resolved_config(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["train", "--config", cfg, "--fusion_mode=sum"]) == 0
        resolved = json.loads((tmp_path / "run" / "resolved-config.json").read_text())
        assert resolved["config"]["fusion_mode"] == "sum"
        assert resolved["tool"] == "asff-lab"
        assert "version" in resolved

    def test_unknown_key_exits_2_with_field_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        code = main(["train", "--config", cfg, "--schedule.warmup_epochz=1"])
        assert code == 2
        assert "schedule.warmup_epochz" in capsys.readouterr().err

    def test_multi_seed_train_rejected(self, tmp_path):
        cfg = write_config(tmp_path, seeds=[0, 1])
        assert main(["train", "--config", cfg]) == 2


class TestAnalyzeCommand:
    @pytest.fixture()
    def run_dir(self, tmp_path):
        cfg = write_config(tmp_path, schedule={"total_epochs": 0, "warmup_epochs": 0})
        assert main(["train", "--config", cfg]) == 0
        return tmp_path / "run"

    def test_zero_init_checkpoint_exports_uniform_pgms(self, tmp_path, run_dir):
        out = tmp_path / "analysis"
        code = main(["analyze", f"--checkpoint={run_dir / 'checkpoint-init.ckpt'}",
                     f"--out_dir={out}", "--scene_seed=3", "--num_scenes=2"])
        assert code == 0
        pgms = sorted(p for p in os.listdir(out) if p.startswith("weights_"))
        assert len(pgms) == 9
        state = load_checkpoint(str(run_dir / "checkpoint-init.ckpt"))
        grids = {l: 64 // s for l, s in enumerate(state.model.config.strides, start=1)}
        for name in pgms:
            img = read_pgm(str(out / name))
            level = int(name.split("_t")[1][0])
            assert img.shape == (grids[level], grids[level])
            assert np.all(img == 85)  # uniform 1/3 everywhere

    def test_conflict_csv_and_summary_written(self, tmp_path, run_dir):
        out = tmp_path / "analysis2"
        code = main(["analyze", f"--checkpoint={run_dir / 'checkpoint.ckpt'}",
                     f"--out_dir={out}", "--num_scenes=2"])
        assert code == 0
        header = (out / "conflict.csv").read_text().splitlines()[0]
        assert header == "position_i,position_j,g1_norm,g2_norm,g3_norm,total_norm,conflict,w1,w2,w3"
        summary = json.loads((out / "summary.json").read_text())
        assert summary["weight_maps_exported"] == 9
        assert (out / "scene-0.pgm").exists() and (out / "scene-0.json").exists()

    def test_missing_checkpoint_exits_2(self, tmp_path):
        code = main(["analyze", f"--checkpoint={tmp_path / 'missing.ckpt'}",
                     f"--out_dir={tmp_path / 'x'}"])
        assert code == 2

    def test_corrupt_checkpoint_exits_2(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNKJUNK")
        code = main(["analyze", f"--checkpoint={bad}", f"--out_dir={tmp_path / 'x'}"])
        assert code == 2

    def test_identity_checkpoint_records_eq6(self, tmp_path):
        cfg = write_config(
            tmp_path, name="idcfg.json",
            model={"channels": [8, 8, 8], "strides": [4, 4, 4], "identity_resize": True,
                   "head_channels": 8},
            scene={"strides": [4, 4, 4]},
            schedule={"total_epochs": 1, "warmup_epochs": 0},
            out_dir=str(tmp_path / "idrun"))
        assert main(["train", "--config", cfg]) == 0
        out = tmp_path / "idanalysis"
        code = main(["analyze", f"--checkpoint={tmp_path / 'idrun' / 'checkpoint.ckpt'}",
                     f"--out_dir={out}", "--num_scenes=2"])
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["verify_eq6"] is not None
        assert summary["verify_eq6"]["pass"] is True


class TestCompareCommand:
    def test_single_arm_single_seed(self, tmp_path):
        cfg = write_config(tmp_path, arms=[{"name": "asff", "fusion_mode": "asff"}],
                           seeds=[0], out_dir=str(tmp_path / "cmp"))
        assert main(["compare", "--config", cfg]) == 0
        lines = (tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines()
        assert lines[0] == "arm,seed,ap50,conflict_mean"
        assert len(lines) == 2
        summary = json.loads((tmp_path / "cmp" / "summary.json").read_text())
        assert [a["name"] for a in summary["arms"]] == ["asff"]

    def test_two_arms_two_seeds_row_count_and_medians(self, tmp_path):
        cfg = write_config(tmp_path,
                           arms=[{"name": "sum", "fusion_mode": "sum"},
                                 {"name": "asff", "fusion_mode": "asff"}],
                           seeds=[0, 1], out_dir=str(tmp_path / "cmp2"))
        assert main(["compare", "--config", cfg]) == 0
        lines = (tmp_path / "cmp2" / "compare.csv").read_text().strip().splitlines()
        assert len(lines) == 5
        summary = json.loads((tmp_path / "cmp2" / "summary.json").read_text())
        assert [a["name"] for a in summary["arms"]] == ["sum", "asff"]
        rows = [line.split(",") for line in lines[1:]]
        for arm in ("sum", "asff"):
            arm_aps = sorted(float(r[2]) for r in rows if r[0] == arm)
            med = (arm_aps[0] + arm_aps[1]) / 2
            got = next(a["ap50_median"] for a in summary["arms"] if a["name"] == arm)
            np.testing.assert_allclose(got, med, atol=1e-12)

    def test_epsilon_sweep_summary_ordered(self, tmp_path):
        arms = [{"name": f"eps{e}", "epsilon_ignore": e} for e in (0.0, 0.2, 0.5)]
        cfg = write_config(tmp_path, arms=arms, seeds=[0], fusion_mode="ignore",
                           ignore_mode="area", out_dir=str(tmp_path / "cmp3"))
        assert main(["compare", "--config", cfg]) == 0
        summary = json.loads((tmp_path / "cmp3" / "summary.json").read_text())
        assert [a["name"] for a in summary["arms"]] == ["eps0.0", "eps0.2", "eps0.5"]

    def test_compare_without_arms_exits_2(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["compare", "--config", cfg]) == 2


class TestOverrides:
    def test_dotted_paths_set_nested_values(self):
        data = apply_overrides({}, ["schedule.total_epochs=5", "fusion_mode=sum",
                                    "seeds=[1,2]"])
        assert data == {"schedule": {"total_epochs": 5}, "fusion_mode": "sum",
                        "seeds": [1, 2]}

    def test_bad_override_rejected(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, ["justakey"])

    def test_type_errors_carry_field_path(self):
        with pytest.raises(ConfigError, match="schedule.total_epochs"):
            load_run_config({"schedule": {"total_epochs": "thirty"}})

    def test_rerun_with_resolved_config_reproduces_metrics(self, tmp_path):
        cfg = write_config(tmp_path, deterministic=True)
        assert main(["train", "--config", cfg]) == 0
        first = (tmp_path / "run" / "metrics.csv").read_bytes()
        resolved = json.loads((tmp_path / "run" / "resolved-config.json").read_text())
        rerun_cfg = tmp_path / "rerun.json"
        resolved["config"]["out_dir"] = str(tmp_path / "rerun")
        rerun_cfg.write_text(json.dumps(resolved["config"]))
        assert main(["train", "--config", str(rerun_cfg)]) == 0
        second = (tmp_path / "rerun" / "metrics.csv").read_bytes()
        assert first == second
