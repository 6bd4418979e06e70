import json
import os

import pytest

from amaa.cli import main
from amaa.config import default_config_dict

MICRO = {
    "scene": {"dims": [4, 4, 4], "n_classes": 3, "n_objects": [1, 2],
              "object_size": [1, 2]},
    "grid": {"dims": [4, 4, 4], "fx": 10, "fy": 10, "cx": 4, "cy": 4,
             "image_rows": 8, "image_cols": 8, "voxel_size": 0.25,
             "origin": [-0.5, -0.5, 0.4]},
    "model": {"n_classes": 3, "widths": [2, 3], "n_scales": 2},
    "train": {"epochs": 1, "lr": 0.001},
    "dataset": {"n_train": 2, "n_val": 1},
}


@pytest.fixture
def micro_config(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(MICRO))
    return str(path)


def run_cli(*argv):
    return main(list(argv))


class TestTopLevel:
    def test_print_default_config(self, capsys):
        assert run_cli("--print-default-config") == 0
        out = capsys.readouterr().out
        assert json.loads(out) == default_config_dict()

    def test_no_subcommand_fails(self, capsys):
        assert run_cli() == 1
        assert "subcommand" in capsys.readouterr().err

    def test_unknown_flag_fails(self, capsys):
        assert run_cli("train", "--bogus") == 1
        assert "--bogus" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert run_cli("--help") == 0
        assert "gen-scenes" in capsys.readouterr().out

    def test_version(self, capsys):
        assert run_cli("--version") == 0
        assert "amaa" in capsys.readouterr().out


class TestGenScenes:
    def test_writes_dataset_and_manifest(self, micro_config, tmp_path,
                                         capsys):
        out = tmp_path / "data"
        assert run_cli("gen-scenes", "--config", micro_config,
                       "--out", str(out)) == 0
        assert (out / "manifest.json").exists()
        assert (out / "train_000_rgb.vox").exists()
        assert (out / "val_000_labels.vox").exists()
        assert (out / "run_manifest.json").exists()
        assert "2 train and 1 val" in capsys.readouterr().out

    def test_split_size_overrides(self, micro_config, tmp_path):
        out = tmp_path / "data"
        assert run_cli("gen-scenes", "--config", micro_config,
                       "--n-train", "3", "--n-val", "2",
                       "--out", str(out)) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["train"]) == 3
        assert len(manifest["val"]) == 2

    def test_out_defaults_to_env(self, micro_config, tmp_path, monkeypatch):
        target = tmp_path / "from_env"
        monkeypatch.setenv("AMAA_OUT", str(target))
        assert run_cli("gen-scenes", "--config", micro_config) == 0
        assert (target / "manifest.json").exists()


class TestTrain:
    def test_writes_artifacts(self, micro_config, tmp_path, capsys):
        out = tmp_path / "run"
        assert run_cli("train", "--config", micro_config,
                       "--out", str(out)) == 0
        for name in ("params.vpar", "report.json", "train_log.json",
                     "run_manifest.json"):
            assert (out / name).exists(), name
        captured = capsys.readouterr()
        assert "val: sc_iou=" in captured.out
        assert "epoch 0:" in captured.err
        assert "epoch 0:" not in captured.out

    def test_two_runs_are_byte_identical(self, micro_config, tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run_cli("train", "--config", micro_config,
                       "--out", str(out1)) == 0
        assert run_cli("train", "--config", micro_config,
                       "--out", str(out2)) == 0
        assert (out1 / "params.vpar").read_bytes() == \
               (out2 / "params.vpar").read_bytes()
        assert (out1 / "report.json").read_bytes() == \
               (out2 / "report.json").read_bytes()
        assert (out1 / "train_log.json").read_bytes() == \
               (out2 / "train_log.json").read_bytes()

    def test_seed_override_changes_run_and_manifest(self, micro_config,
                                                    tmp_path):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert run_cli("train", "--config", micro_config,
                       "--out", str(out1)) == 0
        assert run_cli("train", "--config", micro_config, "--seed", "7",
                       "--out", str(out2)) == 0
        assert (out1 / "params.vpar").read_bytes() != \
               (out2 / "params.vpar").read_bytes()
        manifest = json.loads((out2 / "run_manifest.json").read_text())
        assert manifest["seeds"] == {"model": 7, "train": 7, "scene": 7}
        assert manifest["config"]["train"]["seed"] == 7

    def test_train_from_dataset_directory(self, micro_config, tmp_path):
        data = tmp_path / "data"
        assert run_cli("gen-scenes", "--config", micro_config,
                       "--out", str(data)) == 0
        out_disk = tmp_path / "disk"
        out_mem = tmp_path / "mem"
        assert run_cli("train", "--config", micro_config,
                       "--data", str(data / "manifest.json"),
                       "--out", str(out_disk)) == 0
        assert run_cli("train", "--config", micro_config,
                       "--out", str(out_mem)) == 0
        assert (out_disk / "params.vpar").read_bytes() == \
               (out_mem / "params.vpar").read_bytes()

    def test_missing_config_exits_one(self, tmp_path, capsys):
        assert run_cli("train", "--config", str(tmp_path / "missing.cfg"),
                       "--out", str(tmp_path / "o")) == 1
        assert "no such config file" in capsys.readouterr().err

    def test_missing_data_manifest_exits_one(self, micro_config, tmp_path,
                                             capsys):
        assert run_cli("train", "--config", micro_config,
                       "--data", str(tmp_path / "nope.json"),
                       "--out", str(tmp_path / "o")) == 1
        assert "dataset manifest" in capsys.readouterr().err

    def test_variant_override_recorded(self, micro_config, tmp_path):
        out = tmp_path / "run"
        assert run_cli("train", "--config", micro_config, "--variant", "A",
                       "--out", str(out)) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["config"]["model"]["use_se"] is False
        assert manifest["config"]["model"]["use_afg"] is False


class TestEval:
    def test_matches_training_report(self, micro_config, tmp_path):
        run_dir, eval_dir = tmp_path / "run", tmp_path / "eval"
        assert run_cli("train", "--config", micro_config,
                       "--out", str(run_dir)) == 0
        assert run_cli("eval", "--config", micro_config,
                       "--params", str(run_dir / "params.vpar"),
                       "--out", str(eval_dir)) == 0
        assert (eval_dir / "report.json").read_bytes() == \
               (run_dir / "report.json").read_bytes()
        csv_text = (eval_dir / "metrics.csv").read_text()
        assert csv_text.startswith("sc_iou,miou,precision,recall")

    def test_missing_params_exits_one(self, micro_config, tmp_path, capsys):
        assert run_cli("eval", "--config", micro_config,
                       "--params", str(tmp_path / "none.vpar"),
                       "--out", str(tmp_path / "o")) == 1
        assert "no such parameter file" in capsys.readouterr().err


class TestAblateAndPlots:
    @pytest.fixture
    def ablate_dir(self, micro_config, tmp_path):
        out = tmp_path / "abl"
        assert run_cli("ablate", "--config", micro_config, "--seeds", "0",
                       "--variants", "A,D", "--out", str(out)) == 0
        return out

    def test_table_and_runs(self, ablate_dir, capsys):
        lines = (ablate_dir / "ablation.csv").read_text().splitlines()
        assert lines[0] == "variant,seed,sc_iou,miou"
        assert len(lines) == 3
        runs = json.loads((ablate_dir / "runs.json").read_text())
        assert [r["label"] for r in runs] == ["A", "D"]

    def test_export_plots_matches_runs_json(self, micro_config, ablate_dir):
        assert run_cli("export-plots", "--config", micro_config,
                       "--out", str(ablate_dir)) == 0
        runs = json.loads((ablate_dir / "runs.json").read_text())
        cat_lines = (ablate_dir / "category_iou.csv").read_text().splitlines()
        assert cat_lines[0] == "method,category,seed,iou"
        table = {}
        for line in cat_lines[1:]:
            method, category, seed, iou = line.split(",")
            table[(method, category, int(seed))] = float(iou)
        for run in runs:
            for i, iou in enumerate(run["report"]["class_iou"]):
                assert table[(run["label"], f"class_{i + 1}",
                              run["seed"])] == iou
        loss_lines = (ablate_dir / "loss_curve.csv").read_text().splitlines()
        assert loss_lines[0] == "epoch,ce,affinity,consistency,total"
        source = [r for r in runs if r["label"] == "D"][0]
        assert len(loss_lines) == 1 + len(source["logs"])
        assert float(loss_lines[1].split(",")[4]) == \
            source["logs"][0]["total"]

    def test_export_plots_without_runs_exits_one(self, tmp_path, capsys):
        assert run_cli("export-plots", "--out", str(tmp_path / "empty")) == 1
        assert "no such runs file" in capsys.readouterr().err

    def test_bad_seed_list_exits_one(self, micro_config, tmp_path, capsys):
        assert run_cli("ablate", "--config", micro_config,
                       "--seeds", "0,x", "--out", str(tmp_path / "o")) == 1
        assert "--seeds" in capsys.readouterr().err


class TestSweepAlpha:
    def test_writes_table_and_metadata(self, micro_config, tmp_path,
                                       capsys):
        out = tmp_path / "sweep"
        assert run_cli("sweep-alpha", "--config", micro_config,
                       "--alphas", "0,0.75", "--out", str(out)) == 0
        lines = (out / "alpha_sweep.csv").read_text().splitlines()
        assert lines[0] == "alpha,miou,sc_iou,precision,recall"
        assert len(lines) == 3
        details = json.loads((out / "alpha_sweep.json").read_text())
        assert details["metadata"]["default_alpha"] == 0.75
        assert "default alpha=0.75" in capsys.readouterr().out


class TestGradcheckCommand:
    def test_audit_passes_and_writes_csv(self, micro_config, tmp_path,
                                         capsys):
        out = tmp_path / "gc"
        assert run_cli("gradcheck", "--seeds", "0",
                       "--out", str(out)) == 0
        captured = capsys.readouterr()
        assert "micro_model" in captured.out
        assert "FAIL" not in captured.out
        lines = (out / "gradcheck.csv").read_text().splitlines()
        assert lines[0] == "check,seed,max_rel_err,tolerance,passed"
        assert all(line.endswith(",True") for line in lines[1:])
