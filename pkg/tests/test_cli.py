"""End-to-end command-line pipeline: synth, train, evaluate, sweep, export."""

import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from geoprior.cli import main
from geoprior.io import checkpoint_filename, load_model, save_model
from geoprior.model import ModelConfig, init_model

SYNTH_CONFIG = {
    "n_species": 8,
    "grid_rows": 18,
    "grid_cols": 36,
    "sigma_min": 12.0,
    "sigma_max": 22.0,
    "unmapped_fraction": 0.25,
    "per_species": 40,
    "n_eval_items": 80,
    "n_confusion_pairs": 2,
    "confusion_weight": 0.6,
    "base_accuracy": 0.75,
}

TRAIN_CONFIG = {
    "hidden_dim": 32,
    "num_blocks": 2,
    "dropout": 0.3,
    "batch_size": 64,
    "learning_rate": 3e-3,
    "epochs": 4,
    "obs_cap": 100,
    "checkpoint_every": 2,
}

FIXTURE_FILES = [
    "observations.csv",
    "observations.csv.species.json",
    "expert_ranges.bin",
    "truth_ranges.bin",
    "vision.f32m",
    "vision.f32m.species.json",
    "eval_items.csv",
    "taxonomy.json",
    "manifest.json",
]


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def run_synth(outdir, cfg_path, seed=5):
    return main(["synth", "--config", cfg_path, "--out", str(outdir),
                 "--seed", str(seed)])


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(base / "synth.json", SYNTH_CONFIG)
    outdir = base / "fixtures"
    assert run_synth(outdir, cfg_path) == 0
    return outdir


@pytest.fixture(scope="session")
def trained(fixture_dir, tmp_path_factory):
    base = tmp_path_factory.mktemp("train")
    cfg_path = write_config(base / "train.json", TRAIN_CONFIG)
    model_path = base / "model.sinr"
    report_path = base / "train_report.json"
    ckpt_dir = base / "ckpts"
    code = main([
        "train",
        "--config", cfg_path,
        "--obs", str(fixture_dir / "observations.csv"),
        "--out", str(model_path),
        "--report", str(report_path),
        "--checkpoint-dir", str(ckpt_dir),
        "--seed", "0",
    ])
    assert code == 0
    return {
        "model": model_path,
        "report": report_path,
        "ckpt_dir": ckpt_dir,
        "config": cfg_path,
    }


def eval_args(fixture_dir, model_path):
    return [
        "--model", str(model_path),
        "--items", str(fixture_dir / "eval_items.csv"),
        "--vision", str(fixture_dir / "vision.f32m"),
        "--taxonomy", str(fixture_dir / "taxonomy.json"),
        "--geo-species", str(fixture_dir / "observations.csv.species.json"),
    ]


class TestSynth:
    def test_writes_complete_fixture_directory(self, fixture_dir):
        for name in FIXTURE_FILES:
            assert (fixture_dir / name).exists(), name

    def test_deterministic_per_seed(self, fixture_dir, tmp_path):
        cfg_path = write_config(tmp_path / "synth.json", SYNTH_CONFIG)
        again = tmp_path / "again"
        assert run_synth(again, cfg_path) == 0
        for name in FIXTURE_FILES:
            assert (again / name).read_bytes() == (
                fixture_dir / name
            ).read_bytes(), name

    def test_manifest_echoes_settings(self, fixture_dir):
        manifest = json.loads((fixture_dir / "manifest.json").read_text())
        assert manifest["n_species"] == 8
        assert manifest["seed"] == 5
        assert manifest["unmapped_fraction"] == 0.25
        assert len(manifest["confusion_pairs"]) == 2

    def test_taxonomy_has_unmapped_entries(self, fixture_dir):
        mapping = json.loads((fixture_dir / "taxonomy.json").read_text())
        assert len(mapping) == 8
        assert sum(1 for v in mapping.values() if v is None) == 2


class TestTrain:
    def test_writes_model_and_checkpoints(self, trained):
        model = load_model(trained["model"])
        assert model.config.hidden_dim == 32
        for epoch in (2, 4):
            ckpt = trained["ckpt_dir"] / checkpoint_filename(epoch)
            assert ckpt.exists()
        final = load_model(trained["ckpt_dir"] / checkpoint_filename(4))
        assert final == model

    def test_report_structure(self, trained):
        report = json.loads(trained["report"].read_text())
        assert report["config_echo"]["epochs"] == 4
        assert report["config_echo"]["hidden_dim"] == 32
        assert len(report["loss_history"]) == 4
        for entry in report["loss_history"]:
            total = (
                entry["positive_term"]
                + entry["negative_term"]
                + entry["random_negative_term"]
            )
            assert entry["total"] == pytest.approx(total, rel=1e-12)

    def test_flag_overrides_config(self, fixture_dir, trained, tmp_path):
        code = main([
            "train",
            "--config", trained["config"],
            "--obs", str(fixture_dir / "observations.csv"),
            "--out", str(tmp_path / "m.sinr"),
            "--report", str(tmp_path / "r.json"),
            "--epochs", "2",
            "--seed", "0",
        ])
        assert code == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["config_echo"]["epochs"] == 2
        assert len(report["loss_history"]) == 2

    def test_seed_controls_model_bytes(self, fixture_dir, trained, tmp_path):
        paths = []
        for run, seed in enumerate((7, 7, 8)):
            out = tmp_path / f"m{run}.sinr"
            code = main([
                "train",
                "--config", trained["config"],
                "--obs", str(fixture_dir / "observations.csv"),
                "--out", str(out),
                "--epochs", "1",
                "--seed", str(seed),
            ])
            assert code == 0
            paths.append(out)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert paths[0].read_bytes() != paths[2].read_bytes()


class TestEvalGeoprior:
    def test_report_fields_and_bookkeeping(self, fixture_dir, trained, tmp_path,
                                            capsys):
        out = tmp_path / "report.json"
        code = main(
            ["eval-geoprior", *eval_args(fixture_dir, trained["model"]),
             "--k", "0.1", "--out", str(out)]
        )
        assert code == 0
        report = json.loads(out.read_text())
        assert report == json.loads(capsys.readouterr().out)
        assert report["config_echo"] == {"delta": 0.0, "k_default": 0.1}
        assert 0.0 <= report["vision_only_top1"] <= 1.0
        assert 0.0 <= report["fused_top1"] <= 1.0
        assert report["gain"] == pytest.approx(
            report["fused_top1"] - report["vision_only_top1"], abs=1e-12
        )

    def test_reports_are_byte_identical_across_runs(self, fixture_dir, trained,
                                                    tmp_path):
        outs = []
        for run in range(2):
            out = tmp_path / f"report{run}.json"
            code = main(
                ["eval-geoprior", *eval_args(fixture_dir, trained["model"]),
                 "--k", "0.2", "--out", str(out)]
            )
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestEvalRange:
    def test_map_report(self, fixture_dir, trained, tmp_path):
        out = tmp_path / "range.json"
        code = main([
            "eval-range",
            "--model", str(trained["model"]),
            "--ranges", str(fixture_dir / "expert_ranges.bin"),
            "--out", str(out),
        ])
        assert code == 0
        report = json.loads(out.read_text())
        assert 0.0 <= report["map"] <= 1.0
        assert report["num_evaluated"] == len(report["per_species_ap"])
        assert report["skipped_species_ids"] == []
        aps = list(report["per_species_ap"].values())
        assert report["map"] == pytest.approx(math.fsum(aps) / len(aps),
                                              abs=1e-12)


class TestSweep:
    def test_k_sweep_emits_json_and_table(self, fixture_dir, trained, tmp_path,
                                          capsys):
        out = tmp_path / "sweep.json"
        code = main(
            ["sweep", "--param", "k", "--values", "1.0,0.2",
             *eval_args(fixture_dir, trained["model"]), "--out", str(out)]
        )
        assert code == 0
        rows = json.loads(out.read_text())
        assert [r["value"] for r in rows] == [1.0, 0.2]
        assert all(r["parameter"] == "k_default" for r in rows)
        assert all(r["error"] is None for r in rows)
        lines = capsys.readouterr().out.splitlines()
        header_at = next(
            i for i, line in enumerate(lines) if line.startswith("param ")
        )
        table = lines[header_at:]
        assert table[0].split() == [
            "param", "value", "vision_top1", "fused_top1", "gain_pp", "status",
        ]
        assert len(table) == 3
        assert all(line.rstrip().endswith("ok") for line in table[1:])

    def test_invalid_value_reported_per_row(self, fixture_dir, trained, tmp_path,
                                            capsys):
        out = tmp_path / "sweep.json"
        code = main(
            ["sweep", "--param", "k", "--values", "0.5,0.0",
             *eval_args(fixture_dir, trained["model"]), "--out", str(out)]
        )
        assert code == 0
        rows = json.loads(out.read_text())
        assert rows[0]["error"] is None
        assert rows[1]["error"]
        assert rows[1]["report"] is None
        assert "failed:" in capsys.readouterr().out

    def test_epochs_sweep_trains_from_observations(self, fixture_dir, trained,
                                                   tmp_path, capsys):
        out = tmp_path / "sweep.json"
        code = main(
            ["sweep", "--param", "epochs", "--values", "1,2",
             "--obs", str(fixture_dir / "observations.csv"),
             "--config", trained["config"],
             "--seed", "0",
             "--items", str(fixture_dir / "eval_items.csv"),
             "--vision", str(fixture_dir / "vision.f32m"),
             "--taxonomy", str(fixture_dir / "taxonomy.json"),
             "--geo-species",
             str(fixture_dir / "observations.csv.species.json"),
             "--out", str(out)]
        )
        assert code == 0
        rows = json.loads(out.read_text())
        assert [r["value"] for r in rows] == [1, 2]
        assert all(r["error"] is None for r in rows)
        capsys.readouterr()

    def test_ranges_flag_attaches_map_scores(self, fixture_dir, trained,
                                             tmp_path, capsys):
        out = tmp_path / "sweep.json"
        code = main(
            ["sweep", "--param", "delta", "--values", "0.0,0.001",
             *eval_args(fixture_dir, trained["model"]),
             "--ranges", str(fixture_dir / "expert_ranges.bin"),
             "--out", str(out)]
        )
        assert code == 0
        rows = json.loads(out.read_text())
        for row in rows:
            assert "expert_ranges" in row["report"]["map_scores"]
        capsys.readouterr()

    def test_k_sweep_requires_model(self, fixture_dir, tmp_path, capsys):
        code = main(
            ["sweep", "--param", "k", "--values", "0.5",
             "--items", str(fixture_dir / "eval_items.csv"),
             "--vision", str(fixture_dir / "vision.f32m"),
             "--taxonomy", str(fixture_dir / "taxonomy.json"),
             "--geo-species",
             str(fixture_dir / "observations.csv.species.json")]
        )
        assert code == 1
        assert "requires --model" in capsys.readouterr().err


class TestExportMap:
    def peaked_model_file(self, tmp_path, lon0=-35.0, lat0=25.0):
        """Hand-built single-species model whose probability surface has a
        unique global maximum at (lon0, lat0): each hidden unit computes
        relu of a phase-shifted cosine peaking at the target coordinate."""
        cfg = ModelConfig(num_species=1, hidden_dim=2, num_residual_blocks=1,
                          dropout_rate=0.0)
        model = init_model(cfg, np.random.default_rng(0))
        for arr in model.weight_arrays():
            arr[...] = 0.0
        xhat = lon0 / 180.0
        yhat = lat0 / 90.0
        model.input_w[0] = [
            6.0 * math.sin(math.pi * xhat), 6.0 * math.cos(math.pi * xhat),
            0.0, 0.0,
        ]
        model.input_w[1] = [
            0.0, 0.0,
            6.0 * math.sin(math.pi * yhat), 6.0 * math.cos(math.pi * yhat),
        ]
        # bias keeps the peak on the steep part of the sigmoid so uint8
        # rounding cannot tie the peak pixel with its neighbors
        model.head_w[0] = [1.0, 1.0]
        model.head_b[0] = -11.5
        path = tmp_path / "peaked.sinr"
        save_model(model, path)
        return path

    def test_brightest_pixel_sits_at_the_peak(self, tmp_path, capsys):
        model_path = self.peaked_model_file(tmp_path)
        out = tmp_path / "map.png"
        code = main(["export-map", "--model", str(model_path), "--species", "0",
                     "--rows", "18", "--cols", "36", "--out", str(out)])
        assert code == 0
        img = np.asarray(Image.open(out))
        assert img.shape == (18, 36)
        row, col = np.unravel_index(int(np.argmax(img)), img.shape)
        # grid cell centers: lat = 90 - (row + 0.5) * 10, lon = -180 + (col + 0.5) * 10
        assert 90.0 - (row + 0.5) * 10.0 == 25.0
        assert -180.0 + (col + 0.5) * 10.0 == -35.0
        assert (tmp_path / "map.png.json").exists()
        capsys.readouterr()

    def test_flags_override_config_grid(self, tmp_path, capsys):
        model_path = self.peaked_model_file(tmp_path)
        cfg_path = write_config(
            tmp_path / "grid.json", {"grid_rows": 6, "grid_cols": 12}
        )
        small = tmp_path / "small.png"
        assert main(["export-map", "--model", str(model_path), "--species", "0",
                     "--config", cfg_path, "--out", str(small)]) == 0
        assert np.asarray(Image.open(small)).shape == (6, 12)
        big = tmp_path / "big.png"
        assert main(["export-map", "--model", str(model_path), "--species", "0",
                     "--config", cfg_path, "--rows", "18", "--cols", "36",
                     "--out", str(big)]) == 0
        assert np.asarray(Image.open(big)).shape == (18, 36)
        capsys.readouterr()


class TestExitCodes:
    def test_usage_errors_exit_2(self, capsys):
        assert main([]) == 2
        assert main(["bogus"]) == 2
        assert main(["train"]) == 2  # missing required --obs
        capsys.readouterr()

    def test_runtime_error_names_stage(self, tmp_path, capsys):
        code = main([
            "eval-range",
            "--model", str(tmp_path / "missing.sinr"),
            "--ranges", str(tmp_path / "missing.bin"),
        ])
        assert code == 1
        assert "error at stage 'load-model'" in capsys.readouterr().err

    def test_corrupt_input_names_its_stage(self, fixture_dir, trained, tmp_path,
                                           capsys):
        bad_vision = tmp_path / "vision.f32m"
        bad_vision.write_bytes(b"not a matrix")
        shutil.copy(fixture_dir / "vision.f32m.species.json",
                    tmp_path / "vision.f32m.species.json")
        code = main(
            ["eval-geoprior",
             "--model", str(trained["model"]),
             "--items", str(fixture_dir / "eval_items.csv"),
             "--vision", str(bad_vision),
             "--taxonomy", str(fixture_dir / "taxonomy.json"),
             "--geo-species",
             str(fixture_dir / "observations.csv.species.json")]
        )
        assert code == 1
        assert "error at stage 'load-vision-matrix'" in capsys.readouterr().err


class TestConsoleScript:
    def test_installed_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-c",
             "from geoprior.cli import main; raise SystemExit(main(['--help']))"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "synth" in proc.stdout

    def test_console_script_on_path(self):
        exe = shutil.which("geoprior")
        assert exe is not None
        proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
