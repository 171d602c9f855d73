import json
from unittest import mock

import numpy as np
import pytest

from main import main
from src.config import ConfigError
from src.extract import read_field_grid
from src.geom import read_obj, write_obj
from src.nnet import MlpArch, MlpModel, load_checkpoint
from src.runner import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE
from src.train2d import TrainingDiverged

TINY_2D = ["--batch", "64", "--set", "width=8", "--set", "hidden_layers=1", "--set", "pe_frequencies=0", "-j", "1"]


@pytest.fixture
def cube_file(tmp_path, cube_mesh):
    path = tmp_path / "cube.obj"
    write_obj(path, cube_mesh)
    return path


@pytest.fixture
def geodesic_run(tmp_path):
    out = tmp_path / "geo"
    code = main(["fit-geodesic", "--iters", "0", "--set", "resolution=8", "-o", str(out), "--seed", "4"] + TINY_2D)
    assert code == EXIT_OK
    return out


class TestEval:
    def test_same_mesh(self, tmp_path, cube_file, capsys):
        out = tmp_path / "eval"
        code = main(["eval", str(cube_file), str(cube_file), "--samples", "2000", "-o", str(out), "-j", "1"])
        assert code == EXIT_OK
        header, row = (out / "metrics.csv").read_text().splitlines()
        assert header.startswith("cd,hd,ne_degrees,fc_percent")
        assert float(row.split(",")[0]) == 0.0
        assert header in capsys.readouterr().out

    def test_missing_input(self, tmp_path, capsys):
        code = main(["eval", str(tmp_path / "a.obj"), str(tmp_path / "b.obj")])
        assert code == EXIT_USAGE
        assert "sharpfield: error" in capsys.readouterr().err


class TestGeodesicPipeline:
    def test_writes_artifacts(self, geodesic_run):
        for name in ("model.snm", "features.fg", "log.csv", "field.sfg", "field.png", "field.sfg.json"):
            assert (geodesic_run / name).exists(), name
        model, info = load_checkpoint(geodesic_run / "model.snm")
        assert model.arch.input_dim == 2
        assert info.seed == 4
        assert len(info.config_hash) == 64
        assert (geodesic_run / "log.csv").read_text().startswith(f"# seed=4 config={info.config_hash}")
        assert json.loads((geodesic_run / "field.sfg.json").read_text())["seed"] == 4
        assert read_field_grid(geodesic_run / "field.sfg").resolution == (8, 8)

    def test_extract_curves(self, tmp_path, geodesic_run):
        out = tmp_path / "curves"
        code = main([
            "extract", str(geodesic_run / "model.snm"), str(geodesic_run / "features.fg"),
            "--res", "8", "-o", str(out), "-j", "1",
        ])
        assert code == EXIT_OK
        assert (out / "curves.obj").exists()

    def test_sample_field(self, tmp_path, geodesic_run):
        out = tmp_path / "sample"
        code = main([
            "sample-field", str(geodesic_run / "model.snm"), str(geodesic_run / "features.fg"),
            "--res", "6", "--bbox", "0", "0", "1", "1", "-o", str(out), "-j", "1",
        ])
        assert code == EXIT_OK
        grid = read_field_grid(out / "field.sfg")
        assert grid.resolution == (6, 6)
        np.testing.assert_array_equal(grid.bbox_max, [1.0, 1.0])

    def test_model_with_features_needs_the_feature_file(self, tmp_path, geodesic_run):
        code = main(["extract", str(geodesic_run / "model.snm"), "-o", str(tmp_path / "x"), "-j", "1"])
        assert code == EXIT_USAGE

    def test_bad_bbox(self, tmp_path, geodesic_run):
        code = main([
            "sample-field", str(geodesic_run / "model.snm"), str(geodesic_run / "features.fg"),
            "--bbox", "0", "0", "1", "-o", str(tmp_path / "x"), "-j", "1",
        ])
        assert code == EXIT_USAGE

    def test_boolean(self, tmp_path):
        runs = []
        for seed in (1, 2):
            out = tmp_path / f"plain{seed}"
            code = main([
                "fit-geodesic", "--iters", "0", "--no-features", "--set", "resolution=4",
                "--seed", str(seed), "-o", str(out),
            ] + TINY_2D)
            assert code == EXIT_OK
            runs.append(str(out / "model.snm"))
        out = tmp_path / "bool"
        assert main(["boolean", *runs, "--op", "intersect", "--res", "8", "-o", str(out), "-j", "1"]) == EXIT_OK
        assert read_field_grid(out / "boolean.sfg").resolution == (8, 8)
        assert json.loads((out / "boolean.sfg.json").read_text())["op"] == "intersect"


class TestSurfacePipeline:
    def test_features_fit_and_extract(self, tmp_path, cube_file):
        strips = tmp_path / "strips"
        code = main(["feature-from-mesh", str(cube_file), "--set", "segment_length=0.5", "-o", str(strips), "-j", "1"])
        assert code == EXIT_OK
        for name in ("strips.obj", "sharp.fg", "normalization.json"):
            assert (strips / name).exists(), name
        assert json.loads((strips / "normalization.json").read_text())["source"] == "cube.obj"

        fit = tmp_path / "fit"
        code = main([
            "fit-mesh", str(cube_file), str(strips / "strips.obj"), "--iters", "1", "-o", str(fit), "-j", "1",
            "--set", "width=8", "--set", "hidden_layers=1", "--set", "sampling.surface_total=200",
            "--set", "sampling.surface_per_epoch=64", "--set", "sampling.near=64",
            "--set", "sampling.ambient=32", "--set", "sampling.knn=8",
        ])
        assert code == EXIT_OK
        model, _ = load_checkpoint(fit / "model.snm")
        assert model.arch.input_dim == 3
        assert model.arch.n_channels >= 1
        assert len((fit / "log.csv").read_text().splitlines()) == 3

        out = tmp_path / "mesh"
        code = main(["extract", str(fit / "model.snm"), str(fit / "features.obj"), "--res", "8", "-o", str(out), "-j", "1"])
        assert code == EXIT_OK
        read_obj(out / "mesh.obj")


class TestExitCodes:
    def run_geodesic(self, tmp_path, *extra):
        return main(["fit-geodesic", "-o", str(tmp_path / "out"), *extra] + TINY_2D)

    def test_divergence_keeps_last_finite_model(self, tmp_path):
        model = MlpModel.initialize(MlpArch(2, 1, hidden_layers=1, width=4), seed=0)
        error = TrainingDiverged("loss is nan", model, None, 3)
        with mock.patch("src.runner.train_geodesic", side_effect=error):
            assert self.run_geodesic(tmp_path) == EXIT_NUMERIC
        back, _ = load_checkpoint(tmp_path / "out" / "diverged.snm")
        np.testing.assert_array_equal(back.params, model.params)

    @pytest.mark.parametrize(
        "error, code",
        [(np.linalg.LinAlgError("singular"), EXIT_NUMERIC), (ConfigError("bad"), EXIT_USAGE), (OSError("disk"), EXIT_USAGE)],
    )
    def test_error_mapping(self, tmp_path, error, code):
        with mock.patch("src.runner.train_geodesic", side_effect=error):
            assert self.run_geodesic(tmp_path) == code

    def test_unknown_setting_stops_before_training(self, tmp_path):
        with mock.patch("src.runner.train_geodesic") as train:
            assert self.run_geodesic(tmp_path, "--set", "bogus=1") == EXIT_USAGE
        train.assert_not_called()
