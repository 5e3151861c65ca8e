import json

import numpy as np
import pytest

from streamfn import cli, net as netmod, volume


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def field_path(tmp_path_factory):
    d = tmp_path_factory.mktemp("field")
    p = d / "rot.raw"
    assert run(["generate", "rigid_rotation", "--dims", "8", "--out", str(p)]) == 0
    return p


@pytest.fixture(scope="module")
def model_path(tmp_path_factory, field_path):
    d = tmp_path_factory.mktemp("model")
    p = d / "m.snet"
    assert run([
        "train", str(field_path), "--iterations", "10", "--batch", "64",
        "--width", "16", "--hidden-layers", "4", "--seed", "0", "--out", str(p),
    ]) == 0
    return p


class TestGenerate:
    def test_writes_raw_and_sidecar(self, tmp_path):
        out = tmp_path / "abc.raw"
        assert run(["generate", "abc", "--dims", "6", "--out", str(out)]) == 0
        assert out.exists()
        meta = json.loads((tmp_path / "abc.raw.json").read_text())
        assert meta["dims"] == [6, 6, 6]
        assert (tmp_path / "run_generate_manifest.json").exists()

    def test_anisotropic_dims(self, tmp_path):
        out = tmp_path / "f.raw"
        assert run(["generate", "rigid_rotation", "--dims", "4", "5", "6",
                    "--out", str(out)]) == 0
        assert volume.load_raw(out).dims == (4, 5, 6)

    def test_params_forwarded(self, tmp_path):
        out = tmp_path / "h.raw"
        assert run(["generate", "hill_vortex", "--dims", "6", "--param",
                    "radius=0.4", "--out", str(out)]) == 0

    def test_unknown_generator_usage_error(self, capsys):
        with pytest.raises(SystemExit) as e:
            run(["generate", "warpdrive"])
        assert e.value.code == 2

    def test_bad_param_syntax(self, tmp_path):
        assert run(["generate", "abc", "--dims", "4", "--param", "oops",
                    "--out", str(tmp_path / "x.raw")]) == 2


class TestTrain:
    def test_outputs(self, model_path):
        assert model_path.exists()
        assert model_path.with_suffix(".snet.json").exists()
        assert (model_path.parent / "m.snet.history.csv").exists()
        assert (model_path.parent / "run_train_manifest.json").exists()

    def test_same_seed_byte_identical(self, tmp_path, field_path):
        a, b = tmp_path / "a.snet", tmp_path / "b.snet"
        argv = ["train", str(field_path), "--iterations", "5", "--batch", "32",
                "--width", "16", "--seed", "3"]
        assert run(argv + ["--out", str(a)]) == 0
        assert run(argv + ["--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_config_file_with_flag_override(self, tmp_path, field_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"iterations": 5, "batch_size": 32, "width": 16,
                                   "lr0": 1e-4}))
        out = tmp_path / "c.snet"
        assert run(["train", str(field_path), "--config", str(cfg),
                    "--iterations", "3", "--out", str(out)]) == 0
        hist = (tmp_path / "c.snet.history.csv").read_text().strip().splitlines()
        assert len(hist) == 1 + 3  # header + overridden iteration count

    def test_seeds_without_rake_usage_error(self, field_path, tmp_path):
        assert run(["train", str(field_path), "--loss", "perp+seeds",
                    "--iterations", "2", "--width", "16",
                    "--out", str(tmp_path / "x.snet")]) == 2

    def test_missing_field_file(self, tmp_path):
        assert run(["train", str(tmp_path / "nope.raw"), "--iterations", "1"]) == 1

    def test_rake_flag(self, tmp_path, field_path):
        out = tmp_path / "r.snet"
        assert run(["train", str(field_path), "--loss", "perp+seeds",
                    "--rake", "segment:-0.5,0,0,0.5,0,0", "--iterations", "3",
                    "--batch", "32", "--width", "16", "--out", str(out)]) == 0


class TestEval:
    def test_report_and_stdout(self, model_path, field_path, tmp_path, capsys):
        assert run(["eval", str(model_path), str(field_path),
                    "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[-1].startswith("median_err_deg=")
        report = json.loads((tmp_path / "eval_report.json").read_text())
        assert 0.0 <= report["median_deg"] <= 90.0
        assert report["total_voxels"] == 8 ** 3

    def test_missing_model(self, field_path, tmp_path):
        assert run(["eval", str(tmp_path / "no.snet"), str(field_path)]) == 1


class TestExport:
    def test_scalar_and_error(self, model_path, field_path, tmp_path, capsys):
        assert run(["export", str(model_path), "--field", str(field_path),
                    "--res", "6", "--outputs", "scalar_raw", "error_vtk",
                    "--out", str(tmp_path)]) == 0
        assert (tmp_path / "stream_function_6.raw").exists()
        assert (tmp_path / "stream_function_6_err.vtk").exists()
        last = capsys.readouterr().out.strip().splitlines()[-1]
        assert last.startswith("median_err_deg=")

    def test_error_without_field_usage_error(self, model_path, tmp_path):
        assert run(["export", str(model_path), "--res", "4",
                    "--outputs", "error_raw", "--out", str(tmp_path)]) == 2

    def test_needs_res_or_field(self, model_path, tmp_path):
        assert run(["export", str(model_path), "--out", str(tmp_path)]) == 2

    def test_multiple_resolutions(self, model_path, tmp_path):
        assert run(["export", str(model_path), "--res", "4", "6",
                    "--outputs", "scalar_raw", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "stream_function_4.raw").exists()
        assert (tmp_path / "stream_function_6.raw").exists()


class TestTrace:
    def test_report(self, field_path, tmp_path, capsys):
        assert run(["trace", str(field_path), "--seeds", "5", "--steps", "50",
                    "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "trace_report.json").read_text())
        assert report["streamlines"] == 5
        assert sum(report["terminations"].values()) == 5

    def test_constancy_needs_model(self, field_path, tmp_path):
        assert run(["trace", str(field_path), "--check-constancy",
                    "--out", str(tmp_path)]) == 2

    def test_constancy_with_model(self, model_path, field_path, tmp_path, capsys):
        assert run(["trace", str(field_path), "--model", str(model_path),
                    "--seeds", "4", "--steps", "30", "--check-constancy",
                    "--out", str(tmp_path)]) == 0
        report = json.loads((tmp_path / "trace_report.json").read_text())
        assert "constancy" in report
        last = capsys.readouterr().out.strip().splitlines()[-1]
        assert last.startswith("median_err_deg=")


class TestEntryPoint:
    def test_console_script_installed(self):
        import importlib.metadata as md

        eps = md.entry_points(group="console_scripts")
        assert any(e.name == "streamfn" for e in eps)
