import csv
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from wbe.core import read_tensor, write_tensor
from wbe.harness.cli import main
from wbe.harness.io import read_csv, read_pgm, write_csv, write_pgm
from wbe.harness.schema import CONFIG_SCHEMA, ConfigError, load_config, validate_config
from wbe.model import load_checkpoint


def _write(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(tmp_path, cmd, cfg, out, name="cfg.json", jobs=1):
    return main([cmd, "--config", _write(tmp_path / name, cfg), "--out", str(out), "--jobs", str(jobs)])


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


SMALL = {"seed": 3, "dataset": {"family": "smooth", "N": 4, "n_eta": 16, "n_sc": 16}}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ds")
    assert _run(tmp, "gen", SMALL, tmp / "data") == 0
    return tmp / "data"


class TestSchema:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="dataset"):
            validate_config({"dataset": {"bogus": 1}})

    def test_published_schema_matches(self):
        from pathlib import Path
        doc = Path(__file__).resolve().parents[1] / "docs" / "config_schema.json"
        assert json.loads(doc.read_text()) == json.loads(json.dumps(CONFIG_SCHEMA))

    def test_env_seed_override(self, tmp_path):
        p = _write(tmp_path / "c.json", {"seed": 1})
        assert load_config(p, env={"WBE_SEED": "42"})["seed"] == 42
        assert load_config(p, env={})["seed"] == 1
        with pytest.raises(ConfigError):
            load_config(p, env={"WBE_SEED": "x"})

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "c.json")


class TestGen:
    def test_layout(self, dataset):
        assert read_tensor(dataset / "media.wbt").shape == (4, 16, 16)
        meta = json.loads((dataset / "meta.json").read_text())
        assert meta["freqs"] == pytest.approx([0.5, 1.0, 2.0])
        for f in meta["freqs"]:
            lam = read_tensor(dataset / f"lambda_f{f:g}.wbt")
            assert lam.shape == (4, 16, 16) and lam.dtype == np.complex128

    def test_byte_identical(self, dataset, tmp_path):
        assert _run(tmp_path, "gen", SMALL, tmp_path / "again", jobs=2) == 0
        for f in ("media.wbt", "lambda_f0.5.wbt", "lambda_f1.wbt", "lambda_f2.wbt"):
            assert (dataset / f).read_bytes() == (tmp_path / "again" / f).read_bytes()

    def test_triangle_area_bound(self, tmp_path):
        cfg = {"seed": 0, "dataset": {"family": "tri5", "N": 3, "n_eta": 80, "n_sc": 4,
                                      "freqs": [0.5], "forward": "born"}}
        assert _run(tmp_path, "gen", cfg, tmp_path / "tri") == 0
        media = read_tensor(tmp_path / "tri" / "media.wbt")
        bound = 5 * 1.5 * math.sqrt(3) / 4 * 25
        assert all(np.count_nonzero(m) <= bound for m in media)

    def test_env_seed_changes_data(self, tmp_path, monkeypatch):
        monkeypatch.setenv("WBE_SEED", "11")
        cfg = dict(SMALL, dataset=dict(SMALL["dataset"], N=1, forward="born"))
        assert _run(tmp_path, "gen", cfg, tmp_path / "a") == 0
        meta = json.loads((tmp_path / "a" / "meta.json").read_text())
        assert meta["seed"] == 11


class TestFbp:
    def test_metrics_and_images(self, dataset, tmp_path):
        cfg = {"dataset": {"path": str(dataset)}, "fbp": {"images": True}}
        assert _run(tmp_path, "fbp", cfg, tmp_path / "fbp") == 0
        rows = _rows(tmp_path / "fbp" / "fbp_metrics.csv")
        assert rows[0] == ["sample", "rel_rmse", "converged", "iterations", "residual"]
        assert len(rows) == 5
        assert read_tensor(tmp_path / "fbp" / "fbp_recon.wbt").shape == (4, 16, 16)
        assert (tmp_path / "fbp" / "images" / "fbp_0000.pgm.json").exists()

    def test_born_linear_residual(self, tmp_path):
        cfg = {"seed": 1, "dataset": {"family": "smooth", "N": 3, "n_eta": 16, "n_sc": 16,
                                      "forward": "born"}}
        assert _run(tmp_path, "gen", cfg, tmp_path / "born") == 0
        cfg = {"dataset": {"path": str(tmp_path / "born")}, "fbp": {"cg_tol": 1e-6}}
        assert _run(tmp_path, "fbp", cfg, tmp_path / "bfbp") == 0
        for row in _rows(tmp_path / "bfbp" / "fbp_metrics.csv")[1:]:
            assert row[2] == "1" and float(row[4]) <= 1e-6

    def test_zero_dataset(self, tmp_path):
        cfg = {"dataset": {"family": "smooth", "N": 2, "n_eta": 16, "n_sc": 16, "forward": "born",
                           "params": {"n_points": 0}}}
        assert _run(tmp_path, "gen", cfg, tmp_path / "zero") == 0
        with pytest.warns(UserWarning):
            assert _run(tmp_path, "fbp", {"dataset": {"path": str(tmp_path / "zero")}},
                        tmp_path / "zfbp") == 0
        assert not read_tensor(tmp_path / "zfbp" / "fbp_recon.wbt").any()


class TestTrainRotate:
    def test_zero_epochs_checkpoint_is_init(self, dataset, tmp_path):
        cfg = {"seed": 5, "dataset": {"path": str(dataset)}, "train": {"epochs": 0}}
        assert _run(tmp_path, "train", cfg, tmp_path / "t0") == 0
        from wbe.model import init_params
        p = load_checkpoint(tmp_path / "t0" / "checkpoint")
        ref = init_params(p.config, "glorot", 5)
        for k in ref.tensors:
            np.testing.assert_array_equal(p.tensors[k], ref.tensors[k])

    def test_train_and_rotate(self, dataset, tmp_path):
        cfg = {"seed": 0, "dataset": {"path": str(dataset)},
               "train": {"epochs": 2, "batch": 2, "lr": 1e-3, "conv_symmetry": "c4"},
               "rotate_test": {"quarter_turns": [0, 1, 2, 3, 4]}}
        out = tmp_path / "tr"
        assert _run(tmp_path, "train", cfg, out) == 0
        hist = _rows(out / "history.csv")
        assert hist[0] == ["epoch", "train_mse", "val_rel_rmse", "lr"] and len(hist) == 3
        summary = json.loads((out / "train_summary.json").read_text())
        assert summary["param_count"] == summary["closed_form"]
        assert _run(tmp_path, "rotate-test", cfg, out) == 0
        rows = _rows(out / "rotate_test.csv")[1:]
        errs = [float(r[2]) for r in rows]
        assert errs[0] == pytest.approx(float(hist[-1][2]), rel=0, abs=0)
        assert errs[4] == errs[0]
        assert max(errs) - min(errs) <= 1e-12  # tied kernels: exact

    def test_compressed_kernel_init(self, dataset, tmp_path):
        cfg = {"dataset": {"path": str(dataset)},
               "train": {"kind": "compressed", "init": "kernel-init", "epochs": 1, "L": 2, "r": 4,
                         "freq_subset": [2]}}
        assert _run(tmp_path, "train", cfg, tmp_path / "c") == 0
        p = load_checkpoint(tmp_path / "c" / "checkpoint")
        assert p.config.kind == "compressed" and p.config.freqs == (2.0,)

    def test_bad_split(self, dataset, tmp_path):
        cfg = {"dataset": {"path": str(dataset)}, "train": {"train_fraction": 0.01}}
        assert _run(tmp_path, "train", cfg, tmp_path / "x") == 1


class TestSweep:
    def test_shape(self, dataset, tmp_path):
        cfg = {"dataset": {"path": str(dataset)}, "train": {"epochs": 1, "batch": 2},
               "sweep": {"sizes": [1, 3], "freq_sets": [[2], [0, 1, 2]]}}
        assert _run(tmp_path, "sweep", cfg, tmp_path / "sw", jobs=2) == 0
        rows = _rows(tmp_path / "sw" / "sweep.csv")
        assert rows[0] == ["n_train", "f3", "f1+f2+f3"]
        assert [r[0] for r in rows[1:]] == ["1", "3"]
        assert all(math.isfinite(float(v)) for r in rows[1:] for v in r[1:])


class TestExport:
    def test_pgm_header_and_csv(self, tmp_path):
        arr = np.random.default_rng(0).standard_normal((2, 80, 80))
        write_tensor(tmp_path / "m.wbt", arr)
        cfg = {"export": {"tensor": str(tmp_path / "m.wbt"), "index": [1]}}
        assert _run(tmp_path, "export", cfg, tmp_path / "ex") == 0
        raw = (tmp_path / "ex" / "m_1.pgm").read_bytes()
        assert raw.startswith(b"P5\n80 80\n255\n")
        cfg["export"]["format"] = "csv"
        assert _run(tmp_path, "export", cfg, tmp_path / "ex") == 0
        back = read_csv(tmp_path / "ex" / "m_1.csv")
        np.testing.assert_allclose(back, arr[1], rtol=0, atol=1e-12)

    def test_constant_mid_gray(self, tmp_path):
        scale = write_pgm(tmp_path / "c.pgm", np.full((4, 5), 2.5))
        assert scale["constant"]
        raw = (tmp_path / "c.pgm").read_bytes()
        assert raw.startswith(b"P5\n5 4\n255\n") and set(raw[-20:]) == {128}
        np.testing.assert_array_equal(read_pgm(tmp_path / "c.pgm"), 2.5)

    def test_pgm_quantization(self, tmp_path):
        a = np.linspace(-1, 1, 12).reshape(3, 4)
        write_pgm(tmp_path / "q.pgm", a)
        assert np.abs(read_pgm(tmp_path / "q.pgm") - a).max() <= 1 / 255

    def test_csv_roundtrip(self, tmp_path):
        a = np.random.default_rng(1).standard_normal((3, 7))
        write_csv(tmp_path / "a.csv", a)
        assert (tmp_path / "a.csv").read_text().startswith("c0,c1")
        np.testing.assert_array_equal(read_csv(tmp_path / "a.csv"), a)

    def test_non_2d(self, tmp_path):
        write_tensor(tmp_path / "m.wbt", np.zeros((2, 3, 3)))
        assert _run(tmp_path, "export", {"export": {"tensor": str(tmp_path / "m.wbt")}}, tmp_path) == 1
        assert _run(tmp_path, "export", {"export": {"tensor": str(tmp_path / "m.wbt"), "index": [5]}},
                    tmp_path) == 1


class TestExitCodes:
    def test_config_error(self, tmp_path):
        assert _run(tmp_path, "gen", {"nope": 1}, tmp_path) == 1

    def test_missing_config(self, tmp_path):
        assert main(["gen", "--config", str(tmp_path / "none.json")]) == 1

    def test_io_error(self, tmp_path):
        (tmp_path / "bad.wbt").write_bytes(b"XXXX" + bytes(20))
        assert _run(tmp_path, "export", {"export": {"tensor": str(tmp_path / "bad.wbt")}}, tmp_path) == 3
        assert _run(tmp_path, "fbp", {"dataset": {"path": str(tmp_path / "missing")}}, tmp_path) == 3

    def test_numerical_failure(self, dataset, tmp_path):
        cfg = {"dataset": {"path": str(dataset)}, "train": {"epochs": 1, "lr": 1e300}}
        assert _run(tmp_path, "train", cfg, tmp_path / "nan") == 2

    def test_console_script(self, tmp_path):
        p = _write(tmp_path / "c.json", {"dataset": {"bad": 1}})
        r = subprocess.run([sys.executable, "-m", "wbe.harness.cli", "gen", "--config", p],
                           capture_output=True, text=True)
        assert r.returncode == 1 and "config" in r.stderr
