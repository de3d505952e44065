import csv
import hashlib
import json

import numpy as np
import pytest

from divil import autograd as ag
from divil import cli
from divil.data import encode_idx

SYNTH_TOML = """
[synth]
seeds = [0, 1, 2]
methods = ["irmv1"]
sigma_s = [0.001, 1.0]
n = 40
epochs = 2
workers = 1
"""


@pytest.fixture
def synth_cfg(tmp_path):
    path = tmp_path / "cfg.toml"
    path.write_text(SYNTH_TOML)
    return str(path)


@pytest.fixture
def fake_mnist(tmp_path, monkeypatch):
    rng = np.random.default_rng(0)
    d = tmp_path / "mnist"
    d.mkdir()
    (d / "train-images-idx3-ubyte").write_bytes(encode_idx(rng.integers(0, 256, (120, 28, 28))))
    (d / "train-labels-idx1-ubyte").write_bytes(encode_idx(rng.integers(0, 10, 120)))
    monkeypatch.setenv(cli.MNIST_ENV, str(d))
    return d


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def check_manifest(out):
    manifest = json.loads((out / "manifest.json").read_text())
    for rel, digest in manifest["artifacts"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    return manifest


class TestGradcheck:
    def test_clean(self, tmp_path, capsys):
        assert cli.main(["gradcheck", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        assert "irmv1 analytic-vs-FD" in out and "ucl_loss[fused]" in out
        rows = read_csv(tmp_path / "gradcheck.csv")
        assert all(r["passed"] == "1" for r in rows)
        check_manifest(tmp_path)

    def test_fault_injection_names_op(self, monkeypatch, capsys):
        def broken_sigmoid(a):
            v = 0.5 * (1.0 + np.tanh(0.5 * ag.as_array(a)))
            return ag.custom("sigmoid", v, (a,), (lambda g: g * v,))  # wrong derivative

        monkeypatch.setattr(ag, "sigmoid", broken_sigmoid)
        assert cli.main(["gradcheck"]) == 1
        err = capsys.readouterr().err
        assert "sigmoid" in err and "FAILED" in err


class TestSynth:
    def test_outputs(self, tmp_path, synth_cfg):
        out = tmp_path / "o"
        assert cli.main(["synth", "overinvariance", "--config", synth_cfg, "--out", str(out)]) == 0
        rows = read_csv(out / "records.csv")
        assert list(rows[0]) == ["method", "seed", "sigma_s", "group", "strength"]
        assert len(rows) == 3 * 2 * 4
        summary = read_csv(out / "summary.csv")
        assert list(summary[0]) == ["method", "sigma_s", "group", "mean_strength", "std_strength"]
        verdicts = json.loads((out / "summary.json").read_text())["verdicts"]
        assert "non_increasing_count" in verdicts["irmv1"]
        manifest = check_manifest(out)
        assert manifest["seeds"] == [0, 1, 2] and manifest["config"]["epochs"] == 2

    def test_seed_flag_restricts(self, tmp_path, synth_cfg):
        out = tmp_path / "o"
        assert cli.main(["synth", "overinvariance", "--config", synth_cfg, "--out", str(out),
                         "--seeds", "1,2"]) == 0
        assert {r["seed"] for r in read_csv(out / "records.csv")} == {"1", "2"}

    def test_rerun_is_byte_identical(self, tmp_path, synth_cfg):
        outs = [tmp_path / "a", tmp_path / "b"]
        for i, out in enumerate(outs):
            assert cli.main(["synth", "overinvariance", "--config", synth_cfg, "--out", str(out),
                             "--workers", str(i + 1), "--snapshot"]) == 0
        for name in ("records.csv", "summary.csv", "summary.json", "dataset.csv", "manifest.json"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_snapshot_schema(self, tmp_path, synth_cfg):
        out = tmp_path / "o"
        cli.main(["synth", "overinvariance", "--config", synth_cfg, "--out", str(out), "--snapshot"])
        header = (out / "dataset.csv").read_text().splitlines()[0]
        assert header == "env_id,y," + ",".join(f"x_{j}" for j in range(16))

    def test_ucl_effect(self, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["synth", "ucl-effect", "--out", str(out), "--seeds", "0", "--n", "30",
                         "--epochs", "2", "--method", "vrex", "--beta", "0.05", "--mask", "0.3"]) == 0
        assert {r["method"] for r in read_csv(out / "records.csv")} == {"vrex", "vrex+divil"}
        cfg = json.loads((out / "manifest.json").read_text())["config"]
        assert cfg["beta"] == 0.05 and cfg["mask"] == 0.3

    def test_default_parameterisation(self):
        st = cli.resolve_settings("synth", {}, {})
        grid = cli.build_grid(st, "overinvariance")
        assert len(grid.sigma_s) == 15 and len(grid.seeds) == 10
        assert grid.test_s == 0.7 and sum(grid.train_s) / len(grid.train_s) == pytest.approx(0.3)


class TestConfigErrors:
    def test_toml_syntax(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[synth]\nseeds = [0, 1\n")
        assert cli.main(["synth", "overinvariance", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "line" in capsys.readouterr().err

    def test_unknown_key(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text("[synth]\nepoch = 3\n")
        assert cli.main(["synth", "overinvariance", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "epoch" in capsys.readouterr().err

    def test_wrong_type(self, tmp_path, capsys):
        path = tmp_path / "bad.toml"
        path.write_text('[synth]\nepochs = "ten"\n')
        assert cli.main(["synth", "overinvariance", "--config", str(path), "--out", str(tmp_path)]) == 2
        assert "[synth] epochs" in capsys.readouterr().err

    def test_invalid_values_never_start(self, tmp_path):
        out = tmp_path / "o"
        assert cli.main(["synth", "overinvariance", "--out", str(out), "--method", "dro"]) == 2
        assert not out.exists()

    def test_json_config(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"synth": {"seeds": [0], "lambda": 3.5}}))
        st = cli.resolve_settings("synth", cli.load_config_file(str(path))["synth"], {})
        assert st.lam == 3.5 and st.seeds == [0]

    def test_flags_override_file(self, tmp_path):
        st = cli.resolve_settings("synth", {"beta": 0.2, "epochs": 9}, {"beta": 0.05, "epochs": None})
        assert st.beta == 0.05 and st.epochs == 9

    def test_seed_parsing(self):
        assert cli.parse_seeds("0-2,5") == [0, 1, 2, 5]
        with pytest.raises(Exception):
            cli.parse_seeds("a")


class TestCmnist:
    ARGS = ["--n-train", "80", "--epochs", "2", "--seeds", "0,1", "--quiet"]

    def run(self, out, *extra):
        cfg = out.parent / "c.toml"
        cfg.write_text("[cmnist]\nhidden = 8\nucl_batch = 32\neval_every = 1\n")
        return cli.main(["cmnist", "--config", str(cfg), "--out", str(out), *self.ARGS, *extra])

    def test_outputs(self, tmp_path, fake_mnist):
        out = tmp_path / "o"
        assert self.run(out, "--method", "erm") == 0
        rows = read_csv(out / "seeds.csv")
        assert [r["seed"] for r in rows] == ["0", "1"]
        assert all(r["gray_acc"] != "" for r in rows)
        summary = read_csv(out / "summary.csv")
        assert [r["split"] for r in summary] == ["train", "test", "gray"]
        hist = read_csv(out / "history_seed0.csv")
        assert list(hist[0]) == ["step", "pred", "il", "ucl", "total", "lambda_eff"]
        check_manifest(out)

    def test_override_path(self, tmp_path, fake_mnist):
        out = tmp_path / "o"
        assert self.run(out, "--method", "irm", "--divil", "--beta", "0.05", "--mask", "0.5",
                        "--checkpoint", "--snapshot") == 0
        res = json.loads((out / "results.json").read_text())
        assert res["method"] == "irmv1+divil"
        assert res["train_config"]["beta"] == 0.05 and res["train_config"]["divil"]
        assert (out / "checkpoints" / "seed1" / "w.W.f64").exists()
        assert (out / "dataset.csv").read_text().startswith("env_id,y,x_0,")

    def test_dropout_ablation_and_determinism(self, tmp_path, fake_mnist):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert self.run(out, "--method", "vrex", "--divil", "--mask-mode", "dropout") == 0
        for name in ("seeds.csv", "summary.csv", "history_seed0.csv", "manifest.json"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_missing_data(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.MNIST_ENV, str(tmp_path / "nowhere"))
        assert cli.main(["cmnist", "--out", str(tmp_path / "o")]) == 2
        assert "MNIST" in capsys.readouterr().err

    def test_corrupt_idx(self, tmp_path, fake_mnist, capsys):
        (fake_mnist / "train-labels-idx1-ubyte").write_bytes(b"\x00\x00\x08\x01\x00\x00\x00\x09")
        assert self.run(tmp_path / "o", "--method", "erm") == 2
        assert "train-labels" in capsys.readouterr().err
