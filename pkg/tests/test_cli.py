import csv
import json
import subprocess
import sys

import pytest
import yaml

from jema import cli

TABLE = """loss,mse_multi,mse_uni
Reg,3.27e-4,4.22e-4
SupCon,2.57e-4,3.44e-4
RnC,2.60e-4,3.93e-4
Cosine,2.32e-4,3.39e-4
L2-distance,2.53e-4,3.63e-4
L1-distance,3.87e-4,4.85e-4
"""

SMALL = ["data.frames_per_cell=10", "data.powers=[800, 1400, 2000]", "data.velocities=[4, 10]"]


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def ok(out):
    return json.loads(out.strip().splitlines()[-1])


class TestConfig:
    def test_defaults_and_overrides(self):
        cfg = cli.resolve_config(None, ["train.epochs=3", "seed=9", "data.powers=[1, 2]"])
        assert cfg["train"]["epochs"] == 3 and cfg["seed"] == 9 and cfg["data"]["powers"] == [1, 2]

    def test_file_then_overrides(self, tmp_path):
        (tmp_path / "c.yaml").write_text("seed: 4\ntrain:\n  loss_kind: rnc\n  epochs: 7\n")
        cfg = cli.resolve_config(tmp_path / "c.yaml", ["train.epochs=2"])
        assert (cfg["seed"], cfg["train"]["loss_kind"], cfg["train"]["epochs"]) == (4, "rnc", 2)

    @pytest.mark.parametrize("ov", ["train.nope=1", "nope=1", "train=3", "noequals", "=3", "seed.x=1"])
    def test_bad_overrides(self, ov):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config(None, [ov])

    def test_unknown_file_key(self, tmp_path):
        (tmp_path / "c.yaml").write_text("train:\n  epochz: 3\n")
        with pytest.raises(cli.ConfigError, match="train.epochz"):
            cli.resolve_config(tmp_path / "c.yaml")


class TestErrors:
    def test_unknown_verb_exits_2(self, capsys):
        with pytest.raises(SystemExit) as e:
            cli.main(["bogus"])
        assert e.value.code == 2
        assert "usage" in capsys.readouterr().err

    @pytest.mark.parametrize("args", [["train", "train.nope=1"], ["train", "train.loss_kind=hinge"],
                                      ["eval", "data.manifest=/nonexistent/m.csv"], ["train", "seed=abc"]])
    def test_validation_failure_single_json_line(self, capsys, tmp_path, monkeypatch, args):
        monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
        code, out, err = run(capsys, *args)
        assert code == 1 and out == ""
        lines = err.strip().splitlines()
        assert len(lines) == 1
        msg = json.loads(lines[0])
        assert msg["status"] == "error" and msg["verb"] == args[0] and msg["message"]

    def test_missing_config_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "gen-data", "--config", str(tmp_path / "none.yaml"), "--run-dir", str(tmp_path / "r"))
        assert code == 1 and "cannot read config" in err

    def test_console_script_entry(self):
        r = subprocess.run([sys.executable, "-m", "jema.cli", "report", "report.nope=1"], capture_output=True, text=True)
        assert r.returncode == 1 and json.loads(r.stderr)["error"] == "ConfigError"


def test_run_dir_naming(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUN_ROOT_ENV, str(tmp_path))
    code, out, _ = run(capsys, "report", "seed=5")
    assert code == 0
    run_dir = ok(out)["run_dir"]
    assert run_dir.startswith(str(tmp_path)) and "_seed5" in run_dir
    for name in ("config.snapshot", "metrics", "checkpoints", "figures"):
        assert (tmp_path / run_dir.split("/")[-1] / name).exists()
    code, out2, _ = run(capsys, "report", "seed=5")
    assert ok(out2)["run_dir"] != run_dir


def test_report_reproduces_table(capsys, tmp_path):
    (tmp_path / "t.csv").write_text(TABLE)
    code, out, _ = run(capsys, "report", "--run-dir", str(tmp_path / "r"), f"report.table_csv={tmp_path / 't.csv'}")
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "r" / "metrics" / "table.csv")))
    got = [(int(r[3]), int(r[4])) for r in rows[1:]]
    assert got == [(0, -29), (21, -5), (20, -20), (29, -4), (23, -11), (-18, -48)]


def test_report_rejects_bad_table(capsys, tmp_path):
    (tmp_path / "t.csv").write_text("loss,mse_multi\nReg,1\n")
    code, _, err = run(capsys, "report", "--run-dir", str(tmp_path / "r"), f"report.table_csv={tmp_path / 't.csv'}")
    assert code == 1 and "missing columns" in err


@pytest.mark.slow
def test_full_pipeline(capsys, tmp_path):
    rd = str(tmp_path / "run")
    # 20 per cell leaves 12 test frames, enough for t-SNE
    code, out, _ = run(capsys, "gen-data", "--run-dir", rd, "seed=3", *SMALL, "data.frames_per_cell=20")
    assert code == 0 and ok(out)["frames"] == 120
    rows = list(csv.reader(open(tmp_path / "run" / "data" / "manifest.csv")))
    assert len(rows) == 121

    assert run(capsys, "preprocess", "--run-dir", rd, "seed=3")[0] == 0
    assert (tmp_path / "run" / "metrics" / "doe_aggregate.csv").exists()

    code, out, _ = run(capsys, "train", "--run-dir", rd, "seed=3", "train.epochs=2", "train.batch_size=8")
    assert code == 0
    assert (tmp_path / "run" / "checkpoints" / "model.pt").exists()
    ckpt_bytes = (tmp_path / "run" / "checkpoints" / "model.pt").read_bytes()
    data_bytes = (tmp_path / "run" / "preprocessed" / "manifest.csv").read_bytes()

    assert run(capsys, "eval", "--run-dir", rd, "seed=3")[0] == 0
    ev = list(csv.DictReader(open(tmp_path / "run" / "metrics" / "eval.csv")))
    assert len(ev) == 1 and float(ev[0]["mse_multi"]) >= 0
    assert len(list(csv.reader(open(tmp_path / "run" / "metrics" / "scatter_multimodal.csv")))) == 13

    assert run(capsys, "probe", "--run-dir", rd, "seed=3")[0] == 0
    for f in ("probes.csv", "importance.csv", "pca_2d.csv", "tsne_2d.csv"):
        assert (tmp_path / "run" / "metrics" / f).exists()

    assert run(capsys, "attn", "--run-dir", rd, "seed=3", "attn.n_images=2")[0] == 0
    assert len(list((tmp_path / "run" / "figures" / "attention").glob("*.png"))) == 4

    (tmp_path / "t.csv").write_text(TABLE)
    code, out, _ = run(capsys, "report", "--run-dir", rd, f"report.table_csv={tmp_path / 't.csv'}")
    assert code == 0
    figs = set(ok(out)["figures"])
    assert {"doe_geometry.png", "training_curve.png", "scatter_multimodal.png", "pca_2d.png", "probes.png", "importance.png"} <= figs

    # reads never mutate the dataset or checkpoint
    assert (tmp_path / "run" / "checkpoints" / "model.pt").read_bytes() == ckpt_bytes
    assert (tmp_path / "run" / "preprocessed" / "manifest.csv").read_bytes() == data_bytes
    snap = yaml.safe_load(open(tmp_path / "run" / "config.snapshot"))
    assert {"gen-data", "preprocess", "train", "eval", "probe", "attn", "report"} <= set(snap)
    assert snap["train"]["train"]["epochs"] == 2


@pytest.mark.slow
def test_identical_config_identical_metrics(capsys, tmp_path):
    digests = []
    for name in ("a", "b"):
        rd = str(tmp_path / name)
        assert run(capsys, "gen-data", "--run-dir", rd, "seed=1", *SMALL)[0] == 0
        assert run(capsys, "train", "--run-dir", rd, "seed=1", "train.epochs=1", "train.batch_size=8")[0] == 0
        assert run(capsys, "eval", "--run-dir", rd, "seed=1")[0] == 0
        digests.append([(tmp_path / name / "metrics" / f).read_bytes()
                        for f in ("train_metrics.csv", "eval.csv", "scatter_multimodal.csv", "scatter_unimodal_on_axis.csv")])
    assert digests[0] == digests[1]
