import json
import math

import pytest

from focalconvnet import engine as E
from focalconvnet.cli import parse_overrides, run, UsageError
from focalconvnet.model import tiny_config


@pytest.fixture()
def tiny_json(tmp_path):
    p = tmp_path / "tiny.json"
    tiny_config().save(p)
    return p


def test_profile_exits_zero(tmp_path, capsys):
    assert run(["profile", "--output-dir", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == "Method | Parameters | GFLOPs | Throughput"
    d = json.loads((tmp_path / "profile.json").read_text())
    assert d["total_params"] > 0 and d["receptive_fields"] == [3, 5, 7]
    assert (tmp_path / "run.json").exists()


def test_profile_points_csv(tmp_path, tiny_json):
    pts = tmp_path / "points.csv"
    rc = run(["profile", "--config", str(tiny_json), "--throughput", "--iters", "1",
              "--points-csv", str(pts), "--f1", "0.72", "--output-dir", str(tmp_path / "p")])
    assert rc == 0
    header, row = pts.read_text().splitlines()
    assert header == "method,f1,throughput,params_m"
    assert row.split(",")[1] == "0.72" and float(row.split(",")[2]) > 0


def test_missing_manifest_is_domain_error(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "train.csv"
    assert run(["train", "--train-manifest", str(missing), "--output-dir", str(tmp_path / "o")]) == 1
    assert str(missing) in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["train", "--epochs", "many"],
        ["train"],
        ["eval", "--test-manifest", "x.csv"],
        ["profile", "--set", "not_a_field=1"],
        ["profile", "--set", "novalue"],
    ],
)
def test_usage_errors_exit_two(argv, tmp_path):
    assert run(argv + (["--output-dir", str(tmp_path)] if argv and argv[0] == "profile" else [])) == 2


def test_conflicting_batch_size(tmp_path, synth_dir):
    argv = ["train", "--train-manifest", str(synth_dir / "manifest.csv"), "--batch-size", "4",
            "--set", "batch_size=8", "--epochs", "0", "--output-dir", str(tmp_path)]
    assert run(argv) == 2


def test_parse_overrides():
    assert parse_overrides(["focal_levels=2", "lr=0.01", "stage_depths=[1,1]"]) == {
        "focal_levels": 2, "lr": 0.01, "stage_depths": [1, 1]
    }
    with pytest.raises(UsageError):
        parse_overrides(["lr=0.1", "lr=0.2"])


def test_bad_config_value_is_domain_error(tmp_path):
    assert run(["profile", "--set", "focal_levels=0", "--output-dir", str(tmp_path)]) == 1


def test_synth_train_eval_round_trip(tmp_path, tiny_json):
    data = tmp_path / "data"
    assert run(["synth", "--output-dir", str(data), "--per-class", "4", "--seed", "2"]) == 0
    manifest = data / "manifest.csv"
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        rc = run(["train", "--config", str(tiny_json), "--train-manifest", str(manifest),
                  "--test-manifest", str(manifest), "--epochs", "2", "--seed", "3", "--output-dir", str(out)])
        assert rc == 0
        outs.append(out)
    for f in ("history.csv", "history.json", "best.fctn", "last.fctn"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
    run_json = json.loads((outs[0] / "run.json").read_text())
    assert run_json["model_config_sources"]["stage_depths"] == "file"
    assert run_json["train_option_sources"]["lr"] == "default"

    ev = tmp_path / "ev"
    assert run(["eval", "--checkpoint", str(outs[0] / "best.fctn"), "--test-manifest", str(manifest),
                "--output-dir", str(ev)]) == 0
    got = json.loads((ev / "eval.json").read_text())
    recorded = E.load_checkpoint(outs[0] / "best.fctn").meta["metrics"]
    for k in ("acc", "weighted_f1", "mcc", "loss"):
        assert got[k] == pytest.approx(recorded[k], abs=1e-12)
    assert (ev / "metrics.txt").read_text().startswith("Method")
    assert json.loads((ev / "metrics.json").read_text())["metrics"]["accuracy"] == pytest.approx(got["acc"])


def test_eval_bad_checkpoint(tmp_path, synth_dir):
    bad = tmp_path / "bad.fctn"
    bad.write_bytes(b"nonsense")
    rc = run(["eval", "--checkpoint", str(bad), "--test-manifest", str(synth_dir / "manifest.csv"),
              "--output-dir", str(tmp_path / "o")])
    assert rc == 1


def test_gradcheck_command(capsys):
    assert run(["gradcheck"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_bench_batch6(tmp_path, tiny_json):
    rc = run(["bench", "--config", str(tiny_json), "--batch", "6", "--iters", "2", "--output-dir", str(tmp_path)])
    assert rc == 0
    d = json.loads((tmp_path / "bench.json").read_text())
    assert d["batch_size"] == 6 and d["throughput_ips"] > 0 and math.isfinite(d["throughput_ips"])


def test_thread_env(tmp_path, tiny_json, monkeypatch):
    monkeypatch.setenv("FOCALCONV_THREADS", "1")
    assert run(["profile", "--config", str(tiny_json), "--output-dir", str(tmp_path)]) == 0
    monkeypatch.setenv("FOCALCONV_THREADS", "lots")
    assert run(["profile", "--config", str(tiny_json), "--output-dir", str(tmp_path)]) == 2
