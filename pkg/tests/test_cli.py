import json
import subprocess
import sys

import numpy as np
import pytest

from deepmvi.cli import main
from deepmvi.data import load_dense, load_long, read_mask

SMALL = ["--w", "5", "--p", "4", "--heads", "2", "--max-iters", "20", "--batch", "32"]


@pytest.fixture
def seasonal(tmp_path):
    path = tmp_path / "seasonal.csv"
    assert main(["synth", "--kind", "seasonal", "--seed", "1", "--out", str(path)]) == 0
    return path


def test_synth_writes_each_dataset(tmp_path):
    for kind, shape in [("seasonal", (5, 2000)), ("rank2", (20, 200))]:
        path = tmp_path / f"{kind}.csv"
        assert main(["synth", "--kind", kind, "--out", str(path)]) == 0
        assert load_dense(path, "time-rows").shape == shape
    path = tmp_path / "dup.csv"
    assert main(["synth", "--kind", "duplicated", "--out", str(path)]) == 0
    assert load_long(path).shape == (10, 2, 1000)


def test_contaminate_impute_score_pipeline(seasonal, tmp_path, capsys):
    dirty, mask = tmp_path / "dirty.csv", tmp_path / "mask.csv"
    assert main(["contaminate", "--data", str(seasonal), "--scenario", "blackout",
                 "--block-size", "20", "--out", str(dirty), "--mask", str(mask)]) == 0
    M = read_mask(mask, (5, 2000))
    assert M.sum() == 100
    assert load_dense(dirty, "time-rows").missing.sum() == 100

    filled = tmp_path / "filled.csv"
    assert main(["impute", "--data", str(dirty), "--imputers", "linear",
                 "--out", str(filled)]) == 0
    assert load_dense(filled, "time-rows").available.all()

    scores = tmp_path / "scores.json"
    capsys.readouterr()
    assert main(["score", "--truth", str(seasonal), "--imputed", str(filled), "--mask", str(mask),
                 "--out", str(scores)]) == 0
    doc = json.loads(scores.read_text())
    assert doc["cells"] == 100 and 0 < doc["mae"] <= doc["rmse"]
    assert json.loads(capsys.readouterr().out) == doc


def test_impute_with_deepmvi_and_checkpoint(seasonal, tmp_path):
    dirty = tmp_path / "dirty.csv"
    main(["contaminate", "--data", str(seasonal), "--scenario", "mcar", "--x-percent", "40",
          "--out", str(dirty)])
    out, ckpt = tmp_path / "out.csv", tmp_path / "model.json"
    assert main(["impute", "--data", str(dirty), *SMALL, "--checkpoint", str(ckpt),
                 "--out", str(out)]) == 0
    assert load_dense(out, "time-rows").available.all()
    assert json.loads(ckpt.read_text())["format"] == "deepmvi-checkpoint"


def test_bench_reports_are_byte_identical(seasonal, tmp_path):
    args = ["bench", "--data", str(seasonal), "--scenario", "mcar", "--x-percent", "40",
            "--imputers", "deepmvi,linear", *SMALL, "--seed", "3"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    a["meta"].pop("wall_time")
    b["meta"].pop("wall_time")
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["meta"]["dataset"]["source"] == "seasonal.csv"


def test_configuration_errors_exit_two(seasonal, tmp_path, capsys):
    assert main(["bench", "--data", str(seasonal), "--imputers", "brits",
                 "--out", str(tmp_path / "o")]) == 2
    assert main(["contaminate", "--data", str(seasonal), "--scenario", "blackout",
                 "--block-size", "5000", "--out", str(tmp_path / "x.csv")]) == 2
    with pytest.raises(SystemExit) as err:
        main(["bench", "--data", str(seasonal), "--scenario", "sometimes", "--out", "o"])
    assert err.value.code == 2
    assert "configuration error" in capsys.readouterr().err


def test_data_errors_exit_three(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2,3\n4,five,6\n")
    assert main(["impute", "--data", str(bad), "--imputers", "mean",
                 "--out", str(tmp_path / "o.csv")]) == 3
    assert main(["impute", "--data", str(tmp_path / "absent.csv"), "--imputers", "mean",
                 "--out", str(tmp_path / "o.csv")]) == 3
    good = tmp_path / "good.csv"
    good.write_text("1,2\n3,4\n")
    mask = tmp_path / "m.csv"
    mask.write_text("0,0\n0,0\n")
    assert main(["score", "--truth", str(good), "--imputed", str(good),
                 "--mask", str(mask)]) == 3


def test_imputer_failure_exit_four_only_when_strict(tmp_path):
    tiny = tmp_path / "tiny.csv"
    np.savetxt(tiny, np.random.default_rng(0).normal(size=(12, 2)), delimiter=",")
    args = ["bench", "--data", str(tiny), "--scenario", "blackout", "--block-size", "11",
            "--imputers", "deepmvi,mean", "--w", "4", "--p", "4", "--heads", "1",
            "--max-iters", "5"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--strict", "--out", str(tmp_path / "b")]) == 4
    report = json.loads((tmp_path / "b" / "report.json").read_text())
    assert report["results"]["deepmvi"]["status"] == "failed"
    assert report["results"]["mean"]["status"] == "ok"


def test_long_layout_round_trip_through_impute(tmp_path):
    path = tmp_path / "dup.csv"
    main(["synth", "--kind", "duplicated", "--out", str(path)])
    dirty = tmp_path / "dirty.csv"
    assert main(["contaminate", "--data", str(path), "--scenario", "missdisj",
                 "--out", str(dirty)]) == 0
    out = tmp_path / "out.csv"
    assert main(["impute", "--data", str(dirty), "--imputers", "mean", "--out", str(out)]) == 0
    done = load_long(out)
    assert done.shape == (10, 2, 1000) and done.available.all()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "deepmvi", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0
    for verb in ("synth", "contaminate", "impute", "score", "bench"):
        assert verb in proc.stdout
