import json
import subprocess
import sys

import numpy as np
import pytest

from ppdm import acceptance, cli
from ppdm.acceptance import CriterionResult
from ppdm.io import read_annotations, read_tensor, write_predictions, write_tensor
from ppdm.targets import MAP_NAMES

GEN = ["--seed", "3", "--images", "4", "--width", "128", "--height", "128", "--objects", "5", "--verbs", "6"]


@pytest.fixture
def workspace(tmp_path):
    ann = tmp_path / "ann.json"
    assert cli.main(["gen", *GEN, "--out", str(ann)]) == 0
    assert cli.main(["encode", "--ann", str(ann), "--out-dir", str(tmp_path / "targets")]) == 0
    return tmp_path


def _error(capsys):
    lines = capsys.readouterr().err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_encode_writes_every_map(workspace):
    names = sorted(p.name for p in (workspace / "targets").iterdir())
    assert names == sorted(f"{i}.{m}.ppt" for i in range(4) for m in MAP_NAMES)


def test_eval_with_gt_as_predictions(workspace, capsys):
    ann = str(workspace / "ann.json")
    preds = workspace / "gt_preds.json"
    write_predictions(preds, read_annotations(ann).images)
    assert cli.main(["eval", "--ann", ann, "--preds", str(preds)]) == 0
    assert "mAP 1.000000" in capsys.readouterr().out
    assert cli.main(["eval", "--ann", ann, "--preds", ann]) == 2  # annotation files carry no scores
    assert _error(capsys)["error"] == "format"


def test_decode_then_eval_round_trip(workspace, capsys):
    ann, preds = str(workspace / "ann.json"), str(workspace / "preds.json")
    assert cli.main(["decode", "--maps-dir", str(workspace / "targets"), "--ann", ann, "--out", preds]) == 0
    report = workspace / "out" / "report.json"
    report.parent.mkdir()
    assert cli.main(["eval", "--ann", ann, "--preds", preds, "--report", str(report)]) == 0
    assert "mAP 1.000000" in capsys.readouterr().out
    assert json.loads(report.read_text())["mean_ap"] == 1.0
    for suffix in (".pr.png", ".ap.png"):
        png = report.with_name("report" + suffix)
        assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_outputs_independent_of_thread_count(workspace, monkeypatch):
    ann = str(workspace / "ann.json")
    outputs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("PPDM_THREADS", threads)
        d = workspace / f"t{threads}"
        assert cli.main(["encode", "--ann", ann, "--out-dir", str(d)]) == 0
        assert cli.main(["decode", "--maps-dir", str(d), "--ann", ann, "--out", str(d / "p.json")]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outputs[0] == outputs[1]


def test_gen_is_reproducible(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["gen", *GEN, "--out", str(a)]) == 0
    assert cli.main(["gen", *GEN, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_loss_reports_zero_for_targets_and_grad_check(workspace, capsys):
    t = str(workspace / "targets")
    assert cli.main(["loss", "--pred-dir", t, "--target-dir", t]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["lambda"] == 0.1 and len(doc["images"]) == 4
    assert doc["mean"]["L_wh"] == 0.0 and doc["mean"]["L_ah"] == 0.0

    preds = workspace / "preds"
    preds.mkdir()
    rng = np.random.default_rng(0)
    for p in (workspace / "targets").iterdir():
        arr = read_tensor(p)
        if ".heat_" in p.name:
            arr = rng.uniform(0.05, 0.95, arr.shape)
        else:
            arr = arr + rng.normal(0, 0.5, arr.shape)
        write_tensor(preds / p.name, arr)
    assert cli.main(["loss", "--pred-dir", str(preds), "--target-dir", t, "--lambda", "0.5", "--grad-check"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["grad_check"]["passed"] and doc["mean"]["total"] > 0


def test_usage_errors_exit_1(tmp_path, capsys):
    out = tmp_path / "never.json"
    for argv in (["bogus"], ["gen", "--images", "-1", "--out", str(out)], ["gen", "--stride", "3", "--out", str(out)],
                 ["eval", "--ann", "a", "--preds", "b", "--iou", "1.5"], ["gen", "--max-triplets", "9", "--out", str(out)]):
        assert cli.main(argv) == 1
        assert _error(capsys)["error"] == "usage"
    assert not out.exists()


def test_io_errors_exit_2(workspace, capsys):
    ann = str(workspace / "ann.json")
    assert cli.main(["eval", "--ann", ann, "--preds", str(workspace / "missing.json")]) == 2
    assert _error(capsys)["error"] == "io"
    bad = workspace / "bad.json"
    bad.write_text('{"images": [}')
    assert cli.main(["eval", "--ann", ann, "--preds", str(bad)]) == 2
    assert _error(capsys)["error"] == "format"
    (workspace / "targets" / "0.heat_a.ppt").write_bytes(b"PPDM\x01")
    assert cli.main(["decode", "--maps-dir", str(workspace / "targets"), "--ann", ann,
                     "--out", str(workspace / "p.json")]) == 2
    assert "truncated" in _error(capsys)["message"]
    assert cli.main(["loss", "--pred-dir", str(workspace / "nope"), "--target-dir", str(workspace)]) == 2
    _error(capsys)


def test_bad_thread_env_is_usage_error(workspace, monkeypatch, capsys):
    monkeypatch.setenv("PPDM_THREADS", "zero")
    assert cli.main(["encode", "--ann", str(workspace / "ann.json"), "--out-dir", str(workspace / "x")]) == 1
    _error(capsys)


@pytest.mark.parametrize("failing, code", [(0, 0), (2, 3)])
def test_selftest_exit_code(monkeypatch, capsys, failing, code):
    fake = [CriterionResult(f"c{i}", i >= failing, "") for i in range(7)]
    monkeypatch.setattr(acceptance, "run_all", lambda seed, echo=print: fake)
    assert cli.main(["selftest", "--seed", "7"]) == code
    assert f"{7 - failing}/7 criteria passed" in capsys.readouterr().out


@pytest.mark.slow
def test_selftest_full_run():
    proc = subprocess.run([sys.executable, "-m", "ppdm", "selftest", "--seed", "7"], capture_output=True, text=True)
    print(proc.stdout)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert proc.stdout.count("[PASS]") == 7
