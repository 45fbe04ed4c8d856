import json
import os
import shutil
from pathlib import Path

import pytest

from zerolag.cli import run_cli

GOLDEN = Path(__file__).parent / "golden"

SPEC = {"height": 16, "width": 16, "min_size": 4, "max_size": 6, "max_speed": 1, "length": 8}
TRAIN = {"epochs": 1, "batch_size": 4, "lr": 1e-3, "k_max": 3,
         "model": {"levels": 2, "channels": [6, 12]}}


def cli(*argv):
    return run_cli([str(a) for a in argv])


def error_of(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    return json.loads(err[0])


def schema(obj):
    """Key structure and value types, ignoring the values themselves."""
    if isinstance(obj, dict):
        if obj and all(k.isdigit() for k in obj):  # histograms keyed by k
            return {"<k>": schema(next(iter(obj.values())))}
        return {k: schema(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [schema(obj[0])] if obj else []
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, (int, float)):
        return "number"
    return type(obj).__name__


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "spec.json").write_text(json.dumps(SPEC))
    (root / "train.json").write_text(json.dumps(TRAIN))
    (root / "trace.json").write_text(json.dumps({"generator": {"kind": "constant", "ms": 100}}))
    assert cli("--seed", 3, "dataset", "gen", "--spec", root / "spec.json", "--count", 2, "--out", root / "data") == 0
    for method in ("recurrent", "arbitrary", "independent"):
        assert cli("train", "--method", method, "--data", root / "data", "--config", root / "train.json",
                   "--out", root / f"{method}.ifvp") == 0
    return root


def test_dataset_layout(workspace):
    manifest = json.loads((workspace / "data" / "dataset.json").read_text())
    assert manifest["spec"]["seed"] == 3
    assert manifest["sequences"] == ["seq_0000", "seq_0001"]
    assert len(list((workspace / "data" / "seq_0000").glob("*.png"))) == 8


def test_train_outputs(workspace):
    assert (workspace / "recurrent.ifvp").is_file()
    assert (workspace / "independent_k1.ifvp").is_file() and (workspace / "independent_k2.ifvp").is_file()
    rep = json.loads((workspace / "arbitrary.train.json").read_text())
    assert rep["config"]["method"] == "arbitrary"
    assert "threads" not in rep["config"] and "wall_time_s" not in rep["log"]
    assert (workspace / "arbitrary.train_loss.png").is_file()


@pytest.mark.parametrize("name,command", [
    ("train", None),
    ("eval", ["eval", "--pred", "{w}/pred", "--gt", "{w}/gt", "--report", "{w}/eval.json"]),
    ("bench_flops", ["bench", "flops", "--block", "elan_lite", "--c", "12", "--h", "8", "--w", "8",
                     "--report", "{w}/flops.json"]),
    ("bench_model", ["bench", "model", "--model", "{w}/arbitrary.ifvp", "--resolution", "16x16",
                     "--strategy", "arbitrary", "--k-range", "1..2", "--report", "{w}/bench.json"]),
    ("simulate", ["simulate", "--model", "{w}/independent_k1.ifvp", "{w}/independent_k2.ifvp",
                  "--frames", "{w}/data/seq_0001", "--trace", "{w}/trace.json", "--report", "{w}/sim.json"]),
])
def test_report_schema_matches_golden(workspace, name, command, capsys):
    w = workspace
    if name == "train":
        path = w / "recurrent.train.json"
    else:
        if name == "eval":
            for d in ("pred", "gt"):
                (w / d).mkdir(exist_ok=True)
            shutil.copy(w / "data/seq_0000/frame_0003.png", w / "pred/a.png")
            shutil.copy(w / "data/seq_0000/frame_0004.png", w / "gt/a.png")
        assert cli(*[a.format(w=w) for a in command]) == 0
        path = Path(command[command.index("--report") + 1].format(w=w))
        assert path.with_name(path.stem + "_" + {"eval": "ms_ssim", "bench_flops": "blocks",
                                                  "bench_model": "flops", "simulate": "timeline"}[name]
                              + ".png").is_file()
    got = schema(json.loads(path.read_text()))
    golden = GOLDEN / f"{name}.schema.json"
    if os.environ.get("ZEROLAG_REGEN_GOLDEN"):
        golden.write_text(json.dumps(got, indent=2, sort_keys=True) + "\n")
    assert got == json.loads(golden.read_text())
    capsys.readouterr()


def test_bench_flops_published_example(capsys):
    assert cli("bench", "flops", "--block", "elan_original", "--c", 64, "--h", 32, "--w", 32) == 0
    assert capsys.readouterr().out.strip() == "176160768"


def test_simulate_constant_100ms_is_all_k3(workspace, capsys):
    assert cli("simulate", "--model", workspace / "arbitrary.ifvp", "--frames", workspace / "data/seq_0000",
               "--trace", workspace / "trace.json", "--fps", 30, "--report", workspace / "sim100.json") == 0
    rep = json.loads((workspace / "sim100.json").read_text())
    counts = rep["aggregates"]["k_counts"]
    assert counts == {"3": rep["aggregates"]["displayed"]}
    capsys.readouterr()


def test_predict_and_k_range(workspace, capsys):
    w = workspace
    frames = w / "data/seq_0000"
    assert cli("predict", "--model", w / "arbitrary.ifvp", "--prev", frames / "frame_0001.png",
               "--curr", frames / "frame_0002.png", "--k", 3, "--out", w / "p.png") == 0
    assert json.loads(capsys.readouterr().out)["method"] == "arbitrary"
    assert cli("predict", "--model", w / "arbitrary.ifvp", "--prev", frames / "frame_0001.png",
               "--curr", frames / "frame_0002.png", "--k", 4, "--out", w / "p.png") == 1
    err = error_of(capsys)
    assert err["error"] == "k_out_of_range" and "1..3" in err["message"]


def test_predict_double_precision(workspace, capsys):
    w = workspace
    frames = w / "data/seq_0000"
    assert cli("--precision", "double", "predict", "--model", w / "recurrent.ifvp", "--prev",
               frames / "frame_0001.png", "--curr", frames / "frame_0002.png", "--k", 1, "--out", w / "d.png") == 0
    capsys.readouterr()


def _corrupt(src, dst, fn):
    blob = bytearray(Path(src).read_bytes())
    fn(blob)
    Path(dst).write_bytes(bytes(blob))
    return dst


@pytest.mark.parametrize("mutate,code", [
    (lambda b: b.__setitem__(len(b) - 10, b[len(b) - 10] ^ 1), "checksum_mismatch"),
    (lambda b: b.__setitem__(4, 9), "unsupported_version"),
    (lambda b: b.__setitem__(0, 0), "bad_magic"),
    (lambda b: b.__delitem__(slice(len(b) - 20, None)), "truncated_file"),
])
def test_model_file_errors(workspace, mutate, code, capsys):
    bad = _corrupt(workspace / "recurrent.ifvp", workspace / "bad.ifvp", mutate)
    assert cli("bench", "model", "--model", bad, "--resolution", "16x16", "--strategy", "recurrent") == 1
    assert error_of(capsys)["error"] == code


def test_distinct_error_codes(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{nope")
    cases = [
        (["--bogus"], "usage", 2),
        (["dataset", "gen", "--spec", tmp_path / "missing.json", "--count", 1, "--out", tmp_path / "d"],
         "file_not_found", 1),
        (["dataset", "gen", "--spec", tmp_path / "bad.json", "--count", 1, "--out", tmp_path / "d"], "bad_json", 1),
        (["bench", "flops", "--block", "elan_lite", "--c", 8, "--h", 4, "--w", 4], "bad_argument", 1),
        (["--threads", 0, "bench", "flops", "--block", "elan_lite", "--c", 6, "--h", 4, "--w", 4],
         "bad_argument", 2),
    ]
    for argv, code, status in cases:
        assert cli(*argv) == status, argv
        err = error_of(capsys)
        assert err["error"] == code, argv
        assert err["message"]


def test_bad_config_and_trace(workspace, tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"epochz": 3}))
    assert cli("train", "--method", "recurrent", "--data", workspace / "data", "--config", tmp_path / "cfg.json",
               "--out", tmp_path / "m.ifvp") == 1
    assert error_of(capsys)["error"] == "bad_config"
    (tmp_path / "tr.json").write_text(json.dumps({"generator": {"kind": "zigzag"}}))
    assert cli("simulate", "--model", workspace / "recurrent.ifvp", "--frames", workspace / "data/seq_0000",
               "--trace", tmp_path / "tr.json", "--report", tmp_path / "s.json") == 1
    assert error_of(capsys)["error"] == "bad_trace"


def test_version(capsys):
    assert cli("--version") == 0
    assert "zerolag" in capsys.readouterr().out
