import csv
import io
import json

import numpy as np
import pytest

from nask.cli import RunConfig, build_parser, main, resolve_config
from nask.data import random_sample, read_manifest, write_manifest, write_synthetic_set
from nask.evaluation import polygon_iou
from nask.tensor import load_tensor


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def one_sample(tmp_path):
    s = random_sample(11, max_instances=1)
    np.save(tmp_path / "img.npy", s.image)
    write_manifest(tmp_path / "m.jsonl", [("img.npy", s.annotations)])
    return tmp_path / "m.jsonl", s


# --- help and usage -----------------------------------------------------------------

def test_help_lists_defaults(capsys):
    code, out, _ = run(["--help"], capsys)
    assert code == 0
    assert "(0.7, 0.6)" in out and "(0.8, 0.4)" in out and "n=8" in out and "groups=4" in out
    code, out, _ = run(["eval", "--help"], capsys)
    assert code == 0
    for text in ("(default: 8)", "(default: 4)", "(default: 0.7)", "(default: 0.6)",
                 "T_tr 0.8, T_tcl 0.4", "(default: 0)"):
        assert text in out


@pytest.mark.parametrize("argv", [
    [],
    ["nonsense"],
    ["bench-attention", "--preset", "icdar"],
    ["bench-attention", "--t-tr", "1.5"],
    ["bench-attention", "--n", "1"],
    ["bench-attention", "--groups", "3"],
    ["bench-attention", "--shapes", "4,4,8"],
    ["ablate", "--axis", "first-stage", "--values", "maybe"],
    ["ablate", "--axis", "n", "--values", "1,8"],
    ["encode-labels", "missing.jsonl"],  # no --out
])
def test_usage_errors_exit_2(argv, capsys):
    code, _, _ = run(argv, capsys)
    assert code == 2


def test_runtime_error_exits_1(tmp_path, capsys):
    code, _, err = run(["eval", tmp_path / "absent.jsonl", "--detections", tmp_path / "x"], capsys)
    assert code == 1 and "failed" in err


def test_config_precedence(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"n": 5, "t_tcl": 0.3, "steps": 7}))
    parser = build_parser()
    args = parser.parse_args(["ablate", "--axis", "n", "--values", "2", "--config",
                              str(tmp_path / "c.json"), "--n", "6"])
    cfg = resolve_config(args)
    assert (cfg.n, cfg.t_tcl, cfg.steps) == (6, 0.3, 7)
    args = parser.parse_args(["ablate", "--axis", "n", "--values", "2", "--preset", "ctw",
                              "--t-tcl", "0.5"])
    cfg = resolve_config(args)
    assert (cfg.t_tr, cfg.t_tcl) == (0.8, 0.5)
    assert RunConfig().t_tr == 0.7


def test_config_unknown_key(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"nn": 5}))
    code, _, err = run(["bench-attention", "--config", tmp_path / "c.json"], capsys)
    assert code == 2 and "nn" in err


# --- encode / decode -----------------------------------------------------------------

def test_encode_empty_manifest(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("")
    code, _, _ = run(["encode-labels", tmp_path / "m.jsonl", "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert json.loads((tmp_path / "o" / "index.json").read_text())["samples"] == []
    assert json.loads((tmp_path / "o" / "config.json").read_text())["command"] == "encode-labels"


def test_encode_one_sample_deterministic(one_sample, tmp_path, capsys):
    manifest, _ = one_sample
    for d in ("a", "b"):
        assert run(["encode-labels", manifest, "--out", tmp_path / d, "--seed", 3], capsys)[0] == 0
    index = json.loads((tmp_path / "a" / "index.json").read_text())
    (rec,) = index["samples"]
    maps = load_tensor(tmp_path / "a" / rec["maps"]).data
    tcl = maps[index["channels"].index("tcl")]
    assert tcl.min() >= 0 and tcl.max() <= 1 and tcl.max() == 1
    for name in ("index.json", rec["maps"]):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # the resolved configs differ only in the output directory
    ca, cb = (json.loads((tmp_path / d / "config.json").read_text()) for d in ("a", "b"))
    assert ca.pop("out") != cb.pop("out") and ca == cb and ca["seed"] == 3


def test_encode_reports_failures(one_sample, tmp_path, capsys):
    manifest, s = one_sample
    write_manifest(tmp_path / "bad.jsonl", [("img.npy", s.annotations), ("gone.npy", [])])
    code, _, _ = run(["encode-labels", tmp_path / "bad.jsonl", "--out", tmp_path / "o"], capsys)
    assert code == 1
    good, bad = json.loads((tmp_path / "o" / "index.json").read_text())["samples"]
    assert good["error"] is None and good["maps"]
    assert bad["maps"] is None and bad["error"]


def test_decode_maps(one_sample, tmp_path, capsys):
    manifest, s = one_sample
    run(["encode-labels", manifest, "--out", tmp_path / "o"], capsys)
    code, out, _ = run(["decode", "--maps", tmp_path / "o" / "maps_00000.tensor"], capsys)
    assert code == 0
    (line,) = out.splitlines()
    rec = json.loads(line)
    assert set(rec) == {"points", "score"}
    assert polygon_iou(np.array(rec["points"]), s.annotations[0].boundary) > 0.8
    code, _, _ = run(["decode", "--maps", tmp_path / "o" / "maps_00000.tensor",
                      "--out", tmp_path / "d" / "dets.jsonl"], capsys)
    assert code == 0 and (tmp_path / "d" / "dets.jsonl").read_text() == out
    assert (tmp_path / "d" / "config.json").exists()


def test_decode_needs_one_input(capsys):
    assert run(["decode"], capsys)[0] == 2


# --- eval / render ---------------------------------------------------------------------

def test_eval_dets_equal_gts(tmp_path, capsys):
    path = write_synthetic_set(tmp_path / "set", 3, seed=2)
    code, out, _ = run(["eval", path, "--detections", path, "--out", tmp_path / "r"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["hmean"] == 1.0 and rep["precision"] == 1.0 and rep["recall"] == 1.0
    assert json.loads((tmp_path / "r" / "report.json").read_text())["hmean"] == 1.0
    code, out, _ = run(["eval", path, "--detections", path, "--format", "table"], capsys)
    assert out.splitlines()[2].split()[1:4] == ["100.0", "100.0", "100.0"]


def test_render_svg(tmp_path, capsys):
    path = write_synthetic_set(tmp_path / "set", 2, seed=4)
    code, _, _ = run(["render", path, "--detections", path, "--out", tmp_path / "svg"], capsys)
    assert code == 0
    svgs = sorted((tmp_path / "svg").glob("*.svg"))
    assert len(svgs) == 2
    text = svgs[0].read_text()
    n = len(read_manifest(path)[0].annotations)
    assert text.startswith("<svg") and text.count('class="gt"') == n
    assert text.count('class="det"') == n


# --- bench / train / ablate ----------------------------------------------------------------

def test_bench_attention_csv(capsys):
    code, out, _ = run(["bench-attention", "--shapes", "4,4,8,1;4,4,8,4", "--no-timing"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [int(r["paper_cost"]) for r in rows] == [16384, 4096]
    assert all(int(r["implemented_cost"]) == 4096 for r in rows)
    assert run(["bench-attention", "--shapes", "4,4,8,1;4,4,8,4", "--no-timing"], capsys)[1] == out


TRAIN_FAST = ["--steps", 3, "--warmup-steps", 1, "--train-count", 2, "--image-size", 64]


def test_train_toy_outputs(tmp_path, capsys):
    code, _, _ = run(["train-toy", "--out", tmp_path / "a", *TRAIN_FAST], capsys)
    assert code == 0
    lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert set(json.loads(lines[0])) == {"step", "L_TIS", "L_tcl", "L_s", "L_sin_t", "L_cos_t",
                                         "L_sin_p", "L_cos_p", "total"}
    assert (tmp_path / "a" / "checkpoint" / "config.json").exists()
    assert json.loads((tmp_path / "a" / "config.json").read_text())["steps"] == 3
    run(["train-toy", "--out", tmp_path / "b", *TRAIN_FAST], capsys)
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == \
        (tmp_path / "b" / "train_log.jsonl").read_bytes()

    # the checkpoint drives decode and eval
    s = random_sample(3, (64, 64), max_instances=1, length=(22.0, 47.0), half_thickness=(3.0, 4.5))
    np.save(tmp_path / "img.npy", s.image)
    code, out, _ = run(["decode", "--image", tmp_path / "img.npy", "--checkpoint",
                        tmp_path / "a" / "checkpoint"], capsys)
    assert code == 0
    assert all(set(json.loads(x)) == {"points", "score"} for x in out.splitlines())
    write_manifest(tmp_path / "m.jsonl", [("img.npy", s.annotations)] * 2)
    code, out, _ = run(["eval", tmp_path / "m.jsonl", "--checkpoint",
                        tmp_path / "a" / "checkpoint"], capsys)
    assert code == 0 and 0.0 <= json.loads(out)["hmean"] <= 1.0
    code, _, _ = run(["render", tmp_path / "m.jsonl", "--checkpoint",
                      tmp_path / "a" / "checkpoint", "--out", tmp_path / "svg"], capsys)
    assert code == 0 and len(list((tmp_path / "svg").glob("*.svg"))) == 2


@pytest.mark.parametrize("axis,values,expect", [
    ("G", "0,2", ["0", "2"]),
    ("first-stage", "on,off", ["on", "off"]),
    ("n", "2,8", ["2", "8"]),
])
def test_ablate_rows(axis, values, expect, tmp_path, capsys):
    argv = ["ablate", "--axis", axis, "--values", values, "--test-count", 1,
            "--out", tmp_path, *TRAIN_FAST]
    code, out, _ = run(argv, capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert [r["value"] for r in rows] == expect
    assert all(0.0 <= float(r["hmean"]) <= 1.0 for r in rows)
    assert (tmp_path / f"ablate_{axis}.csv").read_text() == out
    assert run(argv, capsys)[1] == out
