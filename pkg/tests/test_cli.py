import json

import pytest

from featuredex import cli
from featuredex.workflow import file_digest

SMALL = ["--points", "256", "--radius", "1.2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert cli.run(["gen", "--out", str(root), "--families", "blind_hole,rectangular_pocket",
                    "--per-family", "6", "--resolution", "24", "--seed", "3"]) == 0
    assert cli.run(["extract", "--data", str(root), *SMALL]) == 0
    assert cli.run(["train", "--data", str(root), "--epochs", "2", "--batch-size", "4"]) == 0
    assert cli.run(["index", "--data", str(root), "--mode", "raw"]) == 0
    assert cli.run(["index", "--data", str(root), "--mode", "learned", "--model", str(root / "net.fnet")]) == 0
    return root


def test_gen_is_deterministic(tmp_path):
    args = ["--families", "o_ring", "--per-family", "3", "--resolution", "20", "--seed", "9"]
    assert cli.run(["gen", "--out", str(tmp_path / "a"), *args]) == 0
    assert cli.run(["gen", "--out", str(tmp_path / "b"), *args]) == 0
    assert file_digest(tmp_path / "a" / "manifest.jsonl") == file_digest(tmp_path / "b" / "manifest.jsonl")


def test_stage_outputs(data):
    assert (data / "features" / "00011.fmat").exists()
    assert (data / "index-raw.fidx").exists() and (data / "index-learned.fidx").exists()
    hist = json.loads((data / "net.history.json").read_text())
    assert len(hist["history"]["train_loss"]) == 2


def _table_rows(out):
    lines = out.strip().splitlines()
    assert lines[0].split()[:2] == ["No.", "Model"]
    return [line.split() for line in lines[1:]]


@pytest.mark.parametrize("mode", ["raw", "learned"])
def test_query_table_sorted(data, mode, capsys):
    args = ["query", str(data / "features" / "00002.fmat"), "--index", str(data / f"index-{mode}.fidx"),
            "--data", str(data), "-k", "5", "--exclude-id", "2"]
    if mode == "learned":
        args += ["--model", str(data / "net.fnet")]
    assert cli.run(args) == 0
    rows = _table_rows(capsys.readouterr().out)
    assert len(rows) == 5
    dist = [float(r[-1]) for r in rows]
    assert dist == sorted(dist)
    assert "2" not in [r[1] for r in rows]


def test_query_stl_input(data, capsys):
    assert cli.run(["query", str(data / "models" / "00000.stl"), "--index", str(data / "index-raw.fidx"),
                    "--data", str(data), "-k", "3"]) == 0
    assert len(_table_rows(capsys.readouterr().out)) == 3


def test_eval_report(data, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert cli.run(["eval", "--data", str(data), "--index", str(data / "index-raw.fidx"),
                    "--report", str(out)]) == 0
    report = json.loads(out.read_text())
    assert {"baseline", "spp_raw"} <= set(report)
    assert report["spp_raw"]["topk"] >= report["spp_raw"]["top1"]
    assert "Family 1" in capsys.readouterr().out


def test_provenance_mismatch_exit_3(data):
    assert cli.run(["query", str(data / "features" / "00002.fmat"), "--index", str(data / "index-raw.fidx"),
                    *SMALL[:2], "--radius", "0.8"]) == 3


def test_learned_index_needs_model(data):
    assert cli.run(["query", str(data / "features" / "00002.fmat"),
                    "--index", str(data / "index-learned.fidx"), "--data", str(data)]) == 1


def test_exit_codes(tmp_path, capsys):
    assert cli.run([]) == 1
    assert cli.run(["gen", "--out", str(tmp_path), "--per-family", "0"]) == 1
    assert cli.run(["gen", "--out", str(tmp_path), "--families", "nope"]) == 1
    assert cli.run(["gen", "--out", str(tmp_path), "--resolution", "8"]) == 1
    assert cli.run(["extract", "--data", str(tmp_path / "missing")]) == 2
    assert cli.run(["query", str(tmp_path / "x.stl"), "--index", str(tmp_path / "none.fidx")]) == 2
    bad = tmp_path / "bad.fidx"
    bad.write_bytes(b"garbage")
    assert cli.run(["eval", "--data", str(tmp_path), "--index", str(bad)]) == 2
    assert not (tmp_path / "manifest.jsonl").exists()
    assert cli.run(["--help"]) == 0


def test_help_documents_defaults(capsys):
    assert cli.run(["extract", "--help"]) == 0
    out = capsys.readouterr().out
    assert "2048" in out and "0.8" in out


def test_pipeline_small(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny run\nout = {tmp_path / 'run'}\nfamilies = blind_hole,o_ring\n"
                   "per_family = 5\nresolution = 20\npoints = 200\nradius = 1.2\nepochs = 2\n")
    assert cli.run(["pipeline", str(cfg)]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert {"baseline", "spp_raw", "spp_learned", "digests", "history"} <= set(report)
    assert len(report["history"]["train_loss"]) == 2


def test_pipeline_bad_config(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("colour = blue\n")
    assert cli.run(["pipeline", str(cfg)]) == 1
    cfg.write_text("per_family = many\n")
    assert cli.run(["pipeline", str(cfg)]) == 1
    assert cli.run(["pipeline", str(tmp_path / "missing.cfg")]) == 2
