import csv
import json
import subprocess
import sys

import pytest
import yaml

from conftest import SMALL_GEN, SMALL_TRAIN
from lde.cli import main
from lde.data import Record, parse_manifest, write_manifest
from lde.evaluation import write_embeddings


def tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# -- gen ------------------------------------------------------------------------------

def test_gen_default_count(capsys, tmp_path):
    from lde.cli import _defaults
    from lde.data import SynthConfig

    g = _defaults()["gen"]
    assert SynthConfig(**g).total_images == 1800
    assert (g["num_domains"], g["ids_per_domain"], g["images_per_id"]) == (3, 30, 20)


def test_gen_same_seed_identical_trees(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--seed", "7", *SMALL_GEN]) == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    snap = yaml.safe_load((tmp_path / "a" / "resolved_config.yaml").read_text())
    assert snap["seed"] == 7 and snap["gen"]["images_per_id"] == 6


def test_gen_rejects_single_domain(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--set", "gen.num_domains=1"]) == 1
    assert "S >= 2" in capsys.readouterr().err


def test_unknown_config_key_and_bad_usage(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--set", "gen.colour=3"]) == 1
    assert "gen.colour" in capsys.readouterr().err
    for argv in (["gen"], ["nonsense"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1


def test_config_file(tmp_path):
    (tmp_path / "c.yaml").write_text("gen:\n  ids_per_domain: 2\n  images_per_id: 2\n  height: 16\n  width: 16\n")
    assert main(["gen", "--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "d")]) == 0
    assert len(parse_manifest(tmp_path / "d" / "manifest.jsonl")) == 3 * 2 * 2


# -- split --------------------------------------------------------------------------------

def test_split_summary_and_determinism(pipeline, tmp_path, capsys):
    summary = json.loads((pipeline / "split" / "summary.json").read_text())
    assert summary["scenes_disjoint"] and summary["test_scenes"] == [6, 7]
    manifest = str(pipeline / "data" / "manifest.jsonl")
    for name in ("a", "b"):
        assert main(["split", manifest, "--protocol", "close_scene", "--out", str(tmp_path / name)]) == 0
    printed = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert printed["protocol"] == "close_scene"
    a, b = tree(tmp_path / "a"), tree(tmp_path / "b")
    assert a == b


def test_day_night_on_day_only_manifest(tmp_path, capsys):
    recs = [Record(f"{s}_{p}_{c}.png", p, s * 2 + c, s, 0, "day") for s in range(4) for p in range(3) for c in range(2)]
    write_manifest(recs, tmp_path / "m.jsonl")
    assert main(["split", str(tmp_path / "m.jsonl"), "--protocol", "day_night", "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "day_night" in err and "unsatisfiable" in err and "night" in err


# -- train ---------------------------------------------------------------------------------

def test_train_outputs(pipeline):
    run = pipeline / "run"
    assert (run / "model.ckpt").is_file()
    rows = list(csv.DictReader((run / "train_log.csv").open()))
    assert len(rows) == 3
    snap = yaml.safe_load((run / "resolved_config.yaml").read_text())
    assert snap["train"]["iterations"] == 3 and snap["train"]["lam"] == 1.0


def test_train_lambda_zero(pipeline, tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(pipeline / "split"), "--out", str(out), "--iterations", "3", "--lambda", "0",
                 *SMALL_TRAIN]) == 0
    assert yaml.safe_load((out / "resolved_config.yaml").read_text())["train"]["lam"] == 0.0
    rows = list(csv.DictReader((out / "train_log.csv").open()))
    assert all(float(r["trace_term"]) == 0.0 for r in rows)


def test_train_resume_matches_uninterrupted(pipeline, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    common = [str(pipeline / "split"), "--iterations", "4", "--set", "train.checkpoint_every=2", *SMALL_TRAIN]
    assert main(["train", *common, "--out", str(full)]) == 0
    assert main(["train", *common, "--out", str(part), "--resume", str(full / "ckpt_000002.ckpt")]) == 0
    assert (full / "train_log.csv").read_bytes() == (part / "train_log.csv").read_bytes()
    assert (full / "model.ckpt").read_bytes() == (part / "model.ckpt").read_bytes()


def test_train_missing_split(tmp_path, capsys):
    assert main(["train", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--data", str(tmp_path)]) == 1


# -- embed / eval ------------------------------------------------------------------------------

def test_embed_row_count_and_rerun(pipeline, tmp_path):
    q = pipeline / "split" / "query.jsonl"
    assert len((pipeline / "emb_q" / "embeddings.jsonl").read_text().splitlines()) == len(parse_manifest(q))
    assert main(["embed", str(pipeline / "run" / "model.ckpt"), str(q), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "embeddings.jsonl").read_bytes() == (pipeline / "emb_q" / "embeddings.jsonl").read_bytes()


def test_embed_corrupted_checkpoint(pipeline, tmp_path, capsys):
    raw = (pipeline / "run" / "model.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(raw[:len(raw) // 2])
    code = main(["embed", str(tmp_path / "bad.ckpt"), str(pipeline / "split" / "query.jsonl"), "--out",
                 str(tmp_path / "o")])
    assert code == 1
    assert "tensor" in capsys.readouterr().err


def test_embed_lists_missing_images(pipeline, tmp_path, capsys):
    write_manifest([Record("missing/a.png", 0, 0, 0, 0, "day")], tmp_path / "r.jsonl")
    code = main(["embed", str(pipeline / "run" / "model.ckpt"), str(tmp_path / "r.jsonl"), "--out",
                 str(tmp_path / "o"), "--data", str(tmp_path)])
    assert code == 1
    assert "missing/a.png" in capsys.readouterr().err


def test_eval_report(pipeline):
    rep = json.loads((pipeline / "eval" / "report.json").read_text())
    assert set(rep) == {"mAP", "cmc", "num_queries", "num_dropped"}
    assert 0 <= rep["mAP"] <= 1 and rep["num_queries"] > 0
    assert (pipeline / "eval" / "report.csv").read_text().startswith("mAP,r1,r5,r10")


def _fixture(tmp_path, query, gallery, embs):
    write_manifest(query, tmp_path / "q.jsonl")
    write_manifest(gallery, tmp_path / "g.jsonl")
    recs = query + gallery
    write_embeddings([r.path for r in recs], embs, tmp_path / "e.jsonl")
    code = main(["eval", str(tmp_path / "e.jsonl"), str(tmp_path / "q.jsonl"), str(tmp_path / "g.jsonl"),
                 "--out", str(tmp_path / "o")])
    return code, (json.loads((tmp_path / "o" / "report.json").read_text()) if code == 0 else None)


def test_eval_perfect_and_dropped_fixtures(tmp_path):
    q = [Record("q0", 0, 0, 0, 0, "day"), Record("q1", 1, 0, 0, 0, "day"), Record("q2", 2, 0, 0, 0, "day")]
    g = [Record("g0", 0, 1, 0, 0, "day"), Record("g1", 1, 1, 0, 0, "day"), Record("g2", 2, 0, 0, 0, "day")]
    embs = [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 0.1, 0], [0, 1, 0.1], [0, 0, 1]]
    code, rep = _fixture(tmp_path, q, g, embs)
    assert code == 0
    assert rep["mAP"] == 1.0 and rep["num_queries"] == 2 and rep["num_dropped"] == 1


def test_eval_missing_embedding(tmp_path, capsys):
    q = [Record("q0", 0, 0, 0, 0, "day")]
    write_manifest(q, tmp_path / "q.jsonl")
    write_manifest([Record("g0", 0, 1, 0, 0, "day")], tmp_path / "g.jsonl")
    write_embeddings(["q0"], [[1.0, 0.0]], tmp_path / "e.jsonl")
    assert main(["eval", str(tmp_path / "e.jsonl"), str(tmp_path / "q.jsonl"), str(tmp_path / "g.jsonl"),
                 "--out", str(tmp_path / "o")]) == 1
    assert "g0" in capsys.readouterr().err


# -- verify / entry point -------------------------------------------------------------------------

def test_verify_fault_injection_exits_nonzero(tmp_path, monkeypatch, capsys):
    from lde import verify

    # keep this test cheap: only run the check the fault targets
    monkeypatch.setitem(verify.LEVELS, "quick", {})
    code = main(["verify", "--level", "quick", "--inject-fault", "trace_sign", "--out", str(tmp_path)])
    assert code == 2
    out = capsys.readouterr().out
    assert "taylor_limit" in out and "FAIL" in out
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert [(r["name"], r["passed"]) for r in report] == [("taylor_limit", False)]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "lde", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("gen", "split", "train", "embed", "eval", "verify"):
        assert name in res.stdout


def test_verify_quick_passes_within_a_minute(tmp_path, capsys):
    import time

    t = time.perf_counter()
    assert main(["verify", "--level", "quick", "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - t < 60
    report = json.loads((tmp_path / "verify_report.json").read_text())
    assert all(r["passed"] for r in report) and len(report) == 7
    assert "7/7 checks passed" in capsys.readouterr().out
