import json
import os

import pytest

from imr.cli import main
from imr.compare import compare, rel_error
from imr.records import open_sorted_run


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr().out


def test_gen_data_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        run(capsys, "gen-data", "--app", "pagerank", "--size", 100, "--seed", 3, "--out", tmp_path / d)
    assert (tmp_path / "a" / "input.run").read_bytes() == (tmp_path / "b" / "input.run").read_bytes()


def test_gen_delta_counts_and_determinism(tmp_path, capsys):
    run(capsys, "gen-data", "--app", "pagerank", "--size", 10_000, "--out", tmp_path)
    inp = tmp_path / "input.run"
    for name in ("d1.run", "d2.run"):
        run(capsys, "gen-delta", "--input", inp, "--app", "pagerank", "--fraction", 0.1, "--seed", 5,
            "--out", tmp_path / name)
    assert (tmp_path / "d1.run").read_bytes() == (tmp_path / "d2.run").read_bytes()
    delta = list(open_sorted_run(tmp_path / "d1.run"))
    assert len({d.mk for d in delta}) == 1000
    code, _ = run(capsys, "gen-delta", "--input", inp, "--fraction", 0, "--out", tmp_path / "empty.run")
    assert code == 0 and list(open_sorted_run(tmp_path / "empty.run")) == []


def test_gen_delta_rejects_bad_fraction(tmp_path, capsys):
    run(capsys, "gen-data", "--app", "wordcount", "--size", 10, "--out", tmp_path)
    assert main(["gen-delta", "--input", str(tmp_path / "input.run"), "--fraction", "1.5",
                 "--out", str(tmp_path / "x.run")]) == 2


def test_one_step_pipeline(tmp_path, capsys):
    run(capsys, "gen-data", "--app", "wordcount", "--size", 300, "--seed", 1, "--out", tmp_path / "in")
    inp = tmp_path / "in" / "input.run"
    run(capsys, "gen-delta", "--input", inp, "--fraction", 0.2, "--mix", "1,1,1", "--seed", 2,
        "--out", tmp_path / "delta.run")
    wd = tmp_path / "state"
    run(capsys, "run", "--mode", "incr", "--app", "wordcount", "--input", inp, "--workdir", wd)
    code, out = run(capsys, "run", "--mode", "incr", "--app", "wordcount", "--delta", tmp_path / "delta.run",
                    "--workdir", wd)
    assert code == 0 and json.loads(out)["reduce_calls"] > 0
    run(capsys, "run", "--mode", "plain", "--app", "wordcount", "--input", inp, "--delta", tmp_path / "delta.run",
        "--out", tmp_path / "full")
    code, out = run(capsys, "compare", wd / "results", tmp_path / "full", "--oracle-id", "full-recompute")
    verdict = json.loads(out)
    assert code == 0
    assert verdict["status"] == "match" and verdict["oracle"] == "full-recompute"
    assert json.load(open(wd / "manifest.json"))["results"] == str(wd / "results")


def test_iterative_pipeline_with_metrics(tmp_path, capsys, monkeypatch):
    run(capsys, "gen-data", "--app", "pagerank", "--size", 200, "--out", tmp_path / "in")
    inp = tmp_path / "in" / "input.run"
    run(capsys, "gen-delta", "--input", inp, "--app", "pagerank", "--fraction", 0.1, "--out", tmp_path / "d.run")
    monkeypatch.setenv("IMR_WORKDIR", str(tmp_path / "job"))
    run(capsys, "run", "--mode", "iter", "--app", "pagerank", "--structure", inp, "--tol", 1e-10)
    code, out = run(capsys, "run", "--mode", "incr-iter", "--app", "pagerank", "--delta-structure",
                    tmp_path / "d.run", "--tol", 1e-10, "--metrics", tmp_path / "m.jsonl", "--csv", tmp_path / "m.csv")
    assert code == 0 and json.loads(out)["converged"]
    rows = [json.loads(line) for line in open(tmp_path / "m.jsonl")]
    its = [r for r in rows if r["event"] == "iteration"]
    assert its and {"propagated", "p_delta", "mrbg_enabled", "l1_delta", "bytes_shuffled"} <= set(its[0])
    assert open(tmp_path / "m.csv").readline().startswith("backward_bytes,")
    run(capsys, "run", "--mode", "iter", "--app", "pagerank", "--structure", inp, "--delta-structure",
        tmp_path / "d.run", "--tol", 1e-10, "--workdir", tmp_path / "full")
    code, out = run(capsys, "compare", tmp_path / "job" / "results", tmp_path / "full" / "results", "--tol", 1e-6)
    assert code == 0, out
    code, out = run(capsys, "checkpoint-ls")
    assert all(json.loads(line)["valid"] for line in out.splitlines())
    code, out = run(capsys, "compact")
    assert code == 0 and "bytes" in out


def test_failure_plan_flag(tmp_path, capsys):
    run(capsys, "gen-data", "--app", "pagerank", "--size", 50, "--out", tmp_path / "in")
    plan = tmp_path / "plan.json"
    plan.write_text(json.dumps({"failures": [{"kind": "PRIME_MAP", "iteration": 2, "partition": 1}]}))
    code, out = run(capsys, "run", "--mode", "iter", "--app", "pagerank", "--structure", tmp_path / "in" / "input.run",
                    "--workdir", tmp_path / "job", "--inject-failures", plan)
    assert code == 0
    assert json.loads(out)["converged"]


def test_compare_reports_missing_and_structure(tmp_path, capsys):
    assert compare({b"a": b"1.0"}, {b"a": b"1.0"}).mean_rel_error == 0
    v = compare({b"a": b"1.0"}, {b"a": b"1.0", b"b": b"2"})
    assert v.status == "mismatch" and v.missing == [b"b"]
    assert compare({b"x": b"1"}, {b"y": b"1"}).status == "structural-mismatch"
    assert rel_error(b"1.1", b"1.0") == pytest.approx(0.1)
    assert rel_error(b"1,2;3,4", b"1,2;3,4") == 0


def test_missing_workdir_is_a_usage_error(monkeypatch, capsys):
    monkeypatch.delenv("IMR_WORKDIR", raising=False)
    with pytest.raises(SystemExit):
        main(["checkpoint-ls"])


def test_compare_exit_code(tmp_path, capsys):
    run(capsys, "gen-data", "--app", "wordcount", "--size", 20, "--out", tmp_path / "in")
    inp = tmp_path / "in" / "input.run"
    run(capsys, "run", "--mode", "plain", "--app", "wordcount", "--input", inp, "--out", tmp_path / "a")
    run(capsys, "gen-data", "--app", "wordcount", "--size", 20, "--seed", 9, "--out", tmp_path / "in2")
    run(capsys, "run", "--mode", "plain", "--app", "wordcount", "--input", tmp_path / "in2" / "input.run",
        "--out", tmp_path / "b")
    assert main(["compare", str(tmp_path / "a"), str(tmp_path / "b")]) == 1
    assert os.path.exists(tmp_path / "a" / "manifest.json")


def test_missing_job_state_is_a_clean_error(tmp_path, capsys):
    """An incremental run with nothing preserved reports the problem and exits 2."""
    empty = tmp_path / "empty.run"
    empty.write_bytes(b"")
    code = main(["run", "--mode", "incr", "--app", "wordcount", "--delta", str(empty),
                 "--workdir", str(tmp_path / "nowhere")])
    assert code == 2
    assert "no preserved job state" in capsys.readouterr().err
