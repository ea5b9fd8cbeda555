import json

from rcsim.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from rcsim.services.harness import SCENARIO_DIR

WALKTHROUGH = str(SCENARIO_DIR / "cm_walkthrough.yaml")


def test_run_verify_and_graph(tmp_path, capsys):
    trace = tmp_path / "walkthrough.jsonl"
    assert main(["run", "--scenario", WALKTHROUGH, "--trace", str(trace)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "Scenario cm_walkthrough" in out
    assert "FAIL" not in out
    assert trace.exists()

    assert main(["verify", "--trace", str(trace)]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out

    assert main(["graph", "--trace", str(trace), "--cycle", "1"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["Cycle 1", "BG1: BG3", "BG2: BG1", "BG3: BG1"]

    assert main(["graph", "--trace", str(trace), "--cycle", "99"]) == EXIT_FAILED


def test_same_seed_same_digest(capsys):
    digests = []
    for _ in range(2):
        assert main(["run", "--scenario", WALKTHROUGH, "--seed", "5"]) == EXIT_OK
        out = capsys.readouterr().out
        digests.append(next(line for line in out.splitlines() if line.startswith("trace digest")))
    assert digests[0] == digests[1]


def test_verify_detects_a_tampered_trace(tmp_path, capsys):
    trace = tmp_path / "t.jsonl"
    assert main(["run", "--scenario", WALKTHROUGH, "--trace", str(trace)]) == EXIT_OK
    lines = trace.read_text().splitlines()
    lines[-1] = json.dumps({"trace_digest": "0" * 64})
    trace.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert main(["verify", "--trace", str(trace)]) == EXIT_FAILED
    assert "trace_digest" in capsys.readouterr().out


def test_malformed_trace_is_a_usage_error(tmp_path, capsys):
    trace = tmp_path / "bad.jsonl"
    trace.write_text('{"tick": 0}\nnot json\n')
    assert main(["verify", "--trace", str(trace)]) == EXIT_USAGE
    assert "line 1" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main(["run"]) == EXIT_USAGE
    assert main(["run", "--scenario", WALKTHROUGH, "--bogus"]) == EXIT_USAGE
    assert main(["run", "--scenario", WALKTHROUGH, "--analysis", "sometimes"]) == EXIT_USAGE
    assert main(["run", "--scenario", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: bad\ntopology:\n  sls_per_bg: 2\n")
    assert main(["run", "--scenario", str(bad)]) == EXIT_USAGE
