from __future__ import annotations

import json

import pytest

from disaggkv import cli
from disaggkv.verify import SuiteResult
from disaggkv.workloads import Trace, TraceError, gen_trace, parse_trace, serialize_trace, validate_trace


def test_react_builds_one_chain_per_workflow():
    t = gen_trace("react", 2, 3, 50, 5, seed=0, tool_tokens=7)
    assert [r.agent_id for r in t.records if r.workflow_id == "wf0"] == ["wf0-a0", "wf0-a1", "wf0-a2"]
    by_agent = {r.agent_id: r for r in t.records}
    assert by_agent["wf0-a0"].parent_agent is None and by_agent["wf0-a0"].shared_context.token_count == 50
    assert by_agent["wf0-a1"].parent_agent == "wf0-a0" and by_agent["wf0-a1"].shared_context is None
    assert by_agent["wf0-a1"].token_count == 12  # tool response + own dynamic tokens
    times = [by_agent[f"wf0-a{k}"].time for k in range(3)]
    assert times == sorted(times) and times[0] < times[1]
    assert len({r.adapter_id for r in t.records}) == 6


def test_mapreduce_agents_start_together_from_the_shared_context():
    t = gen_trace("mapreduce", 1, 4, 30, 5, seed=2)
    assert {r.time for r in t.records} == {0.0}
    assert all(r.parent_agent is None and r.shared_context.token_count == 30 for r in t.records)


def test_context_scope_and_turns():
    glob = gen_trace("mapreduce", 2, 1, 10, 1, seed=0)
    per_wf = gen_trace("mapreduce", 2, 1, 10, 1, seed=0, context_scope="workflow")
    assert glob.records[0].shared_context == glob.records[1].shared_context
    assert per_wf.records[0].shared_context != per_wf.records[1].shared_context
    multi = gen_trace("react", 1, 2, 10, 1, seed=0, turns=3)
    assert [r.kind for r in multi.records].count("message") == 4
    validate_trace(multi, vocab=256, num_adapters=2)


def test_generation_is_seeded():
    a = serialize_trace(gen_trace("react", 4, 2, 20, 3, seed=9))
    assert a == serialize_trace(gen_trace("react", 4, 2, 20, 3, seed=9))
    assert a != serialize_trace(gen_trace("react", 4, 2, 20, 3, seed=10))


def test_serialization_round_trips():
    t = gen_trace("react", 3, 2, 20, 3, seed=1, turns=2)
    back = parse_trace(serialize_trace(t))
    assert back.meta == t.meta and back.records == t.records


@pytest.mark.parametrize(
    "line, message",
    [
        ("{not json", "not valid JSON"),
        ('{"time": 0}', "missing field"),
        ('{"time": 0, "workflow_id": "w", "agent_id": "a", "adapter_id": "lora-0", "kind": "spawn", "max_new_tokens": 1}',
         "either tokens or token_count"),
        ('{"time": -1, "workflow_id": "w", "agent_id": "a", "adapter_id": "lora-0", "kind": "spawn", "max_new_tokens": 1, "tokens": [1]}',
         "non-negative"),
        ('{"time": 0, "workflow_id": "w", "agent_id": "a", "adapter_id": "lora-0", "kind": "fork", "max_new_tokens": 1, "tokens": [1]}',
         "kind must be"),
    ],
)
def test_corrupt_lines_are_reported_by_number(line, message):
    text = serialize_trace(gen_trace("react", 1, 1, 5, 1, seed=0)) + line + "\n"
    with pytest.raises(TraceError, match=message) as err:
        parse_trace(text)
    assert err.value.line == 3


def test_validation_rejects_structural_problems():
    t = gen_trace("react", 1, 2, 5, 1, seed=0)
    with pytest.raises(TraceError, match="not defined by the config"):
        validate_trace(t, num_adapters=1)
    orphan = Trace(t.meta, [t.records[1]])
    with pytest.raises(TraceError, match="has not been spawned") as err:
        validate_trace(orphan)
    assert err.value.line == 2
    with pytest.raises(TraceError, match="meta record"):
        parse_trace(serialize_trace(t) + '{"kind": "meta"}\n')


def test_empty_trace_parses_and_runs(tmp_path):
    assert parse_trace("").records == []
    (tmp_path / "t.jsonl").write_text("")
    (tmp_path / "c.json").write_text("{}")
    rc = cli.main(["run", "--trace", str(tmp_path / "t.jsonl"), "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert rc == 0
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["steps"] == 0


def test_bad_generator_arguments():
    for kwargs in ({"pattern": "ring"}, {"workflows": 0}, {"arrival_rate": 0.0}, {"context_scope": "x"}):
        args = dict(pattern="react", workflows=1, agents_per_workflow=1, shared_context_tokens=5, dynamic_tokens=1, seed=0)
        args.update(kwargs)
        with pytest.raises(ValueError):
            gen_trace(**args)


@pytest.fixture
def small_run(tmp_path):
    trace = tmp_path / "trace.jsonl"
    config = tmp_path / "config.json"
    rc = cli.main(["gen-trace", "--pattern", "mapreduce", "--workflows", "2", "--agents", "3", "--ctx-tokens", "64",
                   "--dyn-tokens", "8", "--max-new", "3", "--out", str(trace)])
    assert rc == 0
    config.write_text(json.dumps({"num_layers": 1, "num_adapters": 8, "pool_bytes": 4 * 2**20}))
    return tmp_path, trace, config


def test_cli_runs_every_mode_and_compares(small_run, capsys):
    tmp, trace, config = small_run
    out = tmp / "out"
    assert cli.main(["run", "--trace", str(trace), "--config", str(config), "--mode", "all", "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["modes"]) == {"unified", "disaggregated", "full_reuse"}
    for mode in report["modes"]:
        assert (out / mode / "metrics.json").exists()
        assert (out / mode / "timeline.csv").read_text().startswith("sim_time,")
    u, d = report["modes"]["unified"], report["modes"]["disaggregated"]
    assert report["ratios"]["per_agent_bytes_disaggregated_over_unified"] == pytest.approx(d["per_agent_bytes"] / u["per_agent_bytes"])
    assert d["cache_hit_rate"] > u["cache_hit_rate"]
    assert "tasks_per_second_disaggregated_over_unified" in capsys.readouterr().out


def test_cli_single_mode_writes_flat_and_reruns_identically(small_run):
    tmp, trace, config = small_run
    outs = []
    for name in ("a", "b"):
        assert cli.main(["run", "--trace", str(trace), "--config", str(config), "--mode", "unified", "--out", str(tmp / name)]) == 0
        outs.append([(tmp / name / f).read_text() for f in ("metrics.json", "timeline.csv")])
    assert outs[0] == outs[1]


@pytest.mark.parametrize(
    "config_text, mode",
    [("{bad", "unified"), ('{"geometry": {"hidden": 8}}', "unified"), ('{"typo_key": 1}', "unified"), ("{}", "sideways")],
)
def test_cli_invalid_input_exits_1(small_run, config_text, mode, capsys):
    tmp, trace, config = small_run
    config.write_text(config_text)
    assert cli.main(["run", "--trace", str(trace), "--config", str(config), "--mode", mode, "--out", str(tmp / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_cli_rejects_trace_needing_more_adapters(small_run):
    tmp, trace, config = small_run
    config.write_text('{"num_adapters": 2}')
    assert cli.main(["run", "--trace", str(trace), "--config", str(config), "--out", str(tmp / "o")]) == 1
    assert cli.main(["run", "--trace", str(tmp / "missing.jsonl"), "--config", str(config), "--out", str(tmp / "o")]) == 1


def test_cli_gen_trace_bad_args_exit_1(tmp_path):
    assert cli.main(["gen-trace", "--pattern", "react", "--workflows", "0", "--out", str(tmp_path / "t")]) == 1


def test_verify_exit_codes(monkeypatch, capsys):
    assert cli.main(["verify", "--suite", "memory"]) == 0
    assert "[PASS]" in capsys.readouterr().out
    monkeypatch.setattr(cli, "run_suites", lambda name: [SuiteResult("stub", cases=3, failures=[1])])
    assert cli.main(["verify", "--suite", "memory"]) == 2
    assert "[FAIL] stub" in capsys.readouterr().out
