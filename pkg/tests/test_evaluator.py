import json
import statistics

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from embodied_augment.core import ActionRecord
from embodied_augment.evaluator import (
    CATEGORIES,
    DONE_EMITTED,
    ERROR,
    PARSE_LIMIT,
    ActionParseError,
    AgentBinding,
    EpisodeResult,
    MissingCategory,
    REFERENCE_ROWS,
    ScriptedBackend,
    audit_log,
    audit_request,
    build_report,
    evaluate_scenarios,
    mean_sr,
    parse_action,
    request_record,
    run_episode,
    std_erratum,
    std_metric,
    std_metric_sample,
    success_rate,
    write_audit,
)
from embodied_augment.gateway import Gateway, GatewayError, MockBackend
from embodied_augment.miniworld import MiniWorldEnv, find_scenario, oracle_plan


class FixedReply:
    is_network = False
    backend_id = "fixed"

    def __init__(self, text):
        self.text = text

    def complete(self, request):
        return self.text, 1


class Broken(FixedReply):
    def complete(self, request):
        raise GatewayError("endpoint gone")


def agent(backend):
    return AgentBinding(Gateway(backend))


def mp_pstdev(values):
    values = [mpmath.mpf(v) for v in values]
    mu = mpmath.fsum(values) / len(values)
    return mpmath.sqrt(mpmath.fsum((v - mu) ** 2 for v in values) / len(values))


# -- parsing -----------------------------------------------------------------


def test_last_action_line_wins():
    text = "Reasoning: first goto.\nAction: goto(sink)\nOn second thought\nAction: pickup(apple)."
    assert parse_action(text) == ActionRecord("pickup", "apple")


@pytest.mark.parametrize(
    "text,reason",
    [
        ("I will walk over there.", "no_action_line"),
        ("Action: fly(kitchen)", "unknown_verb"),
        ("Action: goto()", "malformed_args"),
        ("Action: goto(a, b)", "malformed_args"),
        ("Action: done(now)", "malformed_args"),
        ("Action: pickup", "malformed_args"),
    ],
)
def test_parse_failures(text, reason):
    with pytest.raises(ActionParseError) as err:
        parse_action(text)
    assert err.value.reason == reason


def test_done_and_quotes():
    assert parse_action("Action: done") == ActionRecord("done", None)
    assert parse_action("Action: goto('fridge')") == ActionRecord("goto", "fridge")


# -- episodes ----------------------------------------------------------------


def test_unparseable_agent_hits_parse_limit():
    scenario = find_scenario("mug_to_cabinet")
    result = run_episode(agent(FixedReply("no idea")), MiniWorldEnv(scenario, 0), scenario.instruction, category="base")
    assert result.termination == PARSE_LIMIT and not result.success
    assert result.steps_taken == 5 and result.parse_failures == 5


def test_immediate_done_fails():
    scenario = find_scenario("mug_to_cabinet")
    result = run_episode(agent(FixedReply("Action: done")), MiniWorldEnv(scenario, 0), scenario.instruction)
    assert result.termination == DONE_EMITTED and result.steps_taken == 1 and not result.success


def test_gateway_error_ends_episode():
    scenario = find_scenario("mug_to_cabinet")
    result = run_episode(agent(Broken("")), MiniWorldEnv(scenario, 0), scenario.instruction)
    assert result.termination == ERROR and result.error.startswith("GatewayError")


def test_scripted_oracle_succeeds_and_requests_grow():
    scenario = find_scenario("mug_to_cabinet")
    plan = oracle_plan(scenario.scene, scenario.goal, 0)
    audit = []
    result = run_episode(
        agent(ScriptedBackend(plan)), MiniWorldEnv(scenario, 0), scenario.instruction, task_id="m", audit=audit
    )
    assert result.success and result.steps_taken == len(plan)
    assert [len(r["request"]["messages"][1]["parts"]) - 1 for r in audit] == list(range(1, len(plan) + 1))
    assert all(audit_request(r["request"]) == [] for r in audit)


def test_evaluate_scenarios_order_and_workers(scenarios):
    mock = agent(MockBackend())
    one = evaluate_scenarios(mock, scenarios[:4], seeds=(0, 1), max_steps=6)
    many = evaluate_scenarios(mock, scenarios[:4], seeds=(0, 1), max_steps=6, workers=4)
    assert [r.task_id for r in one] == [r.task_id for r in many]
    assert one == many


# -- metrics -----------------------------------------------------------------


def episode(category, success, i=0):
    return EpisodeResult(f"{category}-{i}", category, success, 1, (), 0, DONE_EMITTED)


def test_success_rate_examples():
    assert success_rate([episode("Base", i < 7, i) for i in range(10)]) == {"Base": 70.0}
    assert success_rate([]) == {}
    assert success_rate([episode("Long", i < 33, i) for i in range(50)])["Long"] == pytest.approx(66.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(CATEGORIES), st.booleans()), max_size=40), st.randoms())
def test_success_rate_permutation_invariant(items, rnd):
    results = [episode(c, s, i) for i, (c, s) in enumerate(items)]
    shuffled = list(results)
    rnd.shuffle(shuffled)
    assert success_rate(results) == success_rate(shuffled)


def test_std_uniform_is_zero():
    assert std_metric(dict.fromkeys(CATEGORIES, 50)) == 0


def test_std_gpt4o_against_oracle():
    sr = dict(zip(CATEGORIES, (64, 54, 68, 46, 52, 54)))
    value = std_metric(sr)
    assert value == pytest.approx(7.43, abs=0.01)
    assert abs(value - float(mp_pstdev(sr.values()))) < 1e-9
    assert std_metric_sample(sr) == pytest.approx(statistics.stdev(sr.values()))


_sr = st.lists(st.floats(0, 100, allow_nan=False), min_size=6, max_size=6)


@given(_sr, st.floats(-50, 50, allow_nan=False), st.floats(0, 5, allow_nan=False))
def test_std_translation_and_scale(values, shift, scale):
    base = std_metric(dict(zip(CATEGORIES, values)))
    moved = std_metric(dict(zip(CATEGORIES, [v + shift for v in values])))
    scaled = std_metric(dict(zip(CATEGORIES, [v * scale for v in values])))
    assert moved == pytest.approx(base, abs=1e-6)
    assert scaled == pytest.approx(base * scale, abs=1e-6)


def test_std_missing_category():
    sr = dict(zip(CATEGORIES[:5], (1, 2, 3, 4, 5)))
    with pytest.raises(MissingCategory) as err:
        std_metric(sr)
    assert err.value.missing == ("Long",)


def test_reference_means_and_curriculum_row():
    # One published row's Avg disagrees with its own category values (27.33 vs 23.3).
    bad = [m for _, m, avg, _, v in REFERENCE_ROWS if abs(mean_sr(dict(zip(CATEGORIES, v))) - avg) > 0.05]
    assert bad == ["InternVL2.5-38B"]
    assert [r["model"] for r in std_erratum() if not r["matches_avg"]] == bad
    qwen = REFERENCE_ROWS[-1]
    assert mean_sr(dict(zip(CATEGORIES, qwen[4]))) == pytest.approx(62.67, abs=0.005)


def test_erratum_flags_gpt4o():
    rows = {(r["group"], r["model"]): r for r in std_erratum()}
    gpt = rows[("proprietary_open_loop", "GPT-4o")]
    assert gpt["std_population"] == pytest.approx(7.4312, abs=1e-4)
    assert not gpt["matches_population"]
    assert rows[("proprietary_open_loop", "Gemini-2.0-flash")]["matches_population"]
    assert len(rows) == len(REFERENCE_ROWS)


# -- reports and audit -------------------------------------------------------


def test_report_rerender_is_identical(tmp_path):
    results = [episode(c, i < 6, i) for i, c in enumerate(CATEGORIES * 2)]
    build_report(results, {"seed": 1}, tmp_path / "a")
    build_report(results, {"seed": 1}, tmp_path / "b")
    for name in ("report.json", "report.md"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    data = json.loads((tmp_path / "a" / "report.json").read_text())
    assert data["std"] == 0.0 and data["avg"] == 50.0


def test_report_missing_category(tmp_path):
    report = build_report([episode("Base", True)], {}, tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["std"] is None and data["categories"]["Long"] is None
    assert "n/a" in report.markdown()


def test_audit_detects_injected_field(tmp_path):
    scenario = find_scenario("mug_to_cabinet")
    a = agent(MockBackend())
    record = request_record(a.build_request(scenario.instruction, [MiniWorldEnv(scenario, 0).reset()]))
    assert audit_request(record) == []
    leaked = dict(record, task_success=False)
    assert audit_request(leaked)
    tampered = json.loads(json.dumps(record))
    tampered["messages"][1]["parts"][1]["payload"] += "\nProgress: 2 of 5 subgoals"
    assert audit_request(tampered)
    write_audit([{"task_id": "x", "step": 1, "request": tampered}], tmp_path / "requests.jsonl")
    summary = audit_log(tmp_path / "requests.jsonl")
    assert summary["requests"] == 1 and summary["privileged"] and not summary["history"]
