import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_corpus
from embodied_augment.augment import Augmenter
from embodied_augment.curriculum import (
    REASONING_OPEN,
    CurriculumStage,
    MissingTrace,
    STAGE_DIMENSIONS,
    build_ablation_variant,
    build_curriculum,
    build_stage,
    dataset_stats,
    emit_training_records,
    extrapolate_stats,
    partial_reasoning_steps,
    stage_dimensions,
)
from embodied_augment.evaluator import parse_action
from embodied_augment.gateway import Gateway, MockBackend


@pytest.fixture(scope="module")
def pipeline():
    corpus = make_corpus(10, T=4)
    aug = Augmenter(Gateway(MockBackend()))
    enhanced = aug.enhance_corpus(corpus)
    traces = aug.reason_corpus(corpus, enhanced)
    return corpus, enhanced, traces


def test_stage_counts(pipeline):
    corpus, enhanced, traces = pipeline
    assert len(build_stage(corpus, enhanced, traces, CurriculumStage.BASE)) == 10
    d2 = build_stage(corpus, enhanced, traces, 2)
    assert len(d2) == 20 and {r.dimension for r in d2} == {"visual", "spatial"}
    assert len(build_stage(corpus, enhanced, traces, 3)) == 20


def test_stage_partition():
    dims = [STAGE_DIMENSIONS[s] for s in CurriculumStage]
    assert frozenset().union(*dims) == {"original", "visual", "spatial", "functional", "syntactic"}
    assert sum(len(d) for d in dims) == 5


def test_cumulative_mode(pipeline):
    corpus, enhanced, traces = pipeline
    assert stage_dimensions(CurriculumStage.CONCEPTUAL, "cumulative") == frozenset(
        {"original", "visual", "spatial", "functional", "syntactic"}
    )
    assert len(build_stage(corpus, enhanced, traces, 3, "cumulative")) == 50
    with pytest.raises(ValueError):
        stage_dimensions(CurriculumStage.BASE, "shuffled")


def test_record_structure(pipeline):
    corpus, enhanced, traces = pipeline
    records = build_stage(corpus, enhanced, traces, 2)
    for r in records:
        t = next(c for c in corpus if c.task_id == r.source_task_id)
        turns = r.turns
        assert turns[0].role == "system" and not turns[0].loss_mask
        user = [x for x in turns if x.role == "user"]
        assistant = [x for x in turns if x.role == "assistant"]
        assert len(user) == len(assistant) == t.T
        assert all(a.loss_mask for a in assistant) and not any(u.loss_mask for u in user)
        assert user[0].parts[0] == f"Instruction: {r.instruction}"
        seen = []
        for step, u, a in zip(t.steps, user, assistant):
            obs = [p for p in u.parts if isinstance(p, dict)]
            seen += obs
            assert [o["step"] for o in seen] == list(range(1, step.index + 1))
            assert obs[0]["payload"] == step.observation.payload
            text = a.parts[0]
            assert text.startswith(REASONING_OPEN)
            assert parse_action(text) == step.action


def test_missing_trace(pipeline):
    corpus, enhanced, traces = pipeline
    without = [t for t in traces if not (t.source_task_id == "task_00" and t.dimension == "visual")]
    with pytest.raises(MissingTrace):
        build_stage(corpus, enhanced, without, 2)


def test_incomplete_trace_excluded(pipeline, caplog):
    corpus, enhanced, traces = pipeline
    from dataclasses import replace

    broken = [replace(t, complete=False) if (t.source_task_id, t.dimension) == ("task_01", "spatial") else t for t in traces]
    records = build_stage(corpus, enhanced, broken, 2)
    assert len(records) == 19
    assert "incomplete" in caplog.text


def test_emission(tmp_path, pipeline):
    corpus, enhanced, traces = pipeline
    bundle = build_curriculum(corpus, enhanced, traces)
    a = emit_training_records(bundle.files, tmp_path / "a")
    b = emit_training_records(bundle.files, tmp_path / "b")
    assert a == b
    assert [f.count for f in a.files] == [10, 20, 20]
    for f in a.files:
        assert (tmp_path / "a" / f.name).read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    line = json.loads((tmp_path / "a" / "stage_1.jsonl").read_text().splitlines()[0])
    assert line["record_id"] == "task_00:original" and line["stage"] == 1


def test_emit_empty(tmp_path):
    m = emit_training_records([], tmp_path)
    assert m.total == 0
    assert (tmp_path / "stage_1.jsonl").read_bytes() == b""
    assert json.loads((tmp_path / "emission_manifest.json").read_text())["total"] == 0


def test_emit_two_stages(tmp_path, pipeline):
    corpus, enhanced, traces = pipeline
    records = build_stage(corpus, enhanced, traces, 1) + build_stage(corpus, enhanced, traces, 2)
    m = emit_training_records(records, tmp_path)
    assert {f.name: f.count for f in m.files if f.count} == {"stage_1.jsonl": 10, "stage_2.jsonl": 20}


def test_ablation_variants(pipeline):
    corpus, enhanced, traces = pipeline
    vs = build_ablation_variant("visual_spatial_only", corpus, enhanced, traces)
    assert len(vs.records) == 30
    assert len(build_ablation_variant("basic_reasoning", corpus, enhanced, traces).records) == 10
    complete = build_ablation_variant("complete_reasoning", corpus, enhanced, traces)
    full = build_ablation_variant("full_curriculum", corpus, enhanced, traces)
    assert len(full.files) == 3
    untagged = sorted((r.with_stage(None) for r in full.records), key=lambda r: r.sort_key)
    assert untagged == sorted(complete.records, key=lambda r: r.sort_key)
    with pytest.raises(ValueError):
        build_ablation_variant("everything", corpus, enhanced, traces)


def test_partial_reasoning_half(pipeline):
    corpus, enhanced, traces = pipeline
    partial = build_ablation_variant("partial_reasoning", corpus, enhanced, traces, fraction=0.5, seed=0)
    for r in partial.records:
        blocks = [t for t in r.turns if t.role == "assistant" and t.parts[0].startswith(REASONING_OPEN)]
        assert len(blocks) == 2
    again = build_ablation_variant("partial_reasoning", corpus, enhanced, traces, fraction=0.5, seed=0)
    assert again.records == partial.records


@given(st.integers(1, 40), st.floats(0, 1), st.integers(0, 10))
def test_partial_steps_size(T, fraction, seed):
    chosen = partial_reasoning_steps("r", T, fraction, seed)
    assert len(chosen) == int(fraction * T + 0.5)
    assert chosen <= set(range(1, T + 1))


def test_stats_small(pipeline):
    corpus, enhanced, _ = pipeline
    from dataclasses import replace

    from embodied_augment.augment import DROPPED

    modified = [replace(e, status=DROPPED) if (e.source_task_id, e.dimension) == ("task_03", "visual") else e for e in enhanced]
    report = dataset_stats(corpus, modified)
    assert report.accepted["visual"] == 9 and report.dropped["visual"] == 1
    assert report.total_enhanced == 39


def test_stats_empty():
    report = dataset_stats(0)
    assert report.trajectories == 0 and report.total_enhanced == 0 and report.notes == []


def test_extrapolation_full_scale():
    report = extrapolate_stats(16_145)
    for d in ("visual", "spatial", "functional", "syntactic"):
        assert report.accepted[d] == 16_145
    assert report.total_self_directed == 32_290
    assert report.total_stage_records == 80_725
    assert any("80,875" in n and "80,725" in n for n in report.notes)


@settings(max_examples=5, deadline=None)
@given(st.integers(1, 6))
def test_extrapolation_matches_real_run(n):
    corpus = make_corpus(n, T=2)
    aug = Augmenter(Gateway(MockBackend()))
    enhanced = aug.enhance_corpus(corpus)
    bundle = build_curriculum(corpus, enhanced, aug.reason_corpus(corpus, enhanced))
    real = dataset_stats(corpus, enhanced, [bundle])
    predicted = extrapolate_stats(n, self_directed_variants=0)
    assert real.stage_records == predicted.stage_records
    assert real.accepted == predicted.accepted
