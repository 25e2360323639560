from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from embodied_augment.core import ActionRecord, Observation
from embodied_augment.templates import (
    PLACEHOLDERS,
    CognitiveDimension,
    EmptyInstruction,
    NoObservations,
    UnknownDimension,
    render_enhancement_prompt,
    render_reasoning_prompt,
    render_self_directed_prompt,
    render_verification_prompt,
)

GOLDEN = Path(__file__).parent / "golden"
PROBE = "Put a mug in the cabinet."
PROBE_ENHANCED = "Place the white ceramic mug inside the wooden cabinet."
OBS = Observation("symbolic_text", "You are at the countertop.", 1)


def golden(name: str) -> str:
    return (GOLDEN / f"{name}.txt").read_bytes().decode("utf-8")


def rendered(name: str) -> str:
    if name in {d.value for d in CognitiveDimension}:
        return render_enhancement_prompt(name, PROBE, OBS).text() + "\n"
    if name == "verify":
        return render_verification_prompt(PROBE, PROBE_ENHANCED, [OBS, OBS]).text() + "\n"
    if name == "reason":
        history = [("The mug sits on the countertop, so I walk there first.", ActionRecord("goto", "countertop"))]
        return render_reasoning_prompt(PROBE_ENHANCED, OBS, ActionRecord("pickup", "mug"), history).text() + "\n"
    return render_self_directed_prompt(PROBE, OBS).text() + "\n"


@pytest.mark.parametrize("name", ["visual", "spatial", "functional", "syntactic", "verify", "reason", "self_directed"])
def test_golden(name):
    assert rendered(name) == golden(name)


def test_visual_example_and_instruction():
    p = render_enhancement_prompt(CognitiveDimension.VISUAL, "Put a knife in a container", OBS)
    assert "20cm silver chef knife" in p.text()
    assert "Original: Put a knife in a container\nEnhanced:" in p.text()
    assert len(p.image_slots) == 1 and p.image_slots[0].observation == OBS


def test_syntactic_lettuce_exemplar():
    p = render_enhancement_prompt("Syntactic", "Put washed lettuce in the refrigerator", OBS)
    assert "There's a lettuce in the sink" in p.text()


def test_empty_instruction_rejected():
    with pytest.raises(EmptyInstruction):
        render_enhancement_prompt("spatial", "", OBS)
    with pytest.raises(EmptyInstruction):
        render_self_directed_prompt("   ")


def test_unknown_dimension():
    with pytest.raises(UnknownDimension):
        render_enhancement_prompt("olfactory", PROBE, OBS)


def test_verification_slots():
    obs = [Observation("symbolic_text", f"o{i}", i) for i in range(1, 4)]
    p = render_verification_prompt(
        "Put a knife in a container", "Insert an object commonly used for cutting...", obs
    )
    assert [s.observation for s in p.image_slots] == obs
    assert p.text().count("[IMAGES]") == 1


def test_verification_identical_strings_ok():
    assert render_verification_prompt(PROBE, PROBE, [OBS]).text()


def test_verification_needs_observations():
    with pytest.raises(NoObservations):
        render_verification_prompt(PROBE, PROBE_ENHANCED, [])


def test_reasoning_empty_history_sentinel():
    text = render_reasoning_prompt(PROBE, OBS, ActionRecord("goto", "countertop"), []).text()
    assert "Previous actions and reasoning:\n(none)\n" in text


def test_reasoning_two_history_entries():
    history = [("r1", ActionRecord("goto", "a")), ("r2", ActionRecord("pickup", "b"))]
    text = render_reasoning_prompt(PROBE, OBS, ActionRecord("put", "c"), history).text()
    assert "Action 1: goto(a)\nReasoning 1: r1\nAction 2: pickup(b)\nReasoning 2: r2" in text
    assert "Action 3" not in text
    for line in (
        "1. What the agent observes in the environment",
        "2. How this relates to the instruction",
        "3. Why this specific action is appropriate at this step",
        "4. How this action contributes to the overall task goal",
    ):
        assert line in text


def test_self_directed_has_no_dimension_names():
    text = render_self_directed_prompt(PROBE, OBS).text().lower()
    for d in CognitiveDimension:
        assert d.value not in text


def test_marker_in_user_text_does_not_move_slots():
    p = render_verification_prompt("move [IMAGES] here", PROBE_ENHANCED, [OBS])
    assert len(p.image_slots) == 1
    head = p.messages[0].parts[0]
    assert "move [IMAGES] here" in head


_text = st.text(min_size=1, max_size=60).filter(str.strip)


@given(_text, st.sampled_from(list(CognitiveDimension)))
def test_purity_and_placeholder_closure(instruction, dim):
    a = render_enhancement_prompt(dim, instruction, OBS)
    b = render_enhancement_prompt(dim, instruction, OBS)
    assert a == b
    template_part = a.text().replace(instruction, "")
    for name in PLACEHOLDERS:
        assert "{" + name not in template_part


@given(_text)
def test_self_directed_pure(instruction):
    assert render_self_directed_prompt(instruction).text() == render_self_directed_prompt(instruction).text()
