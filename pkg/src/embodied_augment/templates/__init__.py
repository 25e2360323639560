"""Prompt templates for enhancement, verification and reasoning generation.

Template wording lives in the ``*.txt`` files next to this module so it can be
diffed and reviewed as data. Rendering is a pure function of its inputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from typing import Sequence, Union

from ..core import ActionRecord, Observation, format_action

PLACEHOLDERS = (
    "human_instruction",
    "original_instruction",
    "enhanced_instruction",
    "action",
    "previous_actions_and_reasoning",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")

IMAGES_MARKER = "[IMAGES]"
IMAGE_MARKER = "[IMAGE]"
EMPTY_HISTORY = "(none)"


class CognitiveDimension(str, Enum):
    VISUAL = "visual"
    SPATIAL = "spatial"
    FUNCTIONAL = "functional"
    SYNTACTIC = "syntactic"

    @classmethod
    def parse(cls, value: "str | CognitiveDimension") -> "CognitiveDimension":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise UnknownDimension(value) from None


class TemplateError(ValueError):
    pass


class EmptyInstruction(TemplateError):
    pass


class NoObservations(TemplateError):
    pass


class UnknownDimension(TemplateError):
    pass


@dataclass(frozen=True)
class ImageSlot:
    """An observation attached to a prompt.

    ``marker`` is what the slot looks like in the flattened text view; a run
    of adjacent slots with the same marker shows it once.
    """

    observation: Observation
    marker: str = ""


Part = Union[str, ImageSlot]


@dataclass(frozen=True)
class Message:
    role: str
    parts: tuple[Part, ...]

    def text(self) -> str:
        out: list[str] = []
        previous: Part | None = None
        for part in self.parts:
            if isinstance(part, ImageSlot):
                if not (isinstance(previous, ImageSlot) and previous.marker == part.marker):
                    out.append(part.marker)
            else:
                out.append(part)
            previous = part
        return "".join(out)


@dataclass(frozen=True)
class PromptText:
    template_id: str
    messages: tuple[Message, ...]
    substitutions: tuple[tuple[str, str], ...] = ()

    def text(self) -> str:
        return "\n\n".join(m.text() for m in self.messages)

    @property
    def image_slots(self) -> list[ImageSlot]:
        return [p for m in self.messages for p in m.parts if isinstance(p, ImageSlot)]

    def substitution(self, name: str, default: str | None = None) -> str | None:
        return dict(self.substitutions).get(name, default)

    def to_json(self) -> dict:
        """Canonical, JSON-safe form (used for cache keys and audit logs)."""
        messages = []
        for m in self.messages:
            parts = []
            for p in m.parts:
                if isinstance(p, ImageSlot):
                    parts.append({
                        "type": "observation",
                        "kind": p.observation.kind,
                        "payload": p.observation.payload,
                    })
                else:
                    parts.append({"type": "text", "text": p})
            messages.append({"role": m.role, "parts": parts})
        return {"template_id": self.template_id, "messages": messages}


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    """Raw template text with the file's trailing newline removed."""
    try:
        text = resources.files(__name__).joinpath(f"{template_id}.txt").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise TemplateError(f"no template named {template_id!r}") from None
    return text[:-1] if text.endswith("\n") else text


def _substitute(segment: str, values: dict[str, str]) -> str:
    def repl(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise TemplateError(f"placeholder {{{name}}} left unbound")
        return values[name]

    return _PLACEHOLDER_RE.sub(repl, segment)


def _render(
    template_id: str,
    values: dict[str, str],
    images: Sequence[Observation] = (),
    marker: str | None = None,
) -> PromptText:
    # Split on the image marker before substituting, so user text that
    # happens to contain a marker cannot move the image slots.
    template = load_template(template_id)
    parts: list[Part] = []
    if marker is None:
        parts.extend(ImageSlot(o) for o in images)
        parts.append(_substitute(template, values))
    else:
        head, sep, tail = template.partition(marker)
        if not sep:
            raise TemplateError(f"template {template_id!r} has no {marker} marker")
        parts.append(_substitute(head, values))
        parts.extend(ImageSlot(o, marker) for o in images)
        parts.append(_substitute(tail, values))
    return PromptText(
        template_id=template_id,
        messages=(Message("user", tuple(p for p in parts if p != "")),),
        substitutions=tuple(sorted(values.items())),
    )


def _require_text(value: str, what: str) -> None:
    if not isinstance(value, str) or not value.strip():
        raise EmptyInstruction(f"{what} is empty")


def render_enhancement_prompt(
    dim: "CognitiveDimension | str", instruction: str, final_observation: Observation
) -> PromptText:
    dim = CognitiveDimension.parse(dim)
    _require_text(instruction, "instruction")
    return _render(dim.value, {"human_instruction": instruction}, [final_observation])


def render_verification_prompt(
    original: str, enhanced: str, observations: Sequence[Observation]
) -> PromptText:
    _require_text(original, "original instruction")
    _require_text(enhanced, "enhanced instruction")
    if not observations:
        raise NoObservations("verification needs at least one observation")
    values = {"original_instruction": original, "enhanced_instruction": enhanced}
    return _render("verify", values, list(observations), IMAGES_MARKER)


def format_history(history: Sequence[tuple[str, ActionRecord]]) -> str:
    if not history:
        return EMPTY_HISTORY
    lines = []
    for i, (reasoning, action) in enumerate(history, start=1):
        lines.append(f"Action {i}: {format_action(action)}")
        lines.append(f"Reasoning {i}: {reasoning}")
    return "\n".join(lines)


def render_reasoning_prompt(
    enhanced: str,
    current_obs: Observation,
    current_action: ActionRecord,
    history: Sequence[tuple[str, ActionRecord]] = (),
) -> PromptText:
    """Reasoning prompt for one step; ``history`` holds (reasoning, action) for steps 1..t-1."""
    _require_text(enhanced, "instruction")
    for reasoning, _ in history:
        _require_text(reasoning, "history reasoning")
    values = {
        "enhanced_instruction": enhanced,
        "action": format_action(current_action),
        "previous_actions_and_reasoning": format_history(history),
    }
    return _render("reason", values, [current_obs], IMAGE_MARKER)


def render_self_directed_prompt(
    instruction: str, final_observation: Observation | None = None
) -> PromptText:
    _require_text(instruction, "instruction")
    images = [final_observation] if final_observation is not None else []
    return _render("self_directed", {"human_instruction": instruction}, images)


__all__ = [
    "CognitiveDimension",
    "EmptyInstruction",
    "ImageSlot",
    "Message",
    "NoObservations",
    "PromptText",
    "TemplateError",
    "UnknownDimension",
    "format_history",
    "load_template",
    "render_enhancement_prompt",
    "render_reasoning_prompt",
    "render_self_directed_prompt",
    "render_verification_prompt",
]
