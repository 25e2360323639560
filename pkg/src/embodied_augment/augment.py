"""Instruction enhancement, consistency voting and stepwise reasoning synthesis."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .core import ActionRecord, Observation, Trajectory, format_action
from .gateway import BudgetExceeded, ChatRequest, Gateway, SamplingConfig
from .templates import (
    CognitiveDimension,
    PromptText,
    render_enhancement_prompt,
    render_reasoning_prompt,
    render_self_directed_prompt,
    render_verification_prompt,
)

logger = logging.getLogger(__name__)

ORIGINAL = "original"
SELF_DIRECTED = "self_directed"
DIMENSION_ORDER = (ORIGINAL, *(d.value for d in CognitiveDimension), SELF_DIRECTED)

N_VERIFIERS = 5
VOTE_THRESHOLD = 4
ENHANCED_CUE = "Enhanced:"
REASONING_CUE = "Reasoning:"

ACCEPTED = "accepted"
DROPPED = "dropped"


class ExtractionFailure(ValueError):
    pass


def dimension_rank(dimension: str) -> int:
    return DIMENSION_ORDER.index(dimension)


def instruction_key(task_id: str, dimension: str, variant: int = 0) -> tuple[str, int, int]:
    return (task_id, dimension_rank(dimension), variant)


def extract_after_cue(reply: str, cue: str) -> str:
    """Text after the last ``cue`` in ``reply``, trimmed; one pair of wrapping quotes is dropped."""
    head, sep, tail = reply.rpartition(cue)
    if not sep:
        raise ExtractionFailure(f"reply has no {cue!r} cue")
    text = tail.strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        text = text[1:-1].strip()
    if not text:
        raise ExtractionFailure(f"nothing after {cue!r}")
    return text


def parse_vote(reply: str) -> bool:
    return reply.strip().casefold().startswith("yes")


def votes_pass(votes: Sequence[bool]) -> bool:
    if len(votes) != N_VERIFIERS:
        raise ValueError(f"expected {N_VERIFIERS} votes, got {len(votes)}")
    return sum(bool(v) for v in votes) >= VOTE_THRESHOLD


@dataclass(frozen=True)
class VerificationRecord:
    votes: tuple[bool, ...]
    passed: bool
    raw_replies: tuple[str, ...]
    errors: tuple[str | None, ...] = (None,) * N_VERIFIERS

    @classmethod
    def from_replies(cls, replies: Sequence[str | None], errors: Sequence[str | None] = ()) -> "VerificationRecord":
        errors = tuple(errors) or (None,) * len(replies)
        votes = tuple(r is not None and parse_vote(r) for r in replies)
        return cls(votes, votes_pass(votes), tuple(r or "" for r in replies), errors)

    def to_json(self) -> dict:
        return {
            "votes": list(self.votes),
            "passed": self.passed,
            "raw_replies": list(self.raw_replies),
            "errors": list(self.errors),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "VerificationRecord":
        return cls(tuple(doc["votes"]), doc["passed"], tuple(doc["raw_replies"]), tuple(doc.get("errors", ())))


@dataclass(frozen=True)
class EnhancedInstruction:
    source_task_id: str
    dimension: str
    text: str
    attempts: int
    verification: VerificationRecord | None
    status: str
    variant: int = 0
    candidates: tuple[str, ...] = ()

    def __post_init__(self):
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")
        if self.status == ACCEPTED and not (self.verification and self.verification.passed):
            raise ValueError("accepted instruction without a passing verification")

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED

    @property
    def key(self) -> tuple[str, int, int]:
        return instruction_key(self.source_task_id, self.dimension, self.variant)

    def to_json(self) -> dict:
        return {
            "source_task_id": self.source_task_id,
            "dimension": self.dimension,
            "variant": self.variant,
            "text": self.text,
            "attempts": self.attempts,
            "status": self.status,
            "verification": self.verification.to_json() if self.verification else None,
            "candidates": list(self.candidates),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EnhancedInstruction":
        ver = doc.get("verification")
        return cls(
            source_task_id=doc["source_task_id"],
            dimension=doc["dimension"],
            text=doc["text"],
            attempts=doc["attempts"],
            verification=VerificationRecord.from_json(ver) if ver else None,
            status=doc["status"],
            variant=doc.get("variant", 0),
            candidates=tuple(doc.get("candidates", ())),
        )


@dataclass(frozen=True)
class ReasoningEntry:
    step_index: int
    reasoning: str
    action: ActionRecord


@dataclass(frozen=True)
class ReasoningTrace:
    source_task_id: str
    dimension: str
    enhanced_text: str
    entries: tuple[ReasoningEntry, ...]
    complete: bool = True
    variant: int = 0

    @property
    def key(self) -> tuple[str, int, int]:
        return instruction_key(self.source_task_id, self.dimension, self.variant)

    def history(self) -> list[tuple[str, ActionRecord]]:
        return [(e.reasoning, e.action) for e in self.entries]

    def to_json(self) -> dict:
        return {
            "source_task_id": self.source_task_id,
            "dimension": self.dimension,
            "variant": self.variant,
            "enhanced_text": self.enhanced_text,
            "complete": self.complete,
            "entries": [
                {"step_index": e.step_index, "reasoning": e.reasoning, "action": e.action.to_json()}
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ReasoningTrace":
        entries = []
        for e in doc["entries"]:
            a = ActionRecord(e["action"]["name"], e["action"].get("argument"))
            entries.append(ReasoningEntry(e["step_index"], e["reasoning"], ActionRecord(a.name, a.argument, format_action(a))))
        return cls(
            source_task_id=doc["source_task_id"],
            dimension=doc["dimension"],
            enhanced_text=doc["enhanced_text"],
            entries=tuple(entries),
            complete=doc.get("complete", True),
            variant=doc.get("variant", 0),
        )


@dataclass
class Augmenter:
    """Runs teacher calls for one pipeline configuration.

    ``observation_stride`` thins the observations attached to verification
    prompts; ``max_observations`` caps them after thinning.
    """

    gateway: Gateway
    model_id: str = "teacher"
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    max_attempts: int = 3
    observation_stride: int = 1
    max_observations: int | None = None
    require_reasoning_cue: bool = True
    workers: int = 1
    max_in_flight: int = 5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.observation_stride < 1:
            raise ValueError("observation_stride must be >= 1")

    def _request(self, prompt: PromptText, purpose: str, ordinal: int = 1) -> ChatRequest:
        return ChatRequest(self.model_id, prompt, self.sampling, self.seed, purpose, ordinal)

    def _ask(self, prompt: PromptText, purpose: str, ordinal: int = 1) -> str:
        return self.gateway.cached_complete(self._request(prompt, purpose, ordinal)).text

    def verification_observations(self, t: Trajectory) -> list[Observation]:
        obs = list(t.observations)[:: self.observation_stride]
        if self.max_observations is not None:
            obs = obs[: self.max_observations]
        return obs

    # -- enhancement ---------------------------------------------------------

    def enhance_instruction(self, t: Trajectory, dim: CognitiveDimension | str, attempt: int = 1) -> str:
        prompt = render_enhancement_prompt(dim, t.instruction, t.final_observation)
        return extract_after_cue(self._ask(prompt, "enhance", attempt), ENHANCED_CUE)

    def verify_consistency(
        self, original: str, enhanced: str, observations: Sequence[Observation]
    ) -> VerificationRecord:
        prompt = render_verification_prompt(original, enhanced, observations)
        requests = [self._request(prompt, "verify", i) for i in range(1, N_VERIFIERS + 1)]
        slots = self.gateway.submit_batch(requests, min(self.max_in_flight, N_VERIFIERS))
        replies: list[str | None] = []
        errors: list[str | None] = []
        for slot in slots:
            if isinstance(slot.error, BudgetExceeded):
                raise slot.error
            if slot.error is not None:
                logger.warning("verification call failed, counted as No: %s", slot.error)
                replies.append(None)
                errors.append(f"{type(slot.error).__name__}: {slot.error}")
            else:
                replies.append(slot.response.text)
                errors.append(None)
        return VerificationRecord.from_replies(replies, errors)

    def _enhance_loop(self, t: Trajectory, dimension: str, generate, variant: int, max_attempts: int | None):
        max_attempts = self.max_attempts if max_attempts is None else max_attempts
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        observations = self.verification_observations(t)
        candidates: list[str] = []
        candidate = ""
        record = None
        for attempt in range(1, max_attempts + 1):
            try:
                candidate = generate(attempt)
            except ExtractionFailure as exc:
                logger.info("%s/%s attempt %d: %s", t.task_id, dimension, attempt, exc)
                record = None
                continue
            candidates.append(candidate)
            record = self.verify_consistency(t.instruction, candidate, observations)
            if record.passed:
                return EnhancedInstruction(
                    t.task_id, dimension, candidate, attempt, record, ACCEPTED, variant, tuple(candidates)
                )
        logger.info("%s/%s dropped after %d attempts", t.task_id, dimension, max_attempts)
        return EnhancedInstruction(
            t.task_id, dimension, candidate, max_attempts, record, DROPPED, variant, tuple(candidates)
        )

    def enhance_with_verification(
        self, t: Trajectory, dim: CognitiveDimension | str, max_attempts: int | None = None
    ) -> EnhancedInstruction:
        dim = CognitiveDimension.parse(dim)
        return self._enhance_loop(
            t, dim.value, lambda attempt: self.enhance_instruction(t, dim, attempt), 0, max_attempts
        )

    def self_directed_enhance(self, t: Trajectory, variants: int = 2) -> list[EnhancedInstruction]:
        if variants < 1:
            raise ValueError("variants must be >= 1")
        prompt = render_self_directed_prompt(t.instruction, t.final_observation)
        out = []
        for v in range(1, variants + 1):
            def generate(attempt: int, v: int = v) -> str:
                reply = self._ask(prompt, "self_directed", v * 100 + attempt)
                return extract_after_cue(reply, ENHANCED_CUE)

            out.append(self._enhance_loop(t, SELF_DIRECTED, generate, v, None))
        return out

    # -- reasoning -----------------------------------------------------------

    def _extract_reasoning(self, reply: str) -> str:
        if REASONING_CUE not in reply and not self.require_reasoning_cue:
            text = reply.strip()
            if text:
                return text
        return extract_after_cue(reply, REASONING_CUE)

    def generate_reasoning(
        self, t: Trajectory, enhanced: EnhancedInstruction | None = None, force: bool = False
    ) -> ReasoningTrace:
        """Per-step rationales for ``t`` under ``enhanced`` (the original instruction if None).

        Each step sees the accepted (reasoning, action) pairs of all earlier
        steps. A step whose reply cannot be parsed is retried once; a second
        failure ends the trace with ``complete=False``.
        """
        if enhanced is None:
            text, dimension, variant = t.instruction, ORIGINAL, 0
        else:
            if not enhanced.accepted and not force:
                raise ValueError(f"{enhanced.source_task_id}/{enhanced.dimension} is not accepted")
            text, dimension, variant = enhanced.text, enhanced.dimension, enhanced.variant
        entries: list[ReasoningEntry] = []
        history: list[tuple[str, ActionRecord]] = []
        for step in t.steps:
            prompt = render_reasoning_prompt(text, step.observation, step.action, history)
            reasoning = None
            for ordinal in (1, 2):
                try:
                    reasoning = self._extract_reasoning(self._ask(prompt, "reason", ordinal))
                    break
                except ExtractionFailure as exc:
                    logger.info("%s/%s step %d try %d: %s", t.task_id, dimension, step.index, ordinal, exc)
            if reasoning is None:
                logger.warning("%s/%s: reasoning incomplete at step %d", t.task_id, dimension, step.index)
                return ReasoningTrace(t.task_id, dimension, text, tuple(entries), False, variant)
            entries.append(ReasoningEntry(step.index, reasoning, step.action))
            history.append((reasoning, step.action))
        return ReasoningTrace(t.task_id, dimension, text, tuple(entries), True, variant)

    # -- corpus level --------------------------------------------------------

    def _map(self, fn, items: Sequence):
        if self.workers <= 1:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(pool.map(fn, items))

    def enhance_corpus(
        self,
        trajectories: Iterable[Trajectory],
        dims: Sequence[CognitiveDimension | str] = tuple(CognitiveDimension),
        self_directed_variants: int = 0,
    ) -> list[EnhancedInstruction]:
        dims = [CognitiveDimension.parse(d) for d in dims]

        def one(t: Trajectory) -> list[EnhancedInstruction]:
            out = [self.enhance_with_verification(t, d) for d in dims]
            if self_directed_variants:
                out.extend(self.self_directed_enhance(t, self_directed_variants))
            return out

        results = self._map(one, list(trajectories))
        return sorted((e for batch in results for e in batch), key=lambda e: e.key)

    def reason_corpus(
        self,
        trajectories: Iterable[Trajectory],
        enhanced: Iterable[EnhancedInstruction] = (),
        include_original: bool = True,
    ) -> list[ReasoningTrace]:
        by_task: dict[str, list[EnhancedInstruction]] = {}
        for e in enhanced:
            if e.accepted:
                by_task.setdefault(e.source_task_id, []).append(e)

        def one(t: Trajectory) -> list[ReasoningTrace]:
            out = [self.generate_reasoning(t)] if include_original else []
            out.extend(self.generate_reasoning(t, e) for e in sorted(by_task.get(t.task_id, ()), key=lambda e: e.key))
            return out

        results = self._map(one, list(trajectories))
        return sorted((r for batch in results for r in batch), key=lambda r: r.key)


def write_jsonl(path: str | Path, docs: Iterable[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, ensure_ascii=False, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    return path


def read_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_enhanced(out_dir: str | Path, items: Sequence[EnhancedInstruction]) -> tuple[Path, Path]:
    """Accepted items go to ``enhanced.jsonl``, dropped ones to ``dropped.jsonl``."""
    out = Path(out_dir)
    items = sorted(items, key=lambda e: e.key)
    kept = write_jsonl(out / "enhanced.jsonl", (e.to_json() for e in items if e.accepted))
    dropped = write_jsonl(out / "dropped.jsonl", (e.to_json() for e in items if not e.accepted))
    return kept, dropped


def load_enhanced(path: str | Path) -> list[EnhancedInstruction]:
    return [EnhancedInstruction.from_json(d) for d in read_jsonl(path)]


def write_traces(path: str | Path, traces: Sequence[ReasoningTrace]) -> Path:
    return write_jsonl(path, (t.to_json() for t in sorted(traces, key=lambda t: t.key)))


def load_traces(path: str | Path) -> list[ReasoningTrace]:
    return [ReasoningTrace.from_json(d) for d in read_jsonl(path)]
