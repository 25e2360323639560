"""Trajectory data model, corpus ingestion and validation.

A trajectory is one expert demonstration: an instruction plus ordered
(observation, action) steps. Corpora are stored as one JSON document per
trajectory; see ``docs/data_format.md`` for the schema.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

IMAGE_FILE = "image_file"
SYMBOLIC_TEXT = "symbolic_text"
OBSERVATION_KINDS = (IMAGE_FILE, SYMBOLIC_TEXT)

MANIFEST_NAME = "manifest.json"

# verb -> arity
ACTION_GRAMMAR: Mapping[str, int] = {
    "goto": 1,
    "pickup": 1,
    "put": 1,
    "open": 1,
    "close": 1,
    "toggle_on": 1,
    "toggle_off": 1,
    "slice": 1,
    "done": 0,
}


class Category(str, Enum):
    BASE = "Base"
    COMMON = "Common"
    COMPLEX = "Complex"
    VISUAL = "Visual"
    SPATIAL = "Spatial"
    LONG = "Long"

    @classmethod
    def parse(cls, value: str) -> "Category":
        for member in cls:
            if member.value.lower() == value.strip().lower():
                return member
        raise ValueError(f"unknown task category {value!r}")


CATEGORIES: tuple[Category, ...] = tuple(Category)


class CorpusError(Exception):
    """Base class for ingestion failures."""


class MissingPath(CorpusError):
    pass


class SchemaViolation(CorpusError):
    def __init__(self, file: str | Path, field: str, detail: str = ""):
        self.file = str(file)
        self.field = field
        self.detail = detail
        msg = f"{self.file}: invalid field {field!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DuplicateTaskId(CorpusError):
    def __init__(self, task_id: str, files: Sequence[str]):
        self.task_id = task_id
        self.files = tuple(files)
        super().__init__(f"task_id {task_id!r} appears in {', '.join(self.files)}")


class IndexOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class Observation:
    kind: str
    payload: str
    step_index: int = 0

    def to_json(self) -> dict:
        return {"kind": self.kind, "payload": self.payload}


@dataclass(frozen=True)
class ActionRecord:
    name: str
    argument: str | None = None
    raw_text: str = field(default="", compare=False)

    def __str__(self) -> str:
        return format_action(self)

    def to_json(self) -> dict:
        return {"name": self.name, "argument": self.argument}


def format_action(action: ActionRecord) -> str:
    """Canonical ``name(argument)`` form; zero-arity verbs render bare."""
    if action.argument is None:
        return action.name
    return f"{action.name}({action.argument})"


@dataclass(frozen=True)
class Step:
    index: int
    observation: Observation
    action: ActionRecord


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    instruction: str
    steps: tuple[Step, ...]
    scene_ref: str = ""
    category: Category | None = None

    @property
    def T(self) -> int:  # noqa: N802 - the usual name for horizon length
        return len(self.steps)

    @property
    def actions(self) -> tuple[ActionRecord, ...]:
        return tuple(s.action for s in self.steps)

    @property
    def observations(self) -> tuple[Observation, ...]:
        return tuple(s.observation for s in self.steps)

    @property
    def final_observation(self) -> Observation:
        return self.steps[-1].observation

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "category": self.category.value if self.category else None,
            "scene_ref": self.scene_ref,
            "steps": [
                {
                    "index": s.index,
                    "observation": s.observation.to_json(),
                    "action": s.action.to_json(),
                }
                for s in self.steps
            ],
        }


@dataclass(frozen=True)
class CorpusManifest:
    corpus_id: str
    trajectory_count: int
    action_grammar: tuple[tuple[str, int], ...]
    content_hash: str

    def to_json(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "trajectory_count": self.trajectory_count,
            "action_grammar": [[n, a] for n, a in self.action_grammar],
            "content_hash": self.content_hash,
        }


@dataclass(frozen=True)
class TrajectorySet:
    trajectories: tuple[Trajectory, ...]
    manifest: CorpusManifest

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, task_id: str) -> Trajectory:
        for t in self.trajectories:
            if t.task_id == task_id:
                return t
        raise KeyError(task_id)

    @property
    def grammar(self) -> dict[str, int]:
        return dict(self.manifest.action_grammar)


@dataclass
class ValidationReport:
    task_id: str
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def content_hash(trajectories: Sequence[Trajectory]) -> str:
    h = hashlib.sha256()
    for t in sorted(trajectories, key=lambda t: t.task_id):
        h.update(canonical_json(t.to_json()).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def make_trajectory_set(
    trajectories: Sequence[Trajectory],
    corpus_id: str = "corpus",
    grammar: Mapping[str, int] = ACTION_GRAMMAR,
) -> TrajectorySet:
    ordered = tuple(sorted(trajectories, key=lambda t: t.task_id))
    manifest = CorpusManifest(
        corpus_id=corpus_id,
        trajectory_count=len(ordered),
        action_grammar=tuple(sorted(grammar.items())),
        content_hash=content_hash(ordered),
    )
    return TrajectorySet(ordered, manifest)


def validate_trajectory(
    t: Trajectory, grammar: Mapping[str, int] = ACTION_GRAMMAR
) -> ValidationReport:
    """Collect every invariant violation of ``t``; never raises."""
    report = ValidationReport(t.task_id)
    v = report.violations
    if not t.task_id:
        v.append("empty task_id")
    if not t.instruction or not t.instruction.strip():
        v.append("empty instruction")
    if not t.steps:
        v.append("no steps")
    for expected, step in enumerate(t.steps, start=1):
        if step.index != expected:
            v.append(f"non-contiguous at {expected}")
            break
    for step in t.steps:
        obs = step.observation
        if obs.kind not in OBSERVATION_KINDS:
            v.append(f"step {step.index}: unknown observation kind {obs.kind!r}")
        elif not obs.payload or not obs.payload.strip():
            v.append(f"step {step.index}: empty observation payload")
        act = step.action
        if act.name not in grammar:
            v.append(f"step {step.index}: action {act.name!r} not in grammar")
            continue
        arity = grammar[act.name]
        if arity == 0 and act.argument is not None:
            v.append(f"step {step.index}: action {act.name!r} takes no argument")
        if arity == 1 and not act.argument:
            v.append(f"step {step.index}: action {act.name!r} requires an argument")
    return report


def observation_history(t: Trajectory, upto: int) -> list[Observation]:
    """Observations o_1..o_upto in step order."""
    if not 1 <= upto <= len(t.steps):
        raise IndexOutOfRange(f"upto={upto} outside 1..{len(t.steps)}")
    return [s.observation for s in t.steps[:upto]]


def _require(doc: Mapping, key: str, types, file: Path, where: str = ""):
    label = f"{where}{key}"
    if key not in doc:
        raise SchemaViolation(file, label, "missing")
    value = doc[key]
    if not isinstance(value, types):
        raise SchemaViolation(file, label, f"expected {types}, got {type(value).__name__}")
    return value


def parse_trajectory(doc: Mapping, file: Path | str = "<memory>") -> Trajectory:
    """Build a :class:`Trajectory` from one schema document."""
    file = Path(file)
    if not isinstance(doc, Mapping):
        raise SchemaViolation(file, "<root>", "expected an object")
    task_id = _require(doc, "task_id", str, file)
    instruction = _require(doc, "instruction", str, file)
    scene_ref = doc.get("scene_ref", "")
    if not isinstance(scene_ref, str):
        raise SchemaViolation(file, "scene_ref", "expected a string")
    raw_category = doc.get("category")
    category = None
    if raw_category is not None:
        try:
            category = Category.parse(raw_category)
        except (ValueError, AttributeError) as exc:
            raise SchemaViolation(file, "category", str(exc)) from None
    raw_steps = _require(doc, "steps", list, file)

    steps = []
    for pos, raw in enumerate(raw_steps, start=1):
        where = f"steps[{pos}]."
        if not isinstance(raw, Mapping):
            raise SchemaViolation(file, f"steps[{pos}]", "expected an object")
        index = raw.get("index", pos)
        if not isinstance(index, int) or isinstance(index, bool):
            raise SchemaViolation(file, where + "index", "expected an integer")
        where = f"steps[{index}]."
        obs_doc = _require(raw, "observation", Mapping, file, where)
        kind = _require(obs_doc, "kind", str, file, where + "observation.")
        payload = _require(obs_doc, "payload", str, file, where + "observation.")
        if kind not in OBSERVATION_KINDS:
            raise SchemaViolation(file, where + "observation.kind", f"unknown kind {kind!r}")
        if kind == IMAGE_FILE:
            path = Path(payload)
            if not path.is_absolute():
                path = (file.parent / path).resolve()
            if not path.is_file():
                raise SchemaViolation(file, where + "observation.payload", f"no such image {payload!r}")
            payload = str(path)
        act_doc = _require(raw, "action", Mapping, file, where)
        name = _require(act_doc, "name", str, file, where + "action.")
        argument = act_doc.get("argument")
        if argument is not None and not isinstance(argument, str):
            raise SchemaViolation(file, where + "action.argument", "expected a string or null")
        action = ActionRecord(name, argument)
        action = ActionRecord(name, argument, raw_text=format_action(action))
        steps.append(Step(index, Observation(kind, payload, index), action))

    return Trajectory(
        task_id=task_id,
        instruction=instruction,
        steps=tuple(steps),
        scene_ref=scene_ref,
        category=category,
    )


def _iter_documents(path: Path):
    if path.suffix == ".jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if line.strip():
                    try:
                        yield json.loads(line)
                    except json.JSONDecodeError as exc:
                        raise SchemaViolation(path, f"line {lineno}", str(exc)) from None
        return
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(path, "<root>", str(exc)) from None
    if isinstance(doc, list):
        yield from doc
    else:
        yield doc


def load_trajectories(
    path: str | Path,
    grammar: Mapping[str, int] = ACTION_GRAMMAR,
    corpus_id: str | None = None,
    strict: bool = True,
) -> TrajectorySet:
    """Load a directory of trajectory files (or a single ``.json``/``.jsonl`` file).

    With ``strict`` set, any invariant violation found by
    :func:`validate_trajectory` is raised as a :class:`SchemaViolation`.
    """
    path = Path(path)
    if not path.exists():
        raise MissingPath(str(path))
    if path.is_dir():
        files = sorted(
            p for p in path.iterdir()
            if p.suffix in (".json", ".jsonl") and p.name != MANIFEST_NAME and p.is_file()
        )
    else:
        files = [path]

    seen: dict[str, str] = {}
    trajectories = []
    for file in files:
        for doc in _iter_documents(file):
            t = parse_trajectory(doc, file)
            if t.task_id in seen:
                raise DuplicateTaskId(t.task_id, [seen[t.task_id], str(file)])
            seen[t.task_id] = str(file)
            if strict:
                report = validate_trajectory(t, grammar)
                if not report.ok:
                    raise SchemaViolation(file, "steps", "; ".join(report.violations))
            trajectories.append(t)
    tset = make_trajectory_set(trajectories, corpus_id or path.stem, grammar)
    logger.info("loaded %d trajectories from %s", len(tset), path)
    return tset


def dump_trajectories(tset: TrajectorySet, out_dir: str | Path) -> Path:
    """Write one ``<task_id>.json`` per trajectory plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in tset:
        text = json.dumps(t.to_json(), indent=2, ensure_ascii=False, sort_keys=True)
        (out / f"{t.task_id}.json").write_text(text + "\n", encoding="utf-8")
    manifest = json.dumps(tset.manifest.to_json(), indent=2, sort_keys=True)
    (out / MANIFEST_NAME).write_text(manifest + "\n", encoding="utf-8")
    return out
