"""Staged multi-turn training records, ablation bundles and corpus statistics."""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .augment import (
    DIMENSION_ORDER,
    ORIGINAL,
    SELF_DIRECTED,
    EnhancedInstruction,
    ReasoningTrace,
    dimension_rank,
    instruction_key,
)
from .core import ACTION_GRAMMAR, Trajectory, format_action
from .templates import CognitiveDimension

logger = logging.getLogger(__name__)

# Published corpus sizes used for full-scale cross-checks.
ALFRED_TRAJECTORIES = 16_145
REPORTED_ENHANCED_PAIRS = 80_875
REPORTED_SELF_DIRECTED = 32_290

GRAMMAR_REF = "embodied-augment/actions-v1"
REASONING_OPEN = "<reasoning>"
REASONING_CLOSE = "</reasoning>"

SYSTEM_PROMPT = (
    "You are a household robot. You receive a task instruction and your egocentric "
    "observations so far, one per turn. Reply with your reasoning inside "
    f"{REASONING_OPEN}...{REASONING_CLOSE} and then exactly one line of the form "
    "'Action: name(argument)'. Available actions: "
    + ", ".join(f"{n}(x)" if a else n for n, a in ACTION_GRAMMAR.items())
    + "."
)


class CurriculumStage(int, Enum):
    BASE = 1
    ENVIRONMENTAL = 2
    CONCEPTUAL = 3

    @property
    def dimensions(self) -> frozenset[str]:
        return STAGE_DIMENSIONS[self]


STAGE_DIMENSIONS: dict[CurriculumStage, frozenset[str]] = {
    CurriculumStage.BASE: frozenset({ORIGINAL}),
    CurriculumStage.ENVIRONMENTAL: frozenset({CognitiveDimension.VISUAL.value, CognitiveDimension.SPATIAL.value}),
    CurriculumStage.CONCEPTUAL: frozenset({CognitiveDimension.FUNCTIONAL.value, CognitiveDimension.SYNTACTIC.value}),
}

ABLATION_VARIANTS = (
    "basic_reasoning",
    "visual_spatial_only",
    "partial_reasoning",
    "complete_reasoning",
    "full_curriculum",
)


class MissingTrace(LookupError):
    def __init__(self, task_id: str, dimension: str, variant: int = 0):
        self.task_id = task_id
        self.dimension = dimension
        self.variant = variant
        super().__init__(f"no reasoning trace for {task_id}/{dimension}")


@dataclass(frozen=True)
class Turn:
    role: str
    parts: tuple  # str or {"observation": {...}}
    loss_mask: bool = False

    def to_json(self) -> dict:
        parts = [{"type": "text", "text": p} if isinstance(p, str) else p for p in self.parts]
        return {"role": self.role, "parts": parts, "loss_mask": self.loss_mask}


@dataclass(frozen=True)
class TrainingRecord:
    record_id: str
    stage: int | None
    source_task_id: str
    dimension: str
    instruction: str
    turns: tuple[Turn, ...]
    variant: int = 0
    action_grammar_ref: str = GRAMMAR_REF

    @property
    def sort_key(self):
        return instruction_key(self.source_task_id, self.dimension, self.variant)

    def with_stage(self, stage: int | None) -> "TrainingRecord":
        return TrainingRecord(
            self.record_id, stage, self.source_task_id, self.dimension,
            self.instruction, self.turns, self.variant, self.action_grammar_ref,
        )

    def to_json(self) -> dict:
        return {
            "record_id": self.record_id,
            "stage": self.stage,
            "source_task_id": self.source_task_id,
            "dimension": self.dimension,
            "variant": self.variant,
            "instruction": self.instruction,
            "action_grammar_ref": self.action_grammar_ref,
            "turns": [t.to_json() for t in self.turns],
        }


def record_id(task_id: str, dimension: str, variant: int = 0) -> str:
    return f"{task_id}:{dimension}" if not variant else f"{task_id}:{dimension}.{variant}"


def assistant_text(action, reasoning: str | None) -> str:
    line = f"Action: {format_action(action)}"
    if reasoning is None:
        return line
    return f"{REASONING_OPEN}\n{reasoning}\n{REASONING_CLOSE}\n{line}"


def _observation_part(obs) -> dict:
    return {"type": "observation", "step": obs.step_index, "kind": obs.kind, "payload": obs.payload}


def build_record(
    t: Trajectory,
    dimension: str,
    instruction: str,
    trace: ReasoningTrace | None,
    stage: int | None,
    variant: int = 0,
    reasoning_steps: frozenset[int] | None = None,
) -> TrainingRecord:
    """One multi-turn record: system, then a (user o_t, assistant r_t + a_t) pair per step.

    ``reasoning_steps`` restricts which step indices carry a reasoning block;
    None means all of them (or none when ``trace`` is None).
    """
    turns = [Turn("system", (SYSTEM_PROMPT,), False)]
    for pos, step in enumerate(t.steps):
        parts: tuple = (_observation_part(step.observation),)
        if pos == 0:
            parts = (f"Instruction: {instruction}",) + parts
        turns.append(Turn("user", parts, False))
        reasoning = None
        if trace is not None and (reasoning_steps is None or step.index in reasoning_steps):
            reasoning = trace.entries[pos].reasoning
        turns.append(Turn("assistant", (assistant_text(step.action, reasoning),), True))
    return TrainingRecord(
        record_id(t.task_id, dimension, variant), stage, t.task_id, dimension, instruction, tuple(turns), variant
    )


@dataclass
class _Inputs:
    corpus: Mapping[str, Trajectory]
    enhanced: dict[tuple, EnhancedInstruction]
    traces: dict[tuple, ReasoningTrace]

    @classmethod
    def of(cls, corpus, enhanced, traces) -> "_Inputs":
        return cls(
            {t.task_id: t for t in corpus},
            {e.key: e for e in enhanced if e.accepted},
            {r.key: r for r in traces},
        )

    def instances(self, dimensions: Iterable[str]):
        """(trajectory, dimension, variant, instruction text) in emission order."""
        dimensions = set(dimensions)
        out = []
        if ORIGINAL in dimensions:
            for t in self.corpus.values():
                out.append((t, ORIGINAL, 0, t.instruction))
        for key, e in self.enhanced.items():
            if e.dimension in dimensions and e.source_task_id in self.corpus:
                out.append((self.corpus[e.source_task_id], e.dimension, e.variant, e.text))
        out.sort(key=lambda x: instruction_key(x[0].task_id, x[1], x[2]))
        return out

    def trace_for(self, t: Trajectory, dimension: str, variant: int) -> ReasoningTrace | None:
        """The complete trace, None if incomplete; raises when absent."""
        trace = self.traces.get(instruction_key(t.task_id, dimension, variant))
        if trace is None:
            raise MissingTrace(t.task_id, dimension, variant)
        if not trace.complete or len(trace.entries) != len(t.steps):
            logger.warning("excluding %s/%s: reasoning trace incomplete", t.task_id, dimension)
            return None
        return trace


def build_records(
    corpus: Iterable[Trajectory],
    enhanced: Iterable[EnhancedInstruction],
    traces: Iterable[ReasoningTrace],
    dimensions: Iterable[str],
    stage: int | None = None,
    reasoning: bool = True,
    reasoning_fraction: float | None = None,
    seed: int = 0,
) -> list[TrainingRecord]:
    inputs = _Inputs.of(corpus, enhanced, traces)
    records = []
    for t, dim, variant, text in inputs.instances(dimensions):
        trace = None
        if reasoning:
            trace = inputs.trace_for(t, dim, variant)
            if trace is None:
                continue
        steps = None
        if trace is not None and reasoning_fraction is not None:
            steps = partial_reasoning_steps(record_id(t.task_id, dim, variant), len(t.steps), reasoning_fraction, seed)
        records.append(build_record(t, dim, text, trace, stage, variant, steps))
    return records


def partial_reasoning_steps(rid: str, T: int, fraction: float, seed: int = 0) -> frozenset[int]:
    """Deterministic choice of round(fraction * T) step indices for record ``rid``."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    k = int(fraction * T + 0.5)
    rng = random.Random(f"{seed}:{rid}")
    return frozenset(i + 1 for i in rng.sample(range(T), k))


def stage_dimensions(stage: CurriculumStage, mode: str = "disjoint") -> frozenset[str]:
    if mode == "disjoint":
        return stage.dimensions
    if mode == "cumulative":
        return frozenset().union(*(s.dimensions for s in CurriculumStage if s <= stage))
    raise ValueError(f"unknown curriculum mode {mode!r}")


def build_stage(
    corpus: Iterable[Trajectory],
    enhanced: Iterable[EnhancedInstruction],
    traces: Iterable[ReasoningTrace],
    stage: CurriculumStage | int,
    mode: str = "disjoint",
) -> list[TrainingRecord]:
    stage = CurriculumStage(stage)
    records = build_records(corpus, enhanced, traces, stage_dimensions(stage, mode), int(stage))
    if not records:
        logger.warning("stage %d is empty", int(stage))
    return records


@dataclass
class DatasetBundle:
    """Named group of record files; ``files`` maps file name to its records."""

    name: str
    files: dict[str, list[TrainingRecord]] = field(default_factory=dict)

    @property
    def records(self) -> list[TrainingRecord]:
        return [r for recs in self.files.values() for r in recs]


def build_curriculum(corpus, enhanced, traces, mode: str = "disjoint") -> DatasetBundle:
    corpus, enhanced, traces = list(corpus), list(enhanced), list(traces)
    files = {
        f"stage_{int(s)}.jsonl": build_stage(corpus, enhanced, traces, s, mode) for s in CurriculumStage
    }
    return DatasetBundle("curriculum", files)


ALL_EXPLICIT = frozenset({ORIGINAL, *(d.value for d in CognitiveDimension)})


def build_ablation_variant(
    variant: str,
    corpus: Iterable[Trajectory],
    enhanced: Iterable[EnhancedInstruction] = (),
    traces: Iterable[ReasoningTrace] = (),
    fraction: float = 0.5,
    seed: int = 0,
) -> DatasetBundle:
    corpus, enhanced, traces = list(corpus), list(enhanced), list(traces)
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    name = f"ablation_{variant}.jsonl"
    if variant == "basic_reasoning":
        records = build_records(corpus, enhanced, traces, {ORIGINAL})
    elif variant == "visual_spatial_only":
        dims = STAGE_DIMENSIONS[CurriculumStage.BASE] | STAGE_DIMENSIONS[CurriculumStage.ENVIRONMENTAL]
        records = build_records(corpus, enhanced, traces, dims)
    elif variant == "partial_reasoning":
        records = build_records(corpus, enhanced, traces, ALL_EXPLICIT, reasoning_fraction=fraction, seed=seed)
    elif variant == "complete_reasoning":
        records = build_records(corpus, enhanced, traces, ALL_EXPLICIT)
    else:
        staged = build_curriculum(corpus, enhanced, traces, "disjoint")
        return DatasetBundle(variant, {f"ablation_{variant}_{k}": v for k, v in staged.files.items()})
    return DatasetBundle(variant, {name: records})


@dataclass(frozen=True)
class EmittedFile:
    name: str
    count: int
    sha256: str


@dataclass(frozen=True)
class EmissionManifest:
    files: tuple[EmittedFile, ...]

    @property
    def total(self) -> int:
        return sum(f.count for f in self.files)

    def to_json(self) -> dict:
        return {
            "files": [{"name": f.name, "count": f.count, "sha256": f.sha256} for f in self.files],
            "total": self.total,
        }


def _record_line(r: TrainingRecord) -> str:
    return json.dumps(r.to_json(), ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n"


def emit_training_records(
    records: Sequence[TrainingRecord] | Mapping[str, Sequence[TrainingRecord]],
    out_dir: str | Path,
    manifest_name: str = "emission_manifest.json",
) -> EmissionManifest:
    """Write JSONL files sorted by (task, dimension) and a manifest of counts and digests.

    A plain record list is split per stage into ``stage_{1,2,3}.jsonl``
    (stage-less records go to ``records.jsonl``); a mapping names the files.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create {out}: {exc}") from exc
    if isinstance(records, Mapping):
        files = {name: list(recs) for name, recs in records.items()}
    else:
        files = {f"stage_{int(s)}.jsonl": [] for s in CurriculumStage}
        for r in records:
            name = f"stage_{r.stage}.jsonl" if r.stage is not None else "records.jsonl"
            files.setdefault(name, []).append(r)
    emitted = []
    for name in sorted(files):
        data = "".join(_record_line(r) for r in sorted(files[name], key=lambda r: r.sort_key)).encode("utf-8")
        (out / name).write_bytes(data)
        emitted.append(EmittedFile(name, len(files[name]), hashlib.sha256(data).hexdigest()))
    manifest = EmissionManifest(tuple(emitted))
    (out / manifest_name).write_text(json.dumps(manifest.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


@dataclass
class StatsReport:
    trajectories: int = 0
    accepted: dict[str, int] = field(default_factory=dict)
    dropped: dict[str, int] = field(default_factory=dict)
    stage_records: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def total_enhanced(self) -> int:
        return sum(v for k, v in self.accepted.items() if k != SELF_DIRECTED)

    @property
    def total_self_directed(self) -> int:
        return self.accepted.get(SELF_DIRECTED, 0)

    @property
    def total_pairs(self) -> int:
        """Original plus explicitly enhanced instruction-trajectory pairs."""
        return self.trajectories + self.total_enhanced

    @property
    def total_stage_records(self) -> int:
        return sum(self.stage_records.values())

    def to_json(self) -> dict:
        return {
            "trajectories": self.trajectories,
            "accepted": dict(sorted(self.accepted.items(), key=lambda kv: dimension_rank(kv[0]))),
            "dropped": dict(sorted(self.dropped.items(), key=lambda kv: dimension_rank(kv[0]))),
            "stage_records": dict(sorted(self.stage_records.items())),
            "total_enhanced": self.total_enhanced,
            "total_self_directed": self.total_self_directed,
            "total_pairs": self.total_pairs,
            "total_stage_records": self.total_stage_records,
            "notes": list(self.notes),
        }


def _full_scale_notes(report: StatsReport) -> list[str]:
    if report.trajectories != ALFRED_TRAJECTORIES:
        return []
    notes = []
    if report.total_pairs != REPORTED_ENHANCED_PAIRS:
        notes.append(
            f"total pairs {report.total_pairs:,} (original + four dimension subsets) differs from the "
            f"published {REPORTED_ENHANCED_PAIRS:,} by {REPORTED_ENHANCED_PAIRS - report.total_pairs:+,}"
        )
    sd = report.total_self_directed
    if sd and sd != REPORTED_SELF_DIRECTED:
        notes.append(f"self-directed total {sd:,} differs from the published {REPORTED_SELF_DIRECTED:,}")
    return notes


def dataset_stats(
    trajectories: int | Iterable[Trajectory],
    enhanced: Iterable[EnhancedInstruction] = (),
    bundles: Iterable[DatasetBundle] = (),
) -> StatsReport:
    n = trajectories if isinstance(trajectories, int) else len(list(trajectories))
    report = StatsReport(trajectories=n)
    for e in enhanced:
        counter = report.accepted if e.accepted else report.dropped
        counter[e.dimension] = counter.get(e.dimension, 0) + 1
    for dim in DIMENSION_ORDER[1:-1]:
        if dim in report.accepted or dim in report.dropped:
            report.accepted.setdefault(dim, 0)
            report.dropped.setdefault(dim, 0)
    for bundle in bundles:
        for name, recs in bundle.files.items():
            report.stage_records[name] = report.stage_records.get(name, 0) + len(recs)
    report.notes.extend(_full_scale_notes(report))
    return report


def extrapolate_stats(
    n: int = ALFRED_TRAJECTORIES,
    dims: Sequence[str] = tuple(d.value for d in CognitiveDimension),
    self_directed_variants: int = 2,
) -> StatsReport:
    """Counts a zero-drop run over ``n`` trajectories would produce."""
    report = StatsReport(trajectories=n)
    for d in dims:
        report.accepted[d] = n
        report.dropped[d] = 0
    if self_directed_variants:
        report.accepted[SELF_DIRECTED] = n * self_directed_variants
        report.dropped[SELF_DIRECTED] = 0
    for s in CurriculumStage:
        report.stage_records[f"stage_{int(s)}.jsonl"] = n * len(s.dimensions & ({ORIGINAL} | set(dims)))
    report.notes.extend(_full_scale_notes(report))
    return report
