"""Closed-loop episode runner, action parser and success-rate reporting.

The agent only ever sees the instruction and its own observation history.
Nothing about action success or task progress reaches the request; the
``audit_request`` check enforces this over captured request logs.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import ACTION_GRAMMAR, ActionRecord, Category, Observation, canonical_json, format_action
from .gateway import ChatRequest, Gateway, GatewayError, SamplingConfig
from .miniworld import EpisodeEnvironment, MiniWorldEnv, Scenario
from .templates import ImageSlot, Message, PromptText

logger = logging.getLogger(__name__)

CATEGORIES: tuple[str, ...] = tuple(c.value for c in Category)
DEFAULT_MAX_STEPS = 30
PARSE_FAILURE_LIMIT = 5
OBSERVATION_MARKER = "[OBSERVATION]"

DONE_EMITTED = "done_emitted"
MAX_STEPS = "max_steps"
PARSE_LIMIT = "parse_limit"
ERROR = "error"
TERMINATIONS = (DONE_EMITTED, MAX_STEPS, PARSE_LIMIT, ERROR)

AGENT_SYSTEM_PROMPT = (
    "You are a household robot. Each turn you receive the task instruction and every "
    "observation you have made so far, oldest first. Choose the next action.\n"
    "Available actions: goto(place), pickup(object), put(place), open(place), close(place), "
    "toggle_on(place), toggle_off(place), slice(object), done.\n"
    "Think briefly, then end your reply with one line of the form:\n"
    "Action: name(argument)"
)

_ACTION_LINE_RE = re.compile(r"^\s*Action:\s*(.*?)\s*$", re.MULTILINE)
_ACTION_BODY_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?$")
_ARGUMENT_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9_ .-]*$")


class EvaluatorError(Exception):
    pass


class MissingCategory(EvaluatorError):
    def __init__(self, missing: Sequence[str]):
        self.missing = tuple(missing)
        super().__init__(f"STD needs all six categories; missing {', '.join(self.missing)}")


class ActionParseError(EvaluatorError):
    """Agent output that does not name a grammatical action."""

    REASONS = ("no_action_line", "unknown_verb", "malformed_args")

    def __init__(self, reason: str, text: str = ""):
        assert reason in self.REASONS
        self.reason = reason
        self.text = text
        super().__init__(reason)


def parse_action(text: str, grammar: Mapping[str, int] = ACTION_GRAMMAR) -> ActionRecord:
    """The last ``Action: name(argument)`` line of ``text``; anything before it is ignored."""
    lines = _ACTION_LINE_RE.findall(text or "")
    if not lines:
        raise ActionParseError("no_action_line", text)
    body = lines[-1].rstrip(".")
    m = _ACTION_BODY_RE.match(body)
    if m is None:
        raise ActionParseError("malformed_args", text)
    name, argument = m.group(1), m.group(2)
    if name not in grammar:
        raise ActionParseError("unknown_verb", text)
    if argument is not None:
        argument = argument.strip().strip("'\"").strip()
        argument = argument or None
    arity = grammar[name]
    if arity == 0 and argument is not None:
        raise ActionParseError("malformed_args", text)
    if arity == 1 and (argument is None or not _ARGUMENT_RE.match(argument)):
        raise ActionParseError("malformed_args", text)
    return ActionRecord(name, argument, raw_text=lines[-1])


@dataclass
class AgentBinding:
    """How episodes talk to the policy model."""

    gateway: Gateway
    model_id: str = "agent"
    system_prompt: str = AGENT_SYSTEM_PROMPT
    sampling: SamplingConfig = field(default_factory=lambda: SamplingConfig(temperature=0.0, top_p=1.0))
    seed: int = 0

    def build_request(self, instruction: str, observations: Sequence[Observation]) -> ChatRequest:
        parts: list = [f"Instruction: {instruction}\nObservations so far:\n"]
        parts.extend(ImageSlot(o, OBSERVATION_MARKER) for o in observations)
        prompt = PromptText(
            template_id="agent",
            messages=(Message("system", (self.system_prompt,)), Message("user", tuple(parts))),
        )
        return ChatRequest(
            model_id=self.model_id,
            messages=prompt,
            sampling=self.sampling,
            seed=self.seed,
            purpose_tag="agent",
            call_ordinal=len(observations),
        )


def request_record(request: ChatRequest) -> dict:
    """JSON form of an agent request, as written to ``requests.jsonl``."""
    return {
        "model_id": request.model_id,
        "sampling": request.sampling.to_json(),
        "seed": request.seed,
        "purpose": request.purpose_tag,
        "call_ordinal": request.call_ordinal,
        "messages": request.messages.to_json()["messages"],
    }


# Anything that could leak environment feedback into the request.
_PRIVILEGED_RE = re.compile(
    r"success|progress|reward|goal|feedback|succeeded|failed|invalid|done_flag|subgoal",
    re.IGNORECASE,
)
_ALLOWED_REQUEST_KEYS = {"model_id", "sampling", "seed", "purpose", "call_ordinal", "messages"}
_ALLOWED_ROLES = {"system", "user", "assistant"}


def audit_request(record: Mapping, system_prompt: str = AGENT_SYSTEM_PROMPT) -> list[str]:
    """Problems found in one captured agent request; an empty list means clean.

    Allowed content: the system prompt, the instruction text, observation
    parts and prior assistant turns. Keys or observation payloads that look
    like success or progress signals are reported.
    """
    problems = []
    extra = set(record) - _ALLOWED_REQUEST_KEYS
    if extra:
        problems.append(f"unexpected request fields: {sorted(extra)}")
    for i, msg in enumerate(record.get("messages", [])):
        if set(msg) - {"role", "parts"}:
            problems.append(f"messages[{i}] has extra fields {sorted(set(msg) - {'role', 'parts'})}")
        role = msg.get("role")
        if role not in _ALLOWED_ROLES:
            problems.append(f"messages[{i}] has role {role!r}")
        for j, part in enumerate(msg.get("parts", [])):
            where = f"messages[{i}].parts[{j}]"
            kind = part.get("type")
            if kind == "observation":
                if set(part) - {"type", "kind", "payload"}:
                    problems.append(f"{where} has extra fields")
                if _PRIVILEGED_RE.search(part.get("payload", "")):
                    problems.append(f"{where} payload mentions a privileged signal")
            elif kind == "text":
                if set(part) - {"type", "text"}:
                    problems.append(f"{where} has extra fields")
                text = part.get("text", "")
                if role == "system" and text != system_prompt:
                    problems.append(f"{where} system text differs from the agent prompt")
                if role == "user" and not text.startswith("Instruction: "):
                    problems.append(f"{where} user text is not the instruction header")
            else:
                problems.append(f"{where} has type {kind!r}")
    return problems


def observation_parts(record: Mapping) -> list[dict]:
    return [
        p for m in record.get("messages", []) for p in m.get("parts", []) if p.get("type") == "observation"
    ]


@dataclass(frozen=True)
class StepLog:
    step: int
    reply: str
    action: str | None
    parse_error: str | None = None

    def to_json(self) -> dict:
        return {"step": self.step, "reply": self.reply, "action": self.action, "parse_error": self.parse_error}


@dataclass(frozen=True)
class EpisodeResult:
    task_id: str
    category: str
    success: bool
    steps_taken: int
    actions: tuple[StepLog, ...]
    parse_failures: int
    termination: str
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "category": self.category,
            "success": self.success,
            "steps_taken": self.steps_taken,
            "parse_failures": self.parse_failures,
            "termination": self.termination,
            "error": self.error,
            "actions": [a.to_json() for a in self.actions],
        }


def run_episode(
    agent: AgentBinding,
    env: EpisodeEnvironment,
    instruction: str,
    max_steps: int = DEFAULT_MAX_STEPS,
    task_id: str = "",
    category: str = "",
    parse_limit: int = PARSE_FAILURE_LIMIT,
    audit: list[dict] | None = None,
) -> EpisodeResult:
    """Run one closed-loop episode.

    At step t the request carries the instruction and o_1..o_t. Unparseable
    replies consume a step as a no-op; ``parse_limit`` consecutive failures end
    the episode. Success is the hidden goal check at termination.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    observations = [env.reset()]
    log: list[StepLog] = []
    failures = consecutive = 0
    termination, error = MAX_STEPS, None
    steps = 0
    for t in range(1, max_steps + 1):
        steps = t
        request = agent.build_request(instruction, observations)
        if audit is not None:
            audit.append({"task_id": task_id, "step": t, "request": request_record(request)})
        try:
            reply = agent.gateway.cached_complete(request).text
        except GatewayError as exc:
            logger.warning("%s: gateway error at step %d: %s", task_id, t, exc)
            termination, error = ERROR, f"{type(exc).__name__}: {exc}"
            break
        try:
            action = parse_action(reply)
        except ActionParseError as exc:
            failures += 1
            consecutive += 1
            log.append(StepLog(t, reply, None, exc.reason))
            if consecutive >= parse_limit:
                termination = PARSE_LIMIT
                break
            observations.append(env.step(None))
            continue
        consecutive = 0
        log.append(StepLog(t, reply, format_action(action)))
        if action.name == "done":
            termination = DONE_EMITTED
            break
        observations.append(env.step(action))
    return EpisodeResult(
        task_id=task_id,
        category=category,
        success=env.goal_satisfied(),
        steps_taken=steps,
        actions=tuple(log),
        parse_failures=failures,
        termination=termination,
        error=error,
    )


class ScriptedBackend:
    """Replays a fixed action list; the step is read off the observation count."""

    is_network = False

    def __init__(self, actions: Sequence[ActionRecord], backend_id: str = "scripted"):
        self.actions = list(actions)
        self.backend_id = backend_id

    def complete(self, request: ChatRequest) -> tuple[str, int]:
        t = len(request.messages.image_slots)
        if t > len(self.actions):
            return "Reasoning: the script is exhausted.\nAction: done", 1
        action = self.actions[t - 1]
        return f"Reasoning: step {t} of the script.\nAction: {format_action(action)}", 1


def evaluate_scenarios(
    agent: AgentBinding,
    scenarios: Sequence[Scenario],
    seeds: Sequence[int] = (0,),
    max_steps: int = DEFAULT_MAX_STEPS,
    workers: int = 1,
    audit: list[dict] | None = None,
) -> list[EpisodeResult]:
    """One episode per (scenario, seed), each on its own simulator; results keep input order."""
    jobs = [(s, seed) for s in scenarios for seed in seeds]

    def run(job):
        scenario, seed = job
        captured: list[dict] = []
        result = run_episode(
            agent,
            MiniWorldEnv(scenario, seed),
            scenario.instruction,
            max_steps=max_steps,
            task_id=f"{scenario.scenario_id}-s{seed}",
            category=scenario.category.value,
            audit=captured,
        )
        return result, captured

    if workers <= 1:
        outcomes = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, jobs))
    if audit is not None:
        for _, captured in outcomes:
            audit.extend(captured)
    return [r for r, _ in outcomes]


def success_rate(results: Iterable[EpisodeResult]) -> dict[str, float]:
    """Per-category SR in percent; categories without episodes are absent."""
    wins: dict[str, int] = {}
    totals: dict[str, int] = {}
    for r in results:
        if not r.category:
            raise ValueError(f"episode {r.task_id!r} has no category")
        totals[r.category] = totals.get(r.category, 0) + 1
        wins[r.category] = wins.get(r.category, 0) + int(r.success)
    return {c: 100.0 * wins[c] / totals[c] for c in sorted(totals, key=_category_order)}


def _category_order(c: str) -> tuple[int, str]:
    return (CATEGORIES.index(c), c) if c in CATEGORIES else (len(CATEGORIES), c)


def _six(sr: Mapping[str, float]) -> list[float]:
    missing = [c for c in CATEGORIES if c not in sr]
    if missing:
        raise MissingCategory(missing)
    return [float(sr[c]) for c in CATEGORIES]


def std_metric(sr: Mapping[str, float]) -> float:
    """Population standard deviation (divisor 6) of the six category SRs."""
    return statistics.pstdev(_six(sr))


def std_metric_sample(sr: Mapping[str, float]) -> float:
    """Sample standard deviation (divisor 5); reported alongside the population form."""
    return statistics.stdev(_six(sr))


def mean_sr(sr: Mapping[str, float]) -> float | None:
    return statistics.fmean(sr.values()) if sr else None


# Published results used for the STD cross-check: (group, model, avg, std, six SRs).
REFERENCE_ROWS: tuple[tuple[str, str, float, float, tuple[int, ...]], ...] = (
    ("proprietary_open_loop", "GPT-4o", 56.3, 7.8, (64, 54, 68, 46, 52, 54)),
    ("proprietary_open_loop", "Claude-3.5-Sonnet", 64.0, 8.6, (72, 66, 76, 60, 58, 52)),
    ("proprietary_open_loop", "Gemini-1.5-Pro", 62.3, 7.8, (70, 64, 72, 58, 52, 58)),
    ("proprietary_open_loop", "Gemini-2.0-flash", 52.3, 6.2, (62, 48, 54, 46, 46, 58)),
    ("proprietary_open_loop", "Gemini-1.5-flash", 39.3, 10.6, (44, 40, 56, 42, 26, 28)),
    ("proprietary_open_loop", "GPT-4o mini", 24.0, 13.0, (34, 28, 36, 24, 22, 0)),
    ("open_source", "InternVL2.5-78B-MPO", 40.0, 4.5, (48, 36, 42, 40, 40, 34)),
    ("open_source", "Qwen2.5-VL-72B-Ins", 39.7, 6.3, (50, 42, 42, 36, 34, 34)),
    ("open_source", "Qwen2-VL-72B-Ins", 33.7, 4.8, (40, 30, 40, 30, 32, 30)),
    ("open_source", "Llama-3.2-90B-Vision-Ins", 32.0, 10.1, (38, 34, 44, 28, 32, 16)),
    ("open_source", "InternVL2.5-38B-MPO", 25.7, 4.7, (30, 20, 20, 28, 32, 24)),
    ("open_source", "InternVL2.5-38B", 23.3, 9.0, (36, 30, 36, 22, 14, 26)),
    ("open_source", "Llama-3.2-11B-Vision-Ins", 13.7, 7.4, (24, 8, 16, 22, 6, 6)),
    ("open_source", "InternVL2.5-8B-MPO", 7.7, 4.3, (12, 6, 14, 6, 6, 2)),
    ("open_source", "Qwen2.5-VL-7B-Ins", 4.7, 3.9, (10, 8, 6, 2, 0, 2)),
    ("open_source", "Qwen2-VL-7B-Ins", 1.7, 2.3, (6, 0, 2, 0, 0, 2)),
    ("open_source", "InternVL3-8B", 10.7, 7.6, (20, 12, 20, 8, 2, 2)),
    ("proprietary_closed_loop", "GPT-4o", 26.0, 2.8, (30, 26, 28, 22, 26, 24)),
    ("proprietary_closed_loop", "Claude-3.5-Sonnet", 57.3, 13.4, (62, 62, 64, 40, 42, 74)),
    ("ours_internvl3_8b", "InternVL3-8B", 6.0, 4.7, (12, 8, 10, 2, 0, 4)),
    ("ours_internvl3_8b", "+ Basic Reasoning", 46.0, 18.4, (58, 16, 56, 46, 34, 66)),
    ("ours_internvl3_8b", "+ Full Augmentation", 57.0, 5.5, (62, 52, 60, 58, 48, 62)),
    ("ours_internvl3_8b", "+ Curriculum Learning", 61.0, 7.2, (66, 56, 66, 58, 50, 70)),
    ("ours_qwen25_vl_7b", "Qwen2.5-VL-7B-Ins", 2.0, 2.5, (6, 2, 4, 0, 0, 0)),
    ("ours_qwen25_vl_7b", "+ Basic Reasoning", 47.0, 14.0, (64, 22, 48, 50, 44, 54)),
    ("ours_qwen25_vl_7b", "+ Full Augmentation", 58.0, 6.8, (60, 62, 62, 46, 54, 64)),
    ("ours_qwen25_vl_7b", "+ Curriculum Learning", 62.7, 6.3, (66, 62, 70, 56, 52, 70)),
)


def std_erratum() -> list[dict]:
    """Printed vs recomputed Avg and STD for every reference row."""
    rows = []
    for group, model, avg, std, values in REFERENCE_ROWS:
        sr = dict(zip(CATEGORIES, values))
        pop, sample = std_metric(sr), std_metric_sample(sr)
        rows.append({
            "group": group,
            "model": model,
            "sr": dict(sr),
            "printed_avg": avg,
            "computed_avg": round(mean_sr(sr), 4),
            "matches_avg": abs(avg - mean_sr(sr)) <= 0.05,
            "printed_std": std,
            "std_population": round(pop, 4),
            "std_sample": round(sample, 4),
            "delta_population": round(std - pop, 4),
            "delta_sample": round(std - sample, 4),
            "matches_population": abs(std - pop) <= 0.05,
            "matches_sample": abs(std - sample) <= 0.05,
        })
    return rows


@dataclass(frozen=True)
class EvalReport:
    sr: dict[str, float]
    avg: float | None
    std: float | None
    std_sample: float | None
    episodes: tuple[EpisodeResult, ...]
    config_digest: str
    label: str = "agent"

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "config_digest": self.config_digest,
            "categories": {c: (round(self.sr[c], 2) if c in self.sr else None) for c in CATEGORIES},
            "avg": None if self.avg is None else round(self.avg, 2),
            "std": None if self.std is None else round(self.std, 2),
            "std_sample": None if self.std_sample is None else round(self.std_sample, 2),
            "n_episodes": len(self.episodes),
            "episodes": [e.to_json() for e in self.episodes],
        }

    def markdown(self) -> str:
        def fmt(v: float | None) -> str:
            return "n/a" if v is None else f"{v:.1f}"

        header = ["Model", "Avg.", "STD", *CATEGORIES]
        row = [self.label, fmt(self.avg), fmt(self.std), *(fmt(self.sr.get(c)) for c in CATEGORIES)]
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join("---" for _ in header) + "|",
            "| " + " | ".join(row) + " |",
            "",
            f"Episodes: {len(self.episodes)}. Config digest: `{self.config_digest[:16]}`.",
        ]
        if self.std is None:
            lines.append("STD is omitted because at least one category has no episodes.")
        else:
            lines.append(f"Sample STD (divisor 5): {self.std_sample:.2f}.")
        lines += ["", "| Task | Category | Success | Steps | Termination | Parse failures |", "|---|---|---|---|---|---|"]
        for e in self.episodes:
            lines.append(
                f"| {e.task_id} | {e.category} | {'yes' if e.success else 'no'} | {e.steps_taken} "
                f"| {e.termination} | {e.parse_failures} |"
            )
        return "\n".join(lines) + "\n"


def config_digest(config: Mapping) -> str:
    return hashlib.sha256(canonical_json(dict(config)).encode("utf-8")).hexdigest()


def build_report(
    results: Sequence[EpisodeResult],
    config: Mapping,
    out_dir: str | Path | None = None,
    label: str = "agent",
) -> EvalReport:
    """Aggregate results; with ``out_dir`` also write report.json and report.md."""
    sr = success_rate(results)
    try:
        std, std_s = std_metric(sr), std_metric_sample(sr)
    except MissingCategory as exc:
        logger.info("%s", exc)
        std = std_s = None
    report = EvalReport(
        sr=sr,
        avg=mean_sr(sr),
        std=std,
        std_sample=std_s,
        episodes=tuple(results),
        config_digest=config_digest(config),
        label=label,
    )
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(
            json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        (out / "report.md").write_text(report.markdown(), encoding="utf-8")
    return report


def write_audit(records: Sequence[Mapping], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def audit_log(path: str | Path) -> dict:
    """Check a requests.jsonl file: privileged fields and per-step observation counts."""
    violations: list[str] = []
    count_errors: list[str] = []
    previous: dict[str, dict] = {}
    n = 0
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        n += 1
        task, t, req = rec["task_id"], rec["step"], rec["request"]
        violations += [f"{task} step {t}: {p}" for p in audit_request(req)]
        obs = observation_parts(req)
        if len(obs) != t:
            count_errors.append(f"{task} step {t}: {len(obs)} observation parts")
        prev = previous.get(task)
        if prev is not None and observation_parts(prev) != obs[: len(obs) - 1]:
            count_errors.append(f"{task} step {t}: history does not extend step {t - 1}")
        previous[task] = req
    return {"requests": n, "privileged": violations, "history": count_errors}
