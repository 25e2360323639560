"""Deterministic symbolic household simulator.

The agent moves between receptacles (``goto``), carries one object at a
time, opens/closes and toggles receptacles, and slices with a held knife
on a work surface (any receptacle that cannot be closed). Receptacles may
carry an effect that applies to everything inside them for every full step
they stay active:

* ``cold``: chills (active while closed), e.g. a fridge
* ``heat``: heats (active while closed and switched on), e.g. a microwave
* ``wash``: cleans (active while switched on), e.g. a sink

Inapplicable actions are silent no-ops that still advance the step
counter; observations never reveal whether an action worked or how close
the goal is.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence

from .core import (
    ACTION_GRAMMAR,
    SYMBOLIC_TEXT,
    ActionRecord,
    Category,
    Observation,
    Step,
    Trajectory,
    canonical_json,
    format_action,
)

logger = logging.getLogger(__name__)

HELD = "<held>"
EFFECTS = ("cold", "heat", "wash")
OBSERVATION_FORMAT = "symbolic-v1"


class WorldError(Exception):
    pass


class InvalidSpec(WorldError):
    pass


class UnknownAction(WorldError):
    pass


class Unachievable(WorldError):
    pass


@dataclass(frozen=True)
class ReceptacleState:
    id: str
    type: str
    openable: bool = False
    is_open: bool = True
    effect: str | None = None
    toggleable: bool = False
    is_on: bool = False
    descriptors: tuple[str, ...] = ()

    @property
    def accessible(self) -> bool:
        return not self.openable or self.is_open

    @property
    def active(self) -> bool:
        if self.effect is None:
            return False
        closed = not self.openable or not self.is_open
        if self.effect == "wash":
            return self.is_on
        return closed and (not self.toggleable or self.is_on)


@dataclass(frozen=True)
class ObjectState:
    id: str
    type: str
    location: str
    pickupable: bool = True
    sliceable: bool = False
    slice_into: tuple[str, ...] = ()
    slice_type: str | None = None
    slicer: bool = False
    chilled: bool = False
    heated: bool = False
    clean: bool = True
    descriptors: tuple[str, ...] = ()


@dataclass(frozen=True)
class SceneSpec:
    scene_id: str
    room: str
    receptacles: tuple[ReceptacleState, ...]
    objects: tuple[Mapping, ...]
    agent_start: str
    seed: int = 0

    @classmethod
    def from_json(cls, doc: Mapping) -> "SceneSpec":
        try:
            receptacles = tuple(
                ReceptacleState(
                    id=r["id"],
                    type=r.get("type", r["id"]),
                    openable=bool(r.get("openable", False)),
                    is_open=bool(r.get("open", not r.get("openable", False))),
                    effect=r.get("effect"),
                    toggleable=bool(r.get("toggleable", False)),
                    is_on=bool(r.get("on", False)),
                    descriptors=tuple(r.get("descriptors", ())),
                )
                for r in doc["receptacles"]
            )
            return cls(
                scene_id=doc.get("scene_id", "scene"),
                room=doc.get("room", "room"),
                receptacles=receptacles,
                objects=tuple(dict(o) for o in doc["objects"]),
                agent_start=doc["agent_start"],
                seed=int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidSpec(f"malformed scene spec: {exc!r}") from None

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "room": self.room,
            "agent_start": self.agent_start,
            "seed": self.seed,
            "receptacles": [
                {
                    "id": r.id, "type": r.type, "openable": r.openable, "open": r.is_open,
                    "effect": r.effect, "toggleable": r.toggleable, "on": r.is_on,
                    "descriptors": list(r.descriptors),
                }
                for r in self.receptacles
            ],
            "objects": [dict(o) for o in self.objects],
        }


@dataclass(frozen=True)
class WorldState:
    room: str
    receptacles: tuple[ReceptacleState, ...]
    objects: tuple[ObjectState, ...]
    agent_at: str
    held: str | None = None
    step_count: int = 0

    def obj(self, oid: str) -> ObjectState | None:
        for o in self.objects:
            if o.id == oid:
                return o
        return None

    def rec(self, rid: str) -> ReceptacleState | None:
        for r in self.receptacles:
            if r.id == rid:
                return r
        return None

    def contents(self, rid: str) -> list[ObjectState]:
        return [o for o in self.objects if o.location == rid]

    def signature(self) -> tuple:
        """Everything except the step counter; used to deduplicate search states."""
        return (self.receptacles, self.objects, self.agent_at, self.held)

    def _with_object(self, new: ObjectState) -> "WorldState":
        objs = tuple(new if o.id == new.id else o for o in self.objects)
        return replace(self, objects=objs)

    def _with_receptacle(self, new: ReceptacleState) -> "WorldState":
        recs = tuple(new if r.id == new.id else r for r in self.receptacles)
        return replace(self, receptacles=recs)


_OBJECT_KEYS = {
    "id", "type", "location", "location_options", "pickupable", "sliceable", "slice_into",
    "slice_type", "slicer", "chilled", "heated", "clean", "descriptors",
}


def init_scene(spec: SceneSpec, seed: int | None = None) -> WorldState:
    """Initial state for ``spec``; ``seed`` (default ``spec.seed``) only picks among ``location_options``."""
    rng = random.Random(spec.seed if seed is None else seed)
    rec_ids = [r.id for r in spec.receptacles]
    if len(set(rec_ids)) != len(rec_ids):
        raise InvalidSpec("duplicate receptacle id")
    for r in spec.receptacles:
        if r.effect is not None and r.effect not in EFFECTS:
            raise InvalidSpec(f"{r.id}: unknown effect {r.effect!r}")
    if not isinstance(spec.agent_start, str):
        raise InvalidSpec("exactly one agent start location is required")
    seen: set[str] = set(rec_ids)
    objects = []
    for doc in sorted(spec.objects, key=lambda d: str(d.get("id"))):
        oid = doc.get("id")
        if not isinstance(oid, str) or not oid:
            raise InvalidSpec("object without an id")
        if oid in seen:
            raise InvalidSpec(f"{oid}: listed more than once (an object has exactly one location)")
        seen.add(oid)
        unknown = set(doc) - _OBJECT_KEYS
        if unknown:
            raise InvalidSpec(f"{oid}: unknown keys {sorted(unknown)}")
        options = doc.get("location_options")
        if options:
            if not all(o in rec_ids for o in options):
                raise InvalidSpec(f"{oid}: location option is not a receptacle")
            location = rng.choice(list(options))
        else:
            location = doc.get("location")
        if not isinstance(location, str):
            raise InvalidSpec(f"{oid}: needs exactly one location, got {location!r}")
        if location not in rec_ids:
            raise InvalidSpec(f"{oid}: location {location!r} is not a receptacle")
        if doc.get("sliceable") and not doc.get("slice_into"):
            raise InvalidSpec(f"{oid}: sliceable object declares no slice_into")
        objects.append(
            ObjectState(
                id=oid,
                type=doc.get("type", oid),
                location=location,
                pickupable=bool(doc.get("pickupable", True)),
                sliceable=bool(doc.get("sliceable", False)),
                slice_into=tuple(doc.get("slice_into", ())),
                slice_type=doc.get("slice_type") or (f"{doc.get('type', oid)}_slice" if doc.get("sliceable") else None),
                slicer=bool(doc.get("slicer", False)),
                chilled=bool(doc.get("chilled", False)),
                heated=bool(doc.get("heated", False)),
                clean=bool(doc.get("clean", True)),
                descriptors=tuple(doc.get("descriptors", ())),
            )
        )
    for o in objects:
        for sid in o.slice_into:
            if sid in seen:
                raise InvalidSpec(f"{o.id}: slice id {sid!r} collides with an existing id")
            seen.add(sid)
    return WorldState(spec.room, tuple(sorted(spec.receptacles, key=lambda r: r.id)), tuple(objects), spec.agent_start)


def _check_grammar(action: ActionRecord) -> None:
    if action.name not in ACTION_GRAMMAR:
        raise UnknownAction(f"unknown action {action.name!r}")
    arity = ACTION_GRAMMAR[action.name]
    if (arity == 0) != (action.argument is None):
        raise UnknownAction(f"{action.name!r} takes {arity} argument(s)")


def _apply(state: WorldState, action: ActionRecord) -> WorldState:
    """Action effects only; returns ``state`` itself when inapplicable."""
    name, arg = action.name, action.argument
    here = state.rec(state.agent_at)
    if name == "goto":
        if state.rec(arg) is not None:
            return replace(state, agent_at=arg)
        target = state.obj(arg)
        if target is not None and state.rec(target.location) is not None:
            return replace(state, agent_at=target.location)
        return state
    if name == "done":
        return state
    if name in ("open", "close", "toggle_on", "toggle_off"):
        if here is None or arg != here.id:
            return state
        if name in ("open", "close"):
            want = name == "open"
            if not here.openable or here.is_open == want:
                return state
            return state._with_receptacle(replace(here, is_open=want))
        want = name == "toggle_on"
        if not here.toggleable or here.is_on == want:
            return state
        return state._with_receptacle(replace(here, is_on=want))
    if name == "pickup":
        obj = state.obj(arg)
        if (
            state.held is not None or obj is None or not obj.pickupable
            or here is None or obj.location != here.id or not here.accessible
        ):
            return state
        return replace(state._with_object(replace(obj, location=HELD)), held=obj.id)
    if name == "put":
        if state.held is None or here is None or arg != here.id or not here.accessible:
            return state
        obj = state.obj(state.held)
        return replace(state._with_object(replace(obj, location=here.id)), held=None)
    if name == "slice":
        obj = state.obj(arg)
        tool = state.obj(state.held) if state.held else None
        if (
            tool is None or not tool.slicer or obj is None or not obj.sliceable
            or here is None or obj.location != here.id or here.openable
        ):
            return state
        pieces = tuple(
            ObjectState(
                id=sid, type=obj.slice_type or f"{obj.type}_slice", location=obj.location,
                chilled=obj.chilled, heated=obj.heated, clean=obj.clean,
                descriptors=obj.descriptors,
            )
            for sid in obj.slice_into
        )
        objs = tuple(sorted([o for o in state.objects if o.id != obj.id] + list(pieces), key=lambda o: o.id))
        return replace(state, objects=objs)
    raise UnknownAction(name)


def _apply_effects(before: WorldState, after: WorldState) -> WorldState:
    active_before = {r.id for r in before.receptacles if r.active}
    if not active_before:
        return after
    for rec_after in after.receptacles:
        if rec_after.id not in active_before or not rec_after.active:
            continue
        for obj in after.contents(rec_after.id):
            prev = before.obj(obj.id)
            if prev is None or prev.location != rec_after.id:
                continue
            if rec_after.effect == "cold":
                new = replace(obj, chilled=True, heated=False)
            elif rec_after.effect == "heat":
                new = replace(obj, heated=True, chilled=False)
            else:
                new = replace(obj, clean=True)
            if new != obj:
                after = after._with_object(new)
    return after


def transition(state: WorldState, action: ActionRecord | None) -> WorldState:
    """Next state; ``None`` is a pure time step (used for unparseable agent output)."""
    if action is not None:
        _check_grammar(action)
        after = _apply(state, action)
    else:
        after = state
    after = _apply_effects(state, after)
    return WorldState(after.room, after.receptacles, after.objects, after.agent_at, after.held, state.step_count + 1)


def _describe(obj: ObjectState) -> str:
    tags = list(obj.descriptors)
    if obj.chilled:
        tags.append("cold")
    if obj.heated:
        tags.append("hot")
    if not obj.clean:
        tags.append("dirty")
    return f"{obj.id} ({', '.join(tags)})" if tags else obj.id


def _describe_place(rec: ReceptacleState) -> str:
    tags = list(rec.descriptors)
    if rec.openable:
        tags.append("open" if rec.is_open else "closed")
    if rec.toggleable:
        tags.append("on" if rec.is_on else "off")
    return f"{rec.id} ({', '.join(tags)})" if tags else rec.id


def observe(state: WorldState) -> str:
    """Symbolic egocentric observation text (format ``symbolic-v1``)."""
    here = state.rec(state.agent_at)
    lines = []
    if here is None:
        lines.append(f"You are in the {state.room}, at the {state.agent_at}.")
        lines.append("Objects here: nothing")
    else:
        lines.append(f"You are at the {_describe_place(here)}.")
        if here.accessible:
            visible = [_describe(o) for o in state.contents(here.id)]
            lines.append("Objects here: " + (", ".join(visible) if visible else "nothing"))
        else:
            lines.append(f"Objects here: nothing (the {here.id} is closed)")
    held = state.obj(state.held) if state.held else None
    lines.append("You are holding: " + (_describe(held) if held else "nothing"))
    lines.append("Places: " + ", ".join(_describe_place(r) for r in state.receptacles))
    return "\n".join(lines)


def step(state: WorldState, action: ActionRecord) -> tuple[WorldState, Observation]:
    new = transition(state, action)
    return new, Observation(SYMBOLIC_TEXT, observe(new), new.step_count + 1)


@dataclass(frozen=True)
class GoalCondition:
    subject: str
    by: str = "id"
    require: tuple[tuple[str, object], ...] = ()
    count: int = 1

    def matches(self, obj: ObjectState) -> bool:
        return (obj.id if self.by == "id" else obj.type) == self.subject

    def holds_for(self, obj: ObjectState, held: str | None) -> bool:
        for key, want in self.require:
            if key == "in":
                if obj.location != want:
                    return False
            elif key == "held":
                if (held == obj.id) != bool(want):
                    return False
            elif getattr(obj, key) != want:
                return False
        return True


_GOAL_KEYS = ("in", "held", "chilled", "heated", "clean")


@dataclass(frozen=True)
class GoalPredicate:
    conditions: tuple[GoalCondition, ...]

    @classmethod
    def from_json(cls, docs: Sequence[Mapping]) -> "GoalPredicate":
        conditions = []
        for doc in docs:
            if "id" in doc:
                subject, by = doc["id"], "id"
            elif "type" in doc:
                subject, by = doc["type"], "type"
            else:
                raise InvalidSpec(f"goal condition needs 'id' or 'type': {doc}")
            bad = set(doc.get("require", {})) - set(_GOAL_KEYS)
            if bad:
                raise InvalidSpec(f"unknown goal keys {sorted(bad)}")
            require = tuple(sorted(doc.get("require", {}).items()))
            conditions.append(GoalCondition(subject, by, require, int(doc.get("count", 1))))
        return cls(tuple(conditions))

    def to_json(self) -> list[dict]:
        return [
            {c.by: c.subject, "require": dict(c.require), "count": c.count}
            for c in self.conditions
        ]


def _known_ids(state: WorldState) -> set[str]:
    ids = {o.id for o in state.objects}
    for o in state.objects:
        ids.update(o.slice_into)
    return ids


def check_goal(state: WorldState, goal: GoalPredicate) -> bool:
    ok = True
    known = None
    for cond in goal.conditions:
        if cond.by == "id" and state.obj(cond.subject) is None:
            known = known if known is not None else _known_ids(state)
            if cond.subject not in known:
                logger.warning("goal refers to unknown object %r", cond.subject)
            ok = False
            continue
        n = sum(1 for o in state.objects if cond.matches(o) and cond.holds_for(o, state.held))
        if n < cond.count:
            ok = False
    return ok


def _candidate_actions(state: WorldState) -> list[ActionRecord]:
    acts = [ActionRecord("goto", r.id) for r in state.receptacles]
    here = state.rec(state.agent_at)
    if here is None:
        return acts
    if here.openable:
        acts.append(ActionRecord("close" if here.is_open else "open", here.id))
    if here.toggleable:
        acts.append(ActionRecord("toggle_off" if here.is_on else "toggle_on", here.id))
    if here.accessible:
        if state.held is None:
            acts.extend(ActionRecord("pickup", o.id) for o in state.contents(here.id) if o.pickupable)
        else:
            acts.append(ActionRecord("put", here.id))
            if not here.openable:
                acts.extend(ActionRecord("slice", o.id) for o in state.contents(here.id) if o.sliceable)
    return acts


_PLAN_CACHE: dict[str, tuple[ActionRecord, ...]] = {}


def oracle_plan(
    spec: SceneSpec, goal: GoalPredicate, seed: int | None = None, max_states: int = 500_000
) -> list[ActionRecord]:
    """Shortest action sequence reaching ``goal`` (breadth-first), terminated by ``done``.

    Plans are memoised per (spec, goal, seed) for the life of the process.
    """
    key = canonical_json([spec.to_json(), goal.to_json(), seed, max_states])
    if key not in _PLAN_CACHE:
        _PLAN_CACHE[key] = tuple(_search(spec, goal, seed, max_states))
    return list(_PLAN_CACHE[key])


def _search(spec: SceneSpec, goal: GoalPredicate, seed: int | None, max_states: int) -> list[ActionRecord]:
    start = init_scene(spec, seed)
    done = ActionRecord("done", None, "done")
    if check_goal(start, goal):
        return [done]
    parents: dict[tuple, tuple[tuple, ActionRecord] | None] = {start.signature(): None}
    queue = deque([start])
    while queue:
        state = queue.popleft()
        for action in _candidate_actions(state):
            nxt = transition(state, action)
            sig = nxt.signature()
            if sig in parents:
                continue
            parents[sig] = (state.signature(), action)
            if check_goal(nxt, goal):
                plan = []
                cur: tuple | None = sig
                while parents[cur] is not None:
                    prev, act = parents[cur]
                    plan.append(ActionRecord(act.name, act.argument, format_action(act)))
                    cur = prev
                return plan[::-1] + [done]
            if len(parents) > max_states:
                raise Unachievable(f"search exceeded {max_states} states")
            queue.append(nxt)
    raise Unachievable(f"goal unreachable in scene {spec.scene_id!r}")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    category: Category
    instruction: str
    scene: SceneSpec
    goal: GoalPredicate

    @classmethod
    def from_json(cls, doc: Mapping) -> "Scenario":
        try:
            return cls(
                scenario_id=doc["scenario_id"],
                category=Category.parse(doc["category"]),
                instruction=doc["instruction"],
                scene=SceneSpec.from_json(doc["scene"]),
                goal=GoalPredicate.from_json(doc["goal"]),
            )
        except (KeyError, ValueError) as exc:
            raise InvalidSpec(f"malformed scenario: {exc}") from None


def load_scenario(path: str | Path) -> Scenario:
    return Scenario.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def bundled_scenarios_dir() -> Path:
    return Path(str(resources.files("embodied_augment").joinpath("scenarios")))


def load_scenarios(root: str | Path | None = None) -> list[Scenario]:
    """All ``*.json`` scenarios under ``root`` (bundled set by default), sorted by category then id."""
    root = Path(root) if root is not None else bundled_scenarios_dir()
    found = [load_scenario(p) for p in sorted(root.rglob("*.json"))]
    order = {c: i for i, c in enumerate(Category)}
    return sorted(found, key=lambda s: (order[s.category], s.scenario_id))


def find_scenario(scenario_id: str, root: str | Path | None = None) -> Scenario:
    for s in load_scenarios(root):
        if s.scenario_id == scenario_id:
            return s
    raise KeyError(scenario_id)


class EpisodeEnvironment(Protocol):
    """What the episode runner needs from a simulator."""

    def reset(self) -> Observation: ...

    def step(self, action: ActionRecord | None) -> Observation: ...

    def goal_satisfied(self) -> bool: ...


class MiniWorldEnv:
    """One episode's simulator instance; not thread-safe, cheap to create."""

    def __init__(self, scenario: Scenario, seed: int | None = None, render_dir: str | Path | None = None):
        self.scenario = scenario
        self.seed = scenario.scene.seed if seed is None else seed
        self.render_dir = Path(render_dir) if render_dir is not None else None
        self.state = init_scene(scenario.scene, self.seed)

    def _observation(self) -> Observation:
        index = self.state.step_count + 1
        if self.render_dir is not None:
            path = self.render_dir / f"{self.scenario.scenario_id}-s{self.seed}-{index:03d}.png"
            render_image(self.state, path)
            return Observation("image_file", str(path), index)
        return Observation(SYMBOLIC_TEXT, observe(self.state), index)

    def reset(self) -> Observation:
        self.state = init_scene(self.scenario.scene, self.seed)
        return self._observation()

    def step(self, action: ActionRecord | None) -> Observation:
        self.state = transition(self.state, action)
        return self._observation()

    def goal_satisfied(self) -> bool:
        return check_goal(self.state, self.scenario.goal)


class ThorAdapter:
    """Placeholder for driving an AI2-THOR / EB-ALFRED process; interface only."""

    def __init__(self, *args, **kwargs):
        raise NotImplementedError("no AI2-THOR integration is bundled; implement EpisodeEnvironment")


def demonstrate(scenario: Scenario, seed: int | None = None) -> Trajectory:
    """Expert trajectory from the oracle plan: o_t is the observation before a_t."""
    env = MiniWorldEnv(scenario, seed)
    plan = oracle_plan(scenario.scene, scenario.goal, env.seed)
    obs = env.reset()
    steps = []
    for t, action in enumerate(plan, start=1):
        steps.append(Step(t, Observation(obs.kind, obs.payload, t), action))
        obs = env.step(action)
    return Trajectory(
        task_id=f"{scenario.scenario_id}-s{env.seed}",
        instruction=scenario.instruction,
        steps=tuple(steps),
        scene_ref=scenario.scene.scene_id,
        category=scenario.category,
    )


def demonstration_corpus(scenarios: Iterable[Scenario], seeds: Sequence[int] = (0,)) -> list[Trajectory]:
    return [demonstrate(s, seed) for s in scenarios for seed in seeds]


_PALETTE = [(230, 159, 0), (86, 180, 233), (0, 158, 115), (240, 228, 66), (0, 114, 178), (213, 94, 0), (204, 121, 167)]


def render_image(state: WorldState, path: str | Path, size: tuple[int, int] = (320, 240)) -> Path:
    """Flat-colour picture of the scene: one panel per receptacle, a dot per visible object."""
    from PIL import Image, ImageDraw  # optional dependency

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.new("RGB", size, (245, 245, 245))
    draw = ImageDraw.Draw(img)
    n = max(1, len(state.receptacles))
    width = size[0] // n
    for i, rec in enumerate(state.receptacles):
        x0 = i * width
        fill = _PALETTE[i % len(_PALETTE)] if rec.accessible else (120, 120, 120)
        draw.rectangle([x0 + 2, size[1] // 2, x0 + width - 3, size[1] - 3], fill=fill)
        if rec.id == state.agent_at:
            draw.rectangle([x0 + 2, size[1] // 2 - 12, x0 + width - 3, size[1] // 2 - 4], fill=(0, 0, 0))
        if rec.accessible:
            for j, obj in enumerate(state.contents(rec.id)):
                cx, cy = x0 + 10 + (j % 4) * 12, size[1] // 2 + 10 + (j // 4) * 12
                colour = (80, 160, 255) if obj.chilled else (255, 80, 40) if obj.heated else (30, 30, 30)
                draw.ellipse([cx - 4, cy - 4, cx + 4, cy + 4], fill=colour)
    img.save(path)
    return path
