from __future__ import annotations

import pytest

from embodied_augment.core import ActionRecord, Category, Observation, Step, Trajectory
from embodied_augment.gateway import Gateway, MockBackend
from embodied_augment.miniworld import demonstration_corpus, load_scenarios

VERBS = ("goto", "pickup", "put", "open", "close")


def make_trajectory(task_id: str = "t0", T: int = 4, instruction: str = "Put a mug in the cabinet.", category=Category.BASE) -> Trajectory:
    steps = []
    for i in range(1, T + 1):
        obs = Observation("symbolic_text", f"You are at place_{i}.\nObjects here: mug", i)
        steps.append(Step(i, obs, ActionRecord(VERBS[(i - 1) % len(VERBS)], f"thing_{i}")))
    return Trajectory(task_id, instruction, tuple(steps), "scene", category)


def make_corpus(n: int = 10, T: int = 3) -> list[Trajectory]:
    return [make_trajectory(f"task_{i:02d}", T, f"Put object {i} in the cabinet.") for i in range(n)]


class RecordingGateway(Gateway):
    """Gateway that keeps every request it serves, in call order."""

    def __init__(self, backend=None, **kw):
        self.captured = []
        super().__init__(backend or MockBackend(), recorder=self.captured.append, **kw)


@pytest.fixture
def corpus10():
    return make_corpus(10)


@pytest.fixture
def mock_gateway():
    return Gateway(MockBackend())


@pytest.fixture(scope="session")
def scenarios():
    return load_scenarios()


@pytest.fixture(scope="session")
def demo_corpus(scenarios):
    return demonstration_corpus(scenarios, seeds=(0,))
