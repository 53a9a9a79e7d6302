from dataclasses import replace

import pytest
from hypothesis import settings

from dynprec.controller import ControllerConfig, percentile_threshold
from dynprec.pipeline import Experiment, RunConfig, RunMode
from dynprec.synth import generate_task

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def small_task():
    return generate_task(seed=3, utterances=12)


@pytest.fixture(scope="session")
def default_task():
    return generate_task()


class Runs:
    """Memoized corpus runs over the default task, shared across modules."""

    def __init__(self, task):
        self.task = task
        self.exp = Experiment.from_task(task)
        self.cfg = RunConfig()
        self._cache = {}

    def get(self, key, cfg):
        if key not in self._cache:
            self._cache[key] = self.exp.run(cfg)
        return self._cache[key]

    @property
    def base(self):
        return self.get("base", replace(self.cfg, mode=RunMode.FIXED_BASE))

    @property
    def half(self):
        return self.get("half", replace(self.cfg, mode=RunMode.FIXED_HALF))

    @property
    def p50(self) -> int:
        return percentile_threshold(self.base.token_counts, 50)

    @property
    def dynamic_cfg(self) -> RunConfig:
        return replace(self.cfg, controller=ControllerConfig(initial_threshold=self.p50))

    @property
    def dynamic(self):
        return self.get("dynamic", self.dynamic_cfg)


@pytest.fixture(scope="session")
def runs(default_task):
    return Runs(default_task)


# --- acceptance reporting ------------------------------------------------------

_VERDICTS: list[str] = []


class Criterion:
    """Context manager that records one PASS/FAIL line per acceptance criterion."""

    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        verdict = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} {verdict}: {self.title}"
        if self.detail:
            line += f" [{self.detail}]"
        _VERDICTS.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
