from __future__ import annotations

import threading
from pathlib import Path

import pytest
import yaml

from isa_harness.backend import BackendError, CompletionRequest, CompletionResponse, ScriptedMock
from isa_harness.corpus import DatasetName, Polarity, SentimentInstance

FIXTURES = Path(__file__).parent / "fixtures"

# Phrases that appear only in one default template each.
PHRASE = {
    "direct": "What is the sentiment polarity expressed",
    "thor_aspect": "Which specific aspect",
    "thor_opinion": "what underlying opinion",
    "thor_polarity": "Given that opinion",
    "saot_analyze": "examine the sentence step by step",
    "saot_reflect": "Critically review",
    "saot_infer": "Taking both the analysis and the reflection",
}

SAOT_RULES = [
    (PHRASE["saot_infer"], "The polarity is positive."),
    (PHRASE["saot_reflect"], "analysis is sound"),
    (PHRASE["saot_analyze"], "service quality implied"),
]
THOR_RULES = [
    (PHRASE["thor_polarity"], "negative"),
    (PHRASE["thor_opinion"], "the author is unhappy with it"),
    (PHRASE["thor_aspect"], "the waiting time"),
]
ALL_RULES = SAOT_RULES + THOR_RULES + [(PHRASE["direct"], "positive")]


def make_instance(iid="r1", text="Try the dumplings", target="dumplings", gold=Polarity.POSITIVE, implicit=True):
    return SentimentInstance(iid, text, target, gold, implicit, DatasetName.RESTAURANT)


class SimulatedCrash(BaseException):
    """Stands in for a process kill: escapes the runner's per-instance handling."""


class CrashingMock(ScriptedMock):
    """Scripted mock that raises :class:`SimulatedCrash` on call number ``crash_on``."""

    def __init__(self, rules, default="neutral", crash_on=None):
        super().__init__(rules, default)
        self.crash_on = crash_on

    def complete(self, req: CompletionRequest) -> CompletionResponse:
        with self._lock:
            upcoming = self.calls + 1
        if self.crash_on is not None and upcoming == self.crash_on:
            raise SimulatedCrash()
        return super().complete(req)


class FailingMock(ScriptedMock):
    """Raises a backend error for prompts containing any of ``fail_on``."""

    def __init__(self, rules, default="neutral", fail_on=()):
        super().__init__(rules, default)
        self.fail_on = tuple(fail_on)

    def complete(self, req):
        resp = super().complete(req)
        if any(s in req.prompt for s in self.fail_on):
            raise BackendError("scripted failure")
        return resp


@pytest.fixture
def ten_jsonl() -> Path:
    return FIXTURES / "ten.jsonl"


@pytest.fixture
def write_config(tmp_path, ten_jsonl):
    """Write a run config for the 10-instance fixture and return its path."""

    def _write(**overrides):
        raw = {
            "datasets": [{"name": "restaurant", "path": str(ten_jsonl)}],
            "backends": {"mock": {"kind": "mock", "model": "mock-1", "rules": [list(r) for r in ALL_RULES]}},
            "chains": ["direct", "thor", "saot"],
            "output_dir": str(tmp_path / "runs"),
            "cache_dir": str(tmp_path / "cache"),
            "concurrency": 1,
        }
        raw.update(overrides)
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(raw))
        return path

    return _write


@pytest.fixture
def shared_mock():
    """Factory handing the same instrumented mock to the runner for every backend."""
    lock = threading.Lock()
    mocks = {}

    def factory(config):
        with lock:
            return mocks.setdefault("m", ScriptedMock(config.mock_rules, config.mock_default))

    factory.mocks = mocks
    return factory
