"""Prompt templates and the three chain topologies.

* Direct: one prompt, one completion.
* THOR: aspect -> opinion -> polarity, each hop's answer feeding the next.
* SAoT: an analysis prompt and a reflection prompt, whose answers are
  concatenated (analysis first) into a final polarity-inference prompt.

Templates use ``{name}`` placeholders drawn from :data:`PLACEHOLDERS`.
Substitution is literal and single-pass: placeholder-like text inside a
substituted value is never expanded.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from .backend import Backend, BackendError, CompletionRequest
from .corpus import SentimentInstance

PLACEHOLDERS = frozenset({"sentence", "target", "analysis", "reflection", "hop1", "hop2"})
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

REQUIRED_TEMPLATES = {
    "direct": ("direct",),
    "thor": ("thor_aspect", "thor_opinion", "thor_polarity"),
    "saot": ("saot_analyze", "saot_reflect", "saot_infer"),
}

# Placeholders each template may reference.
_ALLOWED = {
    "direct": {"sentence", "target"},
    "thor_aspect": {"sentence", "target"},
    "thor_opinion": {"sentence", "target", "hop1"},
    "thor_polarity": {"sentence", "target", "hop1", "hop2"},
    "saot_analyze": {"sentence", "target"},
    "saot_reflect": {"sentence", "target", "analysis"},
    "saot_reflect_independent": {"sentence", "target"},
    "saot_infer": {"sentence", "target", "analysis", "reflection"},
}


class TemplateError(ValueError):
    pass


class MissingPlaceholder(TemplateError):
    def __init__(self, name: str) -> None:
        super().__init__(f"no value for placeholder {{{name}}}")
        self.name = name


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def __post_init__(self) -> None:
        unknown = sorted(self.placeholders - PLACEHOLDERS)
        if unknown:
            raise TemplateError(f"template {self.name!r} uses unknown placeholders: {', '.join(unknown)}")
        allowed = _ALLOWED.get(self.name)
        if allowed is not None and not self.placeholders <= allowed:
            extra = ", ".join(sorted(self.placeholders - allowed))
            raise TemplateError(f"template {self.name!r} may not reference: {extra}")

    @property
    def placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))


def render(template: PromptTemplate, variables: Mapping[str, str]) -> str:
    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise MissingPlaceholder(name)
        return variables[name]

    return _PLACEHOLDER_RE.sub(substitute, template.body)


@dataclass(frozen=True)
class TemplateSet:
    templates: Mapping[str, PromptTemplate]

    def __getitem__(self, name: str) -> PromptTemplate:
        try:
            return self.templates[name]
        except KeyError:
            raise TemplateError(f"template set has no {name!r} template") from None

    def __contains__(self, name: str) -> bool:
        return name in self.templates

    def fingerprint(self) -> str:
        canonical = json.dumps(
            {name: t.body for name, t in sorted(self.templates.items())},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, bodies: Mapping[str, str]) -> TemplateSet:
        return cls({name: PromptTemplate(name, body) for name, body in bodies.items()})


def _read_body(text: str) -> str:
    return text.rstrip("\n")


def load_template_set(directory: str | Path) -> TemplateSet:
    """Load every ``*.txt`` file in ``directory``; the file stem is the template name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise TemplateError(f"template directory not found: {directory}")
    bodies = {p.stem: _read_body(p.read_text(encoding="utf-8")) for p in sorted(directory.glob("*.txt"))}
    return TemplateSet.from_dict(bodies)


def default_templates() -> TemplateSet:
    root = resources.files("isa_harness") / "templates" / "default"
    bodies = {
        entry.name[: -len(".txt")]: _read_body(entry.read_text(encoding="utf-8"))
        for entry in root.iterdir()
        if entry.name.endswith(".txt")
    }
    return TemplateSet.from_dict(bodies)


class ChainKind(enum.Enum):
    DIRECT = "direct"
    THOR = "thor"
    SAOT = "saot"


CALLS_PER_INSTANCE = {ChainKind.DIRECT: 1, ChainKind.THOR: 3, ChainKind.SAOT: 3}


@dataclass(frozen=True)
class ChainStep:
    step_name: str
    prompt: str
    response: str


@dataclass
class ChainTrace:
    instance_id: str
    chain: ChainKind
    steps: list[ChainStep] = field(default_factory=list)

    @property
    def final_text(self) -> str:
        return self.steps[-1].response if self.steps else ""

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "chain": self.chain.value,
            "steps": [
                {"step_name": s.step_name, "prompt": s.prompt, "response": s.response}
                for s in self.steps
            ],
            "final_text": self.final_text,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ChainTrace:
        return cls(
            instance_id=data["instance_id"],
            chain=ChainKind(data["chain"]),
            steps=[ChainStep(s["step_name"], s["prompt"], s["response"]) for s in data["steps"]],
        )


class ChainError(Exception):
    """A chain step failed; ``trace`` holds the steps completed before it."""

    def __init__(self, instance_id: str, trace: ChainTrace, cause: Exception) -> None:
        super().__init__(f"instance {instance_id}: {type(cause).__name__}: {cause}")
        self.instance_id = instance_id
        self.trace = trace
        self.cause = cause


@dataclass(frozen=True)
class GenerationParams:
    model: str = "mock"
    max_tokens: int = 256
    temperature: float = 0.0
    stop: tuple[str, ...] | None = None


class _Executor:
    def __init__(self, backend: Backend, params: GenerationParams, instance: SentimentInstance, kind: ChainKind):
        self.backend = backend
        self.params = params
        self.trace = ChainTrace(instance.id, kind)
        self.variables = {"sentence": instance.text, "target": instance.target}

    def step(self, step_name: str, template: PromptTemplate) -> str:
        prompt = render(template, self.variables)
        req = CompletionRequest(
            model=self.params.model,
            prompt=prompt,
            max_tokens=self.params.max_tokens,
            temperature=self.params.temperature,
            stop=self.params.stop,
        )
        try:
            text = self.backend.complete(req).text
        except BackendError as exc:
            raise ChainError(self.trace.instance_id, self.trace, exc) from exc
        self.trace.steps.append(ChainStep(step_name, prompt, text))
        return text


def run_direct(
    backend: Backend,
    templates: TemplateSet,
    instance: SentimentInstance,
    params: GenerationParams = GenerationParams(),
) -> ChainTrace:
    ex = _Executor(backend, params, instance, ChainKind.DIRECT)
    ex.step("direct", templates["direct"])
    return ex.trace


def run_thor(
    backend: Backend,
    templates: TemplateSet,
    instance: SentimentInstance,
    params: GenerationParams = GenerationParams(),
) -> ChainTrace:
    aspect, opinion, polarity = (templates[n] for n in REQUIRED_TEMPLATES["thor"])
    ex = _Executor(backend, params, instance, ChainKind.THOR)
    ex.variables["hop1"] = ex.step("aspect", aspect)
    ex.variables["hop2"] = ex.step("opinion", opinion)
    ex.step("polarity", polarity)
    return ex.trace


def run_saot(
    backend: Backend,
    templates: TemplateSet,
    instance: SentimentInstance,
    params: GenerationParams = GenerationParams(),
    independent_reflect: bool = False,
) -> ChainTrace:
    """Analyze, reflect, then infer from the concatenated analysis and reflection.

    With ``independent_reflect`` the reflection prompt is rendered from the
    ``saot_reflect_independent`` template and never sees the analysis.
    """
    analyze, infer = templates["saot_analyze"], templates["saot_infer"]
    reflect = templates["saot_reflect_independent" if independent_reflect else "saot_reflect"]
    ex = _Executor(backend, params, instance, ChainKind.SAOT)
    analysis = ex.step("analyze", analyze)
    if not independent_reflect:
        ex.variables["analysis"] = analysis
    ex.variables["reflection"] = ex.step("reflect", reflect)
    ex.variables["analysis"] = analysis
    ex.step("infer", infer)
    return ex.trace


def run_chain(
    kind: ChainKind,
    backend: Backend,
    templates: TemplateSet,
    instance: SentimentInstance,
    params: GenerationParams = GenerationParams(),
    independent_reflect: bool = False,
) -> ChainTrace:
    if kind is ChainKind.DIRECT:
        return run_direct(backend, templates, instance, params)
    if kind is ChainKind.THOR:
        return run_thor(backend, templates, instance, params)
    return run_saot(backend, templates, instance, params, independent_reflect)
