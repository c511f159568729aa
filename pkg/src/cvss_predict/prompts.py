"""Prompt variants and template rendering."""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from string import Template

import yaml

from .cvss import COMPONENTS, parse_vector
from .ingest import EnrichedRecord

KINDS = ("base", "few-shot", "cwe", "per-component", "direct-score")
NO_CWE_INFO = "No CWE information available for this vulnerability."


class MissingFewShot(ValueError):
    pass


class FewShotError(ValueError):
    pass


@dataclass(frozen=True)
class PromptVariant:
    kind: str
    component: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prompt variant {self.kind!r}; expected one of {KINDS}")
        if (self.kind == "per-component") != (self.component is not None):
            raise ValueError("a component is required for, and only for, per-component prompts")
        if self.component is not None and self.component not in COMPONENTS:
            raise ValueError(f"unknown component {self.component!r}")

    @classmethod
    def parse(cls, text: str) -> "PromptVariant":
        kind, _, comp = text.partition(":")
        return cls(kind, comp or None)

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.component}" if self.component else self.kind


BASE = PromptVariant("base")
FEW_SHOT = PromptVariant("few-shot")
CWE_ENRICHED = PromptVariant("cwe")
DIRECT_SCORE = PromptVariant("direct-score")


def per_component(component: str) -> PromptVariant:
    return PromptVariant("per-component", component)


@dataclass(frozen=True)
class FewShotExample:
    cve_id: str
    description: str
    vector_string: str


@dataclass(frozen=True)
class FewShotSet:
    examples: tuple[FewShotExample, FewShotExample, FewShotExample]

    MIN_DIFFERENCES = 4

    def __post_init__(self):
        if len(self.examples) != 3:
            raise FewShotError(f"need exactly 3 few-shot examples, got {len(self.examples)}")
        vectors = [parse_vector(ex.vector_string) for ex in self.examples]
        for i in range(3):
            for j in range(i + 1, 3):
                diff = sum(a != b for a, b in zip(vectors[i].labels(), vectors[j].labels()))
                if diff < self.MIN_DIFFERENCES:
                    raise FewShotError(
                        f"{self.examples[i].cve_id} and {self.examples[j].cve_id} differ in only "
                        f"{diff} metrics (need {self.MIN_DIFFERENCES})")

    @classmethod
    def load(cls, path=None) -> "FewShotSet":
        if path is None:
            text = resources.files(__package__).joinpath("templates/few_shot.yaml").read_text()
        else:
            text = Path(path).read_text(encoding="utf-8")
        rows = (yaml.safe_load(text) or {}).get("examples") or []
        return cls(tuple(FewShotExample(r["cve_id"], r["description"].strip(), r["vector"])
                         for r in rows))


class TemplateSet:
    """Prompt templates read from a directory of ``$placeholder`` text files.

    Defaults to the templates bundled with the package.
    """

    FILES = ("vector", "component", "score", "context_few_shot", "few_shot_example",
             "context_cwe", "context_no_cwe", "cwe_entry")

    def __init__(self, template_dir=None):
        root = Path(template_dir) if template_dir else resources.files(__package__) / "templates"
        self.templates = {name: Template(root.joinpath(f"{name}.txt").read_text(encoding="utf-8")
                                         .rstrip("\n"))
                          for name in self.FILES}
        self.definitions = yaml.safe_load(root.joinpath("definitions.yaml").read_text(encoding="utf-8"))
        missing = set(COMPONENTS) - set(self.definitions)
        if missing:
            raise ValueError(f"definitions lack components: {sorted(missing)}")

    def render(self, name: str, **values) -> str:
        return self.templates[name].substitute(**values)

    def all_definitions(self) -> str:
        return "\n".join(self.definitions[c] for c in COMPONENTS)


_DEFAULT_TEMPLATES: TemplateSet | None = None


def default_templates() -> TemplateSet:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = TemplateSet()
    return _DEFAULT_TEMPLATES


def build_prompt(record: EnrichedRecord, variant: PromptVariant, fewshot: FewShotSet | None = None,
                 templates: TemplateSet | None = None) -> str:
    t = templates or default_templates()
    description = record.record.description
    if variant.kind == "few-shot" and fewshot is None:
        raise MissingFewShot("few-shot prompts need a FewShotSet")
    if variant.kind == "per-component":
        return t.render("component", definitions=t.definitions[variant.component],
                        component=variant.component, description=description)
    if variant.kind == "direct-score":
        return t.render("score", definitions=t.all_definitions(), description=description)

    if variant.kind == "few-shot":
        examples = "\n\n".join(t.render("few_shot_example", description=ex.description,
                                        vector=ex.vector_string) for ex in fewshot.examples)
        context = "\n" + t.render("context_few_shot", examples=examples) + "\n"
    elif variant.kind == "cwe" and record.cwe_texts:
        weaknesses = "\n\n".join(
            t.render("cwe_entry", id=e.id, description=e.description,
                     consequences=e.common_consequences or "(none listed)",
                     mitigations=e.potential_mitigations or "(none listed)")
            for e in record.cwe_texts)
        context = "\n" + t.render("context_cwe", weaknesses=weaknesses) + "\n"
    elif variant.kind == "cwe":
        context = "\n" + t.render("context_no_cwe")
    else:
        context = ""
    return t.render("vector", definitions=t.all_definitions(), context=context,
                    description=description)
