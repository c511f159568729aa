"""Per-component predictions and routing between the LLM and embedding predictors."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType

from .cvss import COMPONENTS, LABELS, CvssVector, base_score

SOURCES = ("llm", "embedding")

DEFAULT_ROUTING = MappingProxyType({
    "AV": "llm", "AC": "llm", "UI": "llm",
    "PR": "embedding", "S": "embedding", "C": "embedding", "I": "embedding", "A": "embedding",
})


class CveMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ComponentPrediction:
    """One predicted metric; ``label is None`` means the predictor abstained."""

    label: str | None
    provenance: str
    raw_ref: str | None = None
    fallback: bool = False

    @property
    def abstained(self) -> bool:
        return self.label is None


@dataclass(frozen=True)
class PredictedVector:
    cve_id: str
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.components) != set(COMPONENTS):
            raise ValueError(f"prediction for {self.cve_id} must cover all 8 components")
        for comp, pred in self.components.items():
            if pred.label is not None and pred.label not in LABELS[comp]:
                raise ValueError(f"illegal {comp} label {pred.label!r}")

    def __getitem__(self, component: str) -> ComponentPrediction:
        return self.components[component]

    def label(self, component: str) -> str | None:
        return self.components[component].label

    @property
    def abstains(self) -> list[str]:
        return [c for c in COMPONENTS if self.components[c].abstained]

    @property
    def vector(self) -> CvssVector | None:
        if self.abstains:
            return None
        return CvssVector(*(self.components[c].label for c in COMPONENTS))

    @property
    def base_score(self) -> float | None:
        v = self.vector
        return None if v is None else base_score(v).base

    @classmethod
    def from_vector(cls, cve_id: str, vector: CvssVector, provenance: str,
                    raw_ref: str | None = None) -> "PredictedVector":
        return cls(cve_id, {c: ComponentPrediction(vector[c], provenance, raw_ref)
                            for c in COMPONENTS})

    @classmethod
    def from_labels(cls, cve_id: str, labels: dict, provenance: str,
                    raw_refs: dict | None = None) -> "PredictedVector":
        raw_refs = raw_refs or {}
        return cls(cve_id, {c: ComponentPrediction(labels.get(c), provenance, raw_refs.get(c))
                            for c in COMPONENTS})

    def to_json(self) -> dict:
        v = self.vector
        return {
            "cve_id": self.cve_id,
            "components": {c: {"label": p.label, "provenance": p.provenance, "raw_ref": p.raw_ref,
                               "fallback": p.fallback}
                           for c, p in ((c, self.components[c]) for c in COMPONENTS)},
            "vector": None if v is None else str(v),
            "base_score": self.base_score,
        }

    @classmethod
    def from_json(cls, row: dict) -> "PredictedVector":
        return cls(row["cve_id"], {c: ComponentPrediction(p["label"], p["provenance"],
                                                          p.get("raw_ref"), p.get("fallback", False))
                                   for c, p in row["components"].items()})


def validate_routing(routing) -> dict[str, str]:
    routing = dict(routing)
    missing = [c for c in COMPONENTS if c not in routing]
    if missing:
        raise ValueError(f"routing map is missing components {missing}")
    extra = set(routing) - set(COMPONENTS)
    if extra:
        raise ValueError(f"routing map has unknown components {sorted(extra)}")
    bad = {c: s for c, s in routing.items() if s not in SOURCES}
    if bad:
        raise ValueError(f"routing sources must be one of {SOURCES}: {bad}")
    return {c: routing[c] for c in COMPONENTS}


def route(llm_pred: PredictedVector, emb_pred: PredictedVector, routing=DEFAULT_ROUTING,
          fallback: bool = True) -> PredictedVector:
    """Take each component from the source the routing map names.

    When the chosen source abstained and ``fallback`` is on, the other source's
    label is used and the component is flagged with ``fallback=True``.
    """
    if llm_pred.cve_id != emb_pred.cve_id:
        raise CveMismatch(f"{llm_pred.cve_id} != {emb_pred.cve_id}")
    routing = validate_routing(routing)
    sources = {"llm": llm_pred, "embedding": emb_pred}
    out = {}
    for comp in COMPONENTS:
        primary = routing[comp]
        pred = sources[primary][comp]
        if pred.abstained and fallback:
            other = sources["embedding" if primary == "llm" else "llm"][comp]
            if not other.abstained:
                pred = replace(other, fallback=True)
        out[comp] = pred
    return PredictedVector(llm_pred.cve_id, out)


def score_prediction(pred: PredictedVector) -> float | None:
    """Base score of the assembled vector, or ``None`` when it is unscorable."""
    return pred.base_score
