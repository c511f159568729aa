"""CVSS v3.1 base metrics: strict parsing, canonical serialization and scoring."""
from __future__ import annotations

import itertools
import math
import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterator

PREFIX = "CVSS:3.1/"

COMPONENTS = ("AV", "AC", "PR", "UI", "S", "C", "I", "A")

# Legal labels in legend order; the order also fixes class order for classifiers.
LABELS = MappingProxyType({
    "AV": ("N", "A", "L", "P"),
    "AC": ("L", "H"),
    "PR": ("N", "L", "H"),
    "UI": ("N", "R"),
    "S": ("U", "C"),
    "C": ("N", "L", "H"),
    "I": ("N", "L", "H"),
    "A": ("N", "L", "H"),
})

COMPONENT_NAMES = MappingProxyType({
    "AV": "Attack Vector",
    "AC": "Attack Complexity",
    "PR": "Privileges Required",
    "UI": "User Interaction",
    "S": "Scope",
    "C": "Confidentiality",
    "I": "Integrity",
    "A": "Availability",
})

LABEL_NAMES = MappingProxyType({
    "AV": {"N": "Network", "A": "Adjacent", "L": "Local", "P": "Physical"},
    "AC": {"L": "Low", "H": "High"},
    "PR": {"N": "None", "L": "Low", "H": "High"},
    "UI": {"N": "None", "R": "Required"},
    "S": {"U": "Unchanged", "C": "Changed"},
    "C": {"N": "None", "L": "Low", "H": "High"},
    "I": {"N": "None", "L": "Low", "H": "High"},
    "A": {"N": "None", "L": "Low", "H": "High"},
})

# Metric weights from the CVSS v3.1 specification, section 7.4.
WEIGHTS = MappingProxyType({
    "AV": {"N": 0.85, "A": 0.62, "L": 0.55, "P": 0.2},
    "AC": {"L": 0.77, "H": 0.44},
    "UI": {"N": 0.85, "R": 0.62},
    "CIA": {"H": 0.56, "L": 0.22, "N": 0.0},
})
PR_WEIGHTS = MappingProxyType({
    "U": {"N": 0.85, "L": 0.62, "H": 0.27},
    "C": {"N": 0.85, "L": 0.68, "H": 0.5},
})

_PART_RE = re.compile(r"^([A-Za-z]+):(.*)$")


class MalformedVector(ValueError):
    """Raised when a string is not a canonical CVSS v3.1 base vector.

    ``kind`` is one of ``prefix``, ``syntax``, ``order``, ``duplicate``,
    ``unknown_metric``, ``label``, ``missing`` or ``trailing``. ``metric`` names
    the offending metric when there is one and ``position`` is the zero-based
    index of the offending ``/``-separated part after the prefix.
    """

    def __init__(self, kind: str, message: str, metric: str | None = None,
                 position: int | None = None):
        super().__init__(message)
        self.kind = kind
        self.metric = metric
        self.position = position


@dataclass(frozen=True)
class CvssVector:
    av: str
    ac: str
    pr: str
    ui: str
    s: str
    c: str
    i: str
    a: str

    version = "3.1"

    def __post_init__(self):
        for comp, value in zip(COMPONENTS, self.labels()):
            if value not in LABELS[comp]:
                raise MalformedVector("label", f"illegal {comp} label {value!r}", metric=comp)

    def labels(self) -> tuple[str, ...]:
        return (self.av, self.ac, self.pr, self.ui, self.s, self.c, self.i, self.a)

    def __getitem__(self, component: str) -> str:
        return getattr(self, component.lower())

    def as_dict(self) -> dict[str, str]:
        return dict(zip(COMPONENTS, self.labels()))

    @classmethod
    def from_dict(cls, labels: dict[str, str]) -> "CvssVector":
        return cls(*(labels[c] for c in COMPONENTS))

    @classmethod
    def from_string(cls, text: str) -> "CvssVector":
        return parse_vector(text)

    def __str__(self) -> str:
        return serialize_vector(self)


@dataclass(frozen=True)
class ScoreBreakdown:
    iss: float
    impact: float
    exploitability: float
    base: float


def parse_vector(text: str) -> CvssVector:
    """Parse a canonical ``CVSS:3.1/AV:x/.../A:x`` string.

    Metrics must appear exactly once and in canonical order; anything else
    raises :class:`MalformedVector`. Lenient reading of model output lives in
    :mod:`cvss_predict.llm`.
    """
    if not isinstance(text, str) or not text.startswith(PREFIX):
        raise MalformedVector("prefix", f"vector must start with {PREFIX!r}: {text!r}")
    parts = text[len(PREFIX):].split("/")
    seen: dict[str, str] = {}
    for pos, part in enumerate(parts):
        if pos >= len(COMPONENTS):
            raise MalformedVector("trailing", f"unexpected trailing content {'/'.join(parts[pos:])!r}",
                                  position=pos)
        expected = COMPONENTS[pos]
        m = _PART_RE.match(part)
        if m is None:
            raise MalformedVector("syntax", f"part {pos} {part!r} is not METRIC:VALUE",
                                  metric=expected, position=pos)
        key, value = m.groups()
        if key != expected:
            if key in seen:
                raise MalformedVector("duplicate", f"metric {key} repeated", metric=key, position=pos)
            if key in COMPONENTS:
                raise MalformedVector("order", f"expected {expected} at position {pos}, got {key}",
                                      metric=expected, position=pos)
            raise MalformedVector("unknown_metric", f"unknown metric {key!r}", metric=key, position=pos)
        if value not in LABELS[key]:
            if pos == len(COMPONENTS) - 1 and value[:1] in LABELS[key] and len(value) > 1:
                raise MalformedVector("trailing", f"unexpected trailing content {value[1:]!r}",
                                      metric=key, position=pos)
            raise MalformedVector("label", f"illegal {key} label {value!r}", metric=key, position=pos)
        seen[key] = value
    if len(seen) < len(COMPONENTS):
        missing = COMPONENTS[len(seen)]
        raise MalformedVector("missing", f"missing metric {missing}", metric=missing,
                              position=len(seen))
    return CvssVector(*(seen[c] for c in COMPONENTS))


def serialize_vector(v: CvssVector) -> str:
    return PREFIX + "/".join(f"{c}:{label}" for c, label in zip(COMPONENTS, v.labels()))


def roundup(x: float) -> float:
    """Smallest one-decimal value >= x, via integer scaling to dodge float drift."""
    n = round(x * 100000)
    if n % 10000 == 0:
        return n / 100000.0
    return (math.floor(n / 10000) + 1) / 10.0


def base_score(v: CvssVector) -> ScoreBreakdown:
    cia = WEIGHTS["CIA"]
    iss = 1 - ((1 - cia[v.c]) * (1 - cia[v.i]) * (1 - cia[v.a]))
    if v.s == "U":
        impact = 6.42 * iss
    else:
        impact = 7.52 * (iss - 0.029) - 3.25 * (iss - 0.02) ** 15
    exploitability = (8.22 * WEIGHTS["AV"][v.av] * WEIGHTS["AC"][v.ac]
                      * PR_WEIGHTS[v.s][v.pr] * WEIGHTS["UI"][v.ui])
    if impact <= 0:
        base = 0.0
    elif v.s == "U":
        base = roundup(min(impact + exploitability, 10))
    else:
        base = roundup(min(1.08 * (impact + exploitability), 10))
    return ScoreBreakdown(iss=iss, impact=impact, exploitability=exploitability, base=base)


def enumerate_all_vectors() -> Iterator[CvssVector]:
    """Yield every valid base vector once, ordered by legend label order."""
    for combo in itertools.product(*(LABELS[c] for c in COMPONENTS)):
        yield CvssVector(*combo)


N_VECTORS = math.prod(len(LABELS[c]) for c in COMPONENTS)
