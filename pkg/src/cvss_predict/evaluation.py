"""Accuracy and score-regression metrics, and report files."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .cvss import COMPONENTS

POLICIES = ("wrong", "exclude")
FORMATS = ("json", "csv", "md")


class LengthMismatch(ValueError):
    pass


class MissingComponent(ValueError):
    pass


class NothingScoreable(ValueError):
    pass


def _pred_label(pred, component):
    if hasattr(pred, "label"):
        return pred.label(component)
    return pred[component]


def component_counts(preds, truths) -> dict[str, dict[str, int]]:
    """Per component: ``correct``, ``abstain`` and ``n`` counts."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(truths)} truths")
    counts = {c: {"correct": 0, "abstain": 0, "n": len(preds)} for c in COMPONENTS}
    for pred, truth in zip(preds, truths):
        for c in COMPONENTS:
            label = _pred_label(pred, c)
            if label is None:
                counts[c]["abstain"] += 1
            elif label == truth[c]:
                counts[c]["correct"] += 1
    return counts


def _accuracy(count: dict, policy: str) -> float:
    if policy not in POLICIES:
        raise ValueError(f"abstain policy must be one of {POLICIES}, got {policy!r}")
    denom = count["n"] if policy == "wrong" else count["n"] - count["abstain"]
    return count["correct"] / denom if denom else 0.0


def component_accuracy(preds, truths, abstain_policy: str = "wrong") -> dict[str, float]:
    """Fraction correct per component.

    Under ``"wrong"`` an abstention counts as an error; under ``"exclude"`` it
    is dropped from the denominator.
    """
    counts = component_counts(preds, truths)
    return {c: _accuracy(counts[c], abstain_policy) for c in COMPONENTS}


def mean_accuracy(per_component: dict) -> float:
    missing = [c for c in COMPONENTS if c not in per_component]
    if missing:
        raise MissingComponent(f"missing components {missing}")
    return math.fsum(per_component[c] for c in COMPONENTS) / len(COMPONENTS)


def regression_metrics(pred_scores, truth_scores) -> dict:
    """MSE and MAE over pairs whose prediction is scorable (not ``None``)."""
    pred_scores, truth_scores = list(pred_scores), list(truth_scores)
    if len(pred_scores) != len(truth_scores):
        raise LengthMismatch(f"{len(pred_scores)} predictions vs {len(truth_scores)} truths")
    errors = [p - t for p, t in zip(pred_scores, truth_scores) if p is not None and t is not None]
    if not errors:
        raise NothingScoreable("no scorable prediction/truth pairs")
    return {
        "mse": math.fsum(e * e for e in errors) / len(errors),
        "mae": math.fsum(abs(e) for e in errors) / len(errors),
        "n_scored": len(errors),
    }


@dataclass
class EvalReport:
    per_component_accuracy: dict
    mean_accuracy: float | None
    n: int
    abstain_counts: dict = field(default_factory=dict)
    correct_counts: dict = field(default_factory=dict)
    abstain_policy: str = "wrong"
    alternate_accuracy: dict = field(default_factory=dict)
    alternate_mean_accuracy: float | None = None
    score_metrics: dict | None = None
    run_metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, data: dict) -> "EvalReport":
        return cls(**data)


def evaluate(preds, truths, abstain_policy: str = "wrong", pred_scores=None, truth_scores=None,
             metadata: dict | None = None) -> EvalReport:
    """Build an :class:`EvalReport`; both abstain policies are always computed.

    ``preds`` may be ``None`` for direct-score runs, in which case only the
    regression metrics are filled in.
    """
    other = "exclude" if abstain_policy == "wrong" else "wrong"
    report = EvalReport(per_component_accuracy={}, mean_accuracy=None, n=0,
                        abstain_policy=abstain_policy, run_metadata=dict(metadata or {}))
    if preds is not None:
        counts = component_counts(preds, truths)
        report.per_component_accuracy = {c: _accuracy(counts[c], abstain_policy) for c in COMPONENTS}
        report.mean_accuracy = mean_accuracy(report.per_component_accuracy)
        report.alternate_accuracy = {c: _accuracy(counts[c], other) for c in COMPONENTS}
        report.alternate_mean_accuracy = mean_accuracy(report.alternate_accuracy)
        report.abstain_counts = {c: counts[c]["abstain"] for c in COMPONENTS}
        report.correct_counts = {c: counts[c]["correct"] for c in COMPONENTS}
        report.n = counts["AV"]["n"]
    if pred_scores is not None:
        try:
            report.score_metrics = regression_metrics(pred_scores, truth_scores)
        except NothingScoreable:
            report.score_metrics = {"mse": None, "mae": None, "n_scored": 0}
        report.n = report.n or len(pred_scores)
    return report


def _fmt(value) -> str:
    return "" if value is None else f"{value:.4f}"


def render_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def render_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "accuracy", "alternate_accuracy", "correct", "abstain", "n", "mse", "mae",
                "n_scored"])
    for c in COMPONENTS:
        w.writerow([c, _fmt(report.per_component_accuracy.get(c)),
                    _fmt(report.alternate_accuracy.get(c)), report.correct_counts.get(c, ""),
                    report.abstain_counts.get(c, ""), report.n, "", "", ""])
    w.writerow(["mean", _fmt(report.mean_accuracy), _fmt(report.alternate_mean_accuracy), "", "",
                report.n, "", "", ""])
    sm = report.score_metrics or {}
    w.writerow(["score", "", "", "", "", report.n, _fmt(sm.get("mse")), _fmt(sm.get("mae")),
                sm.get("n_scored", "")])
    return buf.getvalue()


def render_md(report: EvalReport) -> str:
    name = report.run_metadata.get("predictor", "predictor")
    lines = ["# Evaluation report", ""]
    if report.per_component_accuracy:
        lines += [
            "| Predictor | " + " | ".join(COMPONENTS) + " | Mean |",
            "|---" * (len(COMPONENTS) + 2) + "|",
            f"| {name} | " + " | ".join(_fmt(report.per_component_accuracy[c]) for c in COMPONENTS)
            + f" | {_fmt(report.mean_accuracy)} |",
            "| abstains | " + " | ".join(str(report.abstain_counts.get(c, 0)) for c in COMPONENTS)
            + " | |",
            "",
            f"Abstain policy: {report.abstain_policy} (mean under the other policy: "
            f"{_fmt(report.alternate_mean_accuracy)}); n = {report.n}",
            "",
        ]
    if report.score_metrics:
        sm = report.score_metrics
        lines += [
            "| Predictor | MSE | MAE | Scored |",
            "|---|---|---|---|",
            f"| {name} | {_fmt(sm['mse'])} | {_fmt(sm['mae'])} | {sm['n_scored']} |",
            "",
        ]
    return "\n".join(lines)


RENDERERS = {"json": render_json, "csv": render_csv, "md": render_md}


def emit_report(report: EvalReport, fmt: str, path) -> Path:
    if fmt not in RENDERERS:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    path = Path(path)
    path.write_text(RENDERERS[fmt](report), encoding="utf-8")
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def emit_plotdata(reports: dict, path) -> Path:
    """Write (component, predictor, accuracy) rows for external plotting."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "predictor", "accuracy"])
        for predictor, report in reports.items():
            for c in COMPONENTS:
                if c in report.per_component_accuracy:
                    w.writerow([c, predictor, _fmt(report.per_component_accuracy[c])])
    return path
