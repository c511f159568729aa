"""Load cvelistV5 snapshots and MITRE CWE catalogs, enrich and split records."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import subprocess
import xml.etree.ElementTree as ET
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .cvss import CvssVector, MalformedVector, base_score, parse_vector

logger = logging.getLogger(__name__)

CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
CWE_ID_RE = re.compile(r"^CWE-\d+$")
SCORE_TOLERANCE = 0.05

# Counting rule recorded in every manifest.
COUNTING_RULE = ("one record per CVE file; first cvssV3_1 block of containers.cna.metrics; "
                 "ADP containers ignored; score mismatches > 0.05 quarantined")


class IngestError(RuntimeError):
    pass


class CatalogParseError(ValueError):
    pass


class TooFewRecords(ValueError):
    pass


def cve_sort_key(cve_id: str) -> tuple[int, int, str]:
    """Numeric ordering for CVE ids (CVE-2024-2000 sorts before CVE-2024-10000)."""
    try:
        _, year, num = cve_id.split("-", 2)
        return int(year), int(num), cve_id
    except ValueError:
        return 0, 0, cve_id


@dataclass(frozen=True)
class CveRecord:
    id: str
    description: str
    published: datetime
    vector_string: str
    vector: CvssVector
    base_score_truth: float | None
    cwe_ids: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "description": self.description,
            "published": self.published.isoformat(),
            "vector_string": self.vector_string,
            "base_score_truth": self.base_score_truth,
            "cwe_ids": list(self.cwe_ids),
        }

    @classmethod
    def from_json(cls, row: dict) -> "CveRecord":
        vector = parse_vector(row["vector_string"])
        return cls(
            id=row["id"],
            description=row["description"],
            published=_parse_timestamp(row["published"]),
            vector_string=row["vector_string"],
            vector=vector,
            base_score_truth=row.get("base_score_truth"),
            cwe_ids=tuple(row.get("cwe_ids") or ()),
        )


@dataclass(frozen=True)
class CweEntry:
    id: str
    description: str
    common_consequences: str = ""
    potential_mitigations: str = ""


@dataclass(frozen=True)
class EnrichedRecord:
    record: CveRecord
    cwe_texts: tuple[CweEntry, ...] = ()

    @property
    def id(self) -> str:
        return self.record.id


@dataclass
class EnrichStats:
    resolved: int = 0
    missing: Counter = field(default_factory=Counter)

    @property
    def n_missing(self) -> int:
        return sum(self.missing.values())


@dataclass
class IngestResult:
    records: list[CveRecord]
    skipped: Counter
    quarantined: list[dict]
    n_files: int

    def summary(self) -> dict:
        return {
            "files": self.n_files,
            "loaded": len(self.records),
            "quarantined": len(self.quarantined),
            "skipped": dict(sorted(self.skipped.items())),
        }


@dataclass(frozen=True)
class DatasetSplit:
    train: list[CveRecord]
    test: list[CveRecord]
    vanilla_test: list[CveRecord]
    seed: int

    def overlap(self) -> dict[str, int]:
        vanilla = {r.id for r in self.vanilla_test}
        return {
            "vanilla_train": len(vanilla & {r.id for r in self.train}),
            "vanilla_test": len(vanilla & {r.id for r in self.test}),
        }


def _parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts


# --------------------------------------------------------------------------
# cvelistV5


def _english_description(cna: dict) -> str | None:
    for desc in cna.get("descriptions") or []:
        lang = str(desc.get("lang", "")).lower()
        value = (desc.get("value") or "").strip()
        if lang.startswith("en") and value:
            return value
    return None


def _first_v31_block(cna: dict) -> dict | None:
    for metric in cna.get("metrics") or []:
        block = metric.get("cvssV3_1")
        if isinstance(block, dict) and block.get("vectorString"):
            return block
    return None


def _cwe_ids(cna: dict) -> tuple[str, ...]:
    ids = []
    for problem in cna.get("problemTypes") or []:
        for desc in problem.get("descriptions") or []:
            cwe = desc.get("cweId")
            if cwe and CWE_ID_RE.match(cwe) and cwe not in ids:
                ids.append(cwe)
    return tuple(ids)


def parse_cve_file(path: Path) -> tuple[str, object]:
    """Parse one cvelistV5 JSON file.

    Returns ``("ok", CveRecord)``, ``("quarantine", row)`` or
    ``("skip", reason)``; never raises on malformed content.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError):
        return "skip", "malformed_json"
    meta = doc.get("cveMetadata") or {}
    cve_id = meta.get("cveId", "")
    if not CVE_ID_RE.match(cve_id):
        return "skip", "bad_id"
    if meta.get("state") == "REJECTED":
        return "skip", "rejected"
    cna = (doc.get("containers") or {}).get("cna") or {}
    block = _first_v31_block(cna)
    if block is None:
        return "skip", "no_cvss_v3_1"
    description = _english_description(cna)
    if description is None:
        return "skip", "no_english_description"
    stamp = meta.get("datePublished")
    if not stamp:
        return "skip", "no_publish_date"
    try:
        published = _parse_timestamp(stamp)
    except ValueError:
        return "skip", "bad_publish_date"
    vector_string = block["vectorString"].strip()
    try:
        vector = parse_vector(vector_string)
    except MalformedVector:
        return "skip", "malformed_vector"
    truth = block.get("baseScore")
    truth = float(truth) if isinstance(truth, (int, float)) else None
    record = CveRecord(cve_id, description, published, vector_string, vector, truth, _cwe_ids(cna))
    if truth is not None and abs(base_score(vector).base - truth) > SCORE_TOLERANCE:
        row = record.to_json()
        row["computed_base_score"] = base_score(vector).base
        row["source_file"] = str(path)
        return "quarantine", row
    return "ok", record


def load_cve_repo(root_dir, workers: int = 8) -> IngestResult:
    """Load every CVE with a CNA-assigned CVSS v3.1 vector under ``root_dir``.

    Expects the cvelistV5 layout (``cves/<year>/<prefix>/CVE-*.json``); a bare
    directory of CVE files also works. Output is sorted by numeric CVE id, so
    traversal order and scheduling do not matter.
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise IngestError(f"not a directory: {root}")
    base = root / "cves" if (root / "cves").is_dir() else root
    try:
        files = sorted(base.rglob("CVE-*.json"))
    except OSError as exc:
        raise IngestError(f"cannot read {base}: {exc}") from exc
    if not files:
        raise IngestError(f"no CVE-*.json files under {base}")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(parse_cve_file, files))

    records, quarantined, skipped = [], [], Counter()
    for status, payload in outcomes:
        if status == "ok":
            records.append(payload)
        elif status == "quarantine":
            quarantined.append(payload)
        else:
            skipped[payload] += 1
    records.sort(key=lambda r: cve_sort_key(r.id))
    quarantined.sort(key=lambda r: cve_sort_key(r["id"]))
    logger.info("loaded %d records from %d files (%d quarantined)", len(records), len(files),
                len(quarantined))
    return IngestResult(records, skipped, quarantined, len(files))


# --------------------------------------------------------------------------
# Dataset cache


def write_jsonl(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_dataset(records, path) -> None:
    write_jsonl((r.to_json() for r in records), path)


def load_dataset(path) -> list[CveRecord]:
    return [CveRecord.from_json(row) for row in read_jsonl(path)]


def _git_commit(root: Path) -> str | None:
    try:
        out = subprocess.run(["git", "-C", str(root), "rev-parse", "HEAD"], capture_output=True,
                             text=True, timeout=10, check=True)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() or None


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_snapshot(result: IngestResult, repo_dir, out_dir) -> dict:
    """Write ``dataset.jsonl``, ``quarantine.jsonl`` and ``manifest.json``.

    The manifest carries no timestamps, so re-ingesting an unchanged snapshot
    reproduces it byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(result.records, out / "dataset.jsonl")
    write_jsonl(result.quarantined, out / "quarantine.jsonl")
    years = sorted(r.published.year for r in result.records)
    manifest = {
        "source_commit": _git_commit(Path(repo_dir)),
        "counting_rule": COUNTING_RULE,
        "counts": result.summary(),
        "published_years": [years[0], years[-1]] if years else None,
        "dataset_sha256": file_sha256(out / "dataset.jsonl"),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


# --------------------------------------------------------------------------
# CWE catalog


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _text(elem) -> str:
    if elem is None:
        return ""
    return " ".join(" ".join(elem.itertext()).split())


def _child(elem, name):
    for c in elem:
        if _local(c.tag) == name:
            return c
    return None


def _children(elem, name):
    return [c for c in elem if _local(c.tag) == name]


def _xml_consequences(weakness) -> str:
    block = _child(weakness, "Common_Consequences")
    lines = []
    for cons in _children(block, "Consequence") if block is not None else []:
        scopes = ", ".join(_text(s) for s in _children(cons, "Scope"))
        impacts = ", ".join(_text(s) for s in _children(cons, "Impact"))
        note = _text(_child(cons, "Note"))
        line = f"Scope: {scopes}; Impact: {impacts}"
        lines.append(f"{line}. {note}" if note else line)
    return "\n".join(lines)


def _xml_mitigations(weakness) -> str:
    block = _child(weakness, "Potential_Mitigations")
    lines = []
    for mit in _children(block, "Mitigation") if block is not None else []:
        phases = ", ".join(_text(p) for p in _children(mit, "Phase"))
        desc = _text(_child(mit, "Description"))
        lines.append(f"{phases}: {desc}" if phases else desc)
    return "\n".join(line for line in lines if line)


def _load_xml_catalog(path: Path) -> dict[str, CweEntry]:
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        raise CatalogParseError(f"{path}: XML error at line {exc.position[0]}: {exc}") from exc
    catalog: dict[str, CweEntry] = {}
    for weakness in tree.getroot().iter():
        if _local(weakness.tag) != "Weakness":
            continue
        raw_id = weakness.get("ID")
        if not raw_id or not raw_id.isdigit():
            raise CatalogParseError(f"{path}: Weakness element without numeric ID "
                                    f"(Name={weakness.get('Name')!r})")
        entry = CweEntry(
            id=f"CWE-{raw_id}",
            description=_text(_child(weakness, "Description")),
            common_consequences=_xml_consequences(weakness),
            potential_mitigations=_xml_mitigations(weakness),
        )
        _add_entry(catalog, entry, f"{path}: Weakness ID={raw_id}")
    return catalog


def _csv_field(text: str) -> str:
    # MITRE CSV exports pack list items as "::KEY:value:KEY:value::".
    items = [item.strip() for item in (text or "").split("::") if item.strip()]
    return "\n".join(items)


def _load_csv_catalog(path: Path) -> dict[str, CweEntry]:
    catalog: dict[str, CweEntry] = {}
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return catalog
        if "CWE-ID" not in reader.fieldnames:
            raise CatalogParseError(f"{path}: header lacks a CWE-ID column")
        for line_no, row in enumerate(reader, start=2):
            raw_id = (row.get("CWE-ID") or "").strip().removeprefix("CWE-")
            if not raw_id.isdigit():
                raise CatalogParseError(f"{path}: row {line_no}: bad CWE-ID {raw_id!r}")
            entry = CweEntry(
                id=f"CWE-{raw_id}",
                description=" ".join((row.get("Description") or "").split()),
                common_consequences=_csv_field(row.get("Common Consequences")),
                potential_mitigations=_csv_field(row.get("Potential Mitigations")),
            )
            _add_entry(catalog, entry, f"{path}: row {line_no}")
    return catalog


def _add_entry(catalog, entry: CweEntry, where: str) -> None:
    if entry.id in catalog:
        raise CatalogParseError(f"{where}: duplicate {entry.id}")
    if not entry.description:
        logger.debug("dropping %s without description (%s)", entry.id, where)
        return
    catalog[entry.id] = entry


def load_cwe_catalog(path) -> dict[str, CweEntry]:
    """Load a MITRE CWE list export (XML or CSV) keyed by ``CWE-N``."""
    path = Path(path)
    try:
        head = path.read_bytes()[:512]
    except OSError as exc:
        raise IngestError(f"cannot read CWE catalog {path}: {exc}") from exc
    if not head.strip():
        return {}
    if path.suffix.lower() == ".xml" or head.lstrip().startswith(b"<"):
        return _load_xml_catalog(path)
    return _load_csv_catalog(path)


def enrich(records, catalog) -> tuple[list[EnrichedRecord], EnrichStats]:
    stats = EnrichStats()
    out = []
    for record in records:
        found = []
        for cwe in record.cwe_ids:
            if cwe in catalog:
                found.append(catalog[cwe])
                stats.resolved += 1
            else:
                stats.missing[cwe] += 1
        out.append(EnrichedRecord(record, tuple(found)))
    return out, stats


# --------------------------------------------------------------------------
# Splits


def make_splits(records, seed: int = 42, k_vanilla: int = 1000) -> DatasetSplit:
    """Seeded 80/20 train/test partition plus the ``k_vanilla`` most recent records."""
    records = list(records)
    if len(records) < 5:
        raise TooFewRecords(f"need at least 5 records, got {len(records)}")
    order = np.random.default_rng(seed).permutation(len(records))
    n_train = round(0.8 * len(records))
    train = [records[i] for i in order[:n_train]]
    test = [records[i] for i in order[n_train:]]
    by_recency = sorted(records, key=lambda r: cve_sort_key(r.id))
    by_recency.sort(key=lambda r: r.published, reverse=True)
    return DatasetSplit(train, test, by_recency[:k_vanilla], seed)


def record_fingerprint(records) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps(r.to_json(), sort_keys=True).encode())
    return h.hexdigest()


__all__ = [
    "CveRecord", "CweEntry", "EnrichedRecord", "DatasetSplit", "IngestResult", "EnrichStats",
    "IngestError", "CatalogParseError", "TooFewRecords", "load_cve_repo", "parse_cve_file",
    "load_cwe_catalog", "enrich", "make_splits", "save_dataset", "load_dataset", "write_snapshot",
]
