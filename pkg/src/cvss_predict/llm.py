"""Chat-completion client, response normalization and the vanilla LLM predictor."""
from __future__ import annotations

import json
import logging
import os
import random
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import httpx

from .cvss import COMPONENT_NAMES, COMPONENTS, LABEL_NAMES, LABELS, CvssVector
from .hybrid import ComponentPrediction, PredictedVector
from .ingest import EnrichedRecord, write_jsonl
from .prompts import FewShotSet, PromptVariant, TemplateSet, build_prompt, per_component

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = ("You are a precise vulnerability analyst. Follow the requested output format "
                 "exactly and do not add commentary.")
RETRY_STATUS = frozenset({429, 500, 502, 503, 504})


class LlmError(RuntimeError):
    pass


class EndpointUnreachable(LlmError):
    pass


class RateLimitedExhausted(LlmError):
    pass


class BadResponseShape(LlmError):
    pass


@dataclass(frozen=True)
class LlmResponse:
    raw: str
    stripped: str
    model: str
    latency_ms: int
    attempt: int


@dataclass(frozen=True)
class Abstain:
    """Normalization outcome when no rule yields a legal value."""

    raw: str = ""

    def __bool__(self):
        return False


def chat_url(base_url: str) -> str:
    base = base_url.rstrip("/")
    if base.endswith("/chat/completions"):
        return base
    return base + "/chat/completions"


class ChatClient:
    """Minimal client for OpenAI-compatible ``/v1/chat/completions`` endpoints.

    ``base_url`` is the API root including ``/v1``. Requests that hit 429,
    5xx, timeouts or connection errors are retried with exponential backoff
    (``backoff_base * backoff_factor**k`` plus up to 25% jitter).
    """

    def __init__(self, base_url: str, model: str, api_key: str | None = None,
                 temperature: float = 0.0, timeout: float = 120.0, max_retries: int = 3,
                 backoff_base: float = 1.0, backoff_factor: float = 2.0,
                 system_prompt: str | None = SYSTEM_PROMPT, sleep=time.sleep, seed: int | None = None):
        self.url = chat_url(base_url)
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.system_prompt = system_prompt
        self._sleep = sleep
        self._rng = random.Random(seed)
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=timeout, headers=headers)

    @classmethod
    def from_env(cls, base_url: str, model: str, api_key_env: str | None = None, **kwargs):
        key = os.environ.get(api_key_env) if api_key_env else None
        return cls(base_url, model, api_key=key, **kwargs)

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _payload(self, prompt: str) -> dict:
        messages = [{"role": "system", "content": self.system_prompt}] if self.system_prompt else []
        messages.append({"role": "user", "content": prompt})
        return {"model": self.model, "messages": messages, "temperature": self.temperature}

    def _backoff(self, attempt: int) -> float:
        delay = self.backoff_base * self.backoff_factor ** (attempt - 1)
        return delay * (1 + 0.25 * self._rng.random())

    def complete(self, prompt: str) -> LlmResponse:
        payload = self._payload(prompt)
        attempts = self.max_retries + 1
        last_error = None
        for attempt in range(1, attempts + 1):
            start = time.monotonic()
            try:
                resp = self._http.post(self.url, json=payload)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = EndpointUnreachable(f"{self.url}: {exc!r}")
            else:
                if resp.status_code in RETRY_STATUS:
                    last_error = RateLimitedExhausted(
                        f"{self.url}: HTTP {resp.status_code} after {attempt} attempts")
                elif resp.status_code >= 400:
                    raise LlmError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    raw = _content(resp)
                    return LlmResponse(raw=raw, stripped=strip_reasoning(raw), model=self.model,
                                       latency_ms=int((time.monotonic() - start) * 1000),
                                       attempt=attempt)
            if attempt < attempts:
                delay = self._backoff(attempt)
                logger.warning("chat request failed (%s); retry %d/%d in %.2fs", last_error,
                               attempt, self.max_retries, delay)
                self._sleep(delay)
        raise last_error


def _content(resp: httpx.Response) -> str:
    try:
        content = resp.json()["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BadResponseShape(f"unexpected chat response: {resp.text[:200]!r}") from exc
    if not isinstance(content, str):
        raise BadResponseShape(f"message content is not text: {content!r}")
    return content


def chat_complete(endpoint_url: str, model_name: str, prompt: str, temperature: float = 0.0,
                  timeout: float = 120.0, max_retries: int = 3, **kwargs) -> LlmResponse:
    with ChatClient(endpoint_url, model_name, temperature=temperature, timeout=timeout,
                    max_retries=max_retries, **kwargs) as client:
        return client.complete(prompt)


# --------------------------------------------------------------------------
# Normalization

_THINK_SPAN = re.compile(r"<think\b[^>]*>.*?</think\s*>", re.S | re.I)
_THINK_OPEN = re.compile(r"<think\b[^>]*>", re.I)
_THINK_CLOSE = re.compile(r"</think\s*>", re.I)


def strip_reasoning(raw: str) -> str:
    """Drop ``<think>...</think>`` spans.

    An unclosed opening tag removes everything after it; a dangling closing
    tag (some reasoning models omit the opener) removes everything before it.
    """
    text = _THINK_SPAN.sub("", raw)
    changed = text != raw
    m = _THINK_OPEN.search(text)
    if m:
        text, changed = text[:m.start()], True
    m = None
    for m in _THINK_CLOSE.finditer(text):
        pass
    if m:
        text, changed = text[m.end():], True
    return text.strip() if changed else text


_LABEL_SETS = {c: "".join(LABELS[c]) for c in COMPONENTS}

_CANONICAL = re.compile(
    r"CVSS:3\.1/" + "/".join(f"{c}:([{_LABEL_SETS[c]}])" for c in COMPONENTS) + r"(?![A-Za-z0-9])")

_SEP = r"\s*[/,;|]?\s*"
_LENIENT = re.compile(
    r"(?:CVSS\s*[:=]?\s*v?3\.1" + _SEP + r")?"
    + _SEP.join(rf"{c}\s*[:=]\s*([{_LABEL_SETS[c]}])" for c in COMPONENTS)
    + r"(?![A-Za-z0-9])", re.I)

_KEY_NAMES = {c: COMPONENT_NAMES[c].replace(" ", r"[\s_-]*") for c in COMPONENTS}
_KEY_NAMES.update({c: rf"{COMPONENT_NAMES[c]}(?:\s+Impact)?" for c in ("C", "I", "A")})

_EXTRA_WORDS = {"AV": {"Adjacent Network": "A"}, "UI": {"Not Required": "N"}}


def _word_map(component: str) -> dict[str, str]:
    words = {name.lower(): label for label, name in LABEL_NAMES[component].items()}
    words.update({w.lower(): label for w, label in _EXTRA_WORDS.get(component, {}).items()})
    return words


WORD_MAPS = {c: _word_map(c) for c in COMPONENTS}


def _value_pattern(component: str) -> str:
    words = sorted(WORD_MAPS[component], key=len, reverse=True)
    return "|".join([w.replace(" ", r"\s+") for w in words] + list(LABELS[component]))


_KEYED = {
    c: re.compile(
        rf"(?<![A-Za-z])(?:(?-i:{c})|{_KEY_NAMES[c]})(?:\s*\((?-i:{c})\))?\s*[:=]\s*"
        rf"({_value_pattern(c)})(?![A-Za-z])", re.I)
    for c in COMPONENTS
}
_BARE = {
    c: re.compile(rf"^\s*(?:{_value_pattern(c)})\s*[.!]?\s*$", re.I | re.M)
    for c in COMPONENTS
}


def _to_label(component: str, value: str) -> str:
    value = " ".join(value.split())
    if len(value) == 1:
        return value.upper()
    return WORD_MAPS[component][value.lower()]


def _clean(text: str) -> str:
    return re.sub(r"[*`]", "", text)


def _full_vector(text: str) -> CvssVector | None:
    for rule in (_CANONICAL, _LENIENT):
        m = rule.search(text)
        if m:
            return CvssVector(*(g.upper() for g in m.groups()))
    return None


def _keyed(text: str, component: str) -> str | None:
    m = _KEYED[component].search(text)
    return _to_label(component, m.group(1)) if m else None


def _bare(text: str, component: str) -> str | None:
    m = _BARE[component].search(text)
    return _to_label(component, m.group(0).strip().rstrip(".!").strip()) if m else None


def normalize_components(text: str) -> dict[str, str | None]:
    """Best-effort per-component extraction from a full-vector answer.

    Full-vector rules win; otherwise each component is read on its own and
    unmatched components come back as ``None``.
    """
    text = _clean(text)
    vector = _full_vector(text)
    if vector is not None:
        return vector.as_dict()
    return {c: _keyed(text, c) for c in COMPONENTS}


def normalize_vector_response(text: str, component: str | None = None):
    """Map a reasoning-stripped answer to a vector, a single label or :class:`Abstain`.

    Rules are tried in order and the first match wins:

    1. a canonical ``CVSS:3.1/...`` substring;
    2. the same vector with lenient separators, spacing or case;
    3. keyed patterns such as ``AV:N``, ``AV = Network`` or ``Attack Vector: Network``;
    4. (single-component mode only) a label word or letter alone on a line.

    With ``component=None`` a full :class:`CvssVector` is required.
    """
    cleaned = _clean(text)
    vector = _full_vector(cleaned)
    if component is None:
        if vector is not None:
            return vector
        labels = {c: _keyed(cleaned, c) for c in COMPONENTS}
        if all(labels.values()):
            return CvssVector.from_dict(labels)
        return Abstain(text)
    if vector is not None:
        return vector[component]
    label = _keyed(cleaned, component) or _bare(cleaned, component)
    return label if label is not None else Abstain(text)


_VERSION_MENTION = re.compile(r"CVSS\s*(?:v|version)?\s*:?\s*[234](?:\.\d)?", re.I)
_NUMBER = re.compile(r"(?<![\d.\-])\d+(?:\.\d+)?(?!\d)")


def normalize_score_response(text: str):
    """First numeral in [0, 10], ignoring CVSS version mentions; else :class:`Abstain`."""
    cleaned = _VERSION_MENTION.sub(" ", _clean(text))
    for m in _NUMBER.finditer(cleaned):
        value = float(m.group(0))
        if 0.0 <= value <= 10.0:
            return value
    return Abstain(text)


# --------------------------------------------------------------------------
# Vanilla prediction


@dataclass(frozen=True)
class ScorePrediction:
    cve_id: str
    score: float | None
    raw_ref: str | None = None

    def to_json(self) -> dict:
        return {"cve_id": self.cve_id, "score": self.score, "raw_ref": self.raw_ref}

    @classmethod
    def from_json(cls, row: dict) -> "ScorePrediction":
        return cls(row["cve_id"], row["score"], row.get("raw_ref"))


def audit_key(cve_id: str, variant: str, component: str | None) -> str:
    return f"{cve_id}|{variant}|{component or '*'}"


class VanillaPredictor:
    """Prompt a chat model per record and normalize its answers.

    Follows the estimator protocol so it composes with the embedding
    predictor; ``fit`` is a no-op because nothing is trained.
    """

    def __init__(self, client: ChatClient, variant: PromptVariant | str = "base",
                 fewshot: FewShotSet | None = None, templates: TemplateSet | None = None,
                 max_in_flight: int = 4):
        self.client = client
        self.variant = variant
        self.fewshot = fewshot
        self.templates = templates
        self.max_in_flight = max_in_flight
        self.audit_: list[dict] = []
        self.errors_: list[dict] = []

    def get_params(self, deep=False):
        return {"client": self.client, "variant": self.variant, "fewshot": self.fewshot,
                "templates": self.templates, "max_in_flight": self.max_in_flight}

    def fit(self, X=None, y=None):
        return self

    @property
    def _variant(self) -> PromptVariant:
        v = self.variant
        return PromptVariant.parse(v) if isinstance(v, str) else v

    def _tasks(self, records) -> list[tuple[int, str | None, str]]:
        variant = self._variant
        fewshot = self.fewshot
        if variant.kind == "few-shot" and fewshot is None:
            fewshot = FewShotSet.load()
        tasks = []
        for idx, rec in enumerate(records):
            if variant.kind == "per-component":
                # One query per metric regardless of which component was named.
                for comp in COMPONENTS:
                    tasks.append((idx, comp, build_prompt(rec, per_component(comp), None,
                                                          self.templates)))
            else:
                tasks.append((idx, None, build_prompt(rec, variant, fewshot, self.templates)))
        return tasks

    def _run(self, records) -> dict:
        tasks = self._tasks(records)
        variant = self._variant.kind

        def call(task):
            idx, comp, prompt = task
            try:
                return task, self.client.complete(prompt), None
            except LlmError as exc:
                return task, None, exc

        with ThreadPoolExecutor(max_workers=max(1, self.max_in_flight)) as pool:
            outcomes = list(pool.map(call, tasks))

        results = {}
        self.audit_, self.errors_ = [], []
        for (idx, comp, _), resp, err in outcomes:
            cve_id = records[idx].id
            key = audit_key(cve_id, variant, comp)
            results[(idx, comp)] = (resp, key)
            row = {"key": key, "cve_id": cve_id, "variant": variant, "component": comp}
            if err is not None:
                row.update(error=f"{type(err).__name__}: {err}")
                self.errors_.append(row)
                logger.error("query %s failed: %s", key, err)
            else:
                row.update(model=resp.model, attempt=resp.attempt, latency_ms=resp.latency_ms,
                           raw=resp.raw, stripped=resp.stripped)
            self.audit_.append(row)
        return results

    def predict(self, records) -> list[PredictedVector]:
        records = list(records)
        if self._variant.kind == "direct-score":
            raise ValueError("direct-score prompts produce scores; use predict_scores")
        results = self._run(records)
        preds = []
        for idx, rec in enumerate(records):
            if self._variant.kind == "per-component":
                labels, refs = {}, {}
                for comp in COMPONENTS:
                    resp, key = results[(idx, comp)]
                    refs[comp] = key
                    if resp is not None:
                        value = normalize_vector_response(resp.stripped, comp)
                        labels[comp] = None if isinstance(value, Abstain) else value
            else:
                resp, key = results[(idx, None)]
                refs = dict.fromkeys(COMPONENTS, key)
                labels = normalize_components(resp.stripped) if resp is not None else {}
            preds.append(PredictedVector(rec.id, {
                c: ComponentPrediction(labels.get(c), "llm", refs[c]) for c in COMPONENTS}))
        return preds

    def predict_scores(self, records) -> list[ScorePrediction]:
        records = list(records)
        if self._variant.kind != "direct-score":
            raise ValueError("predict_scores needs the direct-score variant")
        results = self._run(records)
        out = []
        for idx, rec in enumerate(records):
            resp, key = results[(idx, None)]
            value = normalize_score_response(resp.stripped) if resp is not None else Abstain()
            out.append(ScorePrediction(rec.id, None if isinstance(value, Abstain) else value, key))
        return out

    def write_audit(self, path) -> None:
        write_jsonl(self.audit_, path)


def predict_vanilla(records: list[EnrichedRecord], variant, client: ChatClient,
                    fewshot: FewShotSet | None = None, max_in_flight: int = 4,
                    audit_path=None) -> list[PredictedVector]:
    predictor = VanillaPredictor(client, variant, fewshot, max_in_flight=max_in_flight)
    preds = predictor.predict(records)
    if audit_path is not None:
        predictor.write_audit(audit_path)
    return preds


def load_audit(path) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        return {row["key"]: row for row in map(json.loads, fh) if row}
