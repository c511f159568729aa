"""Pipeline configuration file (YAML)."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .evaluation import FORMATS, POLICIES
from .hybrid import DEFAULT_ROUTING, validate_routing
from .prompts import PromptVariant

DEFAULTS = {
    "endpoints": {
        "chat_url": "http://localhost:11434/v1",
        "chat_model": "gemma3:12b",
        "embed_url": "http://localhost:11434/v1",
        "embed_model": "all-minilm",
        "api_key_env": "OPENAI_API_KEY",
    },
    "dataset": {
        "repo_dir": None,
        "cwe_catalog": None,
        "cache_dir": "work",
        "k_vanilla": 1000,
        "split_seed": 42,
    },
    "prompts": {
        "template_dir": None,
        "fewshot_path": None,
        "variant": "base",
    },
    "classifier": {
        "features": "desc",
        "l2": 1e-4,
        "lr": 0.1,
        "epochs": 200,
        "batch_size": 64,
        "seed": 42,
        "class_weight": None,
    },
    "routing": dict(DEFAULT_ROUTING),
    "eval": {
        "abstain_policy": "wrong",
        "fallback": True,
        "formats": ["json", "csv", "md"],
    },
    "concurrency": {
        "max_in_flight": 4,
        "timeout_s": 120.0,
        "max_retries": 3,
        "backoff_base_s": 1.0,
    },
}

PATH_KEYS = {("dataset", "repo_dir"), ("dataset", "cwe_catalog"), ("dataset", "cache_dir"),
             ("prompts", "template_dir"), ("prompts", "fewshot_path")}
FLOAT_KEYS = {("classifier", "l2"), ("classifier", "lr"), ("concurrency", "timeout_s"),
              ("concurrency", "backoff_base_s")}
INT_KEYS = {("dataset", "k_vanilla"), ("dataset", "split_seed"), ("classifier", "epochs"),
            ("classifier", "batch_size"), ("classifier", "seed"), ("concurrency", "max_in_flight"),
            ("concurrency", "max_retries")}


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    endpoints: dict
    dataset: dict
    prompts: dict
    classifier: dict
    routing: dict
    eval: dict
    concurrency: dict
    source: Path | None = None

    @property
    def cache_dir(self) -> Path:
        return Path(self.dataset["cache_dir"])

    @property
    def hyperparams(self) -> dict:
        return {k: v for k, v in self.classifier.items() if k != "features"}

    def require_path(self, section: str, key: str, kind: str = "exists") -> Path:
        value = getattr(self, section).get(key)
        if value is None:
            raise ConfigError(f"{section}.{key} must be set")
        path = Path(value)
        if kind == "dir" and not path.is_dir():
            raise ConfigError(f"{section}.{key}: directory not found: {path}")
        if kind == "exists" and not path.exists():
            raise ConfigError(f"{section}.{key}: path not found: {path}")
        return path


def _merge(section: str, defaults: dict, given) -> dict:
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(given) - set(defaults)
    if unknown and section != "routing":
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    merged = copy.deepcopy(defaults)
    merged.update(given)
    return merged


def build_config(data: dict | None, base_dir: Path | None = None) -> Config:
    data = data or {}
    unknown = set(data) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    sections = {name: _merge(name, DEFAULTS[name], data.get(name)) for name in DEFAULTS}
    if "routing" in data:
        sections["routing"] = dict(data["routing"] or {})
    try:
        for section, key in FLOAT_KEYS:
            sections[section][key] = float(sections[section][key])
        for section, key in INT_KEYS:
            sections[section][key] = int(sections[section][key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad numeric value: {exc}") from exc
    for section, key in PATH_KEYS:
        value = sections[section][key]
        if value is not None and base_dir is not None and not Path(value).is_absolute():
            sections[section][key] = str(base_dir / value)
    try:
        sections["routing"] = validate_routing(sections["routing"])
        PromptVariant.parse(sections["prompts"]["variant"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if sections["eval"]["abstain_policy"] not in POLICIES:
        raise ConfigError(f"eval.abstain_policy must be one of {POLICIES}")
    bad_formats = set(sections["eval"]["formats"]) - set(FORMATS)
    if bad_formats:
        raise ConfigError(f"unknown report formats {sorted(bad_formats)}")
    if sections["classifier"]["features"] not in ("desc", "desc+cwe"):
        raise ConfigError("classifier.features must be 'desc' or 'desc+cwe'")
    return Config(**sections)


def load_config(path) -> Config:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = build_config(data, path.parent.resolve())
    cfg.source = path
    return cfg
