"""Declarative pipeline configuration.

One YAML tree controls every tunable in the pipeline; the schema below is
the published contract and rejects unknown keys, so there is no knob that
exists outside the config. Defaults follow the reference operating points
(512/32 chunking, top-3 retrieval, 15 style exemplars, 3 conversation
turns, 3 refinement rounds, temperature 0.7).
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .errors import ConfigError
from .gateway import Gateway, GenerationParams, HttpChatBackend, MockChatBackend
from .retrieval import HashEmbeddingBackend, HttpEmbeddingBackend

DEFAULTS: dict[str, Any] = {
    "run_id": "",
    "seed": 0,
    "corpus": {
        "input": "data/mini_corpus",
        "user_questions": "data/user_questions.txt",
    },
    "chunking": {"size": 512, "overlap": 32},
    "retrieval": {
        "k": 3,
        "embedding": {
            "backend": "mock",
            "dim": 64,
            "endpoint": "",
            "model": "",
            "api_key_env": "CONVOFORGE_API_KEY",
        },
    },
    "generation": {
        "backend": "mock",
        "endpoint": "",
        "model": "",
        "api_key_env": "CONVOFORGE_API_KEY",
        "temperature": 0.7,
        "max_output_tokens": 1024,
        "stop_sequences": [],
        "retries": 3,
        "mock_script": "",
    },
    "judge": {
        "backend": "",  # empty = inherit the generation backend settings
        "endpoint": "",
        "model": "",
        "api_key_env": "CONVOFORGE_API_KEY",
        "temperature": 0.0,
        "max_output_tokens": 512,
    },
    "seeds": {"n_exemplars": 15, "grounding_min_overlap": 1},
    "conversation": {"max_turns": 3, "n_suggestions": 3},
    "cdr": {"rounds": 3, "threshold": 4.0},
    "concurrency": {"jobs": 4},
    "output": {"dir": "out"},
}

_BACKEND = {"type": "string", "enum": ["mock", "http"]}

CONFIG_SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "run_id": {"type": "string"},
        "seed": {"type": "integer"},
        "corpus": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "input": {"type": "string", "minLength": 1},
                "user_questions": {"type": "string", "minLength": 1},
            },
        },
        "chunking": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "size": {"type": "integer", "minimum": 1},
                "overlap": {"type": "integer", "minimum": 0},
            },
        },
        "retrieval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "embedding": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "backend": _BACKEND,
                        "dim": {"type": "integer", "minimum": 2},
                        "endpoint": {"type": "string"},
                        "model": {"type": "string"},
                        "api_key_env": {"type": "string"},
                    },
                },
            },
        },
        "generation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": _BACKEND,
                "endpoint": {"type": "string"},
                "model": {"type": "string"},
                "api_key_env": {"type": "string"},
                "temperature": {"type": "number", "minimum": 0},
                "max_output_tokens": {"type": "integer", "minimum": 1},
                "stop_sequences": {"type": "array", "items": {"type": "string"}},
                "retries": {"type": "integer", "minimum": 0},
                "mock_script": {"type": "string"},
            },
        },
        "judge": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "backend": {"type": "string", "enum": ["", "mock", "http"]},
                "endpoint": {"type": "string"},
                "model": {"type": "string"},
                "api_key_env": {"type": "string"},
                "temperature": {"type": "number", "minimum": 0},
                "max_output_tokens": {"type": "integer", "minimum": 1},
            },
        },
        "seeds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_exemplars": {"type": "integer", "minimum": 1},
                "grounding_min_overlap": {"type": "integer", "minimum": 0},
            },
        },
        "conversation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_turns": {"type": "integer", "minimum": 1},
                "n_suggestions": {"type": "integer", "minimum": 0},
            },
        },
        "cdr": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rounds": {"type": "integer", "minimum": 0},
                "threshold": {"type": "number", "minimum": 1, "maximum": 5},
            },
        },
        "concurrency": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"jobs": {"type": "integer", "minimum": 1}},
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string", "minLength": 1}},
        },
    },
}


def _deep_merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass(frozen=True)
class PipelineConfig:
    tree: dict[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.tree[key]

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def run_id(self) -> str:
        explicit = self.tree.get("run_id", "")
        if explicit:
            return explicit
        return "run-" + self.fingerprint()[:10]

    def fingerprint(self) -> str:
        """Hash of everything that affects artifacts (the output dir is not
        part of the data, so two runs into different dirs share an id)."""
        tree = copy.deepcopy(self.tree)
        tree.pop("output", None)
        tree.pop("run_id", None)
        canonical = json.dumps(tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def echo(self) -> dict[str, Any]:
        return copy.deepcopy(self.tree)

    @property
    def output_dir(self) -> Path:
        return Path(self.tree["output"]["dir"])

    @property
    def jobs(self) -> int:
        return self.tree["concurrency"]["jobs"]

    def generation_params(self) -> GenerationParams:
        gen = self.tree["generation"]
        return GenerationParams(
            temperature=gen["temperature"],
            max_output_tokens=gen["max_output_tokens"],
            stop_sequences=tuple(gen["stop_sequences"]),
            seed=self.seed,
        )

    def judge_params(self) -> GenerationParams:
        judge = self.tree["judge"]
        return GenerationParams(
            temperature=judge["temperature"],
            max_output_tokens=judge["max_output_tokens"],
            seed=self.seed,
        )


def validate_config_tree(tree: dict) -> None:
    try:
        jsonschema.validate(tree, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {path}: {exc.message}") from exc
    chunking = tree["chunking"]
    if chunking["overlap"] >= chunking["size"]:
        raise ConfigError("chunking.overlap must be smaller than chunking.size")


def load_config(path: Path | str | None = None, overrides: dict | None = None) -> PipelineConfig:
    """Merge defaults <- config file <- CLI overrides, then validate."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(raw) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        tree = _deep_merge(tree, loaded)
    if overrides:
        tree = _deep_merge(tree, overrides)
    validate_config_tree(tree)
    return PipelineConfig(tree=tree)


# ---------------------------------------------------------------------------
# Backend construction
# ---------------------------------------------------------------------------


def build_embedding_backend(config: PipelineConfig):
    emb = config["retrieval"]["embedding"]
    if emb["backend"] == "mock":
        return HashEmbeddingBackend(dim=emb["dim"], seed=config.seed)
    if not emb["endpoint"] or not emb["model"]:
        raise ConfigError("retrieval.embedding needs endpoint and model for the http backend")
    return HttpEmbeddingBackend(emb["endpoint"], emb["model"], api_key_env=emb["api_key_env"])


def _chat_backend(section: dict, seed: int):
    if section["backend"] == "mock":
        script = section.get("mock_script", "")
        if script:
            return MockChatBackend.from_file(script, seed=seed)
        return MockChatBackend(seed=seed)
    if not section["endpoint"] or not section["model"]:
        raise ConfigError("http chat backend needs endpoint and model")
    return HttpChatBackend(section["endpoint"], section["model"], api_key_env=section["api_key_env"])


def build_generation_gateway(config: PipelineConfig) -> Gateway:
    gen = config.tree["generation"]
    backend = _chat_backend(gen, config.seed)
    return Gateway(backend, retries=gen["retries"], concurrency=config.jobs)


def build_judge_gateway(config: PipelineConfig) -> Gateway:
    judge = dict(config.tree["judge"])
    gen = config.tree["generation"]
    if not judge["backend"]:
        judge = {**judge, "backend": gen["backend"], "endpoint": gen["endpoint"] or judge["endpoint"],
                 "model": gen["model"] or judge["model"], "mock_script": gen.get("mock_script", "")}
    judge.setdefault("mock_script", "")
    backend = _chat_backend(judge, config.seed)
    return Gateway(backend, retries=gen["retries"], concurrency=config.jobs)
