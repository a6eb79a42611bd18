"""Run configuration: thresholds, mode, backend bindings, and hub wiring.

A config can be built in code, loaded from a JSON file, and adjusted by
environment variables; command-line flags take precedence over both
(flags > env > file, applied by the CLI).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

from .backends import (
    BackendHub,
    BackendRole,
    CallLedger,
    DEFAULT_CAPTION_PROMPT,
    EchoTransport,
    HttpChatTransport,
    HttpDetectorTransport,
    HttpScorerTransport,
    ROLE_KINDS,
    RetryPolicy,
    ScriptedTransport,
)
from .canonical import digest_of
from .errors import ConfigError
from .store import ResponseCache

ENV_CACHE_DIR = "PATCHCAP_CACHE_DIR"


class PipelineMode(Enum):
    FULL = "full"
    NO_SEMANTIC_PATCH = "no_semantic_patch"
    FOUR_EQUAL = "four_equal"
    NO_FILTERING = "no_filtering"
    NO_HIERARCHY = "no_hierarchy"
    GLOBAL_ONLY = "global_only"


MODE_NAMES = tuple(m.value for m in PipelineMode)


def api_key_env_var(role: BackendRole) -> str:
    return f"PATCHCAP_{role.value.upper()}_API_KEY"


@dataclass
class BackendSpec:
    """How to reach one backend role.

    kinds: ``chat`` / ``detector`` / ``itm`` are live HTTP endpoints,
    ``script`` replays a mock script file, ``echo`` answers with the user
    prompt (chat roles only), ``synthetic`` binds the rule-based benchmark
    backend for scene-blob images.
    """

    kind: str
    base_url: str = ""
    model: str = ""
    script: str = ""
    supports_seed: bool = True
    timeout: float = 60.0
    seed: int = 0
    error_model: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BackendSpec":
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "kind" not in known:
            raise ConfigError(f"backend spec missing 'kind': {data!r}")
        return cls(**known)


@dataclass
class RunConfig:
    mode: PipelineMode = PipelineMode.FULL
    k_candidates: int = 3
    conf_threshold: float = 0.3
    assign_threshold: float = 0.4
    iou_threshold: float = 0.4
    score_threshold: float = 0.3
    temperature: float = 0.7
    seed: int = 0
    caption_prompt: str = DEFAULT_CAPTION_PROMPT
    concise_prompt: str = "Describe this image in one short sentence."
    assign_metric: str = "coverage"
    expand_patches: bool = True
    semantic_trigger: str = "below"
    prompt_dir: Optional[str] = None
    cache_dir: Optional[str] = None
    max_inflight: int = 8
    max_retries: int = 3
    batch_workers: int = 4
    backends: dict[str, BackendSpec] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("conf_threshold", "assign_threshold", "iou_threshold", "score_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {value}")
        if self.k_candidates < 1:
            raise ConfigError(f"k_candidates must be >= 1, got {self.k_candidates}")
        if self.assign_metric not in ("coverage", "iou"):
            raise ConfigError(f"assign_metric must be 'coverage' or 'iou'")
        if self.semantic_trigger not in ("below", "above"):
            raise ConfigError(f"semantic_trigger must be 'below' or 'above'")
        unknown = set(self.backends) - {r.value for r in BackendRole}
        if unknown:
            raise ConfigError(f"unknown backend roles in config: {sorted(unknown)}")

    @property
    def filtering_enabled(self) -> bool:
        # k=1 leaves nothing to cross-compare, so it forces no-filtering semantics
        return self.mode is not PipelineMode.NO_FILTERING and self.k_candidates >= 2

    def to_dict(self) -> dict:
        data = {
            k: v
            for k, v in asdict(self).items()
            if k != "backends"
        }
        data["mode"] = self.mode.value
        data["backends"] = {role: spec.to_dict() for role, spec in self.backends.items()}
        return data

    def semantic_dict(self) -> dict:
        """Fields that affect outputs; operational knobs are excluded so the
        config digest is stable across worker counts and cache locations."""
        data = self.to_dict()
        for key in ("cache_dir", "max_inflight", "max_retries", "batch_workers"):
            data.pop(key, None)
        return data

    def digest(self) -> str:
        return digest_of(self.semantic_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "mode" in data:
            data["mode"] = parse_mode(data["mode"])
        if "backends" in data:
            data["backends"] = {
                role: BackendSpec.from_dict(spec) for role, spec in data["backends"].items()
            }
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)


def parse_mode(value: Union[str, PipelineMode]) -> PipelineMode:
    if isinstance(value, PipelineMode):
        return value
    try:
        return PipelineMode(str(value).strip().lower())
    except ValueError:
        raise ConfigError(
            f"unknown mode {value!r}; valid modes: {', '.join(MODE_NAMES)}"
        ) from None


def apply_env_overrides(config: RunConfig, env: Optional[dict] = None) -> RunConfig:
    env = env if env is not None else os.environ
    if env.get(ENV_CACHE_DIR):
        config.cache_dir = env[ENV_CACHE_DIR]
    return config


def required_roles(config: RunConfig) -> set[BackendRole]:
    mode = config.mode
    if mode is PipelineMode.GLOBAL_ONLY:
        return {BackendRole.CAPTIONER}
    roles = {BackendRole.CAPTIONER, BackendRole.TEXT_LLM, BackendRole.DETECTOR}
    if mode is not PipelineMode.NO_SEMANTIC_PATCH:
        roles.add(BackendRole.CONCISE_CAPTIONER)
    if config.filtering_enabled and mode is not PipelineMode.NO_HIERARCHY:
        roles.add(BackendRole.ITM_SCORER)
    return roles


def build_transport(role: BackendRole, spec: BackendSpec, env: Optional[dict] = None):
    env = env if env is not None else os.environ
    kind = ROLE_KINDS[role]
    api_key = env.get(api_key_env_var(role))
    if spec.kind == "chat":
        if kind != "chat":
            raise ConfigError(f"role {role.value} does not speak the chat protocol")
        if not spec.base_url:
            raise ConfigError(f"chat backend for {role.value} needs a base_url")
        return HttpChatTransport(
            base_url=spec.base_url,
            model=spec.model or "default",
            api_key=api_key,
            supports_seed=spec.supports_seed,
            timeout=spec.timeout,
        )
    if spec.kind == "detector":
        if role is not BackendRole.DETECTOR:
            raise ConfigError(f"detector backend bound to non-detector role {role.value}")
        return HttpDetectorTransport(spec.base_url, api_key=api_key, timeout=spec.timeout)
    if spec.kind == "itm":
        if role is not BackendRole.ITM_SCORER:
            raise ConfigError(f"itm backend bound to non-scorer role {role.value}")
        return HttpScorerTransport(spec.base_url, api_key=api_key, timeout=spec.timeout)
    if spec.kind == "script":
        if not spec.script:
            raise ConfigError(f"script backend for {role.value} needs a script path")
        return ScriptedTransport.from_file(
            kind,
            spec.script,
            endpoint_id=f"mock:{role.value}:{Path(spec.script).name}",
            supports_seed=spec.supports_seed,
        )
    if spec.kind == "echo":
        if kind != "chat":
            raise ConfigError(f"echo backend only fits chat roles, not {role.value}")
        return EchoTransport(endpoint_id=f"mock:echo:{role.value}")
    if spec.kind == "synthetic":
        # imported lazily: synthbench itself builds on this module
        from .synthbench import ErrorModel, synthetic_role_transport

        try:
            error_model = ErrorModel(**spec.error_model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad error_model for {role.value}: {exc}") from exc
        return synthetic_role_transport(role, error_model, spec.seed)
    raise ConfigError(f"unknown backend kind {spec.kind!r} for role {role.value}")


def build_hub(
    config: RunConfig,
    ledger: Optional[CallLedger] = None,
    cache: Optional[ResponseCache] = None,
    env: Optional[dict] = None,
) -> BackendHub:
    transports = {}
    for role_name, spec in config.backends.items():
        role = BackendRole(role_name)
        transports[role] = build_transport(role, spec, env=env)
    missing = required_roles(config) - set(transports)
    if missing:
        raise ConfigError(
            f"mode {config.mode.value!r} needs backends for: "
            f"{', '.join(sorted(r.value for r in missing))}"
        )
    if cache is None and config.cache_dir:
        cache = ResponseCache(config.cache_dir)
    retry = RetryPolicy(max_retries=config.max_retries)
    return BackendHub(
        transports,
        ledger=ledger,
        cache=cache,
        retry=retry,
        max_inflight=config.max_inflight,
    )
