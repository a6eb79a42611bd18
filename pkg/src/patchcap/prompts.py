"""Prompt template loading and rendering.

Templates are plain-text files in a prompts directory, one per pipeline
operation, with ``{{placeholder}}`` slots filled by the caller. A default
set ships with the package; a run config can point at a replacement
directory to restyle every LLM interaction without touching code.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigError

DEFAULT_TEMPLATE_DIR = Path(__file__).parent / "prompt_templates"

_PLACEHOLDER = re.compile(r"\{\{(\w+)\}\}")

TEMPLATE_NAMES = (
    "classify",
    "classify_examples",
    "intra_merge",
    "semantic_inject",
    "pair_merge",
    "global_fusion",
    "overlap_labels",
)


class PromptLibrary:
    def __init__(self, directory: Optional[Union[str, Path]] = None):
        self.directory = Path(directory) if directory else DEFAULT_TEMPLATE_DIR
        if not self.directory.is_dir():
            raise ConfigError(f"prompt directory does not exist: {self.directory}")
        self._cache: dict[str, str] = {}

    def raw(self, name: str) -> str:
        if name not in self._cache:
            path = self.directory / f"{name}.txt"
            if not path.is_file():
                # fall back to the shipped template so a partial override
                # directory only needs to contain the files it changes
                path = DEFAULT_TEMPLATE_DIR / f"{name}.txt"
            if not path.is_file():
                raise ConfigError(f"missing prompt template: {name}.txt")
            self._cache[name] = path.read_text(encoding="utf-8")
        return self._cache[name]

    def render(self, name: str, **values: str) -> str:
        text = self.raw(name)

        def substitute(match: re.Match) -> str:
            key = match.group(1)
            if key not in values:
                raise ConfigError(f"template {name!r} needs a value for {{{{{key}}}}}")
            return str(values[key])

        return _PLACEHOLDER.sub(substitute, text).strip() + "\n"
