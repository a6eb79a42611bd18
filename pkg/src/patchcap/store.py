"""Content-addressed response cache, filesystem backed.

Layout under the cache root:

    schema_version               store format marker
    index.jsonl                  append-only journal of writes
    {role}/{endpoint}/{digest}   response bytes, one file per entry

Entries are immutable once written; writers use create-then-rename so
concurrent puts (threads or processes on one host) are safe. By default
an entry is only served back to the endpoint that produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import time
from pathlib import Path
from typing import Optional, Union

from .errors import IntegrityError, StoreIoError

SCHEMA_VERSION = "1"

_SAFE_CHARS = re.compile(r"[^A-Za-z0-9._-]+")


def _endpoint_dirname(endpoint_id: str) -> str:
    safe = _SAFE_CHARS.sub("_", endpoint_id).strip("_")[:48] or "endpoint"
    suffix = hashlib.sha256(endpoint_id.encode("utf-8")).hexdigest()[:8]
    return f"{safe}-{suffix}"


class ResponseCache:
    def __init__(self, root: Union[str, Path], allow_cross_endpoint: bool = False):
        self.root = Path(root)
        self.allow_cross_endpoint = allow_cross_endpoint
        self._journal_lock = threading.Lock()
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            marker = self.root / "schema_version"
            if marker.exists():
                found = marker.read_text().strip()
                if found != SCHEMA_VERSION:
                    raise StoreIoError(
                        f"cache at {self.root} has schema_version {found!r}, "
                        f"expected {SCHEMA_VERSION!r}"
                    )
            else:
                marker.write_text(SCHEMA_VERSION + "\n")
        except OSError as exc:
            raise StoreIoError(f"cannot open cache at {self.root}: {exc}") from exc

    def _entry_path(self, role: str, endpoint_id: str, digest: str) -> Path:
        return self.root / role / _endpoint_dirname(endpoint_id) / digest

    def get(self, role: str, endpoint_id: str, digest: str) -> Optional[bytes]:
        path = self._entry_path(role, endpoint_id, digest)
        try:
            if path.exists():
                return path.read_bytes()
            if self.allow_cross_endpoint:
                role_dir = self.root / role
                if role_dir.is_dir():
                    for other in sorted(role_dir.iterdir()):
                        candidate = other / digest
                        if candidate.is_file():
                            return candidate.read_bytes()
        except OSError as exc:
            raise StoreIoError(f"cache read failed for {digest}: {exc}") from exc
        return None

    def put(self, role: str, endpoint_id: str, digest: str, payload: bytes) -> None:
        path = self._entry_path(role, endpoint_id, digest)
        try:
            if path.exists():
                existing = path.read_bytes()
                if existing != payload:
                    raise IntegrityError(
                        f"conflicting responses for {role}/{endpoint_id}/{digest}"
                    )
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp_name = tempfile.mkstemp(prefix=f".{digest[:12]}.", dir=path.parent)
            try:
                with os.fdopen(fd, "wb") as handle:
                    handle.write(payload)
                os.replace(tmp_name, path)
            except BaseException:
                try:
                    os.unlink(tmp_name)
                except OSError:
                    pass
                raise
        except IntegrityError:
            raise
        except OSError as exc:
            raise StoreIoError(f"cache write failed for {digest}: {exc}") from exc
        self._journal({"role": role, "endpoint_id": endpoint_id, "digest": digest})

    def _journal(self, record: dict) -> None:
        line = json.dumps({**record, "ts": time.time()}, sort_keys=True) + "\n"
        try:
            with self._journal_lock:
                with open(self.root / "index.jsonl", "a", encoding="utf-8") as handle:
                    handle.write(line)
        except OSError as exc:
            raise StoreIoError(f"cache journal append failed: {exc}") from exc

    def entry_count(self) -> int:
        count = 0
        for role_dir in self.root.iterdir():
            if role_dir.is_dir():
                for endpoint_dir in role_dir.iterdir():
                    if endpoint_dir.is_dir():
                        count += sum(1 for p in endpoint_dir.iterdir() if p.is_file())
        return count

    def clear(self) -> int:
        """Remove every cached entry. Returns the number removed."""
        removed = 0
        try:
            for role_dir in list(self.root.iterdir()):
                if not role_dir.is_dir():
                    continue
                for endpoint_dir in list(role_dir.iterdir()):
                    if not endpoint_dir.is_dir():
                        continue
                    for entry in list(endpoint_dir.iterdir()):
                        if entry.is_file():
                            entry.unlink()
                            removed += 1
                    endpoint_dir.rmdir()
                role_dir.rmdir()
            journal = self.root / "index.jsonl"
            if journal.exists():
                journal.unlink()
        except OSError as exc:
            raise StoreIoError(f"cache clear failed: {exc}") from exc
        return removed
