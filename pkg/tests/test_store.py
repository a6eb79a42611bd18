from __future__ import annotations

import multiprocessing
from concurrent.futures import ThreadPoolExecutor

import pytest

from patchcap.errors import IntegrityError, StoreIoError
from patchcap.store import ResponseCache


def _put_range(root: str, start: int, count: int) -> None:
    cache = ResponseCache(root)
    for i in range(start, start + count):
        cache.put("captioner", "ep", f"{i:064x}", f"{i}".encode())


@pytest.fixture
def cache(tmp_path):
    return ResponseCache(tmp_path / "cache")


class TestRoundTrip:
    def test_miss_on_empty(self, cache):
        assert cache.get("captioner", "ep", "d" * 64) is None

    def test_put_then_get(self, cache):
        cache.put("captioner", "ep", "d" * 64, b'{"x": 1}')
        assert cache.get("captioner", "ep", "d" * 64) == b'{"x": 1}'

    def test_roles_isolated(self, cache):
        cache.put("captioner", "ep", "d" * 64, b"a")
        assert cache.get("text_llm", "ep", "d" * 64) is None

    def test_survives_reopen(self, tmp_path):
        first = ResponseCache(tmp_path / "cache")
        first.put("captioner", "ep", "a" * 64, b"payload")
        second = ResponseCache(tmp_path / "cache")
        assert second.get("captioner", "ep", "a" * 64) == b"payload"

    def test_schema_version_file(self, tmp_path):
        ResponseCache(tmp_path / "cache")
        assert (tmp_path / "cache" / "schema_version").read_text().strip() == "1"

    def test_schema_mismatch_rejected(self, tmp_path):
        root = tmp_path / "cache"
        root.mkdir()
        (root / "schema_version").write_text("99\n")
        with pytest.raises(StoreIoError):
            ResponseCache(root)


class TestEndpointIsolation:
    def test_cross_endpoint_off_by_default(self, cache):
        cache.put("captioner", "ep-a", "d" * 64, b"a")
        assert cache.get("captioner", "ep-b", "d" * 64) is None

    def test_cross_endpoint_reuse_opt_in(self, tmp_path):
        cache = ResponseCache(tmp_path / "cache", allow_cross_endpoint=True)
        cache.put("captioner", "ep-a", "d" * 64, b"a")
        assert cache.get("captioner", "ep-b", "d" * 64) == b"a"


class TestPutSemantics:
    def test_idempotent_identical_put(self, cache):
        cache.put("captioner", "ep", "d" * 64, b"same")
        cache.put("captioner", "ep", "d" * 64, b"same")
        assert cache.get("captioner", "ep", "d" * 64) == b"same"

    def test_conflicting_bytes_raise(self, cache):
        cache.put("captioner", "ep", "d" * 64, b"one")
        with pytest.raises(IntegrityError):
            cache.put("captioner", "ep", "d" * 64, b"two")

    def test_concurrent_distinct_puts(self, cache):
        digests = [f"{i:064x}" for i in range(1000)]

        def put(digest: str):
            cache.put("captioner", "ep", digest, digest.encode())

        with ThreadPoolExecutor(max_workers=16) as pool:
            list(pool.map(put, digests))
        for digest in digests:
            assert cache.get("captioner", "ep", digest) == digest.encode()
        assert cache.entry_count() == 1000

    def test_concurrent_identical_puts(self, cache):
        def put(_):
            cache.put("captioner", "ep", "e" * 64, b"payload")

        with ThreadPoolExecutor(max_workers=8) as pool:
            list(pool.map(put, range(50)))
        assert cache.get("captioner", "ep", "e" * 64) == b"payload"

    def test_concurrent_puts_across_processes(self, tmp_path):
        root = str(tmp_path / "cache")
        ResponseCache(root)  # create the store before the workers race
        workers = [
            multiprocessing.Process(target=_put_range, args=(root, start, 50))
            for start in (0, 50, 100, 150)
        ]
        for worker in workers:
            worker.start()
        for worker in workers:
            worker.join()
            assert worker.exitcode == 0
        cache = ResponseCache(root)
        assert cache.entry_count() == 200
        for i in range(200):
            assert cache.get("captioner", "ep", f"{i:064x}") == f"{i}".encode()


class TestClear:
    def test_clear_removes_everything(self, cache):
        for i in range(5):
            cache.put("captioner", "ep", f"{i:064x}", b"x")
        assert cache.clear() == 5
        assert cache.entry_count() == 0
        assert cache.get("captioner", "ep", f"{0:064x}") is None
