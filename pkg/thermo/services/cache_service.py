import asyncio
import json
import logging
import os
import tempfile
import time
from typing import Optional

from ..config import settings
from ..models import ThermoCurve
from .export_service import ExportService


def _atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(path)
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _sync_write_with_retries(path: str, data: bytes, attempts: int = 3, backoff: float = 0.1):
    last_exc = None
    for i in range(attempts):
        try:
            _atomic_write(path, data)
            return path
        except OSError as exc:
            last_exc = exc
            logging.exception("Cache write attempt %s failed for %s", i + 1, path)
            if i < attempts - 1:
                time.sleep(backoff * (2 ** i))
                continue
            raise last_exc


class RunCache:
    """Finished curves stored as JSON under ``<root>/<key[:2]>/<key>.json``.

    Keys are the SHA-256 hashes of canonical sweep points (toolkit version
    included), so a new release never reads an older release's entries.
    """

    def __init__(self, root: Optional[str] = None):
        self.root = root or settings.THERMO_CACHE_DIR
        self._lock: Optional[asyncio.Lock] = None
        self._lock_loop = None

    def path_for(self, key: str) -> str:
        return os.path.join(self.root, key[:2], f"{key}.json")

    def get(self, key: str) -> Optional[ThermoCurve]:
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                return ExportService.curve_from_payload(json.load(f))
        except (OSError, ValueError, KeyError):
            logging.exception("Ignoring unreadable cache entry %s", path)
            return None

    def put(self, key: str, curve: ThermoCurve) -> str:
        return _sync_write_with_retries(self.path_for(key), ExportService.dumps(ExportService.curve_payload(curve)))

    def get_value(self, key: str) -> Optional[float]:
        """Stored scalar (a calibration constant) or None."""
        path = self.path_for(key)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as f:
                return float(json.load(f)["value"])
        except (OSError, ValueError, KeyError, TypeError):
            logging.exception("Ignoring unreadable cache entry %s", path)
            return None

    def put_value(self, key: str, value: float, **inputs) -> str:
        payload = {"value": float(value), "inputs": inputs}
        return _sync_write_with_retries(self.path_for(key), ExportService.dumps(payload))

    def _writer_lock(self) -> asyncio.Lock:
        # asyncio locks are bound to the loop that first waits on them
        loop = asyncio.get_running_loop()
        if self._lock is None or self._lock_loop is not loop:
            self._lock, self._lock_loop = asyncio.Lock(), loop
        return self._lock

    async def aput(self, key: str, curve: ThermoCurve) -> str:
        async with self._writer_lock():
            return await asyncio.to_thread(self.put, key, curve)

    def clear(self, key: str) -> bool:
        path = self.path_for(key)
        if os.path.exists(path):
            os.remove(path)
            return True
        return False
