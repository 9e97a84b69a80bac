"""HTTP adapters for external captioning and sentence generation.

Both adapters POST JSON to a configured endpoint, retry once on failure, and
keep an offline cache keyed by the SHA-256 of the request body, so a cached
run never touches the network.

Wire format (request -> response)::

    {"task": "caption", "image_png_b64": ...}            -> {"caption": str}
    {"task": "sentences", "source": str, "target": str,
     "n": int}                                           -> {"source_sentences": [...],
                                                             "target_sentences": [...]}
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import tempfile
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from zerocon.textdir import CaptionError

CACHE_ENV = "ZEROCON_CACHE_DIR"
DEFAULT_TOKEN_ENV = "ZEROCON_BACKEND_TOKEN"


class BackendError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class BackendConfig:
    endpoint: str
    token_env: str = DEFAULT_TOKEN_ENV
    timeout: float = 30.0
    cache_dir: str | None = None

    def resolved_cache_dir(self) -> Path | None:
        d = self.cache_dir or os.environ.get(CACHE_ENV)
        return Path(d) if d else None


class ResponseCache:
    """Request-hash keyed JSON cache. Writes are serialized and atomic."""

    _lock = threading.Lock()

    def __init__(self, directory: Path | None):
        self.directory = directory

    @staticmethod
    def key(body: bytes) -> str:
        return hashlib.sha256(body).hexdigest()

    def get(self, body: bytes):
        if self.directory is None:
            return None
        path = self.directory / f"{self.key(body)}.json"
        if not path.is_file():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, body: bytes, response) -> None:
        if self.directory is None:
            return
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(response, f, sort_keys=True)
            os.replace(tmp, self.directory / f"{self.key(body)}.json")


class _JSONClient:
    def __init__(self, config: BackendConfig):
        self.config = config
        self.cache = ResponseCache(config.resolved_cache_dir())

    def call(self, payload: dict) -> dict:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        cached = self.cache.get(body)
        if cached is not None:
            return cached
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        errors = []
        for attempt in range(2):
            req = urllib.request.Request(self.config.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    result = json.loads(resp.read().decode("utf-8"))
                break
            except (urllib.error.URLError, TimeoutError, OSError, ValueError) as exc:
                errors.append(f"attempt {attempt + 1}: {exc}")
        else:
            raise BackendError(
                f"backend request to {self.config.endpoint} failed",
                {"endpoint": self.config.endpoint, "errors": errors, "task": payload.get("task")},
            )
        self.cache.put(body, result)
        return result


def _png_b64(image: np.ndarray) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HTTPCaptionProvider:
    def __init__(self, config: BackendConfig):
        self.client = _JSONClient(config)

    def caption(self, image: np.ndarray) -> str:
        try:
            result = self.client.call({"task": "caption", "image_png_b64": _png_b64(image)})
        except BackendError as exc:
            raise CaptionError(str(exc), exc.diagnostics) from exc
        text = result.get("caption") if isinstance(result, dict) else None
        if not isinstance(text, str) or not text.strip():
            raise CaptionError("backend returned no caption", {"response": result})
        return text


class HTTPSentenceGenerator:
    def __init__(self, config: BackendConfig):
        self.client = _JSONClient(config)

    def generate(self, source: str, target: str, n: int) -> tuple[list[str], list[str]]:
        result = self.client.call({"task": "sentences", "source": source, "target": target, "n": n})
        try:
            return list(result["source_sentences"]), list(result["target_sentences"])
        except (KeyError, TypeError):
            raise BackendError("malformed sentence response", {"response": result}) from None
