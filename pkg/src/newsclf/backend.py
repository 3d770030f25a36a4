"""Client for out-of-process model backends over a line-delimited protocol.

Protocol v1: one JSON object per line, UTF-8. Requests are
``{"id":<u64>,"op":"hello"|"fill"|"classify","payload":...}`` and replies
``{"id":<u64>,"ok":true,"result":...}`` or
``{"id":<u64>,"ok":false,"error":"<msg>"}``. Ids are strictly increasing per
handle; replies may arrive out of order and are re-associated by id.

Failure discipline: a reply that violates the framing poisons the handle and
raises immediately; a backend that stops replying (including by dying) raises
a timeout once the configured deadline passes, never earlier and never hangs.
"""

from __future__ import annotations

import json
import logging
import subprocess
import threading
import time
from pathlib import Path

from .errors import (
    BackendError,
    BackendTimeout,
    FormatError,
    ProtocolError,
    ValidationError,
)

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MASK_SENTINEL = "[MASK]"
KNOWN_CAPABILITIES = frozenset({"fill", "classify"})
DEFAULT_TIMEOUT_MS = 30000


class BackendHandle:
    """One child process speaking protocol v1 over its standard streams.

    Writes are serialized under a lock; a reader thread files replies by id,
    so several threads may issue requests against one handle.
    """

    def __init__(self, process: subprocess.Popen, timeout_ms: int = DEFAULT_TIMEOUT_MS):
        if timeout_ms < 1:
            raise ValidationError(f"timeout_ms must be positive, got {timeout_ms}")
        self.process = process
        self.timeout_ms = timeout_ms
        self.capabilities: frozenset[str] | None = None
        self._write_lock = threading.Lock()
        self._cond = threading.Condition()
        self._responses: dict[int, dict] = {}
        self._next_id = 1
        self._eof_reason: str | None = None
        self._poison: str | None = None
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    @classmethod
    def spawn(cls, argv: list[str], timeout_ms: int = DEFAULT_TIMEOUT_MS) -> "BackendHandle":
        process = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            encoding="utf-8",
            bufsize=1,
        )
        return cls(process, timeout_ms)

    def _read_loop(self) -> None:
        stream = self.process.stdout
        for line in stream:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                msg_id = msg["id"]
                if not isinstance(msg_id, int) or not isinstance(msg.get("ok"), bool):
                    raise ValueError("bad reply shape")
            except (ValueError, KeyError, TypeError):
                with self._cond:
                    self._poison = f"backend sent an unparseable line: {line[:200]!r}"
                    self._cond.notify_all()
                return
            with self._cond:
                if msg_id in self._responses:
                    self._poison = f"duplicate reply for id {msg_id}"
                    self._cond.notify_all()
                    return
                self._responses[msg_id] = msg
                self._cond.notify_all()
        code = self.process.poll()
        with self._cond:
            self._eof_reason = f"backend closed its output (exit code {code})"
            self._cond.notify_all()

    def _request(self, op: str, payload) -> dict | list:
        with self._write_lock:
            request_id = self._next_id
            self._next_id += 1
            line = json.dumps(
                {"id": request_id, "op": op, "payload": payload}, ensure_ascii=False
            )
            try:
                self.process.stdin.write(line + "\n")
                self.process.stdin.flush()
            except (OSError, ValueError):
                # dead pipe; the wait below reports it at the deadline
                pass
        deadline = time.monotonic() + self.timeout_ms / 1000.0
        with self._cond:
            while request_id not in self._responses:
                if self._poison:
                    raise ProtocolError(self._poison)
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    detail = f" ({self._eof_reason})" if self._eof_reason else ""
                    raise BackendTimeout(
                        f"no reply to request {request_id} ({op}) within "
                        f"{self.timeout_ms} ms{detail}"
                    )
                self._cond.wait(remaining)
            msg = self._responses.pop(request_id)
        if msg["ok"] is not True:
            raise BackendError(f"backend error for {op}: {msg.get('error', '<no message>')}")
        if "result" not in msg:
            raise ProtocolError(f"ok reply without result for {op}")
        return msg["result"]

    def _require(self, capability: str) -> None:
        if self.capabilities is None:
            raise BackendError("handshake required before issuing requests")
        if capability not in self.capabilities:
            raise BackendError(f"backend does not advertise {capability!r}")

    def close(self) -> None:
        try:
            if self.process.stdin and not self.process.stdin.closed:
                self.process.stdin.close()
        except OSError:
            pass
        try:
            self.process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self.process.kill()
            self.process.wait()
        self._reader.join(timeout=5)

    def __enter__(self) -> "BackendHandle":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def handshake(handle: BackendHandle) -> frozenset[str]:
    """Exchange hello messages; pins protocol version and capability set."""
    result = handle._request("hello", {"version": PROTOCOL_VERSION})
    if not isinstance(result, dict):
        raise ProtocolError(f"hello result must be an object, got {type(result).__name__}")
    version = result.get("version")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(
            f"backend speaks protocol version {version!r}, this client speaks "
            f"{PROTOCOL_VERSION}"
        )
    raw = result.get("capabilities")
    if not isinstance(raw, list):
        raise ProtocolError("hello result lacks a capabilities list")
    capabilities = frozenset(raw)
    unknown = capabilities - KNOWN_CAPABILITIES
    if unknown:
        raise ProtocolError(f"backend advertises unknown capabilities {sorted(unknown)}")
    handle.capabilities = capabilities
    return capabilities


def request_fill(handle: BackendHandle, text: str) -> list[str]:
    """One fill token per mask sentinel in `text`, in sentinel order."""
    handle._require("fill")
    n_masks = text.count(MASK_SENTINEL)
    result = handle._request("fill", {"text": text})
    if not isinstance(result, list) or not all(isinstance(t, str) for t in result):
        raise ProtocolError("fill result must be a list of strings")
    if len(result) != n_masks:
        raise ProtocolError(
            f"fill returned {len(result)} tokens for {n_masks} mask sentinels"
        )
    return result


def request_classify(handle: BackendHandle, texts: list[str], label_space) -> list[list[float]]:
    """Score vector (one real per label) for each text, in input order."""
    handle._require("classify")
    labels = list(getattr(label_space, "labels", label_space))
    result = handle._request("classify", {"texts": list(texts), "labels": labels})
    if not isinstance(result, list) or len(result) != len(texts):
        got = len(result) if isinstance(result, list) else type(result).__name__
        raise ProtocolError(f"classify returned {got} vectors for {len(texts)} texts")
    for row, vector in enumerate(result):
        if (
            not isinstance(vector, list)
            or len(vector) != len(labels)
            or not all(isinstance(x, (int, float)) for x in vector)
        ):
            raise ProtocolError(
                f"classify vector {row} is not a list of {len(labels)} numbers"
            )
    return [[float(x) for x in vector] for vector in result]


def load_registry(path: Path | str) -> dict[str, str]:
    """language → model name, from a two-column TSV."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise FormatError(f"cannot read registry {path}: {e}") from e
    registry: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2 or not fields[0] or not fields[1]:
            raise FormatError(
                f"{path}:{lineno}: expected 'language<TAB>model_name', got {line!r}"
            )
        language, model_name = fields
        if language in registry:
            raise ValidationError(f"{path}:{lineno}: duplicate language {language!r}")
        registry[language] = model_name
    return registry


def default_registry_path() -> Path:
    return Path(__file__).parent / "data" / "registry.tsv"
