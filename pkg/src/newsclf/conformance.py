"""Protocol v1 conformance checks, runnable against any backend command.

The same checks gate both the scripted test fixture and real backends, so a
new backend can be validated with one call before it is wired into a run.
"""

from __future__ import annotations

import json
import subprocess

from .backend import (
    PROTOCOL_VERSION,
    BackendHandle,
    KNOWN_CAPABILITIES,
    handshake,
    request_classify,
    request_fill,
)
from .errors import ProtocolError

_CHECK_LABELS = ("alpha", "beta", "gamma")


def _expect(condition: bool, message: str) -> None:
    if not condition:
        raise ProtocolError(f"conformance failure: {message}")


def _raw_checks(argv: list[str], timeout_s: float) -> None:
    """Framing-level checks below the client library: id echo, malformed-line
    tolerance, clean exit on stream close."""
    process = subprocess.Popen(
        argv,
        stdin=subprocess.PIPE,
        stdout=subprocess.PIPE,
        text=True,
        encoding="utf-8",
        bufsize=1,
    )

    def roundtrip(raw_line: str) -> dict:
        process.stdin.write(raw_line + "\n")
        process.stdin.flush()
        line = process.stdout.readline()
        _expect(line != "", "backend closed its output mid-conversation")
        try:
            return json.loads(line)
        except json.JSONDecodeError as e:
            raise ProtocolError(f"conformance failure: unparseable reply {line!r}") from e

    try:
        reply = roundtrip(json.dumps({"id": 42, "op": "hello", "payload": {"version": PROTOCOL_VERSION}}))
        _expect(reply.get("id") == 42, f"hello reply id {reply.get('id')!r} != 42")
        _expect(reply.get("ok") is True, f"hello not ok: {reply!r}")
        result = reply.get("result", {})
        _expect(result.get("version") == PROTOCOL_VERSION, f"bad version in {result!r}")
        _expect(
            set(result.get("capabilities", [])) <= set(KNOWN_CAPABILITIES),
            f"unknown capabilities in {result!r}",
        )

        reply = roundtrip("{this is not json")
        _expect(reply.get("ok") is False, f"malformed line must get ok:false, got {reply!r}")

        reply = roundtrip(json.dumps({"id": 43, "op": "hello", "payload": {"version": PROTOCOL_VERSION}}))
        _expect(reply.get("id") == 43 and reply.get("ok") is True, "backend did not keep serving after a malformed line")

        process.stdin.close()
        try:
            code = process.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            raise ProtocolError("conformance failure: backend did not exit on stream close")
        _expect(code == 0, f"backend exited with {code} on clean stream close")
    finally:
        if process.poll() is None:
            process.kill()
            process.wait()


def check_protocol(argv: list[str], timeout_ms: int = 30000) -> frozenset[str]:
    """Run the full conformance suite against `argv`; returns the capability
    set on success, raises ProtocolError naming the first violation."""
    _raw_checks(argv, timeout_s=timeout_ms / 1000.0)

    with BackendHandle.spawn(argv, timeout_ms=timeout_ms) as handle:
        capabilities = handshake(handle)

        if "fill" in capabilities:
            tokens = request_fill(handle, "one [MASK] two [MASK] three")
            _expect(len(tokens) == 2, f"2 masks produced {len(tokens)} tokens")
            _expect(all(t for t in tokens), f"empty fill token in {tokens!r}")
            _expect(request_fill(handle, "no masks here") == [], "maskless fill must return []")

        if "classify" in capabilities:
            texts = ["one", "twotwo", "threethreethree"]
            batch = request_classify(handle, texts, _CHECK_LABELS)
            _expect(len(batch) == 3, f"batch of 3 produced {len(batch)} vectors")
            singles = [request_classify(handle, [t], _CHECK_LABELS)[0] for t in texts]
            _expect(
                batch == singles,
                "batch scores differ from one-at-a-time scores (order not preserved?)",
            )
            _expect(request_classify(handle, [], _CHECK_LABELS) == [], "empty batch must return []")

    return capabilities
