"""Protocol v1 serving loop around a pretrained checkpoint.

Wire format, one JSON object per line over stdin/stdout:

    request   {"id": <u64>, "op": "hello"|"fill"|"classify", "payload": ...}
    reply     {"id": <u64>, "ok": true,  "result": ...}
    reply     {"id": <u64>, "ok": false, "error": "<message>"}

A line that cannot be parsed into a request gets an ok:false reply with id 0
and the loop keeps serving; a clean close of stdin ends the process with
exit code 0. Requests are handled strictly one at a time.
"""

from __future__ import annotations

import contextlib
import json
import sys
from dataclasses import dataclass

PROTOCOL_VERSION = 1
MASK_SENTINEL = "[MASK]"
CAPABILITIES = ("fill", "classify")

# candidates inspected per mask before giving up on a presentable token
TOP_CANDIDATES = 10


@dataclass(frozen=True)
class BackendConfig:
    """What to serve: checkpoint name or path, device, truncation length."""

    model_name: str
    device: str = "cpu"
    max_length: int = 512

    def __post_init__(self):
        if not self.model_name:
            raise ValueError("model_name must be non-empty")
        if self.max_length <= 0:
            raise ValueError(f"max_length must be > 0, got {self.max_length}")


class RequestError(Exception):
    """A single request failed; the serving loop stays up."""


class ModelRuntime:
    """Tokenizer plus the two task heads loaded from one checkpoint.

    A checkpoint without classification weights gets a freshly initialized
    head (seeded, so repeated runs score identically); its width comes from
    the checkpoint's num_labels. Classify requests asking for more labels
    than the head provides are refused per request.
    """

    def __init__(self, tokenizer, mlm_model, cls_model, config: BackendConfig):
        self.tokenizer = tokenizer
        self.mlm_model = mlm_model
        self.cls_model = cls_model
        self.config = config

    @classmethod
    def load(cls, config: BackendConfig) -> "ModelRuntime":
        import torch
        from transformers import (
            AutoModelForMaskedLM,
            AutoModelForSequenceClassification,
            AutoTokenizer,
        )
        from transformers.utils import logging as hf_logging

        hf_logging.set_verbosity_error()
        hf_logging.disable_progress_bar()
        torch.manual_seed(0)
        # keep stray library prints off the protocol stream
        with contextlib.redirect_stdout(sys.stderr):
            tokenizer = AutoTokenizer.from_pretrained(config.model_name)
            mlm = AutoModelForMaskedLM.from_pretrained(config.model_name)
            classifier = AutoModelForSequenceClassification.from_pretrained(
                config.model_name
            )
        device = torch.device(config.device)
        mlm.to(device).eval()
        classifier.to(device).eval()
        return cls(tokenizer, mlm, classifier, config)

    def _encode(self, text: str):
        return self.tokenizer(
            text,
            return_tensors="pt",
            truncation=True,
            max_length=self.config.max_length,
        ).to(self.mlm_model.device)

    def _presentable_token(self, candidate_ids: list[int]) -> str:
        special = set(self.tokenizer.all_special_ids)
        for token_id in candidate_ids:
            if token_id in special:
                continue
            token = self.tokenizer.convert_ids_to_tokens(token_id)
            cleaned = (token or "").lstrip("#").strip()
            if cleaned:
                return cleaned
        return "unk"  # pathological vocabulary; the contract demands non-empty

    def fill(self, text: str) -> list[str]:
        import torch

        if not isinstance(text, str):
            raise RequestError("fill payload needs a string 'text'")
        n_masks = text.count(MASK_SENTINEL)
        if n_masks == 0:
            return []
        encoded = self._encode(text.replace(MASK_SENTINEL, self.tokenizer.mask_token))
        positions = (
            (encoded["input_ids"][0] == self.tokenizer.mask_token_id)
            .nonzero()
            .flatten()
            .tolist()
        )
        if len(positions) != n_masks:
            raise RequestError(
                f"{n_masks} mask sentinels but only {len(positions)} survive "
                f"truncation at max_length={self.config.max_length}"
            )
        with torch.no_grad():
            logits = self.mlm_model(**encoded).logits[0]
        tokens = []
        for position in positions:
            ranked = logits[position].argsort(descending=True)[:TOP_CANDIDATES]
            tokens.append(self._presentable_token(ranked.tolist()))
        return tokens

    def classify(self, texts, labels) -> list[list[float]]:
        import torch

        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            raise RequestError("classify payload needs a list of strings 'texts'")
        if not isinstance(labels, list) or not labels:
            raise RequestError("classify payload needs a non-empty list 'labels'")
        width = self.cls_model.config.num_labels
        if len(labels) > width:
            raise RequestError(
                f"{len(labels)} labels requested but the classification head "
                f"is {width} wide; fine-tune or resize the checkpoint"
            )
        vectors = []
        # one text per forward pass: batching changes float rounding, and the
        # protocol promises batch scores equal to one-at-a-time scores
        for text in texts:
            with torch.no_grad():
                logits = self.cls_model(**self._encode(text)).logits[0]
            scores = torch.softmax(logits[: len(labels)].double(), dim=0)
            vectors.append(scores.tolist())
        return vectors


def _reply(stream, payload: dict) -> None:
    stream.write(json.dumps(payload) + "\n")
    stream.flush()


def _dispatch(runtime: ModelRuntime, request_id: int, op, payload) -> dict:
    if op == "hello":
        return {
            "id": request_id,
            "ok": True,
            "result": {
                "version": PROTOCOL_VERSION,
                "capabilities": list(CAPABILITIES),
            },
        }
    try:
        if op == "fill":
            if not isinstance(payload, dict):
                raise RequestError("fill payload must be an object")
            return {"id": request_id, "ok": True, "result": runtime.fill(payload.get("text"))}
        if op == "classify":
            if not isinstance(payload, dict):
                raise RequestError("classify payload must be an object")
            return {
                "id": request_id,
                "ok": True,
                "result": runtime.classify(payload.get("texts"), payload.get("labels")),
            }
    except RequestError as e:
        return {"id": request_id, "ok": False, "error": str(e)}
    return {"id": request_id, "ok": False, "error": f"unknown op {op!r}"}


def serve(config: BackendConfig, stdin=None, stdout=None) -> int:
    """Answer requests until the input stream closes; returns the exit code."""
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    runtime = ModelRuntime.load(config)
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
            request_id = message["id"]
            op = message["op"]
            if not isinstance(request_id, int) or request_id < 0:
                raise ValueError("request id must be a non-negative integer")
        except (ValueError, KeyError, TypeError):
            _reply(stdout, {"id": 0, "ok": False, "error": "unparseable request line"})
            continue
        _reply(stdout, _dispatch(runtime, request_id, op, message.get("payload")))
    return 0
