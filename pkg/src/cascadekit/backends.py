"""Interchangeable refinement backends.

Four implementations of the same one-shot interface: a seeded test oracle
with tunable in-candidate accuracy, a replay backend that serves previously
recorded responses, a stub that always answers the first listed option, and
a remote HTTP backend speaking the de-facto chat-completion wire schema with
retries, backoff, and optional response recording.
"""

from __future__ import annotations

import base64
import json
import mimetypes
import os
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import requests

from .errors import (
    DigestMismatchError,
    MissingRecordingError,
    RemoteHTTPError,
    RemoteProtocolError,
    RemoteTimeoutError,
    ValidationError,
)
from .prompts import ImagePart, PromptBundle, TextPart


@dataclass
class RefinerResponse:
    text: str
    latency_ms: float = 0.0
    backend_meta: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class RefineContext:
    """Per-item context the engine hands to a backend.

    ``truth_label`` and ``rng`` exist for the deterministic test oracle only;
    production backends must ignore them (nothing from the context ever goes
    on the wire).
    """

    item_id: str
    prompt_digest: str
    truth_label: str | None = None
    rng: random.Random | None = None


class Refiner(Protocol):
    def refine(self, bundle: PromptBundle, ctx: RefineContext) -> RefinerResponse: ...


@dataclass
class OracleRefiner:
    """Deterministic test oracle.

    If the truth is among the rendered options it is returned with
    probability ``in_candidate_accuracy``, otherwise a uniformly random other
    option; if the truth is absent, a uniformly random option. Draws consume
    the per-item RNG from the context, and option choices are made over a
    canonically sorted option list, so the oracle is insensitive to the
    presentation order by construction.
    """

    in_candidate_accuracy: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.in_candidate_accuracy <= 1.0:
            raise ValidationError(
                f"in_candidate_accuracy must be in [0, 1], got {self.in_candidate_accuracy!r}"
            )

    def refine(self, bundle: PromptBundle, ctx: RefineContext) -> RefinerResponse:
        if ctx.rng is None:
            raise ValidationError("oracle refiner requires a seeded per-item rng in the context")
        options = sorted(bundle.candidate_labels)
        truth = ctx.truth_label
        if truth is not None and truth in bundle.candidate_labels:
            if ctx.rng.random() < self.in_candidate_accuracy:
                return RefinerResponse(text=truth, backend_meta={"backend": "oracle"})
            others = [option for option in options if option != truth]
            if not others:
                # k=1 with the truth as the only option: nothing else to pick.
                return RefinerResponse(text=truth, backend_meta={"backend": "oracle"})
            return RefinerResponse(
                text=others[ctx.rng.randrange(len(others))],
                backend_meta={"backend": "oracle"},
            )
        return RefinerResponse(
            text=options[ctx.rng.randrange(len(options))],
            backend_meta={"backend": "oracle"},
        )


class FirstCandidateRefiner:
    """Order-biased stub: always answers the first listed option.

    Under descending-probability presentation this reproduces base top-1
    behaviour exactly, which makes it the control arm of the option-order
    ablation.
    """

    def refine(self, bundle: PromptBundle, ctx: RefineContext) -> RefinerResponse:
        return RefinerResponse(text=bundle.candidate_labels[0], backend_meta={"backend": "first_candidate"})


class ReplayRefiner:
    """Serves recorded responses keyed by (item id, prompt digest).

    Replay runs must be complete: a missing item raises
    ``MissingRecordingError`` and an item recorded under a different prompt
    digest raises ``DigestMismatchError`` (the prompt changed since
    recording — re-record instead of silently answering a stale prompt).
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._by_key: dict[tuple[str, str], dict[str, Any]] = {}
        self._digests_by_item: dict[str, set[str]] = {}
        if not self.path.exists():
            raise ValidationError(f"replay file not found: {self.path}")
        with self.path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValidationError(f"{self.path}:{lineno}: invalid JSON in replay file: {exc}") from exc
                for key in ("item_id", "prompt_digest", "text"):
                    if key not in record:
                        raise ValidationError(f"{self.path}:{lineno}: replay record missing {key!r}")
                key = (record["item_id"], record["prompt_digest"])
                self._by_key[key] = record  # later recordings win
                self._digests_by_item.setdefault(record["item_id"], set()).add(record["prompt_digest"])

    def __len__(self) -> int:
        return len(self._by_key)

    def refine(self, bundle: PromptBundle, ctx: RefineContext) -> RefinerResponse:
        record = self._by_key.get((ctx.item_id, ctx.prompt_digest))
        if record is None:
            recorded = self._digests_by_item.get(ctx.item_id)
            if recorded:
                raise DigestMismatchError(
                    f"item {ctx.item_id!r}: recorded under digest(s) {sorted(recorded)}, "
                    f"requested {ctx.prompt_digest} (prompt changed since recording)"
                )
            raise MissingRecordingError(f"no recording for item {ctx.item_id!r} in {self.path}")
        return RefinerResponse(
            text=record["text"],
            latency_ms=float(record.get("latency_ms", 0.0)),
            backend_meta={"backend": "replay"},
        )


@dataclass
class EndpointConfig:
    """Connection settings for a chat-completion endpoint."""

    endpoint_url: str
    model: str
    max_tokens: int = 32
    timeout_ms: float = 30000.0
    max_retries: int = 3
    record_path: str | None = None
    api_key_env: str = "CASCADEKIT_API_KEY"
    backoff_base_ms: float = 250.0
    backoff_cap_ms: float = 8000.0
    inline_local_images: bool = True

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValidationError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.timeout_ms <= 0:
            raise ValidationError(f"timeout_ms must be positive, got {self.timeout_ms}")


def _image_url(ref: str, inline_local: bool) -> str:
    """Opaque image refs pass through as URLs; existing local files may be
    inlined as base64 data URLs so stock endpoints need no filesystem."""
    if inline_local and os.path.isfile(ref):
        mime = mimetypes.guess_type(ref)[0] or "application/octet-stream"
        payload = base64.b64encode(Path(ref).read_bytes()).decode("ascii")
        return f"data:{mime};base64,{payload}"
    return ref


def wire_payload(bundle: PromptBundle, config: EndpointConfig) -> dict[str, Any]:
    """Serialize a bundle into the chat-completion request document."""
    messages = []
    for message in bundle.messages:
        content: list[dict[str, Any]] = []
        for part in message.parts:
            if isinstance(part, TextPart):
                content.append({"type": "text", "text": part.text})
            elif isinstance(part, ImagePart):
                content.append(
                    {
                        "type": "image_url",
                        "image_url": {"url": _image_url(part.ref, config.inline_local_images)},
                    }
                )
        messages.append({"role": message.role, "content": content})
    return {"model": config.model, "messages": messages, "max_tokens": config.max_tokens}


class RemoteRefiner:
    """HTTP chat-completion client with retries and optional recording.

    Transport failures, timeouts, and non-2xx statuses are retried up to
    ``max_retries`` times with exponential backoff and jitter; a 2xx answer
    that does not follow the response schema is a protocol error and is not
    retried. The reported latency is wall time for the attempt loop, backoff
    included. Successful responses are appended to the replay file when
    ``record_path`` is set.
    """

    def __init__(self, config: EndpointConfig, session: requests.Session | None = None):
        self.config = config
        self._session = session or requests.Session()
        self._record_lock = threading.Lock()
        self._jitter = random.Random()
        if config.record_path:
            Path(config.record_path).parent.mkdir(parents=True, exist_ok=True)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.config.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _extract_text(self, body: Any) -> str:
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise RemoteProtocolError(f"response body does not follow the chat-completion schema: {exc}") from exc
        if not isinstance(content, str):
            raise RemoteProtocolError(f"message content is {type(content).__name__}, expected string")
        return content

    def refine(self, bundle: PromptBundle, ctx: RefineContext) -> RefinerResponse:
        payload = wire_payload(bundle, self.config)
        timeout_s = self.config.timeout_ms / 1000.0
        started = time.perf_counter()
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            try:
                response = self._session.post(
                    self.config.endpoint_url,
                    json=payload,
                    headers=self._headers(),
                    timeout=timeout_s,
                )
            except requests.Timeout as exc:
                last_error = RemoteTimeoutError(f"timeout after {self.config.timeout_ms}ms: {exc}")
            except requests.RequestException as exc:
                last_error = RemoteHTTPError(0, f"transport error: {exc}")
            else:
                if 200 <= response.status_code < 300:
                    try:
                        body = response.json()
                    except ValueError as exc:
                        raise RemoteProtocolError(f"response body is not JSON: {exc}") from exc
                    text = self._extract_text(body)
                    latency_ms = (time.perf_counter() - started) * 1000.0
                    result = RefinerResponse(
                        text=text,
                        latency_ms=latency_ms,
                        backend_meta={"backend": "remote", "status": response.status_code, "attempts": attempt + 1},
                    )
                    self._record(bundle, ctx, result)
                    return result
                last_error = RemoteHTTPError(
                    response.status_code, f"HTTP {response.status_code}: {response.text[:200]}"
                )
            if attempt < self.config.max_retries:
                delay_ms = min(
                    self.config.backoff_base_ms * (2**attempt), self.config.backoff_cap_ms
                ) * (1.0 + 0.25 * self._jitter.random())
                time.sleep(delay_ms / 1000.0)
        assert last_error is not None
        raise last_error

    def _record(self, bundle: PromptBundle, ctx: RefineContext, result: RefinerResponse) -> None:
        if not self.config.record_path:
            return
        line = json.dumps(
            {
                "item_id": ctx.item_id,
                "prompt_digest": ctx.prompt_digest,
                "text": result.text,
                "latency_ms": result.latency_ms,
            },
            separators=(", ", ": "),
        )
        with self._record_lock:
            with open(self.config.record_path, "a", encoding="utf-8") as handle:
                handle.write(line + "\n")
