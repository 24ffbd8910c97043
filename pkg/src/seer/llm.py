"""Prompt assembly, an HTTP completion client, and a persistent response cache.

The client speaks the plain completions protocol (POST {model, prompt,
temperature, top_p, max_tokens}, first choice text consumed) against any
compatible endpoint.  Credentials come from an environment variable only.
A deterministic mock client ships for offline runs and tests: it returns
the gold program when some exemplar in the prompt shares the test
instance's gold attributes and a corrupted program otherwise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import requests

from .corpus import Instance, answer_lines, context_text

logger = logging.getLogger(__name__)

PROMPT_SEPARATOR = "\n\n---\n\n"
DEFAULT_API_KEY_ENV = "SEER_API_KEY"


class LlmError(RuntimeError):
    pass


class AuthError(LlmError):
    pass


class CapacityExceededError(LlmError):
    pass


class RetryExhaustedError(LlmError):
    pass


class OfflineMissError(LlmError):
    def __init__(self, digest: str):
        super().__init__(f"offline mode: no cached response for prompt digest {digest}")
        self.digest = digest


class CacheCollisionError(LlmError):
    pass


@dataclass(frozen=True)
class CompletionParams:
    model: str = "code-davinci-002"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 256

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class PromptSpec:
    exemplar_blocks: List[str]
    test_block: str
    separator: str = PROMPT_SEPARATOR

    def __post_init__(self):
        if not self.test_block:
            raise LlmError("test block must be non-empty")

    def render(self) -> str:
        if not self.exemplar_blocks:
            return self.test_block
        return self.separator.join(self.exemplar_blocks) + self.separator + self.test_block


def render_block(
    inst: Instance,
    selected_paragraphs: Optional[Sequence[int]] = None,
    include_answer: bool = False,
) -> str:
    """One prompt block: id line, context (paragraphs then table), question,
    and -- for exemplars -- the answer program lines."""
    lines = [f"# id: {inst.id}"]
    lines.append(context_text(inst, selected_paragraphs))
    lines.append(f"Question: {inst.question}")
    if include_answer:
        lines.extend(answer_lines(inst))
    return "\n".join(lines)


# --- HTTP client -------------------------------------------------------------


class HttpCompletionClient:
    """Completion client with retries, a concurrency cap, and an optional
    requests-per-minute throttle.  Safe for concurrent use."""

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        max_retries: int = 5,
        backoff_base: float = 0.5,
        max_concurrency: int = 4,
        requests_per_minute: Optional[float] = None,
        request_timeout: float = 120.0,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.request_timeout = request_timeout
        self._session = session or requests.Session()
        self._semaphore = threading.Semaphore(max_concurrency)
        self._throttle_lock = threading.Lock()
        self._next_allowed = 0.0
        self._min_interval = 60.0 / requests_per_minute if requests_per_minute else 0.0

    def _throttle(self) -> None:
        if self._min_interval <= 0:
            return
        with self._throttle_lock:
            now = time.monotonic()
            wait = self._next_allowed - now
            self._next_allowed = max(now, self._next_allowed) + self._min_interval
        if wait > 0:
            time.sleep(wait)

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(self.api_key_env, "")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def complete(self, prompt: str, params: CompletionParams) -> str:
        body = dict(params.to_dict(), prompt=prompt)
        last_error: Optional[str] = None
        with self._semaphore:
            for attempt in range(self.max_retries):
                self._throttle()
                try:
                    response = self._session.post(
                        self.endpoint,
                        json=body,
                        headers=self._headers(),
                        timeout=self.request_timeout,
                    )
                except requests.RequestException as exc:
                    last_error = str(exc)
                else:
                    if response.status_code in (401, 403):
                        raise AuthError(f"authentication failed ({response.status_code})")
                    if response.status_code == 400 and "context" in response.text.lower():
                        raise CapacityExceededError(response.text[:500])
                    if response.status_code == 200:
                        payload = response.json()
                        return payload["choices"][0]["text"]
                    if response.status_code not in (429,) and response.status_code < 500:
                        raise LlmError(
                            f"completion request rejected ({response.status_code}): "
                            f"{response.text[:500]}"
                        )
                    last_error = f"HTTP {response.status_code}"
                delay = self.backoff_base * (2**attempt)
                logger.warning(
                    "completion attempt %d/%d failed (%s); retrying in %.2fs",
                    attempt + 1,
                    self.max_retries,
                    last_error,
                    delay,
                )
                time.sleep(delay)
        raise RetryExhaustedError(
            f"completion failed after {self.max_retries} attempts: {last_error}"
        )


# --- response cache ----------------------------------------------------------


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def cache_key(prompt: str, params: CompletionParams) -> str:
    canonical = json.dumps(params.to_dict(), sort_keys=True)
    return _digest(params.model + "\x00" + canonical + "\x00" + prompt)


class ResponseCache:
    """Append-only JSON-lines cache keyed by (model, params, prompt) hash."""

    def __init__(self, path):
        self.path = Path(path)
        self._entries: Dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._entries[entry["key"]] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, prompt: str, params: CompletionParams) -> Optional[str]:
        entry = self._entries.get(cache_key(prompt, params))
        if entry is None:
            return None
        if entry["prompt_digest"] != _digest(prompt):
            raise CacheCollisionError(f"cache key collision for digest {entry['prompt_digest']}")
        return entry["response_text"]

    def store(self, prompt: str, params: CompletionParams, response_text: str) -> None:
        entry = {
            "key": cache_key(prompt, params),
            "model": params.model,
            "prompt_digest": _digest(prompt),
            "response_text": response_text,
            "created_at": time.time(),
        }
        with self._lock:
            self._entries[entry["key"]] = entry
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True))
                fh.write("\n")


def complete_cached(
    prompt: str,
    params: CompletionParams,
    cache: ResponseCache,
    client=None,
    offline: bool = False,
) -> str:
    """Serve from the cache, otherwise call the client and persist.  In
    offline mode a miss raises instead of calling out."""
    cached = cache.lookup(prompt, params)
    if cached is not None:
        return cached
    if offline or client is None:
        raise OfflineMissError(_digest(prompt))
    response = client.complete(prompt, params)
    cache.store(prompt, params, response)
    return response


# --- deterministic mock ------------------------------------------------------

_ID_LINE_RE = re.compile(r"^# id: (.+)$", re.MULTILINE)
_NUMBER_IN_CODE_RE = re.compile(r"(?<![\w.])(\d+(?:\.\d+)?)")


def _corrupt_program(text: str) -> str:
    """Perturb the first numeric operand; textual answers get a wrong span."""
    match = _NUMBER_IN_CODE_RE.search(text)
    if match:
        value = float(match.group(1)) + 1.0
        replacement = str(int(value)) if value == int(value) else repr(value)
        return text[: match.start(1)] + replacement + text[match.end(1) :]
    return "\n".join(
        f"# not {line[1:].strip()}" if line.startswith("#") else line
        for line in text.splitlines()
    )


class MockCompletionClient:
    """Attribute-sensitive stand-in for a real model.

    Code-generation prompts get the test instance's gold program when at
    least one exemplar block shares all of the test instance's gold
    attributes, and a corrupted program otherwise.  Attribute-instruction
    prompts get the gold attribute value.  Fully deterministic.
    """

    def __init__(self, instances: Mapping[str, Instance]):
        self.instances = dict(instances)
        self.calls = 0

    def _gold_attributes(self, inst: Instance) -> Dict[str, str]:
        attrs = {}
        if inst.gold_modality:
            attrs["modality"] = inst.gold_modality
        if inst.gold_answer_type:
            attrs["answer_type"] = inst.gold_answer_type
        return attrs

    def complete(self, prompt: str, params: CompletionParams) -> str:
        from .attributes import ANSWER_TYPE_INSTRUCTION, MODALITY_INSTRUCTION

        self.calls += 1
        ids = _ID_LINE_RE.findall(prompt)
        if not ids:
            raise LlmError("mock client needs '# id:' lines in the prompt")
        test_id = ids[-1].strip()
        inst = self.instances.get(test_id)
        if inst is None:
            raise LlmError(f"mock client has no instance {test_id!r}")
        if MODALITY_INSTRUCTION in prompt:
            return inst.gold_modality or "hybrid"
        if ANSWER_TYPE_INSTRUCTION in prompt:
            return (inst.gold_answer_type or "arithmetic").replace("_", "-")
        gold_attrs = self._gold_attributes(inst)
        answer = "\n".join(answer_lines(inst))
        if not gold_attrs:
            return answer
        for exemplar_id in ids[:-1]:
            exemplar = self.instances.get(exemplar_id.strip())
            if exemplar is None:
                continue
            exemplar_attrs = self._gold_attributes(exemplar)
            if all(exemplar_attrs.get(k) == v for k, v in gold_attrs.items()):
                return answer
        return _corrupt_program(answer)
