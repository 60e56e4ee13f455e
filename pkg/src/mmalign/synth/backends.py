"""Text-generation backends.

``MockBackend`` is a pure function of (seed, prompt) and is what the tests and
the default CLI use. ``RemoteBackend`` talks to an OpenAI-style
chat-completions endpoint:

    POST {MMM_LLM_ENDPOINT}/chat/completions
    Authorization: Bearer {MMM_LLM_KEY}
    {"model": ..., "messages": [{"role": "user", "content": prompt}], "temperature": ...}

and reads ``choices[0].message.content`` from the response.
"""

from __future__ import annotations

import hashlib
import json
import os
import urllib.error
import urllib.request
from typing import Callable, Optional, Protocol

ENDPOINT_ENV = "MMM_LLM_ENDPOINT"
KEY_ENV = "MMM_LLM_KEY"


class BackendError(RuntimeError):
    """Generation failed; safe to retry with the same prompt."""

    retryable = True

    def __init__(self, message: str, prompt: str):
        super().__init__(message)
        self.prompt = prompt


class LLMBackend(Protocol):
    def generate(self, prompt: str) -> str: ...


Translator = Callable[[str], str]


def identity_translator(text: str) -> str:
    return text


_WORDS = (
    "audio picture related context speaker topic image sound scene person place "
    "food market road car music voice table street phone money city house weather "
    "both neither similar different describes shows mentions discusses features "
    "because while although however also the a of and in on with about"
).split()


class MockBackend:
    """Deterministic filler text keyed by a hash of the prompt."""

    def __init__(self, seed: int = 0, min_words: int = 6, max_words: int = 14):
        self.seed = seed
        self.min_words = min_words
        self.max_words = max_words

    def generate(self, prompt: str) -> str:
        digest = hashlib.sha256(f"{self.seed}\x00{prompt}".encode("utf-8")).digest()
        stream = digest
        while len(stream) < 64:
            stream += hashlib.sha256(stream).digest()
        n = self.min_words + stream[0] % (self.max_words - self.min_words + 1)
        words = [_WORDS[stream[1 + i] % len(_WORDS)] for i in range(n)]
        text = " ".join(words)
        if prompt.rstrip().endswith("generate questions based on context above"):
            # seed-question prompts get a short list, one question per line
            k = 2 + stream[40] % 3
            return "\n".join(f"{' '.join(words[i:i + 5])} ?" for i in range(k))
        return text[0].upper() + text[1:] + "."


class RemoteBackend:
    def __init__(
        self,
        endpoint: Optional[str] = None,
        key: Optional[str] = None,
        model: str = "mistralai/Mixtral-8x7B-Instruct-v0.1",
        temperature: float = 0.7,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        self.key = key if key is not None else os.environ.get(KEY_ENV, "")
        if not self.endpoint:
            raise ValueError(f"remote backend needs an endpoint; set {ENDPOINT_ENV}")
        self.model = model
        self.temperature = temperature
        self.timeout = timeout

    def request_body(self, prompt: str) -> dict:
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        }

    def generate(self, prompt: str) -> str:
        req = urllib.request.Request(
            self.endpoint.rstrip("/") + "/chat/completions",
            data=json.dumps(self.request_body(prompt)).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.key}"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode("utf-8"))
            return payload["choices"][0]["message"]["content"]
        except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as e:
            raise BackendError(f"remote generation failed: {e}", prompt) from e


def make_backend(kind: str, seed: int = 0) -> LLMBackend:
    if kind == "mock":
        return MockBackend(seed)
    if kind == "remote":
        return RemoteBackend()
    raise ValueError(f"unknown backend {kind!r}")
